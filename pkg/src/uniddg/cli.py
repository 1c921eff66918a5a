"""Command-line entry point: ``uniddg <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from uniddg.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config
from uniddg.data import (
    CenterManifest, ManifestError, ProtocolError, load_manifest, loco_split, pooled_train,
    synth_generate, within_center_split,
)
from uniddg.metrics import aggregate_report, write_per_image, write_report
from uniddg.plotting import plot_loss_curves, plot_recon_grid, plot_report
from uniddg.training import (
    NonFiniteLossError, evaluate_samples, load_checkpoint, load_samples, model_from_checkpoint,
    reconstruct_batch, eval_item, train,
)

log = logging.getLogger("uniddg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class MismatchError(ValueError):
    pass


def method_name(exp: ExperimentConfig):
    off = [n for n, on in (("EMA", exp.train.enable_ema), ("SA", exp.train.enable_sa)) if not on]
    return exp.method + (f" w/o {', '.join(off)}" if off else "")


def load_all_manifests(exp: ExperimentConfig) -> CenterManifest:
    if not exp.manifests:
        raise ConfigError("config lists no manifests")
    merged = None
    for p in exp.manifests:
        m = load_manifest(p)
        merged = m if merged is None else merged + m
    ids = [e.id for e in merged.entries]
    if len(ids) != len(set(ids)):
        raise ManifestError("duplicate ids across manifests")
    return merged


def _report_centers(exp, manifest):
    return list(exp.centers) if exp.centers else manifest.centers


def _evaluate_and_report(model, manifest, test_entries, exp, out_dir, centers, history=None):
    samples = load_samples(manifest, test_entries, exp, for_training=False)
    results = evaluate_samples(model, samples, exp)
    report = aggregate_report(results, centers, exp.num_classes, method_name(exp))
    paths = write_report(report, out_dir)
    write_per_image(results, Path(out_dir) / "per_image.csv")
    plot_report(report, Path(out_dir) / "report.png")
    if history:
        plot_loss_curves(history, Path(out_dir) / "loss_curves.png")
    return report, results, paths


def _train_on(exp, manifest, entries, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(exp, out_dir / "config_used.yaml")
    pool = load_samples(manifest, entries, exp, for_training=True)
    log.info("training on %d pooled images", len(pool))
    return train(exp, pool, out_dir)


def run_train(exp: ExperimentConfig, out_dir):
    manifest = load_all_manifests(exp)
    entries = pooled_train(manifest)
    if not entries:
        raise ProtocolError("no training entries in the manifests")
    result = _train_on(exp, manifest, entries, out_dir)
    plot_loss_curves(result.history, Path(out_dir) / "loss_curves.png")
    return result


def run_loco(exp: ExperimentConfig, target, out_dir):
    manifest = load_all_manifests(exp)
    train_entries, test_entries = loco_split(manifest, target)
    result = _train_on(exp, manifest, train_entries, out_dir)
    report, results, _ = _evaluate_and_report(
        result.model, manifest, test_entries, exp, out_dir, _report_centers(exp, manifest), result.history
    )
    return result, report, results


def run_within_center(exp: ExperimentConfig, center, out_dir):
    manifest = load_all_manifests(exp)
    train_entries, test_entries = within_center_split(manifest, center)
    result = _train_on(exp, manifest, train_entries, out_dir)
    report, results, _ = _evaluate_and_report(
        result.model, manifest, test_entries, exp, out_dir, _report_centers(exp, manifest), result.history
    )
    return result, report, results


def run_eval(checkpoint, manifest_path, out_dir, exp: ExperimentConfig | None = None):
    ckpt = load_checkpoint(checkpoint)
    trained = config_from_dict(ckpt["config"])
    exp = exp or trained
    trained_c = ckpt["model_config"]["num_classes"]
    manifest = load_manifest(manifest_path)
    declared = manifest.declared_num_classes()
    for name, c in (("manifest", declared), ("config", exp.num_classes)):
        if c is not None and c != trained_c:
            raise MismatchError(f"checkpoint was trained with C={trained_c} but the {name} declares C={c}")
    exp = dataclasses.replace(exp, num_classes=trained_c)
    model = model_from_checkpoint(ckpt)
    test_entries = manifest.select(split="test")
    if not test_entries:
        raise ProtocolError(f"{manifest_path} has no test entries")
    samples = load_samples(manifest, test_entries, exp, for_training=False)
    for s in samples:
        if s.labels.max() >= trained_c:
            raise MismatchError(f"mask for {s.id!r} has label {int(s.labels.max())} but C={trained_c}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = evaluate_samples(model, samples, exp)
    centers = list(exp.centers) if exp.centers else manifest.centers
    report = aggregate_report(results, centers, trained_c, method_name(exp))
    write_report(report, out_dir)
    write_per_image(results, out_dir / "per_image.csv")
    plot_report(report, out_dir / "report.png")
    return report, results


def run_dump_recon(checkpoint, exp: ExperimentConfig, out_dir, batch_size=None, split="train"):
    """Write one PNG grid plus per-panel PNGs for the first batch of the pool."""
    from PIL import Image as PILImage

    from uniddg.core import Batch, denormalize_uint8
    import torch

    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    manifest = load_all_manifests(exp)
    entries = manifest.select(split=split)[: batch_size or exp.train.batch_size]
    if not entries:
        raise ProtocolError(f"no {split} entries to dump")
    samples = load_samples(manifest, entries, exp, for_training=False)
    pairs = [eval_item(s, exp) for s in samples]
    batch = Batch([p[0] for p in pairs], [p[1] for p in pairs])
    generator = torch.Generator().manual_seed(exp.train.seed)
    panels, _ = reconstruct_batch(model, batch, exp.train, generator)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [s.id for s in samples]
    for key, imgs in panels.items():
        for i, item in enumerate(ids):
            arr = denormalize_uint8(imgs[i].numpy().transpose(1, 2, 0))
            PILImage.fromarray(arr, "RGB").save(out_dir / f"{item}_{key}.png")
    plot_recon_grid(panels, out_dir / "recon_grid.png", ids)
    return panels


# -- argument handling -------------------------------------------------------

def _load_exp(args):
    exp = load_config(args.config)
    train_cfg = exp.train
    if getattr(args, "seed", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if getattr(args, "no_ema", False):
        train_cfg = dataclasses.replace(train_cfg, enable_ema=False)
    if getattr(args, "no_sa", False):
        train_cfg = dataclasses.replace(train_cfg, enable_sa=False)
    return dataclasses.replace(exp, train=train_cfg)


def _print_report(report):
    cols = report["columns"]
    for metric in ("dice", "assd"):
        row = report[metric]
        cells = ", ".join(f"{c}={row[c]:.2f}" for c in cols if not np.isnan(row[c]))
        print(f"{metric}: {cells}")


def cmd_train(args):
    result = run_train(_load_exp(args), args.out)
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint}")


def cmd_loco(args):
    _, report, _ = run_loco(_load_exp(args), args.target_center, args.out)
    _print_report(report)


def cmd_within_center(args):
    _, report, _ = run_within_center(_load_exp(args), args.center, args.out)
    _print_report(report)


def cmd_eval(args):
    exp = _load_exp(args) if args.config else None
    report, _ = run_eval(args.checkpoint, args.manifest, args.out, exp)
    _print_report(report)


def cmd_synth(args):
    out = Path(args.out)
    manifest = synth_generate(args.centers, args.per_center, args.size, args.seed, out)
    exp = config_from_dict({
        "task": "synthetic",
        "num_classes": 3,
        "centers": manifest.centers,
        "manifests": ["manifest.jsonl"],
        "train": {"crop_size": args.size, "resize_size": args.size, "seed": args.seed},
    })
    exp.manifests = ["manifest.jsonl"]
    dump_config(exp, out / "config.yaml")
    print(f"wrote {len(manifest)} pairs to {out}")


def cmd_dump_recon(args):
    panels = run_dump_recon(args.checkpoint, _load_exp(args), args.out, args.batch_size)
    print(f"wrote panels {sorted(panels)} to {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="uniddg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--no-ema", action="store_true", help="disable expansion-mask attention")
        sp.add_argument("--no-sa", action="store_true", help="disable style augmentation")

    sp = sub.add_parser("train", help="train on every train-split entry, pooled")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("loco", help="leave-one-center-out train + evaluate")
    common(sp)
    sp.add_argument("--target-center", required=True)
    sp.set_defaults(func=cmd_loco)

    sp = sub.add_parser("within-center", help="train and test inside one center")
    common(sp)
    sp.add_argument("--center", required=True)
    sp.set_defaults(func=cmd_within_center)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test split")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="generate a synthetic multi-center phantom set")
    sp.add_argument("--centers", type=int, default=3)
    sp.add_argument("--per-center", type=int, default=40)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("dump-recon", help="write x, x', swapped and random-style panels")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--batch-size", type=int)
    sp.set_defaults(func=cmd_dump_recon)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, MismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ManifestError, ProtocolError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
