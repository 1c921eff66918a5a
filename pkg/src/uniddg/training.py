"""One UniDDG iteration, the outer training loop, checkpoints and inference."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from uniddg.config import ExperimentConfig, TrainConfig
from uniddg.core import Batch, Image, LabelMask, validate_batch
from uniddg.data import (
    apply_bda, draw_bda_params, item_rng, preprocess_fundus, preprocess_prostate, read_raw,
)
from uniddg.losses import COMPONENTS, LossBreakdown, compose_total, dice_loss, l1_mean, masked_recon_loss
from uniddg.masks import expansion_masks
from uniddg.networks import ModelBundle, ModelConfig, build_model, sample_style

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value, step=None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"loss term {term!r} is non-finite ({value}){where}")
        self.term = term


# -- style exchange helpers --------------------------------------------------

def exchange_permutation(n, policy="random-derangement", generator=None):
    """Return ``(perm, skip)``; ``perm[i]`` is the image whose style image i receives.

    For n >= 2 the permutation has no fixed points (except under the
    ``identity`` test policy). For n == 1 the identity comes back with
    ``skip=True`` so the swap losses are left out.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if n == 1:
        return torch.zeros(1, dtype=torch.long), True
    if policy == "identity":
        return torch.arange(n), False
    if policy == "backward-cyclic":
        return (torch.arange(n) - 1) % n, False
    if policy != "random-derangement":
        raise ValueError(f"unknown swap policy {policy!r}")
    idx = torch.arange(n)
    while True:
        perm = torch.randperm(n, generator=generator)
        if not torch.any(perm == idx):
            return perm, False


def random_style(n, z, generator=None, dtype=torch.float32):
    """Style codes with every element uniform on [-1, 1]."""
    return torch.rand((n, z), generator=generator, dtype=dtype) * 2 - 1


# -- one iteration -----------------------------------------------------------

@dataclass
class StepOutputs:
    losses: LossBreakdown
    reconstructions: dict = field(default_factory=dict)
    skipped_swap: bool = False


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.RMSprop(
        model.parameters(), lr=cfg.learning_rate, alpha=cfg.rmsprop_alpha, eps=cfg.rmsprop_eps
    )


def _as_tensors(batch, dtype):
    if isinstance(batch, Batch):
        validate_batch(batch)
        return batch.to_tensors(dtype)
    x, y = batch
    return x.to(dtype), y.long()


def compute_losses(model, x, y, cfg: TrainConfig, generator=None, keep_images=False):
    """Run steps (i)-(v) and return (component tensors, reconstructions, skipped).

    The components dict is keyed by name in canonical order; disabled or
    skipped terms are constant zeros.
    """
    zero = x.new_zeros(())
    n = x.shape[0]
    z = model.config.style_dim
    recon = {}

    # (i) segmentation
    c = model.encode_content(x)
    y_pred = model.segment(c)
    seg = dice_loss(y_pred, y)

    # (ii) reconstruction, optionally under the expansion mask
    mean, logvar = model.encode_style(x)
    s = sample_style(mean, logvar, generator)
    x_rec = model.decode(c, s)
    rec = l1_mean(x_rec, x)
    if cfg.enable_ema:
        m = torch.from_numpy(expansion_masks(y.cpu().numpy(), cfg.ema_radius_frac))
        rec_mk = masked_recon_loss(x_rec, x, m.to(x.dtype))
    else:
        rec_mk = zero

    # (iii) re-disentangle the reconstruction's style
    s1 = sample_style(*model.encode_style(x_rec), generator)
    con_s = l1_mean(s1, s)

    # (iv) style exchange within the batch
    perm, skip = exchange_permutation(n, cfg.swap_policy, generator)
    if skip:
        con_c = con_s_rd = con_p = zero
    else:
        s_swap = s[perm]
        x_swap = model.decode(c, s_swap)
        c_swap = model.encode_content(x_swap)
        s2 = sample_style(*model.encode_style(x_swap), generator)
        con_c = l1_mean(c_swap, c)
        con_s_rd = l1_mean(s2, s_swap)
        con_p = l1_mean(model.segment(c_swap), y_pred)
        if keep_images:
            recon["swap"] = x_swap.detach()

    # (v) style augmentation with uniform random codes
    if cfg.enable_sa:
        s_rd = random_style(n, z, generator, x.dtype)
        x_rd = model.decode(c, s_rd)
        c_rd = model.encode_content(x_rd)
        con_c_rd = l1_mean(c_rd, c)
        con_p_rd = l1_mean(model.segment(c_rd), y_pred)
        if keep_images:
            recon["random"] = x_rd.detach()
    else:
        con_c_rd = con_p_rd = zero

    if keep_images:
        recon["input"] = x.detach()
        recon["recon"] = x_rec.detach()
        recon["perm"] = perm
    values = (seg, rec, rec_mk, con_s, con_s_rd, con_c, con_p, con_c_rd, con_p_rd)
    return dict(zip(COMPONENTS, values)), recon, skip


def unidgg_step(batch, model: ModelBundle, optimizer, cfg: TrainConfig, generator=None,
                keep_images=False, step=None) -> StepOutputs:
    """Compute all nine losses on one batch and take one optimizer step."""
    dtype = next(model.parameters()).dtype
    x, y = _as_tensors(batch, dtype)
    model.train()
    comps, recon, skip = compute_losses(model, x, y, cfg, generator, keep_images)
    for name, v in comps.items():
        if not torch.isfinite(v):
            raise NonFiniteLossError(name, v.item(), step)
    total = compose_total(comps, cfg.weights)
    if not torch.isfinite(total):
        raise NonFiniteLossError("total", total.item(), step)
    optimizer.zero_grad(set_to_none=False)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    losses = LossBreakdown(**{k: v.item() for k, v in comps.items()}, total=total.item())
    return StepOutputs(losses, recon, skip)


# -- data for the loop -------------------------------------------------------

@dataclass
class Sample:
    id: str
    center: str
    pixels: np.ndarray
    labels: np.ndarray
    prepared: bool = False


def load_samples(manifest, entries, exp: ExperimentConfig, for_training=True):
    """Read entries from disk. Prostate slices are normalized here and
    flagged slices are dropped from training pools."""
    out = []
    for e in entries:
        if exp.task == "prostate":
            raw, labels = read_raw(manifest, e, grayscale=True)
            sl = preprocess_prostate(raw, labels, for_training, exp.train.resize_size,
                                     exp.num_classes, e.id, e.center_label)
            if sl.dropped and for_training:
                continue
            out.append(Sample(e.id, e.center_label, sl.image.pixels, sl.mask.labels, prepared=True))
        else:
            pixels, labels = read_raw(manifest, e)
            out.append(Sample(e.id, e.center_label, pixels, labels))
    return out


def training_item(sample: Sample, exp: ExperimentConfig, rng):
    cfg = exp.train
    if sample.prepared:
        image = Image(sample.pixels, sample.id, sample.center)
        mask = LabelMask(sample.labels, exp.num_classes)
    else:
        image, mask = preprocess_fundus(sample.pixels, sample.labels, True, rng, cfg.crop_size,
                                        cfg.resize_size, exp.num_classes, sample.id, sample.center)
    if cfg.enable_bda:
        image, mask = apply_bda(image, mask, draw_bda_params(rng, cfg.bda))
    return image, mask


def eval_item(sample: Sample, exp: ExperimentConfig):
    if sample.prepared:
        return Image(sample.pixels, sample.id, sample.center), LabelMask(sample.labels, exp.num_classes)
    return preprocess_fundus(sample.pixels, sample.labels, False, None, exp.train.crop_size,
                             exp.train.resize_size, exp.num_classes, sample.id, sample.center)


def iterate_batches(pool, exp: ExperimentConfig, epoch):
    """Shuffle the whole pool and yield augmented batches; the last may be short."""
    cfg = exp.train
    order = item_rng(cfg.seed, "shuffle", epoch).permutation(len(pool))
    for start in range(0, len(pool), cfg.batch_size):
        items = [
            training_item(pool[i], exp, item_rng(cfg.seed, "item", epoch, pool[i].id))
            for i in order[start:start + cfg.batch_size]
        ]
        yield Batch([im for im, _ in items], [m for _, m in items])


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model, optimizer, exp: ExperimentConfig, epoch, step, generator=None):
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": exp.to_dict(),
        "config_digest": exp.digest(),
        "model_config": model.config.to_dict(),
        "epoch": epoch,
        "step": step,
        "rng_state": generator.get_state() if generator is not None else None,
    }, path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(ckpt) -> ModelBundle:
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    dtype = next(iter(ckpt["model"].values())).dtype
    model = ModelBundle(cfg).to(dtype)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: ModelBundle
    log_path: Path
    checkpoint: Path
    history: list
    steps: int


def train(exp: ExperimentConfig, pool, out_dir, model=None) -> TrainResult:
    """Train on the mixed pool; writes ``train_log.jsonl``, ``train_summary.json`` and checkpoints."""
    if not pool:
        raise ValueError("training pool is empty")
    cfg = exp.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    model = model or build_model(exp.model, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    log_path = out_dir / "train_log.jsonl"
    history = []
    step = 0
    epoch = 0
    t0 = time.perf_counter()
    done = False
    with open(log_path, "w") as fh:
        for epoch in range(cfg.epochs):
            for batch in iterate_batches(pool, exp, epoch):
                out = unidgg_step(batch, model, optimizer, cfg, generator, step=step)
                row = {"epoch": epoch, "step": step, "batch_size": len(batch),
                       **out.losses.to_dict()}
                fh.write(json.dumps(row) + "\n")
                fh.flush()
                history.append(row)
                if step % 10 == 0:
                    log.info("epoch %d step %d total %.4f seg %.4f recon %.4f",
                             epoch, step, out.losses.total, out.losses.seg, out.losses.recon)
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    done = True
                    break
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and not done:
                save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:04d}.pt",
                                model, optimizer, exp, epoch + 1, step, generator)
            if done:
                break
    final = out_dir / "checkpoint_final.pt"
    save_checkpoint(final, model, optimizer, exp, epoch + 1, step, generator)
    # timing lives outside the loss log so equal seeds give byte-equal logs
    with open(out_dir / "train_summary.json", "w") as fh:
        json.dump({"steps": step, "epochs": epoch + 1, "seconds": round(time.perf_counter() - t0, 3),
                   "config_digest": exp.digest()}, fh, indent=2)
    model.eval()
    return TrainResult(model, log_path, final, history, step)


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- inference ---------------------------------------------------------------

def labels_from_probs(probs):
    """Argmax over classes; ties resolve to the lowest class index."""
    return probs.argmax(dim=1)


@torch.no_grad()
def infer(model: ModelBundle, x):
    """Label map(s) from the test-time path: content encoder then segmenter."""
    model.eval()
    if isinstance(x, Image):
        x = torch.from_numpy(np.ascontiguousarray(x.pixels.transpose(2, 0, 1)))[None]
        return labels_from_probs(model.segment(model.encode_content(x.to(_dtype(model)))))[0].numpy()
    return labels_from_probs(model.segment(model.encode_content(x.to(_dtype(model)))))


def _dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def reconstruct_batch(model, batch, cfg: TrainConfig, generator=None):
    """x, x', style-swapped and randomly-styled reconstructions for one batch.

    Runs in evaluation mode without updating anything.
    """
    model.eval()
    x, _ = _as_tensors(batch, _dtype(model))
    n = x.shape[0]
    c = model.encode_content(x)
    s = sample_style(*model.encode_style(x), generator)
    panels = {"x": x, "recon": model.decode(c, s)}
    perm, skip = exchange_permutation(n, cfg.swap_policy, generator)
    if not skip:
        panels["swap"] = model.decode(c, s[perm])
    if cfg.enable_sa:
        panels["random"] = model.decode(c, random_style(n, model.config.style_dim, generator, x.dtype))
    return panels, perm


def is_finite_history(history):
    return all(math.isfinite(r[k]) for r in history for k in COMPONENTS + ("total",))


def evaluate_samples(model, samples, exp: ExperimentConfig):
    """Per-image Dice/ASSD results for test samples at the evaluation scale."""
    from uniddg.metrics import evaluate_image

    results = []
    for sample in samples:
        image, mask = eval_item(sample, exp)
        pred = infer(model, image)
        results.extend(evaluate_image(pred, mask.labels, sample.id, sample.center, exp.num_classes))
    return results
