"""Dice and ASSD per structure, plus the per-center report tables."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from uniddg.core import ShapeError

# reporting name -> class index, per task
STRUCTURES = {
    3: (("OC", 2), ("OD", 1)),
    2: (("Prostate", 1),),
}


class EmptyMaskError(ValueError):
    def __init__(self, side):
        super().__init__(f"{side} mask is empty; ASSD is undefined")
        self.side = side


def structures_for(num_classes):
    if num_classes in STRUCTURES:
        return STRUCTURES[num_classes]
    return tuple((f"class{k}", k) for k in range(1, num_classes))


def dice_score(pred, gt, k):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    p, g = pred == k, gt == k
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(binary):
    """Foreground pixels with a 4-neighbour that is background or off-grid."""
    binary = np.asarray(binary).astype(bool)
    inner = ndimage.binary_erosion(binary, structure=_CROSS, border_value=0)
    return binary & ~inner


def _surface_distances(src, dst):
    # EDT of the complement of dst gives distance to nearest dst pixel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def assd(pred, gt, k):
    """Average symmetric surface distance for class `k`, in pixels."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    p, g = pred == k, gt == k
    if not g.any():
        raise EmptyMaskError("ground-truth")
    if not p.any():
        raise EmptyMaskError("prediction")
    bp, bg = boundary(p), boundary(g)
    d_pg = _surface_distances(bp, bg)
    d_gp = _surface_distances(bg, bp)
    return float((d_pg.sum() + d_gp.sum()) / (d_pg.size + d_gp.size))


@dataclass
class ImageResult:
    id: str
    center: str
    structure: str
    dice: float
    assd: float | None


def evaluate_image(pred, gt, image_id, center, num_classes):
    out = []
    for name, k in structures_for(num_classes):
        try:
            d = assd(pred, gt, k)
        except EmptyMaskError:
            d = None
        out.append(ImageResult(image_id, center, name, dice_score(pred, gt, k), d))
    return out


def _mean(xs):
    return float(np.mean(xs)) if xs else math.nan


def report_columns(centers, num_classes):
    names = [s for s, _ in structures_for(num_classes)]
    if len(names) == 1:
        return list(centers) + ["Average"]
    cols = [f"{c}_{s}" for c in centers for s in names]
    cols += [f"Average_{s}" for s in names] + ["All"]
    return cols


def aggregate_report(results, centers, num_classes, method="UniDDG"):
    """Fold per-image results into one Dice row and one ASSD row per method.

    Dice is reported in percent and ASSD in pixels. Centers absent from
    `results` get empty cells; averages weight evaluated centers equally.
    ASSD entries that could not be computed are skipped and counted.
    """
    if not results:
        raise ValueError("no results to aggregate")
    names = [s for s, _ in structures_for(num_classes)]
    dice = defaultdict(list)
    dist = defaultdict(list)
    skipped = defaultdict(int)
    for r in results:
        dice[r.center, r.structure].append(100.0 * r.dice)
        if r.assd is None:
            skipped[r.center, r.structure] += 1
        else:
            dist[r.center, r.structure].append(r.assd)

    def table(values):
        cells = {}
        per_struct = {s: [] for s in names}
        for c in centers:
            for s in names:
                if (c, s) in dice:
                    v = _mean(values.get((c, s), []))
                    cells[c, s] = v
                    if not math.isnan(v):
                        per_struct[s].append(v)
        avg = {s: _mean(per_struct[s]) for s in names}
        row = {"Method": method}
        single = len(names) == 1
        for c in centers:
            for s in names:
                key = c if single else f"{c}_{s}"
                row[key] = cells.get((c, s), math.nan)
        if single:
            row["Average"] = avg[names[0]]
        else:
            for s in names:
                row[f"Average_{s}"] = avg[s]
            row["All"] = _mean([v for v in avg.values() if not math.isnan(v)])
        return row

    dice_row = table(dice)
    assd_row = table(dist)
    assd_row["Unevaluable"] = int(sum(skipped.values()))
    return {
        "columns": report_columns(centers, num_classes),
        "dice": dice_row,
        "assd": assd_row,
        "unevaluable": {f"{c}_{s}": n for (c, s), n in sorted(skipped.items())},
        "n_images": len({r.id for r in results}),
    }


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.2f}"
    return v


def write_report(report, out_dir, prefix="report"):
    """Write `<prefix>_dice.csv`, `<prefix>_assd.csv` and `<prefix>.json`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = report["columns"]
    paths = {}
    for metric, extra in (("dice", []), ("assd", ["Unevaluable"])):
        path = out_dir / f"{prefix}_{metric}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Method"] + cols + extra)
            row = report[metric]
            w.writerow([row["Method"]] + [_fmt(row[c]) for c in cols] + [row[e] for e in extra])
        paths[metric] = path
    js = out_dir / f"{prefix}.json"

    def clean(row):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}

    with open(js, "w") as fh:
        json.dump(
            {**report, "dice": clean(report["dice"]), "assd": clean(report["assd"])},
            fh, indent=2, sort_keys=True,
        )
    paths["json"] = js
    return paths


def write_per_image(results, path):
    """One row per image with dice/assd columns for each structure."""
    rows = {}
    structures = []
    for r in results:
        row = rows.setdefault(r.id, {"id": r.id, "center": r.center})
        row[f"{r.structure}_dice"] = r.dice
        row[f"{r.structure}_assd"] = "" if r.assd is None else r.assd
        if r.structure not in structures:
            structures.append(r.structure)
    fields = ["id", "center"] + [f"{s}_{m}" for s in structures for m in ("dice", "assd")]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows.values())
