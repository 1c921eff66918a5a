"""The nine differentiable loss terms and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import torch
import torch.nn.functional as F

from uniddg.core import ShapeError
from uniddg.masks import apply_mask

DICE_EPS = 1e-5

COMPONENTS = (
    "seg", "recon", "rec_mk", "con_s", "con_s_rd",
    "con_c", "con_p", "con_c_rd", "con_p_rd",
)


@dataclass(frozen=True)
class LossWeights:
    seg: float = 5.0
    recon: float = 5.0
    rec_mk: float = 10.0
    con_s: float = 1.0
    con_s_rd: float = 5.0
    con_c: float = 1.0
    con_p: float = 1.0
    con_c_rd: float = 1.0
    con_p_rd: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    @classmethod
    def from_sequence(cls, values) -> "LossWeights":
        values = list(values)
        if len(values) != len(COMPONENTS):
            raise ValueError(f"expected {len(COMPONENTS)} loss weights, got {len(values)}")
        return cls(*map(float, values))

    def as_tuple(self):
        return astuple(self)


@dataclass
class LossBreakdown:
    seg: float
    recon: float
    rec_mk: float
    con_s: float
    con_s_rd: float
    con_c: float
    con_p: float
    con_c_rd: float
    con_p_rd: float
    total: float

    def components(self):
        return tuple(getattr(self, k) for k in COMPONENTS)

    def to_dict(self):
        return {k: getattr(self, k) for k in COMPONENTS + ("total",)}


def dice_loss(pred, target, eps=DICE_EPS):
    """1 - mean soft Dice over the foreground classes, averaged over the batch.

    `pred` is (N, C, H, W) probabilities, `target` is (N, H, W) class indices.
    Background (class 0) is excluded from the mean.
    """
    if pred.ndim != 4 or target.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    onehot = F.one_hot(target.long(), pred.shape[1]).permute(0, 3, 1, 2).to(pred.dtype)
    p, y = pred[:, 1:], onehot[:, 1:]
    inter = (p * y).sum(dim=(2, 3))
    denom = (y * y).sum(dim=(2, 3)) + (p * p).sum(dim=(2, 3))
    d = (2 * inter + eps) / (denom + eps)
    return 1 - d.mean(dim=1).mean()


def l1_mean(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"L1 operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def masked_recon_loss(recon, original, mask):
    return l1_mean(apply_mask(recon, mask), apply_mask(original, mask))


def compose_total(components, weights: LossWeights):
    """Weighted sum of the nine components in their canonical order.

    `components` is a mapping keyed by component name or a 9-sequence.
    """
    if isinstance(components, dict):
        components = [components[k] for k in COMPONENTS]
    if len(components) != len(COMPONENTS):
        raise ValueError(f"expected {len(COMPONENTS)} components, got {len(components)}")
    total = 0.0
    for lam, value in zip(weights.as_tuple(), components):
        total = total + lam * value
    return total
