"""Shared value types and the checks every other module leans on.

Images are H x W x 3 float arrays in [-1, 1]; label masks are H x W integer
arrays. Networks work on NCHW tensors, so :meth:`Batch.to_tensors` does the
layout conversion in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


class ShapeError(ValueError):
    pass


class RangeError(ValueError):
    pass


def normalize_uint8(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities to [-1, 1] via v / 127.5 - 1."""
    return pixels.astype(np.float32) / 127.5 - 1.0


def denormalize_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(pixels) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray
    id: str = ""
    center: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ShapeError(f"image {self.id!r}: expected H x W x 3, got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < -1.0 or p.max() > 1.0:
            raise RangeError(f"image {self.id!r}: pixel values leave [-1, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class LabelMask:
    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.labels.ndim != 2:
            raise ShapeError(f"label mask must be 2-D, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise RangeError(f"labels outside 0..{self.num_classes - 1}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class Batch:
    images: Sequence[Image]
    masks: Sequence[LabelMask] = field(default_factory=tuple)

    def __len__(self):
        return len(self.images)

    def to_tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack into (N, 3, H, W) images and (N, H, W) int64 labels."""
        x = np.stack([im.pixels for im in self.images]).transpose(0, 3, 1, 2)
        y = np.stack([m.labels for m in self.masks]).astype(np.int64)
        return torch.from_numpy(np.ascontiguousarray(x)).to(dtype), torch.from_numpy(y)


def validate_batch(batch: Batch) -> None:
    """Raise unless the batch is non-empty, paired and shape-consistent."""
    if len(batch.images) < 1:
        raise ShapeError("batch is empty")
    if len(batch.images) != len(batch.masks):
        raise ShapeError(
            f"{len(batch.images)} images but {len(batch.masks)} masks in batch"
        )
    for i, (im, m) in enumerate(zip(batch.images, batch.masks)):
        # re-run the value checks in case arrays were mutated after construction
        p = im.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeError(f"batch index {i}: image shape {p.shape} is not H x W x 3")
        if not np.all(np.isfinite(p)) or p.min() < -1.0 or p.max() > 1.0:
            raise RangeError(f"batch index {i}: pixel values leave [-1, 1]")
        if im.shape != m.shape:
            raise ShapeError(
                f"batch index {i}: image {im.shape} and mask {m.shape} differ"
            )


def check_content_map(c: torch.Tensor, channels: int | None = None) -> None:
    if c.ndim != 4:
        raise ShapeError(f"content map must be (N, R, H, W), got {tuple(c.shape)}")
    if channels is not None and c.shape[1] != channels:
        raise ShapeError(f"expected {channels} content channels, got {c.shape[1]}")
    if not torch.all(c.abs() < 1):
        raise RangeError("content values must lie strictly inside (-1, 1)")


def check_prob_map(p: torch.Tensor, atol: float = 1e-5) -> None:
    if p.ndim != 4:
        raise ShapeError(f"probability map must be (N, C, H, W), got {tuple(p.shape)}")
    if p.min() < 0 or p.max() > 1:
        raise RangeError("probabilities outside [0, 1]")
    if not torch.allclose(p.sum(1), torch.ones_like(p[:, 0]), atol=atol, rtol=0):
        raise RangeError("per-pixel class probabilities do not sum to 1")
