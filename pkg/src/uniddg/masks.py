"""Expansion-mask attention: binarize ground truth, dilate it, apply it."""

import numpy as np
import torch
from scipy import ndimage

from uniddg.core import ShapeError


def binarize(labels):
    """1 wherever the label is foreground (> 0), else 0."""
    return (np.asarray(labels) > 0).astype(np.uint8)


def dilate(binary, radius):
    """Euclidean dilation: keep pixels within `radius` of any foreground pixel."""
    if not radius > 0:
        raise ValueError(f"dilation radius must be positive, got {radius}")
    binary = np.asarray(binary).astype(bool)
    if not binary.any():
        return np.zeros(binary.shape, dtype=np.uint8)
    dist = ndimage.distance_transform_edt(~binary)
    return (dist <= radius).astype(np.uint8)


def expansion_radius(shape, frac):
    return frac * min(shape[-2:])


def expansion_masks(labels, frac):
    """Stack of dilated foreground masks for a (N, H, W) label batch."""
    labels = np.asarray(labels)
    r = expansion_radius(labels.shape, frac)
    return np.stack([dilate(binarize(y), r) for y in labels])


def apply_mask(image, mask):
    """Multiply every channel of `image` by a spatial mask.

    Accepts numpy H x W x 3 images with H x W masks, or torch (N, C, H, W)
    tensors with (N, H, W) masks.
    """
    if isinstance(image, torch.Tensor):
        mask = torch.as_tensor(mask, dtype=image.dtype, device=image.device)
        if image.shape[-2:] != mask.shape[-2:] or image.shape[0] != mask.shape[0]:
            raise ShapeError(f"image {tuple(image.shape)} vs mask {tuple(mask.shape)}")
        return image * mask[:, None]
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape} vs mask {mask.shape}")
    return image * mask[..., None]
