"""Manifests, preprocessing, basic augmentation and synthetic phantoms."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from uniddg.core import Image, LabelMask, normalize_uint8

SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    center_label: str
    split: str
    num_classes: int | None = None


@dataclass
class CenterManifest:
    entries: list
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    @property
    def centers(self):
        return sorted({e.center_label for e in self.entries}, key=_natural_key)

    def select(self, center=None, split=None):
        return [
            e for e in self.entries
            if (center is None or e.center_label == center) and (split is None or e.split == split)
        ]

    def declared_num_classes(self):
        declared = {e.num_classes for e in self.entries if e.num_classes is not None}
        if len(declared) > 1:
            raise ManifestError(f"manifest declares conflicting class counts {sorted(declared)}")
        return declared.pop() if declared else None

    def absolute(self):
        """Copy with every path resolved, so manifests with different roots can merge."""
        entries = [replace(e, image_path=str(self.resolve(e.image_path)),
                           mask_path=str(self.resolve(e.mask_path))) for e in self.entries]
        return CenterManifest(entries, self.root)

    def __add__(self, other):
        return CenterManifest(self.absolute().entries + other.absolute().entries, self.root)


def _natural_key(s):
    digits = "".join(ch for ch in s if ch.isdigit())
    return (s.rstrip("0123456789"), int(digits) if digits else -1, s)


_REQUIRED = ("id", "image_path", "mask_path", "center_label", "split")


def load_manifest(path, check_files=True) -> CenterManifest:
    """Read a JSON-lines manifest, one entry object per line.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: entry must be an object")
            missing = [k for k in _REQUIRED if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            if obj["split"] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}")
            if obj["id"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {obj['id']!r}")
            seen.add(obj["id"])
            entries.append(ManifestEntry(
                str(obj["id"]), obj["image_path"], obj["mask_path"],
                str(obj["center_label"]), obj["split"], obj.get("num_classes"),
            ))
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    manifest = CenterManifest(entries, path.parent)
    if check_files:
        for e in entries:
            for p in (e.image_path, e.mask_path):
                if not manifest.resolve(p).exists():
                    raise FileNotFoundError(f"entry {e.id!r}: missing file {manifest.resolve(p)}")
    return manifest


def write_manifest(manifest: CenterManifest, path):
    with open(path, "w") as fh:
        for e in manifest.entries:
            d = {k: v for k, v in asdict(e).items() if v is not None}
            fh.write(json.dumps(d, sort_keys=True) + "\n")


# -- protocol pools ---------------------------------------------------------

def pooled_train(manifest, centers=None):
    """Every train entry of the given centers, mixed without center grouping."""
    return [e for e in manifest.entries
            if e.split == "train" and (centers is None or e.center_label in centers)]


def loco_split(manifest, target):
    if target not in manifest.centers:
        raise ProtocolError(f"unknown center {target!r}; have {manifest.centers}")
    sources = [c for c in manifest.centers if c != target]
    train = pooled_train(manifest, sources)
    test = manifest.select(target, "test")
    if not test:
        raise ProtocolError(f"target center {target!r} has an empty test split")
    if not train:
        raise ProtocolError("no source-center training entries")
    held_out = {e.id for e in manifest.select(target)}
    leaked = held_out & {e.id for e in train}
    assert not leaked, f"target-center ids leaked into training pool: {sorted(leaked)}"
    assert all(e.center_label != target for e in train)
    return train, test


def within_center_split(manifest, center):
    if center not in manifest.centers:
        raise ProtocolError(f"unknown center {center!r}; have {manifest.centers}")
    train = manifest.select(center, "train")
    test = manifest.select(center, "test")
    if not train:
        raise ProtocolError(f"center {center!r} has an empty train split")
    if not test:
        raise ProtocolError(f"center {center!r} has an empty test split")
    assert all(e.center_label == center for e in train)
    return train, test


# -- loading and preprocessing ----------------------------------------------

def read_raw(manifest, entry, grayscale=False):
    """Return (pixels, labels) as stored on disk: uint8 arrays."""
    mode = "L" if grayscale else "RGB"
    with PILImage.open(manifest.resolve(entry.image_path)) as im:
        pixels = np.asarray(im.convert(mode))
    with PILImage.open(manifest.resolve(entry.mask_path)) as m:
        labels = np.asarray(m.convert("L")).astype(np.int64)
    return pixels, labels


def _resize(arr, size, nearest):
    size = (size, size) if isinstance(size, int) else size
    if arr.shape[:2] == tuple(size):
        return arr
    resample = PILImage.NEAREST if nearest else PILImage.BILINEAR
    if arr.ndim == 3:
        return np.stack([_resize(arr[..., c], size, nearest) for c in range(arr.shape[2])], -1)
    dtype = np.int32 if nearest else np.float32
    out = PILImage.fromarray(arr.astype(dtype)).resize(size[::-1], resample)
    return np.asarray(out).astype(arr.dtype)


def crop_window(shape, size, rng):
    h, w = shape[:2]
    if h < size or w < size:
        raise ValueError(f"input {h}x{w} is smaller than the {size}x{size} crop")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return top, left


def preprocess_fundus(pixels, labels, train_mode, rng=None, crop_size=256, resize_size=256,
                      num_classes=3, id="", center=""):
    """Normalize an 8-bit RGB fundus image; crop for training, resize for test."""
    if train_mode:
        top, left = crop_window(pixels.shape, crop_size, rng)
        pixels = pixels[top:top + crop_size, left:left + crop_size]
        labels = labels[top:top + crop_size, left:left + crop_size]
    else:
        if min(pixels.shape[:2]) < 1:
            raise ValueError("empty input image")
        pixels = _resize(pixels.astype(np.float32), resize_size, nearest=False)
        labels = _resize(labels, resize_size, nearest=True)
    img = np.clip(normalize_uint8(pixels), -1.0, 1.0).astype(np.float32)
    return Image(img, id, center), LabelMask(labels.astype(np.int64), num_classes)


@dataclass
class PreprocessedSlice:
    image: Image
    mask: LabelMask
    dropped: bool


def preprocess_prostate(slice_, labels, train_mode=True, size=256, num_classes=2, id="", center=""):
    """Min-max normalize a single-channel slice, resize, replicate to RGB.

    Slices with no foreground or constant intensity come back flagged as
    dropped; the caller keeps them out of training pools.
    """
    slice_ = np.asarray(slice_, dtype=np.float32)
    if slice_.ndim == 3:
        if slice_.shape[2] != 1:
            raise ValueError("prostate slices must be single-channel")
        slice_ = slice_[..., 0]
    lo, hi = float(slice_.min()), float(slice_.max())
    degenerate = hi - lo <= 0
    norm = np.full_like(slice_, -1.0) if degenerate else 2.0 * (slice_ - lo) / (hi - lo) - 1.0
    norm = np.clip(_resize(norm, size, nearest=False), -1.0, 1.0)
    labels = _resize(np.asarray(labels).astype(np.int64), size, nearest=True)
    img = np.repeat(norm[..., None], 3, axis=2).astype(np.float32)
    dropped = degenerate or not (labels > 0).any()
    return PreprocessedSlice(Image(img, id, center), LabelMask(labels, num_classes), dropped)


# -- basic data augmentation ------------------------------------------------

@dataclass
class BDAConfig:
    p: float = 0.5
    max_rotation: float = 30.0
    scale_range: tuple = (0.9, 1.1)
    max_shift: float = 0.1
    max_noise: float = 0.05
    max_brightness: float = 0.1


@dataclass
class BDAParams:
    hflip: bool = False
    vflip: bool = False
    rotation: float = 0.0
    scale: float = 1.0
    shift: tuple = (0.0, 0.0)
    noise_sigma: float = 0.0
    noise_seed: int = 0
    brightness: float = 0.0
    channel_order: tuple | None = None

    @property
    def geometric(self):
        return self.rotation != 0.0 or self.scale != 1.0 or self.shift != (0.0, 0.0)


def draw_bda_params(rng, cfg: BDAConfig | None = None) -> BDAParams:
    """Each op fires independently with probability ``cfg.p``."""
    cfg = cfg or BDAConfig()
    p = BDAParams()
    if rng.random() < cfg.p:
        p.hflip = True
    if rng.random() < cfg.p:
        p.vflip = True
    if rng.random() < cfg.p:
        p.rotation = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    if rng.random() < cfg.p:
        p.scale = float(rng.uniform(*cfg.scale_range))
    if rng.random() < cfg.p:
        p.shift = tuple(float(v) for v in rng.uniform(-cfg.max_shift, cfg.max_shift, size=2))
    if rng.random() < cfg.p:
        p.noise_sigma = float(rng.uniform(0.0, cfg.max_noise))
        p.noise_seed = int(rng.integers(0, 2**31 - 1))
    if rng.random() < cfg.p:
        p.brightness = float(rng.uniform(-cfg.max_brightness, cfg.max_brightness))
    if rng.random() < cfg.p:
        p.channel_order = tuple(int(c) for c in rng.permutation(3))
    return p


def _affine(shape, params):
    h, w = shape
    theta = math.radians(params.rotation)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    # output -> input coordinate map, rotating/scaling about the image center
    matrix = rot.T / params.scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.array([params.shift[0] * h, params.shift[1] * w])
    offset = center - matrix @ (center + t)
    return matrix, offset


def warp_mask(labels, params):
    labels = np.asarray(labels)
    if params.hflip:
        labels = labels[:, ::-1]
    if params.vflip:
        labels = labels[::-1, :]
    if params.geometric:
        matrix, offset = _affine(labels.shape, params)
        labels = ndimage.affine_transform(labels, matrix, offset, order=0, mode="constant", cval=0)
    return np.ascontiguousarray(labels)


def warp_image(pixels, params):
    pixels = np.asarray(pixels)
    if params.hflip:
        pixels = pixels[:, ::-1]
    if params.vflip:
        pixels = pixels[::-1, :]
    if params.geometric:
        matrix, offset = _affine(pixels.shape[:2], params)
        pixels = np.stack([
            ndimage.affine_transform(pixels[..., c], matrix, offset, order=1, mode="constant", cval=-1.0)
            for c in range(pixels.shape[2])
        ], axis=-1)
    return np.ascontiguousarray(pixels)


def apply_bda(image: Image, mask: LabelMask, params: BDAParams):
    pixels = warp_image(image.pixels, params).astype(np.float32)
    labels = warp_mask(mask.labels, params)
    if params.noise_sigma > 0:
        noise_rng = np.random.default_rng(params.noise_seed)
        pixels = pixels + noise_rng.normal(0.0, params.noise_sigma, pixels.shape).astype(np.float32)
    if params.brightness:
        pixels = pixels + np.float32(params.brightness)
    if params.channel_order is not None:
        pixels = pixels[..., list(params.channel_order)]
    pixels = np.clip(pixels, -1.0, 1.0).astype(np.float32)
    return (Image(np.ascontiguousarray(pixels), image.id, image.center),
            LabelMask(labels.astype(np.int64), mask.num_classes))


def bda_augment(image, mask, rng, cfg=None):
    return apply_bda(image, mask, draw_bda_params(rng, cfg))


def item_rng(seed, *keys):
    """Per-item stream keyed by (seed, keys...), independent of processing order."""
    words = [seed & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode()))
    return np.random.default_rng(np.random.SeedSequence(words))


# -- synthetic phantoms ------------------------------------------------------

@dataclass
class SynthStyle:
    gamma: float
    tint: tuple
    noise_sigma: float
    background_frequency: float

    def __post_init__(self):
        vals = [self.gamma, *self.tint, self.noise_sigma, self.background_frequency]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("synthetic style parameters must be finite")
        if self.gamma <= 0 or min(self.tint) <= 0 or self.noise_sigma < 0 or self.background_frequency <= 0:
            raise ValueError(f"invalid synthetic style {self}")


TINT_MARGIN = 0.2


def draw_styles(n_centers, rng):
    """Center styles whose tints differ by at least TINT_MARGIN in some channel."""
    styles = []
    while len(styles) < n_centers:
        tint = tuple(float(v) for v in rng.uniform(0.45, 1.25, size=3))
        if any(max(abs(a - b) for a, b in zip(tint, s.tint)) < TINT_MARGIN for s in styles):
            continue
        styles.append(SynthStyle(
            gamma=float(rng.uniform(0.7, 1.5)),
            tint=tint,
            noise_sigma=float(rng.uniform(0.01, 0.05)),
            background_frequency=float(rng.uniform(2.0, 6.0)),
        ))
    return styles


def phantom_labels(size, rng):
    """A random disc ellipse (class 1) holding a concentric cup (class 2)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.uniform(-0.12, 0.12, size=2) * size
    a, b = rng.uniform(0.18, 0.28, size=2) * size
    phi = rng.uniform(0, math.pi)
    ratio = rng.uniform(0.45, 0.65)
    u = (xx - cx) * math.cos(phi) + (yy - cy) * math.sin(phi)
    v = -(xx - cx) * math.sin(phi) + (yy - cy) * math.cos(phi)
    r = (u / a) ** 2 + (v / b) ** 2
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[r <= 1.0] = 1
    labels[r <= ratio ** 2] = 2
    return labels


def render_phantom(labels, style: SynthStyle, rng):
    size = labels.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase, angle = rng.uniform(0, 2 * math.pi), rng.uniform(0, math.pi)
    wave = np.sin(2 * math.pi * style.background_frequency * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    base = np.choose(labels, [0.25, 0.6, 0.9]) + 0.08 * wave * (labels == 0)
    base = ndimage.gaussian_filter(base, 0.7)
    base = np.clip(base, 0.0, 1.0) ** style.gamma
    rgb = base[..., None] * np.asarray(style.tint)[None, None, :]
    rgb = rgb + rng.normal(0.0, style.noise_sigma, rgb.shape)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def synth_generate(n_centers, images_per_center, size, seed, out_dir):
    """Write a multi-center phantom dataset and its manifest.

    Each center gets its own appearance style; within a center images split
    train/test 4:1. Output is a pure function of the arguments.
    """
    if n_centers < 2:
        raise ValueError("need at least 2 centers")
    if size % 16:
        raise ValueError(f"size must be divisible by 16, got {size}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    styles = draw_styles(n_centers, rng)
    entries = []
    for ci, style in enumerate(styles, 1):
        center = f"C{ci}"
        n_test = int(round(images_per_center / 5))
        test_idx = set(rng.permutation(images_per_center)[:n_test].tolist())
        for j in range(images_per_center):
            item = f"{center}_{j:03d}"
            labels = phantom_labels(size, rng)
            pixels = render_phantom(labels, style, rng)
            img_rel, mask_rel = f"images/{item}.png", f"masks/{item}.png"
            PILImage.fromarray(pixels, "RGB").save(out_dir / img_rel)
            PILImage.fromarray(labels, "L").save(out_dir / mask_rel)
            entries.append(ManifestEntry(item, img_rel, mask_rel, center,
                                         "test" if j in test_idx else "train"))
    manifest = CenterManifest(entries, out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    with open(out_dir / "styles.json", "w") as fh:
        json.dump({f"C{i}": asdict(s) for i, s in enumerate(styles, 1)}, fh, indent=2)
    return manifest


def center_channel_means(manifest):
    """Mean [0, 1] intensity per RGB channel over each center's images."""
    sums = {}
    for e in manifest.entries:
        with PILImage.open(manifest.resolve(e.image_path)) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        acc = sums.setdefault(e.center_label, [np.zeros(3), 0])
        acc[0] += px.reshape(-1, 3).mean(0)
        acc[1] += 1
    return {c: s / n for c, (s, n) in sums.items()}
