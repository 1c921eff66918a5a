import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fakes import FUNDUS_COUNTS, manifest_lines, write_fake_dataset, write_manifest_rows
from uniddg.core import Image, LabelMask
from uniddg.data import (
    BDAParams, ManifestError, ProtocolError, apply_bda, bda_augment, center_channel_means,
    draw_bda_params, item_rng, load_manifest, loco_split, phantom_labels, preprocess_fundus,
    preprocess_prostate, synth_generate, within_center_split,
)


# -- manifests ---------------------------------------------------------------

def test_fundus_shaped_manifest_counts(tmp_path):
    path = write_manifest_rows(tmp_path / "m.jsonl", manifest_lines(FUNDUS_COUNTS))
    m = load_manifest(path, check_files=False)
    assert m.centers == ["Center1", "Center2", "Center3", "Center4"]
    assert [len(m.select(c, "train")) for c in m.centers] == [50, 99, 320, 320]


def test_empty_manifest_is_an_error(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    with pytest.raises(ManifestError, match="no entries"):
        load_manifest(tmp_path / "m.jsonl")


def test_duplicate_id_rejected(tmp_path):
    rows = manifest_lines({"A": (2, 1)})
    rows.append(dict(rows[0]))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(write_manifest_rows(tmp_path / "m.jsonl", rows), check_files=False)


def test_parse_error_names_line(tmp_path):
    rows = manifest_lines({"A": (1, 1)})
    (tmp_path / "m.jsonl").write_text(json.dumps(rows[0]) + "\n{oops\n")
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(tmp_path / "m.jsonl", check_files=False)


def test_bad_split_and_missing_field(tmp_path):
    row = manifest_lines({"A": (1, 0)})[0]
    with pytest.raises(ManifestError, match="split"):
        load_manifest(write_manifest_rows(tmp_path / "a.jsonl", [dict(row, split="val")]), check_files=False)
    del row["mask_path"]
    with pytest.raises(ManifestError, match="mask_path"):
        load_manifest(write_manifest_rows(tmp_path / "b.jsonl", [row]), check_files=False)


def test_missing_file_names_entry(tmp_path):
    path = write_manifest_rows(tmp_path / "m.jsonl", manifest_lines({"A": (1, 0)}))
    with pytest.raises(FileNotFoundError, match="A_train_0000"):
        load_manifest(path)


def test_manifest_resolves_relative_paths(tmp_path):
    path = write_fake_dataset(tmp_path / "d", {"A": (2, 1)}, size=16)
    m = load_manifest(path)
    assert m.resolve(m.entries[0].image_path).exists()


# -- protocol splits ---------------------------------------------------------

def test_loco_excludes_target(tmp_path):
    m = load_manifest(write_manifest_rows(tmp_path / "m.jsonl", manifest_lines(FUNDUS_COUNTS)),
                      check_files=False)
    train, test = loco_split(m, "Center2")
    assert len(train) == 50 + 320 + 320
    assert {e.center_label for e in test} == {"Center2"} and len(test) == 60


def test_loco_unknown_and_empty_target(tmp_path):
    m = load_manifest(write_manifest_rows(tmp_path / "m.jsonl", manifest_lines({"A": (2, 1), "B": (2, 0)})),
                      check_files=False)
    with pytest.raises(ProtocolError, match="unknown"):
        loco_split(m, "Z")
    with pytest.raises(ProtocolError, match="empty test"):
        loco_split(m, "B")


def test_within_center_counts(tmp_path):
    m = load_manifest(write_manifest_rows(tmp_path / "m.jsonl", manifest_lines(FUNDUS_COUNTS)),
                      check_files=False)
    train, test = within_center_split(m, "Center2")
    assert (len(train), len(test)) == (99, 60)


def test_within_center_empty_train(tmp_path):
    m = load_manifest(write_manifest_rows(tmp_path / "m.jsonl", manifest_lines({"A": (0, 3)})),
                      check_files=False)
    with pytest.raises(ProtocolError, match="empty train"):
        within_center_split(m, "A")


# -- preprocessing -----------------------------------------------------------

def _raw(h, w, seed=0):
    r = np.random.default_rng(seed)
    return r.integers(0, 256, (h, w, 3), dtype=np.uint8), r.integers(0, 3, (h, w))


def test_fundus_train_crop_512():
    px, lab = _raw(512, 512)
    img, mask = preprocess_fundus(px, lab, True, np.random.default_rng(0))
    assert img.pixels.shape == (256, 256, 3) and mask.labels.shape == (256, 256)
    assert img.pixels.min() >= -1 and img.pixels.max() <= 1


def test_fundus_crop_keeps_alignment():
    px, _ = _raw(300, 300)
    # label each pixel with a function of its (uint8) red value so alignment is checkable
    lab = (px[..., 0] % 3).astype(np.int64)
    img, mask = preprocess_fundus(px, lab, True, np.random.default_rng(3))
    red = np.rint((img.pixels[..., 0] + 1) * 127.5).astype(int)
    np.testing.assert_array_equal(red % 3, mask.labels)


def test_fundus_256_crop_is_identity():
    px, lab = _raw(256, 256)
    img, mask = preprocess_fundus(px, lab, True, np.random.default_rng(5))
    np.testing.assert_array_equal(mask.labels, lab)
    np.testing.assert_allclose(img.pixels, px / 127.5 - 1, atol=1e-6)


def test_fundus_same_seed_same_window():
    px, lab = _raw(400, 380)
    a = preprocess_fundus(px, lab, True, np.random.default_rng(9))
    b = preprocess_fundus(px, lab, True, np.random.default_rng(9))
    np.testing.assert_array_equal(a[0].pixels, b[0].pixels)


def test_fundus_too_small():
    px, lab = _raw(200, 300)
    with pytest.raises(ValueError, match="smaller"):
        preprocess_fundus(px, lab, True, np.random.default_rng(0))


def test_fundus_test_mode_resizes():
    px, lab = _raw(300, 420)
    img, mask = preprocess_fundus(px, lab, False)
    assert img.pixels.shape == (256, 256, 3)
    assert set(np.unique(mask.labels)) <= {0, 1, 2}


def test_prostate_replicates_channels():
    r = np.random.default_rng(0)
    sl = r.normal(size=(384, 384)) * 100
    lab = np.zeros((384, 384), int)
    lab[100:200, 150:250] = 1
    out = preprocess_prostate(sl, lab)
    assert out.image.pixels.shape == (256, 256, 3)
    np.testing.assert_array_equal(out.image.pixels[..., 0], out.image.pixels[..., 2])
    assert not out.dropped
    assert out.image.pixels.min() >= -1 and out.image.pixels.max() <= 1


def test_prostate_drop_flags():
    lab = np.zeros((64, 64), int)
    assert preprocess_prostate(np.random.default_rng(0).random((64, 64)), lab).dropped
    lab[10:20, 10:20] = 1
    assert preprocess_prostate(np.zeros((64, 64)), lab).dropped


# -- basic augmentation --------------------------------------------------------

class _Miss:
    """Generator stub whose gate draws never fire."""

    def random(self):
        return 0.99


def _pair(seed=0, size=32):
    r = np.random.default_rng(seed)
    lab = np.zeros((size, size), np.int64)
    lab[8:24, 6:20] = 1
    lab[12:18, 10:15] = 2
    return Image(r.uniform(-1, 1, (size, size, 3)).astype(np.float32)), LabelMask(lab, 3)


def test_bda_all_miss_identity():
    img, mask = _pair()
    out_img, out_mask = bda_augment(img, mask, _Miss())
    np.testing.assert_array_equal(out_img.pixels, img.pixels)
    np.testing.assert_array_equal(out_mask.labels, mask.labels)


def test_hflip_is_involution():
    img, mask = _pair()
    p = BDAParams(hflip=True)
    twice = apply_bda(*apply_bda(img, mask, p), p)
    np.testing.assert_array_equal(twice[0].pixels, img.pixels)
    np.testing.assert_array_equal(twice[1].labels, mask.labels)


def test_channel_swap_leaves_mask():
    img, mask = _pair()
    out_img, out_mask = apply_bda(img, mask, BDAParams(channel_order=(2, 0, 1)))
    np.testing.assert_array_equal(out_img.pixels, img.pixels[..., [2, 0, 1]])
    np.testing.assert_array_equal(out_mask.labels, mask.labels)


def test_out_of_frame_fill():
    img, mask = _pair()
    out_img, out_mask = apply_bda(img, mask, BDAParams(shift=(0.0, 0.25)))
    assert np.all(out_img.pixels[:, :6] == -1.0)
    assert np.all(out_mask.labels[:, :6] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_bda_properties(seed):
    img, mask = _pair(seed)
    rng = np.random.default_rng(seed)
    out_img, out_mask = bda_augment(img, mask, rng)
    assert out_img.pixels.shape == img.pixels.shape
    assert set(np.unique(out_mask.labels)) <= set(np.unique(mask.labels))
    assert out_img.pixels.min() >= -1 and out_img.pixels.max() <= 1


def test_geometric_draw_moves_image_and_mask_together():
    # a flat-colored label map rendered into the image must stay aligned up to
    # the one-pixel band where bilinear and nearest sampling disagree
    lab = np.zeros((48, 48), np.int64)
    lab[12:36, 10:30] = 1
    pixels = np.repeat(np.where(lab == 1, 1.0, -1.0)[..., None], 3, 2).astype(np.float32)
    p = BDAParams(rotation=17.0, scale=1.07, shift=(0.05, -0.08))
    out_img, out_mask = apply_bda(Image(pixels), LabelMask(lab, 2), p)
    agree = (out_img.pixels[..., 0] > 0) == (out_mask.labels == 1)
    from scipy import ndimage
    edge = ndimage.binary_dilation(out_mask.labels == 1) & ~ndimage.binary_erosion(out_mask.labels == 1)
    assert agree[~edge].all()


def test_gates_fire_near_half():
    rng = np.random.default_rng(0)
    draws = [draw_bda_params(rng) for _ in range(2000)]
    rate = np.mean([d.hflip for d in draws])
    assert 0.45 < rate < 0.55
    rot = [d.rotation for d in draws if d.rotation]
    assert max(map(abs, rot)) <= 30.0


def test_item_rng_is_order_independent():
    a = item_rng(3, "x", 1).random()
    item_rng(3, "y", 1).random()
    assert item_rng(3, "x", 1).random() == a
    assert item_rng(4, "x", 1).random() != a


# -- synthetic phantoms ----------------------------------------------------------

def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    synth_generate(3, 40, 64, 7, out)
    return out


def test_synth_counts(synth_dir):
    m = load_manifest(synth_dir / "manifest.jsonl")
    assert len(m) == 120
    assert len(m.select(split="train")) == 96 and len(m.select(split="test")) == 24
    assert m.centers == ["C1", "C2", "C3"]
    for c in m.centers:
        assert len(m.select(c, "test")) == 8


def test_synth_is_deterministic(synth_dir, tmp_path):
    synth_generate(3, 40, 64, 7, tmp_path)
    assert _digest(tmp_path) == _digest(synth_dir)


def test_synth_masks_nest(synth_dir):
    from PIL import Image as PILImage
    from scipy import ndimage

    for p in sorted((synth_dir / "masks").glob("*.png"))[:40]:
        lab = np.asarray(PILImage.open(p))
        assert set(np.unique(lab)) == {0, 1, 2}
        # the cup never touches background: it sits inside the disc ring
        cup = lab == 2
        assert not (ndimage.binary_dilation(cup) & (lab == 0)).any()


def test_phantom_cup_inside_disc():
    for seed in range(50):
        lab = phantom_labels(64, np.random.default_rng(seed))
        assert (lab == 2).sum() > 0 and (lab == 1).sum() > 0


def test_synth_centers_look_different(synth_dir):
    m = load_manifest(synth_dir / "manifest.jsonl")
    means = center_channel_means(m)
    keys = sorted(means)
    gaps = [np.abs(means[a] - means[b]).max() for i, a in enumerate(keys) for b in keys[i + 1:]]
    assert min(gaps) > 0.05


def test_synth_rejects_bad_size(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(3, 4, 60, 0, tmp_path)
    with pytest.raises(ValueError):
        synth_generate(1, 4, 64, 0, tmp_path)
