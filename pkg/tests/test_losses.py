import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import sampled_fd_check
from uniddg.losses import (
    COMPONENTS, LossWeights, compose_total, dice_loss, l1_mean, masked_recon_loss,
)


def _onehot(y, c):
    return F.one_hot(y, c).permute(0, 3, 1, 2).double()


def test_dice_perfect_prediction_is_zero():
    y = torch.randint(0, 3, (2, 6, 6))
    assert abs(dice_loss(_onehot(y, 3), y).item()) < 1e-4


def test_dice_hand_value():
    # single foreground class on a flat 1x4 grid: target [1,1,0,0], prediction [1,0,0,0]
    y = torch.tensor([[[1, 1, 0, 0]]])
    fg = torch.tensor([1.0, 0, 0, 0]).view(1, 1, 1, 4)
    pred = torch.cat([1 - fg, fg], 1).double()
    assert dice_loss(pred, y).item() == pytest.approx(1 / 3, abs=1e-4)


def test_dice_both_empty_is_zero():
    y = torch.zeros(1, 4, 4, dtype=torch.long)
    pred = _onehot(y, 3)
    assert dice_loss(pred, y).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_range(rng):
    for _ in range(20):
        p = torch.softmax(torch.from_numpy(rng.normal(size=(2, 3, 5, 5))), 1)
        y = torch.from_numpy(rng.integers(0, 3, (2, 5, 5)))
        v = dice_loss(p, y).item()
        assert 0.0 <= v <= 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 5, 4, dtype=torch.long))


def test_dice_gradient_wrt_logits(rng):
    for _ in range(3):
        logits = torch.from_numpy(rng.normal(size=(1, 3, 4, 4))).requires_grad_()
        y = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        res = sampled_fd_check(lambda: dice_loss(torch.softmax(logits, 1), y), [logits], 20, rng)
        assert max(r for *_, r in res) <= 1e-3


def test_l1_mean_values():
    a = torch.tensor([1.0, 2.0])
    b = torch.tensor([2.0, 4.0])
    assert l1_mean(a, a).item() == 0
    assert l1_mean(a, b).item() == 1.5
    assert l1_mean(b, a).item() == l1_mean(a, b).item()
    with pytest.raises(ValueError):
        l1_mean(a, torch.zeros(3))


def test_masked_recon_cases(rng):
    x = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 5, 5)))
    y = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 5, 5)))
    assert masked_recon_loss(x, y, torch.zeros(2, 5, 5)).item() == 0
    assert masked_recon_loss(x, y, torch.ones(2, 5, 5)).item() == l1_mean(x, y).item()
    r = torch.full((1, 3, 1, 2), 0.5, dtype=torch.float64)
    o = r.clone()
    o[..., 0] = 0.0
    assert masked_recon_loss(r, o, torch.tensor([[[1.0, 0.0]]])).item() == pytest.approx(0.25)


def test_l1_and_masked_gradients(rng):
    a = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 4, 4))).requires_grad_()
    b = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 4, 4)))
    m = torch.from_numpy((rng.random((2, 4, 4)) > 0.4).astype(np.float64))
    for fn in (lambda: l1_mean(a, b), lambda: masked_recon_loss(a, b, m)):
        res = sampled_fd_check(fn, [a], 20, rng)
        assert max(r for *_, r in res) <= 1e-3


def test_compose_total():
    w = LossWeights()
    assert w.as_tuple() == (5, 5, 10, 1, 5, 1, 1, 1, 1)
    assert compose_total([1.0] * 9, w) == 30.0
    assert compose_total([1.0] * 9, LossWeights(*[0.0] * 9)) == 0
    only_seg = dict.fromkeys(COMPONENTS, 0.0) | {"seg": 0.2}
    assert compose_total(only_seg, w) == pytest.approx(1.0)


def test_compose_total_linear(rng):
    w = LossWeights()
    base = rng.uniform(0, 1, 9)
    for k in range(9):
        bumped = base.copy()
        bumped[k] += 0.5
        diff = compose_total(list(bumped), w) - compose_total(list(base), w)
        assert diff == pytest.approx(0.5 * w.as_tuple()[k])


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(seg=-1)
    with pytest.raises(ValueError):
        LossWeights.from_sequence([1, 2])
    with pytest.raises(ValueError):
        LossWeights(recon=float("nan"))
