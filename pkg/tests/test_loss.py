import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from nbed.config import ConfigError, LossConfig, ShapeError
from nbed.loss import wce_loss

from oracles import naive_wce


def test_all_negative_half_prediction():
    cfg = LossConfig(lam=1.1, eta=0.3, rcf_convention=False)
    pred = torch.full((4, 4), 0.5, dtype=torch.float64)
    gt = torch.zeros(4, 4, dtype=torch.float64)
    assert float(wce_loss(pred, gt, cfg)) == pytest.approx(16 * 1.1 * math.log(2), rel=1e-12)
    mean = wce_loss(pred, gt, LossConfig(lam=1.1, reduction="mean", rcf_convention=False))
    assert float(mean) == pytest.approx(0.76246, abs=1e-5)


def test_two_by_two_case_matches_oracle():
    pred = np.full((2, 2), 0.5)
    gt = np.array([[1.0, 0.0], [0.0, 0.2]])
    expected = naive_wce(pred, gt, 1.1, 0.3)
    # |Y+| = 1, |Y-| = 2: alpha = 1/3, beta = 1.1 * 2/3
    assert expected == pytest.approx(math.log(2) / 3 + 2 * (1.1 * 2 / 3) * math.log(2), rel=1e-12)
    got = wce_loss(torch.tensor(pred), torch.tensor(gt), LossConfig(lam=1.1, eta=0.3, rcf_convention=False))
    assert float(got) == pytest.approx(expected, rel=1e-12)


def test_dead_zone_contributes_nothing():
    gt = torch.full((5, 5), 0.2, dtype=torch.float64)
    for p in (0.01, 0.5, 0.99):
        assert float(wce_loss(torch.full((5, 5), p, dtype=torch.float64), gt, LossConfig(eta=0.3))) == 0.0


def test_confident_positive_has_vanishing_loss():
    gt = torch.ones(3, 3, dtype=torch.float64)
    cfg = LossConfig(rcf_convention=False)
    losses = [float(wce_loss(torch.full((3, 3), p, dtype=torch.float64), gt, cfg)) for p in (0.9, 0.999, 1.0)]
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-5


def test_rcf_convention_swaps_weights():
    pred = np.random.default_rng(0).uniform(0.05, 0.95, (6, 6))
    gt = (np.random.default_rng(1).random((6, 6)) > 0.8).astype(float)
    got = wce_loss(torch.tensor(pred), torch.tensor(gt), LossConfig(rcf_convention=True))
    assert float(got) == pytest.approx(naive_wce(pred, gt, 1.1, 0.3, rcf=True), rel=1e-12)


def test_batch_uses_per_image_weights():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0.01, 0.99, (3, 8, 8))
    gt = (rng.random((3, 8, 8)) > rng.uniform(0.5, 0.95, (3, 1, 1))).astype(float)
    expected = np.mean([naive_wce(p, g, 1.1, 0.3, rcf=True) for p, g in zip(pred, gt)])
    assert float(wce_loss(torch.tensor(pred), torch.tensor(gt), LossConfig(rcf_convention=True))) == pytest.approx(expected, rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        wce_loss(torch.zeros(4, 4), torch.zeros(4, 5))


def test_empty_support_is_zero():
    assert float(wce_loss(torch.full((3, 3), 0.3), torch.full((3, 3), 0.1))) == 0.0


@pytest.mark.parametrize("kwargs", [dict(lam=0), dict(eta=1.0), dict(eta=-0.1), dict(reduction="max")])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs)


@pytest.mark.parametrize("rcf", [False, True])
def test_lambda_scales_negative_term_only(rcf):
    rng = np.random.default_rng(5)
    pred = rng.uniform(0.05, 0.95, (8, 8))
    gt = (rng.random((8, 8)) > 0.7).astype(float)
    pos, neg = gt > 0.3, gt == 0
    w_pos = (neg.sum() if rcf else pos.sum()) / gt.size
    w_neg = (pos.sum() if rcf else neg.sum()) / gt.size
    pos_part = -(w_pos * np.log(pred[pos])).sum()
    neg_unit = -(w_neg * np.log1p(-pred[neg])).sum()
    for k in (0.5, 1.0, 2.0, 3.7):
        got = float(wce_loss(torch.tensor(pred), torch.tensor(gt), LossConfig(lam=k, rcf_convention=rcf)))
        assert got == pytest.approx(pos_part + k * neg_unit, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_monotone_in_prediction(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.random((6, 6)) > 0.6).astype(float)
    gt[0, 0], gt[0, 1] = 1.0, 0.0
    pred = rng.uniform(0.05, 0.9, (6, 6))
    base = float(wce_loss(torch.tensor(pred), torch.tensor(gt)))
    up = pred.copy()
    up[0, 0] += 0.05
    assert float(wce_loss(torch.tensor(up), torch.tensor(gt))) < base
    up = pred.copy()
    up[0, 1] += 0.05
    assert float(wce_loss(torch.tensor(up), torch.tensor(gt))) > base


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    cfg = LossConfig(lam=1.3, eta=0.3, rcf_convention=False)
    for _ in range(5):
        pred = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)), requires_grad=True)
        gt = torch.tensor(rng.choice([0.0, 0.2, 0.6, 1.0], size=(8, 8)))
        wce_loss(pred, gt, cfg).backward()
        analytic = pred.grad.numpy()
        h = 1e-6
        numeric = np.zeros_like(analytic)
        base = pred.detach().numpy()
        for idx in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            numeric[idx] = (naive_wce(up, gt.numpy(), 1.3, 0.3) - naive_wce(dn, gt.numpy(), 1.3, 0.3)) / (2 * h)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.abs(analytic - numeric)[scale > 0] / scale[scale > 0]
        assert rel.max() < 1e-6


def test_dead_zone_neutrality():
    rng = np.random.default_rng(2)
    gt = rng.choice([0.0, 0.1, 0.25, 0.5, 1.0], size=(8, 8))
    pred = rng.uniform(0.05, 0.95, (8, 8))
    base = float(wce_loss(torch.tensor(pred), torch.tensor(gt)))
    dead = (gt > 0) & (gt <= 0.3)
    pred[dead] = rng.uniform(0.01, 0.99, dead.sum())
    assert float(wce_loss(torch.tensor(pred), torch.tensor(gt))) == base


@pytest.mark.parametrize("rcf", [False, True])
def test_matches_naive_loop_on_random_pairs(rcf):
    rng = np.random.default_rng(17)
    cfg = LossConfig(lam=1.1, eta=0.3, rcf_convention=rcf)
    for _ in range(1000):
        pred = rng.uniform(0.0, 1.0, (8, 8))
        gt = rng.choice([0.0, 0.2, 0.4, 0.6, 0.8, 1.0], size=(8, 8), p=[0.6, 0.1, 0.1, 0.1, 0.05, 0.05])
        got = float(wce_loss(torch.tensor(pred), torch.tensor(gt), cfg))
        assert got == pytest.approx(naive_wce(pred, gt, 1.1, 0.3, rcf=rcf), abs=1e-9, rel=1e-12)
