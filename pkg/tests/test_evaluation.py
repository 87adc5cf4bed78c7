import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from nbed.config import EvalConfig, ShapeError
from nbed.data import make_sample, synth_sample
from nbed.evaluation import (accumulate_tallies, evaluate, f_measure, match_boundaries, multi_scale_infer,
                             nms_thin, ods_ois, tolerance_pixels)

from oracles import brute_force_matching


@pytest.mark.parametrize("p, r, expected", [(1, 1, 1.0), (1, 0, 0.0), (0, 0, 0.0), (0.6, 0.9, 0.72)])
def test_f_measure(p, r, expected):
    assert f_measure(p, r) == pytest.approx(expected, abs=1e-15)


def test_match_identical_and_far():
    gt = np.zeros((10, 10), bool)
    gt[2, 3:8] = True
    assert match_boundaries(gt, gt, 1.5) == (5, 0, 0)
    pred = np.zeros_like(gt)
    one = np.zeros_like(gt)
    pred[0, 0] = True
    one[9, 9] = True
    assert match_boundaries(pred, one, 3.0) == (0, 1, 1)


def _greedy_nearest_first(pred, gt, d_max):
    p = list(zip(*np.nonzero(pred)))
    g = list(zip(*np.nonzero(gt)))
    pairs = sorted((math.dist(a, b), i, j) for i, a in enumerate(p) for j, b in enumerate(g) if math.dist(a, b) <= d_max)
    used_p, used_g = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    return len(used_p)


def test_matching_beats_greedy_on_crossing_configuration():
    pred = np.zeros((11, 11), bool)
    gt = np.zeros_like(pred)
    pred[5, 5] = pred[5, 8] = True
    gt[5, 6] = gt[5, 3] = True
    assert _greedy_nearest_first(pred, gt, 2.5) == 1
    assert brute_force_matching(pred, gt, 2.5) == 2
    assert match_boundaries(pred, gt, 2.5) == (2, 0, 0)


@st.composite
def small_instances(draw):
    n_pred = draw(st.integers(0, 4))
    n_gt = draw(st.integers(0, 8 - n_pred if n_pred else 4))
    cells = draw(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=n_pred + n_gt,
                          max_size=n_pred + n_gt))
    pred = np.zeros((6, 6), bool)
    gt = np.zeros((6, 6), bool)
    for r, c in cells[:n_pred]:
        pred[r, c] = True
    for r, c in cells[n_pred:]:
        gt[r, c] = True
    d_max = draw(st.sampled_from([0.5, 1.0, 1.5, 2.0, 2.9]))
    return pred, gt, d_max


@settings(max_examples=150, deadline=None)
@given(small_instances())
def test_matching_equals_brute_force(instance):
    pred, gt, d_max = instance
    tp, fp, fn = match_boundaries(pred, gt, d_max)
    assert tp == brute_force_matching(pred, gt, d_max)
    assert fp == pred.sum() - tp and fn == gt.sum() - tp


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_tolerance_monotonicity(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((20, 20)) > 0.9
    gt = rng.random((20, 20)) > 0.9
    tps = [match_boundaries(pred, gt, d)[0] for d in (0.5, 1.0, 1.5, 2.5, 4.0)]
    assert tps == sorted(tps)


def test_nms_thins_blurred_vertical_edge():
    cols = np.arange(40)
    ridge = np.exp(-((cols - 17.3) ** 2) / (2 * 2.0 ** 2))
    edge = np.tile(ridge, (30, 1))
    thin = nms_thin(edge)
    # per-row argmax oracle
    expected_col = np.argmax(edge, axis=1)
    for r in range(thin.shape[0]):
        nz = np.nonzero(thin[r])[0]
        assert list(nz) == [expected_col[r]]
        assert thin[r, nz[0]] == edge[r, nz[0]]


def test_nms_keeps_thin_binary_line_and_constant_map():
    line = np.zeros((20, 20))
    line[:, 7] = 1.0
    line[12, :] = 1.0
    np.testing.assert_array_equal(nms_thin(line), line)
    const = np.full((12, 12), 0.37)
    np.testing.assert_array_equal(nms_thin(const), const)


def test_nms_idempotent_on_fixtures():
    from scipy import ndimage

    sample = synth_sample(64, 3, seed=4)
    blurred = ndimage.gaussian_filter(sample.consensus_gt.astype(float), 1.5)
    blurred /= blurred.max()
    cols = np.arange(40)
    ridge = np.tile(np.exp(-((cols - 17.3) ** 2) / 8.0), (30, 1))
    for fixture in (blurred, ridge, sample.consensus_gt.astype(float)):
        once = nms_thin(fixture)
        np.testing.assert_array_equal(nms_thin(once), once)


def test_tallies_perfect_and_empty():
    sample = synth_sample(64, 3, seed=1)
    gt = sample.annotator_gts[0]
    cfg = EvalConfig()
    tally = accumulate_tallies([gt.astype(float)], [sample], cfg)
    n = gt.sum()
    assert np.all(tally.tp == n) and np.all(tally.fp == 0) and np.all(tally.fn == 0)
    tally = accumulate_tallies([np.zeros(gt.shape)], [sample], cfg)
    assert np.all(tally.tp == 0) and np.all(tally.fp == 0) and np.all(tally.fn == n)


def _two_annotator_fixture():
    a = np.zeros((16, 16), bool)
    b = np.zeros((16, 16), bool)
    a[4, 2:7] = True
    b[5, 2:7] = True
    pred = np.zeros((16, 16))
    pred[4, 2:7] = 0.8
    pred[12, 12] = 0.4
    return make_sample(np.zeros((16, 16, 3), np.uint8), [a, b], "two"), pred


@pytest.mark.parametrize("fraction, b_matched", [(0.0075, 0), (0.05, 5)])
def test_tallies_two_annotators_hand_enumerated(fraction, b_matched):
    sample, pred = _two_annotator_fixture()
    assert (tolerance_pixels(16, 16, fraction) >= 1.0) == bool(b_matched)
    tally = accumulate_tallies([pred], [sample], EvalConfig(tolerance_fraction=fraction, use_nms=False))
    t = tally.thresholds
    low, mid, high = t <= 0.4, (t > 0.4) & (t <= 0.8), t > 0.8
    assert low.sum() == 40 and mid.sum() == 40 and high.sum() == 19
    row = lambda arr: arr[0]  # noqa: E731
    np.testing.assert_array_equal(row(tally.matched_pred)[low], 5)
    np.testing.assert_array_equal(row(tally.pred_total)[low], 6)
    np.testing.assert_array_equal(row(tally.matched_pred)[mid], 5)
    np.testing.assert_array_equal(row(tally.pred_total)[mid], 5)
    np.testing.assert_array_equal(row(tally.matched_pred)[high], 0)
    np.testing.assert_array_equal(row(tally.pred_total)[high], 0)
    np.testing.assert_array_equal(row(tally.matched_gt)[low | mid], 5 + b_matched)
    np.testing.assert_array_equal(row(tally.matched_gt)[high], 0)
    np.testing.assert_array_equal(row(tally.gt_total), 10)


def test_tally_shape_mismatch_names_sample():
    sample = synth_sample(32, 1, seed=0)
    with pytest.raises(ShapeError, match=sample.id):
        accumulate_tallies([np.zeros((31, 32))], [sample])


def _ods_fixture():
    z = np.zeros((16, 16, 3), np.uint8)
    g1 = np.zeros((16, 16), bool)
    g1[3, 2:10] = True
    p1 = np.zeros((16, 16))
    p1[3, 2:6] = 0.7
    p1[3, 6:10] = 0.3
    g2 = np.zeros((16, 16), bool)
    g2[8, 2:6] = True
    p2 = np.zeros((16, 16))
    p2[8, 2:6] = 0.7
    p2[12, 2:6] = 0.3
    return [p1, p2], [make_sample(z, [g1], "a"), make_sample(z, [g2], "b")]


def test_ods_ois_two_image_fixture():
    preds, samples = _ods_fixture()
    res = evaluate(preds, samples, EvalConfig(use_nms=False))
    # shared threshold <= 0.3: P = 12/16, R = 12/12 -> F = 6/7; 0.3 < t <= 0.7: P = 1, R = 8/12 -> F = 4/5
    assert res.ods == pytest.approx(6 / 7, abs=1e-12)
    assert res.ods_threshold <= 0.3
    # each image reaches F = 1 at its own threshold
    assert res.ois == pytest.approx(1.0, abs=1e-12)
    assert res.ois > res.ods
    mid = (res.thresholds > 0.3) & (res.thresholds <= 0.7)
    np.testing.assert_allclose(res.f[mid], 0.8)


def test_ods_equals_ois_for_single_image_and_perfect_prediction():
    preds, samples = _ods_fixture()
    res = evaluate(preds[:1], samples[:1], EvalConfig(use_nms=False))
    assert res.ods == pytest.approx(res.ois)
    perfect = [s.annotator_gts[0].astype(float) for s in samples]
    res = evaluate(perfect, samples)
    assert res.ods == 1.0 and res.ois == 1.0


def test_threshold_monotonicity():
    sample = synth_sample(64, 3, seed=9)
    rng = np.random.default_rng(0)
    pred = np.clip(sample.consensus_gt * 0.7 + rng.random(sample.shape) * 0.4, 0, 1)
    tally = accumulate_tallies([pred], [sample], EvalConfig(tolerance_fraction=0.02))
    assert np.all(np.diff(tally.pred_total[0]) <= 0)
    res = ods_ois(tally)
    assert np.all(np.diff(res.recall) <= 1e-15)


def test_tally_merge():
    preds, samples = _ods_fixture()
    cfg = EvalConfig(use_nms=False)
    whole = accumulate_tallies(preds, samples, cfg)
    merged = accumulate_tallies(preds[:1], samples[:1], cfg).merge(accumulate_tallies(preds[1:], samples[1:], cfg))
    np.testing.assert_array_equal(whole.matched_pred, merged.matched_pred)
    assert ods_ois(whole).ods == ods_ois(merged).ods


def test_multi_scale_single_scale_is_identity():
    from nbed.config import tiny_config
    from nbed.model import build_model

    model = build_model(tiny_config())
    x = torch.rand(1, 3, 48, 40)
    with torch.no_grad():
        assert torch.equal(multi_scale_infer(model, x, scales=(1.0,)), model(x))
        out = multi_scale_infer(model, x)
    assert out.shape == (1, 1, 48, 40)
    assert (out >= 0).all() and (out <= 1).all()


def test_multi_scale_averages_stub_maps():
    levels = {32: 0.2, 64: 0.5, 96: 0.8}

    def stub(x):
        return torch.full((x.shape[0], 1, *x.shape[-2:]), levels[x.shape[-1]], dtype=torch.float64)

    out = multi_scale_infer(stub, torch.zeros(1, 3, 64, 64, dtype=torch.float64))
    torch.testing.assert_close(out, torch.full((1, 1, 64, 64), 0.5, dtype=torch.float64))


def test_multi_scale_rejects_tiny_scales():
    with pytest.raises(ShapeError):
        multi_scale_infer(lambda x: x[:, :1], torch.zeros(1, 3, 24, 24), scales=(0.5, 1.0))


def test_ods_can_exceed_mean_per_image_ois():
    # a large, perfectly predicted image and a tiny image with F = 0 at every threshold
    z = np.zeros((16, 16, 3), np.uint8)
    big = np.zeros((16, 16), bool)
    big[4, 2:12] = True
    small = np.zeros((16, 16), bool)
    small[2, 2] = True
    p_small = np.zeros((16, 16))
    p_small[13, 13] = 0.5
    res = evaluate([big * 0.5, p_small], [make_sample(z, [big], "big"), make_sample(z, [small], "small")],
                   EvalConfig(use_nms=False))
    assert res.ois == pytest.approx(0.5)
    assert res.ods == pytest.approx(10 / 11)
    assert res.ods > res.ois
