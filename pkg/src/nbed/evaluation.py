"""Boundary evaluation: NMS thinning, tolerant matching, threshold sweeps, ODS/OIS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .config import EvalConfig, ShapeError
from .data import Sample

MS_SCALES = (0.5, 1.0, 1.5)


# --------------------------------------------------------------------------
# NMS

def edge_orientation(edge: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Ridge-normal angle in [0, pi).

    Orientation comes from second finite differences of the Gaussian-smoothed
    map, which stays well defined on the crest of a ridge where the first
    derivative vanishes.
    """
    smooth = ndimage.gaussian_filter(edge.astype(np.float64), sigma, mode="nearest")
    dy, dx = np.gradient(smooth)
    _, dxx = np.gradient(dx)
    dyy, dxy = np.gradient(dy)
    return np.mod(np.arctan(dyy * np.sign(-dxy) / (dxx + 1e-5)), np.pi)


def nms_thin(edge: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Zero every pixel strictly below either interpolated neighbour across the ridge.

    Flat regions survive since equality never suppresses.
    """
    edge = np.asarray(edge, dtype=np.float64)
    angle = edge_orientation(edge, sigma)
    rows, cols = np.indices(edge.shape, dtype=np.float64)
    dr, dc = np.sin(angle), np.cos(angle)
    keep = np.ones(edge.shape, dtype=bool)
    for step in (-1.0, 1.0):
        coords = np.stack([rows + step * dr, cols + step * dc])
        neighbour = ndimage.map_coordinates(edge, coords, order=1, mode="nearest")
        keep &= ~(edge < neighbour)
    return np.where(keep, edge, 0.0)


# --------------------------------------------------------------------------
# matching

def _offsets(d_max: float) -> list[tuple[int, int]]:
    r = int(math.floor(d_max))
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= d_max * d_max]
    return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o))


def match_pixels(pred: np.ndarray, gt: np.ndarray, d_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-cardinality one-to-one matching of boundary pixels within ``d_max``.

    Returns boolean masks of the matched prediction pixels and matched
    ground-truth pixels.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    matched_pred = np.zeros_like(pred)
    matched_gt = np.zeros_like(gt)
    pr, pc = np.nonzero(pred)
    if len(pr) == 0 or not gt.any():
        return matched_pred, matched_gt
    gt_index = np.full(gt.shape, -1, dtype=np.int64)
    gr, gc = np.nonzero(gt)
    gt_index[gr, gc] = np.arange(len(gr))
    h, w = gt.shape
    rows, cols = [], []
    for dy, dx in _offsets(d_max):
        qr, qc = pr + dy, pc + dx
        inside = (qr >= 0) & (qr < h) & (qc >= 0) & (qc < w)
        idx = np.full(len(pr), -1, dtype=np.int64)
        idx[inside] = gt_index[qr[inside], qc[inside]]
        hit = idx >= 0
        rows.append(np.nonzero(hit)[0])
        cols.append(idx[hit])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    if len(rows) == 0:
        return matched_pred, matched_gt
    graph = csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(pr), len(gr)))
    match = maximum_bipartite_matching(graph, perm_type="column")
    ok = match >= 0
    matched_pred[pr[ok], pc[ok]] = True
    matched_gt[gr[match[ok]], gc[match[ok]]] = True
    return matched_pred, matched_gt


def match_boundaries(pred: np.ndarray, gt: np.ndarray, d_max: float) -> tuple[int, int, int]:
    """``(tp, fp, fn)`` of a maximum one-to-one matching within ``d_max`` pixels."""
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    mp, _ = match_pixels(pred, gt, d_max)
    tp = int(mp.sum())
    return tp, int(np.count_nonzero(pred)) - tp, int(np.count_nonzero(gt)) - tp


def tolerance_pixels(height: int, width: int, fraction: float) -> float:
    return fraction * math.hypot(height, width)


# --------------------------------------------------------------------------
# tallies and F-measures

@dataclass
class ThresholdTally:
    """Per-image, per-threshold counts, each an (images, thresholds) integer array.

    ``matched_pred`` counts prediction pixels matched to at least one
    annotator; ``matched_gt`` and ``gt_total`` are summed over annotators.
    """
    thresholds: np.ndarray
    matched_pred: np.ndarray
    pred_total: np.ndarray
    matched_gt: np.ndarray
    gt_total: np.ndarray
    ids: list[str]

    @property
    def tp(self) -> np.ndarray:
        return self.matched_pred

    @property
    def fp(self) -> np.ndarray:
        return self.pred_total - self.matched_pred

    @property
    def fn(self) -> np.ndarray:
        return self.gt_total - self.matched_gt

    def merge(self, other: "ThresholdTally") -> "ThresholdTally":
        if not np.array_equal(self.thresholds, other.thresholds):
            raise ValueError("cannot merge tallies over different threshold grids")
        cat = lambda a, b: np.concatenate([a, b], axis=0)  # noqa: E731
        return ThresholdTally(self.thresholds, cat(self.matched_pred, other.matched_pred),
                              cat(self.pred_total, other.pred_total), cat(self.matched_gt, other.matched_gt),
                              cat(self.gt_total, other.gt_total), self.ids + other.ids)


def tally_image(edge: np.ndarray, annotators: Sequence[np.ndarray], thresholds: Sequence[float],
                d_max: float, use_nms: bool = True):
    """Count rows ``(matched_pred, pred_total, matched_gt, gt_total)`` over the threshold grid."""
    edge = nms_thin(edge) if use_nms else np.asarray(edge, dtype=np.float64)
    n = len(thresholds)
    counts = np.zeros((4, n), dtype=np.int64)
    gt_total = sum(int(np.count_nonzero(a)) for a in annotators)
    for k, t in enumerate(thresholds):
        binary = edge >= t
        any_match = np.zeros(binary.shape, dtype=bool)
        matched_gt = 0
        for ann in annotators:
            mp, mg = match_pixels(binary, ann, d_max)
            any_match |= mp
            matched_gt += int(mg.sum())
        counts[:, k] = (any_match.sum(), binary.sum(), matched_gt, gt_total)
    return counts


def accumulate_tallies(pred_maps: Sequence[np.ndarray], samples: Sequence[Sample],
                       cfg: EvalConfig | None = None) -> ThresholdTally:
    cfg = cfg or EvalConfig()
    if len(pred_maps) != len(samples):
        raise ShapeError(f"{len(pred_maps)} predictions for {len(samples)} samples")
    thresholds = np.asarray(cfg.threshold_values())
    rows = []
    for pred, sample in zip(pred_maps, samples):
        pred = np.asarray(pred)
        if pred.shape != sample.shape:
            raise ShapeError(f"prediction for sample {sample.id!r} has shape {pred.shape}, "
                             f"expected {sample.shape}")
        d_max = tolerance_pixels(*sample.shape, cfg.tolerance_fraction)
        rows.append(tally_image(pred, sample.annotator_gts, thresholds, d_max, cfg.use_nms))
    arr = np.stack(rows) if rows else np.zeros((0, 4, len(thresholds)), dtype=np.int64)
    return ThresholdTally(thresholds, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], [s.id for s in samples])


def f_measure(p, r):
    """Harmonic mean of precision and recall, 0 where both are 0."""
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    denom = p + r
    out = np.divide(2 * p * r, denom, out=np.zeros(np.broadcast(p, r).shape), where=denom > 0)
    return float(out) if out.ndim == 0 else out


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


@dataclass
class EvalResult:
    ods: float
    ois: float
    ods_threshold: float
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray

    @property
    def pr_points(self) -> list[tuple[float, float]]:
        return list(zip(self.precision.tolist(), self.recall.tolist()))


def ods_ois(tally: ThresholdTally) -> EvalResult:
    """ODS from dataset-summed counts at one shared threshold; OIS as the mean per-image best F."""
    if tally.matched_pred.shape[0] == 0:
        raise ValueError("tally covers no images")
    precision = _ratio(tally.matched_pred.sum(0), tally.pred_total.sum(0))
    recall = _ratio(tally.matched_gt.sum(0), tally.gt_total.sum(0))
    f = f_measure(precision, recall)
    best = int(np.argmax(f))
    per_image = f_measure(_ratio(tally.matched_pred, tally.pred_total), _ratio(tally.matched_gt, tally.gt_total))
    ois = float(np.mean(per_image.max(axis=1)))
    return EvalResult(float(f[best]), ois, float(tally.thresholds[best]), tally.thresholds,
                      precision, recall, f)


def evaluate(pred_maps, samples, cfg: EvalConfig | None = None) -> EvalResult:
    return ods_ois(accumulate_tallies(pred_maps, samples, cfg))


# --------------------------------------------------------------------------
# multi-scale inference

def multi_scale_infer(model: Callable, image: torch.Tensor, scales: Sequence[float] = MS_SCALES) -> torch.Tensor:
    """Average of the model's edge maps over rescaled copies of ``image``.

    ``image`` is a (B, C, H, W) tensor and ``model`` maps such a tensor to a
    (B, 1, h, w) probability map. Each map is resized back to H x W
    bilinearly before averaging.
    """
    from .model import MIN_SIDE

    if image.dim() == 3:
        image = image[None]
    h, w = image.shape[-2:]
    sizes = []
    for s in scales:
        sh, sw = int(round(h * s)), int(round(w * s))
        if sh < MIN_SIDE or sw < MIN_SIDE:
            raise ShapeError(f"scale {s} gives {sh}x{sw}, below the {MIN_SIDE}x{MIN_SIDE} minimum")
        sizes.append((sh, sw))
    total = None
    for sh, sw in sizes:
        x = image if (sh, sw) == (h, w) else F.interpolate(image, size=(sh, sw), mode="bilinear",
                                                             align_corners=False)
        out = model(x)
        if tuple(out.shape[-2:]) != (h, w):
            out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
        total = out if total is None else total + out
    return total / len(sizes)
