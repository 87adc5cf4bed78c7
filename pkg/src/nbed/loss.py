"""Annotator-robust weighted binary cross-entropy."""

from __future__ import annotations

import torch

from .config import LossConfig, ShapeError

EPS = 1e-7


def class_weights(gt: torch.Tensor, cfg: LossConfig):
    """Per-image positive/negative weights (alpha, beta) and masks.

    ``gt`` is (B, H, W) or (B, 1, H, W). Returns tensors broadcastable
    against ``gt`` plus the positive and negative masks.
    """
    pos = gt > cfg.eta
    neg = gt == 0
    dims = tuple(range(1, gt.dim()))
    n_pos = pos.sum(dim=dims, keepdim=True).to(gt.dtype)
    n_neg = neg.sum(dim=dims, keepdim=True).to(gt.dtype)
    total = (n_pos + n_neg).clamp_min(1)
    alpha = n_pos / total
    beta = cfg.lam * n_neg / total
    if cfg.rcf_convention:
        alpha, beta = n_neg / total, cfg.lam * n_pos / total
    return alpha, beta, pos, neg


def pixel_losses(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    alpha, beta, pos, neg = class_weights(gt, cfg)
    p = pred.clamp(EPS, 1 - EPS)
    zero = torch.zeros((), dtype=p.dtype)
    return (torch.where(pos, -alpha * torch.log(p), zero)
            + torch.where(neg, -beta * torch.log1p(-p), zero))


def wce_loss(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Weighted cross-entropy of an edge map (or batch of maps) against a consensus map.

    Pixels with ``gt > eta`` are positives weighted by alpha = |Y+|/|Y|,
    pixels with ``gt == 0`` negatives weighted by beta = lam * |Y-|/|Y|,
    everything in between is ignored. A leading batch axis gets per-image
    weights; the result is summed (or averaged over pixels) per image and
    then averaged over the batch.
    """
    cfg = cfg or LossConfig()
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != ground truth shape {tuple(gt.shape)}")
    if pred.dim() == 2:
        pred, gt = pred[None], gt[None]
    losses = pixel_losses(pred, gt, cfg)
    per_image = losses.flatten(1).sum(dim=1)
    if cfg.reduction == "mean":
        per_image = per_image / losses[0].numel()
    return per_image.mean()
