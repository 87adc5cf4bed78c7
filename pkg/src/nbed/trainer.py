"""Adam optimisation loop with per-group learning rates."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import ModelConfig, TrainConfig
from .data import Sample
from .loss import wce_loss
from .model import NBED, build_model, image_to_tensor, is_pretrained_param

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


def init_adam_state(params: Mapping[str, torch.Tensor]) -> dict:
    return {"step": 0,
            "m": {k: torch.zeros_like(v) for k, v in params.items()},
            "v": {k: torch.zeros_like(v) for k, v in params.items()}}


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: dict,
              lr, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, dict]:
    """One bias-corrected Adam update with decoupled weight decay.

    ``lr`` is a float or a mapping from parameter name to learning rate.
    Returns new parameter and state dicts; the inputs are not modified.
    """
    t = state["step"] + 1
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state["m"][name] + (1 - beta1) * g
        v = beta2 * state["v"][name] + (1 - beta2) * g * g
        rate = lr[name] if isinstance(lr, Mapping) else lr
        update = (m / c1) / (torch.sqrt(v / c2) + eps)
        new_params[name] = p - rate * update - rate * weight_decay * p
        new_m[name], new_v[name] = m, v
    return new_params, {"step": t, "m": new_m, "v": new_v}


def group_learning_rates(names: Sequence[str], cfg: TrainConfig) -> dict[str, float]:
    return {n: cfg.lr_pretrained if is_pretrained_param(n) else cfg.lr_rest for n in names}


def batch_indices(iteration: int, batch_size: int, n: int, seed: int) -> list[int]:
    """Sample indices for ``iteration``; each pass over the data uses a fresh seeded permutation."""
    out = []
    for s in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, pos = divmod(s, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perm[pos]))
    return out


def _stack(samples: Sequence[Sample], dtype):
    images = torch.cat([image_to_tensor(s.image, dtype) for s in samples])
    gts = torch.stack([torch.as_tensor(s.consensus_gt, dtype=dtype) for s in samples])
    return images, gts


def batch_loss(model: NBED, samples: Sequence[Sample], cfg: TrainConfig) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    sizes = {s.shape for s in samples}
    groups = [list(samples)] if len(sizes) == 1 else [[s] for s in samples]
    total = 0.0
    for group in groups:
        images, gts = _stack(group, dtype)
        logits, sides = model.logits(images, return_side=True)
        loss = wce_loss(torch.sigmoid(logits[:, 0]), gts, cfg.loss)
        for side in sides:
            loss = loss + wce_loss(torch.sigmoid(side[:, 0]), gts, cfg.loss)
        total = total + loss * len(group)
    return total / len(samples)


def checkpoint_from(model: NBED, state: dict | None, iteration: int) -> Checkpoint:
    arrays = {k: v.detach().cpu().numpy().copy() for k, v in model.named_parameters()}
    optim = {}
    if state is not None:
        optim["step"] = np.array([state["step"]], dtype=np.int64)
        for k in arrays:
            optim[f"m.{k}"] = state["m"][k].detach().cpu().numpy().copy()
            optim[f"v.{k}"] = state["v"][k].detach().cpu().numpy().copy()
    return Checkpoint(model.config, arrays, optim, iteration)


def model_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype | None = None) -> NBED:
    first = next(iter(ckpt.named_arrays.values()), None)
    dtype = dtype or (torch.float64 if first is not None and first.dtype == np.float64 else torch.float32)
    model = build_model(ckpt.model_config, dtype=dtype)
    own = dict(model.named_parameters())
    missing = set(own) - set(ckpt.named_arrays)
    extra = set(ckpt.named_arrays) - set(own)
    if missing or extra:
        raise ValueError(f"checkpoint does not match model: missing {sorted(missing)}, unexpected {sorted(extra)}")
    with torch.no_grad():
        for k, p in own.items():
            p.copy_(torch.as_tensor(ckpt.named_arrays[k]))
    return model


def _state_from_checkpoint(ckpt: Checkpoint, model: NBED) -> dict:
    params = dict(model.named_parameters())
    if "step" not in ckpt.optimizer_state:
        return init_adam_state({k: p.detach() for k, p in params.items()})
    return {"step": int(ckpt.optimizer_state["step"][0]),
            "m": {k: torch.as_tensor(ckpt.optimizer_state[f"m.{k}"]).clone() for k in params},
            "v": {k: torch.as_tensor(ckpt.optimizer_state[f"v.{k}"]).clone() for k in params}}


def train(model_cfg: ModelConfig, data: Sequence[Sample], train_cfg: TrainConfig,
          resume: Checkpoint | None = None, dtype: torch.dtype = torch.float32,
          callback=None, overlay: Mapping[str, object] | None = None
          ) -> tuple[Checkpoint, list[tuple[int, float]]]:
    """Run ``train_cfg.max_iterations`` Adam steps on seeded shuffled batches.

    With ``resume`` the run continues from the checkpoint's weights,
    optimizer moments and iteration counter; otherwise ``overlay`` may seed
    the semantic encoder with external weights. Returns the final checkpoint and
    the ``(iteration, loss)`` log, where ``iteration`` counts completed steps
    before the logged one.
    """
    if not data:
        raise ValueError("training data is empty")
    if resume is not None:
        model = model_from_checkpoint(resume, dtype)
        model_cfg = resume.model_config
    else:
        model = build_model(model_cfg, overlay=overlay, dtype=dtype)
    params = dict(model.named_parameters())
    state = _state_from_checkpoint(resume, model) if resume is not None else \
        init_adam_state({k: p.detach() for k, p in params.items()})
    start = resume.iteration if resume is not None else 0
    lrs = group_learning_rates(list(params), train_cfg)
    history = []
    for it in range(start, start + train_cfg.max_iterations):
        batch = [data[i] for i in batch_indices(it, train_cfg.batch_size, len(data), train_cfg.seed)]
        model.zero_grad(set_to_none=True)
        loss = batch_loss(model, batch, train_cfg)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergence(it, value)
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
        if train_cfg.grad_clip > 0:
            norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if norm > train_cfg.grad_clip:
                scale = train_cfg.grad_clip / float(norm)
                grads = {k: g * scale for k, g in grads.items()}
        with torch.no_grad():
            current = {k: p.detach() for k, p in params.items()}
            new, state = adam_step(current, grads, state, lrs, train_cfg.weight_decay)
            for k, p in params.items():
                p.copy_(new[k])
        if (it - start) % train_cfg.log_every == 0 or it == start + train_cfg.max_iterations - 1:
            history.append((it, value))
            log.debug("iteration %d loss %.6f", it, value)
        if callback is not None:
            callback(it, value)
    return checkpoint_from(model, state, start + train_cfg.max_iterations), history


def write_log_csv(history: Sequence[tuple[int, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for it, loss in history:
            fh.write(f"{it},{loss!r}\n")
