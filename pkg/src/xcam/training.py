"""Optimisation recipe: ADAM, step learning-rate decay, BCE loss, training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Callable, Mapping

import numpy as np

from . import tensor_core as tc
from .blocks import Model, forward_backward
from .errors import ConfigError, NumericalError, ShapeError, ValidationError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 1e-3

    def __post_init__(self):
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ConfigError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.lr0 <= 0:
            raise ConfigError("eps and lr0 must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    step_epochs: int = 30
    decay_factor: float = 0.1
    total_epochs: int = 120
    batch_size: int = 32

    def __post_init__(self):
        if self.total_epochs < 1 or self.batch_size < 1:
            raise ConfigError("total_epochs and batch_size must be >= 1")
        if self.step_epochs < 1:
            raise ConfigError(f"step_epochs must be >= 1, got {self.step_epochs}")
        if not 0 < self.decay_factor < 1:
            raise ConfigError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")


@dataclass(frozen=True)
class TrainConfig:
    adam: AdamConfig = field(default_factory=AdamConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def to_dict(self) -> dict:
        return {"adam": asdict(self.adam), "schedule": asdict(self.schedule)}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class RunManifest:
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0
    final_metrics: dict | None = None

    def to_json(self) -> str:
        d = {"seed": self.seed, "config": self.config, "epochs": self.epochs, "wall_seconds": self.wall_seconds}
        if self.final_metrics is not None:
            d["final_metrics"] = self.final_metrics
        return json.dumps(d, indent=2, sort_keys=True)


def bce_loss(probability, label) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``probability``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; where the clamp is active the
    gradient is zero.
    """
    p = np.asarray(probability, dtype=np.float64)
    y = np.asarray(label)
    if p.shape != y.shape:
        raise ShapeError(f"probability shape {p.shape} != label shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    n = p.size
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -np.sum(y * np.log(pc) + (1 - y) * np.log1p(-pc)) / n
    inside = (p >= PROB_CLAMP) & (p <= 1 - PROB_CLAMP)
    grad = np.where(inside, (-y / pc + (1 - y) / (1 - pc)) / n, 0.0)
    return float(loss), grad


def kd_score(logits: np.ndarray) -> np.ndarray:
    """P(KD) per sample for a one- or two-logit head."""
    z = np.asarray(logits)
    if z.shape[1] == 1:
        return tc.sigmoid(z[:, 0])
    return tc.sigmoid(z[:, 1] - z[:, 0])


def logit_loss(labels: np.ndarray) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """BCE on sigmoid of the head output, as a ``logits -> (loss, dlogits)`` map."""

    def fn(logits):
        diff = logits[:, 0] if logits.shape[1] == 1 else logits[:, 1] - logits[:, 0]
        p = tc.sigmoid(diff.astype(np.float64))
        loss, dp = bce_loss(p, labels)
        ddiff = dp * p * (1 - p)
        if logits.shape[1] == 1:
            return loss, ddiff[:, None]
        return loss, np.stack([-ddiff, ddiff], axis=1)

    return fn


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState, cfg: AdamConfig, lr: float):
    """One bias-corrected ADAM update; returns ``(new_params, new_state)``.

    Neither ``params`` nor ``state`` is modified.
    """
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"gradient/state shape mismatch for {k!r}: {g.shape} vs {p.shape}")
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_params, OptimizerState(new_m, new_v, t)


def lr_at(epoch: int, s: ScheduleConfig = ScheduleConfig(), lr0: float = AdamConfig.lr0) -> float:
    """``lr0 * decay ** floor(epoch / step_epochs)``, evaluated in decimal.

    Decimal evaluation makes the recipe values exact: 1e-3, 1e-4, 1e-5, 1e-6.
    """
    if not 0 <= epoch < s.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {s.total_epochs})")
    k = epoch // s.step_epochs
    return float(Decimal(repr(lr0)) * Decimal(repr(s.decay_factor)) ** k)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample permutation for one epoch, from a PCG64 stream keyed by (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    model: Model,
    images: np.ndarray,
    labels,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    progress: Callable[[dict], None] | None = None,
) -> tuple[Model, RunManifest]:
    """Train a copy of ``model``; the input model is left untouched.

    ``images`` is an (n, c, h, w) batch already scaled to [0, 1].  Every epoch
    is a full shuffled pass; the last partial batch is kept.
    """
    labels = np.asarray(labels)
    x = tc.as_tensor4(images)
    if len(labels) != x.shape[0] or x.shape[0] == 0:
        raise ValidationError(f"{x.shape[0]} images but {len(labels)} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    if len(np.unique(labels)) < 2:
        raise ValidationError("training split must contain both classes")
    model = model.copy()
    x = x.astype(model.dtype, copy=False)
    sched = cfg.schedule
    state = OptimizerState.zeros_like(model.params)
    manifest = RunManifest(seed=seed, config=cfg.to_dict())
    started = time.perf_counter()
    n = x.shape[0]
    for epoch in range(sched.total_epochs):
        lr = lr_at(epoch, sched, cfg.adam.lr0)
        order = epoch_order(n, seed, epoch)
        total = 0.0
        for b, start in enumerate(range(0, n, sched.batch_size)):
            idx = order[start : start + sched.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, _ = forward_backward(model, x[idx], logit_loss(labels[idx]), training=True)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            new_params, state = adam_step(model.params, grads, state, cfg.adam, lr)
            model.params.update(new_params)
            total += loss * len(idx)
        record = {"epoch": epoch, "lr": lr, "mean_loss": total / n}
        manifest.epochs.append(record)
        if progress is not None:
            progress(record)
        log.debug("epoch %d lr %g loss %.6f", epoch, lr, total / n)
    manifest.wall_seconds = time.perf_counter() - started
    return model, manifest
