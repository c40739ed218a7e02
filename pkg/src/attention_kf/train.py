"""Two-phase training of the gain network: batch pre-training, then end-to-end BPTT."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from . import atkf, nn
from .batch import PretrainData
from .nn import AttentionNetParams
from .system import Array, Dataset, SystemModel

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 50
    pretrain_epochs: int = 50
    train_epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    window: int = 4
    d_model: int = 32
    d_ff: int = 64

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.pretrain_epochs < 0 or self.train_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: AttentionNetParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros_like(params.flat())
        self.v = np.zeros_like(self.m)
        self.t = 0

    def step(self, params: AttentionNetParams, grads: AttentionNetParams) -> AttentionNetParams:
        c = self.cfg
        g = grads.flat()
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
        mhat = self.m / (1 - c.beta1**self.t)
        vhat = self.v / (1 - c.beta2**self.t)
        return params.with_flat(params.flat() - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps))


def loss(estimates, truth) -> float:
    """(1/L) * sum_j ||x_j - x̂_j||^2."""
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truth, dtype=float)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {t.shape}")
    return float(np.sum((e - t) ** 2) / len(e))


@dataclass
class LogRow:
    phase: str
    epoch: int
    mean_loss: float
    val_mse: float
    wall_seconds: float


def _batches(count: int, size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for i in range(0, count, size):
        yield order[i:i + size]


def _finite(value: float, what: str, phase: str, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{phase} epoch {epoch}: non-finite {what}")


def pretrain(params: AttentionNetParams, data: PretrainData, cfg: TrainConfig,
             val_fn: Callable[[AttentionNetParams], float] | None = None,
             log_rows: list | None = None) -> AttentionNetParams:
    """Regress the one-step update onto true states, one sample per (trajectory, step).

    No filter recursion is run here; ``val_fn`` (optional) is called once per
    epoch for monitoring and best-checkpoint selection.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(params, cfg)
    best, best_val = params, (val_fn(params) if val_fn else np.inf)
    if log_rows is not None and val_fn:
        log_rows.append(LogRow("pretrain", 0, float("nan"), best_val, 0.0))
    t0 = time.perf_counter()
    for epoch in range(1, cfg.pretrain_epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, rng):
            b = data.subset(idx)
            K, tape = nn.forward(params, b.dx_window, b.dy_window)
            x_hat = b.x_prior + (K @ b.innovation[..., None])[..., 0]
            err = x_hat - b.target
            batch_loss = float(np.sum(err**2) / len(idx))
            _finite(batch_loss, "loss", "pretrain", epoch)
            dK = (2.0 / len(idx)) * err[:, :, None] * b.innovation[:, None, :]
            grads, _, _ = nn.backward(tape, dK)
            params = opt.step(params, grads)
            total += batch_loss * len(idx)
            count += len(idx)
        val = val_fn(params) if val_fn else float("nan")
        if val_fn and val < best_val:
            best, best_val = params, val
        row = LogRow("pretrain", epoch, total / count, val, time.perf_counter() - t0)
        log.info("pretrain epoch %d loss %.5g val %.5g", epoch, row.mean_loss, val)
        if log_rows is not None:
            log_rows.append(row)
    return best if val_fn else params


def e2e_gradient(model: SystemModel, params: AttentionNetParams, observations: Array, states: Array, x0):
    """Mini-batch loss (mean over trajectories) and its exact parameter gradient."""
    x_hat, trace = atkf.run_batch(model, params, observations, x0, record=True)
    B, L, _ = states.shape
    err = x_hat - states
    value = float(np.sum(err**2) / (B * L))
    grads = atkf.backprop_through_time(model, trace, 2.0 * err / (B * L))
    return value, grads


def train_e2e(params: AttentionNetParams, dataset: Dataset, model: SystemModel, cfg: TrainConfig, x0,
              val_fn: Callable[[AttentionNetParams], float] | None = None,
              log_rows: list | None = None) -> AttentionNetParams:
    """Full (untruncated) backpropagation through the filter recursion."""
    X, Y = dataset.states, dataset.observations
    rng = np.random.default_rng([cfg.seed, 2])
    opt = Adam(params, cfg)
    best, best_val = params, (val_fn(params) if val_fn else np.inf)
    if log_rows is not None and val_fn:
        log_rows.append(LogRow("e2e", 0, float("nan"), best_val, 0.0))
    t0 = time.perf_counter()
    for epoch in range(1, cfg.train_epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(X), cfg.batch_size, rng):
            try:
                value, grads = e2e_gradient(model, params, Y[idx], X[idx], x0)
            except FloatingPointError as exc:
                raise TrainingError(f"e2e epoch {epoch}: {exc}") from exc
            _finite(value, "loss", "e2e", epoch)
            params = opt.step(params, grads)
            total += value * len(idx)
            count += len(idx)
        val = val_fn(params) if val_fn else float("nan")
        if val_fn and val < best_val:
            best, best_val = params, val
        row = LogRow("e2e", epoch, total / count, val, time.perf_counter() - t0)
        log.info("e2e epoch %d loss %.5g val %.5g", epoch, row.mean_loss, val)
        if log_rows is not None:
            log_rows.append(row)
    return best if val_fn else params


def evaluate(params: AttentionNetParams, test_dataset: Dataset, model: SystemModel, x0) -> float:
    """Filter every test trajectory from ``x0``; MSE over steps, dimensions and trajectories."""
    x_hat = atkf.run_batch(model, params, test_dataset.observations, x0)
    return float(np.mean((x_hat - test_dataset.states) ** 2))
