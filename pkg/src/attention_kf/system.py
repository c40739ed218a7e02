"""Nonlinear state-space models, the 2-D sine/square benchmark and simulation.

All functions act on arrays with arbitrary leading batch dimensions: a state
array has shape ``(..., m)`` and a Jacobian array has shape ``(..., m, m)``.

Random draws use numpy's PCG64 bit generator seeded through ``SeedSequence``.
Trajectory ``i`` of a dataset with root seed ``s`` is driven by
``np.random.default_rng([s, i])``, so every instance can be regenerated on its
own and the result does not depend on platform or thread count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


class ModelValidationError(ValueError):
    """Raised when a model's covariances or dimensions are inconsistent."""


@dataclass(frozen=True)
class SynthParams:
    alpha: float
    beta: float
    phi: float
    delta: float
    a: float
    b: float
    c: float


PARA_S = SynthParams(alpha=0.9, beta=1.1, phi=0.1 * np.pi, delta=0.01, a=1.0, b=1.0, c=0.0)
PARA_M = SynthParams(alpha=1.0, beta=1.0, phi=0.0, delta=0.0, a=1.0, b=1.0, c=0.0)

X0 = np.array([0.1, 0.1])


def synth_f(params: SynthParams, x) -> Array:
    x = np.asarray(x, dtype=float)
    return params.alpha * np.sin(params.beta * x + params.phi) + params.delta


def synth_h(params: SynthParams, x) -> Array:
    x = np.asarray(x, dtype=float)
    return params.a * (params.b * x + params.c) ** 2


def _diag_embed(d: Array) -> Array:
    out = np.zeros(d.shape + (d.shape[-1],))
    idx = np.arange(d.shape[-1])
    out[..., idx, idx] = d
    return out


def synth_jac_f(params: SynthParams, x) -> Array:
    x = np.asarray(x, dtype=float)
    return _diag_embed(params.alpha * params.beta * np.cos(params.beta * x + params.phi))


def synth_jac_h(params: SynthParams, x) -> Array:
    x = np.asarray(x, dtype=float)
    return _diag_embed(2.0 * params.a * params.b * (params.b * x + params.c))


def _check_cov(name: str, M: Array, dim: int) -> Array:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (dim, dim):
        raise ModelValidationError(f"{name} must be {dim}x{dim}, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12):
        raise ModelValidationError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-10:
        raise ModelValidationError(f"{name} is not positive semidefinite")
    return M


def _sqrt_cov(M: Array) -> Array:
    """Lower factor S with S S^T = M (Cholesky, diagonal sqrt, or eigen fallback)."""
    if np.count_nonzero(M - np.diag(np.diag(M))) == 0:
        return np.diag(np.sqrt(np.diag(M)))
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(M)
        return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class SystemModel:
    """x_k = f(x_{k-1}) + w_k,  y_k = h(x_k) + v_k,  w ~ N(0, Q), v ~ N(0, R)."""

    state_dim: int
    obs_dim: int
    f: Callable[[Array], Array]
    h: Callable[[Array], Array]
    jac_f: Callable[[Array], Array]
    jac_h: Callable[[Array], Array]
    Q: Array
    R: Array
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "Q", _check_cov("Q", self.Q, self.state_dim))
        object.__setattr__(self, "R", _check_cov("R", self.R, self.obs_dim))

    def with_noise(self, Q, R) -> "SystemModel":
        return SystemModel(self.state_dim, self.obs_dim, self.f, self.h,
                           self.jac_f, self.jac_h, Q, R, self.name)


def synthetic_model(params: SynthParams = PARA_S, q2: float = 1.0, r2: float = 1.0) -> SystemModel:
    """The 2-D benchmark with Q = q2*I and R = r2*I."""
    return SystemModel(
        state_dim=2,
        obs_dim=2,
        f=lambda x: synth_f(params, x),
        h=lambda x: synth_h(params, x),
        jac_f=lambda x: synth_jac_f(params, x),
        jac_h=lambda x: synth_jac_h(params, x),
        Q=q2 * np.eye(2),
        R=r2 * np.eye(2),
        name="para_s" if params == PARA_S else ("para_m" if params == PARA_M else "synthetic"),
    )


def linear_model(A, C, Q, R) -> SystemModel:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    m, n = A.shape[0], C.shape[0]
    return SystemModel(
        state_dim=m,
        obs_dim=n,
        f=lambda x: np.asarray(x, dtype=float) @ A.T,
        h=lambda x: np.asarray(x, dtype=float) @ C.T,
        jac_f=lambda x: np.broadcast_to(A, np.shape(x)[:-1] + A.shape).copy(),
        jac_h=lambda x: np.broadcast_to(C, np.shape(x)[:-1] + C.shape).copy(),
        Q=Q,
        R=R,
        name="linear",
    )


@dataclass
class Trajectory:
    states: Array  # (L, m)
    observations: Array  # (L, n)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        if len(self.states) != len(self.observations) or len(self.states) < 1:
            raise ValueError("states and observations must have equal length >= 1")

    def __len__(self):
        return len(self.states)


@dataclass
class Dataset:
    instances: list[Trajectory]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.instances:
            shape_x = self.instances[0].states.shape
            shape_y = self.instances[0].observations.shape
            for t in self.instances:
                if t.states.shape != shape_x or t.observations.shape != shape_y:
                    raise ValueError("all instances must share L and dimensions")

    def __len__(self):
        return len(self.instances)

    @property
    def states(self) -> Array:
        """(N, L, m) stacked true states."""
        return np.stack([t.states for t in self.instances])

    @property
    def observations(self) -> Array:
        return np.stack([t.observations for t in self.instances])

    def to_json(self) -> str:
        doc = {
            "meta": self.meta,
            "instances": [
                {"x": t.states.tolist(), "y": t.observations.tolist()} for t in self.instances
            ],
        }
        # repr of a Python float round-trips exactly (shortest form of the double).
        return json.dumps(doc, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        return cls([Trajectory(d["x"], d["y"]) for d in doc["instances"]], doc["meta"])


def simulate_trajectory(model: SystemModel, x0, L: int, rng_seed=0) -> Trajectory:
    if L < 1:
        raise ValueError("L must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    Sq = _sqrt_cov(model.Q)
    Sr = _sqrt_cov(model.R)
    m, n = model.state_dim, model.obs_dim
    w = rng.standard_normal((L, m)) @ Sq.T
    v = rng.standard_normal((L, n)) @ Sr.T
    xs = np.empty((L, m))
    ys = np.empty((L, n))
    x = np.asarray(x0, dtype=float)
    for k in range(L):
        x = model.f(x) + w[k]
        xs[k] = x
        ys[k] = model.h(x) + v[k]
    return Trajectory(xs, ys)


def generate_dataset(model: SystemModel, x0, N: int, L: int, seed: int) -> Dataset:
    if N < 1:
        raise ValueError("N must be >= 1")
    instances = [simulate_trajectory(model, x0, L, np.random.default_rng([seed, i])) for i in range(N)]
    meta = {
        "n": N,
        "l": L,
        "m": model.state_dim,
        "obs_dim": model.obs_dim,
        "q2": float(model.Q[0, 0]),
        "r2": float(model.R[0, 0]),
        "seed": seed,
    }
    return Dataset(instances, meta)


def noise_free_trajectory(model: SystemModel, x0, L: int) -> Array:
    if L < 1:
        raise ValueError("L must be >= 1")
    xs = np.empty((L, model.state_dim))
    x = np.asarray(x0, dtype=float)
    for k in range(L):
        x = model.f(x)
        xs[k] = x
    return xs
