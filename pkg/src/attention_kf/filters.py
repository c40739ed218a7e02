"""Model-based baselines: EKF, UKF, bootstrap particle filter, and the MSE metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .system import Array, SystemModel, _sqrt_cov

log = logging.getLogger(__name__)


class FilterSingularityError(np.linalg.LinAlgError):
    pass


@dataclass
class GaussianBelief:
    mean: Array
    cov: Array

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))


@dataclass
class UKFConfig:
    """Scaled sigma-point settings.

    ``redraw=True`` regenerates sigma points from the predicted mean and
    covariance before the measurement update (exact on linear models).
    ``redraw=False`` pushes the propagated points straight through ``h``, so the
    cross covariance ignores Q; this is the variant behind the benchmark tables.
    """

    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0
    redraw: bool = True

    @classmethod
    def benchmark(cls) -> "UKFConfig":
        return cls(alpha=0.1, beta=2.0, kappa=-1.0, redraw=False)


@dataclass
class ParticleSet:
    particles: Array  # (P, m)
    weights: Array  # (P,)

    @property
    def mean(self) -> Array:
        return self.weights @ self.particles


def _symmetrize(P: Array) -> Array:
    return 0.5 * (P + P.T)


def _gain(Pxy: Array, S: Array, step: int) -> Array:
    """Pxy S^-1."""
    try:
        return np.linalg.solve(S.T, Pxy.T).T
    except np.linalg.LinAlgError:
        raise FilterSingularityError(f"innovation covariance is singular at step {step}") from None


def ekf_run(model: SystemModel, observations, init: GaussianBelief) -> Array:
    ys = np.asarray(observations, dtype=float)
    if len(ys) < 1:
        raise ValueError("need at least one observation")
    x, P = init.mean.copy(), init.cov.copy()
    I = np.eye(model.state_dim)
    out = np.empty((len(ys), model.state_dim))
    for k, y in enumerate(ys, start=1):
        F = model.jac_f(x)
        x = model.f(x)
        P = F @ P @ F.T + model.Q
        C = model.jac_h(x)
        S = C @ P @ C.T + model.R
        K = _gain(P @ C.T, S, k)
        x = x + K @ (y - model.h(x))
        IKC = I - K @ C
        P = _symmetrize(IKC @ P @ IKC.T + K @ model.R @ K.T)
        out[k - 1] = x
    return out


def sigma_weights(m: int, cfg: UKFConfig) -> tuple[Array, Array, float]:
    lam = cfg.alpha**2 * (m + cfg.kappa) - m
    wm = np.full(2 * m + 1, 1.0 / (2.0 * (m + lam)))
    wc = wm.copy()
    wm[0] = lam / (m + lam)
    wc[0] = lam / (m + lam) + (1.0 - cfg.alpha**2 + cfg.beta)
    return wm, wc, lam


def _cov_sqrt(P: Array, step: int) -> Array:
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    log.info("UKF step %d: covariance not PD, retrying with 1e-9*I jitter", step)
    try:
        return np.linalg.cholesky(P + 1e-9 * np.eye(len(P)))
    except np.linalg.LinAlgError:
        raise FilterSingularityError(f"covariance square root failed at step {step}") from None


def sigma_points(x: Array, P: Array, lam: float, step: int = 0) -> Array:
    m = len(x)
    S = _cov_sqrt((m + lam) * P, step)
    return np.vstack([x, x + S.T, x - S.T])


def ukf_run(model: SystemModel, observations, init: GaussianBelief, ukf_config: UKFConfig | None = None) -> Array:
    ys = np.asarray(observations, dtype=float)
    if len(ys) < 1:
        raise ValueError("need at least one observation")
    cfg = ukf_config or UKFConfig()
    wm, wc, lam = sigma_weights(model.state_dim, cfg)
    x, P = init.mean.copy(), init.cov.copy()
    out = np.empty((len(ys), model.state_dim))
    for k, y in enumerate(ys, start=1):
        X = model.f(sigma_points(x, P, lam, k))
        x = wm @ X
        dX = X - x
        P = _symmetrize((dX.T * wc) @ dX + model.Q)

        if cfg.redraw:
            X = sigma_points(x, P, lam, k)
        Y = model.h(X)
        yhat = wm @ Y
        dX, dY = X - x, Y - yhat
        S = (dY.T * wc) @ dY + model.R
        Pxy = (dX.T * wc) @ dY
        K = _gain(Pxy, S, k)
        x = x + K @ (y - yhat)
        P = _symmetrize(P - K @ S @ K.T)
        out[k - 1] = x
    return out


def systematic_resample(weights: Array, rng: np.random.Generator) -> Array:
    P = len(weights)
    positions = (rng.random() + np.arange(P)) / P
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def pf_run(model: SystemModel, observations, init: GaussianBelief, particle_count: int = 100,
           rng_seed=0) -> Array:
    """Bootstrap particle filter; returns the weighted particle mean per step."""
    if particle_count < 1:
        raise ValueError("particle_count must be >= 1")
    ys = np.asarray(observations, dtype=float)
    if len(ys) < 1:
        raise ValueError("need at least one observation")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    m, P = model.state_dim, particle_count
    Sq = _sqrt_cov(model.Q)
    Rinv = np.linalg.pinv(model.R)
    S0 = _sqrt_cov(_symmetrize(init.cov))
    particles = init.mean + rng.standard_normal((P, m)) @ S0.T
    logw = np.full(P, -np.log(P))
    out = np.empty((len(ys), m))
    for k, y in enumerate(ys, start=1):
        particles = model.f(particles) + rng.standard_normal((P, m)) @ Sq.T
        r = y - model.h(particles)
        logw = logw - 0.5 * np.einsum("pi,ij,pj->p", r, Rinv, r)
        top = np.max(logw)
        if not np.isfinite(top):
            log.warning("PF step %d: all particle weights vanished; resetting to uniform", k)
            w = np.full(P, 1.0 / P)
        else:
            w = np.exp(logw - top)
            w /= w.sum()
        out[k - 1] = w @ particles
        if 1.0 / np.sum(w**2) < P / 2:
            particles = particles[systematic_resample(w, rng)]
            w = np.full(P, 1.0 / P)
        with np.errstate(divide="ignore"):
            logw = np.log(w)
    return out


def mse(estimates, truth) -> float:
    """Squared error averaged over time steps and state dimensions."""
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truth, dtype=float)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {t.shape}")
    return float(np.mean((e - t) ** 2))
