"""Attention Kalman filter recursion and its adjoint through time.

Per step k:
    prior      x̌_k = f(x̂_{k-1}),   ŷ_k = h(x̌_k)
    features   Δx_{k-1} = x̂_{k-1} - x̌_{k-1}  (Δx_0 = 0),   Δy_k = y_k - ŷ_k
    gain       K_k = net(window of the last s Δx, window of the last s Δy)
    update     x̂_k = x̌_k + K_k Δy_k
Windows hold the newest entry last and are zero padded until s entries exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import AttentionNetParams
from .system import Array, SystemModel


class FilterDivergenceError(FloatingPointError):
    pass


def windows_from_history(dx: Array, dy: Array, s: int) -> tuple[Array, Array]:
    """Sliding windows for every step from full feature histories.

    ``dx[..., j, :]`` holds Δx_j (j = 0..L-1) and ``dy[..., j, :]`` holds
    Δy_{j+1}; the window for step j+1 covers rows j-s+1..j of both.
    """
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    L = dx.shape[-2]
    pad_x = np.zeros(dx.shape[:-2] + (s - 1, dx.shape[-1]))
    pad_y = np.zeros(dy.shape[:-2] + (s - 1, dy.shape[-1]))
    px = np.concatenate([pad_x, dx], axis=-2)
    py = np.concatenate([pad_y, dy], axis=-2)
    idx = np.arange(L)[:, None] + np.arange(s)[None, :]
    return px[..., idx, :], py[..., idx, :]


@dataclass
class FeatureWindow:
    dx_history: Array  # (s, m), oldest first
    dy_history: Array  # (s, n)

    @classmethod
    def empty(cls, s: int, m: int, n: int) -> "FeatureWindow":
        return cls(np.zeros((s, m)), np.zeros((s, n)))

    @property
    def size(self) -> int:
        return len(self.dx_history)


def window_push(window: FeatureWindow, dx, dy) -> FeatureWindow:
    return FeatureWindow(
        np.concatenate([window.dx_history[1:], np.asarray(dx, dtype=float)[None]]),
        np.concatenate([window.dy_history[1:], np.asarray(dy, dtype=float)[None]]),
    )


@dataclass
class AtkfState:
    x_hat: Array
    window: FeatureWindow
    step: int = 0
    dx_prev: Array = None  # Δx_{k-1}; zero before the first update

    def __post_init__(self):
        self.x_hat = np.asarray(self.x_hat, dtype=float)
        if self.dx_prev is None:
            self.dx_prev = np.zeros_like(self.x_hat)

    @classmethod
    def initial(cls, x0, params: AttentionNetParams) -> "AtkfState":
        return cls(np.asarray(x0, dtype=float), FeatureWindow.empty(params.window, params.m, params.n))


def _push(win: Array, new: Array) -> Array:
    return np.concatenate([win[:, 1:], new[:, None]], axis=1)


def _update(x_prior: Array, K: Array, innov: Array) -> Array:
    return x_prior + (K @ innov[..., None])[..., 0]


def _check(K: Array, x: Array, step: int) -> None:
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(x))):
        raise FilterDivergenceError(f"non-finite gain or estimate at step {step}")


def atkf_step(model: SystemModel, params: AttentionNetParams, state: AtkfState, y_k):
    """One prediction/update. Returns (new state, x̂_k, K_k, tape)."""
    k = state.step + 1
    x_prior = model.f(state.x_hat[None])
    innov = np.asarray(y_k, dtype=float)[None] - model.h(x_prior)
    dxw = _push(state.window.dx_history[None], state.dx_prev[None])
    dyw = _push(state.window.dy_history[None], innov)
    K, tape = nn.forward(params, dxw, dyw)
    x_hat = _update(x_prior, K, innov)
    _check(K, x_hat, k)
    new = AtkfState(x_hat[0], FeatureWindow(dxw[0], dyw[0]), k, (x_hat - x_prior)[0])
    return new, x_hat[0], K[0], tape


@dataclass
class RunTrace:
    """Everything the adjoint needs from a batched run."""

    x0: Array  # (B, m)
    x_prior: Array  # (B, L, m)
    x_hat: Array  # (B, L, m)
    innovation: Array  # (B, L, n)
    gains: Array  # (B, L, m, n)
    dx_windows: Array  # (B, L, s, m)
    dy_windows: Array  # (B, L, s, n)
    tapes: list = field(default_factory=list)


def run_batch(model: SystemModel, params: AttentionNetParams, observations, x0, record: bool = False):
    """Filter B trajectories at once. ``observations`` is (B, L, n).

    Returns the estimates (B, L, m), plus a ``RunTrace`` when ``record``.
    """
    Y = np.asarray(observations, dtype=float)
    if Y.ndim != 3 or Y.shape[1] < 1:
        raise ValueError("observations must be (B, L, n) with L >= 1")
    B, L, n = Y.shape
    m, s = params.m, params.window
    xh = np.broadcast_to(np.asarray(x0, dtype=float), (B, m)).copy()
    x0b = xh.copy()
    dx_prev = np.zeros((B, m))
    dxw = np.zeros((B, s, m))
    dyw = np.zeros((B, s, n))
    out = np.empty((B, L, m))
    if record:
        tr = RunTrace(x0b, np.empty((B, L, m)), out, np.empty((B, L, n)), np.empty((B, L, m, n)),
                      np.empty((B, L, s, m)), np.empty((B, L, s, n)))
    for t in range(L):
        x_prior = model.f(xh)
        innov = Y[:, t] - model.h(x_prior)
        dxw = _push(dxw, dx_prev)
        dyw = _push(dyw, innov)
        K, tape = nn.forward(params, dxw, dyw)
        xh = _update(x_prior, K, innov)
        _check(K, xh, t + 1)
        dx_prev = xh - x_prior
        out[:, t] = xh
        if record:
            tr.x_prior[:, t] = x_prior
            tr.innovation[:, t] = innov
            tr.gains[:, t] = K
            tr.dx_windows[:, t] = dxw
            tr.dy_windows[:, t] = dyw
            tr.tapes.append(tape)
    return (out, tr) if record else out


def atkf_run(model: SystemModel, params: AttentionNetParams, observations, x0) -> Array:
    """Estimates (L, m) for one observation sequence (L, n)."""
    Y = np.asarray(observations, dtype=float)
    if len(Y) < 1:
        raise ValueError("need at least one observation")
    return run_batch(model, params, Y[None], x0)[0]


def backprop_through_time(model: SystemModel, trace: RunTrace, dL_dxhat: Array, return_gain_grads: bool = False):
    """Exact adjoint of ``run_batch`` for a loss depending on the estimates only.

    Gradient reaches the parameters through every gain, and through the
    recursion via f, h and the feature windows. Returns summed parameter
    gradients (and optionally dL/dK_k per step).
    """
    g_xh = np.array(dL_dxhat, dtype=float, copy=True)
    B, L, m = g_xh.shape
    n = trace.innovation.shape[2]
    s = trace.dx_windows.shape[2]
    g_dx = np.zeros((B, L + 1, m))  # by Δx index j
    g_dy = np.zeros((B, L, n))  # by step index t (Δy_{t+1})
    grads = None
    gain_grads = np.empty((B, L, m, n)) if return_gain_grads else None
    for t in range(L - 1, -1, -1):
        total = g_xh[:, t] + g_dx[:, t + 1]
        if not np.all(np.isfinite(total)):
            raise FilterDivergenceError(f"non-finite gradient at step {t + 1}")
        innov = trace.innovation[:, t]
        dK = total[:, :, None] * innov[:, None, :]
        if return_gain_grads:
            gain_grads[:, t] = dK
        g_dy[:, t] += np.einsum("bij,bi->bj", trace.gains[:, t], total)
        gp, d_dxw, d_dyw = nn.backward(trace.tapes[t], dK)
        grads = gp if grads is None else grads._rebuild([a + b for a, b in zip(grads.arrays(), gp.arrays())])
        for r in range(s):
            j = t - s + 1 + r
            if j >= 0:
                g_dx[:, j] += d_dxw[:, r]
                g_dy[:, j] += d_dyw[:, r]
        # Δx_{t+1} contributions to x̂_t and x̌_t cancel on x̌_t
        g_prior = g_xh[:, t] - np.einsum("bij,bi->bj", model.jac_h(trace.x_prior[:, t]), g_dy[:, t])
        if t > 0:
            g_xh[:, t - 1] += np.einsum("bij,bi->bj", model.jac_f(trace.x_hat[:, t - 1]), g_prior)
    return (grads, gain_grads) if return_gain_grads else grads
