"""Batch (whole-window) state estimation over a lattice-linearized trajectory.

The linear time-varying system

    x_{k+1} = A_k x_k + u_{k+1} + w,   ybar_k = C_k x_k + v

is stacked into ``z = H x + noise`` with block-diagonal noise covariance ``W``
and solved through the normal equations ``(H^T W^-1 H) x = H^T W^-1 z``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf

from .atkf import windows_from_history
from .ltpwl import LtpwlSystem
from .system import Array, Dataset, SystemModel, Trajectory


class BatchSingularityError(np.linalg.LinAlgError):
    pass


@dataclass
class LtvStep:
    """Linearization at step k.

    ``u`` is the offset of the transition leaving step k (u_{k+1} in the
    stacked vector) and ``ybar`` the shifted observation at step k.
    """

    A: Array
    C: Array
    u: Array
    ybar: Array


@dataclass
class BatchSystem:
    z: Array
    H: Array
    W: Array
    prior: tuple[Array, Array]
    state_dim: int

    @property
    def length(self) -> int:
        return self.H.shape[1] // self.state_dim


def ltv_steps(lin: LtpwlSystem, states, observations) -> list[LtvStep]:
    """Per-step A_k, C_k and offsets from the segments active at the true states."""
    xs = np.asarray(states, dtype=float)
    ys = np.asarray(observations, dtype=float)
    if xs.shape[0] != ys.shape[0]:
        raise ValueError("states and observations differ in length")
    fa, fb = lin.active_affine(lin.f_exprs, xs)
    ha, hb = lin.active_affine(lin.h_exprs, xs)
    return [LtvStep(np.diag(fa[k]), np.diag(ha[k]), fb[k].copy(), ys[k] - hb[k]) for k in range(len(xs))]


def _per_step(M, count: int, what: str) -> list[Array]:
    M = np.asarray(M, dtype=float)
    mats = [M] * count if M.ndim == 2 else list(M)
    if len(mats) != count:
        raise ValueError(f"expected {count} {what} matrices, got {len(mats)}")
    return mats


def assemble(steps: list[LtvStep], prior, Q, R) -> BatchSystem:
    """Stack z, H and W. ``Q`` / ``R`` are one matrix or one per step."""
    L = len(steps)
    if L < 1:
        raise ValueError("need at least one step")
    x1, P1 = np.asarray(prior[0], dtype=float), np.atleast_2d(np.asarray(prior[1], dtype=float))
    m = steps[0].A.shape[0]
    n = steps[0].C.shape[0]
    Qs = _per_step(Q, L, "Q")
    Rs = _per_step(R, L, "R")

    H = np.zeros((L * m + L * n, L * m))
    W = np.zeros((L * m + L * n,) * 2)
    z = np.empty(L * m + L * n)
    blocks = [P1] + Qs[1:] + Rs
    for k in range(L):
        r = slice(k * m, (k + 1) * m)
        H[r, r] = np.eye(m)
        if k > 0:
            H[r, (k - 1) * m:k * m] = -steps[k - 1].A
        z[r] = x1 if k == 0 else steps[k - 1].u
        o = slice(L * m + k * n, L * m + (k + 1) * n)
        H[o, r] = steps[k].C
        z[o] = steps[k].ybar
    pos = 0
    for idx, blk in enumerate(blocks):
        _, info = dpotrf(blk, lower=1)
        if info != 0 or not np.allclose(blk, blk.T):
            raise ValueError(f"noise block {idx} of W is not symmetric positive definite")
        d = len(blk)
        W[pos:pos + d, pos:pos + d] = blk
        pos += d
    return BatchSystem(z, H, W, (x1, P1), m)


def information_matrix(sys: BatchSystem) -> tuple[Array, Array]:
    """H^T W^-1 H and H^T W^-1 z."""
    WiH = np.linalg.solve(sys.W, sys.H)
    Wiz = np.linalg.solve(sys.W, sys.z)
    return sys.H.T @ WiH, sys.H.T @ Wiz


def batch_estimate(sys: BatchSystem) -> Array:
    """Posterior states (L, m) from a Cholesky solve of the normal equations."""
    M, b = information_matrix(sys)
    c, info = dpotrf(M, lower=1, clean=1)
    if info != 0:
        raise BatchSingularityError(f"normal matrix not positive definite at pivot {info - 1}")
    xhat = cho_solve((c, True), b)
    return xhat.reshape(-1, sys.state_dim)


def smooth_trajectory(lin: LtpwlSystem, traj: Trajectory, prior, Q, R) -> Array:
    return batch_estimate(assemble(ltv_steps(lin, traj.states, traj.observations), prior, Q, R))


@dataclass
class PretrainData:
    """Non-recursive training pairs: gain-network windows and regression targets.

    For each sample the update is ``x_prior + K @ innovation`` and the target is
    the true state.
    """

    dx_window: Array  # (S, s, m)
    dy_window: Array  # (S, s, n)
    x_prior: Array  # (S, m)
    innovation: Array  # (S, n)
    target: Array  # (S, m)

    def __len__(self):
        return len(self.target)

    def subset(self, idx) -> "PretrainData":
        return PretrainData(self.dx_window[idx], self.dy_window[idx], self.x_prior[idx],
                            self.innovation[idx], self.target[idx])

    @staticmethod
    def concat(parts: list["PretrainData"]) -> "PretrainData":
        return PretrainData(*[np.concatenate([getattr(p, f) for p in parts]) for f in
                              ("dx_window", "dy_window", "x_prior", "innovation", "target")])


def build_pretrain_instance(traj: Trajectory, xhat, model: SystemModel, s: int, x0) -> PretrainData:
    """Pseudo-filter features from batch estimates.

    With x̂_0 = ``x0`` and x̂_1..x̂_L = ``xhat``: prior_j = f(x̂_{j-1}),
    innovation_j = y_j - h(prior_j), dx_{j-1} = x̂_{j-1} - prior_{j-1} (dx_0 = 0).
    Windows are zero padded exactly as in the filter.
    """
    xhat = np.asarray(xhat, dtype=float)
    L = len(traj)
    if xhat.shape != traj.states.shape:
        raise ValueError("xhat must match the trajectory's state array")
    prev = np.vstack([np.asarray(x0, dtype=float)[None], xhat[:-1]])
    x_prior = model.f(prev)
    innov = traj.observations - model.h(x_prior)
    dx = np.zeros_like(xhat)  # dx[j] = Δx_j for j = 0..L-1
    dx[1:] = xhat[:-1] - x_prior[:-1]
    dxw, dyw = windows_from_history(dx, innov, s)
    return PretrainData(dxw, dyw, x_prior, innov, traj.states.copy())


def build_pretrain_data(dataset: Dataset, lin: LtpwlSystem, model: SystemModel, s: int, x0,
                        P1=None) -> PretrainData:
    """Batch-estimate every trajectory and collect all pre-training pairs."""
    m = model.state_dim
    P1 = np.eye(m) if P1 is None else P1
    prior = (model.f(np.asarray(x0, dtype=float)), P1)
    parts = []
    for traj in dataset.instances:
        xhat = smooth_trajectory(lin, traj, prior, model.Q, model.R)
        parts.append(build_pretrain_instance(traj, xhat, model, s, x0))
    return PretrainData.concat(parts)


def pretrain_data_to_json(dataset: Dataset, data: PretrainData) -> str:
    """Dataset envelope plus a per-instance "features" array."""
    L = dataset.meta.get("l", len(dataset.instances[0]))
    insts = []
    for i, t in enumerate(dataset.instances):
        sl = slice(i * L, (i + 1) * L)
        insts.append({
            "x": t.states.tolist(),
            "y": t.observations.tolist(),
            "features": [
                {"dx_window": data.dx_window[j].tolist(), "dy_window": data.dy_window[j].tolist(),
                 "x_prior": data.x_prior[j].tolist(), "innovation": data.innovation[j].tolist()}
                for j in range(sl.start, sl.stop)
            ],
        })
    return json.dumps({"meta": dataset.meta, "instances": insts})
