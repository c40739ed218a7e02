"""Independent reference computations used only by the tests."""

import numpy as np


def central_difference_jacobian(fn, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((fn(x + e) - fn(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def central_difference_grad(loss, x, step=1e-6):
    """Gradient of a scalar function of an array, entry by entry."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (loss(xp) - loss(xm)) / (2 * step)
    return g


def kalman_filter(A, C, Q, R, x0, P0, ys):
    """Textbook linear KF, information written out with explicit inverses."""
    x, P = np.array(x0, dtype=float), np.array(P0, dtype=float)
    out = []
    for y in ys:
        x = A @ x
        P = A @ P @ A.T + Q
        S = C @ P @ C.T + R
        K = P @ C.T @ np.linalg.inv(S)
        x = x + K @ (y - C @ x)
        P = (np.eye(len(x)) - K @ C) @ P
        out.append(x)
    return np.array(out)


def kf_rts_smoother(As, Cs, us, ybars, Qs, Rs, x1, P1):
    """Forward KF + Rauch-Tung-Striebel backward pass on an LTV system.

    x_1 ~ N(x1, P1), x_{k+1} = As[k] x_k + us[k] + w_{k+1} (w ~ Qs[k+1]),
    ybar_k = Cs[k] x_k + v_k (v ~ Rs[k]).
    """
    L = len(Cs)
    xf, Pf, xp, Pp = [], [], [], []
    x, P = np.array(x1, dtype=float), np.array(P1, dtype=float)
    for k in range(L):
        if k > 0:
            x = As[k - 1] @ x + us[k - 1]
            P = As[k - 1] @ P @ As[k - 1].T + Qs[k]
        xp.append(x)
        Pp.append(P)
        S = Cs[k] @ P @ Cs[k].T + Rs[k]
        K = P @ Cs[k].T @ np.linalg.inv(S)
        x = x + K @ (ybars[k] - Cs[k] @ x)
        P = P - K @ Cs[k] @ P
        xf.append(x)
        Pf.append(P)
    xs = [None] * L
    xs[-1] = xf[-1]
    for k in range(L - 2, -1, -1):
        G = Pf[k] @ As[k].T @ np.linalg.inv(Pp[k + 1])
        xs[k] = xf[k] + G @ (xs[k + 1] - xp[k + 1])
    return np.array(xs)


def random_spd(rng, d, lo=0.2):
    M = rng.standard_normal((d, d))
    return M @ M.T / d + lo * np.eye(d)
