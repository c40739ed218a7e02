"""Simplified self-attention gain network with a hand-written adjoint.

The graph is fixed: two linear embeddings, sinusoidal positional encoding,
parameter-free attention ``softmax(X X^T / sqrt(d)) X``, a ReLU MLP with a
residual connection, and a linear head over the flattened sequence producing
the ``m x n`` gain. Every function takes a leading batch axis; arrays are numpy
float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .system import Array

FORMAT_VERSION = 1


def softmax_rows(M: Array) -> Array:
    M = np.asarray(M, dtype=float)
    e = np.exp(M - M.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def simplified_attention(X: Array) -> Array:
    X = np.asarray(X, dtype=float)
    S = X @ np.swapaxes(X, -1, -2) / np.sqrt(X.shape[-1])
    return softmax_rows(S) @ X


FEATURE_TRANSFORMS = ("none", "slog", "l2")


def transform_features(v: Array, kind: str) -> tuple[Array, Array | None]:
    """Input squashing applied to each window row; returns (value, cache)."""
    if kind == "none":
        return v, None
    if kind == "slog":
        return np.sign(v) * np.log1p(np.abs(v)), None
    if kind == "l2":
        norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + 1e-24)
        return v / norm, norm
    raise ValueError(f"unknown feature transform {kind!r}")


def _transform_adjoint(v: Array, out: Array, cache, g: Array, kind: str) -> Array:
    if kind == "none":
        return g
    if kind == "slog":
        return g / (1.0 + np.abs(v))
    return (g - out * np.sum(out * g, axis=-1, keepdims=True)) / cache


def positional_encoding(T: int, d: int) -> Array:
    if d % 2:
        raise ValueError("positional encoding width must be even")
    pos = np.arange(T)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


@dataclass
class AttentionNetParams:
    embed_x_w: Array  # (m, d)
    embed_x_b: Array  # (d,)
    embed_y_w: Array  # (n, d)
    embed_y_b: Array  # (d,)
    mlp_w1: Array  # (d, d_ff)
    mlp_b1: Array  # (d_ff,)
    mlp_w2: Array  # (d_ff, d)
    mlp_b2: Array  # (d,)
    out_w: Array  # (2s*d, m*n)
    out_b: Array  # (m*n,)
    # squashing of the raw window features before embedding (not learned)
    feature_transform: str = "l2"

    @property
    def m(self) -> int:
        return self.embed_x_w.shape[0]

    @property
    def n(self) -> int:
        return self.embed_y_w.shape[0]

    @property
    def d_model(self) -> int:
        return self.embed_x_w.shape[1]

    @property
    def d_ff(self) -> int:
        return self.mlp_w1.shape[1]

    @property
    def window(self) -> int:
        return self.out_w.shape[0] // (2 * self.d_model)

    def names(self) -> list[str]:
        return [f.name for f in fields(self) if f.name != "feature_transform"]

    def arrays(self) -> list[Array]:
        return [getattr(self, name) for name in self.names()]

    def _rebuild(self, arrays) -> "AttentionNetParams":
        return AttentionNetParams(*arrays, feature_transform=self.feature_transform)

    def copy(self) -> "AttentionNetParams":
        return self._rebuild([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "AttentionNetParams":
        return self._rebuild([np.zeros_like(a) for a in self.arrays()])

    def flat(self) -> Array:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: Array) -> "AttentionNetParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i:i + a.size], dtype=float).reshape(a.shape).copy())
            i += a.size
        return self._rebuild(out)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_json(self) -> str:
        doc = {
            "format_version": FORMAT_VERSION,
            "feature_transform": self.feature_transform,
            "params": {
                name: {"shape": list(a.shape), "data": a.ravel().tolist()}
                for name, a in zip(self.names(), self.arrays())
            },
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "AttentionNetParams":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
        p = doc["params"]
        arrays = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in p.items()}
        return cls(**arrays, feature_transform=doc["feature_transform"])


def init_params(m: int, n: int, s: int, d_model: int = 32, d_ff: int = 64, seed: int = 0,
                feature_transform: str = "l2") -> AttentionNetParams:
    """Glorot-uniform weights, zero biases."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    if feature_transform not in FEATURE_TRANSFORMS:
        raise ValueError(f"unknown feature transform {feature_transform!r}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return AttentionNetParams(
        embed_x_w=glorot(m, d_model),
        embed_x_b=np.zeros(d_model),
        embed_y_w=glorot(n, d_model),
        embed_y_b=np.zeros(d_model),
        mlp_w1=glorot(d_model, d_ff),
        mlp_b1=np.zeros(d_ff),
        mlp_w2=glorot(d_ff, d_model),
        mlp_b2=np.zeros(d_model),
        out_w=glorot(2 * s * d_model, m * n),
        out_b=np.zeros(m * n),
        feature_transform=feature_transform,
    )


class GradientTape:
    """Intermediates of one batched forward pass; consumed by a single backward."""

    def __init__(self, **values):
        self.__dict__.update(values)
        self.consumed = False


def forward(params: AttentionNetParams, dx_window: Array, dy_window: Array) -> tuple[Array, GradientTape]:
    """Gain ``K`` of shape (B, m, n) from windows (B, s, m) and (B, s, n).

    Unbatched windows (s, m), (s, n) give an unbatched (m, n) gain.
    """
    dx = np.asarray(dx_window, dtype=float)
    dy = np.asarray(dy_window, dtype=float)
    squeeze = dx.ndim == 2
    if squeeze:
        dx, dy = dx[None], dy[None]
    m, n, d, s = params.m, params.n, params.d_model, params.window
    if dx.shape[1:] != (s, m) or dy.shape[1:] != (s, n) or dx.shape[0] != dy.shape[0]:
        raise ValueError(f"window shapes {dx.shape}, {dy.shape} do not match (B, {s}, {m}) / (B, {s}, {n})")
    B, T = dx.shape[0], 2 * s
    scale = 1.0 / np.sqrt(d)

    kind = params.feature_transform
    tx, cx = transform_features(dx, kind)
    ty, cy = transform_features(dy, kind)
    X = np.concatenate([tx @ params.embed_x_w + params.embed_x_b,
                        ty @ params.embed_y_w + params.embed_y_b], axis=1)
    X = X + positional_encoding(T, d)
    P = softmax_rows(X @ np.swapaxes(X, 1, 2) * scale)
    A = P @ X
    H1 = A @ params.mlp_w1 + params.mlp_b1
    Rl = np.maximum(H1, 0.0)
    Z = A + Rl @ params.mlp_w2 + params.mlp_b2
    F = Z.reshape(B, T * d)
    K = (F @ params.out_w + params.out_b).reshape(B, m, n)

    tape = GradientTape(params=params, dx=dx, dy=dy, tx=tx, ty=ty, cx=cx, cy=cy, X=X, P=P, A=A, H1=H1, Rl=Rl, F=F,
                        scale=scale, squeeze=squeeze)
    return (K[0] if squeeze else K), tape


def backward(tape: GradientTape, dLoss_dK: Array) -> tuple[AttentionNetParams, Array, Array]:
    """Parameter gradients (summed over the batch) and window gradients."""
    if tape.consumed:
        raise RuntimeError("gradient tape already consumed")
    tape.consumed = True
    p = tape.params
    dK = np.asarray(dLoss_dK, dtype=float)
    if tape.squeeze:
        dK = dK[None]
    B = tape.dx.shape[0]
    s, d = p.window, p.d_model
    T = 2 * s

    dKf = dK.reshape(B, -1)
    g_out_w = tape.F.T @ dKf
    g_out_b = dKf.sum(axis=0)
    dZ = (dKf @ p.out_w.T).reshape(B, T, d)

    g_b2 = dZ.sum(axis=(0, 1))
    g_w2 = np.einsum("bti,btj->ij", tape.Rl, dZ)
    dH1 = (dZ @ p.mlp_w2.T) * (tape.H1 > 0)
    g_b1 = dH1.sum(axis=(0, 1))
    g_w1 = np.einsum("bti,btj->ij", tape.A, dH1)
    dA = dZ + dH1 @ p.mlp_w1.T

    X, P = tape.X, tape.P
    dP = dA @ np.swapaxes(X, 1, 2)
    dX = np.swapaxes(P, 1, 2) @ dA
    dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True))
    dX += (dS + np.swapaxes(dS, 1, 2)) @ X * tape.scale

    dEx, dEy = dX[:, :s], dX[:, s:]
    grads = AttentionNetParams(
        embed_x_w=np.einsum("bsi,bsj->ij", tape.tx, dEx),
        embed_x_b=dEx.sum(axis=(0, 1)),
        embed_y_w=np.einsum("bsi,bsj->ij", tape.ty, dEy),
        embed_y_b=dEy.sum(axis=(0, 1)),
        mlp_w1=g_w1,
        mlp_b1=g_b1,
        mlp_w2=g_w2,
        mlp_b2=g_b2,
        out_w=g_out_w,
        out_b=g_out_b,
        feature_transform=p.feature_transform,
    )
    kind = p.feature_transform
    d_dx = _transform_adjoint(tape.dx, tape.tx, tape.cx, dEx @ p.embed_x_w.T, kind)
    d_dy = _transform_adjoint(tape.dy, tape.ty, tape.cy, dEy @ p.embed_y_w.T, kind)
    if tape.squeeze:
        d_dx, d_dy = d_dx[0], d_dy[0]
    return grads, d_dx, d_dy
