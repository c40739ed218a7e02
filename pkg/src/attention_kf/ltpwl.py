"""Lattice trajectory piecewise-linear (LTPWL) approximation of scalar maps.

A continuous piecewise-linear function built from tangent segments is stored in
lattice form ``max_i min_{j in terms[i]} l_j(x)``, which can be evaluated
without locating the interval that contains ``x``. Segment indices are 0-based.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .system import Array, SystemModel

log = logging.getLogger(__name__)

_TOL = 1e-12


@dataclass(frozen=True)
class AffineSegment:
    slope: float
    intercept: float
    anchor: float

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept


def linearize_at(fn: Callable[[float], float], dfn: Callable[[float], float], x_i: float) -> AffineSegment:
    """First-order Taylor segment of ``fn`` at ``x_i``."""
    x_i = float(x_i)
    slope = float(dfn(x_i))
    return AffineSegment(slope, float(fn(x_i)) - slope * x_i, x_i)


@dataclass(frozen=True)
class LatticeExpr:
    segments: tuple[AffineSegment, ...]
    terms: tuple[tuple[int, ...], ...]
    # base regions of the traditional piecewise form: (lo, hi, segment index)
    regions: tuple[tuple[float, float, int], ...] = field(default=())

    @property
    def slopes(self) -> Array:
        return np.array([s.slope for s in self.segments])

    @property
    def intercepts(self) -> Array:
        return np.array([s.intercept for s in self.segments])

    def unique_terms(self) -> set[frozenset[int]]:
        return {frozenset(t) for t in self.terms}

    def to_dict(self) -> dict:
        return {
            "segments": [
                {"slope": s.slope, "intercept": s.intercept, "anchor": s.anchor} for s in self.segments
            ],
            "terms": [list(t) for t in self.terms],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _term_members(segs: list[AffineSegment], i: int, lo: float, hi: float) -> tuple[int, ...]:
    """{j : l_j >= l_i on [lo, hi]}, decided at the interval ends."""
    base = segs[i]
    members = []
    for j, s in enumerate(segs):
        ds = s.slope - base.slope
        dc = s.intercept - base.intercept
        ok = True
        for end, sign in ((lo, -1.0), (hi, 1.0)):
            if np.isinf(end):
                # unbounded side: the difference must not decrease towards it
                if sign * ds < 0 or (ds == 0 and dc < -_TOL):
                    ok = False
            else:
                d = ds * end + dc
                scale = 1.0 + abs(s(end)) + abs(base(end))
                if d < -_TOL * scale:
                    ok = False
        if ok:
            members.append(j)
    return tuple(members)


def build_ltpwl_1d(segments) -> LatticeExpr:
    """Lattice expression for the PWL function through tangent segments sorted by anchor.

    Consecutive segments meet at their intersection. A segment whose interval
    would be empty (breakpoints out of order) is never active and gets no term.
    """
    segs = list(segments)
    if not segs:
        raise ValueError("need at least one segment")
    anchors = [s.anchor for s in segs]
    if any(b <= a for a, b in zip(anchors, anchors[1:])):
        raise ValueError("segment anchors must be strictly increasing")

    unique: list[AffineSegment] = []
    for s in segs:
        if any(abs(s.slope - u.slope) <= _TOL and abs(s.intercept - u.intercept) <= _TOL for u in unique):
            continue
        unique.append(s)
    segs = unique

    active = [0]
    breaks: list[float] = []
    for j in range(1, len(segs)):
        while True:
            i = active[-1]
            a, b = segs[i], segs[j]
            if a.slope == b.slope:
                bp = 0.5 * (a.anchor + b.anchor)
                log.warning("parallel segments %d and %d; breakpoint set to anchor midpoint %g", i, j, bp)
            else:
                bp = (b.intercept - a.intercept) / (a.slope - b.slope)
            if breaks and bp <= breaks[-1]:
                active.pop()
                breaks.pop()
                continue
            break
        active.append(j)
        breaks.append(bp)

    edges = [-np.inf] + breaks + [np.inf]
    regions = tuple((edges[r], edges[r + 1], i) for r, i in enumerate(active))
    terms = tuple(_term_members(segs, i, lo, hi) for lo, hi, i in regions)
    return LatticeExpr(tuple(segs), terms, regions)


def _term_values(expr: LatticeExpr, x: Array) -> tuple[Array, list[Array]]:
    vals = expr.slopes[:, None] * x[None, :] + expr.intercepts[:, None]
    return vals, [vals[list(t)].min(axis=0) for t in expr.terms]


def eval_ltpwl(expr: LatticeExpr, x):
    """max over terms of min over the term's segments; accepts scalars or arrays."""
    xa = np.asarray(x, dtype=float)
    _, mins = _term_values(expr, xa.ravel())
    out = np.max(np.stack(mins), axis=0).reshape(xa.shape)
    return float(out) if out.ndim == 0 else out


def active_segment(expr: LatticeExpr, x):
    """Index of the segment attaining the lattice value at ``x``.

    Winning term is the first argmax; within it the first argmin, so ties go to
    the smallest index.
    """
    xa = np.asarray(x, dtype=float)
    flat = xa.ravel()
    vals, mins = _term_values(expr, flat)
    best_term = np.argmax(np.stack(mins), axis=0)
    out = np.empty(flat.shape, dtype=int)
    for t_idx, term in enumerate(expr.terms):
        sel = best_term == t_idx
        if np.any(sel):
            lits = np.array(term)
            out[sel] = lits[np.argmin(vals[lits][:, sel], axis=0)]
    out = out.reshape(xa.shape)
    return int(out) if out.ndim == 0 else out


def eval_piecewise(expr: LatticeExpr, x):
    """Traditional interval-by-interval evaluation over the base regions."""
    xa = np.asarray(x, dtype=float)
    flat = xa.ravel()
    his = np.array([r[1] for r in expr.regions])
    idx = np.array([r[2] for r in expr.regions])
    which = idx[np.minimum(np.searchsorted(his, flat, side="left"), len(his) - 1)]
    out = (expr.slopes[which] * flat + expr.intercepts[which]).reshape(xa.shape)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LtpwlSystem:
    """Per-component lattice expressions approximating an elementwise f and h."""

    f_exprs: tuple[LatticeExpr, ...]
    h_exprs: tuple[LatticeExpr, ...]

    def _eval(self, exprs, x) -> Array:
        x = np.asarray(x, dtype=float)
        return np.stack([eval_ltpwl(e, x[..., c]) for c, e in enumerate(exprs)], axis=-1)

    def f(self, x) -> Array:
        return self._eval(self.f_exprs, x)

    def h(self, x) -> Array:
        return self._eval(self.h_exprs, x)

    def active_affine(self, exprs, x) -> tuple[Array, Array]:
        """Slopes and intercepts of the active segments at ``x`` (shape (..., m))."""
        x = np.asarray(x, dtype=float)
        slopes = np.empty(x.shape)
        offsets = np.empty(x.shape)
        for c, e in enumerate(exprs):
            idx = active_segment(e, x[..., c])
            slopes[..., c] = e.slopes[idx]
            offsets[..., c] = e.intercepts[idx]
        return slopes, offsets


def _diag_check(J: Array, what: str) -> None:
    off = J - np.diag(np.diag(J))
    if np.max(np.abs(off), initial=0.0) > 1e-12:
        raise ValueError(
            f"{what} has a non-diagonal Jacobian; componentwise lattice linearization "
            "only applies to elementwise maps"
        )


def linearize_system(model: SystemModel, points) -> LtpwlSystem:
    """Tangent lattice expressions for each component of f and h along ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) == 0:
        raise ValueError("need at least one linearization point")
    if model.state_dim != model.obs_dim:
        raise ValueError("componentwise linearization needs obs_dim == state_dim")
    fx, hx = model.f(pts), model.h(pts)
    Jf, Jh = model.jac_f(pts), model.jac_h(pts)
    for k in range(len(pts)):
        _diag_check(Jf[k], "f")
        _diag_check(Jh[k], "h")

    f_exprs, h_exprs = [], []
    for c in range(model.state_dim):
        order = np.argsort(pts[:, c], kind="stable")
        keep = []
        for k in order:
            if keep and abs(pts[k, c] - pts[keep[-1], c]) <= 1e-9:
                continue
            keep.append(k)
        for vals, J, dest in ((fx, Jf, f_exprs), (hx, Jh, h_exprs)):
            segs = []
            for k in keep:
                a = pts[k, c]
                slope = J[k, c, c]
                segs.append(AffineSegment(float(slope), float(vals[k, c] - slope * a), float(a)))
            dest.append(build_ltpwl_1d(segs))
    return LtpwlSystem(tuple(f_exprs), tuple(h_exprs))
