"""Pointwise constraint sets: distance, nearest-point projection, scaling and
the scalar consumption maximizers.

Every set is closed and nonempty.  Projections are vectorized: ``project_many``
takes an array of query points ``(k, dim)`` and returns nearest points and
distances.  Ties between equally near candidates of a nonconvex set go to the
lowest member index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySet, NoFeasiblePoint, NoFeasiblePositivePoint, ShapeMismatch

MEMBERSHIP_TOL = 1e-12
MAX_POLYTOPE_DIM = 8


@dataclass(frozen=True)
class ProjectionResult:
    nearest: np.ndarray
    distance: float
    unique: bool


class ConstraintSet:
    dim: int
    is_convex: bool = True

    def at(self, t: float) -> "ConstraintSet":
        return self

    def project_many(self, q: np.ndarray):
        raise NotImplementedError

    def scale(self, lam: float) -> "ConstraintSet":
        raise NotImplementedError

    def bounded_member(self) -> np.ndarray:
        raise NotImplementedError

    def contains(self, q, tol: float = MEMBERSHIP_TOL) -> bool:
        q = _as_points(q, self.dim)
        return bool(np.all(self.project_many(q)[1] <= tol))

    def _check_query(self, q):
        return _as_points(q, self.dim)


def _as_points(q, dim):
    q = np.asarray(q, dtype=float)
    if q.ndim == 1 and dim == 1 and q.shape[0] != 1:
        q = q[:, None]
    q = np.atleast_2d(q)
    if q.shape[-1] != dim:
        raise ShapeMismatch(f"query has dimension {q.shape[-1]}, set has {dim}")
    return q


class FullSpace(ConstraintSet):
    def __init__(self, dim: int = 1):
        self.dim = dim

    def project_many(self, q):
        q = self._check_query(q)
        return q.copy(), np.zeros(len(q))

    def scale(self, lam):
        return self

    def bounded_member(self):
        return np.zeros(self.dim)

    def __repr__(self):
        return f"FullSpace({self.dim})"


class Box(ConstraintSet):
    """Coordinate box; ``+-inf`` bounds allowed."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ShapeMismatch("box bounds must be 1-d arrays of equal length")
        if np.any(self.lower > self.upper) or np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise EmptySet(f"box with lower {self.lower} above upper {self.upper}")
        self.dim = self.lower.size

    def project_many(self, q):
        q = self._check_query(q)
        p = np.clip(q, self.lower, self.upper)
        return p, np.linalg.norm(q - p, axis=1)

    def scale(self, lam):
        return Box(lam * self.lower, lam * self.upper)

    def bounded_member(self):
        return np.clip(np.zeros(self.dim), self.lower, self.upper)

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


class Ball(ConstraintSet):
    def __init__(self, center, radius: float):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        if not self.radius >= 0:
            raise EmptySet(f"ball radius must be non-negative, got {radius}")
        self.dim = self.center.size

    def project_many(self, q):
        q = self._check_query(q)
        d = q - self.center
        norm = np.linalg.norm(d, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(norm > self.radius, self.radius / norm, 1.0)
        p = self.center + d * factor[:, None]
        return p, np.maximum(norm - self.radius, 0.0)

    def scale(self, lam):
        return Ball(lam * self.center, lam * self.radius)

    def bounded_member(self):
        return self.center.copy()

    def __repr__(self):
        return f"Ball({self.center.tolist()}, {self.radius})"


class HalfSpace(ConstraintSet):
    """``{p : normal . p <= offset}``."""

    def __init__(self, normal, offset: float):
        self.normal = np.atleast_1d(np.asarray(normal, dtype=float))
        self.offset = float(offset)
        self.dim = self.normal.size
        self._nn = float(self.normal @ self.normal)
        if self._nn == 0.0 and self.offset < 0:
            raise EmptySet("half-space with zero normal and negative offset is empty")

    def project_many(self, q):
        q = self._check_query(q)
        if self._nn == 0.0:
            return q.copy(), np.zeros(len(q))
        excess = np.maximum(q @ self.normal - self.offset, 0.0)
        p = q - (excess / self._nn)[:, None] * self.normal
        return p, excess / math.sqrt(self._nn)

    def scale(self, lam):
        return HalfSpace(self.normal, lam * self.offset)

    def bounded_member(self):
        return self.project_many(np.zeros((1, self.dim)))[0][0]

    def __repr__(self):
        return f"HalfSpace({self.normal.tolist()}, {self.offset})"


def _affine_minimizer(P):
    """Weights ``a`` (summing to one) of the min-norm point of the affine hull of rows of ``P``."""
    k = len(P)
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = P @ P.T
    A[:k, k] = 1.0
    A[k, :k] = 1.0
    b = np.zeros(k + 1)
    b[k] = 1.0
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    return sol[:k]


def min_norm_point(P: np.ndarray, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Wolfe's active-set algorithm for the point of ``conv(P)`` nearest the origin.

    Returns the convex weights over the rows of ``P``.
    """
    P = np.asarray(P, dtype=float)
    scale2 = max(float(np.max(np.sum(P * P, axis=1))), 1.0)
    start = int(np.argmin(np.sum(P * P, axis=1)))
    active = [start]
    lam = np.array([1.0])
    x = P[start].copy()
    for _ in range(max_iter):
        j = int(np.argmin(P @ x))
        if x @ x - P[j] @ x <= tol * scale2 or j in active:
            break
        active.append(j)
        lam = np.append(lam, 0.0)
        while True:
            alpha = _affine_minimizer(P[active])
            if np.all(alpha > tol):
                lam = alpha
                break
            mask = alpha <= tol
            denom = lam[mask] - alpha[mask]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(denom > 0, lam[mask] / denom, np.inf)
            step = min(1.0, float(np.min(ratios)))
            lam = step * alpha + (1.0 - step) * lam
            keep = lam > tol
            if not np.any(keep):
                keep[np.argmax(lam)] = True
            active = [a for a, k in zip(active, keep) if k]
            lam = lam[keep]
            lam = lam / lam.sum()
        x = lam @ P[active]
    weights = np.zeros(len(P))
    weights[active] = lam
    return weights


class Polytope(ConstraintSet):
    """Convex hull of a vertex list (dimension at most 8)."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.size == 0:
            raise EmptySet("polytope needs at least one vertex")
        if v.shape[1] > MAX_POLYTOPE_DIM:
            raise ShapeMismatch(f"polytope dimension capped at {MAX_POLYTOPE_DIM}")
        self.vertices = v
        self.dim = v.shape[1]

    def project_many(self, q):
        q = self._check_query(q)
        if self.dim == 1:
            lo, hi = self.vertices.min(), self.vertices.max()
            p = np.clip(q, lo, hi)
            return p, np.abs(q - p)[:, 0]
        out = np.empty_like(q)
        for i, qi in enumerate(q):
            w = min_norm_point(self.vertices - qi)
            out[i] = w @ self.vertices
        return out, np.linalg.norm(q - out, axis=1)

    def scale(self, lam):
        return Polytope(lam * self.vertices)

    def bounded_member(self):
        return self.vertices[0].copy()

    def __repr__(self):
        return f"Polytope({self.vertices.tolist()})"


class FinitePointSet(ConstraintSet):
    is_convex = False

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.size == 0:
            raise EmptySet("finite point set needs at least one point")
        self.points = pts
        self.dim = pts.shape[1]
        self.is_convex = len(np.unique(pts, axis=0)) == 1

    def distances(self, q):
        q = self._check_query(q)
        return np.linalg.norm(q[:, None, :] - self.points[None, :, :], axis=2)

    def project_many(self, q):
        d = self.distances(q)
        idx = _first_min(d)
        rows = np.arange(len(d))
        return self.points[idx].copy(), d[rows, idx]

    def scale(self, lam):
        return FinitePointSet(lam * self.points)

    def bounded_member(self):
        return self.points[0].copy()

    def __repr__(self):
        return f"FinitePointSet({self.points.tolist()})"


def _first_min(d, tol=MEMBERSHIP_TOL):
    """Column index of the minimum per row, lowest index among near-ties."""
    best = d.min(axis=1, keepdims=True)
    return np.argmax(d <= best + tol, axis=1)


def _tie_count(d, tol=MEMBERSHIP_TOL):
    best = d.min(axis=1, keepdims=True)
    return np.sum(d <= best + tol, axis=1)


class UnionOfConvex(ConstraintSet):
    """Union of member sets; the nearest member wins, lowest index on ties."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise EmptySet("union needs at least one member")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise ShapeMismatch("union members must share a dimension")
        self.members = members
        self.dim = dims.pop()
        self.is_convex = len(members) == 1 and members[0].is_convex

    def _member_projections(self, q):
        q = self._check_query(q)
        res = [m.project_many(q) for m in self.members]
        nearest = np.stack([r[0] for r in res], axis=1)
        dist = np.stack([r[1] for r in res], axis=1)
        return nearest, dist

    def project_many(self, q):
        nearest, dist = self._member_projections(q)
        idx = _first_min(dist)
        rows = np.arange(len(dist))
        return nearest[rows, idx], dist[rows, idx]

    def scale(self, lam):
        return UnionOfConvex([m.scale(lam) for m in self.members])

    def bounded_member(self):
        return self.members[0].bounded_member()

    def __repr__(self):
        return f"UnionOfConvex({self.members!r})"


class TimeDependent(ConstraintSet):
    """Piecewise-constant family: ``sets[i]`` applies on ``[times[i], times[i+1])``."""

    def __init__(self, times, sets):
        self.times = np.asarray(times, dtype=float)
        self.sets = list(sets)
        if len(self.times) != len(self.sets) or not self.sets:
            raise ShapeMismatch("need one set per knot")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("knots must start at 0 and increase strictly")
        dims = {s.dim for s in self.sets}
        if len(dims) != 1:
            raise ShapeMismatch("all sets must share a dimension")
        self.dim = dims.pop()
        self.is_convex = all(s.is_convex for s in self.sets)

    def at(self, t):
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.sets[max(i, 0)].at(t)

    def project_many(self, q):
        return self.at(0.0).project_many(q)

    def scale(self, lam):
        return TimeDependent(self.times, [s.scale(lam) for s in self.sets])

    def bounded_member(self):
        return self.sets[0].bounded_member()


def project(q, cset: ConstraintSet, t: float = 0.0) -> ProjectionResult:
    """Nearest point of ``cset`` (evaluated at ``t``) to a single query ``q``."""
    s = cset.at(t)
    q2 = _as_points(np.atleast_1d(q), s.dim)
    if len(q2) != 1:
        raise ShapeMismatch("project takes a single point; use project_many for batches")
    nearest, dist = s.project_many(q2)
    unique = s.is_convex
    if not unique:
        if isinstance(s, FinitePointSet):
            unique = bool(_tie_count(s.distances(q2))[0] == 1)
        elif isinstance(s, UnionOfConvex):
            unique = bool(_tie_count(s._member_projections(q2)[1])[0] == 1)
    return ProjectionResult(nearest[0], float(dist[0]), unique)


def project_many(q, cset: ConstraintSet, t: float = 0.0):
    """Vectorized projection of ``(k, dim)`` queries; returns ``(nearest, distance)``."""
    return cset.at(t).project_many(q)


def scale(cset: ConstraintSet, lam: float) -> ConstraintSet:
    """Pointwise image ``{lam * p : p in cset}``."""
    if not lam > 0:
        raise ValueError(f"scale factor must be positive, got {lam}")
    if lam == 1.0:
        return cset
    return cset.scale(lam)


# --- scalar consumption sets -------------------------------------------------


def _pieces_1d(cset: ConstraintSet):
    """Decompose a 1-d set into ``("interval", lo, hi)`` and ``("point", v)`` pieces."""
    if cset.dim != 1:
        raise ShapeMismatch("consumption sets are one-dimensional")
    if isinstance(cset, FullSpace):
        return [("interval", -np.inf, np.inf)]
    if isinstance(cset, Box):
        return [("interval", cset.lower[0], cset.upper[0])]
    if isinstance(cset, Ball):
        c = cset.center[0]
        return [("interval", c - cset.radius, c + cset.radius)]
    if isinstance(cset, HalfSpace):
        a, b = cset.normal[0], cset.offset
        if a > 0:
            return [("interval", -np.inf, b / a)]
        if a < 0:
            return [("interval", b / a, np.inf)]
        return [("interval", -np.inf, np.inf)]
    if isinstance(cset, Polytope):
        return [("interval", cset.vertices.min(), cset.vertices.max())]
    if isinstance(cset, FinitePointSet):
        return [("point", v) for v in cset.points[:, 0]]
    if isinstance(cset, UnionOfConvex):
        return [piece for m in cset.members for piece in _pieces_1d(m)]
    raise TypeError(f"unsupported consumption set {cset!r}")


def _select(candidates, values):
    """Pick the best candidate per entry, lowest index among near-ties."""
    vals = np.stack(values, axis=-1)
    cands = np.stack(candidates, axis=-1)
    best = np.max(vals, axis=-1, keepdims=True)
    finite_best = np.isfinite(best)
    tol = MEMBERSHIP_TOL * np.maximum(1.0, np.abs(np.where(finite_best, best, 0.0)))
    idx = np.argmax(vals >= best - tol, axis=-1)
    c = np.take_along_axis(cands, idx[..., None], axis=-1)[..., 0]
    v = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]
    return c, v


def argmax_consumption_log(cset: ConstraintSet, weight, t: float = 0.0):
    """Maximize ``weight * log(c) - c`` over ``cset``.

    Non-positive points score ``-inf``.  Returns ``(c_star, value)`` with the
    shape of ``weight``.
    """
    w = np.asarray(weight, dtype=float)
    if np.any(w <= 0):
        raise ValueError("log consumption weight must be positive")
    cands, vals = [], []
    for piece in _pieces_1d(cset.at(t)):
        if piece[0] == "interval":
            lo, hi = piece[1], piece[2]
            if hi <= 0:
                c = np.full_like(w, hi)
                v = np.full_like(w, -np.inf)
            else:
                c = np.clip(w, lo, hi)
                v = w * np.log(c) - c
        else:
            c = np.full_like(w, piece[1])
            v = w * np.log(c) - c if piece[1] > 0 else np.full_like(w, -np.inf)
        cands.append(c)
        vals.append(v)
    c, v = _select(cands, vals)
    if np.any(~np.isfinite(v)):
        raise NoFeasiblePositivePoint(f"consumption set {cset!r} has no positive point")
    return (float(c), float(v)) if c.ndim == 0 else (c, v)


def _power_value(c, alpha, gamma, ey):
    with np.errstate(divide="ignore"):
        return (alpha / gamma) * np.power(c, gamma) * ey - c


def argmax_consumption_power(cset: ConstraintSet, alpha: float, gamma: float, y, t: float = 0.0):
    """Maximize ``(alpha/gamma) c^gamma e^y - c`` over ``cset``.

    For ``gamma > 0`` points ``c >= 0`` are feasible (``0^gamma/gamma = 0``);
    for ``gamma < 0`` only ``c > 0``.  Vectorized over ``y``.
    """
    if gamma == 0 or gamma >= 1:
        raise ValueError("power exponent must lie in (-inf, 0) or (0, 1)")
    y = np.asarray(y, dtype=float)
    ey = np.exp(y)
    c_free = np.power(alpha * ey, 1.0 / (1.0 - gamma))
    floor = 0.0 if gamma > 0 else None
    cands, vals = [], []
    for piece in _pieces_1d(cset.at(t)):
        if piece[0] == "interval":
            lo, hi = piece[1], piece[2]
            infeasible = hi < 0 if gamma > 0 else hi <= 0
            if infeasible:
                c = np.full_like(y, hi)
                v = np.full_like(y, -np.inf)
            else:
                c = np.clip(c_free, lo if floor is None else max(lo, floor), hi)
                v = _power_value(c, alpha, gamma, ey)
        else:
            p = piece[1]
            c = np.full_like(y, p)
            ok = p >= 0 if gamma > 0 else p > 0
            v = _power_value(c, alpha, gamma, ey) if ok else np.full_like(y, -np.inf)
        cands.append(c)
        vals.append(v)
    c, v = _select(cands, vals)
    if np.any(~np.isfinite(v)):
        raise NoFeasiblePoint(f"consumption set {cset!r} has no feasible point for gamma={gamma}")
    return (float(c), float(v)) if c.ndim == 0 else (c, v)
