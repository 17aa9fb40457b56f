"""Closed constraint sets with exact distance and projection.

Points are handled in batches: ``project_many(P)`` takes an ``(n, d)`` array.
The scalar helpers :func:`dist`, :func:`project`, :func:`dist_transformed` and
:func:`project_transformed` wrap the batch routines.

For non-convex sets the minimizer may not be unique; the lexicographically
smallest minimizer is returned so that strategies are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spd import as_spd

TIE_TOL = 1e-12
SEARCH_MAX_ITER = 10_000
SEARCH_TOL = 1e-14


class ConstraintError(ValueError):
    pass


class SearchDidNotConverge(RuntimeError):
    pass


def _as_points(p, dim: int) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, dim) if dim == 1 else arr.reshape(1, -1)
    if arr.shape[-1] != dim:
        raise ConstraintError(f"dimension mismatch: point has {arr.shape[-1]} coords, set has {dim}")
    return arr


def _lex_argmin(dists: np.ndarray) -> np.ndarray:
    """Row-wise index of the first minimizer within TIE_TOL (candidates pre-sorted)."""
    best = dists.min(axis=1, keepdims=True)
    near = dists <= best + TIE_TOL * np.maximum(1.0, best)
    return np.argmax(near, axis=1)


class ConstraintSet:
    """Base class. Subclasses implement ``project_many`` in original coordinates."""

    dim: int
    shape_name: str = "abstract"
    convex: bool = True

    def project_many(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dist_many(self, points: np.ndarray) -> np.ndarray:
        pts = _as_points(points, self.dim)
        return np.linalg.norm(pts - self.project_many(pts), axis=1)

    def contains(self, p, tol: float = 1e-10) -> bool:
        return bool(self.dist_many(_as_points(p, self.dim))[0] <= tol)

    def nearest_norm(self) -> float:
        """Distance from the origin to the set."""
        return float(self.dist_many(np.zeros((1, self.dim)))[0])

    # transformed set a_sqrt * C; returns preimages c in C of the nearest points
    def _transformed_closed_form(self, pts: np.ndarray, s: np.ndarray):
        return None

    def project_transformed_many(self, points, a_sqrt) -> tuple[np.ndarray, np.ndarray]:
        """Nearest points of ``a_sqrt * C`` to each row of ``points``.

        Returns ``(preimages, images)`` with ``images = preimages @ a_sqrt`` and
        every preimage inside the set.
        """
        S = np.asarray(as_spd(a_sqrt).entries)
        if S.shape[0] != self.dim:
            raise ConstraintError(f"dimension mismatch: transform is {S.shape[0]}-d, set is {self.dim}-d")
        pts = _as_points(points, self.dim)
        if self.dim == 1:
            c = self.project_many(pts / S[0, 0])
            return c, c * S[0, 0]
        pre = self._transformed_closed_form(pts, S)
        if pre is None:
            pre = self._projected_search(pts, S)
        return pre, pre @ S

    def _projected_search(self, pts: np.ndarray, S: np.ndarray) -> np.ndarray:
        # accelerated projected gradient on c -> |S c - p|^2 / 2 over the convex set
        if not self.convex:
            raise ConstraintError(f"{self.shape_name}: no transformed projection for non-convex set")
        S_inv = np.linalg.inv(S)
        lip = float(np.linalg.eigvalsh(S @ S)[-1])
        c = self.project_many(pts @ S_inv)
        w = c.copy()
        tk = 1.0
        for _ in range(SEARCH_MAX_ITER):
            grad = (w @ S - pts) @ S
            c_new = self.project_many(w - grad / lip)
            step = np.max(np.abs(c_new - c)) if c.size else 0.0
            tk_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
            w = c_new + ((tk - 1.0) / tk_new) * (c_new - c)
            c, tk = c_new, tk_new
            if step <= SEARCH_TOL * max(1.0, float(np.max(np.abs(c)))):
                return c
        raise SearchDidNotConverge(
            f"projected search on {self.shape_name} did not converge in {SEARCH_MAX_ITER} iterations"
        )

    def describe(self) -> dict:
        return {"shape": self.shape_name}


@dataclass(frozen=True, eq=False)
class WholeSpace(ConstraintSet):
    dim: int = 1
    shape_name = "whole_space"

    def project_many(self, points):
        return _as_points(points, self.dim).copy()

    def dist_many(self, points):
        return np.zeros(_as_points(points, self.dim).shape[0])

    def project_transformed_many(self, points, a_sqrt):
        pts = _as_points(points, self.dim)
        S = as_spd(a_sqrt)
        return pts @ S.inverse_array, pts.copy()

    def describe(self):
        return {"shape": self.shape_name, "dim": self.dim}


@dataclass(frozen=True, eq=False)
class Box(ConstraintSet):
    lo: np.ndarray = field(default_factory=lambda: np.zeros(1))
    hi: np.ndarray = field(default_factory=lambda: np.ones(1))
    shape_name = "box"

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ConstraintError("box: lo and hi must have the same length")
        if np.any(lo > hi):
            raise ConstraintError("box: lo must be <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    def project_many(self, points):
        return np.clip(_as_points(points, self.dim), self.lo, self.hi)

    def _transformed_closed_form(self, pts, S):
        if np.all(S == np.diag(np.diag(S))):
            return np.clip(pts / np.diag(S), self.lo, self.hi)
        return None

    def describe(self):
        return {"shape": self.shape_name, "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True, eq=False)
class Ball(ConstraintSet):
    center: np.ndarray = field(default_factory=lambda: np.zeros(1))
    radius: float = 1.0
    shape_name = "ball"

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if not self.radius >= 0:
            raise ConstraintError("ball: radius must be >= 0")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center.size

    def project_many(self, points):
        pts = _as_points(points, self.dim)
        diff = pts - self.center
        norm = np.linalg.norm(diff, axis=1, keepdims=True)
        scale = np.where(norm > self.radius, self.radius / np.where(norm > 0, norm, 1.0), 1.0)
        return self.center + diff * scale

    def _transformed_closed_form(self, pts, S):
        diag = np.diag(S)
        if np.all(S == np.diag(diag)) and np.all(diag == diag[0]):
            return self.project_many(pts / diag[0])
        return None

    def describe(self):
        return {"shape": self.shape_name, "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class HalfSpace(ConstraintSet):
    """``{c : normal . c <= offset}``."""

    normal: np.ndarray = field(default_factory=lambda: np.ones(1))
    offset: float = 0.0
    shape_name = "halfspace"

    def __post_init__(self):
        n = np.atleast_1d(np.asarray(self.normal, dtype=float))
        if not np.linalg.norm(n) > 0:
            raise ConstraintError("halfspace: normal must be nonzero")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self):
        return self.normal.size

    @staticmethod
    def _proj(pts, n, off):
        excess = np.maximum(pts @ n - off, 0.0)
        return pts - np.outer(excess / (n @ n), n)

    def project_many(self, points):
        return self._proj(_as_points(points, self.dim), self.normal, self.offset)

    def _transformed_closed_form(self, pts, S):
        # S C = {r : (S^-1 n) . r <= offset}
        n_img = np.linalg.solve(S, self.normal)
        img = self._proj(pts, n_img, self.offset)
        pre = np.linalg.solve(S, img.T).T
        # keep preimages inside the set despite rounding
        return self.project_many(pre)

    def describe(self):
        return {"shape": self.shape_name, "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(frozen=True, eq=False)
class FinitePointSet(ConstraintSet):
    points: np.ndarray = field(default_factory=lambda: np.zeros((1, 1)))
    shape_name = "finite"
    convex = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.shape[0] == 0:
            raise ConstraintError("finite set must be nonempty")
        order = np.lexsort(pts.T[::-1])
        pts = np.unique(pts[order], axis=0)
        object.__setattr__(self, "points", pts)

    @property
    def dim(self):
        return self.points.shape[1]

    def _nearest(self, pts, cands):
        d = np.linalg.norm(pts[:, None, :] - cands[None, :, :], axis=2)
        return _lex_argmin(d)

    def project_many(self, points):
        pts = _as_points(points, self.dim)
        return self.points[self._nearest(pts, self.points)]

    def project_transformed_many(self, points, a_sqrt):
        S = np.asarray(as_spd(a_sqrt).entries)
        if S.shape[0] != self.dim:
            raise ConstraintError("dimension mismatch")
        pts = _as_points(points, self.dim)
        images = self.points @ S
        order = np.lexsort(images.T[::-1])
        idx = order[self._nearest(pts, images[order])]
        return self.points[idx], images[idx]

    def describe(self):
        return {"shape": self.shape_name, "points": self.points.tolist()}


@dataclass(frozen=True, eq=False)
class IntervalUnion(ConstraintSet):
    """Finite union of sorted, disjoint closed intervals on the line."""

    intervals: np.ndarray = field(default_factory=lambda: np.array([[0.0, 1.0]]))
    shape_name = "interval_union"
    convex = False

    def __post_init__(self):
        iv = np.asarray(self.intervals, dtype=float).reshape(-1, 2)
        if iv.shape[0] == 0:
            raise ConstraintError("interval union must be nonempty")
        if np.any(iv[:, 0] > iv[:, 1]):
            raise ConstraintError("interval union: each interval needs lo <= hi")
        if np.any(iv[1:, 0] <= iv[:-1, 1]):
            raise ConstraintError("interval union: intervals must be sorted and disjoint")
        object.__setattr__(self, "intervals", iv)

    dim = 1

    def project_many(self, points):
        x = _as_points(points, 1)[:, 0]
        cand = np.clip(x[:, None], self.intervals[:, 0], self.intervals[:, 1])
        idx = _lex_argmin(np.abs(cand - x[:, None]))
        return cand[np.arange(x.size), idx][:, None]

    def describe(self):
        return {"shape": self.shape_name, "intervals": self.intervals.tolist()}


def _one(p, s: ConstraintSet) -> np.ndarray:
    pts = _as_points(p, s.dim)
    if pts.shape[0] != 1:
        raise ConstraintError("expected a single point")
    return pts


def dist(p, s: ConstraintSet) -> float:
    return float(s.dist_many(_one(p, s))[0])


def project(p, s: ConstraintSet) -> np.ndarray:
    return s.project_many(_one(p, s))[0]


def project_transformed(p, s: ConstraintSet, a_sqrt) -> np.ndarray:
    """Point of ``a_sqrt * s`` nearest to ``p``."""
    return s.project_transformed_many(_one(p, s), a_sqrt)[1][0]


def dist_transformed(p, s: ConstraintSet, a_sqrt) -> float:
    pts = _one(p, s)
    img = s.project_transformed_many(pts, a_sqrt)[1]
    return float(np.linalg.norm(pts - img, axis=1)[0])


def dist_transformed_many(points, s: ConstraintSet, a_sqrt) -> np.ndarray:
    pts = _as_points(points, s.dim)
    if isinstance(s, WholeSpace):
        return np.zeros(pts.shape[0])
    img = s.project_transformed_many(pts, a_sqrt)[1]
    return np.linalg.norm(pts - img, axis=1)


def from_spec(spec: dict, dim: int) -> ConstraintSet:
    """Build a set from a config mapping ``{"shape": ..., params}``."""
    shape = str(spec.get("shape", "whole_space")).lower()
    if shape in ("whole_space", "whole", "r", "rd"):
        return WholeSpace(dim)
    if shape == "box":
        lo = np.broadcast_to(np.asarray(spec["lo"], dtype=float), (dim,))
        hi = np.broadcast_to(np.asarray(spec["hi"], dtype=float), (dim,))
        return Box(lo, hi)
    if shape == "ball":
        center = np.broadcast_to(np.asarray(spec.get("center", 0.0), dtype=float), (dim,))
        return Ball(center, float(spec["radius"]))
    if shape == "halfspace":
        return HalfSpace(np.broadcast_to(np.asarray(spec["normal"], dtype=float), (dim,)), float(spec.get("offset", 0.0)))
    if shape in ("finite", "points", "finite_point_set"):
        pts = np.asarray(spec["points"], dtype=float).reshape(-1, dim)
        return FinitePointSet(pts)
    if shape in ("interval_union", "intervals"):
        if dim != 1:
            raise ConstraintError("interval_union is only defined for d = 1")
        return IntervalUnion(np.asarray(spec["intervals"], dtype=float))
    raise ConstraintError(f"unknown constraint shape {shape!r}")
