"""Control problem data and the minimized Hamiltonian

    H_min(p) = inf_{u in U} <p, u> + l1(u).

Only (U, l1) pairs with a closed-form or enumerable minimizer are accepted;
anything else is rejected when the problem is built.  Ties in the argmin go
to the lexicographically smallest control.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import HamiltonianUnbounded, InvalidInput
from .functions import RunningCost, ScalarFunction, zero_cost

MEMBERSHIP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ControlSet:
    kind: str  # box | ball | finite | whole
    m: int
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    radius: float = 0.0
    center: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None  # (q, m), lexicographically sorted

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        tol = MEMBERSHIP_TOL
        if self.kind == "whole":
            return np.all(np.isfinite(u), axis=-1)
        if self.kind == "box":
            return np.all((u >= self.lo - tol) & (u <= self.hi + tol), axis=-1)
        if self.kind == "ball":
            return np.linalg.norm(u - self.center, axis=-1) <= self.radius * (1 + tol) + tol
        d = np.min(np.max(np.abs(u[..., None, :] - self.points), axis=-1), axis=-1)
        return d <= tol


def box(lo, hi) -> ControlSet:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or lo.ndim != 1:
        raise InvalidInput("box bounds must be vectors of equal length")
    if np.any(lo > hi) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise InvalidInput("box bounds must be finite with lo <= hi")
    return ControlSet("box", lo.size, lo=lo, hi=hi)


def ball(radius: float, m: int = 1, center=None) -> ControlSet:
    if not radius >= 0:
        raise InvalidInput("ball radius must be >= 0")
    c = np.zeros(m) if center is None else np.atleast_1d(np.asarray(center, dtype=float))
    if c.shape != (m,):
        raise InvalidInput(f"ball center must have length {m}")
    return ControlSet("ball", m, radius=float(radius), center=c)


def finite(points) -> ControlSet:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise InvalidInput("finite control set needs at least one point")
    order = np.lexsort(pts.T[::-1])
    return ControlSet("finite", pts.shape[1], points=pts[order])


def whole(m: int) -> ControlSet:
    return ControlSet("whole", int(m))


@dataclass(frozen=True, eq=False)
class ControlCost:
    """l1(u): zero, constant, quadratic 1/2 u^T R u, weighted |u|_1, or tabulated on finite U."""

    kind: str
    R: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    value: float = 0.0
    table: Optional[np.ndarray] = None  # aligned with the unsorted points given at construction
    table_points: Optional[np.ndarray] = None

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "zero":
            return np.zeros(u.shape[:-1])
        if self.kind == "constant":
            return np.full(u.shape[:-1], self.value)
        if self.kind == "quadratic":
            return 0.5 * np.einsum("...i,ij,...j->...", u, self.R, u)
        if self.kind == "abs":
            return np.abs(u) @ self.weights
        # table: exact lookup on the listed points
        diff = np.max(np.abs(u[..., None, :] - self.table_points), axis=-1)
        idx = np.argmin(diff, axis=-1)
        if np.any(np.take_along_axis(diff, idx[..., None], -1) > MEMBERSHIP_TOL):
            raise InvalidInput("tabulated control cost queried off its table")
        return self.table[idx]


def zero_control_cost() -> ControlCost:
    return ControlCost("zero")


def constant_control_cost(c: float) -> ControlCost:
    return ControlCost("constant", value=float(c))


def quadratic_cost(R) -> ControlCost:
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[0] != R.shape[1] or not np.allclose(R, R.T):
        raise InvalidInput("quadratic control cost needs a symmetric matrix")
    if np.linalg.eigvalsh(R).min() <= 0:
        raise InvalidInput("quadratic control cost needs R positive definite")
    return ControlCost("quadratic", R=R)


def abs_cost(weights) -> ControlCost:
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    if np.any(w < 0):
        raise InvalidInput("absolute-value weights must be >= 0")
    return ControlCost("abs", weights=w)


def table_cost(points, values) -> ControlCost:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    vals = np.asarray(values, dtype=float)
    if vals.shape != (pts.shape[0],):
        raise InvalidInput("tabulated cost needs one value per control point")
    return ControlCost("table", table=vals, table_points=pts)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    U: ControlSet
    ell1: ControlCost
    phi: ScalarFunction
    T: float
    ell0: RunningCost = field(default_factory=zero_cost)

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInput("horizon T must be positive")
        if not self.phi.bounded:
            raise InvalidInput("terminal cost must be bounded")
        _validate(self.U, self.ell1)

    @property
    def m(self) -> int:
        return self.U.m


def _validate(U: ControlSet, c: ControlCost):
    m = U.m
    if c.kind == "quadratic" and c.R.shape != (m, m):
        raise InvalidInput(f"R must be {m} x {m}")
    if c.kind == "abs" and c.weights.shape != (m,):
        raise InvalidInput(f"abs weights must have length {m}")
    if U.kind == "whole":
        if c.kind in ("zero", "constant", "abs"):
            raise HamiltonianUnbounded(f"U = R^m with l1 '{c.kind}' makes H_min = -inf for some p")
        if c.kind == "table":
            raise InvalidInput("tabulated costs need a finite control set")
    elif U.kind == "box":
        if c.kind == "quadratic" and not np.allclose(c.R, np.diag(np.diag(c.R))):
            raise InvalidInput("box constraints support only diagonal R")
        if c.kind == "table":
            raise InvalidInput("tabulated costs need a finite control set")
    elif U.kind == "ball":
        if c.kind == "quadratic" and not np.allclose(c.R, c.R[0, 0] * np.eye(m)):
            raise InvalidInput("ball constraints support only isotropic R = r I")
        if c.kind in ("abs", "table"):
            raise InvalidInput(f"ball constraints do not support l1 '{c.kind}'")
    elif U.kind == "finite" and c.kind == "table":
        if c.table_points.shape != U.points.shape or not np.all(U.contains(c.table_points)):
            raise InvalidInput("tabulated cost points must match the finite control set")


def _p(p, m):
    p = np.asarray(p, dtype=float)
    if p.ndim == 0 or p.shape[-1] != m:
        if m == 1:
            return p[..., None]
        raise InvalidInput(f"p must have trailing size {m}")
    return p


def h_cv(p, u, prob: ControlProblem) -> np.ndarray:
    """Current-value Hamiltonian <p, u> + l1(u)."""
    p, u = _p(p, prob.m), _p(u, prob.m)
    if not np.all(prob.U.contains(u)):
        raise InvalidInput("control outside U")
    return np.sum(p * u, axis=-1) + prob.ell1(u)


def argmin_u(p, prob: ControlProblem) -> np.ndarray:
    """Minimizer of <p, u> + l1(u) over U, lexicographically smallest on ties."""
    U, c = prob.U, prob.ell1
    p = _p(p, prob.m)
    if U.kind == "finite":
        vals = p @ U.points.T + prob.ell1(U.points)
        return U.points[np.argmin(vals, axis=-1)]
    if U.kind == "whole":  # quadratic
        return -np.linalg.solve(c.R, p[..., None])[..., 0]
    if U.kind == "box":
        lo, hi = U.lo, U.hi
        if c.kind in ("zero", "constant"):
            return np.where(p >= 0.0, lo, hi)
        if c.kind == "quadratic":
            return np.clip(-p / np.diag(c.R), lo, hi)
        # abs: candidates lo <= 0 <= hi sorted ascending, first minimum wins
        zero = np.clip(0.0, lo, hi)
        cands = np.stack(np.broadcast_arrays(lo, zero, hi), axis=-1)  # (..., m, 3)
        vals = p[..., None] * cands + c.weights[:, None] * np.abs(cands)
        idx = np.argmin(vals, axis=-1)
        return np.take_along_axis(np.broadcast_to(cands, vals.shape), idx[..., None], -1)[..., 0]
    # ball
    r = c.R[0, 0] if c.kind == "quadratic" else 0.0
    norm = np.linalg.norm(p, axis=-1, keepdims=True)
    e1 = np.zeros(prob.m)
    e1[0] = 1.0
    direction = np.where(norm > 0, p / np.where(norm > 0, norm, 1.0), e1)
    if c.kind == "quadratic":
        # minimizer of 1/2 r |u|^2 + <p,u> is -p/r, projected radially onto the ball
        step = np.minimum(norm / r, U.radius) if U.radius > 0 else np.zeros_like(norm)
        # projection onto a centered ball; with an offset center solve on the segment
        if np.any(U.center):
            return _ball_quadratic_offset(p, r, U)
        return -direction * step
    return U.center - U.radius * direction


def _ball_quadratic_offset(p, r, U: ControlSet):
    # strictly convex on a ball: project the unconstrained minimizer -p/r
    u = -p / r
    d = u - U.center
    nd = np.linalg.norm(d, axis=-1, keepdims=True)
    scale = np.where(nd > U.radius, U.radius / np.where(nd > 0, nd, 1.0), 1.0)
    return U.center + d * scale


def h_min(p, prob: ControlProblem) -> np.ndarray:
    p = _p(p, prob.m)
    u = argmin_u(p, prob)
    return np.sum(p * u, axis=-1) + prob.ell1(u)


def grad_h_min(p, prob: ControlProblem) -> np.ndarray:
    """nabla H_min = argmin (exact where the argmin is unique)."""
    return argmin_u(p, prob)


def min_cost_value(prob: ControlProblem) -> float:
    """H_min(0) = min_U l1."""
    return float(h_min(np.zeros(prob.m), prob))


@dataclass(frozen=True)
class LipschitzReport:
    L_hmin: float
    L_grad: Optional[float]


def lipschitz_probe(prob: ControlProblem, samples: int = 4000, radius: float = 10.0,
                    seed: int = 0) -> LipschitzReport:
    """Empirical Lipschitz constants of H_min (and of its gradient for quadratic l1)
    from random pairs in a ball, mixing distant pairs with short steps along random
    and gradient directions."""
    rng = np.random.default_rng(seed)
    m = prob.m

    def in_ball(k):
        g = rng.standard_normal((k, m))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * radius * rng.random((k, 1)) ** (1.0 / m)

    p1 = in_ball(samples)
    far = in_ball(samples)
    dirs = rng.standard_normal((samples, m))
    grad_dir = argmin_u(p1, prob)
    gn = np.linalg.norm(grad_dir, axis=1, keepdims=True)
    grad_dir = np.where(gn > 0, grad_dir / np.where(gn > 0, gn, 1.0), dirs)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    eps = 1e-3
    P1 = np.vstack([p1, p1, p1])
    P2 = np.vstack([far, p1 + eps * dirs, p1 + eps * grad_dir])
    dp = np.linalg.norm(P1 - P2, axis=1)
    ok = dp > 0
    L = float(np.max(np.abs(h_min(P1, prob) - h_min(P2, prob))[ok] / dp[ok]))
    L_grad = None
    if prob.ell1.kind == "quadratic":
        dg = np.linalg.norm(argmin_u(P1, prob) - argmin_u(P2, prob), axis=1)
        L_grad = float(np.max(dg[ok] / dp[ok]))
    return LipschitzReport(L, L_grad)
