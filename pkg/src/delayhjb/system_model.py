"""Delayed control system and its lift to H = R^n x L^2([-d, 0]; R^n).

Memory components (the kernel b1 and the second component of lifted states)
are sampled on a uniform grid over [-d, 0] and integrated with the trapezoidal
rule on their piecewise-linear interpolants.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import expm

from .errors import InvalidInput

DEFAULT_GRID = 256  # intervals on [-d, 0]


def _matrix(a, rows, cols, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(rows, cols) if a.size == rows * cols else a
    if a.shape != (rows, cols):
        raise InvalidInput(f"{name} has shape {a.shape}, expected ({rows}, {cols})")
    return a


@dataclass(frozen=True, eq=False)
class DelaySystem:
    """dy = (a0 y + b0 u + int_{-d}^0 b1(xi) u(t + xi) dxi) dt + sigma dW."""

    a0: np.ndarray
    b0: np.ndarray
    b1: np.ndarray  # (npts, n, m) samples on linspace(-d, 0, npts)
    sigma: np.ndarray
    d: float

    def __post_init__(self):
        if not np.isfinite(self.d) or self.d <= 0:
            raise InvalidInput("delay must be positive")
        n = self.a0.shape[0]
        if self.a0.shape != (n, n):
            raise InvalidInput("a0 must be square")
        if self.b0.shape[0] != n or self.sigma.shape[0] != n:
            raise InvalidInput("b0 and sigma must have n rows")
        if self.b1.ndim != 3 or self.b1.shape[1:] != self.b0.shape:
            raise InvalidInput(f"b1 samples must have shape (npts, {n}, {self.b0.shape[1]})")
        if self.b1.shape[0] < 2:
            raise InvalidInput("b1 needs at least 2 grid points")
        if not np.all(np.isfinite(self.b1)):
            raise InvalidInput("b1 samples must be finite")

    @classmethod
    def build(cls, a0, b0, sigma, d: float, b1: Union[None, float, np.ndarray, Callable] = None,
              grid: int = DEFAULT_GRID) -> "DelaySystem":
        """Assemble a system; ``b1`` may be None (zero), a constant n x m matrix,
        a callable xi -> (n, m) matrix, or an array of samples (npts, n, m)."""
        a0 = np.atleast_2d(np.asarray(a0, dtype=float))
        n = a0.shape[0]
        b0 = np.asarray(b0, dtype=float)
        m = b0.size // n if b0.ndim < 2 else b0.shape[1]
        b0 = _matrix(b0, n, m, "b0")
        sigma = np.asarray(sigma, dtype=float)
        k = sigma.size // n if sigma.ndim < 2 else sigma.shape[1]
        sigma = _matrix(sigma, n, k, "sigma")
        d = float(d)
        if not d > 0:
            raise InvalidInput("delay must be positive")
        if int(grid) < 1:
            raise InvalidInput("grid must have at least one interval")
        xi = np.linspace(-d, 0.0, int(grid) + 1)
        if b1 is None:
            samples = np.zeros((xi.size, n, m))
        elif callable(b1):
            samples = np.stack([_matrix(b1(x), n, m, "b1(xi)") for x in xi])
        else:
            arr = np.asarray(b1, dtype=float)
            if arr.ndim == 3:
                samples = arr
            else:
                samples = np.broadcast_to(_matrix(arr, n, m, "b1"), (xi.size, n, m)).copy()
        return cls(a0, b0, samples, sigma, d)

    # -- dimensions and grid -------------------------------------------------

    @property
    def n(self) -> int:
        return self.a0.shape[0]

    @property
    def m(self) -> int:
        return self.b0.shape[1]

    @property
    def k(self) -> int:
        return self.sigma.shape[1]

    @property
    def npts(self) -> int:
        return self.b1.shape[0]

    @cached_property
    def xi(self) -> np.ndarray:
        return np.linspace(-self.d, 0.0, self.npts)

    @property
    def h(self) -> float:
        return self.d / (self.npts - 1)

    @cached_property
    def trapz_weights(self) -> np.ndarray:
        w = np.full(self.npts, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    def expm(self, t) -> np.ndarray:
        """e^{t a0}; vectorized over an array of times (stacked result)."""
        t = np.asarray(t, dtype=float)
        return expm(t[..., None, None] * self.a0)

    @cached_property
    def embed_tensor(self) -> np.ndarray:
        """E[j, q] (n x m) with y1(xi_j) = sum_q E[j, q] U[q] for a closed-grid history U."""
        N = self.npts - 1
        E = np.zeros((self.npts, self.npts, self.n, self.m))
        for j in range(1, self.npts):
            w = np.full(j + 1, self.h)
            w[0] = w[-1] = 0.5 * self.h
            q = N - j + np.arange(j + 1)
            E[j, q] = w[:, None, None] * self.b1[: j + 1]
        return E


@dataclass(frozen=True, eq=False)
class LiftedState:
    """x = (y0, y1) with y1 sampled on the kernel grid of the owning system."""

    y0: np.ndarray
    y1: np.ndarray  # (npts, n)

    @classmethod
    def zero(cls, sys: DelaySystem) -> "LiftedState":
        return cls(np.zeros(sys.n), np.zeros((sys.npts, sys.n)))

    def check(self, sys: DelaySystem) -> "LiftedState":
        if self.y0.shape != (sys.n,) or self.y1.shape != (sys.npts, sys.n):
            raise InvalidInput(
                f"lifted state shapes {self.y0.shape}/{self.y1.shape} do not match n={sys.n}, npts={sys.npts}")
        return self

    def __add__(self, other: "LiftedState") -> "LiftedState":
        return LiftedState(self.y0 + other.y0, self.y1 + other.y1)

    def __sub__(self, other: "LiftedState") -> "LiftedState":
        return LiftedState(self.y0 - other.y0, self.y1 - other.y1)

    def __mul__(self, c: float) -> "LiftedState":
        return LiftedState(c * self.y0, c * self.y1)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Control samples on a uniform grid covering [-d, T]; the part before 0 is u0."""

    times: np.ndarray
    values: np.ndarray  # (len(times), m)

    def history(self) -> np.ndarray:
        return self.values[self.times < 0]


def inner(x: LiftedState, z: LiftedState, sys: DelaySystem) -> float:
    """<x, z>_H with the trapezoidal rule on the memory component."""
    return float(x.y0 @ z.y0 + sys.trapz_weights @ np.sum(x.y1 * z.y1, axis=1))


def norm(x: LiftedState, sys: DelaySystem) -> float:
    return float(np.sqrt(max(inner(x, x, sys), 0.0)))


def tail_weights(lower: float, sys: DelaySystem) -> np.ndarray:
    """Weights w with sum_j w_j g(xi_j) = int_lower^0 of the linear interpolant of g."""
    xi, h = sys.xi, sys.h
    w = np.zeros(sys.npts)
    lower = min(max(float(lower), -sys.d), 0.0)
    if lower >= 0.0:
        return w
    j0 = int(np.searchsorted(xi, lower, side="left"))  # first node >= lower
    j0 = min(j0, sys.npts - 1)
    # whole cells [xi_j, xi_{j+1}] for j >= j0
    if j0 < sys.npts - 1:
        w[j0:] += h
        w[j0] -= 0.5 * h
        w[-1] -= 0.5 * h
    # partial cell [lower, xi_j0]
    if j0 > 0 and xi[j0] > lower:
        frac = (xi[j0] - lower) / h  # length of partial cell in units of h
        theta = (lower - xi[j0 - 1]) / h
        # g(lower) = (1 - theta) g_{j0-1} + theta g_{j0}
        w[j0 - 1] += 0.5 * frac * h * (1.0 - theta)
        w[j0] += 0.5 * frac * h * (1.0 + theta)
    return w


def _history(u0, sys: DelaySystem) -> np.ndarray:
    u0 = np.asarray(u0, dtype=float)
    if u0.ndim == 1 and sys.m == 1:
        u0 = u0[:, None]
    if u0.ndim != 2 or u0.shape[1] != sys.m:
        raise InvalidInput(f"control history must have shape (N, {sys.m})")
    N = sys.npts - 1
    if u0.shape[0] == N:
        # value at 0- repeats the last open-grid sample
        u0 = np.vstack([u0, u0[-1:]])
    elif u0.shape[0] != sys.npts:
        raise InvalidInput(f"control history must have {N} or {sys.npts} samples, got {u0.shape[0]}")
    return u0


def embed_initial(y0, u0, sys: DelaySystem) -> LiftedState:
    """(y0, u0) -> (y0, y1) with y1(xi) = int_{-d}^xi b1(zeta) u0(zeta - xi) dzeta."""
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if y0.shape != (sys.n,):
        raise InvalidInput(f"y0 must have length {sys.n}")
    U = _history(u0, sys)
    y1 = np.einsum("jqnm,qm->jn", sys.embed_tensor, U)
    return LiftedState(y0.copy(), y1)


def first_component(t: float, x: LiftedState, sys: DelaySystem) -> np.ndarray:
    """(e^{tA} x)_0 = e^{t a0} x0 + int_{-t}^0 e^{(t+s) a0} x1(s) ds."""
    if t < 0:
        raise InvalidInput("t must be >= 0")
    x.check(sys)
    out = sys.expm(t) @ x.y0
    w = tail_weights(-t, sys)
    nz = np.nonzero(w)[0]
    if nz.size:
        E = sys.expm(t + sys.xi[nz])
        out = out + np.einsum("j,jab,jb->a", w[nz], E, x.y1[nz])
    return out


def semigroup_apply(t: float, x: LiftedState, sys: DelaySystem) -> LiftedState:
    """e^{tA} x: memory component shifted right by t and truncated at -d."""
    y0 = first_component(t, x, sys)
    src = sys.xi - t
    y1 = np.empty_like(x.y1)
    for i in range(sys.n):
        y1[:, i] = np.interp(src, sys.xi, x.y1[:, i], left=0.0)
    y1[src < -sys.d - 1e-12 * sys.d] = 0.0
    return LiftedState(y0, y1)


def semigroup_adjoint_apply(t: float, z: LiftedState, sys: DelaySystem) -> LiftedState:
    """e^{tA*} z = (e^{t a0*} z0, e^{(.+t) a0*} z0 1_[-t,0] + z1(. + t) 1_[-d,-t))."""
    if t < 0:
        raise InvalidInput("t must be >= 0")
    z.check(sys)
    if t == 0:
        return LiftedState(z.y0.copy(), z.y1.copy())
    y0 = sys.expm(t).T @ z.y0
    xi = sys.xi
    y1 = np.zeros_like(z.y1)
    outside = xi < -t
    if np.any(outside):
        src = xi[outside] + t
        for i in range(sys.n):
            y1[outside, i] = np.interp(src, xi, z.y1[:, i])
    # discrete adjoint of first_component: the tail quadrature weights are
    # carried over to the trapezoid inner product node by node
    w = tail_weights(-t, sys)
    nz = np.nonzero(w)[0]
    if nz.size:
        E = sys.expm(t + xi[nz])
        y1[nz] += (w[nz] / sys.trapz_weights[nz])[:, None] * np.einsum("jba,b->ja", E, z.y0)
    return LiftedState(y0, y1)


def etAB_first(t: float, sys: DelaySystem) -> np.ndarray:
    """(e^{tA} B)_0 = e^{t a0} b0 + int_{-t}^0 e^{(t+r) a0} b1(r) dr  (n x m)."""
    if t < 0:
        raise InvalidInput("t must be >= 0")
    out = sys.expm(t) @ sys.b0
    w = tail_weights(-t, sys)
    nz = np.nonzero(w)[0]
    if nz.size:
        E = sys.expm(t + sys.xi[nz])
        out = out + np.einsum("j,jab,jbc->ac", w[nz], E, sys.b1[nz])
    return out


def apply_B(u, sys: DelaySystem) -> LiftedState:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (sys.m,):
        raise InvalidInput(f"u must have length {sys.m}")
    return LiftedState(sys.b0 @ u, sys.b1 @ u)


def apply_Bstar(x: LiftedState, sys: DelaySystem) -> np.ndarray:
    x.check(sys)
    return sys.b0.T @ x.y0 + np.einsum("j,jnm,jn->m", sys.trapz_weights, sys.b1, x.y1)


def history_operator(tau: float, sys: DelaySystem) -> np.ndarray:
    """M (n, npts, m) such that (e^{tau A}(0, y1[U]))_0 = sum_q M[:, q] U[q].

    U is a closed-grid control history; used to form reduced coordinates of
    many paths at once in the closed-loop simulation.
    """
    w = tail_weights(-tau, sys)
    nz = np.nonzero(w)[0]
    if nz.size == 0:
        return np.zeros((sys.n, sys.npts, sys.m))
    E = sys.expm(tau + sys.xi[nz])
    return np.einsum("j,jab,jqbm->aqm", w[nz], E, sys.embed_tensor[nz])


def reduced_coordinate(tau: float, y0, u_hist, sys: DelaySystem) -> np.ndarray:
    """(e^{tau A} Y)_0 for Y embedded from the current state y0 and control history."""
    return first_component(tau, embed_initial(y0, u_hist, sys), sys)


def constant_kernel(value):
    """b1 family: constant matrix on [-d, 0]."""
    return lambda xi: np.asarray(value, dtype=float)


def exponential_kernel(value, rate: float):
    """b1 family: value * exp(rate * xi)."""
    v = np.asarray(value, dtype=float)
    return lambda xi: v * np.exp(rate * xi)


def table_kernel(values, n: int, m: int, d: float):
    """b1 family: samples on an arbitrary uniform grid over [-d, 0], linearly interpolated."""
    vals = np.asarray(values, dtype=float).reshape(-1, n * m)
    grid = np.linspace(-d, 0.0, vals.shape[0])

    def fn(xi):
        return np.array([np.interp(xi, grid, vals[:, c]) for c in range(n * m)]).reshape(n, m)

    return fn


def sup_expm_norm(T: float, sys: DelaySystem, samples: int = 64) -> float:
    """M = sup_{[0,T]} ||e^{tA}|| estimated through the first-component block norms."""
    ts = np.linspace(0.0, T, samples)
    norms = [np.linalg.norm(sys.expm(t), 2) for t in ts]
    # the shift part has norm <= 1; the cross term is bounded by sqrt(t) sup ||e^{s a0}||
    return float(max(norms) * (1.0 + np.sqrt(min(T, sys.d))) + 1.0)
