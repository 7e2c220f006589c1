"""Scalar function descriptors for terminal and running costs.

A descriptor bundles a vectorized callable on R^n with its (optional) gradient
and Hessian, a sup-norm estimate and the (tag, params) pair used by the problem
file.  Points are arrays of shape (..., n); values come back with shape (...).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInput

Array = np.ndarray


def _as_points(y, n):
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y[None]
    if y.shape[-1] != n:
        if n == 1:
            return y[..., None]
        raise InvalidInput(f"expected points in R^{n}, got shape {y.shape}")
    return y


@dataclass(frozen=True, eq=False)
class ScalarFunction:
    tag: str
    params: dict
    n: int
    value_fn: Callable[[Array], Array]
    grad_fn: Optional[Callable[[Array], Array]] = None
    hess_fn: Optional[Callable[[Array], Array]] = None
    sup_norm: float = np.inf
    grad_sup_norm: float = np.inf
    smooth: bool = False

    def __call__(self, y) -> Array:
        return self.value_fn(_as_points(y, self.n))

    def grad(self, y) -> Array:
        if self.grad_fn is None:
            raise InvalidInput(f"function '{self.tag}' has no gradient")
        return self.grad_fn(_as_points(y, self.n))

    def hess(self, y) -> Array:
        if self.hess_fn is None:
            raise InvalidInput(f"function '{self.tag}' has no Hessian")
        return self.hess_fn(_as_points(y, self.n))

    @property
    def bounded(self) -> bool:
        return bool(np.isfinite(self.sup_norm))

    @property
    def has_grad(self) -> bool:
        return self.grad_fn is not None


def _vec(w, n, name="weights"):
    if w is None:
        w = np.zeros(n)
        w[0] = 1.0
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if w.shape != (n,):
        raise InvalidInput(f"{name} must have length {n}")
    return w


def constant(c: float, n: int = 1) -> ScalarFunction:
    c = float(c)
    return ScalarFunction(
        "constant", {"value": c}, n,
        lambda y: np.full(y.shape[:-1], c),
        lambda y: np.zeros(y.shape),
        lambda y: np.zeros(y.shape + (n,)),
        sup_norm=abs(c), grad_sup_norm=0.0, smooth=True,
    )


def tanh(n: int = 1, weights=None, scale: float = 1.0, shift: float = 0.0) -> ScalarFunction:
    """scale * tanh(<w, y> + shift)."""
    w = _vec(weights, n)
    scale, shift = float(scale), float(shift)

    def val(y):
        return scale * np.tanh(y @ w + shift)

    def grad(y):
        s = 1.0 - np.tanh(y @ w + shift) ** 2
        return scale * s[..., None] * w

    def hess(y):
        th = np.tanh(y @ w + shift)
        s = -2.0 * th * (1.0 - th ** 2)
        return scale * s[..., None, None] * np.multiply.outer(w, w)

    return ScalarFunction(
        "tanh", {"weights": tuple(w), "scale": scale, "shift": shift}, n,
        val, grad, hess, sup_norm=abs(scale),
        grad_sup_norm=abs(scale) * float(np.linalg.norm(w)), smooth=True,
    )


def gaussian_bump(n: int = 1, center=None, width: float = 1.0, amplitude: float = 1.0) -> ScalarFunction:
    """amplitude * exp(-|y - center|^2 / (2 width^2))."""
    c = np.zeros(n) if center is None else _vec(center, n, "center")
    width, amplitude = float(width), float(amplitude)
    if width <= 0:
        raise InvalidInput("gaussian_bump width must be positive")

    def val(y):
        r2 = np.sum((y - c) ** 2, axis=-1)
        return amplitude * np.exp(-0.5 * r2 / width ** 2)

    def grad(y):
        return -(y - c) / width ** 2 * val(y)[..., None]

    def hess(y):
        d = (y - c) / width ** 2
        return val(y)[..., None, None] * (np.einsum("...i,...j->...ij", d, d) - np.eye(n) / width ** 2)

    return ScalarFunction(
        "gaussian_bump", {"center": tuple(c), "width": width, "amplitude": amplitude}, n,
        val, grad, hess, sup_norm=abs(amplitude),
        grad_sup_norm=abs(amplitude) / width * np.exp(-0.5), smooth=True,
    )


def indicator_smooth(n: int = 1, weights=None, threshold: float = 0.0, eps: float = 0.1) -> ScalarFunction:
    """Smoothed indicator of {<w,y> > threshold}; eps = 0 gives the hard indicator."""
    w = _vec(weights, n)
    threshold, eps = float(threshold), float(eps)
    params = {"weights": tuple(w), "threshold": threshold, "eps": eps}
    if eps < 0:
        raise InvalidInput("indicator_smooth eps must be >= 0")
    if eps == 0.0:
        return ScalarFunction(
            "indicator_smooth", params, n,
            lambda y: (y @ w > threshold).astype(float), sup_norm=1.0, smooth=False,
        )

    def val(y):
        return 0.5 * (1.0 + np.tanh((y @ w - threshold) / eps))

    def grad(y):
        th = np.tanh((y @ w - threshold) / eps)
        return (0.5 / eps * (1.0 - th ** 2))[..., None] * w

    def hess(y):
        th = np.tanh((y @ w - threshold) / eps)
        s = -th * (1.0 - th ** 2) / eps ** 2
        return s[..., None, None] * np.multiply.outer(w, w)

    return ScalarFunction(
        "indicator_smooth", params, n, val, grad, hess, sup_norm=1.0,
        grad_sup_norm=0.5 / eps * float(np.linalg.norm(w)), smooth=True,
    )


def sign(n: int = 1, weights=None) -> ScalarFunction:
    """sign(<w, y>): bounded and discontinuous."""
    w = _vec(weights, n)
    return ScalarFunction(
        "sign", {"weights": tuple(w)}, n, lambda y: np.sign(y @ w), sup_norm=1.0, smooth=False,
    )


def sine(n: int = 1, weights=None, amplitude: float = 1.0) -> ScalarFunction:
    w = _vec(weights, n)
    amplitude = float(amplitude)
    return ScalarFunction(
        "sine", {"weights": tuple(w), "amplitude": amplitude}, n,
        lambda y: amplitude * np.sin(y @ w),
        lambda y: amplitude * np.cos(y @ w)[..., None] * w,
        lambda y: -amplitude * np.sin(y @ w)[..., None, None] * np.multiply.outer(w, w),
        sup_norm=abs(amplitude), grad_sup_norm=abs(amplitude) * float(np.linalg.norm(w)), smooth=True,
    )


def linear(a, offset: float = 0.0) -> ScalarFunction:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    n = a.size
    offset = float(offset)
    return ScalarFunction(
        "linear", {"weights": tuple(a), "offset": offset}, n,
        lambda y: y @ a + offset,
        lambda y: np.broadcast_to(a, y.shape).copy(),
        lambda y: np.zeros(y.shape + (n,)),
        grad_sup_norm=float(np.linalg.norm(a)), smooth=True,
    )


def quadratic(n: int = 1, matrix=None) -> ScalarFunction:
    """y^T M y (M = identity by default); unbounded, used by moment checks."""
    M = np.eye(n) if matrix is None else np.asarray(matrix, dtype=float).reshape(n, n)
    S = 0.5 * (M + M.T)
    return ScalarFunction(
        "quadratic", {"matrix": tuple(M.ravel())}, n,
        lambda y: np.einsum("...i,ij,...j->...", y, M, y),
        lambda y: 2.0 * y @ S,
        lambda y: np.broadcast_to(2.0 * S, y.shape + (n,)).copy(),
        smooth=True,
    )


def table(grid, values) -> ScalarFunction:
    """Piecewise-linear interpolation of tabulated values on a 1-D grid (clamped)."""
    grid = np.asarray(grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if grid.ndim != 1 or grid.shape != values.shape or grid.size < 2:
        raise InvalidInput("table needs matching 1-D grid and values with >= 2 entries")
    if np.any(np.diff(grid) <= 0):
        raise InvalidInput("table grid must be strictly increasing")
    slopes = np.diff(values) / np.diff(grid)

    def val(y):
        return np.interp(y[..., 0], grid, values)

    def grad(y):
        idx = np.clip(np.searchsorted(grid, y[..., 0], side="right") - 1, 0, slopes.size - 1)
        g = slopes[idx]
        g = np.where((y[..., 0] < grid[0]) | (y[..., 0] > grid[-1]), 0.0, g)
        return g[..., None]

    return ScalarFunction(
        "table", {"grid": tuple(grid), "values": tuple(values)}, 1, val, grad,
        sup_norm=float(np.max(np.abs(values))), grad_sup_norm=float(np.max(np.abs(slopes))),
        smooth=False,
    )


def from_callable(fn, n: int = 1, grad=None, hess=None, sup_norm=np.inf, smooth=None,
                  tag: str = "callable") -> ScalarFunction:
    """Wrap user callables acting on arrays of shape (..., n)."""
    return ScalarFunction(tag, {}, n, fn, grad, hess, sup_norm=sup_norm,
                          smooth=bool(grad is not None) if smooth is None else smooth)


FAMILIES = {
    "constant": constant,
    "tanh": tanh,
    "gaussian_bump": gaussian_bump,
    "indicator_smooth": indicator_smooth,
    "sign": sign,
    "sine": sine,
    "table": table,
}


def make_function(tag: str, n: int, **params) -> ScalarFunction:
    """Build a family member from its file tag (the inverse of ``tag``/``params``)."""
    if tag == "dirac":
        raise InvalidInput("'dirac' is not a function family")
    if tag not in FAMILIES:
        raise InvalidInput(f"unknown function family '{tag}' (known: {', '.join(sorted(FAMILIES))})")
    if tag == "constant":
        return constant(params.get("value", 0.0), n)
    if tag == "table":
        if n != 1:
            raise InvalidInput("table functions are only supported for n = 1")
        return table(params["grid"], params["values"])
    return FAMILIES[tag](n, **params)


# --------------------------------------------------------------------------
# running state cost


@dataclass(frozen=True, eq=False)
class RunningCost:
    """Running cost l0(t, y) in calendar time.

    kind 'zero' and 'time' are exact for the reduced solver; kind 'state'
    carries a state-dependent part and needs the reduced approximation.
    """

    kind: str
    tag: str
    params: dict = field(default_factory=dict)
    time_fn: Callable = None
    state_fn: Optional[ScalarFunction] = None
    sup_norm: float = 0.0

    def time_part(self, t):
        t = np.asarray(t, dtype=float)
        if self.time_fn is None:
            return np.zeros_like(t)
        return self.time_fn(t)

    def __call__(self, t, y):
        """Vectorized l0(t, y); y has shape (..., n)."""
        base = self.time_part(t)
        if self.state_fn is not None:
            return base + self.state_fn(y)
        y = np.asarray(y, dtype=float)
        return base + np.zeros(y.shape[:-1])

    @property
    def state_dependent(self) -> bool:
        return self.state_fn is not None


def zero_cost() -> RunningCost:
    return RunningCost("zero", "zero")


def constant_cost(c: float) -> RunningCost:
    c = float(c)
    return RunningCost("time", "constant", {"value": c}, lambda t: np.full(np.shape(t), c), None, abs(c))


def time_linear_cost(a: float, b: float, horizon: float) -> RunningCost:
    """a + b t on [0, horizon]."""
    a, b = float(a), float(b)
    return RunningCost("time", "time_linear", {"a": a, "b": b},
                       lambda t: a + b * np.asarray(t, dtype=float), None,
                       max(abs(a), abs(a + b * horizon)))


def time_cost(fn, sup_norm: float, tag: str = "time_callable") -> RunningCost:
    return RunningCost("time", tag, {}, fn, None, float(sup_norm))


def state_cost(fn: ScalarFunction) -> RunningCost:
    return RunningCost("state", "state", {"phi": fn.tag, **fn.params}, None, fn, fn.sup_norm)
