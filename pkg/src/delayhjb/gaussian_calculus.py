"""Reduced covariance, partial smoothing of cylindrical functions and their derivatives.

For phi(x) = phibar(x0) the Ornstein-Uhlenbeck semigroup acts through the
first component only:

    R_t[phi](x) = E phibar(y + Z),   y = (e^{tA} x)_0,   Z ~ N(0, Q0_t).

Every expectation here goes through a :class:`GaussianRule`, a quadrature for
N(0, C) built on the numerical range of C.  Derivative formulas reuse the
same nodes, so finite differences of ``apply_Rt`` and the kernels agree to
quadrature accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.stats import norm as _normal
from scipy.stats import qmc

from .errors import ControllabilityFailure, ImageInclusionViolated, InvalidInput
from .functions import ScalarFunction
from .system_model import DelaySystem, LiftedState, etAB_first, first_component, semigroup_adjoint_apply

RANK_TOL = 1e-10       # relative threshold for numerical rank
RANGE_TOL = 1e-7       # relative residual allowed when testing v in Im C
GH_NODES = 32
QMC_POINTS = 2 ** 15
QMC_SEED = 20240611


# --------------------------------------------------------------------------
# quadrature helpers


@lru_cache(maxsize=None)
def _gl(k: int):
    return leggauss(k)


@lru_cache(maxsize=None)
def _gh(k: int):
    x, w = hermegauss(k)
    return x, w / np.sqrt(2.0 * np.pi)


def gauss_legendre(a: float, b: float, k: int = 16, panels: int = 1):
    """Composite Gauss-Legendre nodes/weights on [a, b]."""
    x, w = _gl(k)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x).ravel()
    weights = (half[:, None] * w).ravel()
    return nodes, weights


def adaptive_gl(fn, a: float, b: float, tol: float = 1e-10, k: int = 10, max_depth: int = 30):
    """Adaptive Gauss-Legendre for array-valued integrands.

    ``fn`` maps a vector of nodes to an array with leading axis over nodes.
    A panel is accepted when one k-point rule and the two half-panel rules
    agree to ``tol`` scaled by the panel's share of [a, b].
    """
    total = b - a

    def rule(lo, hi):
        x, w = _gl(k)
        s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
        return np.tensordot(0.5 * (hi - lo) * w, fn(s), axes=1)

    stack = [(a, b, rule(a, b), 0)]
    out = 0.0
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = rule(lo, mid), rule(mid, hi)
        err = np.max(np.abs(left + right - whole))
        if err <= tol * (hi - lo) / total or depth >= max_depth:
            out = out + left + right
        else:
            stack.append((lo, mid, left, depth + 1))
            stack.append((mid, hi, right, depth + 1))
    return out


# --------------------------------------------------------------------------
# reduced covariance


@dataclass(frozen=True, eq=False)
class ReducedCovariance:
    t: float
    q: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    rank: int
    pseudo_inv_sqrt: np.ndarray

    @classmethod
    def from_matrix(cls, t: float, q: np.ndarray) -> "ReducedCovariance":
        q = 0.5 * (q + q.T)
        lam, V = np.linalg.eigh(q)
        lam = np.where(lam < 0.0, 0.0, lam)
        cut = RANK_TOL * max(lam.max(initial=0.0), np.finfo(float).tiny)
        keep = lam > cut
        inv_sqrt = np.zeros_like(lam)
        inv_sqrt[keep] = 1.0 / np.sqrt(lam[keep])
        P = (V * inv_sqrt) @ V.T
        return cls(float(t), q, lam, V, int(keep.sum()), P)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def invertible(self) -> bool:
        return self.rank == self.n

    @property
    def sqrt(self) -> np.ndarray:
        return (self.eigvecs * np.sqrt(self.eigvals)) @ self.eigvecs.T

    @property
    def range_basis(self) -> np.ndarray:
        cut = RANK_TOL * max(self.eigvals.max(initial=0.0), np.finfo(float).tiny)
        return self.eigvecs[:, self.eigvals > cut]

    def range_residual(self, v) -> float:
        """Relative distance of the columns of v from Im Q."""
        v = np.asarray(v, dtype=float).reshape(self.n, -1)
        scale = np.linalg.norm(v)
        if scale == 0.0:
            return 0.0
        Vr = self.range_basis
        return float(np.linalg.norm(v - Vr @ (Vr.T @ v)) / scale)

    def inv_sqrt_apply(self, v) -> np.ndarray:
        """Q^{-1/2} v; raises when v has a component outside the range."""
        if self.range_residual(v) > RANGE_TOL:
            raise ImageInclusionViolated(
                f"vector leaves Im Q0_t at t={self.t:g} (relative residual {self.range_residual(v):.2e})")
        return self.pseudo_inv_sqrt @ np.asarray(v, dtype=float)


def q0_matrix(t: float, sys: DelaySystem, tol: float = 1e-10) -> np.ndarray:
    """Q0_t = int_0^t e^{s a0} sigma sigma^T e^{s a0^T} ds."""
    if not t > 0:
        raise InvalidInput("t must be > 0")
    ss = sys.sigma @ sys.sigma.T
    if not np.any(sys.a0):
        return t * ss

    def integrand(s):
        E = sys.expm(s)
        return E @ ss @ np.swapaxes(E, -1, -2)

    return adaptive_gl(integrand, 0.0, float(t), tol=tol)


def compute_Q0(t: float, sys: DelaySystem, tol: float = 1e-10) -> ReducedCovariance:
    return ReducedCovariance.from_matrix(t, q0_matrix(t, sys, tol))


def convolution_covariance(s: float, t: float, sys: DelaySystem) -> np.ndarray:
    """Covariance of (e^{sA} Z)_0 for Z ~ N(0, Q_{t-s}): e^{s a0} Q0_{t-s} e^{s a0^T}."""
    E = sys.expm(s)
    return E @ q0_matrix(t - s, sys) @ E.T


def numerical_rank(M: np.ndarray) -> int:
    sv = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > RANK_TOL * sv[0]))


def kalman_exponent(sys: DelaySystem) -> int:
    """Smallest r with rank [sigma, a0 sigma, ..., a0^r sigma] = n."""
    blocks = [sys.sigma]
    for r in range(sys.n):
        if numerical_rank(np.hstack(blocks)) == sys.n:
            return r
        blocks.append(sys.a0 @ blocks[-1])
    raise ControllabilityFailure("Kalman matrix of (a0, sigma) is rank deficient: Q0_t is singular for every t")


def in_image(cols, base: np.ndarray) -> bool:
    """True when every column of ``cols`` lies in Im ``base`` (rank does not jump)."""
    cols = np.atleast_2d(np.asarray(cols, dtype=float))
    r0 = numerical_rank(base)
    for c in cols.T:
        if not np.any(c):
            continue
        if numerical_rank(np.column_stack([base, c])) > r0:
            return False
    return True


# --------------------------------------------------------------------------
# Gaussian quadrature on the range of a covariance


@lru_cache(maxsize=None)
def _std_nodes(r: int, nodes: int):
    """Standard normal nodes (P, r) and weights (P,)."""
    if r == 0:
        return np.zeros((1, 0)), np.ones(1)
    if r <= 3:
        x, w = _gh(nodes)
        grids = np.meshgrid(*([x] * r), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        wts = np.ones(pts.shape[0])
        for g in np.meshgrid(*([w] * r), indexing="ij"):
            wts = wts * g.ravel()
        return pts, wts
    u = qmc.Sobol(d=r, scramble=True, seed=QMC_SEED).random(QMC_POINTS)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return _normal.ppf(u), np.full(QMC_POINTS, 1.0 / QMC_POINTS)


class GaussianRule:
    """Quadrature for E g(Z), Z ~ N(0, C), supported on the numerical range of C.

    ``z`` holds the nodes (P, n), ``w`` the weights, ``xi`` the standardized
    coordinates (P, r) with z = V_r diag(sqrt(lam_r)) xi.
    """

    def __init__(self, cov: np.ndarray, nodes: int = GH_NODES):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        rc = ReducedCovariance.from_matrix(0.0, cov)
        cut = RANK_TOL * max(rc.eigvals.max(initial=0.0), np.finfo(float).tiny)
        keep = rc.eigvals > cut
        self.cov = rc
        self.lam = rc.eigvals[keep]
        self.V = rc.eigvecs[:, keep]
        self.rank = int(keep.sum())
        self.xi, self.w = _std_nodes(self.rank, nodes)
        self.z = self.xi @ (self.V * np.sqrt(self.lam)).T

    @property
    def n(self) -> int:
        return self.cov.n

    def _whiten(self, D: np.ndarray) -> np.ndarray:
        """diag(lam^{-1/2}) V_r^T D, after checking D's columns lie in the range."""
        D = np.asarray(D, dtype=float)
        res = self.cov.range_residual(D)
        if res > RANGE_TOL:
            raise ImageInclusionViolated(
                f"direction leaves the range of the covariance (relative residual {res:.2e})")
        return (self.V.T @ D.reshape(self.n, -1)) / np.sqrt(self.lam)[:, None]

    def kernel(self, D) -> np.ndarray:
        """<C^+ D_j, z_p> for every node p and column j: shape (P, m)."""
        return self.xi @ self._whiten(D)

    def full_kernel(self) -> np.ndarray:
        """C^{-1} z_p (P, n); requires C invertible."""
        if self.rank < self.n:
            raise ControllabilityFailure("covariance is singular; full gradient does not exist")
        return (self.xi / np.sqrt(self.lam)) @ self.V.T

    def second_kernel(self, D) -> np.ndarray:
        """(C^{-1} z z^T C^{-1} - C^{-1}) D at every node: shape (P, n, m)."""
        a = self.full_kernel()
        Cinv = (self.V / self.lam) @ self.V.T
        D = np.asarray(D, dtype=float).reshape(self.n, -1)
        return a[:, :, None] * (a @ D)[:, None, :] - (Cinv @ D)[None]

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Contract the trailing node axis of ``values`` with the weights."""
        return values @ self.w

    def expect_fn(self, fn, y) -> np.ndarray:
        """E fn(y + Z) for a batch of centres y (..., n)."""
        y = np.asarray(y, dtype=float)
        return fn(y[..., None, :] + self.z) @ self.w


@lru_cache(maxsize=256)
def _rule_cache(key):
    sys, t, nodes = key
    return GaussianRule(q0_matrix(t, sys), nodes)


def rule_for(t: float, sys: DelaySystem, nodes: int = GH_NODES) -> GaussianRule:
    """The N(0, Q0_t) rule, memoized per (system, t, nodes)."""
    return _rule_cache((sys, float(t), int(nodes)))


def _centres(y, n):
    y = np.asarray(y, dtype=float)
    if y.ndim == 0 or y.shape[-1] != n:
        if n == 1:
            y = y[..., None]
        else:
            raise InvalidInput(f"reduced coordinate must have trailing size {n}")
    return y


# --------------------------------------------------------------------------
# partial smoothing


def apply_Rt(phi: ScalarFunction, t: float, y, sys: DelaySystem, nodes: int = GH_NODES):
    """R_t[phi] at reduced coordinate(s) y = (e^{tA}x)_0; phi(y) at t = 0."""
    if t < 0:
        raise InvalidInput("t must be >= 0")
    y = _centres(y, sys.n)
    if t == 0:
        return phi(y)
    return rule_for(t, sys, nodes).expect_fn(phi, y)


def _require_positive(t):
    if not t > 0:
        raise InvalidInput("derivatives of R_t need t > 0")


def gradB_Rt(phi: ScalarFunction, t: float, y, sys: DelaySystem, nodes: int = GH_NODES) -> np.ndarray:
    """nabla^B R_t[phi] (..., m): E[phibar(y+Z) <Q^{-1}(e^{tA}B)_0 k, Z>]."""
    _require_positive(t)
    y = _centres(y, sys.n)
    rule = rule_for(t, sys, nodes)
    K = rule.kernel(etAB_first(t, sys))
    return (phi(y[..., None, :] + rule.z) * rule.w) @ K


def grad_Rt_reduced(phi: ScalarFunction, t: float, y, sys: DelaySystem, nodes: int = GH_NODES) -> np.ndarray:
    """c with <nabla R_t[phi](x), h> = <c, (e^{tA}h)_0>."""
    _require_positive(t)
    y = _centres(y, sys.n)
    rule = rule_for(t, sys, nodes)
    return (phi(y[..., None, :] + rule.z) * rule.w) @ rule.full_kernel()


def grad_Rt(phi: ScalarFunction, t: float, x: LiftedState, sys: DelaySystem, nodes: int = GH_NODES) -> LiftedState:
    """Full gradient as an element of H, e^{tA*}(c, 0)."""
    c = grad_Rt_reduced(phi, t, first_component(t, x, sys), sys, nodes)
    return semigroup_adjoint_apply(t, LiftedState(c, np.zeros((sys.npts, sys.n))), sys)


def hessB_Rt(phi: ScalarFunction, t: float, y, sys: DelaySystem, nodes: int = GH_NODES) -> np.ndarray:
    """Mixed derivative nabla nabla^B R_t[phi] in reduced form M (..., n, m).

    The bilinear form is (h, k) -> <(e^{tA}h)_0, M k>, with
    M = E[grad phibar(y+Z) <Q^{-1}(e^{tA}B)_0 ., Z>^T].
    """
    _require_positive(t)
    y = _centres(y, sys.n)
    rule = rule_for(t, sys, nodes)
    K = rule.kernel(etAB_first(t, sys))
    G = phi.grad(y[..., None, :] + rule.z)  # (..., P, n)
    return np.einsum("...pa,p,pj->...aj", G, rule.w, K)


def hessB_form(phi: ScalarFunction, t: float, x: LiftedState, h: LiftedState, k, sys: DelaySystem,
               nodes: int = GH_NODES) -> float:
    M = hessB_Rt(phi, t, first_component(t, x, sys), sys, nodes)
    return float(first_component(t, h, sys) @ M @ np.atleast_1d(k))


def hessB_Rt_bounded(phi: ScalarFunction, t: float, y, sys: DelaySystem, nodes: int = GH_NODES) -> np.ndarray:
    """Same reduced form for bounded (possibly discontinuous) phibar via the
    second-order Gaussian kernel; requires Q0_t invertible."""
    _require_positive(t)
    y = _centres(y, sys.n)
    rule = rule_for(t, sys, nodes)
    S = rule.second_kernel(etAB_first(t, sys))
    return np.einsum("...p,p,paj->...aj", phi(y[..., None, :] + rule.z), rule.w, S)


def cameron_martin_density(t1: float, t2: float, k, z, sys: DelaySystem) -> np.ndarray:
    """dN(mu, Q0_{t2}) / dN(0, Q0_{t2}) at z, with mu = (e^{t1 A} B k)_0."""
    mu = etAB_first(t1, sys) @ np.atleast_1d(np.asarray(k, dtype=float))
    rc = compute_Q0(t2, sys)
    a = rc.inv_sqrt_apply(mu)
    g = rc.pseudo_inv_sqrt @ a  # Q^+ mu
    z = _centres(z, sys.n)
    return np.exp(z @ g - 0.5 * a @ a)


def bnorm(t: float, sys: DelaySystem) -> float:
    """||(Q0_t)^{-1/2} (e^{tA}B)_0|| (spectral norm)."""
    rc = compute_Q0(t, sys)
    return float(np.linalg.norm(rc.inv_sqrt_apply(etAB_first(t, sys)), 2))


# --------------------------------------------------------------------------
# minimal-energy controls


@dataclass(frozen=True, eq=False)
class SteeringControl:
    s: np.ndarray        # quadrature nodes in [0, t]
    weights: np.ndarray
    values: np.ndarray   # (len(s), k)
    energy: float
    residual: float      # |Pi_0 e^{tA}Bk + int e^{(t-s)a0} sigma u(s) ds|


def minimal_energy_control(t: float, k, sys: DelaySystem, mode: str = "combinedInclusion") -> SteeringControl:
    """Control steering the reduced OU system from (e^{tA}Bk)_0 to 0 in time t."""
    if not t > 0:
        raise InvalidInput("t must be > 0")
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape != (sys.m,):
        raise InvalidInput(f"k must have length {sys.m}")
    target = etAB_first(t, sys) @ k
    sig_pinv = np.linalg.pinv(sys.sigma, rcond=RANK_TOL)

    if mode == "densityInclusion":
        # trapezoid nodes shared with etAB_first for the memory part
        from .system_model import tail_weights
        w = tail_weights(-t, sys)
        idx = np.nonzero(w)[0]
        s_mem, w_mem = -sys.xi[idx], w[idx]
        if t > sys.d:
            s_gl, w_gl = gauss_legendre(sys.d, t, 16, 4)
        else:
            s_gl, w_gl = np.zeros(0), np.zeros(0)
        s = np.concatenate([s_mem, s_gl])
        wts = np.concatenate([w_mem, w_gl])
        b1k = np.zeros((s.size, sys.n))
        b1k[: idx.size] = sys.b1[idx] @ k
        E = sys.expm(s)
        drift0 = E @ (sys.b0 @ k) / t
        for v in list(drift0) + list(b1k):
            if np.any(v) and not in_image(v[:, None], sys.sigma):
                raise ImageInclusionViolated("b0/b1 directions leave Im sigma")
        u = -(drift0 + b1k) @ sig_pinv.T
    elif mode == "combinedInclusion":
        rc = compute_Q0(t, sys)
        if rc.range_residual(target) > RANGE_TOL:
            raise ImageInclusionViolated(f"(e^tA B k)_0 leaves Im Q0_t at t={t:g}")
        g = rc.pseudo_inv_sqrt @ (rc.pseudo_inv_sqrt @ target)
        s, wts = gauss_legendre(0.0, t, 20, 16)
        E = sys.expm(t - s)
        u = -np.einsum("ba,pcb,c->pa", sys.sigma, E, g)
    else:
        raise InvalidInput("mode must be 'densityInclusion' or 'combinedInclusion'")

    endpoint = target + np.einsum("p,pab,bc,pc->a", wts, sys.expm(t - s), sys.sigma, u)
    energy = float(wts @ np.sum(u * u, axis=1))
    return SteeringControl(s, wts, u, energy, float(np.linalg.norm(endpoint)))


# --------------------------------------------------------------------------
# hypotheses report


def blowup_times(T: float, count: int = 12) -> np.ndarray:
    return np.logspace(-4, -1, count) * T


def fit_slope(ts, values) -> float:
    ts, values = np.asarray(ts, dtype=float), np.asarray(values, dtype=float)
    return float(np.polyfit(np.log(ts), np.log(values), 1)[0])


@dataclass(frozen=True)
class SmoothingReport:
    kalman_exponent: Optional[int]
    t_samples: np.ndarray
    q0_invertible: np.ndarray
    inclusion_hyp_A: bool
    inclusion_hyp_B: bool
    inclusion_range: bool
    norms: np.ndarray = field(repr=False)
    blowup_exponent: float = float("nan")

    @property
    def smoothing_ok(self) -> bool:
        return self.inclusion_hyp_A or self.inclusion_hyp_B or self.inclusion_range

    def rows(self):
        return [(float(t), float(v)) for t, v in zip(self.t_samples, self.norms)]

    def summary(self) -> str:
        r = "absent" if self.kalman_exponent is None else str(self.kalman_exponent)
        return "\n".join([
            f"kalman_exponent: {r}",
            f"q0_invertible: {bool(np.all(self.q0_invertible))}",
            f"inclusion_hyp_A: {self.inclusion_hyp_A}",
            f"inclusion_hyp_B: {self.inclusion_hyp_B}",
            f"inclusion_range: {self.inclusion_range}",
            f"blowup_exponent: {self.blowup_exponent:.6f}",
        ])


def check_hypotheses(sys: DelaySystem, t_samples: Sequence[float]) -> SmoothingReport:
    """Rank tests for the image inclusions and a fitted blow-up exponent.

    inclusion_hyp_A: Im e^{t a0} b0 and Im b1(xi) inside Im sigma.
    inclusion_hyp_B: Im (e^{tA}B)_0 inside Im sigma at every sampled t.
    inclusion_range: Im (e^{tA}B)_0 inside Im Q0_t, which is what the
    Gaussian formulas actually need.
    """
    ts = np.asarray(t_samples, dtype=float)
    if ts.size == 0 or not np.all(np.isfinite(ts)) or np.any(ts <= 0):
        raise InvalidInput("t_samples must be finite and positive")
    try:
        r = kalman_exponent(sys)
    except ControllabilityFailure:
        r = None
    hypA = all(in_image(sys.b1[j], sys.sigma) for j in range(sys.npts))
    hypA = hypA and all(in_image(sys.expm(t) @ sys.b0, sys.sigma) for t in ts)
    hypB, hyp_range = True, True
    inv, norms = [], []
    for t in ts:
        D = etAB_first(t, sys)
        hypB = hypB and in_image(D, sys.sigma)
        rc = compute_Q0(t, sys)
        inv.append(rc.invertible)
        ok = rc.range_residual(D) <= RANGE_TOL
        hyp_range = hyp_range and ok
        norms.append(np.linalg.norm(rc.pseudo_inv_sqrt @ D, 2) if ok else np.inf)
    norms = np.array(norms)
    slope = fit_slope(ts, norms) if ts.size > 1 and np.all(np.isfinite(norms)) and np.all(norms > 0) else float("nan")
    return SmoothingReport(r, ts, np.array(inv), bool(hypA), bool(hypB), bool(hyp_range), norms, slope)
