"""Mild solution of the HJB equation in the reduced representation.

The forward-time value w(t, x) = v(T - t, x) is stored as f(t, y) with
y = (e^{tA}x)_0, together with fbar(t, y) = t^{1/2} nabla^B w.  One Picard step
applies the contraction

    f(t, y)    = E phibar(y + Z_t) + int_0^t E[Psi_s(y + W_{s,t})] ds
    fbar(t, y) = t^{1/2} ( E[phibar(y + Z_t) <Q_t^{-1} D_t, Z_t>]
                           + int_0^t E[Psi_s(y + W) <S_{s,t}^{-1} D_t, W>] ds )

with Z_t ~ N(0, Q0_t), W ~ N(0, S_{s,t}), S_{s,t} = e^{s a0} Q0_{t-s} e^{s a0^T},
D_t = (e^{tA}B)_0 and Psi_s = H_min(s^{-1/2} fbar(s, .)) + l0(T - s, .).
The s-integrals use s = t sin^2(theta), which absorbs both endpoint
singularities s^{-1/2} and (t - s)^{-1/2}.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConvergenceFailure, InvalidInput, TerminalSingularity
from .functions import ScalarFunction
from .gaussian_calculus import (GaussianRule, apply_Rt, gauss_legendre, gradB_Rt, q0_matrix,
                                rule_for)
from .hamiltonian import ControlProblem, argmin_u, h_min, lipschitz_probe, min_cost_value
from .system_model import DelaySystem, LiftedState, etAB_first, first_component, sup_expm_norm

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 200
SPLIT_RATIO = 0.5
LAYER_CACHE = 4096  # off-grid layers kept per value representation


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class SolverGrids:
    """Discretization parameters.

    time_steps: N, slices t_i = T (i/N)^2.
    y_points: nodes per spatial axis (odd keeps 0 on the grid).
    half_width: box half-width Y; default 6 max_t ||Q0_t^{1/2}|| + y_range.
    gh_nodes: Gauss-Hermite nodes per axis inside the convolution.
    """

    time_steps: int = 32
    y_points: Optional[int] = None
    half_width: Optional[float] = None
    y_range: float = 3.0
    gh_nodes: Optional[int] = None
    theta_panels: int = 4
    theta_nodes: int = 16

    def points_per_axis(self, n: int) -> int:
        if self.y_points is not None:
            return int(self.y_points)
        return {1: 161, 2: 41}.get(n, 15)

    def nodes_per_axis(self, n: int) -> int:
        if self.gh_nodes is not None:
            return int(self.gh_nodes)
        return {1: 24, 2: 10}.get(n, 6)


def time_grid(T: float, N: int) -> np.ndarray:
    return T * (np.arange(N + 1) / N) ** 2


def theta_rule(panels: int = 4, nodes: int = 16):
    """Composite Gauss-Legendre on [0, pi/2]; s = t sin^2(theta), ds = t sin(2 theta) dtheta."""
    return gauss_legendre(0.0, 0.5 * np.pi, nodes, panels)


def s_rule(t: float, panels: int = 4, nodes: int = 16):
    th, w = theta_rule(panels, nodes)
    return t * np.sin(th) ** 2, w * t * np.sin(2.0 * th)


def beta_quadrature(t: float, panels: int = 4, nodes: int = 16) -> float:
    """int_0^t (t-s)^{-1/2} s^{-1/2} ds with the singular rule (exactly pi)."""
    s, w = s_rule(t, panels, nodes)
    return float(np.sum(w / np.sqrt((t - s) * s)))


class BoxGrid:
    """Uniform tensor grid on [-Y, Y]^n with clamped multilinear interpolation."""

    def __init__(self, n: int, half_width: float, points: int):
        if points < 2:
            raise InvalidInput("spatial grid needs >= 2 points per axis")
        self.n = n
        self.Y = float(half_width)
        self.size = int(points)
        self.axis = np.linspace(-self.Y, self.Y, self.size)
        self.h = self.axis[1] - self.axis[0]
        mesh = np.meshgrid(*([self.axis] * n), indexing="ij")
        self.points = np.stack([g.ravel() for g in mesh], axis=-1)  # (G, n)
        self.strides = self.size ** np.arange(n - 1, -1, -1)
        bits = (np.arange(2 ** n)[:, None] >> np.arange(n - 1, -1, -1)) & 1
        self.bits = bits  # (C, n)

    @property
    def G(self) -> int:
        return self.points.shape[0]

    def corners(self, pts: np.ndarray):
        """Flat corner indices (..., C), weights (..., C) and number of clamped points."""
        u = (pts + self.Y) / self.h
        clamped = int(np.count_nonzero(np.any((u < 0) | (u > self.size - 1), axis=-1)))
        u = np.clip(u, 0.0, self.size - 1)
        i = np.minimum(np.floor(u).astype(np.int64), self.size - 2)
        fr = u - i
        idx = np.zeros(pts.shape[:-1] + (self.bits.shape[0],), dtype=np.int64)
        wts = np.ones(idx.shape)
        for c, b in enumerate(self.bits):
            idx[..., c] = (i + b) @ self.strides
            wts[..., c] = np.prod(np.where(b == 1, fr, 1.0 - fr), axis=-1)
        return idx, wts, clamped

    def interp(self, values: np.ndarray, pts) -> np.ndarray:
        """values (G, ...) at points (..., n)."""
        pts = np.asarray(pts, dtype=float)
        idx, wts, _ = self.corners(pts)
        return _contract(wts, values[idx], values.ndim - 1)


def _contract(wts, g, extra):
    w = wts.reshape(wts.shape + (1,) * extra)
    return np.sum(w * g, axis=wts.ndim - 1)


# --------------------------------------------------------------------------
# value representation


@dataclass
class SolveDiagnostics:
    records: List[tuple] = field(default_factory=list)  # (blocks, block, iteration, distance, ratio)
    subintervals: int = 1
    beta_residual: float = 0.0
    clamped_points: int = 0
    iterations: int = 0
    lipschitz: float = 0.0
    eta: float = 0.0
    sup_f: float = 0.0
    sup_fbar: float = 0.0
    sanity_bound: float = 0.0
    C_T: float = float("nan")
    M: float = float("nan")
    mode: str = "A"
    init: str = "terminal"

    def final_ratios(self) -> dict:
        """Per-block contraction ratios of the accepted sub-interval partition."""
        out = {}
        for blocks, b, it, dist, ratio in self.records:
            if blocks == self.subintervals and np.isfinite(ratio):
                out.setdefault(b, []).append(ratio)
        return out


@dataclass
class ValueRep:
    t: np.ndarray
    grid: BoxGrid
    f: np.ndarray      # (N+1, G)
    fbar: np.ndarray   # (N+1, G, m)
    T: float
    phi: ScalarFunction
    eta: float = 0.0
    M: float = float("nan")
    fbar2: Optional[np.ndarray] = None  # (N+1, G, n, m)
    solver: Optional["PicardSolver"] = field(default=None, repr=False)
    _layers: dict = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return self.t.size - 1

    def copy(self) -> "ValueRep":
        return ValueRep(self.t, self.grid, self.f.copy(), self.fbar.copy(), self.T, self.phi, self.eta, self.M,
                        None if self.fbar2 is None else self.fbar2.copy(), self.solver)

    def _slice(self, tau: float, for_fbar: bool):
        pos = self.N * np.sqrt(max(tau, 0.0) / self.T)
        if for_fbar and pos < 1.0:
            return 1, 0.0
        j = min(int(np.floor(pos)), self.N - 1)
        return j, pos - j

    def _on_grid(self, tau: float):
        j = int(np.argmin(np.abs(self.t - tau)))
        return j if abs(self.t[j] - tau) <= 1e-14 * self.T else None

    def layer(self, tau: float):
        """(f, fbar) on the spatial grid at remaining time tau.

        Grid slices are returned as stored.  Between slices a converged
        representation applies the mild formula once more at tau (Nystrom
        interpolation), which is exact for the fixed point up to quadrature;
        without a solver the slices are interpolated linearly in sqrt(t).
        """
        j = self._on_grid(tau)
        if j is not None:
            return self.f[j], self.fbar[j]
        key = float(tau)
        if self.solver is not None:
            if key not in self._layers:
                if len(self._layers) >= LAYER_CACHE:
                    self._layers.pop(next(iter(self._layers)))
                self._layers[key] = self.solver.layer(self, key)
            return self._layers[key]
        j, a = self._slice(tau, False)
        f = (1 - a) * self.f[j] + a * self.f[j + 1]
        j, a = self._slice(tau, True)
        return f, (1 - a) * self.fbar[j] + a * self.fbar[j + 1]

    def f_at(self, tau: float, y) -> np.ndarray:
        return self.grid.interp(self.layer(tau)[0], y)

    def fbar_at(self, tau: float, y) -> np.ndarray:
        return self.grid.interp(self.layer(tau)[1], y)

    def fbar2_at(self, tau: float, y) -> np.ndarray:
        if self.fbar2 is None:
            raise InvalidInput("second-derivative layers not computed")
        j, a = self._slice(tau, True)
        vals = (1 - a) * self.fbar2[j] + a * self.fbar2[j + 1]
        G = vals.shape[0]
        out = self.grid.interp(vals.reshape(G, -1), y)
        return out.reshape(out.shape[:-1] + self.fbar2.shape[2:])

    def gradB_reduced(self, tau: float, y) -> np.ndarray:
        """tau^{-1/2} fbar(tau, y): nabla^B v(T - tau) at reduced coordinates (tau > 0)."""
        if not tau > 0:
            raise TerminalSingularity("B-gradient needs remaining time > 0")
        return self.fbar_at(tau, y) / np.sqrt(tau)

    def rows(self):
        """CSV rows (t, y_1..y_n, f, fbar_1..fbar_m)."""
        out = []
        for i, t in enumerate(self.t):
            for g, y in enumerate(self.grid.points):
                out.append((float(t), *map(float, y), float(self.f[i, g]), *map(float, self.fbar[i, g])))
        return out


# --------------------------------------------------------------------------
# solver


class _SliceGeometry:
    """Everything about slice i that does not change between Picard iterations."""

    def __init__(self, solver: "PicardSolver", t: float):
        sys, grids, rep = solver.sys, solver.grids, solver.template
        s, om = s_rule(t, grids.theta_panels, grids.theta_nodes)
        self.t = t
        self.omega = om
        self.sqrt_s = np.sqrt(s)
        pos = rep.N * np.sqrt(s / rep.T)
        j = np.minimum(np.floor(pos).astype(np.int64), rep.N - 1)
        a = pos - j
        low = pos < 1.0
        j[low], a[low] = 1, 0.0
        self.j, self.a = j, a
        D = etAB_first(t, sys)
        Z, W, K = [], [], []
        for sq in s:
            E = sys.expm(sq)
            rule = GaussianRule(E @ q0_matrix(t - sq, sys) @ E.T, solver.nodes)
            Z.append(rule.z)
            W.append(rule.w)
            K.append(rule.kernel(D))
        Z, self.W, self.K = np.array(Z), np.array(W), np.array(K)  # (Q,P,n) (Q,P) (Q,P,m)
        pts = rep.grid.points[None, :, None, :] + Z[:, None, :, :]  # (Q,G,P,n)
        self.idx, self.wts, self.clamped = rep.grid.corners(pts)
        # constant parts: terminal layer and running cost
        prob = solver.prob
        y = rep.grid.points
        self.base_f = apply_Rt(prob.phi, t, y, sys)
        self.base_g = gradB_Rt(prob.phi, t, y, sys)
        l0 = prob.ell0
        if l0.state_dependent:
            vals = l0(solver.T - s[:, None, None], pts)  # (Q,G,P)
            self.base_f = self.base_f + np.einsum("q,qgp,qp->g", om, vals, self.W)
            self.base_g = self.base_g + np.einsum("q,qgp,qp,qpm->gm", om, vals, self.W, self.K)
        elif l0.kind != "zero":
            self.base_f = self.base_f + om @ l0.time_part(solver.T - s)

    def fbar_points(self, fbar: np.ndarray) -> np.ndarray:
        """fbar at (s_q, y_g + z_p): (Q, G, P, m)."""
        jj = self.j[:, None, None, None]
        lo = fbar[jj, self.idx]  # (Q,G,P,C,m)
        hi = fbar[jj + 1, self.idx]
        a = self.a[:, None, None, None, None]
        vals = (1 - a) * lo + a * hi
        return np.sum(self.wts[..., None] * vals, axis=3)

    def step(self, fbar: np.ndarray, prob: ControlProblem):
        """New (f, fbar) for this slice given the current fbar grid."""
        p = self.fbar_points(fbar) / self.sqrt_s[:, None, None, None]
        psi = h_min(p, prob)  # (Q,G,P)
        new_f = self.base_f + np.einsum("q,qgp,qp->g", self.omega, psi, self.W)
        conv_g = np.einsum("q,qgp,qp,qpm->gm", self.omega, psi, self.W, self.K)
        return new_f, np.sqrt(self.t) * (self.base_g + conv_g)


class PicardSolver:
    """Holds the per-slice geometry; ``step`` is one application of the contraction."""

    def __init__(self, prob: ControlProblem, sys: DelaySystem, grids: SolverGrids = SolverGrids(),
                 mode: str = "A"):
        if mode not in ("A", "B"):
            raise InvalidInput("mode must be 'A' or 'B'")
        if prob.ell0.state_dependent and mode == "A":
            raise InvalidInput("state-dependent running cost needs mode B (reduced approximation)")
        if prob.m != sys.m:
            raise InvalidInput(f"control set dimension {prob.m} does not match m = {sys.m}")
        if prob.phi.n != sys.n:
            raise InvalidInput(f"terminal cost acts on R^{prob.phi.n}, system has n = {sys.n}")
        self.prob, self.sys, self.grids, self.mode = prob, sys, grids, mode
        self.T = prob.T
        n = sys.n
        self.nodes = grids.nodes_per_axis(n)
        if grids.half_width is not None:
            Y = float(grids.half_width)
        else:
            spread = np.sqrt(np.linalg.eigvalsh(q0_matrix(self.T, sys)).max())
            Y = 6.0 * spread + grids.y_range
        grid = BoxGrid(n, Y, grids.points_per_axis(n))
        t = time_grid(self.T, grids.time_steps)
        f = np.zeros((t.size, grid.G))
        fbar = np.zeros((t.size, grid.G, sys.m))
        f[0] = prob.phi(grid.points)
        self.template = ValueRep(t, grid, f, fbar, self.T, prob.phi, M=sup_expm_norm(self.T, sys))
        self._geom = {}
        self.clamped = 0

    def geometry(self, i: int) -> _SliceGeometry:
        if i not in self._geom:
            self._geom[i] = _SliceGeometry(self, self.template.t[i])
            self.clamped += self._geom[i].clamped
        return self._geom[i]

    def release(self, keep: Sequence[int] = ()):
        for i in list(self._geom):
            if i not in keep:
                del self._geom[i]

    def layer(self, rep: ValueRep, tau: float):
        """One application of the map at an arbitrary remaining time tau in (0, T]."""
        if not 0.0 < tau <= self.T:
            raise InvalidInput(f"remaining time must lie in (0, {self.T}]")
        return _SliceGeometry(self, tau).step(rep.fbar, self.prob)

    def terminal_layer(self) -> ValueRep:
        rep = self.template.copy()
        for i in range(1, rep.N + 1):
            g = self.geometry(i)
            rep.f[i] = apply_Rt(self.prob.phi, g.t, rep.grid.points, self.sys)
            rep.fbar[i] = np.sqrt(g.t) * gradB_Rt(self.prob.phi, g.t, rep.grid.points, self.sys)
            self.release()
        return rep

    def zero_guess(self) -> ValueRep:
        return self.template.copy()

    def step(self, cur: ValueRep, slices: Optional[Sequence[int]] = None) -> ValueRep:
        new = cur.copy()
        slices = range(1, cur.N + 1) if slices is None else slices
        for i in slices:
            new.f[i], new.fbar[i] = self.geometry(i).step(cur.fbar, self.prob)
        return new

    def distance(self, a: ValueRep, b: ValueRep, eta: float, slices: Sequence[int]) -> float:
        sl = np.asarray(list(slices))
        df = np.max(np.abs(a.f[sl] - b.f[sl]), axis=1)
        dg = np.max(np.abs(a.fbar[sl] - b.fbar[sl]), axis=(1, 2))
        return float(np.max(np.exp(-eta * a.t[sl]) * (df + dg)))


def _blocks(N: int, count: int):
    edges = np.linspace(1, N + 1, count + 1).round().astype(int)
    return [list(range(edges[b], edges[b + 1])) for b in range(count) if edges[b + 1] > edges[b]]


def solve(prob: ControlProblem, sys: DelaySystem, grids: SolverGrids = SolverGrids(),
          tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, mode: str = "A",
          init: str = "terminal", solver: Optional[PicardSolver] = None):
    """Iterate the contraction to its fixed point, marching over sub-intervals.

    The slices are grouped into consecutive blocks; because the map is of
    Volterra type, slices in a block only read earlier slices and themselves,
    so blocks are converged one after another.  The block count starts at 1
    and doubles whenever the measured contraction ratio reaches 1/2.
    """
    if not tol > 0:
        raise InvalidInput("tol must be positive")
    solver = solver or PicardSolver(prob, sys, grids, mode)
    lip = lipschitz_probe(prob).L_hmin
    eta = 2.0 * lip * np.pi / np.sqrt(prob.T)
    cur = solver.terminal_layer() if init == "terminal" else solver.zero_guess()
    N = cur.N
    diag = SolveDiagnostics(lipschitz=lip, eta=eta, mode=mode, init=init, M=cur.M)
    diag.beta_residual = max(abs(beta_quadrature(t, grids.theta_panels, grids.theta_nodes) - np.pi)
                             for t in cur.t[1:])
    count, total = 1, 0
    while True:
        split = False
        for b, block in enumerate(_blocks(N, count)):
            prev, it = None, 0
            while True:
                it += 1
                total += 1
                new = solver.step(cur, block)
                dist = solver.distance(new, cur, eta, block)
                ratio = dist / prev if prev else float("nan")
                diag.records.append((count, b, it, dist, ratio))
                cur = new
                if dist < tol:
                    break
                if it >= 3 and ratio >= SPLIT_RATIO and count < N:
                    split = True
                    break
                if it >= max_iter:
                    diag.subintervals = count
                    raise ConvergenceFailure(
                        f"no convergence after {max_iter} iterations (distance {dist:.3e})", diag)
                prev = dist
            solver.release()
            if split:
                break
        if not split:
            break
        count = min(2 * count, N)
    cur.eta = eta
    cur.solver = solver
    diag.subintervals = count
    diag.iterations = total
    diag.clamped_points = solver.clamped
    diag.sup_f = float(np.max(np.abs(cur.f)))
    diag.sup_fbar = float(np.max(np.abs(cur.fbar)))
    l0 = prob.ell0.sup_norm
    m0 = abs(min_cost_value(prob))
    diag.sanity_bound = prob.phi.sup_norm + prob.T * (m0 + l0) + 2.0 * lip * np.sqrt(prob.T) * diag.sup_fbar
    denom = prob.phi.sup_norm + l0
    diag.C_T = diag.sup_f / denom if denom > 0 else float("nan")
    return cur, diag


def picard_step(cur: ValueRep, prob: ControlProblem, sys: DelaySystem, grids: SolverGrids = SolverGrids(),
                mode: str = "A", solver: Optional[PicardSolver] = None) -> ValueRep:
    solver = solver or PicardSolver(prob, sys, grids, mode)
    return solver.step(cur)


def terminal_layer(prob: ControlProblem, sys: DelaySystem, grids: SolverGrids = SolverGrids(),
                   mode: str = "A") -> ValueRep:
    return PicardSolver(prob, sys, grids, mode).terminal_layer()


# --------------------------------------------------------------------------
# evaluation


def _remaining(rep: ValueRep, t: float) -> float:
    if not (0.0 <= t <= rep.T):
        raise InvalidInput(f"t must lie in [0, {rep.T}]")
    return rep.T - t


def eval_v(rep: ValueRep, t: float, x: LiftedState, sys: DelaySystem) -> float:
    """v(t, x) = f(T - t, (e^{(T-t)A}x)_0)."""
    tau = _remaining(rep, t)
    if tau == 0.0:
        return float(rep.phi(x.y0))
    y = first_component(tau, x, sys)
    return float(rep.f_at(tau, y))


def eval_gradB_v(rep: ValueRep, t: float, x: LiftedState, sys: DelaySystem) -> np.ndarray:
    """nabla^B v(t, x) = (T - t)^{-1/2} fbar(T - t, (e^{(T-t)A}x)_0)."""
    tau = _remaining(rep, t)
    if tau == 0.0:
        if not rep.phi.smooth:
            raise TerminalSingularity("B-gradient at the terminal time needs a smooth terminal cost")
        return sys.b0.T @ rep.phi.grad(x.y0)[0]
    y = first_component(tau, x, sys)
    return rep.gradB_reduced(tau, y)


def feedback(rep: ValueRep, prob: ControlProblem, tau: float, y) -> np.ndarray:
    """argmin_u H_CV(nabla^B v; u) at reduced coordinates y for remaining time tau."""
    return argmin_u(rep.gradB_reduced(tau, y), prob)


# --------------------------------------------------------------------------
# second derivatives (diagnostic only)


class _Sigma2Slice:
    """Quadrature data for nabla nabla^B of the convolution at remaining time t.

    [0, t/2] carries the derivative on the Gaussian kernel (second order),
    [t/2, t] puts it on Psi_s, whose gradient is s^{-alpha} fbar2(s) grad H.
    Substitutions s = (t/2) u^2 and t - s = (t/2) v^2 remove the endpoint
    singularities of the two halves.
    """

    def __init__(self, t: float, pts: np.ndarray, rep: ValueRep, sys: DelaySystem, nodes: int,
                 quad_nodes: int = 32):
        self.t = t
        D = etAB_first(t, sys)
        u, wu = gauss_legendre(0.0, 1.0, quad_nodes, 1)
        self.s1 = 0.5 * t * u ** 2
        self.w1 = wu * t * u
        self.s2 = t - 0.5 * t * u ** 2
        self.w2 = wu * t * u
        z1, W1, S1, z2, W2, K2 = [], [], [], [], [], []
        for s in self.s1:
            E = sys.expm(s)
            r = GaussianRule(E @ q0_matrix(t - s, sys) @ E.T, nodes)
            z1.append(r.z), W1.append(r.w), S1.append(r.second_kernel(D))
        for s in self.s2:
            E = sys.expm(s)
            r = GaussianRule(E @ q0_matrix(t - s, sys) @ E.T, nodes)
            z2.append(r.z), W2.append(r.w), K2.append(r.kernel(D))
        self.W1, self.S1 = np.array(W1), np.array(S1)  # (Q,P) (Q,P,n,m)
        self.W2, self.K2 = np.array(W2), np.array(K2)  # (Q,P) (Q,P,m)
        self.c1 = rep.grid.corners(pts[None, :, None, :] + np.array(z1)[:, None])[:2]
        self.c2 = rep.grid.corners(pts[None, :, None, :] + np.array(z2)[:, None])[:2]
        self.j1, self.a1 = self._slices(rep, self.s1)
        self.j2, self.a2 = self._slices(rep, self.s2)

    @staticmethod
    def _slices(rep: ValueRep, s):
        pos = rep.N * np.sqrt(s / rep.T)
        j = np.minimum(np.floor(pos).astype(np.int64), rep.N - 1)
        a = pos - j
        low = pos < 1.0
        j[low], a[low] = 1, 0.0
        return j, a

    @staticmethod
    def _gather(layer, corners, j, a):
        idx, wts = corners
        jj = j[:, None, None, None]
        vals = (1 - a[:, None, None, None, None]) * layer[jj, idx] + a[:, None, None, None, None] * layer[jj + 1, idx]
        return np.sum(wts[..., None] * vals, axis=3)

    def convolution(self, rep: ValueRep, prob: ControlProblem, alpha: float) -> np.ndarray:
        m = rep.fbar.shape[2]
        fb1 = self._gather(rep.fbar, self.c1, self.j1, self.a1) / np.sqrt(self.s1)[:, None, None, None]
        psi = h_min(fb1, prob)
        part1 = np.einsum("q,qgp,qp,qpaj->gaj", self.w1, psi, self.W1, self.S1)
        G, n = rep.fbar2.shape[1], rep.fbar2.shape[2]
        F2 = rep.fbar2.reshape(rep.N + 1, G, n * m)
        fb2 = self._gather(rep.fbar, self.c2, self.j2, self.a2) / np.sqrt(self.s2)[:, None, None, None]
        dH = argmin_u(fb2, prob)  # (Q,G',P,m)
        h2 = self._gather(F2, self.c2, self.j2, self.a2).reshape(dH.shape[:-1] + (n, m))
        gradpsi = np.einsum("qgpam,qgpm->qgpa", h2, dH) * (self.s2 ** -alpha)[:, None, None, None]
        part2 = np.einsum("q,qgpa,qp,qpj->gaj", self.w2, gradpsi, self.W2, self.K2)
        return part1 + part2


def _terminal_second(prob: ControlProblem, t: float, pts, sys: DelaySystem, regular: bool, route: str):
    from .gaussian_calculus import hessB_Rt, hessB_Rt_bounded
    if not regular:
        return hessB_Rt_bounded(prob.phi, t, pts, sys)
    if route == "nablaB":
        return hessB_Rt(prob.phi, t, pts, sys)
    # B-derivative of the gradient: E[hess phibar(y + Z)] (e^{tA}B)_0
    rule = rule_for(t, sys)
    H = prob.phi.hess(pts[:, None, :] + rule.z)  # (G,P,n,n)
    return np.einsum("gpab,p,bj->gaj", H, rule.w, etAB_first(t, sys))


@dataclass
class Sigma2Report:
    alpha: float
    iterations: int
    change: float
    sup_norm: float
    rate_ok: bool


def sigma2_layers(rep: ValueRep, prob: ControlProblem, sys: DelaySystem, regular: Optional[bool] = None,
                  route: str = "nablaB", nodes: Optional[int] = None, tol: float = 1e-10,
                  max_iter: int = 60):
    """fbar2(t, y) = t^alpha nabla^2 f(t, y) (e^{tA}B)_0 on the solved grid.

    ``regular`` selects alpha = 1/2 (phibar with bounded gradient) or alpha = 1
    (bounded phibar).  ``route`` picks how the terminal part is formed:
    'nablaB' differentiates the B-derivative kernel, 'Bnabla' takes the
    B-derivative of the gradient through the Hessian of phibar.
    """
    if prob.ell0.state_dependent:
        raise InvalidInput("second-derivative layers support time-only running costs")
    regular = prob.phi.smooth if regular is None else regular
    if regular and not prob.phi.smooth:
        raise InvalidInput("alpha = 1/2 needs a terminal cost with bounded gradient")
    if route not in ("nablaB", "Bnabla"):
        raise InvalidInput("route must be 'nablaB' or 'Bnabla'")
    alpha = 0.5 if regular else 1.0
    nodes = nodes or {1: 24, 2: 10}.get(sys.n, 6)
    pts = rep.grid.points
    N, G = rep.N, rep.grid.G
    out = rep.copy()
    term = np.zeros((N + 1, G, sys.n, sys.m))
    slices = {}
    for i in range(1, N + 1):
        t = rep.t[i]
        term[i] = t ** alpha * _terminal_second(prob, t, pts, sys, regular, route)
        slices[i] = _Sigma2Slice(t, pts, rep, sys, nodes)
    out.fbar2 = term.copy()
    change, it = np.inf, 0
    while change > tol and it < max_iter:
        it += 1
        new = term.copy()
        for i in range(1, N + 1):
            new[i] += rep.t[i] ** alpha * slices[i].convolution(out, prob, alpha)
        change = float(np.max(np.abs(new - out.fbar2)))
        out.fbar2 = new
    sup = float(np.max(np.abs(out.fbar2)))
    report = Sigma2Report(alpha, it, change, sup, bool(np.isfinite(sup)))
    return out, report


def sigma2_at(rep: ValueRep, prob: ControlProblem, sys: DelaySystem, tau: float, pts,
              regular: bool, nodes: Optional[int] = None) -> np.ndarray:
    """nabla nabla^B v(T - tau) (reduced n x m form) at points, off the time grid.

    Uses the terminal part at tau directly and the convolution against the
    layers stored in ``rep`` (which must carry fbar2).
    """
    if tau <= 0:
        raise TerminalSingularity("second derivative at the terminal time")
    if rep.fbar2 is None:
        raise InvalidInput("compute sigma2_layers first")
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    nodes = nodes or {1: 24, 2: 10}.get(sys.n, 6)
    alpha = 0.5 if regular else 1.0
    sl = _Sigma2Slice(tau, pts, rep, sys, nodes)
    return _terminal_second(prob, tau, pts, sys, regular, "nablaB") + sl.convolution(rep, prob, alpha)


def second_derivative_blowup(rep: ValueRep, prob: ControlProblem, sys: DelaySystem, count: int = 12):
    """Fit the slope of log ||nabla nabla^B v(T - tau, y)|| against log tau for
    tau in [1e-4, 1e-1] T, with y one standard deviation of N(0, Q0_tau) away
    from 0 along the first eigen-direction (bounded, non-smooth phibar)."""
    from .gaussian_calculus import blowup_times, compute_Q0, fit_slope
    taus = blowup_times(rep.T, count)
    norms = []
    for tau in taus:
        rc = compute_Q0(tau, sys)
        y = rc.eigvecs[:, -1] * np.sqrt(rc.eigvals[-1])
        M = sigma2_at(rep, prob, sys, tau, y[None, :], regular=False)[0]
        norms.append(np.linalg.norm(M, 2))
    norms = np.array(norms)
    return taus, norms, fit_slope(taus, norms)
