"""Closed-loop simulation, Monte Carlo costs and a lag-chain dynamic-programming oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline

from .errors import InvalidInput, OracleTooLarge
from .gaussian_calculus import gauss_legendre, q0_matrix
from .hamiltonian import ControlProblem, argmin_u
from .hjb_solver import ValueRep
from .system_model import DelaySystem, history_operator

ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class SimConfig:
    paths: int = 1000
    seed: int = 0
    antithetic: bool = True
    scheme: str = "euler_maruyama"

    def __post_init__(self):
        if self.paths < 1:
            raise InvalidInput("path count must be >= 1")
        if self.scheme != "euler_maruyama":
            raise InvalidInput("only the Euler-Maruyama scheme is available")


@dataclass
class SimResult:
    times: np.ndarray        # (steps + 1,)
    y: np.ndarray            # (paths, steps + 1, n)
    u: np.ndarray            # (paths, steps, m)
    running: np.ndarray      # (paths,)
    terminal: np.ndarray     # (paths,)
    antithetic: bool

    @property
    def cost(self) -> np.ndarray:
        return self.running + self.terminal


def _history(u_hist, sys: DelaySystem) -> np.ndarray:
    N = sys.npts - 1
    u = np.zeros((N, sys.m)) if u_hist is None else np.asarray(u_hist, dtype=float)
    if u.ndim == 1 and sys.m == 1:
        u = u[:, None]
    if u.shape == (N + 1, sys.m):
        u = u[:N]
    if u.shape != (N, sys.m):
        raise InvalidInput(f"initial control history must have shape ({N}, {sys.m})")
    return u


def _steps(sys: DelaySystem, T: float) -> int:
    k = T / sys.h
    steps = int(round(k))
    if steps < 1 or abs(k - steps) > ALIGN_TOL * max(1.0, k):
        raise InvalidInput(f"horizon {T} is not a multiple of the kernel grid step {sys.h}")
    return steps


def _increments(cfg: SimConfig, steps: int, k: int, dt: float) -> np.ndarray:
    """Brownian increments (paths, steps, k); pair j shares one generator seeded by (seed, j)."""
    out = np.empty((cfg.paths, steps, k))
    if cfg.antithetic:
        for j in range((cfg.paths + 1) // 2):
            dw = np.random.default_rng([cfg.seed, j]).standard_normal((steps, k)) * np.sqrt(dt)
            out[2 * j] = dw
            if 2 * j + 1 < cfg.paths:
                out[2 * j + 1] = -dw
    else:
        for j in range(cfg.paths):
            out[j] = np.random.default_rng([cfg.seed, j]).standard_normal((steps, k)) * np.sqrt(dt)
    return out


Policy = Callable[[int, float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def simulate_policy(sys: DelaySystem, prob: ControlProblem, policy: Policy, y0, u_hist=None,
                    cfg: SimConfig = SimConfig(), freeze_last: bool = False) -> SimResult:
    """Euler-Maruyama for the delayed SDE with step equal to the kernel grid step.

    ``policy(i, tau, y, y_red, past)`` returns controls (paths, m) at step i,
    with tau the remaining time, y the current states, y_red the reduced
    coordinates (e^{tau A} Y)_0 and past the control buffer (paths, N, m).
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if y0.shape != (sys.n,):
        raise InvalidInput(f"y0 must have length {sys.n}")
    T, h, N = prob.T, sys.h, sys.npts - 1
    steps = _steps(sys, T)
    P = cfg.paths
    dW = _increments(cfg, steps, sys.k, h)
    ctrl = np.zeros((P, N + steps, sys.m))
    ctrl[:, :N] = _history(u_hist, sys)
    y = np.zeros((P, steps + 1, sys.n))
    y[:, 0] = y0
    wb1 = sys.trapz_weights[:, None, None] * sys.b1  # (npts, n, m)
    for i in range(steps):
        tau = T - i * h
        past = ctrl[:, i:i + N]
        if freeze_last and i == steps - 1 and i > 0:
            u = ctrl[:, i + N - 1].copy()
        else:
            U = np.concatenate([past, past[:, -1:]], axis=1)
            y_red = y[:, i] @ sys.expm(tau).T + np.einsum("aqm,pqm->pa", history_operator(tau, sys), U)
            u = np.asarray(policy(i, tau, y[:, i], y_red, past), dtype=float).reshape(P, sys.m)
        if not np.all(prob.U.contains(u)):
            raise InvalidInput("policy returned a control outside U")
        ctrl[:, i + N] = u
        delay = np.einsum("kam,pkm->pa", wb1[:N], past) + u @ wb1[N].T
        drift = y[:, i] @ sys.a0.T + u @ sys.b0.T + delay
        y[:, i + 1] = y[:, i] + drift * h + dW[:, i] @ sys.sigma.T
    times = h * np.arange(steps + 1)
    u_path = ctrl[:, N:]
    l0 = prob.ell0(times[None, :], y)  # (P, steps+1)
    running = h * (0.5 * (l0[:, 0] + l0[:, -1]) + l0[:, 1:-1].sum(axis=1))
    running = running + h * prob.ell1(u_path).sum(axis=1)
    terminal = prob.phi(y[:, -1])
    return SimResult(times, y, u_path, running, terminal, cfg.antithetic)


def feedback_policy(rep: ValueRep, prob: ControlProblem) -> Policy:
    def policy(i, tau, y, y_red, past):
        return argmin_u(rep.gradB_reduced(tau, y_red), prob)
    return policy


def constant_policy(u, m: int) -> Policy:
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(m)

    def policy(i, tau, y, y_red, past):
        return np.broadcast_to(u, (y.shape[0], m)).copy()
    return policy


def simulate_closed_loop(sys: DelaySystem, prob: ControlProblem, rep: ValueRep, y0, u_hist=None,
                         cfg: SimConfig = SimConfig()) -> SimResult:
    """Feedback u = argmin H_CV(nabla^B v; u), frozen over the last step."""
    return simulate_policy(sys, prob, feedback_policy(rep, prob), y0, u_hist, cfg, freeze_last=True)


def mc_cost(res: SimResult):
    """(mean, standard error); antithetic pairs are averaged before the error estimate."""
    c = res.cost
    if res.antithetic and c.size >= 2:
        pairs = c[: 2 * (c.size // 2)].reshape(-1, 2).mean(axis=1)
        samples = pairs if c.size % 2 == 0 else np.append(pairs, c[-1])
    else:
        samples = c
    mean = float(c.mean())
    if samples.size < 2:
        return mean, 0.0
    return mean, float(samples.std(ddof=1) / np.sqrt(samples.size))


# --------------------------------------------------------------------------
# lag-chain oracle


@dataclass(frozen=True)
class OracleConfig:
    order: int = 4            # lag stages L; step = d / L
    y_points: int = 64
    control_points: int = 3
    gh_nodes: int = 20
    half_width: Optional[float] = None
    refine_order: Optional[int] = 8

    def __post_init__(self):
        if self.order < 1 or self.y_points < 2 or self.control_points < 2 and self.control_points != 1:
            raise InvalidInput("oracle resolutions must be >= 2")


MAX_ORDER, MAX_GRID = 8, 64


@dataclass
class OracleResult:
    value: float
    error_bar: float
    policy: np.ndarray       # (steps, y_points, histories) indices into controls
    controls: np.ndarray     # (q, 1)
    y_grid: np.ndarray
    step: float
    order: int
    refined_value: Optional[float] = None


def _control_grid(prob: ControlProblem, q: int) -> np.ndarray:
    U = prob.U
    if U.kind == "finite":
        return U.points[:, :1]
    if U.kind == "box":
        return np.linspace(U.lo[0], U.hi[0], q)[:, None]
    if U.kind == "ball":
        c = U.center[0]
        return np.linspace(c - U.radius, c + U.radius, q)[:, None]
    raise InvalidInput("the oracle needs a bounded control set")


def lag_weights(sys: DelaySystem, delta: float, L: int) -> np.ndarray:
    """c_j (j = 0..L): contribution to y(t + delta) of the control held on the j-th
    previous stage (j = 0 is the current control, which also carries b0)."""
    a0, xi = sys.a0[0, 0], sys.xi
    b1 = sys.b1[:, 0, 0]
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (b1[1:] + b1[:-1]) * np.diff(xi))])

    def B(x):  # int_{-d}^x b1, exact for the piecewise-linear kernel
        x = np.clip(x, -sys.d, 0.0)
        k = np.clip(np.searchsorted(xi, x, side="right") - 1, 0, xi.size - 2)
        fr = x - xi[k]
        slope = (b1[k + 1] - b1[k]) / (xi[k + 1] - xi[k])
        return cum[k] + b1[k] * fr + 0.5 * slope * fr ** 2

    r, w = gauss_legendre(0.0, delta, 16, 4)
    decay = np.exp(a0 * (delta - r))
    c = np.zeros(L + 1)
    for j in range(L + 1):
        hi = np.minimum(0.0, -j * delta + delta - r)
        lo = np.maximum(-sys.d, -j * delta - r)
        c[j] = w @ (decay * np.where(hi > lo, B(hi) - B(lo), 0.0))
    c[0] += w @ decay * sys.b0[0, 0]
    return c


def _snap_history(u_hist, sys: DelaySystem, L: int, controls: np.ndarray) -> np.ndarray:
    """Stage averages of u0 on [-l delta, -(l-1) delta), l = 1..L, as control-grid indices."""
    u = _history(u_hist, sys)[:, 0]
    N = sys.npts - 1
    if N % L:
        raise InvalidInput(f"kernel grid ({N} cells) is not divisible by the lag order {L}")
    stages = u.reshape(L, N // L).mean(axis=1)[::-1]  # l = 1 is the most recent
    idx = np.argmin(np.abs(stages[:, None] - controls[None, :, 0]), axis=1)
    if np.max(np.abs(controls[idx, 0] - stages)) > 1e-9:
        raise InvalidInput("initial history must lie on the oracle control grid")
    return idx


def _solve_chain(sys: DelaySystem, prob: ControlProblem, L: int, ocfg: OracleConfig, y0: float,
                 hist_idx: np.ndarray):
    controls = _control_grid(prob, ocfg.control_points)
    q = controls.shape[0]
    H = q ** L
    if L > MAX_ORDER or ocfg.y_points > MAX_GRID or q > MAX_GRID:
        raise OracleTooLarge(f"lag order {L} / grid {ocfg.y_points} / controls {q} exceed the oracle limits "
                             f"({MAX_ORDER}, {MAX_GRID})")
    delta = sys.d / L
    T = prob.T
    steps = int(round(T / delta))
    if abs(steps * delta - T) > ALIGN_TOL * T:
        raise InvalidInput(f"horizon {T} is not a multiple of the stage length {delta}")
    c = lag_weights(sys, delta, L)
    ea = float(np.exp(sys.a0[0, 0] * delta))
    var = float(q0_matrix(delta, sys)[0, 0])
    x, wg = hermegauss(ocfg.gh_nodes)
    wg = wg / np.sqrt(2 * np.pi)
    noise = np.sqrt(var) * x
    # grid: y0 +/- (6 sd over [0,T] + worst-case drift)
    umax = float(np.max(np.abs(controls)))
    spread = np.sqrt(float(q0_matrix(T, sys)[0, 0]))
    drift = umax * T * (abs(sys.b0[0, 0]) + sys.trapz_weights @ np.abs(sys.b1[:, 0, 0]))
    drift *= max(1.0, float(np.exp(abs(sys.a0[0, 0]) * T)))
    Y = ocfg.half_width or 6.0 * spread + drift + 1.0
    yg = y0 + np.linspace(-Y, Y, ocfg.y_points)
    # histories: digits (h_1..h_L) base q, h_1 most recent
    digits = (np.arange(H)[:, None] // q ** np.arange(L)[None, :]) % q  # (H, L)
    past_u = controls[digits, 0]                                         # (H, L)
    hist_drift = past_u @ c[1:]                                          # (H,)
    # next history after applying control index a: (a, h_1..h_{L-1})
    nxt = (np.arange(q)[:, None] + q * (np.arange(H)[None, :] % q ** (L - 1)))  # (q, H)
    l1 = prob.ell1(controls)
    V = np.broadcast_to(prob.phi(yg)[:, None], (yg.size, H)).copy()
    policy = np.zeros((steps, yg.size, H), dtype=np.int16)
    for i in range(steps - 1, -1, -1):
        spline = CubicSpline(yg, V, axis=0)
        coef = spline.c  # (4, Ny-1, H)
        Q = np.empty((q, yg.size, H))
        for a in range(q):
            mean = ea * yg[:, None] + c[0] * controls[a, 0] + hist_drift[None, :]   # (Ny, H)
            pts = np.clip(mean[..., None] + noise, yg[0], yg[-1])                   # (Ny, H, G)
            k = np.clip(np.searchsorted(yg, pts, side="right") - 1, 0, yg.size - 2)
            dx = pts - yg[k]
            col = np.broadcast_to(nxt[a][None, :, None], pts.shape)
            val = ((coef[0, k, col] * dx + coef[1, k, col]) * dx + coef[2, k, col]) * dx + coef[3, k, col]
            run = delta * (prob.ell0(i * delta, yg[:, None]) + l1[a])
            Q[a] = run[:, None] * np.ones((1, H)) + val @ wg
        best = np.argmin(Q, axis=0)
        policy[i] = best
        V = np.take_along_axis(Q, best[None], 0)[0]
    col0 = int(np.sum(hist_idx * q ** np.arange(L)))
    value = float(CubicSpline(yg, V[:, col0])(y0))
    return value, policy, controls, yg, delta


def lag_chain_oracle(sys: DelaySystem, prob: ControlProblem, ocfg: OracleConfig = OracleConfig(),
                     y0=0.0, u_hist=None) -> OracleResult:
    """Backward DP on (y, last L stage controls) with exact Gaussian stage transitions."""
    if sys.n != 1 or sys.m != 1:
        raise OracleTooLarge("the lag-chain oracle handles n = m = 1 only")
    y0 = float(np.atleast_1d(y0)[0])
    controls = _control_grid(prob, ocfg.control_points)
    idx = _snap_history(u_hist, sys, ocfg.order, controls)
    value, policy, controls, yg, delta = _solve_chain(sys, prob, ocfg.order, ocfg, y0, idx)
    refined, err = None, float("nan")
    if ocfg.refine_order:
        ridx = _snap_history(u_hist, sys, ocfg.refine_order, controls)
        refined = _solve_chain(sys, prob, ocfg.refine_order, ocfg, y0, ridx)[0]
        err = abs(refined - value)
    return OracleResult(value, err, policy, controls, yg, delta, ocfg.order, refined)


@dataclass
class GapReport:
    gap: float
    mc_mean: float
    mc_se: float
    oracle_value: float
    oracle_error: float


def policy_gap(sys: DelaySystem, prob: ControlProblem, rep: ValueRep, ocfg: OracleConfig, y0, u_hist=None,
               cfg: SimConfig = SimConfig(), oracle: Optional[OracleResult] = None) -> GapReport:
    """|mc_cost(feedback) - oracle| / (|oracle| + 1)."""
    oracle = oracle or lag_chain_oracle(sys, prob, ocfg, y0, u_hist)
    mean, se = mc_cost(simulate_closed_loop(sys, prob, rep, y0, u_hist, cfg))
    gap = abs(mean - oracle.value) / (abs(oracle.value) + 1.0)
    return GapReport(gap, mean, se, oracle.value, oracle.error_bar)
