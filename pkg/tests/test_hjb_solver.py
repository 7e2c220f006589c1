import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayhjb import functions as F
from delayhjb.errors import ConvergenceFailure, InvalidInput, TerminalSingularity
from delayhjb.hamiltonian import (ControlProblem, box, constant_control_cost, finite, quadratic_cost,
                                  zero_control_cost)
from delayhjb.hjb_solver import (BoxGrid, PicardSolver, SolverGrids, beta_quadrature, eval_gradB_v, eval_v,
                                 feedback, picard_step, sigma2_layers, solve, terminal_layer, time_grid)
from delayhjb.system_model import DelaySystem, LiftedState, apply_B, embed_initial

SMALL = SolverGrids(time_steps=8, y_points=41, gh_nodes=12)


@pytest.fixture(scope="module")
def small_flagship(flagship_sys, flagship_prob):
    return solve(flagship_prob, flagship_sys, SMALL)


def bump_value(t, y, width=1.0):
    """E exp(-(y + Z)^2 / (2 w^2)), Z ~ N(0, t)."""
    s2 = width ** 2 + t
    return width / np.sqrt(s2) * np.exp(-0.5 * y ** 2 / s2)


class TestQuadrature:
    @settings(max_examples=40, deadline=None)
    @given(t=st.floats(1e-6, 1e3))
    def test_beta_identity(self, t):
        assert abs(beta_quadrature(t) - np.pi) < 1e-10

    def test_time_grid(self):
        t = time_grid(2.0, 4)
        np.testing.assert_allclose(t, [0.0, 0.125, 0.5, 1.125, 2.0])

    def test_box_grid_is_exact_on_multilinear(self):
        g = BoxGrid(2, 1.0, 5)
        vals = 1.0 + 2 * g.points[:, 0] - g.points[:, 1] + 0.5 * g.points[:, 0] * g.points[:, 1]
        q = np.array([[0.13, -0.71], [0.9, 0.2]])
        np.testing.assert_allclose(g.interp(vals, q), 1 + 2 * q[:, 0] - q[:, 1] + 0.5 * q[:, 0] * q[:, 1])

    def test_box_grid_clamps(self):
        g = BoxGrid(1, 1.0, 3)
        vals = g.points[:, 0] ** 2
        np.testing.assert_allclose(g.interp(vals, [[5.0], [-7.0]]), [1.0, 1.0])
        assert g.corners(np.array([[5.0], [0.0]]))[2] == 1

    def test_box_grid_needs_two_points(self):
        with pytest.raises(InvalidInput):
            BoxGrid(1, 1.0, 1)


class TestAnalyticFixedPoints:
    def test_constant_terminal_cost(self, flagship_sys):
        c, m0 = 2.0, 0.25
        prob = ControlProblem(box([-1.0], [1.0]), constant_control_cost(m0), F.constant(c), 1.0)
        rep, diag = solve(prob, flagship_sys, SMALL)
        assert diag.iterations <= 2
        assert diag.records[-1][3] < 1e-12
        expected = c + rep.t[:, None] * m0
        assert np.max(np.abs(rep.f - expected)) < 1e-12
        # the Gaussian kernel has mean zero, so fbar vanishes up to round-off
        assert np.max(np.abs(rep.fbar)) < 1e-15

    def test_terminal_layer_gaussian_bump(self, flagship_sys):
        prob = ControlProblem(box([-1.0], [1.0]), zero_control_cost(), F.gaussian_bump(1), 1.0)
        rep = terminal_layer(prob, flagship_sys, SMALL)
        y = rep.grid.points[:, 0]
        for i in (1, 4, 8):
            np.testing.assert_allclose(rep.f[i], bump_value(rep.t[i], y), atol=1e-10)

    def test_zero_hamiltonian_with_time_cost(self, flagship_sys):
        a, b, T = 0.4, -0.3, 1.0
        prob = ControlProblem(finite([[0.0]]), zero_control_cost(), F.gaussian_bump(1), T,
                              F.time_linear_cost(a, b, T))
        rep, diag = solve(prob, flagship_sys, SMALL)
        t = rep.t[:, None]
        y = rep.grid.points[:, 0][None, :]
        # int_0^t l0(T - s) ds with l0(r) = a + b r
        running = a * t + b * (T * t - 0.5 * t ** 2)
        np.testing.assert_allclose(rep.f, bump_value(t, y) + running, atol=1e-10)

    def test_sanity_bound_and_constants(self, small_flagship):
        rep, diag = small_flagship
        assert diag.sup_f <= diag.sanity_bound
        assert diag.C_T == pytest.approx(diag.sup_f / 1.0)
        assert diag.beta_residual < 1e-10
        assert np.all(np.isfinite(rep.fbar))


class TestPicard:
    def test_fixed_point_residual(self, flagship_sys, flagship_prob, small_flagship):
        rep, diag = small_flagship
        solver = PicardSolver(flagship_prob, flagship_sys, SMALL)
        again = solver.step(rep)
        dist = solver.distance(again, rep, diag.eta, range(1, rep.N + 1))
        assert dist < 10 * 1e-7

    def test_contraction_ratios(self, small_flagship):
        ratios = small_flagship[1].final_ratios()
        assert ratios and all(max(r) < 1.0 for r in ratios.values())

    def test_uniqueness_from_zero_guess(self, flagship_sys, flagship_prob, small_flagship):
        rep, _ = small_flagship
        rep0, diag0 = solve(flagship_prob, flagship_sys, SMALL, init="zero")
        assert diag0.init == "zero"
        assert np.max(np.abs(rep0.f - rep.f)) < 10 * 1e-7
        assert np.max(np.abs(rep0.fbar - rep.fbar)) < 10 * 1e-7

    def test_monotone_comparison(self, flagship_sys, flagship_prob, small_flagship):
        # tanh(y) <= tanh(y + 1/2) pointwise
        phi2 = F.tanh(1, shift=0.5)
        assert np.all(flagship_prob.phi(small_flagship[0].grid.points) <= phi2(small_flagship[0].grid.points))
        prob2 = ControlProblem(flagship_prob.U, flagship_prob.ell1, phi2, 1.0)
        rep2, _ = solve(prob2, flagship_sys, SMALL)
        # clamping at the box edge perturbs the outermost nodes by O(1e-8)
        inner = np.abs(rep2.grid.points[:, 0]) <= rep2.grid.Y - 3.0
        assert np.all(small_flagship[0].f[:, inner] <= rep2.f[:, inner] + 1e-12)

    def test_picard_step_helper(self, flagship_sys, flagship_prob):
        cur = terminal_layer(flagship_prob, flagship_sys, SMALL)
        nxt = picard_step(cur, flagship_prob, flagship_sys, SMALL)
        assert nxt.f.shape == cur.f.shape
        # a nonzero Hamiltonian lowers the value below the terminal layer
        assert np.all(nxt.f[1:] <= cur.f[1:] + 1e-12)

    def test_convergence_failure_carries_diagnostics(self, flagship_sys, flagship_prob):
        with pytest.raises(ConvergenceFailure) as err:
            solve(flagship_prob, flagship_sys, SMALL, max_iter=2, tol=1e-14)
        assert err.value.diagnostics is not None
        assert len(err.value.diagnostics.records) >= 2

    def test_grid_refinement(self, flagship_sys, flagship_prob):
        vals = []
        for points in (21, 41, 81):
            rep, _ = solve(flagship_prob, flagship_sys,
                           SolverGrids(time_steps=8, y_points=points, gh_nodes=12))
            vals.append(float(rep.f_at(1.0, [0.0])))
        first, second = abs(vals[1] - vals[0]), abs(vals[2] - vals[1])
        assert second < first


class TestModes:
    def test_mode_a_rejects_state_cost(self, flagship_sys, flagship_prob):
        prob = ControlProblem(flagship_prob.U, flagship_prob.ell1, flagship_prob.phi, 1.0,
                              F.state_cost(F.gaussian_bump(1)))
        with pytest.raises(InvalidInput):
            solve(prob, flagship_sys, SMALL, mode="A")
        rep, diag = solve(prob, flagship_sys, SMALL, mode="B")
        assert diag.mode == "B" and np.all(np.isfinite(rep.f))

    def test_bad_mode_and_dimensions(self, flagship_sys, flagship_prob, double_integrator):
        with pytest.raises(InvalidInput):
            solve(flagship_prob, flagship_sys, SMALL, mode="C")
        with pytest.raises(InvalidInput):
            solve(flagship_prob, double_integrator, SMALL)
        with pytest.raises(InvalidInput):
            solve(flagship_prob, flagship_sys, SMALL, tol=0.0)


class TestEvaluation:
    def test_terminal_time(self, flagship_sys, small_flagship):
        rep, _ = small_flagship
        x = embed_initial([0.3], np.zeros(flagship_sys.npts - 1), flagship_sys)
        assert eval_v(rep, 1.0, x, flagship_sys) == pytest.approx(np.tanh(0.3))

    def test_constant_problem(self, flagship_sys):
        c, m0 = -1.0, 0.5
        prob = ControlProblem(box([-1.0], [1.0]), constant_control_cost(m0), F.constant(c), 2.0)
        rep, _ = solve(prob, flagship_sys, SMALL)
        x = embed_initial([0.7], np.full(flagship_sys.npts - 1, 0.4), flagship_sys)
        for t in (0.0, 0.3, 1.7, 2.0):
            assert eval_v(rep, t, x, flagship_sys) == pytest.approx(c + (2.0 - t) * m0, abs=1e-12)

    def test_gradB_matches_finite_differences(self, flagship_sys, flagship_prob):
        rep, _ = solve(flagship_prob, flagship_sys, SolverGrids(time_steps=8, y_points=161, gh_nodes=12))
        sys = flagship_sys
        x = embed_initial([0.2], np.full(sys.npts - 1, -0.5), sys)
        Bk = apply_B([1.0], sys)
        eps = 0.05
        for t in (0.0, 0.5):
            fd = (eval_v(rep, t, x + eps * Bk, sys) - eval_v(rep, t, x - eps * Bk, sys)) / (2 * eps)
            g = float(eval_gradB_v(rep, t, x, sys)[0])
            assert g == pytest.approx(fd, rel=1e-2)

    def test_terminal_singularity(self, flagship_sys):
        prob = ControlProblem(box([-1.0], [1.0]), zero_control_cost(), F.sign(1), 1.0)
        rep = terminal_layer(prob, flagship_sys, SMALL)
        x = LiftedState.zero(flagship_sys)
        with pytest.raises(TerminalSingularity):
            eval_gradB_v(rep, 1.0, x, flagship_sys)
        with pytest.raises(TerminalSingularity):
            feedback(rep, prob, 0.0, [0.0])

    def test_time_out_of_range(self, flagship_sys, small_flagship):
        with pytest.raises(InvalidInput):
            eval_v(small_flagship[0], 1.5, LiftedState.zero(flagship_sys), flagship_sys)

    def test_feedback_is_bang_bang(self, small_flagship, flagship_prob):
        u = feedback(small_flagship[0], flagship_prob, 1.0, np.array([[0.0], [1.0], [-1.0]]))
        assert set(np.round(u[:, 0], 12)) <= {-1.0, 1.0}


class TestSecondDerivatives:
    def test_constant_terminal_gives_zero(self, flagship_sys):
        prob = ControlProblem(box([-1.0], [1.0]), zero_control_cost(), F.constant(1.0), 1.0)
        rep, _ = solve(prob, flagship_sys, SMALL)
        out, report = sigma2_layers(rep, prob, flagship_sys)
        assert np.max(np.abs(out.fbar2)) < 1e-15
        assert report.alpha == 0.5

    def test_routes_agree_for_smooth_hamiltonian(self, flagship_sys):
        prob = ControlProblem(box([-1.0], [1.0]), quadratic_cost([[1.0]]), F.gaussian_bump(1), 1.0)
        rep, _ = solve(prob, flagship_sys, SMALL)
        a, ra = sigma2_layers(rep, prob, flagship_sys, route="nablaB")
        b, rb = sigma2_layers(rep, prob, flagship_sys, route="Bnabla")
        assert np.max(np.abs(a.fbar2 - b.fbar2)) < 1e-6
        assert ra.change < 1e-10

    def test_argument_checks(self, flagship_sys):
        prob = ControlProblem(box([-1.0], [1.0]), zero_control_cost(), F.sign(1), 1.0)
        rep = terminal_layer(prob, flagship_sys, SMALL)
        with pytest.raises(InvalidInput):
            sigma2_layers(rep, prob, flagship_sys, regular=True)
        with pytest.raises(InvalidInput):
            sigma2_layers(rep, prob, flagship_sys, route="other")
        with pytest.raises(InvalidInput):
            rep.fbar2_at(0.5, [0.0])
