import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from delayhjb import functions as F
from delayhjb.errors import ControllabilityFailure, ImageInclusionViolated, InvalidInput
from delayhjb.gaussian_calculus import (GaussianRule, apply_Rt, bnorm, cameron_martin_density, check_hypotheses,
                                        compute_Q0, fit_slope, gauss_legendre, grad_Rt, grad_Rt_reduced,
                                        gradB_Rt, hessB_Rt, hessB_Rt_bounded, in_image, kalman_exponent,
                                        minimal_energy_control, numerical_rank, q0_matrix, rule_for)
from delayhjb.system_model import DelaySystem, LiftedState, embed_initial, etAB_first, first_component


def scalar_sys(a0=-0.7, sigma=0.8, d=0.5, b1=1.0):
    return DelaySystem.build(a0, 1.0, sigma, d, b1=b1)


class TestCovariance:
    @pytest.mark.parametrize("t", [0.05, 0.5, 2.0])
    def test_scalar_ou_closed_form(self, t):
        a, s = -0.7, 0.8
        q = q0_matrix(t, scalar_sys(a, s))
        assert q[0, 0] == pytest.approx(s * s * (np.exp(2 * a * t) - 1) / (2 * a), rel=1e-12)

    @pytest.mark.parametrize("t", [0.1, 1.0, 3.0])
    def test_double_integrator_closed_form(self, double_integrator, t):
        exact = np.array([[t ** 3 / 3, t ** 2 / 2], [t ** 2 / 2, t]])
        np.testing.assert_allclose(q0_matrix(t, double_integrator), exact, rtol=1e-12)

    def test_nonzero_a0_path_matches_closed_form_for_nilpotent(self):
        # a tiny diagonal perturbation forces the quadrature branch
        sys = DelaySystem.build([[1e-14, 1.0], [0.0, 0.0]], [0.0, 1.0], [0.0, 1.0], 0.5)
        np.testing.assert_allclose(q0_matrix(1.0, sys), [[1 / 3, 1 / 2], [1 / 2, 1]], rtol=1e-9)

    def test_rank_deficient_sigma(self):
        sys = DelaySystem.build(np.zeros((2, 2)), [[1.0], [0.0]], [[1.0], [0.0]], 0.5)
        rc = compute_Q0(1.0, sys)
        assert rc.rank == 1 and not rc.invertible
        assert rc.range_residual([1.0, 0.0]) == 0.0
        with pytest.raises(ImageInclusionViolated):
            rc.inv_sqrt_apply(np.array([0.0, 1.0]))

    def test_inv_sqrt_apply(self, double_integrator):
        rc = compute_Q0(0.7, double_integrator)
        v = np.array([0.3, -1.2])
        a = rc.inv_sqrt_apply(v)
        np.testing.assert_allclose(rc.sqrt @ a, v, rtol=1e-10)

    def test_t_must_be_positive(self, flagship_sys):
        with pytest.raises(InvalidInput):
            q0_matrix(0.0, flagship_sys)


class TestRanks:
    def test_kalman_exponents(self, flagship_sys, double_integrator):
        assert kalman_exponent(flagship_sys) == 0
        assert kalman_exponent(double_integrator) == 1

    def test_kalman_absent(self):
        sys = DelaySystem.build(np.zeros((2, 2)), [1.0, 0.0], [1.0, 0.0], 0.5)
        with pytest.raises(ControllabilityFailure):
            kalman_exponent(sys)

    def test_numerical_rank_and_image(self):
        assert numerical_rank(np.zeros((2, 2))) == 0
        assert numerical_rank(np.array([[1.0, 2.0], [2.0, 4.0]])) == 1
        base = np.array([[1.0], [0.0]])
        assert in_image([[2.0], [0.0]], base)
        assert not in_image([[0.0], [1.0]], base)


class TestGaussianRule:
    def test_moments_full_rank(self):
        C = np.array([[2.0, 0.3], [0.3, 0.5]])
        rule = GaussianRule(C, 12)
        np.testing.assert_allclose(rule.w.sum(), 1.0, atol=1e-14)
        np.testing.assert_allclose(np.einsum("p,pi,pj->ij", rule.w, rule.z, rule.z), C, atol=1e-12)
        np.testing.assert_allclose(rule.w @ rule.z[:, 0] ** 4, 3 * C[0, 0] ** 2, rtol=1e-12)

    def test_degenerate_covariance(self):
        C = np.array([[1.0, 1.0], [1.0, 1.0]])
        rule = GaussianRule(C, 16)
        assert rule.rank == 1
        np.testing.assert_allclose(rule.z[:, 0], rule.z[:, 1])
        with pytest.raises(ImageInclusionViolated):
            rule.kernel(np.array([1.0, -1.0]))
        with pytest.raises(ControllabilityFailure):
            rule.full_kernel()

    def test_high_rank_uses_qmc(self):
        C = np.diag([1.0, 2.0, 0.5, 1.5])
        rule = GaussianRule(C)
        assert rule.z.shape == (2 ** 15, 4)
        np.testing.assert_allclose(np.einsum("p,pi,pj->ij", rule.w, rule.z, rule.z), C, atol=2e-2)

    def test_stein_identity(self):
        # E[g(Z) C^{-1} Z] = E[grad g(Z)]
        C = np.array([[1.0, 0.4], [0.4, 0.8]])
        rule = GaussianRule(C, 24)
        g = np.sin(rule.z[:, 0]) * np.cos(rule.z[:, 1])
        grad = np.stack([np.cos(rule.z[:, 0]) * np.cos(rule.z[:, 1]),
                         -np.sin(rule.z[:, 0]) * np.sin(rule.z[:, 1])], axis=1)
        np.testing.assert_allclose((g * rule.w) @ rule.full_kernel(), rule.w @ grad, atol=1e-12)

    def test_rule_cache(self, flagship_sys):
        assert rule_for(0.3, flagship_sys) is rule_for(0.3, flagship_sys)


class TestSmoothing:
    def test_identity_at_zero(self, flagship_sys):
        phi = F.tanh(1)
        np.testing.assert_allclose(apply_Rt(phi, 0.0, 0.4, flagship_sys), np.tanh(0.4))

    @pytest.mark.parametrize("t", [0.01, 0.3, 1.0])
    def test_tanh_against_adaptive_quadrature(self, flagship_sys, t):
        y = 0.37
        ref = quad(lambda z: np.tanh(y + z) * np.exp(-z * z / (2 * t)) / np.sqrt(2 * np.pi * t),
                   -np.inf, np.inf, epsabs=1e-13)[0]
        # tanh has poles at +-i pi/2, so Gauss-Hermite converges geometrically but not spectrally fast
        assert float(apply_Rt(F.tanh(1), t, y, flagship_sys)) == pytest.approx(ref, abs=1e-6)
        assert float(apply_Rt(F.tanh(1), t, y, flagship_sys, nodes=128)) == pytest.approx(ref, abs=1e-11)

    def test_quadratic_moment(self, double_integrator):
        t, y = 0.8, np.array([0.3, -0.2])
        val = apply_Rt(F.quadratic(2), t, y, double_integrator)
        assert float(val) == pytest.approx(y @ y + np.trace(q0_matrix(t, double_integrator)), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(a=st.lists(st.floats(-3, 3), min_size=2, max_size=2),
           y=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
           t=st.floats(0.01, 2.0))
    def test_linear_is_invariant(self, a, y, t):
        sys = DelaySystem.build([[0.0, 1.0], [-1.0, -0.2]], [0.0, 1.0], [[0.3, 0.0], [0.0, 1.0]], 0.5)
        phi = F.linear(a, 0.25)
        assert float(apply_Rt(phi, t, y, sys, nodes=8)) == pytest.approx(np.dot(a, y) + 0.25, abs=1e-9)

    def test_sign_smoothing_is_erf(self, flagship_sys):
        from scipy.special import erf
        t, y = 0.2, 0.1
        assert float(apply_Rt(F.sign(1), t, y, flagship_sys, nodes=200)) == pytest.approx(
            erf(y / np.sqrt(2 * t)), abs=5e-3)


class TestDerivatives:
    def test_gradB_of_linear(self, double_integrator):
        t, a = 0.6, np.array([1.5, -0.4])
        g = gradB_Rt(F.linear(a), t, [0.2, 0.1], double_integrator)
        np.testing.assert_allclose(g, a @ etAB_first(t, double_integrator), atol=1e-12)

    def test_grad_reduced_of_linear(self, double_integrator):
        a = np.array([1.5, -0.4])
        np.testing.assert_allclose(grad_Rt_reduced(F.linear(a), 0.6, [0.2, 0.1], double_integrator), a,
                                   atol=1e-10)

    @pytest.mark.parametrize("t", [0.05, 0.4, 1.0])
    def test_gradB_matches_finite_difference(self, flagship_sys, t):
        phi, y, eps = F.tanh(1), 0.3, 1e-5
        D = etAB_first(t, flagship_sys)[0, 0]
        for nodes, rel in ((32, 1e-4), (128, 1e-8)):
            fd = (apply_Rt(phi, t, y + eps * D, flagship_sys, nodes)
                  - apply_Rt(phi, t, y - eps * D, flagship_sys, nodes)) / (2 * eps)
            assert float(gradB_Rt(phi, t, y, flagship_sys, nodes)[0]) == pytest.approx(float(fd), rel=rel)

    def test_full_gradient_pairs_with_directional_derivative(self, flagship_sys):
        sys, phi, t = flagship_sys, F.tanh(1), 0.3
        x = embed_initial([0.2], np.full(sys.npts - 1, 0.5), sys)
        rng = np.random.default_rng(3)
        h = LiftedState(rng.normal(size=1), rng.normal(size=(sys.npts, 1)))
        g = grad_Rt(phi, t, x, sys)
        eps = 1e-5
        yp = first_component(t, x + eps * h, sys)
        ym = first_component(t, x - eps * h, sys)
        fd = float(apply_Rt(phi, t, yp, sys) - apply_Rt(phi, t, ym, sys)) / (2 * eps)
        pair = float(g.y0 @ h.y0 + sys.trapz_weights @ (g.y1 * h.y1).sum(axis=1))
        assert pair == pytest.approx(fd, rel=1e-3)

    def test_hessB_of_quadratic(self, double_integrator):
        t = 0.5
        M = hessB_Rt(F.quadratic(2), t, [0.3, -0.1], double_integrator)
        np.testing.assert_allclose(M, 2 * etAB_first(t, double_integrator), atol=1e-10)

    def test_bounded_route_agrees_for_smooth_phi(self, flagship_sys):
        phi, t, y = F.gaussian_bump(1), 0.4, 0.2
        np.testing.assert_allclose(hessB_Rt(phi, t, y, flagship_sys),
                                   hessB_Rt_bounded(phi, t, y, flagship_sys), atol=1e-10)

    def test_derivatives_need_positive_t(self, flagship_sys):
        with pytest.raises(InvalidInput):
            gradB_Rt(F.tanh(1), 0.0, 0.0, flagship_sys)

    def test_grad_needs_invertible_q(self):
        sys = DelaySystem.build(np.zeros((2, 2)), [[1.0], [0.0]], [[1.0], [0.0]], 0.5)
        with pytest.raises(ControllabilityFailure):
            grad_Rt_reduced(F.quadratic(2), 0.5, [0.0, 0.0], sys)

    def test_gradB_outside_range(self):
        sys = DelaySystem.build(np.zeros((2, 2)), [[0.0], [1.0]], [[1.0], [0.0]], 0.5)
        with pytest.raises(ImageInclusionViolated):
            gradB_Rt(F.quadratic(2), 0.5, [0.0, 0.0], sys)


class TestCameronMartin:
    def test_density_has_unit_mean(self, flagship_sys):
        rule = rule_for(0.4, flagship_sys)
        dens = cameron_martin_density(0.2, 0.4, [0.7], rule.z, flagship_sys)
        assert float(rule.w @ dens) == pytest.approx(1.0, abs=1e-12)

    def test_density_shifts_mean(self, flagship_sys):
        rule = rule_for(0.4, flagship_sys)
        dens = cameron_martin_density(0.2, 0.4, [0.7], rule.z, flagship_sys)
        mu = etAB_first(0.2, flagship_sys)[0, 0] * 0.7
        assert float(rule.w @ (dens * rule.z[:, 0])) == pytest.approx(mu, abs=1e-12)


class TestSteering:
    @pytest.mark.parametrize("t", [0.1, 0.5, 1.3])
    def test_bnorm_closed_form(self, flagship_sys, t):
        assert bnorm(t, flagship_sys) == pytest.approx((1 + min(t, 0.5)) / np.sqrt(t), rel=1e-10)

    @pytest.mark.parametrize("mode", ["combinedInclusion", "densityInclusion"])
    @pytest.mark.parametrize("t", [0.2, 0.5, 1.2])
    def test_flagship_steering(self, flagship_sys, mode, t):
        ctl = minimal_energy_control(t, [1.0], flagship_sys, mode)
        assert ctl.residual < 1e-10

    def test_minimal_energy(self, double_integrator):
        t = 0.7
        ctl = minimal_energy_control(t, [1.0], double_integrator)
        assert ctl.residual < 1e-10
        assert ctl.energy == pytest.approx(bnorm(t, double_integrator) ** 2, rel=1e-10)

    def test_density_mode_needs_inclusion(self, double_integrator):
        with pytest.raises(ImageInclusionViolated):
            minimal_energy_control(0.5, [1.0], double_integrator, "densityInclusion")

    def test_unknown_mode(self, flagship_sys):
        with pytest.raises(InvalidInput):
            minimal_energy_control(0.5, [1.0], flagship_sys, "other")


class TestHypotheses:
    def test_double_integrator_report(self, double_integrator):
        rep = check_hypotheses(double_integrator, np.logspace(-4, -1, 12))
        assert rep.kalman_exponent == 1
        assert not rep.inclusion_hyp_A and not rep.inclusion_hyp_B and rep.inclusion_range
        assert rep.blowup_exponent == pytest.approx(-0.5, abs=0.05)
        assert "kalman_exponent: 1" in rep.summary()

    def test_flagship_report(self, flagship_sys):
        rep = check_hypotheses(flagship_sys, np.logspace(-4, -1, 12))
        assert rep.inclusion_hyp_A and rep.inclusion_hyp_B
        assert rep.blowup_exponent == pytest.approx(-0.5, abs=0.05)

    def test_bad_samples(self, flagship_sys):
        with pytest.raises(InvalidInput):
            check_hypotheses(flagship_sys, [0.0, 0.1])

    def test_fit_slope(self):
        ts = np.logspace(-3, 0, 9)
        assert fit_slope(ts, 3 * ts ** -1.5) == pytest.approx(-1.5)

    def test_gauss_legendre_exactness(self):
        x, w = gauss_legendre(0.0, 2.0, 5, 3)
        assert w @ x ** 9 == pytest.approx(2 ** 10 / 10, rel=1e-13)
