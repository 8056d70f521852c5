#!/usr/bin/env python3
"""
Tests for the closed-form optimal exploration: alpha, beta, the optimal law,
the HJB residual, the explicit optimal wealth and the Lagrange multiplier
"""

import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import RATE, W_HAT, canonical_model, run_script_tests
from jumpex.errors import (AdmissibilityError, DegenerateJumpError, DomainError, InputError, ModelValidationError,
                           UnsupportedCoefficientFamilyError)
from jumpex.exploratory_sde import SimConfig, gaussian_entropy, parse_law, simulate_exploratory
from jumpex.levy_model import (CoefficientField, ConstantCoefficients, CosineUField, Damping, JumpSpec,
                               MarketModel, ProportionalCoefficients)
from jumpex.optimal_control import (FeynmanKacBeta, hjb_probe_points, hjb_residual, lagrange_multiplier_closed,
                                    lagrange_multiplier_mc, mean_wealth_curve, optimal_law, script_M, script_S,
                                    simulate_optimal_wealth_explicit, solve_alpha_beta, value_function,
                                    wang_zhou_value)

BETA_0 = -0.045 - 0.05 * np.log(2.0 * np.pi)


def canonical_solution(lam: float = 0.1):
    return solve_alpha_beta(canonical_model(), lam, w_hat=W_HAT)


def test_alpha_and_beta_closed_forms():
    ab = canonical_solution()
    assert_allclose(ab.rate, RATE, rtol=1e-12)
    assert_allclose(ab.alpha(0.0), 0.165299, atol=1e-6)
    assert_allclose(ab.alpha(1.0), 1.0)
    assert_allclose(ab.alpha_dt(0.3), RATE * ab.alpha(0.3))
    assert_allclose(ab.beta(0.0), BETA_0, rtol=1e-12)
    assert_allclose(ab.beta(0.0), -0.136896, rtol=1e-4)
    assert ab.beta(1.0) == 0.0
    # beta_dt against a central difference
    h = 1e-6
    assert_allclose(ab.beta_dt(0.4), (ab.beta(0.4 + h) - ab.beta(0.4 - h)) / (2 * h), rtol=1e-6)


def test_multiplier_and_value():
    w_hat = lagrange_multiplier_closed(RATE, 1.0, 1.0, 1.4)
    assert_allclose(w_hat, W_HAT, rtol=1e-12)
    assert_allclose(w_hat, 1.479237, rtol=1e-4)
    ab = canonical_solution()
    assert_allclose(value_function(ab, 0.0, 1.0), -0.098932, rtol=1e-4)
    assert_allclose(mean_wealth_curve(RATE, 1.0, w_hat, 1.0), 1.4, rtol=1e-12)
    with pytest.raises(DomainError):
        lagrange_multiplier_closed(0.0, 1.0, 1.0, 1.4)
    with pytest.raises(InputError):
        value_function(solve_alpha_beta(canonical_model(), 0.1), 0.0, 1.0)


def test_no_jump_value_matches_wang_zhou():
    model = canonical_model(jumps=False)
    ab = solve_alpha_beta(model, 0.1, w_hat=1.3)
    assert_allclose(ab.rate, 2.25, rtol=1e-12)
    for t in (0.0, 0.3, 0.8):
        for x in (0.5, 1.3, 2.0):
            assert_allclose(value_function(ab, t, x), wang_zhou_value(t, x, 1.5, 0.2, 0.1, 1.3), rtol=1e-12)


def test_optimal_law_moments():
    ab = canonical_solution()
    law = optimal_law(ab, canonical_model())
    x = np.array([0.5, 1.0, W_HAT])
    y = np.zeros((3, 1))
    assert_allclose(law.mean(0.0, x, y)[:, 0], -6.0 * (x - W_HAT), rtol=1e-12, atol=1e-14)
    theta = law.cov(0.0, y)
    assert_allclose(theta[:, 0, 0], np.exp(RATE), rtol=1e-12)
    assert_allclose(gaussian_entropy(theta[0]), 2.318939, atol=1e-6)
    assert_allclose(law.cov(1.0, y)[0, 0, 0], 1.0, rtol=1e-12)


def test_alpha_cancels_in_optimal_direction():
    model = canonical_model()
    ab = canonical_solution()
    for t in (0.0, 0.4, 1.0):
        direction = np.linalg.solve(script_S(ab, model, t, np.zeros(1)), script_M(ab, model, t, np.zeros(1)))
        assert_allclose(direction, [6.0], rtol=1e-12)


def test_optimal_covariance_grows_with_lambda():
    model = canonical_model()
    low = optimal_law(solve_alpha_beta(model, 0.1, w_hat=W_HAT), model)
    high = optimal_law(solve_alpha_beta(model, 0.2, w_hat=W_HAT), model)
    for t in (0.0, 0.5, 1.0):
        gap = high.cov(t, np.zeros((1, 1)))[0] - low.cov(t, np.zeros((1, 1)))[0]
        assert np.all(np.linalg.eigvalsh(gap) > 0)


def test_hjb_residual_vanishes():
    ab = canonical_solution()
    model = canonical_model()
    probes = hjb_probe_points(ab, model, np.zeros(1))
    assert len(probes[0]) == 27
    residual = hjb_residual(ab, model, probes)
    assert np.max(np.abs(residual)) <= 1e-8


def test_hjb_residual_detects_wrong_rate():
    model = canonical_model()
    ab = canonical_solution().with_rate(1.9)
    residual = hjb_residual(ab, model, hjb_probe_points(ab, model, np.zeros(1)))
    assert np.max(np.abs(residual)) > 1e-3


def test_explicit_wealth_against_euler():
    model = canonical_model()
    ab = canonical_solution()
    result = simulate_optimal_wealth_explicit(model, ab, 1.0, np.zeros(1), SimConfig(steps=256, paths=2000, seed=1),
                                              compare_steps=(16, 64), times=(0.5,))
    coarse, fine = result.wealth_gaps[16][0], result.wealth_gaps[64][0]
    assert fine < coarse
    assert result.exponential_gaps[64][0] < result.exponential_gaps[16][0]
    terminal = result.terminal
    se = terminal.std(ddof=1) / np.sqrt(terminal.size)
    assert abs(terminal.mean() - 1.4) <= 4 * se
    mid = result.at_times[0.5]
    assert abs(mid.mean() - mean_wealth_curve(RATE, 1.0, W_HAT, 0.5)) <= 4 * mid.std(ddof=1) / np.sqrt(mid.size)
    with pytest.raises(InputError):
        simulate_optimal_wealth_explicit(model, ab, 1.0, np.zeros(1), SimConfig(steps=256, paths=10),
                                         compare_steps=(48,))


def test_monte_carlo_multiplier():
    model = canonical_model()
    ab = solve_alpha_beta(model, 0.1)
    estimate = lagrange_multiplier_mc(model, ab, 1.0, np.zeros(1), 1.4, SimConfig(steps=32, paths=20_000, seed=2))
    assert abs(estimate.w_hat - W_HAT) <= 4 * estimate.se
    assert abs(estimate.exponential_mean - np.exp(-RATE)) <= 4 * estimate.exponential_se
    assert estimate.to_dict()["method"] == "monte-carlo"


def test_negative_lambda_and_zero_drift():
    with pytest.raises(DomainError):
        solve_alpha_beta(canonical_model(), -0.1)
    model = MarketModel(ConstantCoefficients([0.0], [[0.2]], [[1.0]]), canonical_model().jumps)
    with pytest.raises(ModelValidationError):
        solve_alpha_beta(model, 0.1)


def test_degenerate_jump_of_z():
    # Sigma = 0.04 + 0.5 * 0.04 = 0.06, Sigma^-1 b = 5, so the +0.2 atom moves Z by exactly 1
    jumps = JumpSpec(intensity=0.5, law="atoms", atoms=[[0.2], [-0.2]], probabilities=[0.5, 0.5])
    model = MarketModel(ConstantCoefficients([0.3], [[0.2]], [[1.0]]), jumps, Damping(0.5))
    with pytest.raises(DegenerateJumpError):
        solve_alpha_beta(model, 0.1)


def test_zero_lambda_modes():
    model = canonical_model()
    ab = solve_alpha_beta(model, 0.0, w_hat=W_HAT)
    assert ab.beta(0.0) == 0.0
    with pytest.raises(AdmissibilityError):
        optimal_law(ab, model, mode="strict")
    classical = optimal_law(ab, model, mode="classical")
    assert classical.degenerate
    assert np.all(classical.cov(0.0, np.zeros((2, 1))) == 0.0)
    result = simulate_exploratory(model, classical, 1.0, np.zeros(1), SimConfig(steps=16, paths=2000, seed=0),
                                  w_hat=W_HAT, lam=0.0)
    assert np.isfinite(result.cost.value)
    regularized = optimal_law(ab, model)
    assert_allclose(regularized.cov(1.0, np.zeros((1, 1)))[0, 0, 0], 1e-8 * 20.0, rtol=1e-12)
    with pytest.raises(InputError):
        optimal_law(ab, model, mode="greedy")


def test_proportional_family_beta():
    jumps = canonical_model().jumps
    flat = MarketModel(ProportionalCoefficients([0.3], [[0.2]], [[1.0]]), jumps, Damping(0.5))
    ab = solve_alpha_beta(flat, 0.1, fk_outer=16, fk_inner=200)
    assert_allclose(ab.rate, RATE, rtol=1e-12)
    # identity U: the integrand is deterministic and linear in s
    value, se = ab.beta_estimator.estimate(0.0, np.zeros(1))
    assert_allclose(value, BETA_0, rtol=1e-10)
    assert se < 1e-12
    with pytest.raises(InputError):
        ab.beta(0.0)
    with pytest.raises(UnsupportedCoefficientFamilyError):
        ab.beta_dt(0.0)

    wavy = MarketModel(ProportionalCoefficients([0.3], [[0.2]], [[1.0]], CosineUField(1.0, 0.5, 2.0)),
                       jumps, Damping(0.5))
    ab = solve_alpha_beta(wavy, 0.1, fk_outer=8, fk_inner=500)
    value, se = ab.beta_estimator.estimate(0.0, np.zeros(1))
    assert np.isfinite(value) and se > 0
    with pytest.raises(UnsupportedCoefficientFamilyError):
        hjb_residual(ab.with_w_hat(W_HAT), wavy, hjb_probe_points(ab.with_w_hat(W_HAT), wavy, np.zeros(1)))


def test_frozen_state_quadrature_and_beta_curve():
    model = canonical_model()
    ab = canonical_solution()
    fk = FeynmanKacBeta(model, ab.rate, 0.1)
    assert_allclose(fk.frozen_state_integral(0.0, np.zeros(1)), BETA_0, rtol=1e-10)
    assert_allclose(fk.frozen_state_integral(0.6, np.zeros(1)), ab.beta(0.6), rtol=1e-10)
    assert fk.frozen_state_integral(1.0, np.zeros(1)) == 0.0
    assert ab.beta_se(0.0) == 0.0

    flat = MarketModel(ProportionalCoefficients([0.3], [[0.2]], [[1.0]]), model.jumps, Damping(0.5))
    flat_ab = solve_alpha_beta(flat, 0.1, fk_outer=16, fk_inner=200)
    curve = flat_ab.beta_estimator.curve(np.zeros(1), times=[0.0, 0.5, 1.0])
    assert [t for t, _, _ in curve] == [0.0, 0.5, 1.0]
    assert_allclose([v for _, v, _ in curve], [ab.beta(0.0), ab.beta(0.5), 0.0], rtol=1e-10, atol=1e-15)
    assert max(se for _, _, se in curve) < 1e-12
    assert flat_ab.beta_se(0.0, np.zeros(1)) < 1e-12
    assert len(flat_ab.beta_estimator.curve(np.zeros(1))) == 16


def test_feynman_kac_replicates_agree_within_their_error():
    jumps = canonical_model().jumps
    wavy = MarketModel(ProportionalCoefficients([0.3], [[0.2]], [[1.0]], CosineUField(1.0, 0.5, 2.0)),
                       jumps, Damping(0.5))
    ab = solve_alpha_beta(wavy, 0.1, fk_seed=0, fk_outer=8, fk_inner=2000)
    y0 = np.zeros(1)
    se = ab.beta_se(0.0, y0)
    assert se > 0 and se == ab.beta_estimator.estimate(0.0, y0)[1]
    other, other_se = FeynmanKacBeta(wavy, ab.rate, 0.1, seed=1, outer=8, inner=2000).estimate(0.0, y0)
    assert other != ab.beta(0.0, y0)
    assert abs(other - ab.beta(0.0, y0)) <= 4 * np.hypot(se, other_se)


def test_verification_inequality_under_perturbed_laws():
    model = canonical_model()
    ab = canonical_solution()
    law = optimal_law(ab, model)
    v_opt = float(value_function(ab, 0.0, 1.0))
    config = SimConfig(steps=32, paths=8000, seed=21)
    optimal = simulate_exploratory(model, law, 1.0, np.zeros(1), config, w_hat=W_HAT, lam=0.1).cost
    assert abs(optimal.value - v_opt) <= 3 * optimal.se
    for name in ("perturbed:0.5", "perturbed:1.5", "perturbed:1,2", "perturbed:1,0.5"):
        cost = simulate_exploratory(model, parse_law(name, 1, optimal=law), 1.0, np.zeros(1), config,
                                    w_hat=W_HAT, lam=0.1).cost
        assert cost.value >= v_opt - 2 * cost.se, name


def test_unsupported_coefficient_family():
    class AffineCoefficients(CoefficientField):
        variant = "affine"

        def b(self, y):
            return 0.3 + 0.0 * np.asarray(y, dtype=float)

    model = MarketModel(AffineCoefficients(1), canonical_model().jumps)
    with pytest.raises(UnsupportedCoefficientFamilyError):
        solve_alpha_beta(model, 0.1)


def main():
    tests = [obj for name, obj in sorted(globals().items()) if name.startswith("test_") and callable(obj)]
    sys.exit(0 if run_script_tests("Optimal control tests", tests) else 1)


if __name__ == "__main__":
    main()
