#!/usr/bin/env python3
"""
Tests for the exploratory wealth dynamics and the cost estimator
"""

import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import canonical_model, run_script_tests
from jumpex.errors import AdmissibilityError, InputError
from jumpex.exploratory_sde import (ConstantGaussianLaw, FunctionGaussianLaw, PathBundle, ScaledGaussianLaw,
                                    SimConfig, admissibility_probe, entropy_rate, gaussian_entropy, parse_law,
                                    simulate_exploratory, simulate_wang_zhou)
from jumpex.randomized_discrete import Partition


def test_gaussian_entropy():
    assert_allclose(gaussian_entropy(np.array([[np.exp(1.8)]])), 0.5 * (np.log(2 * np.pi * np.e) + 1.8))
    assert_allclose(gaussian_entropy(np.array([[np.exp(1.8)]])), 2.318939, atol=1e-6)
    assert gaussian_entropy(np.zeros((1, 1))) == -np.inf
    stack = gaussian_entropy(np.stack([np.eye(2), 2.0 * np.eye(2)]))
    assert_allclose(stack[1] - stack[0], np.log(2.0))


def test_entropy_rate_of_singular_law():
    law = ConstantGaussianLaw(0.0, 0.0, 1)
    assert entropy_rate(law, 0.0, 1.0, np.zeros(1)) == -np.inf


def test_parse_law():
    law = parse_law("constant:1,2", 1)
    assert_allclose(law.mean(0.0, np.ones(3), np.zeros((3, 1))), np.ones((3, 1)))
    assert_allclose(law.cov(0.0, np.zeros((3, 1))), 2.0 * np.ones((3, 1, 1)))
    base = ConstantGaussianLaw(2.0, 1.0, 1)
    assert parse_law("optimal", 1, optimal=base) is base
    scaled = parse_law("perturbed:0.5", 1, optimal=base)
    assert isinstance(scaled, ScaledGaussianLaw) and scaled.cov_factor == 1.0
    assert_allclose(scaled.mean(0.0, np.ones(1), np.zeros((1, 1))), [[1.0]])
    assert parse_law("perturbed:1,2", 1, optimal=base).cov_factor == 2.0
    for bad in ("optimal", "perturbed:1", "constant:1", "stable:1", "perturbed:1,2,3"):
        with pytest.raises(InputError):
            parse_law(bad, 1, optimal=base if bad == "perturbed:1,2,3" else None)


def test_sim_config_validation():
    with pytest.raises(InputError):
        SimConfig(steps=0)
    with pytest.raises(InputError):
        SimConfig(paths=0)
    with pytest.raises(InputError):
        SimConfig(scheme="milstein")


def test_path_bundle_jump_order():
    model = canonical_model()
    part = Partition.uniform(1.0, 16)
    bundle = PathBundle.simulate(model, part, 300, np.random.default_rng(1))
    assert bundle.dW.shape == (300, 16, 1) and bundle.dWs.shape == (300, 16, 1, 1)
    key = np.stack([bundle.jump_path, bundle.jump_step, bundle.jump_time], axis=1)
    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    assert_array_equal(order, np.arange(len(order)))
    assert np.all(bundle.jump_time >= part.grid[bundle.jump_step])
    assert np.all(bundle.jump_time <= part.grid[bundle.jump_step + 1])
    groups = bundle.step_jumps()
    covered = np.sort(np.concatenate([idx for step in groups for idx in step]))
    assert_array_equal(covered, np.arange(bundle.jump_path.size))
    for step in groups:
        for idx in step:
            # one jump per path in each rank group
            assert np.unique(bundle.jump_path[idx]).size == idx.size


def test_path_bundle_coarsen():
    model = canonical_model()
    bundle = PathBundle.simulate(model, Partition.uniform(1.0, 16), 50, np.random.default_rng(2))
    coarse = bundle.coarsen(4)
    assert coarse.partition.n == 4
    assert_allclose(coarse.dW.sum(axis=1), bundle.dW.sum(axis=1), atol=1e-13)
    assert_array_equal(coarse.jump_step, bundle.jump_step // 4)
    with pytest.raises(InputError):
        bundle.to_frame()


def test_simulation_is_deterministic():
    model = canonical_model()
    law = ConstantGaussianLaw(1.0, 1.0, 1)
    config = SimConfig(steps=8, paths=5000, seed=7, workers=1)
    first = simulate_exploratory(model, law, 1.0, np.zeros(1), config, w_hat=1.4, lam=0.1)
    second = simulate_exploratory(model, law, 1.0, np.zeros(1), SimConfig(steps=8, paths=5000, seed=7, workers=2),
                                  w_hat=1.4, lam=0.1)
    assert_array_equal(first.terminal, second.terminal)
    assert first.cost == second.cost


def test_constant_law_terminal_mean():
    model = canonical_model()
    law = ConstantGaussianLaw(1.0, 1.0, 1)
    result = simulate_exploratory(model, law, 1.0, np.zeros(1), SimConfig(steps=32, paths=4000, seed=3),
                                  w_hat=1.4, lam=0.1, keep_paths=True)
    cost = result.cost
    # E X_T = x0 + m b T
    assert abs(cost.terminal_mean - 1.3) <= 4 * cost.terminal_mean_se
    # constant covariance: entropy integral is deterministic
    assert_allclose(result.entropy, 0.5 * np.log(2 * np.pi * np.e), rtol=1e-12)
    assert_allclose(cost.value, cost.loss - 0.1 * cost.entropy_integral, rtol=1e-12)
    assert result.sample is not None and result.sample.X.shape == (4000, 33)
    frame = result.sample.to_frame(max_paths=2)
    assert len(frame) == 2 * 33


def test_exact_jump_epochs_with_drifting_jumps():
    from jumpex.levy_model import ConstantCoefficients, Damping, JumpSpec, MarketModel
    jumps = JumpSpec(intensity=2.0, law="atoms", atoms=[[0.1]], probabilities=[1.0])
    model = MarketModel(ConstantCoefficients([0.3], [[0.2]], [[1.0]]), jumps, Damping(0.5), horizon=1.0)
    law = ConstantGaussianLaw(1.0, 0.5, 1)
    result = simulate_exploratory(model, law, 1.0, np.zeros(1), SimConfig(steps=16, paths=8000, seed=9),
                                  w_hat=1.4, lam=0.1)
    # the compensated jump part has mean zero, so E X_T = x0 + m b T still
    assert abs(result.cost.terminal_mean - 1.3) <= 4 * result.cost.terminal_mean_se


def test_wealth_is_a_martingale_without_excess_return():
    from jumpex.levy_model import ConstantCoefficients, Damping, JumpSpec, MarketModel
    jumps = JumpSpec(intensity=2.0, law="atoms", atoms=[[0.1]], probabilities=[1.0])
    model = MarketModel(ConstantCoefficients([0.0], [[0.2]], [[1.0]]), jumps, Damping(0.5), horizon=1.0)
    law = FunctionGaussianLaw(lambda t, x, y: -(np.asarray(x, dtype=float) - 1.2)[:, None],
                              lambda t, y: 0.5 * np.ones((len(np.atleast_2d(y)), 1, 1)), label="feedback")
    result = simulate_exploratory(model, law, 1.0, np.zeros(1), SimConfig(steps=32, paths=8000, seed=12),
                                  w_hat=1.4, lam=0.1)
    assert abs(result.cost.terminal_mean - 1.0) <= 4 * result.cost.terminal_mean_se


def test_cost_grows_with_exploration_covariance():
    model = canonical_model()
    config = SimConfig(steps=32, paths=8000, seed=13)
    narrow = simulate_exploratory(model, ConstantGaussianLaw(1.0, 0.5, 1), 1.0, np.zeros(1), config,
                                  w_hat=1.4, lam=0.1).cost
    wide = simulate_exploratory(model, ConstantGaussianLaw(1.0, 2.0, 1), 1.0, np.zeros(1), config,
                                w_hat=1.4, lam=0.1).cost
    assert wide.loss >= narrow.loss - 2 * np.hypot(narrow.loss_se, wide.loss_se)
    # entropy of N(m, Theta) differs by (1/2) ln(det Theta_2 / det Theta_1) at every instant
    assert_allclose(wide.entropy_integral - narrow.entropy_integral, 0.5 * np.log(4.0) * model.horizon,
                    rtol=1e-10)


def test_singular_law_rejected_when_exploring():
    model = canonical_model()
    law = FunctionGaussianLaw(lambda t, x, y: np.zeros((len(x), 1)),
                              lambda t, y: np.zeros((len(np.atleast_2d(y)), 1, 1)),
                              label="flat", state_independent=True)
    with pytest.raises(AdmissibilityError):
        simulate_exploratory(model, law, 1.0, np.zeros(1), SimConfig(steps=4, paths=10), w_hat=1.4, lam=0.1)
    with pytest.raises(InputError):
        simulate_exploratory(model, ConstantGaussianLaw(1.0, 1.0, 1), 1.0, np.zeros(1),
                             SimConfig(steps=4, paths=10), w_hat=1.4, lam=-1.0)


def test_admissibility_probe():
    model = canonical_model()
    law = ConstantGaussianLaw(1.0, 1.0, 1)
    out = admissibility_probe(model, law, (np.array([0.0, 0.5]), np.array([1.0, 2.0]), np.zeros((2, 1))))
    # mu^T Sigma mu + tr(Sigma Theta) with Sigma = 0.05
    assert_allclose(out["values"], [0.1, 0.1], rtol=1e-12)
    assert_allclose(out["drift_max"], 0.3, rtol=1e-12)
    assert not out["blowup"] and out["covariance_psd"]


def test_wang_zhou_mean():
    rho, w_hat, x0, steps = 1.5, 1.5, 1.0, 100
    out = simulate_wang_zhou(rho, 0.1, w_hat, x0, 1.0, steps, 20_000, seed=4, times=[0.5, 1.0])
    for t in (0.5, 1.0):
        samples = out[t]
        k = int(round(t * steps))
        # Euler mean of the linear drift
        expected = w_hat + (x0 - w_hat) * (1.0 - rho ** 2 / steps) ** k
        se = samples.std(ddof=1) / np.sqrt(samples.size)
        assert abs(samples.mean() - expected) <= 4 * se


def main():
    tests = [obj for name, obj in sorted(globals().items()) if name.startswith("test_") and callable(obj)]
    sys.exit(0 if run_script_tests("Exploratory dynamics tests", tests) else 1)


if __name__ == "__main__":
    main()
