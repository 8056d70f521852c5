#!/usr/bin/env python3
"""
Tests for the discrete exploration scheme
"""

import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import canonical_model, run_script_tests
from jumpex.errors import AdmissibilityError, DecompositionError, InputError
from jumpex.exploratory_sde import ConstantGaussianLaw
from jumpex.levy_model import ConstantCoefficients, Damping, JumpSpec, MarketModel
from jumpex.randomized_discrete import (ConstantLinearControl, FeedbackLinearControl, MomentAccumulator, Partition,
                                        decompose_control, draw_step_noise, dyadic_family,
                                        jump_integrator_moment_target, lln_drift_statistic, psd_sqrt,
                                        simulate_discrete_scenario)


def test_psd_sqrt_diagonal():
    assert_allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)


def test_psd_sqrt_squares_back():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(4, 4))
    theta = g @ g.T
    root = psd_sqrt(theta)
    assert_allclose(root, root.T, atol=1e-14)
    assert_allclose(root @ root, theta, atol=1e-10)
    singular = np.outer([1.0, 2.0], [1.0, 2.0])
    assert_allclose(psd_sqrt(singular) @ psd_sqrt(singular), singular, atol=1e-12)


def test_psd_sqrt_rejects_bad_input():
    with pytest.raises(DecompositionError):
        psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DecompositionError) as info:
        psd_sqrt(np.diag([1.0, -0.5]))
    assert_allclose(info.value.min_eigenvalue, -0.5)


def test_partition():
    part = Partition.uniform(1.0, 8)
    assert part.n == 8 and part.horizon == 1.0
    assert_allclose(part.mesh, 0.125)
    assert part.index_at(0.5) == 4
    assert part.index_at(1.0) == 8
    assert part.coarsen(4).n == 2
    with pytest.raises(InputError):
        part.coarsen(3)
    with pytest.raises(InputError):
        Partition(np.array([0.0, 0.5, 0.5, 1.0]))
    assert [p.n for p in dyadic_family(1.0, 16, 128)] == [16, 32, 64, 128]


def test_decompose_linear_control():
    control = ConstantLinearControl([0.5, -1.0], [[2.0, 1.0], [1.0, 1.0]], dimension=2)
    dec = decompose_control(control, 0, (0.0, np.zeros(2), 1.0))
    assert_allclose(dec.mu, [0.5, -1.0])
    assert_allclose(dec.theta, [[5.0, 3.0], [3.0, 2.0]])
    assert_allclose(dec.vartheta @ dec.vartheta, dec.theta, atol=1e-12)
    u = np.random.default_rng(2).normal(size=(5, 2))
    h = control.m + u @ control.v.T
    eta = dec.eta(h)
    # eta = vartheta^{-1} v u has identity covariance
    q = np.linalg.solve(dec.vartheta, control.v)
    assert_allclose(q @ q.T, np.eye(2), atol=1e-12)
    assert_allclose(eta, u @ q.T, atol=1e-12)


def test_decompose_singular_scale():
    control = ConstantLinearControl(0.0, [[1.0, 1.0], [1.0, 1.0]], dimension=2)
    with pytest.raises(AdmissibilityError):
        decompose_control(control, 3, (0.1, np.zeros(2), 1.0))


def test_decompose_nonlinear_control():
    rng = np.random.default_rng(11)
    dec = decompose_control(lambda u: u + u ** 2, 0, (0.0, np.zeros(1), 1.0), rng=rng, samples=400_000)
    # E[u + u^2] = 1, Var = Var(u) + Var(u^2) = 3
    assert abs(dec.mu[0] - 1.0) < 0.02
    assert abs(dec.theta[0, 0] - 3.0) < 0.08
    with pytest.raises(InputError):
        decompose_control(lambda u: u, 0, (0.0, np.zeros(1), 1.0))


def test_draw_step_noise_reproducible():
    model = canonical_model()
    a = draw_step_noise(model, 0.1, 50, np.random.default_rng(5))
    b = draw_step_noise(model, 0.1, 50, np.random.default_rng(5))
    assert_array_equal(a.dW, b.dW)
    assert_array_equal(a.dJ, b.dJ)
    assert_array_equal(a.xi, b.xi)
    assert set(np.unique(np.round(np.abs(a.dJ[a.counts == 1]), 12))) <= {0.1}


def test_step_jumps_are_compensated():
    jumps = JumpSpec(intensity=2.0, law="atoms", atoms=[[0.1]], probabilities=[1.0])
    model = MarketModel(ConstantCoefficients([0.3], [[0.2]], [[1.0]]), jumps, Damping(0.5))
    noise = draw_step_noise(model, 0.25, 2000, np.random.default_rng(6))
    # every jump is 0.1 and the compensator is intensity * 0.1 * dt
    assert_allclose(noise.dJ[:, 0], 0.1 * noise.counts - 0.05, atol=1e-12)
    assert noise.counts.max() > 0


def test_scenario_recursions():
    model = canonical_model()
    part = Partition.uniform(1.0, 32)
    control = ConstantLinearControl(1.0, 0.5, 1)
    sc = simulate_discrete_scenario(model, part, control, 1.0, np.zeros(1), np.random.default_rng(9), n_paths=20)
    assert sc.X.shape == (20, 33) and sc.Y.shape == (20, 33, 1)
    dY = np.diff(sc.Y, axis=1)
    assert_allclose(np.diff(sc.X, axis=1), np.sum(sc.h * dY, axis=2), atol=1e-13)
    assert_allclose(dY[..., 0], 0.3 * part.steps + 0.2 * sc.dW[..., 0] + sc.dJ[..., 0], atol=1e-13)
    # linear controls give eta = xi exactly
    assert_allclose(sc.eta(), sc.xi, atol=1e-12)
    assert_allclose(sc.M[:, -1, 0], np.sum(sc.xi[..., 0] * sc.dW[..., 0], axis=1), atol=1e-13)
    z = sc.integrators(part.n)
    assert z.shape == (20, 4)
    frame = sc.to_frame(path=3)
    assert list(frame.columns[:3]) == ["path", "t", "W_1"] and len(frame) == 33


def test_feedback_control_follows_its_law():
    control = FeedbackLinearControl(ConstantGaussianLaw(1.0, 4.0, 1))
    assert control.state_independent()
    dec = decompose_control(control, 0, (0.0, np.zeros(1), 1.0))
    assert_allclose(dec.mu, [1.0])
    assert_allclose(dec.theta, [[4.0]], rtol=1e-12)
    part = Partition.uniform(1.0, 16)
    model = canonical_model()
    fed = simulate_discrete_scenario(model, part, control, 1.0, np.zeros(1), np.random.default_rng(3), n_paths=50)
    plain = simulate_discrete_scenario(model, part, ConstantLinearControl(1.0, 2.0, 1), 1.0, np.zeros(1),
                                       np.random.default_rng(3), n_paths=50)
    assert_allclose(fed.X, plain.X, rtol=1e-12)


def test_scenario_rejects_singular_scale():
    control = ConstantLinearControl(1.0, 0.0, 1)
    with pytest.raises(AdmissibilityError):
        simulate_discrete_scenario(canonical_model(), Partition.uniform(1.0, 4), control, 1.0, np.zeros(1),
                                   np.random.default_rng(0))


def test_lln_drift_statistic():
    model = canonical_model()
    part = Partition.uniform(1.0, 64)
    control = ConstantLinearControl(1.0, 1.0, 1)
    sc = simulate_discrete_scenario(model, part, control, 1.0, np.zeros(1), np.random.default_rng(4),
                                    n_paths=4000)
    stat = lln_drift_statistic(sc, 1.0)
    assert_allclose(stat.exact, 1.0 / 64, rtol=1e-12)
    assert abs(stat.value[0] - stat.exact) <= 4 * stat.se[0]


def test_moment_accumulator_merge():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(100, 2)), rng.normal(size=(50, 2))
    left, right, whole = MomentAccumulator(2), MomentAccumulator(2), MomentAccumulator(2)
    left.add(a)
    right.add(b)
    whole.add(np.vstack([a, b]))
    left.merge(right)
    assert left.count == 150
    assert_allclose(left.mean(), whole.mean(), rtol=1e-12)
    assert_allclose(left.covariance(), whole.covariance(), rtol=1e-12, atol=1e-14)
    assert_allclose(left.mean_se(), np.vstack([a, b]).std(axis=0) / np.sqrt(150), rtol=1e-10)


def test_jump_integrator_moment_target():
    target = jump_integrator_moment_target(canonical_model())
    psi = np.sqrt(0.01 + 0.25) - 0.5
    assert_allclose(target, np.diag([0.01, psi ** 2]), rtol=1e-12)


def main():
    tests = [obj for name, obj in sorted(globals().items()) if name.startswith("test_") and callable(obj)]
    sys.exit(0 if run_script_tests("Discrete scheme tests", tests) else 1)


if __name__ == "__main__":
    main()
