"""
Discrete-time exploration scheme.

On a partition 0 = t_0 < ... < t_n = T the investor draws xi_i ~ N(0, I) at
every step and trades H_{i-1}(xi_i). The module provides the partition, linear
randomized controls H(u) = m + v u, the moment decomposition of a control,
the discrete integrators W^n, M^n, L^{n,psi} and the wealth recursion

    X_i = X_{i-1} + H_{i-1}(xi_i)^T (Y_i - Y_{i-1}).

Controls are evaluated at the left endpoint: m, v at step i only see
(t_{i-1}, Y_{i-1}, X_{i-1}).
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import AdmissibilityError, DecompositionError, InputError
from .levy_model import MarketModel, psi_second_moment

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
EIGEN_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Partition:
    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float).ravel()
        if grid.size < 2 or grid[0] != 0.0:
            raise InputError("partition must start at 0 and contain at least one step")
        if np.any(np.diff(grid) <= 0):
            raise InputError("partition times must be strictly increasing")
        object.__setattr__(self, "grid", grid)

    @classmethod
    def uniform(cls, horizon: float, n: int) -> "Partition":
        if n < 1:
            raise InputError(f"step count must be >= 1, got {n}")
        grid = np.linspace(0.0, horizon, n + 1)
        grid[-1] = horizon
        return cls(grid)

    @property
    def n(self) -> int:
        return self.grid.size - 1

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def mesh(self) -> float:
        return float(self.steps.max())

    def index_at(self, t: float) -> int:
        """Number of steps with t_i <= t"""
        return int(np.searchsorted(self.grid, t + 1e-12, side="right") - 1)

    def coarsen(self, factor: int) -> "Partition":
        if factor < 1 or self.n % factor:
            raise InputError(f"cannot coarsen {self.n} steps by a factor {factor}")
        return Partition(self.grid[::factor])


def dyadic_family(horizon: float, n_min: int = 16, n_max: int = 1024) -> List[Partition]:
    """Uniform grids n_min, 2 n_min, ..., n_max"""
    family = []
    n = n_min
    while n <= n_max:
        family.append(Partition.uniform(horizon, n))
        n *= 2
    return family


def psd_sqrt(theta: np.ndarray) -> np.ndarray:
    """
    Symmetric PSD square root through the spectral decomposition.

    Raises:
        DecompositionError: theta asymmetric beyond 1e-10 or an eigenvalue below -1e-10
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    asym = np.max(np.abs(theta - theta.T)) if theta.size else 0.0
    if asym > SYMMETRY_TOL:
        vals = linalg.eigvalsh(0.5 * (theta + theta.T))
        raise DecompositionError(f"matrix is not symmetric (max asymmetry {asym:.3e})", float(vals.min()))
    vals, vecs = linalg.eigh(0.5 * (theta + theta.T))
    if vals.min() < -EIGEN_TOL:
        raise DecompositionError("matrix is not positive semidefinite", float(vals.min()))
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return 0.5 * (root + root.T)


def batch_psd_sqrt(theta: np.ndarray) -> np.ndarray:
    """psd_sqrt over a stack of shape (..., D, D), eigenvalues clamped at 0"""
    vals, vecs = np.linalg.eigh(0.5 * (theta + np.swapaxes(theta, -1, -2)))
    if np.min(vals) < -EIGEN_TOL:
        raise DecompositionError("stack contains an indefinite matrix", float(np.min(vals)))
    root = np.einsum("...ij,...j,...kj->...ik", vecs, np.sqrt(np.clip(vals, 0.0, None)), vecs)
    return root


class LinearRandomizedControl:
    """
    Randomized control H(u) = m + v u.

    Subclasses implement coefficients(step, t, y, x) returning m of shape
    (N, D) and v of shape (N, D, D) for the N paths in the batch.
    """

    label = "linear"

    def coefficients(self, step: int, t: float, y: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def state_independent(self) -> bool:
        return False


class ConstantLinearControl(LinearRandomizedControl):
    def __init__(self, m, v, dimension: int = 1):
        self.m = np.broadcast_to(np.asarray(m, dtype=float), (dimension,)).copy()
        v = np.asarray(v, dtype=float)
        self.v = v * np.eye(dimension) if v.ndim == 0 else v.reshape(dimension, dimension)
        self.label = f"constant(m={self.m.tolist()}, v={self.v.tolist()})"

    def coefficients(self, step, t, y, x):
        n = len(x)
        return np.broadcast_to(self.m, (n,) + self.m.shape), np.broadcast_to(self.v, (n,) + self.v.shape)

    def state_independent(self) -> bool:
        return True


class FeedbackLinearControl(LinearRandomizedControl):
    """Discrete counterpart of a Gaussian feedback law: m = law mean, v = sqrt of law covariance"""

    def __init__(self, law):
        self.law = law
        self.label = f"feedback({law.label})"

    def coefficients(self, step, t, y, x):
        return self.law.mean(t, x, y), self.law.sqrt_cov(t, y)

    def state_independent(self) -> bool:
        return bool(getattr(self.law, "state_independent", lambda: False)())


@dataclass(frozen=True, eq=False)
class MomentDecomposition:
    mu: np.ndarray
    theta: np.ndarray
    vartheta: np.ndarray

    def eta(self, h_values: np.ndarray) -> np.ndarray:
        """eta = vartheta^{-1} (H - mu) for samples of shape (..., D)"""
        centred = np.asarray(h_values, dtype=float) - self.mu
        return linalg.solve(self.vartheta, centred.reshape(-1, self.mu.size).T, assume_a="sym").T.reshape(centred.shape)


def _check_scale(v: np.ndarray, where: str) -> None:
    try:
        if np.max(np.abs(v - np.swapaxes(v, -1, -2))) > SYMMETRY_TOL:
            raise np.linalg.LinAlgError
        np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        raise AdmissibilityError(
            f"control scale v is not symmetric positive definite at {where}; "
            "a singular exploration law has differential entropy -inf") from None


def decompose_control(control: Union[LinearRandomizedControl, Callable[[np.ndarray], np.ndarray]],
                      step: int, state: Tuple[float, np.ndarray, float],
                      rng: Optional[np.random.Generator] = None,
                      samples: int = 1_000_000) -> MomentDecomposition:
    """
    Conditional mean, covariance and covariance square root of H(xi).

    Args:
        control: linear control, or any map u -> H(u) on arrays of shape (S, D)
        step: step index i - 1
        state: (t, y, x) at the left endpoint
        rng: generator for the Monte Carlo moments of a nonlinear H
        samples: Monte Carlo sample count for a nonlinear H

    Returns:
        MomentDecomposition(mu, theta, vartheta)
    """
    t, y, x = state
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if isinstance(control, LinearRandomizedControl):
        m, v = control.coefficients(step, t, y[None, :], np.array([float(x)]))
        m, v = np.asarray(m[0], dtype=float), np.asarray(v[0], dtype=float)
        _check_scale(v, f"step {step}, t={t}, y={y.tolist()}")
        theta = v @ v.T
        return MomentDecomposition(mu=m.copy(), theta=theta, vartheta=psd_sqrt(theta))
    if rng is None:
        raise InputError("a nonlinear control needs an rng for its Monte Carlo moments")
    h = np.asarray(control(rng.standard_normal((samples, y.size))), dtype=float)
    mu = h.mean(axis=0)
    theta = np.atleast_2d(np.cov(h, rowvar=False))
    if np.linalg.eigvalsh(theta).min() <= 0:
        raise AdmissibilityError(f"H(xi) has a singular covariance at step {step}")
    return MomentDecomposition(mu=mu, theta=theta, vartheta=psd_sqrt(theta))


class StepNoise(NamedTuple):
    dW: np.ndarray
    dJ: np.ndarray
    xi: np.ndarray
    counts: np.ndarray


def draw_step_noise(model: MarketModel, dt: float, n_paths: int, rng: np.random.Generator) -> StepNoise:
    """
    Market and exploration noise of one step, drawn in a fixed order:
    Brownian increment, Poisson counts, jump sizes, exploration draw.

    dJ is the exact sum of every compound-Poisson jump falling in the step
    minus its compensator m1 dt, so the discrete jump integrator is a
    martingale like its limit. With a symmetric jump law m1 = 0 and dJ is
    the plain jump sum.
    """
    d = model.dimension
    dW = np.sqrt(dt) * rng.standard_normal((n_paths, d))
    dJ = np.zeros((n_paths, d))
    counts = np.zeros(n_paths, dtype=np.int64)
    jumps = model.jumps
    if jumps.active:
        counts = rng.poisson(jumps.intensity * dt, n_paths)
        total = int(counts.sum())
        if total:
            sizes = jumps.sample_sizes(rng, total)
            np.add.at(dJ, np.repeat(np.arange(n_paths), counts), sizes)
        dJ -= jumps.m1 * dt
    xi = rng.standard_normal((n_paths, d))
    return StepNoise(dW, dJ, xi, counts)


@dataclass(frozen=True, eq=False)
class DiscreteScenario:
    """
    Simulated paths of the discrete scheme. Step arrays have shape (N, n, .),
    path arrays (N, n + 1, .).
    """
    partition: Partition
    dW: np.ndarray
    xi: np.ndarray
    dJ: np.ndarray
    h: np.ndarray
    mu: np.ndarray
    vartheta: np.ndarray
    W: np.ndarray
    M: np.ndarray
    L: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def eta(self) -> np.ndarray:
        """vartheta^{-1} (H - mu) per path and step"""
        centred = self.h - self.mu
        return np.linalg.solve(self.vartheta, centred[..., None])[..., 0]

    def integrators(self, index: int) -> np.ndarray:
        """vec(W^n, M^n, L^{n,psi}) at grid index, shape (N, D^2 + 3D)"""
        return np.concatenate([self.W[:, index], self.M[:, index], self.L[:, index]], axis=1)

    def to_frame(self, path: Optional[int] = None) -> pd.DataFrame:
        """Long-format table (path, t, W, M, L, Y, X); one path when `path` is given"""
        paths = range(self.n_paths) if path is None else [path]
        d = self.Y.shape[-1]
        columns = (["W_%d" % (k + 1) for k in range(d)]
                   + ["M_%d_%d" % (k // d + 1, k % d + 1) for k in range(d * d)]
                   + ["LJ_%d" % (k + 1) for k in range(d)] + ["Lxi_%d" % (k + 1) for k in range(d)]
                   + ["Y_%d" % (k + 1) for k in range(d)])
        frames = []
        for p in paths:
            block = np.concatenate([self.W[p], self.M[p], self.L[p], self.Y[p]], axis=1)
            frame = pd.DataFrame(block, columns=columns)
            frame.insert(0, "t", self.partition.grid)
            frame.insert(0, "path", p)
            frame["X"] = self.X[p]
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)


def simulate_discrete_scenario(model: MarketModel, partition: Partition, control: LinearRandomizedControl,
                               x0: float, y0: np.ndarray, rng: np.random.Generator,
                               n_paths: int = 1) -> DiscreteScenario:
    """
    Simulate n_paths paths of the discrete exploration scheme from one generator.

    Y follows the Euler recursion b dt + a dW + gamma dJ with dJ the exact
    jump sum of the step less m1 dt (see draw_step_noise); M^n accumulates
    xi (x) dW in d-major order and L^{n,psi} accumulates (dJ, psi(dJ) xi).
    """
    if n_paths < 1:
        raise InputError(f"n_paths must be >= 1, got {n_paths}")
    d, n = model.dimension, partition.n
    y0 = np.broadcast_to(np.asarray(y0, dtype=float).ravel(), (d,))

    dW = np.empty((n_paths, n, d))
    xi = np.empty((n_paths, n, d))
    dJ = np.empty((n_paths, n, d))
    h = np.empty((n_paths, n, d))
    mu = np.empty((n_paths, n, d))
    vartheta = np.empty((n_paths, n, d, d))
    W = np.zeros((n_paths, n + 1, d))
    M = np.zeros((n_paths, n + 1, d * d))
    L = np.zeros((n_paths, n + 1, 2 * d))
    Y = np.empty((n_paths, n + 1, d))
    X = np.empty((n_paths, n + 1))
    Y[:, 0] = y0
    X[:, 0] = x0

    for i, dt in enumerate(partition.steps):
        t = partition.grid[i]
        y, x = Y[:, i], X[:, i]
        m, v = control.coefficients(i, t, y, x)
        if i == 0 or not control.state_independent():
            _check_scale(np.asarray(v), f"step {i}, t={t:.6g}")
        noise = draw_step_noise(model, dt, n_paths, rng)

        dY = (model.coeffs.b(y) * dt
              + np.einsum("nij,nj->ni", model.coeffs.a(y), noise.dW)
              + np.einsum("nij,nj->ni", model.coeffs.gamma(y), noise.dJ))
        h_i = m + np.einsum("nij,nj->ni", v, noise.xi)

        dW[:, i], xi[:, i], dJ[:, i] = noise.dW, noise.xi, noise.dJ
        h[:, i], mu[:, i] = h_i, m
        vartheta[:, i] = batch_psd_sqrt(np.einsum("nij,nkj->nik", v, v))
        Y[:, i + 1] = y + dY
        X[:, i + 1] = x + np.sum(h_i * dY, axis=1)
        W[:, i + 1] = W[:, i] + noise.dW
        M[:, i + 1] = M[:, i] + np.einsum("nd,ne->nde", noise.xi, noise.dW).reshape(n_paths, d * d)
        L[:, i + 1] = L[:, i] + np.concatenate(
            [noise.dJ, model.damping(noise.dJ)[:, None] * noise.xi], axis=1)

    return DiscreteScenario(partition, dW, xi, dJ, h, mu, vartheta, W, M, L, Y, X)


class LLNStatistic(NamedTuple):
    value: np.ndarray
    se: np.ndarray
    exact: float


def drift_squares(scenario: DiscreteScenario, t: float) -> np.ndarray:
    """Per-path |sum_{t_i <= t} eta_i dt_i|^2 per coordinate, shape (N, D)"""
    partition = scenario.partition
    k = partition.index_at(t)
    return np.einsum("nkd,k->nd", scenario.eta()[:, :k], partition.steps[:k]) ** 2


def lln_drift_statistic(scenarios: Union[DiscreteScenario, Sequence[DiscreteScenario]], t: float) -> LLNStatistic:
    """
    Monte Carlo estimate of E|sum_{t_i <= t} eta_i dt_i|^2 per coordinate.

    Returns:
        LLNStatistic(value per coordinate, its SE, exact value sum dt_i^2)
    """
    if isinstance(scenarios, DiscreteScenario):
        scenarios = [scenarios]
    squares = np.concatenate([drift_squares(s, t) for s in scenarios], axis=0)
    return summarize_drift_squares(squares, scenarios[0].partition, t)


def summarize_drift_squares(squares: np.ndarray, partition: Partition, t: float) -> LLNStatistic:
    steps = partition.steps[:partition.index_at(t)]
    n = squares.shape[0]
    se = squares.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(squares.shape[1], np.inf)
    return LLNStatistic(squares.mean(axis=0), se, float(np.sum(steps ** 2)))


class MomentAccumulator:
    """Running first and second moments of vector samples, merged block by block"""

    def __init__(self, dimension: int):
        self.dimension = dimension
        self.count = 0
        self.total = np.zeros(dimension)
        self.outer = np.zeros((dimension, dimension))
        self.outer_sq = np.zeros((dimension, dimension))

    def add(self, samples: np.ndarray) -> None:
        samples = np.asarray(samples, dtype=float).reshape(-1, self.dimension)
        prods = np.einsum("ni,nj->nij", samples, samples)
        self.count += samples.shape[0]
        self.total += samples.sum(axis=0)
        self.outer += prods.sum(axis=0)
        self.outer_sq += (prods ** 2).sum(axis=0)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        self.count += other.count
        self.total += other.total
        self.outer += other.outer
        self.outer_sq += other.outer_sq
        return self

    def mean(self) -> np.ndarray:
        return self.total / self.count

    def mean_se(self) -> np.ndarray:
        var = np.clip(np.diag(self.outer) / self.count - self.mean() ** 2, 0.0, None)
        return np.sqrt(var / self.count)

    def second_moment(self) -> np.ndarray:
        return self.outer / self.count

    def second_moment_se(self) -> np.ndarray:
        """SE of each entry of the raw second moment"""
        m2 = self.second_moment()
        return np.sqrt(np.clip(self.outer_sq / self.count - m2 ** 2, 0.0, None) / self.count)

    def covariance(self) -> np.ndarray:
        mean = self.mean()
        return self.second_moment() - np.outer(mean, mean)


def jump_integrator_moment_target(model: MarketModel) -> np.ndarray:
    """Per-unit-time second moment of L^psi increments: blockdiag(m2, E psi(e)^2 I)"""
    d = model.dimension
    target = np.zeros((2 * d, 2 * d))
    target[:d, :d] = model.jumps.m2
    target[d:, d:] = psi_second_moment(model) * np.eye(d)
    return target
