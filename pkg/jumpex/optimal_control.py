"""
Closed-form optimal exploration for the two solvable coefficient families.

The value function is quadratic, v(t, x, y) = alpha(t) (x - w_hat)^2 + beta(t, y),
with alpha(t) = exp(-(T - t) K) and K = b^T Sigma^{-1} b constant. beta is
closed form for constant coefficients and a Feynman-Kac Monte Carlo estimate
for proportional ones.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, linalg

from .errors import (AdmissibilityError, DegenerateJumpError, DomainError, InconclusiveEstimateError,
                     InputError, ModelValidationError, UnsupportedCoefficientFamilyError)
from .exploratory_sde import GaussianFeedbackLaw, PathBundle, SimConfig, gaussian_entropy
from .levy_model import (ConstantCoefficients, MarketModel, ProportionalCoefficients, augmented_nodes,
                         sigma_matrix)
from .randomized_discrete import Partition, batch_psd_sqrt, draw_step_noise
from .rng_streams import run_blocks

logger = logging.getLogger(__name__)

FK_OUTER = 64
FK_INNER = 10_000
JUMP_FACTOR_TOL = 1e-12


def _reduced_coefficients(model: MarketModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(b, Sigma, gamma) with the U field stripped for the proportional family"""
    coeffs = model.coeffs
    m2 = model.jumps.m2
    if isinstance(coeffs, ConstantCoefficients):
        b, a, g = coeffs.b_vec, coeffs.a_mat, coeffs.gamma_mat
    elif isinstance(coeffs, ProportionalCoefficients):
        b, a, g = coeffs.b_tilde, coeffs.a_tilde, coeffs.gamma_tilde
    else:
        raise UnsupportedCoefficientFamilyError(
            f"coefficient family '{coeffs.variant}' has no closed-form alpha; solving the general "
            "PIDE system for (alpha, beta) is not supported")
    return b, a @ a.T + g @ m2 @ g.T, g


def check_jump_factors(model: MarketModel) -> None:
    """
    Reject atom laws for which some jump of Z equals 1.

    Z = int (Sigma^{-1} b)^T dY jumps by (Sigma^{-1} b)^T gamma e; the
    stochastic exponential of -Z vanishes when that jump is 1.
    """
    if model.jumps.law != "atoms" or not model.jumps.active:
        return
    b, sigma, g = _reduced_coefficients(model)
    sizes = model.jumps.atoms @ (g.T @ linalg.solve(sigma, b, assume_a="pos"))
    if np.any(np.abs(1.0 - sizes) < JUMP_FACTOR_TOL):
        raise DegenerateJumpError(
            f"an atom gives a jump of Z equal to 1 (jump sizes {sizes.tolist()}); "
            "the explicit optimal wealth needs every jump of Z different from 1")


class FeynmanKacBeta:
    """
    beta(t, y) = E[int_t^T f(s, Y_s^{t,y}) ds],
    f(s, y) = -(lam / 2) ln((lam pi)^D / det(alpha(s) Sigma(y))).

    Outer grid of `outer` times on [t, T] (trapezoid rule), `inner` state
    paths of the uncontrolled Y; the stream of an estimate is keyed by (t, y).
    """

    def __init__(self, model: MarketModel, rate: float, lam: float, seed: int = 0,
                 outer: int = FK_OUTER, inner: int = FK_INNER):
        if outer < 2 or inner < 2:
            raise InputError(f"Feynman-Kac grid needs outer >= 2 and inner >= 2, got {outer}, {inner}")
        self.model = model
        self.rate = rate
        self.lam = lam
        self.seed = seed
        self.outer = outer
        self.inner = inner

    def integrand(self, s: np.ndarray, y: np.ndarray) -> np.ndarray:
        d = self.model.dimension
        alpha = np.exp(-(self.model.horizon - s) * self.rate)
        _, logdet = np.linalg.slogdet(sigma_matrix(self.model, y, check=False))
        return -0.5 * self.lam * (d * np.log(self.lam * np.pi) - d * np.log(alpha) - logdet)

    def estimate(self, t: float, y: np.ndarray) -> Tuple[float, float]:
        """(value, standard error) of beta(t, y)"""
        horizon = self.model.horizon
        if self.lam == 0 or t >= horizon:
            return 0.0, 0.0
        y = np.asarray(y, dtype=float).ravel()
        times = np.linspace(t, horizon, self.outer)
        steps = np.diff(times)
        coeffs = self.model.coeffs
        tag = "feynman-kac:%.12g:%s" % (t, ",".join("%.12g" % v for v in y))

        def _block(rng: np.random.Generator, size: int) -> np.ndarray:
            state = np.tile(y, (size, 1))
            values = [self.integrand(times[0], state)]
            for k, dt in enumerate(steps):
                noise = draw_step_noise(self.model, dt, size, rng)
                state = (state + coeffs.b(state) * dt
                         + np.einsum("nij,nj->ni", coeffs.a(state), noise.dW)
                         + np.einsum("nij,nj->ni", coeffs.gamma(state), noise.dJ))
                values.append(self.integrand(times[k + 1], state))
            values = np.stack(values, axis=1)
            return np.sum(0.5 * (values[:, 1:] + values[:, :-1]) * steps, axis=1)

        samples = np.concatenate(run_blocks(_block, self.seed, tag, self.inner))
        return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.size))

    def __call__(self, t: float, y: np.ndarray) -> float:
        return self.estimate(t, y)[0]

    def curve(self, y: np.ndarray, times: Optional[Sequence[float]] = None) -> List[Tuple[float, float, float]]:
        """(t, value, se) on the outer grid of [0, T] or the given times"""
        times = np.linspace(0.0, self.model.horizon, self.outer) if times is None else times
        return [(float(t),) + self.estimate(float(t), y) for t in times]

    def frozen_state_integral(self, t: float, y: np.ndarray) -> float:
        """
        int_t^T f(s, y) ds by adaptive quadrature with the state held at y.
        Equals beta(t, y) whenever Sigma does not depend on the state.
        """
        if self.lam == 0 or t >= self.model.horizon:
            return 0.0
        y = np.asarray(y, dtype=float).ravel()
        value, _ = integrate.quad(lambda s: float(self.integrand(s, y)), t, self.model.horizon, epsabs=1e-13)
        return float(value)


@dataclass(frozen=True, eq=False)
class AlphaBeta:
    variant: str
    rate: float
    horizon: float
    lam: float
    dimension: int
    w_hat: Optional[float] = None
    log_det_sigma: Optional[float] = None
    beta_estimator: Optional[FeynmanKacBeta] = field(default=None, repr=False)

    def alpha(self, t, y=None):
        """exp(-(T - t) K); y is accepted for the general formulas and ignored"""
        return np.exp(-(self.horizon - np.asarray(t, dtype=float)) * self.rate)

    def alpha_dt(self, t):
        return self.rate * self.alpha(t)

    def beta(self, t: float, y: Optional[np.ndarray] = None) -> float:
        if self.lam == 0 or t >= self.horizon:
            return 0.0
        if self.variant == "constant":
            tau = self.horizon - t
            d = self.dimension
            return float(-tau ** 2 * self.lam * d * self.rate / 4.0
                         - tau * 0.5 * self.lam * (d * np.log(self.lam * np.pi) - self.log_det_sigma))
        if y is None:
            raise InputError("beta of the proportional family needs a state y")
        return self.beta_estimator(t, y)

    def beta_se(self, t: float, y: Optional[np.ndarray] = None) -> float:
        if self.variant == "constant" or self.lam == 0 or t >= self.horizon:
            return 0.0
        return self.beta_estimator.estimate(t, y)[1]

    def beta_dt(self, t: float) -> float:
        """Time derivative of the closed-form beta"""
        if self.variant != "constant":
            raise UnsupportedCoefficientFamilyError("beta_t is only available in closed form for constant coefficients")
        if self.lam == 0:
            return 0.0
        d = self.dimension
        return float((self.horizon - t) * 0.5 * self.lam * d * self.rate
                     + 0.5 * self.lam * (d * np.log(self.lam * np.pi) - self.log_det_sigma))

    def with_rate(self, rate: float) -> "AlphaBeta":
        return replace(self, rate=rate)

    def with_w_hat(self, w_hat: float) -> "AlphaBeta":
        return replace(self, w_hat=w_hat)


def solve_alpha_beta(model: MarketModel, lam: float, w_hat: Optional[float] = None,
                     fk_seed: int = 0, fk_outer: int = FK_OUTER, fk_inner: int = FK_INNER) -> AlphaBeta:
    """
    Solve the PIDE system for (alpha, beta).

    Raises:
        UnsupportedCoefficientFamilyError: neither constant nor proportional coefficients
        ModelValidationError: b = 0, so the problem has no excess return
    """
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    b, sigma, _ = _reduced_coefficients(model)
    if not np.any(b != 0):
        raise ModelValidationError("the drift b is zero; alpha = 1 makes the multiplier undefined")
    rate = float(b @ linalg.solve(sigma, b, assume_a="pos"))
    check_jump_factors(model)
    d = model.dimension
    if isinstance(model.coeffs, ConstantCoefficients):
        _, logdet = np.linalg.slogdet(sigma)
        return AlphaBeta("constant", rate, model.horizon, lam, d, w_hat, log_det_sigma=float(logdet))
    estimator = FeynmanKacBeta(model, rate, lam, seed=fk_seed, outer=fk_outer, inner=fk_inner)
    return AlphaBeta("proportional", rate, model.horizon, lam, d, w_hat, beta_estimator=estimator)


def script_M(alphabeta: AlphaBeta, model: MarketModel, t: float, y: np.ndarray) -> np.ndarray:
    """alpha b + A grad_y alpha + gamma int (alpha(t, y + gamma e) - alpha(t, y)) e nu(de)"""
    y = np.asarray(y, dtype=float).ravel()
    alpha = alphabeta.alpha(t, y)
    out = alpha * model.coeffs.b(y)
    if model.jumps.active:
        e, w = model.jumps.size_nodes()
        g = model.coeffs.gamma(y)
        shifted = np.array([alphabeta.alpha(t, y + g @ ek) for ek in e])
        out = out + g @ (model.jumps.intensity * np.einsum("k,k,ki->i", w, shifted - alpha, e))
    # alpha carries no y dependence, so the A grad_y alpha term is zero
    return out


def script_S(alphabeta: AlphaBeta, model: MarketModel, t: float, y: np.ndarray) -> np.ndarray:
    """alpha A + gamma (int alpha(t, y + gamma e) e e^T nu(de)) gamma^T"""
    y = np.asarray(y, dtype=float).ravel()
    a, g = model.coeffs.a(y), model.coeffs.gamma(y)
    out = alphabeta.alpha(t, y) * (a @ a.T)
    if model.jumps.active:
        e, w = model.jumps.size_nodes()
        shifted = np.array([alphabeta.alpha(t, y + g @ ek) for ek in e])
        out = out + g @ (model.jumps.intensity * np.einsum("k,k,ki,kj->ij", w, shifted, e, e)) @ g.T
    return 0.5 * (out + out.T)


def value_function(alphabeta: AlphaBeta, t: float, x, y: Optional[np.ndarray] = None):
    if alphabeta.w_hat is None:
        raise InputError("value function needs the Lagrange multiplier w_hat")
    return alphabeta.alpha(t) * (np.asarray(x, dtype=float) - alphabeta.w_hat) ** 2 + alphabeta.beta(t, y)


def wang_zhou_value(t, x, rho: float, sigma: float, lam: float, w_hat: float, horizon: float = 1.0):
    """
    e^{-rho^2 (T-t)} (x - w_hat)^2 - (lam/2)(rho^2 (T-t)^2 / 2 + (T-t) ln(lam pi / sigma^2))

    sigma is the volatility of the one-dimensional no-jump model.
    """
    tau = horizon - np.asarray(t, dtype=float)
    value = np.exp(-rho ** 2 * tau) * (np.asarray(x, dtype=float) - w_hat) ** 2
    if lam > 0:
        value = value - 0.5 * lam * (rho ** 2 * tau ** 2 / 2.0 + tau * np.log(lam * np.pi / sigma ** 2))
    return value


class OptimalLaw(GaussianFeedbackLaw):
    """
    Optimal Gaussian exploration: mean -(x - w_hat) S^{-1} M = -(x - w_hat) Sigma^{-1} b,
    covariance (lam / 2) S^{-1} = (lam / 2) Sigma^{-1} / alpha(t).
    """

    def __init__(self, alphabeta: AlphaBeta, model: MarketModel, mode: str = "exploratory",
                 epsilon: float = 1e-8):
        if alphabeta.w_hat is None:
            raise InputError("optimal law needs the Lagrange multiplier w_hat")
        self.alphabeta = alphabeta
        self.model = model
        self.mode = mode
        self.scale = 0.5 * alphabeta.lam
        if alphabeta.lam == 0:
            if mode == "classical":
                self.degenerate = True
            elif mode == "strict":
                raise AdmissibilityError("lambda = 0 gives a zero optimal covariance and -inf entropy")
            else:
                logger.warning("lambda = 0: optimal covariance regularized to %g * S^-1", epsilon)
                self.scale = epsilon
        self.label = "optimal" if mode != "classical" else "optimal-classical"
        self._constant = model.coeffs.state_independent()
        if self._constant:
            y = np.zeros(model.dimension)
            sig = sigma_matrix(model, y)
            self._direction = linalg.solve(sig, model.coeffs.b(y), assume_a="pos")
            self._sigma_inv = linalg.inv(sig)

    def direction(self, y: np.ndarray) -> np.ndarray:
        """Sigma(y)^{-1} b(y), shape (N, D)"""
        if self._constant:
            return np.broadcast_to(self._direction, (len(y), self._direction.size))
        sig = sigma_matrix(self.model, y, check=False)
        return np.linalg.solve(sig, self.model.coeffs.b(y)[..., None])[..., 0]

    def mean(self, t, x, y):
        y = np.atleast_2d(y)
        return -(np.asarray(x, dtype=float) - self.alphabeta.w_hat)[:, None] * self.direction(y)

    def cov(self, t, y):
        y = np.atleast_2d(y)
        if self.degenerate:
            return np.zeros((len(y), self.model.dimension, self.model.dimension))
        if self._constant:
            inv = np.broadcast_to(self._sigma_inv, (len(y),) + self._sigma_inv.shape)
        else:
            inv = np.linalg.inv(sigma_matrix(self.model, y, check=False))
        alpha = np.broadcast_to(self.alphabeta.alpha(t), (len(y),))
        return (self.scale / alpha)[:, None, None] * inv

    def state_independent(self) -> bool:
        return False


def optimal_law(alphabeta: AlphaBeta, model: MarketModel, mode: str = "exploratory") -> OptimalLaw:
    """mode: 'exploratory' (default), 'strict' (refuse lambda = 0) or 'classical' (theta = 0)"""
    if mode not in ("exploratory", "strict", "classical"):
        raise InputError(f"unknown optimal-law mode '{mode}'")
    return OptimalLaw(alphabeta, model, mode)


def hjb_probe_points(alphabeta: AlphaBeta, model: MarketModel, y0: np.ndarray,
                     spread: float = 1.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """27 probes: t in {0, T/2, 0.9 T}, x in {w_hat - 1, w_hat, w_hat + 1}, three states around y0"""
    y0 = np.asarray(y0, dtype=float).ravel()
    ts = np.array([0.0, 0.5, 0.9]) * model.horizon
    xs = alphabeta.w_hat + np.array([-1.0, 0.0, 1.0])
    ys = [y0 + s * spread * np.ones_like(y0) for s in (-1.0, 0.0, 1.0)]
    grid = [(t, x, y) for t in ts for x in xs for y in ys]
    return (np.array([g[0] for g in grid]), np.array([g[1] for g in grid]), np.array([g[2] for g in grid]))


def hjb_residual(alphabeta: AlphaBeta, model: MarketModel,
                 probes: Tuple[np.ndarray, np.ndarray, np.ndarray], mark_nodes: int = 64) -> np.ndarray:
    """
    Residual of the HJB equation at (t, x, y) probes with v = alpha (x - w_hat)^2 + beta
    and the closed-form minimizers plugged in:

        v_t + alpha (m^T A m + tr[A theta]) + 2 alpha (x - w_hat) m^T b
            + alpha int int ((m + theta^{1/2} u)^T gamma e)^2 nu(de) phi(u) du - lam Ent(theta)

    The jump integral is a tensor rule over the jump law and Gauss-Hermite marks.

    Returns:
        Residual at every probe
    """
    if alphabeta.variant != "constant" or not model.coeffs.state_independent():
        raise UnsupportedCoefficientFamilyError("the HJB residual check needs constant coefficients")
    if alphabeta.w_hat is None:
        raise InputError("HJB residual needs the Lagrange multiplier w_hat")
    lam = alphabeta.lam
    d = model.dimension
    points, weights = augmented_nodes(model, mark_nodes)
    e_nodes, u_nodes = points[:, :d], points[:, d:]
    out = []
    for t, x, y in zip(*probes):
        y = np.atleast_1d(y)
        b, a, g = model.coeffs.b(y), model.coeffs.a(y), model.coeffs.gamma(y)
        big_a = a @ a.T
        sig = sigma_matrix(model, y)
        alpha = float(alphabeta.alpha(t))
        dev = x - alphabeta.w_hat
        m = -dev * linalg.solve(sig, b, assume_a="pos")
        theta = 0.5 * lam / alpha * linalg.inv(sig) if lam > 0 else np.zeros((d, d))
        root = batch_psd_sqrt(theta)
        residual = alphabeta.alpha_dt(t) * dev ** 2 + alphabeta.beta_dt(t)
        residual += alpha * (m @ big_a @ m + np.trace(big_a @ theta)) + 2.0 * alpha * dev * (m @ b)
        if weights.size:
            actions = m + u_nodes @ root.T
            jumps = np.einsum("ki,ij,kj->k", actions, g, e_nodes)
            residual += alpha * float(np.sum(weights * jumps ** 2))
        if lam > 0:
            residual -= lam * float(gaussian_entropy(theta))
        out.append(float(residual))
    return np.asarray(out)


@dataclass(frozen=True, eq=False)
class StochasticExponentialPath:
    """
    Z and the stochastic exponential E(-Z) on the grid of a PathBundle, with
    the martingale M and the weighted integrals entering the optimal wealth.
    Grid arrays have shape (N, n + 1), step arrays (N, n), jump arrays (K,).
    """
    partition: Partition
    Z: np.ndarray
    zz_c: np.ndarray
    jump_factors: np.ndarray
    E: np.ndarray
    M: np.ndarray
    mz: np.ndarray
    integral_dM: np.ndarray
    integral_dMZ: np.ndarray

    def wealth(self, x0: float, w_hat: float, lam: float) -> np.ndarray:
        """X* = w_hat + [x0 - w_hat + sqrt(lam/2)(int dM/E_- + int d[M,Z]/E)] E(-Z)"""
        weighted = self.integral_dM + self.integral_dMZ
        return w_hat + (x0 - w_hat + np.sqrt(0.5 * lam) * weighted) * self.E


def _optimal_drivers(model: MarketModel, alphabeta: AlphaBeta, t: np.ndarray, y: np.ndarray):
    """c = Sigma^{-1} b and S^{-1/2} = alpha^{-1/2} Sigma^{-1/2} at (t, y), batched over paths"""
    sig = sigma_matrix(model, y, check=False)
    c = np.linalg.solve(sig, model.coeffs.b(y)[..., None])[..., 0]
    root = batch_psd_sqrt(np.linalg.inv(sig))
    alpha = np.broadcast_to(alphabeta.alpha(t), (len(y),))
    return c, root / np.sqrt(alpha)[:, None, None]


def stochastic_exponential(model: MarketModel, alphabeta: AlphaBeta, bundle: PathBundle,
                           y0: np.ndarray) -> StochasticExponentialPath:
    """
    Build Z = int c^T dY, E(-Z) = exp(-Z - [Z,Z]^c / 2) prod (1 - dZ) e^{dZ},
    M = int tr[(S^{-1/2} a) dW'^T] + sum (S^{-1/2} xi)^T gamma e and the weighted
    integrals on the noise of `bundle`.

    Within a step the continuous factor of E is applied at the step end, so a
    jump sees E_- as the grid value times the factors of earlier jumps in the step.

    Raises:
        DegenerateJumpError: a path hits a jump of Z equal to 1
    """
    coeffs = model.coeffs
    part = bundle.partition
    n_paths, n, d = bundle.dW.shape
    m1 = model.jumps.m1
    y = np.tile(np.asarray(y0, dtype=float).ravel(), (n_paths, 1))
    Z = np.zeros((n_paths, n + 1))
    E = np.ones((n_paths, n + 1))
    M = np.zeros((n_paths, n + 1))
    I_M = np.zeros((n_paths, n + 1))
    I_MZ = np.zeros((n_paths, n + 1))
    zz_c = np.empty((n_paths, n))
    mz = np.zeros((n_paths, n))
    factors = np.empty(bundle.jump_path.size)
    groups = bundle.step_jumps()

    for i in range(n):
        t0, dt = part.grid[i], part.steps[i]
        c, s_root = _optimal_drivers(model, alphabeta, t0, y)
        b, a = coeffs.b(y), coeffs.a(y)
        a_dw = np.einsum("nij,nj->ni", a, bundle.dW[:, i])
        dy_cont = b * dt + a_dw - np.einsum("nij,j->ni", coeffs.gamma(y), m1) * dt
        dz_cont = np.sum(c * dy_cont, axis=1)
        ac = np.einsum("nji,nj->ni", a, c)
        zz_c[:, i] = np.sum(ac * ac, axis=1) * dt
        dm_cont = np.einsum("nij,nij->n", np.einsum("nik,nkj->nij", s_root, a), bundle.dWs[:, i])

        e_run = E[:, i].copy()
        y_run = y.copy()
        dz_jump = np.zeros(n_paths)
        dm_jump = np.zeros(n_paths)
        for idx in groups[i]:
            p = bundle.jump_path[idx]
            tau = bundle.jump_time[idx]
            c_j, s_j = _optimal_drivers(model, alphabeta, tau, y_run[p])
            ge = np.einsum("nij,nj->ni", coeffs.gamma(y_run[p]), bundle.jump_e[idx])
            dz = np.sum(c_j * ge, axis=1)
            if np.any(np.abs(1.0 - dz) < JUMP_FACTOR_TOL):
                raise DegenerateJumpError("a simulated jump of Z equals 1; E(-Z) would vanish")
            dm = np.sum(np.einsum("nij,nj->ni", s_j, bundle.jump_xi[idx]) * ge, axis=1)
            after = e_run[p] * (1.0 - dz)
            I_M[p, i + 1] += dm / e_run[p]
            # post-jump E in the bracket term keeps X* an exact solution at jump times
            I_MZ[p, i + 1] += dm * dz / after
            mz[p, i] += dm * dz
            factors[idx] = (1.0 - dz) * np.exp(dz)
            e_run[p] = after
            dz_jump[p] += dz
            dm_jump[p] += dm
            y_run[p] += ge

        I_M[:, i + 1] += I_M[:, i] + dm_cont / E[:, i]
        I_MZ[:, i + 1] += I_MZ[:, i]
        E[:, i + 1] = e_run * np.exp(-dz_cont - 0.5 * zz_c[:, i])
        Z[:, i + 1] = Z[:, i] + dz_cont + dz_jump
        M[:, i + 1] = M[:, i] + dm_cont + dm_jump
        y = y_run + dy_cont

    return StochasticExponentialPath(part, Z, zz_c, factors, E, M, mz, I_M, I_MZ)


def euler_optimal_wealth(model: MarketModel, alphabeta: AlphaBeta, bundle: PathBundle,
                         x0: float, y0: np.ndarray) -> np.ndarray:
    """
    Euler scheme for dX = -(X_- - w_hat) dZ + sqrt(lam / 2) dM on the grid of `bundle`,
    jumps applied at their epochs. Returns X on the grid, shape (N, n + 1).
    """
    coeffs = model.coeffs
    part = bundle.partition
    n_paths, n, _ = bundle.dW.shape
    w_hat, scale = alphabeta.w_hat, np.sqrt(0.5 * alphabeta.lam)
    m1 = model.jumps.m1
    y = np.tile(np.asarray(y0, dtype=float).ravel(), (n_paths, 1))
    X = np.empty((n_paths, n + 1))
    X[:, 0] = x0
    groups = bundle.step_jumps()
    for i in range(n):
        t0, dt = part.grid[i], part.steps[i]
        x = X[:, i]
        c, s_root = _optimal_drivers(model, alphabeta, t0, y)
        b, a = coeffs.b(y), coeffs.a(y)
        a_dw = np.einsum("nij,nj->ni", a, bundle.dW[:, i])
        dy_cont = b * dt + a_dw - np.einsum("nij,j->ni", coeffs.gamma(y), m1) * dt
        dm_cont = np.einsum("nij,nij->n", np.einsum("nik,nkj->nij", s_root, a), bundle.dWs[:, i])
        x_run, y_run = x.copy(), y.copy()
        for idx in groups[i]:
            p = bundle.jump_path[idx]
            c_j, s_j = _optimal_drivers(model, alphabeta, bundle.jump_time[idx], y_run[p])
            ge = np.einsum("nij,nj->ni", coeffs.gamma(y_run[p]), bundle.jump_e[idx])
            dm = np.sum(np.einsum("nij,nj->ni", s_j, bundle.jump_xi[idx]) * ge, axis=1)
            x_run[p] += -(x_run[p] - w_hat) * np.sum(c_j * ge, axis=1) + scale * dm
            y_run[p] += ge
        X[:, i + 1] = x_run - (x - w_hat) * np.sum(c * dy_cont, axis=1) + scale * dm_cont
        y = y_run + dy_cont
    return X


def simulate_stochastic_exponential_euler(model: MarketModel, alphabeta: AlphaBeta, bundle: PathBundle,
                                          y0: np.ndarray) -> np.ndarray:
    """Euler scheme for dE = -E_- dZ; every jump multiplies E by (1 - dZ). Shape (N, n + 1)"""
    coeffs = model.coeffs
    part = bundle.partition
    n_paths, n, _ = bundle.dW.shape
    m1 = model.jumps.m1
    y = np.tile(np.asarray(y0, dtype=float).ravel(), (n_paths, 1))
    E = np.ones((n_paths, n + 1))
    groups = bundle.step_jumps()
    for i in range(n):
        dt = part.steps[i]
        c, _ = _optimal_drivers(model, alphabeta, part.grid[i], y)
        b, a = coeffs.b(y), coeffs.a(y)
        dy_cont = b * dt + np.einsum("nij,nj->ni", a, bundle.dW[:, i]) \
            - np.einsum("nij,j->ni", coeffs.gamma(y), m1) * dt
        e_run, y_run = E[:, i].copy(), y.copy()
        for idx in groups[i]:
            p = bundle.jump_path[idx]
            c_j, _ = _optimal_drivers(model, alphabeta, bundle.jump_time[idx], y_run[p])
            ge = np.einsum("nij,nj->ni", coeffs.gamma(y_run[p]), bundle.jump_e[idx])
            e_run[p] *= 1.0 - np.sum(c_j * ge, axis=1)
            y_run[p] += ge
        E[:, i + 1] = e_run - E[:, i] * np.sum(c * dy_cont, axis=1)
        y = y_run + dy_cont
    return E


@dataclass(frozen=True, eq=False)
class ExplicitWealthResult:
    """
    Terminal explicit optimal wealth, wealth samples at requested times and,
    per coarse step count, the RMS terminal gap to the Euler scheme on the same noise
    (and the same for E(-Z) against its own Euler scheme).
    """
    terminal: np.ndarray
    at_times: Dict[float, np.ndarray]
    wealth_gaps: Dict[int, Tuple[float, float]]
    exponential_gaps: Dict[int, Tuple[float, float]]


def _rms(squares: np.ndarray) -> Tuple[float, float]:
    mean = float(squares.mean())
    se_mean = float(squares.std(ddof=1) / np.sqrt(squares.size)) if squares.size > 1 else float("inf")
    rms = np.sqrt(mean)
    return rms, (se_mean / (2.0 * rms) if rms > 0 else 0.0)


def simulate_optimal_wealth_explicit(model: MarketModel, alphabeta: AlphaBeta, x0: float, y0: np.ndarray,
                                     config: SimConfig, compare_steps: Sequence[int] = (),
                                     times: Sequence[float] = (), block_paths: int = 4096,
                                     tag: str = "explicit-wealth") -> ExplicitWealthResult:
    """
    Explicit optimal wealth on a grid of config.steps points, optionally compared
    with the Euler scheme on every coarser grid in compare_steps (same noise).
    """
    if alphabeta.w_hat is None:
        raise InputError("explicit optimal wealth needs w_hat")
    fine = Partition.uniform(model.horizon, config.steps)
    for n in compare_steps:
        if config.steps % n:
            raise InputError(f"comparison grid {n} does not divide the reference grid {config.steps}")
    marks = {float(t): fine.index_at(t) for t in times}

    def _block(rng: np.random.Generator, size: int):
        bundle = PathBundle.simulate(model, fine, size, rng)
        expo = stochastic_exponential(model, alphabeta, bundle, y0)
        wealth = expo.wealth(x0, alphabeta.w_hat, alphabeta.lam)
        gaps, egaps = {}, {}
        for n in compare_steps:
            coarse = bundle.coarsen(config.steps // n)
            euler = euler_optimal_wealth(model, alphabeta, coarse, x0, y0)
            gaps[n] = (euler[:, -1] - wealth[:, -1]) ** 2
            e_euler = simulate_stochastic_exponential_euler(model, alphabeta, coarse, y0)
            egaps[n] = (e_euler[:, -1] - expo.E[:, -1]) ** 2
        return wealth[:, -1], {t: wealth[:, k] for t, k in marks.items()}, gaps, egaps

    blocks = run_blocks(_block, config.seed, tag, config.paths, workers=config.workers,
                        block_paths=block_paths)
    terminal = np.concatenate([blk[0] for blk in blocks])
    at_times = {t: np.concatenate([blk[1][t] for blk in blocks]) for t in marks}
    wealth_gaps = {n: _rms(np.concatenate([blk[2][n] for blk in blocks])) for n in compare_steps}
    exp_gaps = {n: _rms(np.concatenate([blk[3][n] for blk in blocks])) for n in compare_steps}
    return ExplicitWealthResult(terminal, at_times, wealth_gaps, exp_gaps)


def lagrange_multiplier_closed(rate: float, horizon: float, x0: float, zhat: float) -> float:
    """w_hat = (zhat e^{KT} - x0) / (e^{KT} - 1)"""
    if not rate > 0:
        raise DomainError(f"the closed-form multiplier needs K > 0, got K={rate}")
    growth = np.expm1(rate * horizon)
    return float((zhat * (growth + 1.0) - x0) / growth)


@dataclass(frozen=True)
class MultiplierEstimate:
    w_hat: float
    se: float
    method: str
    exponential_mean: float
    exponential_se: float

    def to_dict(self) -> Dict[str, float]:
        return {"w_hat": self.w_hat, "se": self.se, "method": self.method}


def lagrange_multiplier_mc(model: MarketModel, alphabeta: AlphaBeta, x0: float, y0: np.ndarray,
                           zhat: float, config: SimConfig, tag: str = "lagrange") -> MultiplierEstimate:
    """
    w_hat = (zhat - sqrt(lam/2) E[G] - x0 E[E_T]) / (1 - E[E_T]),
    G = (int dM/E_- + int d[M,Z]/E) E_T, with a delta-method standard error.

    Raises:
        InconclusiveEstimateError: 1 - E[E_T] within 3 SE of zero
    """
    partition = Partition.uniform(model.horizon, config.steps)

    def _block(rng: np.random.Generator, size: int):
        bundle = PathBundle.simulate(model, partition, size, rng)
        expo = stochastic_exponential(model, alphabeta, bundle, y0)
        e_t = expo.E[:, -1]
        return e_t, (expo.integral_dM[:, -1] + expo.integral_dMZ[:, -1]) * e_t

    blocks = run_blocks(_block, config.seed, tag, config.paths, workers=config.workers)
    e_t = np.concatenate([blk[0] for blk in blocks])
    g = np.concatenate([blk[1] for blk in blocks])
    n = e_t.size
    scale = np.sqrt(0.5 * alphabeta.lam)
    a_mean, g_mean = float(e_t.mean()), float(g.mean())
    cov = np.cov(np.vstack([e_t, g])) / n
    a_se = float(np.sqrt(cov[0, 0]))
    denom = 1.0 - a_mean
    if abs(denom) <= 3.0 * a_se:
        raise InconclusiveEstimateError(
            f"1 - E[E(-Z)_T] = {denom:.3e} is within 3 SE ({a_se:.3e}) of zero")
    w_hat = (zhat - scale * g_mean - x0 * a_mean) / denom
    grad = np.array([(zhat - scale * g_mean - x0) / denom ** 2, -scale / denom])
    se = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
    return MultiplierEstimate(float(w_hat), se, "monte-carlo", a_mean, a_se)


def mean_wealth_curve(rate: float, x0: float, w_hat: float, t):
    """E X*_t = w_hat + (x0 - w_hat) e^{-K t}"""
    return w_hat + (x0 - w_hat) * np.exp(-rate * np.asarray(t, dtype=float))
