"""
Market model: coefficient field (b, a, gamma), a finite-activity jump measure,
the damping function psi and the analytic quantities derived from them.

Every array function here accepts a leading batch axis, so y may be a single
point of shape (D,) or a stack of shape (N, D).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from numpy.polynomial import hermite_e, legendre
from scipy import linalg
from scipy.stats import qmc

from .errors import ModelValidationError, UnsupportedJumpLawError

logger = logging.getLogger(__name__)

JUMP_LAWS = ("atoms", "gaussian", "uniform", "none")
DEFAULT_QUADRATURE_NODES = 64
# Gauss-Hermite nodes per mark coordinate in the augmented-measure integrals
MARK_NODES = 64


def min_eigenvalue(matrix: np.ndarray) -> float:
    sym = 0.5 * (matrix + np.swapaxes(matrix, -1, -2))
    return float(np.min(np.linalg.eigvalsh(sym)))


def is_psd(matrix: np.ndarray, tol: float = 1e-10) -> bool:
    return min_eigenvalue(matrix) >= -tol


def gaussian_nodes(n_nodes: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tensor Gauss-Hermite rule for the standard normal law on R^dim.

    Returns:
        (points of shape (n_nodes**dim, dim), probability weights summing to 1)
    """
    x, w = hermite_e.hermegauss(n_nodes)
    w = w / np.sqrt(2.0 * np.pi)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    weights = np.meshgrid(*([w] * dim), indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=-1)
    return points, np.prod(np.stack([g.ravel() for g in weights], axis=-1), axis=-1)


@dataclass(frozen=True, eq=False)
class JumpSpec:
    """
    Compound-Poisson jump measure nu = intensity * (jump-size law).

    m1 and m2 are moments of nu itself, so they already carry the intensity.
    """
    intensity: float
    law: str = "none"
    atoms: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    low: Optional[np.ndarray] = None
    high: Optional[np.ndarray] = None
    quadrature_nodes: int = DEFAULT_QUADRATURE_NODES
    dimension: int = 1

    def __post_init__(self):
        if self.law not in JUMP_LAWS:
            raise UnsupportedJumpLawError(
                f"jump law '{self.law}' has no quadrature rule; choose one of {', '.join(JUMP_LAWS)}")
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ModelValidationError(f"jump intensity must be >= 0, got {self.intensity}")
        if self.law == "atoms":
            atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
            probs = np.asarray(self.probabilities, dtype=float).ravel()
            if atoms.shape != (probs.size, self.dimension):
                raise ModelValidationError(
                    f"atoms must have shape ({probs.size}, {self.dimension}), got {atoms.shape}")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise ModelValidationError(
                    f"atom probabilities must be >= 0 and sum to 1 within 1e-12, sum is {probs.sum():.15f}")
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "probabilities", probs)
        elif self.law == "gaussian":
            mean = np.zeros(self.dimension) if self.mean is None else np.asarray(self.mean, float).ravel()
            cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
            if cov.shape != (self.dimension, self.dimension) or not is_psd(cov):
                raise ModelValidationError("gaussian jump covariance must be a PSD D x D matrix")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "cov", cov)
        elif self.law == "uniform":
            low = np.asarray(self.low, dtype=float).ravel()
            high = np.asarray(self.high, dtype=float).ravel()
            if low.size != self.dimension or high.size != self.dimension or np.any(high <= low):
                raise ModelValidationError("uniform jump box needs low < high in every coordinate")
            object.__setattr__(self, "low", low)
            object.__setattr__(self, "high", high)
        if self.quadrature_nodes < 2:
            raise ModelValidationError(f"quadrature_nodes must be >= 2, got {self.quadrature_nodes}")
        if not is_psd(self.m2):
            raise ModelValidationError(f"second moment m2 is not PSD (min eigenvalue {min_eigenvalue(self.m2):.3e})")

    @property
    def active(self) -> bool:
        return self.law != "none" and self.intensity > 0

    def size_nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and probability weights integrating against the jump-size law"""
        if self.law == "atoms":
            return self.atoms, self.probabilities
        if self.law == "gaussian":
            z, w = gaussian_nodes(self.quadrature_nodes, self.dimension)
            return self.mean + z @ _sym_sqrt(self.cov), w
        if self.law == "uniform":
            x, w = legendre.leggauss(self.quadrature_nodes)
            grids = np.meshgrid(*([x] * self.dimension), indexing="ij")
            wgrid = np.meshgrid(*([w / 2.0] * self.dimension), indexing="ij")
            unit = np.stack([g.ravel() for g in grids], axis=-1)
            points = self.low + 0.5 * (unit + 1.0) * (self.high - self.low)
            return points, np.prod(np.stack([g.ravel() for g in wgrid], axis=-1), axis=-1)
        return np.zeros((1, self.dimension)), np.zeros(1)

    @property
    def m1(self) -> np.ndarray:
        if not self.active:
            return np.zeros(self.dimension)
        if self.law == "atoms":
            return self.intensity * self.probabilities @ self.atoms
        if self.law == "gaussian":
            return self.intensity * self.mean
        return self.intensity * 0.5 * (self.low + self.high)

    @property
    def m2(self) -> np.ndarray:
        if not self.active:
            return np.zeros((self.dimension, self.dimension))
        if self.law == "atoms":
            return self.intensity * np.einsum("k,ki,kj->ij", self.probabilities, self.atoms, self.atoms)
        if self.law == "gaussian":
            return self.intensity * (self.cov + np.outer(self.mean, self.mean))
        centre = 0.5 * (self.low + self.high)
        return self.intensity * (np.diag((self.high - self.low) ** 2 / 12.0) + np.outer(centre, centre))

    def sample_sizes(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw `count` jump sizes, shape (count, D)"""
        if self.law == "atoms":
            idx = rng.choice(len(self.probabilities), size=count, p=self.probabilities)
            return self.atoms[idx]
        if self.law == "gaussian":
            return rng.multivariate_normal(self.mean, self.cov, size=count, method="eigh")
        if self.law == "uniform":
            return rng.uniform(self.low, self.high, size=(count, self.dimension))
        return np.zeros((count, self.dimension))

    def without_jumps(self) -> "JumpSpec":
        return JumpSpec(intensity=0.0, law="none", dimension=self.dimension)


def _sym_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh(matrix)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@dataclass(frozen=True)
class Damping:
    """psi(x) = sqrt(|x|^2 + c^2) - c"""
    c: float = 0.5

    def __post_init__(self):
        if not self.c > 0:
            raise ModelValidationError(f"damping constant c must be positive, got {self.c}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        # a bare scalar is a point of R^1
        sq = x * x if x.ndim == 0 else np.sum(x * x, axis=-1)
        # sq / (sqrt(sq + c^2) + c) avoids cancellation for tiny jumps
        return sq / (np.sqrt(sq + self.c ** 2) + self.c)


class CoefficientField:
    """Base class for y -> (b(y), a(y), gamma(y))"""

    variant = "abstract"

    def __init__(self, dimension: int):
        self.dimension = dimension

    def b(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def a(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gamma(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_independent(self) -> bool:
        return False


class ConstantCoefficients(CoefficientField):
    variant = "constant"

    def __init__(self, b, a, gamma):
        self.b_vec = np.atleast_1d(np.asarray(b, dtype=float))
        dimension = self.b_vec.size
        self.a_mat = np.asarray(a, dtype=float).reshape(dimension, dimension)
        self.gamma_mat = np.asarray(gamma, dtype=float).reshape(dimension, dimension)
        super().__init__(dimension)

    def _broadcast(self, value: np.ndarray, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        lead = y.shape[:-1]
        return np.broadcast_to(value, lead + value.shape)

    def b(self, y):
        return self._broadcast(self.b_vec, y)

    def a(self, y):
        return self._broadcast(self.a_mat, y)

    def gamma(self, y):
        return self._broadcast(self.gamma_mat, y)

    def state_independent(self) -> bool:
        return True


class UField:
    """Matrix field y -> U(y), symmetric and uniformly positive definite"""

    kind = "identity"

    def __call__(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        eye = np.eye(y.shape[-1])
        return np.broadcast_to(eye, y.shape[:-1] + eye.shape)


class CosineUField(UField):
    """U(y) = diag(base + amplitude * cos(frequency * y_d)), base > |amplitude|"""

    kind = "cosine"

    def __init__(self, base: float, amplitude: float, frequency: float):
        if not base > abs(amplitude):
            raise ModelValidationError(
                f"cosine U field needs base > |amplitude| to stay positive definite, got {base}, {amplitude}")
        self.base = base
        self.amplitude = amplitude
        self.frequency = frequency

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        diag = self.base + self.amplitude * np.cos(self.frequency * y)
        out = np.zeros(y.shape + (y.shape[-1],))
        idx = np.arange(y.shape[-1])
        out[..., idx, idx] = diag
        return out


class ProportionalCoefficients(CoefficientField):
    """b = U(y) b_tilde, a = U(y) a_tilde, gamma = U(y) gamma_tilde"""

    variant = "proportional"

    def __init__(self, b_tilde, a_tilde, gamma_tilde, u_field: Optional[UField] = None):
        self.b_tilde = np.atleast_1d(np.asarray(b_tilde, dtype=float))
        dimension = self.b_tilde.size
        self.a_tilde = np.asarray(a_tilde, dtype=float).reshape(dimension, dimension)
        self.gamma_tilde = np.asarray(gamma_tilde, dtype=float).reshape(dimension, dimension)
        self.u_field = u_field or UField()
        super().__init__(dimension)

    def b(self, y):
        return np.einsum("...ij,j->...i", self.u_field(y), self.b_tilde)

    def a(self, y):
        return np.einsum("...ij,jk->...ik", self.u_field(y), self.a_tilde)

    def gamma(self, y):
        return np.einsum("...ij,jk->...ik", self.u_field(y), self.gamma_tilde)

    def state_independent(self) -> bool:
        return self.u_field.kind == "identity"


@dataclass(frozen=True, eq=False)
class MarketModel:
    coeffs: CoefficientField
    jumps: JumpSpec
    damping: Damping = field(default_factory=Damping)
    horizon: float = 1.0
    probe_count: int = 32
    probe_radius: float = 1.0

    def __post_init__(self):
        if not self.horizon > 0:
            raise ModelValidationError(f"horizon T must be positive, got {self.horizon}")
        if self.coeffs.dimension != self.jumps.dimension:
            raise ModelValidationError(
                f"coefficient dimension {self.coeffs.dimension} does not match jump dimension {self.jumps.dimension}")

    @property
    def dimension(self) -> int:
        return self.coeffs.dimension

    @property
    def integrator_dimension(self) -> int:
        """Length of vec(W, script-W, L^psi) = D^2 + 3D"""
        d = self.dimension
        return d * d + 3 * d

    def without_jumps(self) -> "MarketModel":
        return replace(self, jumps=self.jumps.without_jumps())

    def probe_points(self, y0: np.ndarray) -> np.ndarray:
        """Quasi-random Halton points in a box of half-width probe_radius around y0, y0 included"""
        y0 = np.asarray(y0, dtype=float).ravel()
        sampler = qmc.Halton(d=self.dimension, scramble=False)
        unit = sampler.random(self.probe_count)
        box = y0 + self.probe_radius * (2.0 * unit - 1.0)
        return np.vstack([y0, box])

    def validate(self, y0: np.ndarray) -> None:
        """
        Check the non-degeneracy conditions at the probe set.

        Raises:
            ModelValidationError: Sigma not positive definite, Sigma - A not PSD,
                or K(y) not constant for the proportional family
        """
        probes = self.probe_points(y0)
        for y in probes:
            sig = sigma_matrix(self, y)
            a = self.coeffs.a(y)
            if not is_psd(sig - a @ a.T):
                raise ModelValidationError(f"Sigma - A is not PSD at y={y.tolist()}")
        if isinstance(self.coeffs, ProportionalCoefficients):
            rates = [float(self.coeffs.b(y) @ np.linalg.solve(sigma_matrix(self, y), self.coeffs.b(y)))
                     for y in probes]
            if max(rates) - min(rates) > 1e-10:
                raise ModelValidationError(
                    f"K(y) = b^T Sigma^-1 b varies across probes (range {min(rates):.6g}..{max(rates):.6g})")
        logger.debug("model validated at %d probe points", len(probes))


def sigma_matrix(model: MarketModel, y: np.ndarray, check: bool = True) -> np.ndarray:
    """
    Sigma(y) = A(y) + gamma(y) m2 gamma(y)^T with A = a a^T.

    Args:
        model: market model
        y: state of shape (D,) or (N, D)
        check: run a Cholesky factorization on every returned matrix

    Returns:
        Symmetric matrix (or stack of matrices)
    """
    a = model.coeffs.a(y)
    g = model.coeffs.gamma(y)
    sig = a @ np.swapaxes(a, -1, -2) + g @ model.jumps.m2 @ np.swapaxes(g, -1, -2)
    sig = 0.5 * (sig + np.swapaxes(sig, -1, -2))
    if check:
        try:
            np.linalg.cholesky(sig)
        except np.linalg.LinAlgError:
            y_arr = np.atleast_2d(np.asarray(y, dtype=float))
            mins = np.atleast_1d(np.linalg.eigvalsh(sig).min(axis=-1))
            bad = int(np.argmin(mins)) if len(y_arr) > 1 else 0
            raise ModelValidationError(
                f"Sigma(y) is not positive definite at y={y_arr[bad].tolist()}")
    return sig


def psi(damping: Damping, x) -> np.ndarray:
    """sqrt(|x|^2 + c^2) - c for a point of R^D, a stack of points or a scalar (D = 1)"""
    return damping(x)


def sample_augmented_jump(model: MarketModel, rng: np.random.Generator,
                          size: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw (e, psi(e) xi) from the normalized augmented jump measure.

    Returns a single pair of (D,) vectors when size is None, otherwise
    two arrays of shape (size, D).
    """
    count = 1 if size is None else int(size)
    e = model.jumps.sample_sizes(rng, count)
    xi = rng.standard_normal((count, model.dimension))
    v = model.damping(e)[:, None] * xi
    if size is None:
        return e[0], v[0]
    return e, v


def augmented_nodes(model: MarketModel, mark_nodes: int = MARK_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quadrature for integrals against nu_L^psi on R^{2D}.

    Jump sizes use the rule of the jump law, the Gaussian mark u uses
    Gauss-Hermite; weights carry the intensity.

    Returns:
        (points of shape (K, 2D) holding (e, u), weights of shape (K,))
    """
    jumps = model.jumps
    if not jumps.active:
        return np.zeros((0, 2 * model.dimension)), np.zeros(0)
    e, we = jumps.size_nodes()
    u, wu = gaussian_nodes(mark_nodes, model.dimension)
    points = np.concatenate([np.repeat(e, len(u), axis=0), np.tile(u, (len(e), 1))], axis=1)
    weights = jumps.intensity * np.outer(we, wu).ravel()
    return points, weights


def augmented_jump_points(model: MarketModel, mark_nodes: int = MARK_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """Same as augmented_nodes, mapped to (e, psi(e) u) coordinates"""
    points, weights = augmented_nodes(model, mark_nodes)
    d = model.dimension
    e, u = points[:, :d], points[:, d:]
    return np.concatenate([e, model.damping(e)[:, None] * u], axis=1), weights


def psi_second_moment(model: MarketModel) -> float:
    """Integral of psi(e)^2 against nu"""
    if not model.jumps.active:
        return 0.0
    e, w = model.jumps.size_nodes()
    return float(model.jumps.intensity * np.sum(w * model.damping(e) ** 2))


def split_probe(model: MarketModel, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split u in R^{D^2+3D} (trailing axis) into (u_W, u_scriptW, u_J, u_xi)"""
    d = model.dimension
    return u[..., :d], u[..., d:d + d * d], u[..., d + d * d:2 * d + d * d], u[..., 2 * d + d * d:]


def limit_char_exponent(model: MarketModel, u: np.ndarray) -> np.ndarray:
    """
    Characteristic exponent kappa of vec(W, script-W, L^psi) at time 1.

        kappa(u) = |u_W|^2/2 + |u_sW|^2/2
                   + intensity E_e[1 - exp(i u_J.e) exp(-psi(e)^2 |u_xi|^2 / 2) + i u_J.e]

    The Gaussian mark is integrated out in closed form, the jump size by the
    quadrature of the jump law (exact for atoms).

    Args:
        model: market model
        u: probe of shape (D^2+3D,) or (P, D^2+3D)

    Returns:
        complex scalar, or array of shape (P,)
    """
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != model.integrator_dimension:
        raise ValueError(f"probe must have length {model.integrator_dimension}, got {u.shape[-1]}")
    u_w, u_sw, u_j, u_xi = split_probe(model, u)
    kappa = 0.5 * np.sum(u_w ** 2, axis=-1) + 0.5 * np.sum(u_sw ** 2, axis=-1) + 0j
    jumps = model.jumps
    if jumps.active:
        e, w = jumps.size_nodes()
        phase = np.tensordot(u_j, e, axes=([-1], [-1]))
        damp = np.exp(-0.5 * np.multiply.outer(np.sum(u_xi ** 2, axis=-1), model.damping(e) ** 2))
        integrand = 1.0 - np.exp(1j * phase) * damp + 1j * phase
        kappa = kappa + jumps.intensity * np.sum(integrand * w, axis=-1)
    return kappa
