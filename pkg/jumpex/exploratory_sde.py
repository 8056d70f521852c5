"""
Continuous-time exploratory dynamics.

For a Gaussian feedback law N(mu(t, x, y), Theta(t, y)) the wealth follows

    dX = mu^T b dt + mu^T a dW + tr[Theta^{1/2} a dW'^T]     (W' a D x D sheet)
    Delta X = (mu + Theta^{1/2} xi)^T gamma e                  at a jump with mark (e, xi)

minus the compensator mu^T gamma m1 dt. Simulation is Euler between grid
points with every jump applied at its exact epoch.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import AdmissibilityError, InputError
from .levy_model import MarketModel, is_psd
from .randomized_discrete import Partition, batch_psd_sqrt
from .rng_streams import run_blocks

logger = logging.getLogger(__name__)

ENTROPY_CONST = 0.5 * np.log(2.0 * np.pi * np.e)
BLOWUP_LEVEL = 1e8


class GaussianFeedbackLaw:
    """
    Exploration law with mean (t, x, y) -> R^D and covariance (t, y) -> S^D_{++}.

    x has shape (N,), y has shape (N, D) and t is a float or an (N,) array of
    times; mean returns (N, D), cov (N, D, D).
    """

    label = "gaussian"
    degenerate = False

    def mean(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cov(self, t: float, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_independent(self) -> bool:
        """True when neither mean nor covariance depends on (x, y)"""
        return False

    def sqrt_cov(self, t: float, y: np.ndarray) -> np.ndarray:
        theta = self.cov(t, y)
        if self.degenerate:
            return np.zeros_like(theta)
        try:
            np.linalg.cholesky(theta)
        except np.linalg.LinAlgError:
            y = np.atleast_2d(y)
            worst = int(np.argmin(np.linalg.eigvalsh(theta).min(axis=-1))) if theta.ndim == 3 else 0
            t_bad = np.broadcast_to(np.asarray(t, dtype=float), (len(y),))[min(worst, len(y) - 1)]
            raise AdmissibilityError(
                f"law '{self.label}' has a non positive definite covariance at t={t_bad:.6g}, "
                f"y={y[min(worst, len(y) - 1)].tolist()}") from None
        return batch_psd_sqrt(theta)


class ConstantGaussianLaw(GaussianFeedbackLaw):
    """N(m, Theta) independent of (t, x, y)"""

    def __init__(self, m, cov, dimension: int = 1, label: Optional[str] = None):
        self.m = np.broadcast_to(np.asarray(m, dtype=float), (dimension,)).copy()
        cov = np.asarray(cov, dtype=float)
        self.theta = cov * np.eye(dimension) if cov.ndim == 0 else cov.reshape(dimension, dimension)
        self.label = label or f"constant:{self.m.tolist()},{self.theta.tolist()}"

    def mean(self, t, x, y):
        return np.broadcast_to(self.m, (len(x), self.m.size)).copy()

    def cov(self, t, y):
        y = np.atleast_2d(y)
        return np.broadcast_to(self.theta, (len(y),) + self.theta.shape).copy()

    def state_independent(self) -> bool:
        return True


class FunctionGaussianLaw(GaussianFeedbackLaw):
    def __init__(self, mean_fn: Callable, cov_fn: Callable, label: str = "custom",
                 state_independent: bool = False):
        self._mean_fn = mean_fn
        self._cov_fn = cov_fn
        self._state_independent = state_independent
        self.label = label

    def mean(self, t, x, y):
        return self._mean_fn(t, x, y)

    def cov(self, t, y):
        return self._cov_fn(t, y)

    def state_independent(self) -> bool:
        return self._state_independent


class ScaledGaussianLaw(GaussianFeedbackLaw):
    """Base law with its mean and covariance multiplied by constants"""

    def __init__(self, base: GaussianFeedbackLaw, mean_factor: float = 1.0, cov_factor: float = 1.0):
        if not cov_factor > 0:
            raise InputError(f"covariance factor must be positive, got {cov_factor}")
        self.base = base
        self.mean_factor = mean_factor
        self.cov_factor = cov_factor
        self.label = f"perturbed:{mean_factor:g},{cov_factor:g}({base.label})"

    def mean(self, t, x, y):
        return self.mean_factor * self.base.mean(t, x, y)

    def cov(self, t, y):
        return self.cov_factor * self.base.cov(t, y)

    def state_independent(self) -> bool:
        return self.base.state_independent()


def parse_law(name: str, dimension: int, optimal: Optional[GaussianFeedbackLaw] = None) -> GaussianFeedbackLaw:
    """
    Build a law from its command-line name.

    Accepted: "optimal", "perturbed:<mean factor>[,<cov factor>]" (applied to
    the optimal law), "constant:<m>,<v>" (mean m * ones, covariance v * I).
    """
    kind, _, args = name.partition(":")
    if kind == "optimal":
        if optimal is None:
            raise InputError("law 'optimal' needs a solved optimal law")
        return optimal
    if kind == "perturbed":
        if optimal is None:
            raise InputError("law 'perturbed' needs a solved optimal law")
        factors = [float(f) for f in args.split(",") if f]
        if not 1 <= len(factors) <= 2:
            raise InputError(f"expected perturbed:<mean factor>[,<cov factor>], got '{name}'")
        return ScaledGaussianLaw(optimal, factors[0], factors[1] if len(factors) == 2 else 1.0)
    if kind == "constant":
        parts = [float(f) for f in args.split(",") if f]
        if len(parts) != 2:
            raise InputError(f"expected constant:<m>,<v>, got '{name}'")
        return ConstantGaussianLaw(parts[0], parts[1], dimension, label=name)
    raise InputError(f"unknown law '{name}'; use optimal, perturbed:<f>[,<g>] or constant:<m>,<v>")


@dataclass(frozen=True)
class SimConfig:
    steps: int = 512
    paths: int = 100_000
    seed: int = 0
    scheme: str = "euler-event"
    workers: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1 or self.paths < 1:
            raise InputError(f"steps and paths must be >= 1, got {self.steps}, {self.paths}")
        if self.scheme != "euler-event":
            raise InputError(f"unknown scheme '{self.scheme}'")


@dataclass(frozen=True)
class CostEstimate:
    value: float
    se: float
    terminal_mean: float
    terminal_mean_se: float
    terminal_second_moment: float
    loss: float
    loss_se: float
    entropy_integral: float

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in self.__dict__.items()}


@dataclass(frozen=True, eq=False)
class PathBundle:
    """
    Shared noise of one batch of paths: Brownian increments of W (N, n, D) and
    of the sheet W' (N, n, D, D), plus the jump marks in flat arrays sorted by
    (path, step, time). Y and X are attached once a simulator has run.
    """
    partition: Partition
    dW: np.ndarray
    dWs: np.ndarray
    jump_path: np.ndarray
    jump_step: np.ndarray
    jump_time: np.ndarray
    jump_e: np.ndarray
    jump_xi: np.ndarray
    Y: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None

    @classmethod
    def simulate(cls, model: MarketModel, partition: Partition, n_paths: int,
                 rng: np.random.Generator) -> "PathBundle":
        d, n = model.dimension, partition.n
        steps = partition.steps
        scale = np.sqrt(steps)[None, :, None]
        dW = scale * rng.standard_normal((n_paths, n, d))
        dWs = scale[..., None] * rng.standard_normal((n_paths, n, d, d))
        jumps = model.jumps
        if jumps.active:
            counts = rng.poisson(jumps.intensity * steps[None, :], (n_paths, n))
        else:
            counts = np.zeros((n_paths, n), dtype=np.int64)
        flat = counts.ravel()
        total = int(flat.sum())
        cell = np.repeat(np.arange(flat.size), flat)
        path, step = np.divmod(cell, n)
        time = partition.grid[step] + steps[step] * rng.uniform(size=total)
        order = np.lexsort((time, step, path))
        e = jumps.sample_sizes(rng, total) if total else np.zeros((0, d))
        xi = rng.standard_normal((total, d))
        return cls(partition, dW, dWs, path[order], step[order], time[order], e, xi)

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def jump_rank(self) -> np.ndarray:
        """Position of each jump among the jumps of its (path, step) cell"""
        if self.jump_path.size == 0:
            return np.zeros(0, dtype=np.int64)
        key = self.jump_path * self.partition.n + self.jump_step
        starts = np.r_[0, np.flatnonzero(np.diff(key)) + 1]
        first = np.repeat(starts, np.diff(np.r_[starts, key.size]))
        return np.arange(key.size) - first

    def coarsen(self, factor: int) -> "PathBundle":
        """Same noise on the grid keeping every factor-th point"""
        coarse = self.partition.coarsen(factor)
        n_paths, n, d = self.dW.shape
        dW = self.dW.reshape(n_paths, coarse.n, factor, d).sum(axis=2)
        dWs = self.dWs.reshape(n_paths, coarse.n, factor, d, d).sum(axis=2)
        return PathBundle(coarse, dW, dWs, self.jump_path, self.jump_step // factor,
                          self.jump_time, self.jump_e, self.jump_xi)

    def step_jumps(self) -> List[List[np.ndarray]]:
        """For every step, the jump indices grouped by rank"""
        rank = self.jump_rank
        by_step: List[List[np.ndarray]] = [[] for _ in range(self.partition.n)]
        if self.jump_path.size == 0:
            return by_step
        order = np.lexsort((self.jump_path, rank, self.jump_step))
        step_sorted = self.jump_step[order]
        bounds = np.searchsorted(step_sorted, np.arange(self.partition.n + 1))
        for i in range(self.partition.n):
            idx = order[bounds[i]:bounds[i + 1]]
            if idx.size:
                r = rank[idx]
                by_step[i] = [idx[r == k] for k in range(int(r.max()) + 1)]
        return by_step

    def to_frame(self, max_paths: int = 10) -> pd.DataFrame:
        """Wide table of Y and X for the first paths, one row per (path, t)"""
        if self.X is None or self.Y is None:
            raise InputError("bundle carries no simulated state")
        rows = []
        d = self.Y.shape[-1]
        for p in range(min(max_paths, self.n_paths)):
            frame = pd.DataFrame(self.Y[p], columns=[f"Y_{k + 1}" for k in range(d)])
            frame.insert(0, "t", self.partition.grid)
            frame.insert(0, "path", p)
            frame["X"] = self.X[p]
            rows.append(frame)
        return pd.concat(rows, ignore_index=True)


@dataclass(frozen=True, eq=False)
class ExploratoryResult:
    cost: CostEstimate
    terminal: np.ndarray
    entropy: np.ndarray
    sample: Optional[PathBundle] = None


def gaussian_entropy(theta: np.ndarray) -> np.ndarray:
    """(D/2) ln(2 pi e) + ln det(Theta)/2, -inf for singular matrices"""
    sign, logdet = np.linalg.slogdet(theta)
    d = theta.shape[-1]
    return np.where(sign > 0, d * ENTROPY_CONST + 0.5 * logdet, -np.inf)


def entropy_rate(law: GaussianFeedbackLaw, t: float, x: float, y: np.ndarray) -> float:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    value = float(gaussian_entropy(law.cov(t, y)[0]))
    if not np.isfinite(value):
        logger.warning("law '%s' is singular at t=%s, y=%s; differential entropy is -inf",
                       law.label, t, y[0].tolist())
    return value


def euler_exploratory(model: MarketModel, law: GaussianFeedbackLaw, bundle: PathBundle,
                      x0: float, y0: np.ndarray, keep_paths: bool = False) -> Tuple[PathBundle, np.ndarray]:
    """
    Run the exploratory wealth SDE on the noise of `bundle`.

    Jumps are applied at their exact epochs and the compensator m1 dt is
    removed between epochs with the law read at the current state, so the
    jump part is a martingale for any m1. This is the convention of
    draw_step_noise for the discrete scheme.

    Returns:
        (bundle with X_T (and full Y, X paths when keep_paths) attached,
         per-path entropy integral of the law along the path)
    """
    coeffs = model.coeffs
    part = bundle.partition
    n_paths, n, d = bundle.dW.shape
    m1 = model.jumps.m1
    compensated = model.jumps.active and np.any(m1 != 0)
    x = np.full(n_paths, float(x0))
    y = np.tile(np.asarray(y0, dtype=float).ravel(), (n_paths, 1))
    entropy = np.zeros(n_paths)
    X_path = np.empty((n_paths, n + 1)) if keep_paths else None
    Y_path = np.empty((n_paths, n + 1, d)) if keep_paths else None
    if keep_paths:
        X_path[:, 0], Y_path[:, 0] = x, y
    jump_groups = bundle.step_jumps()

    for i in range(n):
        t0, dt = part.grid[i], part.steps[i]
        mu = law.mean(t0, x, y)
        root = law.sqrt_cov(t0, y)
        b, a = coeffs.b(y), coeffs.a(y)
        a_dw = np.einsum("nij,nj->ni", a, bundle.dW[:, i])
        dx_cont = np.sum(mu * b, axis=1) * dt + np.sum(mu * a_dw, axis=1) \
            + np.einsum("nij,nij->n", np.einsum("nik,nkj->nij", root, a), bundle.dWs[:, i])
        dy_cont = b * dt + a_dw

        xj, yj = x.copy(), y.copy()
        mu_now, root_now = mu.copy(), root.copy()
        last = np.full(n_paths, t0)
        for idx in jump_groups[i]:
            p = bundle.jump_path[idx]
            tau = bundle.jump_time[idx]
            g = coeffs.gamma(yj[p])
            if compensated:
                drift = (g @ m1) * (tau - last[p])[:, None]
                xj[p] -= np.sum(mu_now[p] * drift, axis=1)
                yj[p] -= drift
            ge = np.einsum("nij,nj->ni", g, bundle.jump_e[idx])
            action = mu_now[p] + np.einsum("nij,nj->ni", root_now[p], bundle.jump_xi[idx])
            xj[p] += np.sum(action * ge, axis=1)
            yj[p] += ge
            last[p] = tau
            # the law is re-read at the post-jump state for the rest of the step
            mu_now[p] = law.mean(tau, xj[p], yj[p])
            root_now[p] = law.sqrt_cov(tau, yj[p])
        if compensated:
            drift = np.einsum("nij,j->ni", coeffs.gamma(yj), m1) * (t0 + dt - last)[:, None]
            xj -= np.sum(mu_now * drift, axis=1)
            yj -= drift

        if not law.degenerate:
            entropy += dt * gaussian_entropy(law.cov(t0 + 0.5 * dt, y))
        x = xj + dx_cont
        y = yj + dy_cont
        if keep_paths:
            X_path[:, i + 1], Y_path[:, i + 1] = x, y

    if keep_paths:
        bundle = replace(bundle, X=X_path, Y=Y_path)
    else:
        bundle = replace(bundle, X=x[:, None], Y=y[:, None, :])
    return bundle, entropy


def simulate_exploratory(model: MarketModel, law: GaussianFeedbackLaw, x0: float, y0: np.ndarray,
                         config: SimConfig, w_hat: float, lam: float,
                         keep_paths: bool = False, tag: str = "exploratory") -> ExploratoryResult:
    """
    Monte Carlo estimate of the entropy-regularized cost

        V = E[(X_T - w_hat)^2] - lam * E[int_0^T Ent(law) ds]

    Args:
        model: market model
        law: Gaussian feedback law
        x0, y0: initial wealth and state
        config: steps, paths, seed
        w_hat: Lagrange multiplier
        lam: exploration weight
        keep_paths: attach full Y, X paths of the first block to the result

    Returns:
        ExploratoryResult with the CostEstimate and per-path terminal wealth
    """
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    if law.degenerate and lam > 0:
        raise AdmissibilityError(f"law '{law.label}' is degenerate; only lambda = 0 is allowed")
    partition = Partition.uniform(model.horizon, config.steps)

    def _block(rng: np.random.Generator, size: int):
        bundle = PathBundle.simulate(model, partition, size, rng)
        return euler_exploratory(model, law, bundle, x0, y0, keep_paths=keep_paths)

    blocks = run_blocks(_block, config.seed, tag, config.paths, workers=config.workers)
    terminal = np.concatenate([b.X[:, -1] for b, _ in blocks])
    entropy = np.concatenate([e for _, e in blocks])
    if lam > 0 and not np.all(np.isfinite(entropy)):
        raise AdmissibilityError(f"law '{law.label}' has -inf entropy along simulated paths")
    loss = (terminal - w_hat) ** 2
    total = loss - lam * entropy if lam > 0 else loss
    n = terminal.size
    root_n = np.sqrt(n)
    cost = CostEstimate(
        value=float(total.mean()),
        se=float(total.std(ddof=1) / root_n) if n > 1 else float("inf"),
        terminal_mean=float(terminal.mean()),
        terminal_mean_se=float(terminal.std(ddof=1) / root_n) if n > 1 else float("inf"),
        terminal_second_moment=float(np.mean(terminal ** 2)),
        loss=float(loss.mean()),
        loss_se=float(loss.std(ddof=1) / root_n) if n > 1 else float("inf"),
        entropy_integral=float(entropy.mean()),
    )
    logger.debug("law %s: cost %.6f +- %.6f over %d paths", law.label, cost.value, cost.se, n)
    return ExploratoryResult(cost, terminal, entropy, blocks[0][0] if keep_paths else None)


def admissibility_probe(model: MarketModel, law: GaussianFeedbackLaw,
                        states: Tuple[np.ndarray, np.ndarray, np.ndarray]) -> Dict:
    """
    Evaluate the integrability integrand

        mu^T A mu + tr[A Theta] + int int |(mu + Theta^{1/2} u)^T gamma e|^2 nu(de) phi(u) du
        = mu^T Sigma mu + tr[Sigma Theta]

    and the drift |mu^T b| at the given (t, x, y) states.
    """
    times, xs, ys = states
    times = np.atleast_1d(np.asarray(times, dtype=float))
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    coeffs, m2 = model.coeffs, model.jumps.m2
    integrand, drift = [], []
    for t, x, y in zip(times, xs, ys):
        mu = law.mean(float(t), np.array([x]), y[None, :])[0]
        theta = law.cov(float(t), y[None, :])[0]
        a, g, b = coeffs.a(y), coeffs.gamma(y), coeffs.b(y)
        sig = a @ a.T + g @ m2 @ g.T
        integrand.append(float(mu @ sig @ mu + np.trace(sig @ theta)))
        drift.append(float(abs(mu @ b)))
    integrand = np.asarray(integrand)
    blowup = bool(np.any(~np.isfinite(integrand)) or np.any(integrand > BLOWUP_LEVEL))
    if blowup:
        logger.warning("law '%s' integrand exceeds %g at some probed state", law.label, BLOWUP_LEVEL)
    psd_ok = all(is_psd(law.cov(float(t), y[None, :])[0]) for t, y in zip(times, ys))
    return {
        "values": integrand,
        "max": float(np.max(integrand)),
        "mean": float(np.mean(integrand)),
        "drift_max": float(np.max(drift)),
        "blowup": blowup,
        "covariance_psd": psd_ok,
    }


def simulate_wang_zhou(rho: float, lam: float, w_hat: float, x0: float, horizon: float,
                       steps: int, n_paths: int, seed: int, times: Optional[List[float]] = None,
                       tag: str = "wang-zhou") -> Dict[float, np.ndarray]:
    """
    Euler scheme for the one-dimensional no-jump optimal wealth written as

        dX = -rho^2 (X - w_hat) ds + sqrt(rho^2 (X - w_hat)^2 + (lam / 2) e^{rho^2 (T - s)}) dB

    Returns:
        Mapping time -> samples of X at that time (T when times is None)
    """
    partition = Partition.uniform(horizon, steps)
    times = [horizon] if times is None else list(times)
    marks = {t: partition.index_at(t) for t in times}

    def _block(rng: np.random.Generator, size: int):
        x = np.full(size, float(x0))
        out = {t: x.copy() for t, k in marks.items() if k == 0}
        for i, dt in enumerate(partition.steps):
            s = partition.grid[i]
            dev = x - w_hat
            vol = np.sqrt(rho ** 2 * dev ** 2 + 0.5 * lam * np.exp(rho ** 2 * (horizon - s)))
            x = x - rho ** 2 * dev * dt + vol * np.sqrt(dt) * rng.standard_normal(size)
            for t, k in marks.items():
                if k == i + 1:
                    out[t] = x.copy()
        return out

    blocks = run_blocks(_block, seed, tag, n_paths)
    return {t: np.concatenate([b[t] for b in blocks]) for t in times}
