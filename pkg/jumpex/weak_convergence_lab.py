"""
Empirical checks of the weak limit of the discrete integrator

    Z^n = vec(W^n, M^n, L^{n,psi})  ->  vec(W, W', L^psi)

through characteristic functions on a probe grid, test-function sums,
predictable characteristics and an independence check.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import InputError
from .levy_model import MarketModel, augmented_jump_points, limit_char_exponent
from .randomized_discrete import (ConstantLinearControl, LinearRandomizedControl, Partition,
                                  draw_step_noise, simulate_discrete_scenario)
from .rng_streams import BLOCK_PATHS, run_blocks

logger = logging.getLogger(__name__)

MIN_CF_SAMPLES = 1_000
MIN_STUDY_PATHS = 10_000
BLOCK_NAMES = ("W", "M", "J", "xi")
PROBE_NORMS = {
    "W": (0.1, 0.5, 1.0, 2.0, 4.0),
    "M": (0.1, 0.5, 1.0, 2.0, 4.0),
    "J": (0.5, 2.0, 5.0, 10.0, 25.0),
    "xi": (5.0, 20.0, 50.0, 100.0, 200.0),
}
MIXED_NORMS = (0.5, 1.0, 2.0)


def block_slices(dimension: int) -> Dict[str, slice]:
    d = dimension
    return {"W": slice(0, d), "M": slice(d, d + d * d), "J": slice(d + d * d, 2 * d + d * d),
            "xi": slice(2 * d + d * d, 3 * d + d * d)}


@dataclass(frozen=True, eq=False)
class ProbeGrid:
    points: np.ndarray
    times: Tuple[float, ...]
    blocks: Tuple[str, ...] = ()

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.any(np.all(points == 0, axis=1)):
            raise InputError("probe grid must contain u = 0")
        object.__setattr__(self, "points", points)
        if not self.blocks:
            object.__setattr__(self, "blocks", tuple("custom" for _ in points))

    @classmethod
    def default(cls, model: MarketModel, times: Sequence[float] = (0.5, 1.0)) -> "ProbeGrid":
        """24 probes: u = 0, five norms along each block, three mixed directions"""
        dim = model.integrator_dimension
        points, blocks = [np.zeros(dim)], ["zero"]
        for name, sl in block_slices(model.dimension).items():
            direction = np.zeros(dim)
            direction[sl] = 1.0 / np.sqrt(sl.stop - sl.start)
            for norm in PROBE_NORMS[name]:
                points.append(norm * direction)
                blocks.append(name)
        for norm in MIXED_NORMS:
            points.append(norm * np.ones(dim) / np.sqrt(dim))
            blocks.append("mixed")
        return cls(np.array(points), tuple(float(t) for t in times), tuple(blocks))

    @classmethod
    def for_block(cls, model: MarketModel, block: str, times: Sequence[float] = (0.5, 1.0)) -> "ProbeGrid":
        grid = cls.default(model, times)
        keep = [k for k, b in enumerate(grid.blocks) if b in ("zero", block)]
        return cls(grid.points[keep], grid.times, tuple(grid.blocks[k] for k in keep))


def empirical_cf(samples: np.ndarray, u: np.ndarray, min_samples: int = MIN_CF_SAMPLES):
    """(1/N) sum exp(i u.z) for samples of shape (N, p); u of shape (p,) or (P, p)"""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < min_samples:
        raise InputError(f"empirical CF needs at least {min_samples} samples, got {samples.shape[0]}")
    u = np.asarray(u, dtype=float)
    phase = samples @ u.T
    return np.cos(phase).mean(axis=0) + 1j * np.sin(phase).mean(axis=0)


def cf_standard_error(samples: np.ndarray, u: np.ndarray) -> np.ndarray:
    """sqrt((1 - |cf|^2) / N), never above 1 / sqrt(N)"""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    cf = empirical_cf(samples, u, min_samples=1)
    return np.sqrt(np.clip(1.0 - np.abs(cf) ** 2, 0.0, None) / samples.shape[0])


def smoothstep(r: np.ndarray) -> np.ndarray:
    """Quintic smootherstep: 0 below 0, 1 above 1, C^2 in between"""
    r = np.clip(r, 0.0, 1.0)
    return r ** 3 * (r * (6.0 * r - 15.0) + 10.0)


def smooth_truncation(z: np.ndarray, inner: float = 0.5, outer: float = 1.0) -> np.ndarray:
    """h(z) = z (1 - smoothstep((|z| - inner) / (outer - inner))); equals z on the inner ball"""
    r = np.linalg.norm(z, axis=-1, keepdims=True)
    return z * (1.0 - smoothstep((r - inner) / (outer - inner)))


@dataclass(frozen=True)
class VanishingFunction:
    """Bounded continuous g on R^{D^2+3D} that is zero on the ball of radius vanishing_radius"""
    fn: Callable[[np.ndarray], np.ndarray]
    vanishing_radius: float
    name: str = "g"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.fn(z)


def jump_bump(model: MarketModel, inner: float = 0.05, outer: float = 0.08) -> VanishingFunction:
    """g(z) = smoothstep((|z_L| - inner) / (outer - inner)) on the jump block z_L = (z_J, z_xi)"""
    start = block_slices(model.dimension)["J"].start

    def _g(z):
        r = np.linalg.norm(z[..., start:], axis=-1)
        return smoothstep((r - inner) / (outer - inner))

    return VanishingFunction(_g, inner, f"bump({inner:g},{outer:g})")


def jump_bump_square(model: MarketModel, inner: float = 0.05, outer: float = 0.08,
                     cap: float = 1.0) -> VanishingFunction:
    """Bump times min(|z_J|^2, cap)"""
    sl = block_slices(model.dimension)["J"]
    bump = jump_bump(model, inner, outer)

    def _g(z):
        return bump(z) * np.minimum(np.sum(z[..., sl] ** 2, axis=-1), cap)

    return VanishingFunction(_g, inner, f"bump-square({inner:g},{outer:g},{cap:g})")


def zero_function() -> VanishingFunction:
    return VanishingFunction(lambda z: np.zeros(np.shape(z)[:-1]), np.inf, "zero")


def check_vanishing(g: VanishingFunction, dimension: int, trials: int = 256) -> None:
    """
    Raises:
        InputError: g is nonzero somewhere on its claimed vanishing ball
    """
    if not g.vanishing_radius > 0:
        raise InputError(f"test function '{g.name}' must vanish on a ball around 0")
    radius = min(g.vanishing_radius, 1e6)
    rng = np.random.default_rng(0)
    direction = rng.standard_normal((trials, dimension))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    points = direction * (radius * rng.uniform(size=(trials, 1)) ** (1.0 / dimension))
    points = np.vstack([np.zeros(dimension), points, 0.999 * radius * direction])
    if np.any(np.asarray(g(points)) != 0):
        raise InputError(f"test function '{g.name}' does not vanish on the ball of radius {g.vanishing_radius}")


class IntegratorEnsemble:
    """
    Handle on N paths of Z^n over a partition. Paths are re-simulated from
    (seed, tag) on every query, so queries see identical noise.
    """

    def __init__(self, model: MarketModel, partition: Partition, n_paths: int, seed: int,
                 tag: str = "integrators", workers: Optional[int] = None):
        self.model = model
        self.partition = partition
        self.n_paths = n_paths
        self.seed = seed
        self.tag = tag
        self.workers = workers

    def _increments(self, noise) -> np.ndarray:
        n_paths, d = noise.dW.shape
        return np.concatenate([
            noise.dW,
            np.einsum("nd,ne->nde", noise.xi, noise.dW).reshape(n_paths, d * d),
            noise.dJ,
            self.model.damping(noise.dJ)[:, None] * noise.xi,
        ], axis=1)

    def _run(self, times: Sequence[float], functions: Dict[str, Callable], cutoff: float):
        part = self.partition
        marks = {float(t): part.index_at(t) for t in times}
        stop = part.index_at(cutoff) if functions else 0
        dim = self.model.integrator_dimension

        def _block(rng: np.random.Generator, size: int):
            z = np.zeros((size, dim))
            snaps = {t: z.copy() for t, k in marks.items() if k == 0}
            sums: Dict[str, np.ndarray] = {}
            for i, dt in enumerate(part.steps):
                dz = self._increments(draw_step_noise(self.model, dt, size, rng))
                z += dz
                if i < stop:
                    for name, fn in functions.items():
                        value = np.asarray(fn(dz), dtype=float)
                        sums[name] = sums[name] + value if name in sums else value
                for t, k in marks.items():
                    if k == i + 1:
                        snaps[t] = z.copy()
            for name, fn in functions.items():
                if name not in sums:
                    sums[name] = np.zeros_like(np.asarray(fn(np.zeros((size, dim))), dtype=float))
            return snaps, sums

        return run_blocks(_block, self.seed, self.tag, self.n_paths, workers=self.workers)

    def snapshots(self, times: Sequence[float]) -> Dict[float, np.ndarray]:
        """Z^n at each time, shape (N, D^2 + 3D)"""
        blocks = self._run(times, {}, 0.0)
        return {float(t): np.concatenate([b[0][float(t)] for b in blocks]) for t in times}

    def increment_sums(self, functions: Dict[str, Callable], t: float) -> Dict[str, np.ndarray]:
        """Per-path sums of f(Delta_i Z^n) over the steps with t_i <= t"""
        blocks = self._run([], functions, t)
        return {name: np.concatenate([b[1][name] for b in blocks]) for name in functions}


@dataclass
class ConvergenceReport:
    rows: List[Dict] = field(default_factory=list)
    functional_rows: List[Dict] = field(default_factory=list)
    variance_rows: List[Dict] = field(default_factory=list)
    sup_gaps: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    trend_ok: bool = True
    finest_ok: bool = True

    @property
    def passed(self) -> bool:
        return (self.trend_ok and self.finest_ok
                and all(r["pass"] for r in self.functional_rows)
                and all(r["pass"] for r in self.variance_rows))

    def to_frame(self) -> pd.DataFrame:
        """Long format: n, t, block, probe, gap, se, pass"""
        columns = ["n", "t", "block", "probe", "norm", "empirical_re", "empirical_im", "limit", "gap", "se", "pass"]
        return pd.DataFrame(self.rows, columns=columns)

    def summary(self) -> Dict:
        return {
            "status": "PASS" if self.passed else "FAIL",
            "finest_grid_pass": self.finest_ok,
            "trend_pass": self.trend_ok,
            "sup_gaps": {str(n): {"gap": g, "se": s} for n, (g, s) in self.sup_gaps.items()},
            "functionals": self.functional_rows,
            "variances": self.variance_rows,
        }


def cf_convergence_study(model: MarketModel, control: LinearRandomizedControl, grid_family: Sequence[Partition],
                         probe: ProbeGrid, n_paths: int, seed: int = 0, cf_abs: float = 0.02,
                         se_factor: float = 3.0, trend_factor: float = 2.0,
                         min_paths: int = MIN_STUDY_PATHS) -> ConvergenceReport:
    """
    Compare the empirical CF of Z^n_t with exp(-t kappa(u)) for every grid in the family.

    For linear controls eta = xi, so Z^n does not depend on the control coefficients.
    The finest grid passes when every gap is at most cf_abs + se_factor * SE; the
    trend passes when the sup gap never grows by more than trend_factor combined SEs
    from one grid to the next.
    """
    if not isinstance(control, LinearRandomizedControl):
        raise InputError("the CF study needs a linear randomized control")
    if n_paths < min_paths:
        raise InputError(f"the CF study needs at least {min_paths} paths, got {n_paths}")
    report = ConvergenceReport()
    family = sorted(grid_family, key=lambda p: p.n)
    kappa = limit_char_exponent(model, probe.points)
    norms = np.linalg.norm(probe.points, axis=1)
    d2 = model.dimension ** 2
    m_slice = block_slices(model.dimension)["M"]

    for k, part in enumerate(family):
        ensemble = IntegratorEnsemble(model, part, n_paths, seed, tag=f"cf-study:{part.n}")
        snaps = ensemble.snapshots(probe.times)
        worst = (0.0, 0.0)
        for t, samples in snaps.items():
            cf = empirical_cf(samples, probe.points)
            se = cf_standard_error(samples, probe.points)
            limit = np.exp(-t * kappa)
            gaps = np.abs(cf - limit)
            for j in range(len(gaps)):
                ok = bool(gaps[j] <= cf_abs + se_factor * se[j])
                report.rows.append({
                    "n": part.n, "t": t, "block": probe.blocks[j], "probe": j, "norm": float(norms[j]),
                    "empirical_re": float(cf[j].real), "empirical_im": float(cf[j].imag),
                    "limit": float(limit[j].real), "gap": float(gaps[j]), "se": float(se[j]), "pass": ok,
                })
            j = int(np.argmax(gaps))
            if gaps[j] > worst[0]:
                worst = (float(gaps[j]), float(se[j]))
        report.sup_gaps[part.n] = worst
        if k == len(family) - 1:
            report.finest_ok = all(r["pass"] for r in report.rows if r["n"] == part.n)
            terminal = snaps.get(max(snaps))
            horizon_t = max(snaps)
            for c in range(d2):
                col = terminal[:, m_slice][:, c]
                var = float(col.var(ddof=1))
                var_se = float(np.sqrt(max(np.mean((col - col.mean()) ** 4) - var ** 2, 0.0) / col.size))
                report.variance_rows.append({
                    "name": f"var(M_{c + 1})", "t": horizon_t, "estimate": var, "target": horizon_t,
                    "se": var_se, "pass": bool(abs(var - horizon_t) <= 4.0 * var_se),
                })
        logger.info("CF study n=%d: sup gap %.4g (se %.2g)", part.n, worst[0], worst[1])

    ns = [p.n for p in family]
    for prev, nxt in zip(ns, ns[1:]):
        g0, s0 = report.sup_gaps[prev]
        g1, s1 = report.sup_gaps[nxt]
        if g1 > g0 + trend_factor * np.hypot(s0, s1):
            report.trend_ok = False
    g_first, s_first = report.sup_gaps[ns[0]]
    g_last, s_last = report.sup_gaps[ns[-1]]
    if g_last > g_first + trend_factor * np.hypot(s_first, s_last):
        report.trend_ok = False
    return report


@dataclass(frozen=True)
class FunctionalCheck:
    statistic: float
    se: float
    analytic: float

    @property
    def gap(self) -> float:
        return abs(self.statistic - self.analytic)

    def passed(self, k: float = 4.0) -> bool:
        return self.gap <= k * self.se + 1e-12


def _zero_padded(model: MarketModel, jump_points: np.ndarray) -> np.ndarray:
    d = model.dimension
    return np.concatenate([np.zeros((len(jump_points), d + d * d)), jump_points], axis=1)


def jump_functional_check(model: MarketModel, ensemble: IntegratorEnsemble, g: VanishingFunction,
                          t: float, mark_nodes: int = 64) -> FunctionalCheck:
    """
    sum_i E g(Delta_i Z^n) over t_i <= t against t * int g(0, e, u) nu_L^psi(de, du).

    Raises:
        InputError: g does not vanish on its ball around 0
    """
    check_vanishing(g, model.integrator_dimension)
    if t <= 0:
        return FunctionalCheck(0.0, 0.0, 0.0)
    sums = ensemble.increment_sums({"g": g}, t)["g"]
    points, weights = augmented_jump_points(model, mark_nodes)
    analytic = t * float(np.sum(weights * g(_zero_padded(model, points)))) if weights.size else 0.0
    se = float(sums.std(ddof=1) / np.sqrt(sums.size)) if sums.size > 1 else float("inf")
    return FunctionalCheck(float(sums.mean()), se, analytic)


@dataclass
class CharacteristicsReport:
    rows: List[Dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def row(self, kind: str, k: int, l: Optional[int] = None) -> Dict:
        for r in self.rows:
            if r["kind"] == kind and r["k"] == k and r["l"] == (-1 if l is None else l):
                return r
        raise KeyError((kind, k, l))


def characteristics_check(model: MarketModel, ensemble: IntegratorEnsemble, t: float,
                          truncation: Callable[[np.ndarray], np.ndarray] = smooth_truncation,
                          se_factor: float = 4.0, mark_nodes: int = 64) -> CharacteristicsReport:
    """
    Empirical sum_i E h(Delta Z) and sum_i E h^k h^l(Delta Z) against

        B_t = t int (h(0,e,u) - (0,e,u)) nu_L^psi
        C~_t = C_t + t int h^k h^l(0,e,u) nu_L^psi,   C_t = t on the first D^2 + D diagonal entries
    """
    dim = model.integrator_dimension
    d = model.dimension
    sums = ensemble.increment_sums({
        "h": truncation,
        "hh": lambda z: np.einsum("ni,nj->nij", truncation(z), truncation(z)),
    }, t)
    points, weights = augmented_jump_points(model, mark_nodes)
    padded = _zero_padded(model, points)
    h_nodes = truncation(padded) if weights.size else np.zeros((0, dim))
    drift = t * np.einsum("k,ki->i", weights, h_nodes - padded) if weights.size else np.zeros(dim)
    cov = np.zeros((dim, dim))
    cov[np.arange(d + d * d), np.arange(d + d * d)] = t
    if weights.size:
        cov += t * np.einsum("k,ki,kj->ij", weights, h_nodes, h_nodes)

    report = CharacteristicsReport()
    root_n = np.sqrt(sums["h"].shape[0])
    h_mean, h_se = sums["h"].mean(axis=0), sums["h"].std(axis=0, ddof=1) / root_n
    hh_mean, hh_se = sums["hh"].mean(axis=0), sums["hh"].std(axis=0, ddof=1) / root_n
    for k in range(dim):
        gap = abs(h_mean[k] - drift[k])
        report.rows.append({"kind": "B", "k": k, "l": -1, "empirical": float(h_mean[k]),
                            "analytic": float(drift[k]), "se": float(h_se[k]), "gap": float(gap),
                            "pass": bool(gap <= se_factor * h_se[k] + 1e-12)})
    for k in range(dim):
        for l in range(dim):
            gap = abs(hh_mean[k, l] - cov[k, l])
            report.rows.append({"kind": "C", "k": k, "l": l, "empirical": float(hh_mean[k, l]),
                                "analytic": float(cov[k, l]), "se": float(hh_se[k, l]), "gap": float(gap),
                                "pass": bool(gap <= se_factor * hh_se[k, l] + 1e-12)})
    return report


@dataclass(frozen=True)
class IndependenceResult:
    max_corr: float
    corr_se: float
    max_cf_gap: float
    cf_se: float

    def independent(self, k: float = 4.0) -> bool:
        return self.max_corr <= k * self.corr_se and self.max_cf_gap <= k * self.cf_se


def independence_check(brownian: np.ndarray, jump: np.ndarray, min_samples: int = 10_000) -> IndependenceResult:
    """
    Max absolute cross-correlation between the two sample blocks and the max
    CF factorization gap |phi(u, v) - phi(u) phi(v)| at 8 probe pairs.
    Columns without variance are ignored.
    """
    w = np.atleast_2d(np.asarray(brownian, dtype=float))
    l = np.atleast_2d(np.asarray(jump, dtype=float))
    if w.shape[0] != l.shape[0]:
        raise InputError("both sample blocks must have the same number of rows")
    n = w.shape[0]
    if n < min_samples:
        raise InputError(f"independence check needs at least {min_samples} samples, got {n}")
    w = w[:, w.std(axis=0) > 0]
    l = l[:, l.std(axis=0) > 0]
    if w.shape[1] == 0 or l.shape[1] == 0:
        return IndependenceResult(0.0, 1.0 / np.sqrt(n), 0.0, 1.0 / np.sqrt(n))
    ws = (w - w.mean(axis=0)) / w.std(axis=0)
    ls = (l - l.mean(axis=0)) / l.std(axis=0)
    corr = ws.T @ ls / n
    max_corr = float(np.max(np.abs(corr)))

    gaps, ses = [], []
    for sign in (1.0, -1.0):
        for scale in (0.5, 1.0, 1.5, 2.0):
            u = scale * np.ones(ws.shape[1]) / np.sqrt(ws.shape[1])
            v = scale * np.array([sign ** k for k in range(ls.shape[1])]) / np.sqrt(ls.shape[1])
            a = np.exp(1j * (ws @ u))
            b = np.exp(1j * (ls @ v))
            phi_a, phi_b = a.mean(), b.mean()
            joint = (a * b).mean()
            influence = a * b - phi_b * a - phi_a * b
            gaps.append(abs(joint - phi_a * phi_b))
            ses.append(np.sqrt(np.mean(np.abs(influence - influence.mean()) ** 2) / n))
    j = int(np.argmax(gaps))
    return IndependenceResult(max_corr, 1.0 / np.sqrt(n), float(gaps[j]), float(ses[j]))


def terminal_cf_agreement(samples_a: np.ndarray, samples_b: np.ndarray,
                          probes: Sequence[float] = (0.25, 0.5, 1.0, 2.0, -0.25, -0.5, -1.0, -2.0),
                          cf_abs: float = 0.02, se_factor: float = 3.0) -> List[Dict]:
    """Compare scalar CFs of two independent sample sets at the probes"""
    a = np.asarray(samples_a, dtype=float).reshape(-1, 1)
    b = np.asarray(samples_b, dtype=float).reshape(-1, 1)
    u = np.asarray(probes, dtype=float).reshape(-1, 1)
    cf_a, cf_b = empirical_cf(a, u), empirical_cf(b, u)
    se = np.hypot(cf_standard_error(a, u), cf_standard_error(b, u))
    gaps = np.abs(cf_a - cf_b)
    return [{"probe": float(p), "gap": float(g), "se": float(s), "pass": bool(g <= cf_abs + se_factor * s)}
            for p, g, s in zip(u[:, 0], gaps, se)]


def discrete_terminal_wealth(model: MarketModel, control: LinearRandomizedControl, n_steps: int, n_paths: int,
                             x0: float, y0: np.ndarray, seed: int = 0, tag: str = "discrete-wealth",
                             workers: Optional[int] = None, block_paths: int = BLOCK_PATHS) -> np.ndarray:
    """X_T of the discrete scheme on a uniform grid of n_steps, one value per path"""
    partition = Partition.uniform(model.horizon, n_steps)

    def _block(rng: np.random.Generator, size: int) -> np.ndarray:
        return simulate_discrete_scenario(model, partition, control, x0, y0, rng, n_paths=size).X[:, -1]

    return np.concatenate(run_blocks(_block, seed, tag, n_paths, workers=workers, block_paths=block_paths))


def sample_state_demo(model: MarketModel, n_steps: int, n_paths: int, x0: float, y0: np.ndarray,
                      seed: int = 0, tag: str = "sample-state") -> Dict[str, float]:
    """
    Discrete wealth with m = 0, v = 1 and no jumps. X_T - x0 = sum xi_i Delta Y_i
    is uncorrelated with W_T and its variance tends to sigma^2 T.
    """
    if model.dimension != 1:
        raise InputError("the sample-state demo is one-dimensional")
    quiet = model.without_jumps()
    partition = Partition.uniform(quiet.horizon, n_steps)
    control = ConstantLinearControl(0.0, 1.0, 1)

    def _block(rng: np.random.Generator, size: int):
        scenario = simulate_discrete_scenario(quiet, partition, control, x0, y0, rng, n_paths=size)
        return scenario.X[:, -1] - x0, scenario.W[:, -1, 0]

    blocks = run_blocks(_block, seed, tag, n_paths)
    gain = np.concatenate([b[0] for b in blocks])
    w_t = np.concatenate([b[1] for b in blocks])
    n = gain.size
    corr = float(np.corrcoef(gain, w_t)[0, 1])
    var = float(gain.var(ddof=1))
    centred = gain - gain.mean()
    var_se = float(np.sqrt(max(np.mean(centred ** 4) - var ** 2, 0.0) / n))
    a = quiet.coeffs.a(np.atleast_1d(np.asarray(y0, dtype=float)))
    sigma2 = float((a @ a.T)[0, 0])
    return {
        "corr": corr,
        "corr_se": float((1.0 - corr ** 2) / np.sqrt(n)),
        "var": var,
        "var_se": var_se,
        "var_target": sigma2 * quiet.horizon,
    }
