from jumpex.errors import InputError
from jumpex.exploratory_sde import (BLOWUP_LEVEL, ConstantGaussianLaw, SimConfig, admissibility_probe, parse_law,
                                    simulate_exploratory, simulate_wang_zhou)
from jumpex.model_config import ExperimentConfig
from jumpex.optimal_control import (AlphaBeta, FeynmanKacBeta, hjb_probe_points, hjb_residual,
                                    lagrange_multiplier_closed, lagrange_multiplier_mc, mean_wealth_curve,
                                    optimal_law, simulate_optimal_wealth_explicit, solve_alpha_beta,
                                    value_function, wang_zhou_value)
from jumpex.randomized_discrete import (ConstantLinearControl, FeedbackLinearControl, MomentAccumulator, Partition,
                                        decompose_control, drift_squares, simulate_discrete_scenario,
                                        summarize_drift_squares)
from jumpex.rng_streams import run_blocks
from jumpex.weak_convergence_lab import (IntegratorEnsemble, ProbeGrid, block_slices, cf_convergence_study,
                                         characteristics_check, discrete_terminal_wealth, independence_check,
                                         jump_bump, jump_bump_square, jump_functional_check, sample_state_demo,
                                         terminal_cf_agreement)
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import json
import logging
import time
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# Desk-scale (paths, steps) per suite; --paths / --steps override
SUITE_DEFAULTS: Dict[str, Tuple[int, int]] = {
    "decomposition": (100_000, 256),
    "lln": (20_000, 1024),
    "converge": (200_000, 1024),
    "characteristics": (20_000, 1024),
    "independence": (20_000, 1024),
    "equivalence": (20_000, 1024),
    "value-check": (100_000, 512),
    "hjb": (0, 0),
    "explicit": (4096, 4096),
    "lagrange": (100_000, 256),
    "wang-zhou": (20_000, 250),
    "demo-sample-state": (100_000, 256),
}

EXPERIMENTS = tuple(SUITE_DEFAULTS)

LLN_GRIDS = (64, 256, 1024)
PERTURBED_LAWS = ("perturbed:0.5", "perturbed:1.5", "perturbed:1,2")
WANG_ZHOU_TIMES = (0.2, 0.4, 0.6, 0.8, 1.0)
VALUE_QUAD_TOL = 1e-10
EQUIVALENCE_MEAN, EQUIVALENCE_COV = 1.0, 1.0


@dataclass
class CheckRow:
    """
    One check. relation 'abs' passes when |estimate - target| <= tolerance,
    'ge' when estimate >= target - tolerance, 'le' when estimate <= target + tolerance.
    A row carries an SE unless it is exact.
    """
    name: str
    estimate: float
    target: float
    tolerance: float
    se: Optional[float] = None
    exact: bool = False
    relation: str = "abs"
    status: bool = field(init=False)

    def __post_init__(self):
        self.estimate = float(self.estimate)
        self.target = float(self.target)
        self.tolerance = float(self.tolerance)
        self.se = None if self.se is None else float(self.se)
        if self.relation == "abs":
            self.status = bool(abs(self.estimate - self.target) <= self.tolerance)
        elif self.relation == "ge":
            self.status = bool(self.estimate >= self.target - self.tolerance)
        elif self.relation == "le":
            self.status = bool(self.estimate <= self.target + self.tolerance)
        else:
            raise InputError(f"unknown check relation '{self.relation}'")

    @classmethod
    def within(cls, name: str, estimate: float, target: float, se: float, k: float) -> "CheckRow":
        return cls(name, estimate, target, k * se, se=se)

    @classmethod
    def band(cls, name: str, estimate: float, low: float, high: float, se: Optional[float] = None) -> "CheckRow":
        return cls(name, estimate, 0.5 * (low + high), 0.5 * (high - low), se=se, exact=se is None)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "estimate": self.estimate,
            "target": self.target,
            "tolerance": self.tolerance,
            "relation": self.relation,
            "se": self.se,
            "exact": self.exact,
            "status": "PASS" if self.status else "FAIL",
        }


@dataclass
class ExperimentReport:
    experiment: str
    config_digest: str
    header: Dict[str, Any]
    rows: List[CheckRow] = field(default_factory=list)
    artifacts: Dict[str, Union[pd.DataFrame, Dict]] = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(row.status for row in self.rows)

    @property
    def failing_rows(self) -> List[CheckRow]:
        return [row for row in self.rows if not row.status]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.to_dict() for row in self.rows])

    def body(self) -> Dict[str, Any]:
        """Everything except the wall-clock time"""
        return {
            "experiment": self.experiment,
            "config_digest": self.config_digest,
            "status": "PASS" if self.passed else "FAIL",
            "rows": [row.to_dict() for row in self.rows],
        }

    def to_dict(self) -> Dict[str, Any]:
        out = {"header": self.header}
        out.update(self.body())
        out["wall_clock_seconds"] = self.wall_clock
        return out


def unique_path(directory: Union[str, Path], stem: str, suffix: str) -> Path:
    """First free name among stem.suffix, stem_1.suffix, ...; existing files are never reused"""
    directory = Path(directory)
    path = directory / f"{stem}{suffix}"
    k = 1
    while path.exists():
        path = directory / f"{stem}_{k}{suffix}"
        k += 1
    return path


def _header_lines(header: Dict[str, Any]) -> str:
    return "".join(f"# {key}: {json.dumps(value, default=float)}\n" for key, value in header.items())


def write_frame(frame: pd.DataFrame, header: Dict[str, Any], directory: Union[str, Path], stem: str) -> Path:
    path = unique_path(directory, stem, ".csv")
    with open(path, "x", encoding="utf-8", newline="") as f:
        f.write(_header_lines(header))
        frame.to_csv(f, index=False)
    return path


def write_json(payload: Dict[str, Any], directory: Union[str, Path], stem: str) -> Path:
    path = unique_path(directory, stem, ".json")
    with open(path, "x", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, default=float)
    return path


class ExperimentPipeline:
    def __init__(self, config: ExperimentConfig, quiet: bool = False):
        """Initialize the pipeline for one experiment"""
        if config.name not in SUITE_DEFAULTS:
            raise InputError(f"unknown experiment '{config.name}' (choose from {', '.join(EXPERIMENTS)})")
        self.config = config
        self.quiet = quiet
        self.model = config.model
        self.problem = config.problem
        self.thresholds = config.thresholds
        self.artifacts: Dict[str, Union[pd.DataFrame, Dict]] = {}
        self._scale_used: Dict[str, int] = {}

        self._print(f"✓ Experiment pipeline initialized: {config.name} (config {config.digest})")

    def _print(self, message: str) -> None:
        if not self.quiet:
            print(message)

    def _scale(self) -> Tuple[int, int]:
        default_paths, default_steps = SUITE_DEFAULTS[self.config.name]
        paths = self.config.paths or default_paths
        steps = self.config.steps or default_steps
        self._scale_used = {"paths": paths, "steps": steps}
        return paths, steps

    def _sim_config(self, paths: int, steps: int) -> SimConfig:
        return SimConfig(steps=steps, paths=paths, seed=self.config.seed)

    def _alpha_beta(self, model=None) -> AlphaBeta:
        """Solved (alpha, beta) with w_hat from the config or the closed form"""
        model = model or self.model
        ab = solve_alpha_beta(model, self.problem.lam, fk_seed=self.config.seed)
        w_hat = self.problem.w_hat
        if w_hat is None:
            w_hat = lagrange_multiplier_closed(ab.rate, ab.horizon, self.problem.x0, self.problem.zhat)
        return ab.with_w_hat(w_hat)

    def run(self) -> ExperimentReport:
        """
        Run the configured suite.

        Returns:
            ExperimentReport with one row per check and the suite's artifacts
        """
        name = self.config.name
        self._print(f"\n🚀 Running experiment '{name}' (seed {self.config.seed})...\n")
        start = time.perf_counter()
        suite = getattr(self, "_run_" + name.replace("-", "_"))
        rows = suite()
        elapsed = time.perf_counter() - start

        header = self.config.header()
        header.update(self._scale_used)
        report = ExperimentReport(name, self.config.digest, header, rows, dict(self.artifacts), elapsed)
        for row in rows:
            mark = "✓" if row.status else "✗"
            self._print(f"   {mark} {row.name}: {row.estimate:.6g} vs {row.target:.6g} (tol {row.tolerance:.3g})")
        self._print(f"\n{'✅' if report.passed else '❌'} {name}: "
                    f"{len(rows) - len(report.failing_rows)}/{len(rows)} checks passed in {elapsed:.1f}s")
        logger.info("experiment %s finished in %.2fs", name, elapsed)
        return report

    # suites

    def _run_decomposition(self) -> List[CheckRow]:
        n_paths, n_steps = self._scale()
        model, prob = self.model, self.problem
        d = model.dimension
        k = self.thresholds["se_factor"]
        partition = Partition.uniform(model.horizon, n_steps)
        control = ConstantLinearControl(1.0, 1.0, d)

        rows = []
        decomposition = decompose_control(control, 0, (0.0, prob.y0, prob.x0))
        gap = np.max(np.abs(decomposition.vartheta @ decomposition.vartheta - decomposition.theta))
        rows.append(CheckRow("vartheta^2 = theta", gap, 0.0, self.thresholds["identity_tol"], exact=True))

        keep_dump = self.config.dump_scenarios is not None

        def _block(rng: np.random.Generator, size: int):
            scenario = simulate_discrete_scenario(model, partition, control, prob.x0, prob.y0, rng, n_paths=size)
            eta = MomentAccumulator(d)
            eta.add(scenario.eta())
            jumps = MomentAccumulator(d)
            jumps.add(scenario.L[:, -1, :d])
            dump = pd.concat([scenario.to_frame(path=p) for p in range(min(10, size))]) if keep_dump else None
            return eta, jumps, scenario.X[:, -1], dump

        self._print(f"📝 Simulating {n_paths} paths x {n_steps} steps with m = 1, v = 1")
        blocks = run_blocks(_block, self.config.seed, "decomposition", n_paths)
        eta, jumps = MomentAccumulator(d), MomentAccumulator(d)
        for block in blocks:
            eta.merge(block[0])
            jumps.merge(block[1])
        terminal = np.concatenate([block[2] for block in blocks])

        mean, mean_se = eta.mean(), eta.mean_se()
        for j in range(d):
            rows.append(CheckRow(f"eta mean[{j}]", mean[j], 0.0, k / np.sqrt(eta.count), se=mean_se[j]))
        cov, cov_se = eta.covariance(), eta.second_moment_se()
        for i in range(d):
            for j in range(d):
                rows.append(CheckRow.within(f"eta covariance[{i},{j}]", cov[i, j], float(i == j), cov_se[i, j], k))

        jump_target = model.jumps.m2 * model.horizon
        jump_m2, jump_se = jumps.second_moment(), jumps.second_moment_se()
        for i in range(d):
            for j in range(d):
                if jump_se[i, j] > 0:
                    rows.append(CheckRow.within(f"E[L^J_T L^J_T][{i},{j}]", jump_m2[i, j], jump_target[i, j],
                                                jump_se[i, j], k))

        if model.coeffs.state_independent():
            drift = float(control.m @ model.coeffs.b(prob.y0).ravel())
            se = float(terminal.std(ddof=1) / np.sqrt(terminal.size))
            rows.append(CheckRow.within("E[X_T]", terminal.mean(), prob.x0 + drift * model.horizon, se, k))

        if keep_dump:
            self.artifacts["scenarios"] = blocks[0][3].reset_index(drop=True)
        return rows

    def _run_lln(self) -> List[CheckRow]:
        n_paths, _ = self._scale()
        model, prob = self.model, self.problem
        k = self.thresholds["se_factor"]
        grids = [self.config.steps] if self.config.steps else list(LLN_GRIDS)
        control = ConstantLinearControl(1.0, 1.0, model.dimension)
        rows = []
        for n in grids:
            partition = Partition.uniform(model.horizon, n)

            def _block(rng: np.random.Generator, size: int, partition=partition):
                scenario = simulate_discrete_scenario(model, partition, control, prob.x0, prob.y0, rng,
                                                      n_paths=size)
                return drift_squares(scenario, model.horizon)

            self._print(f"📝 LLN drift statistic on n = {n}")
            blocks = run_blocks(_block, self.config.seed, f"lln:{n}", n_paths, block_paths=1024)
            stat = summarize_drift_squares(np.concatenate(blocks), partition, model.horizon)
            for j in range(model.dimension):
                rows.append(CheckRow.within(f"E|sum eta dt|^2[{j}] n={n}", stat.value[j], stat.exact,
                                            stat.se[j], k))
        return rows

    def _run_converge(self) -> List[CheckRow]:
        n_paths, _ = self._scale()
        model = self.model
        th = self.thresholds
        family = [Partition.uniform(model.horizon, n) for n in self.config.n_grid]
        probe = ProbeGrid.default(model, self.config.times)
        self._print(f"📝 CF study over n = {[p.n for p in family]} with {len(probe.points)} probes, {n_paths} paths")
        study = cf_convergence_study(model, ConstantLinearControl(1.0, 1.0, model.dimension), family, probe,
                                     n_paths, seed=self.config.seed, cf_abs=th["cf_abs"],
                                     se_factor=th["cf_se"], trend_factor=th["trend_se"])
        table = study.to_frame()
        self.artifacts["cf_gaps"] = table

        rows = []
        finest = max(p.n for p in family)
        for t in probe.times:
            cell = table[(table["n"] == finest) & (table["t"] == t)]
            margin = cell["gap"] - (th["cf_abs"] + th["cf_se"] * cell["se"])
            worst = cell.loc[margin.idxmax()]
            rows.append(CheckRow(f"CF gap n={finest} t={t:g} ({worst['block']} probe {int(worst['probe'])})",
                                 worst["gap"], 0.0, th["cf_abs"] + th["cf_se"] * worst["se"], se=worst["se"]))

        ns = sorted(study.sup_gaps)
        pairs = list(zip(ns, ns[1:])) + ([(ns[0], ns[-1])] if len(ns) > 1 else [])
        if pairs:
            def _margin(pair):
                (g0, s0), (g1, s1) = study.sup_gaps[pair[0]], study.sup_gaps[pair[1]]
                return g1 - g0 - th["trend_se"] * np.hypot(s0, s1)

            n0, n1 = max(pairs, key=_margin)
            (g0, s0), (g1, s1) = study.sup_gaps[n0], study.sup_gaps[n1]
            rows.append(CheckRow(f"CF sup gap growth n={n0}->{n1}", g1 - g0, 0.0,
                                 th["trend_se"] * np.hypot(s0, s1), se=np.hypot(s0, s1), relation="le"))
        for r in study.variance_rows:
            rows.append(CheckRow.within(f"{r['name']} n={finest} t={r['t']:g}", r["estimate"], r["target"],
                                        r["se"], th["se_factor"]))
        return rows

    def _ensemble(self, tag: str) -> IntegratorEnsemble:
        n_paths, n_steps = self._scale()
        partition = Partition.uniform(self.model.horizon, n_steps)
        self._print(f"📝 Integrator ensemble: {n_paths} paths on n = {n_steps}")
        return IntegratorEnsemble(self.model, partition, n_paths, self.config.seed, tag=tag)

    def _run_characteristics(self) -> List[CheckRow]:
        model = self.model
        k = self.thresholds["se_factor"]
        ensemble = self._ensemble("characteristics")
        t = model.horizon
        report = characteristics_check(model, ensemble, t, se_factor=k)
        self.artifacts["characteristics"] = report.to_frame()
        rows = []
        for r in report.rows:
            label = f"B[{r['k']}]" if r["kind"] == "B" else f"C~[{r['k']},{r['l']}]"
            rows.append(CheckRow(label, r["empirical"], r["analytic"], k * r["se"] + 1e-12, se=r["se"]))
        for g in (jump_bump(model), jump_bump_square(model)):
            check = jump_functional_check(model, ensemble, g, t)
            rows.append(CheckRow(f"sum E {g.name}(dZ)", check.statistic, check.analytic,
                                 k * check.se + 1e-12, se=check.se))
        return rows

    def _run_independence(self) -> List[CheckRow]:
        model = self.model
        k = self.thresholds["se_factor"]
        ensemble = self._ensemble("independence")
        samples = ensemble.snapshots([model.horizon])[float(model.horizon)]
        sl = block_slices(model.dimension)
        brownian = np.concatenate([samples[:, sl["W"]], samples[:, sl["M"]]], axis=1)
        jump = np.concatenate([samples[:, sl["J"]], samples[:, sl["xi"]]], axis=1)
        result = independence_check(brownian, jump)
        return [
            CheckRow.within("max |corr(Brownian block, jump block)|", result.max_corr, 0.0, result.corr_se, k),
            CheckRow.within("max CF factorization gap", result.max_cf_gap, 0.0, result.cf_se, k),
        ]

    def _run_equivalence(self) -> List[CheckRow]:
        n_paths, n_steps = self._scale()
        model, prob, th = self.model, self.problem, self.thresholds
        law = ConstantGaussianLaw(EQUIVALENCE_MEAN, EQUIVALENCE_COV, model.dimension)
        self._print(f"📝 X_T of the discrete scheme and the exploratory SDE under {law.label}: "
                    f"{n_paths} paths on n = {n_steps}")
        discrete = discrete_terminal_wealth(model, FeedbackLinearControl(law), n_steps, n_paths, prob.x0, prob.y0,
                                            seed=self.config.seed, tag="equivalence:discrete", block_paths=1024)
        continuous = simulate_exploratory(model, law, prob.x0, prob.y0, self._sim_config(n_paths, n_steps),
                                          prob.zhat, prob.lam, tag="equivalence:continuous").terminal
        agreement = terminal_cf_agreement(discrete, continuous, cf_abs=th["cf_abs"], se_factor=th["cf_se"])
        rows = [CheckRow(f"|CF gap of X_T| at u={r['probe']:+g}", r["gap"], 0.0,
                         th["cf_abs"] + th["cf_se"] * r["se"], se=r["se"]) for r in agreement]
        se = float(np.hypot(discrete.std(ddof=1) / np.sqrt(discrete.size),
                            continuous.std(ddof=1) / np.sqrt(continuous.size)))
        rows.append(CheckRow.within("E[X_T] discrete - continuous", discrete.mean() - continuous.mean(), 0.0, se,
                                    th["se_factor"]))
        self.artifacts["terminal_cf"] = pd.DataFrame(agreement)
        return rows

    def _run_value_check(self) -> List[CheckRow]:
        n_paths, n_steps = self._scale()
        model, prob, th = self.model, self.problem, self.thresholds
        ab = self._alpha_beta()
        law = optimal_law(ab, model)
        v_opt = float(value_function(ab, 0.0, prob.x0, prob.y0))
        beta_se = ab.beta_se(0.0, prob.y0)
        self._print(f"📝 v_opt(0, {prob.x0:g}) = {v_opt:.6f} with w_hat = {ab.w_hat:.6f}")
        rows = [self._value_target_row(ab, v_opt, beta_se)]

        sim = self._sim_config(n_paths, n_steps)
        optimal = simulate_exploratory(model, law, prob.x0, prob.y0, sim, ab.w_hat, prob.lam,
                                       keep_paths=self.config.dump_paths, tag="value-check")
        cost = optimal.cost
        rows.append(CheckRow.within("cost(optimal)", cost.value, v_opt, float(np.hypot(cost.se, beta_se)),
                                    th["value_se"]))
        expected_mean = float(mean_wealth_curve(ab.rate, prob.x0, ab.w_hat, model.horizon))
        rows.append(CheckRow.within("E[X_T](optimal)", cost.terminal_mean, expected_mean,
                                    cost.terminal_mean_se, th["value_se"]))
        for name in PERTURBED_LAWS:
            perturbed = parse_law(name, model.dimension, optimal=law)
            self._print(f"   scoring {perturbed.label}")
            est = simulate_exploratory(model, perturbed, prob.x0, prob.y0, sim, ab.w_hat, prob.lam,
                                       tag="value-check").cost
            se = float(np.hypot(est.se, beta_se))
            rows.append(CheckRow(f"cost({name}) >= v_opt", est.value, v_opt, th["perturbed_se"] * se,
                                 se=se, relation="ge"))

        probe = admissibility_probe(model, law, hjb_probe_points(ab, model, prob.y0))
        rows.append(CheckRow("admissibility integrand max", probe["max"], BLOWUP_LEVEL, 0.0,
                             exact=True, relation="le"))

        times = np.linspace(0.0, model.horizon, 11)
        if ab.variant == "constant":
            betas = [(float(t), ab.beta(t), 0.0) for t in times]
        else:
            betas = ab.beta_estimator.curve(prob.y0, times)
        self.artifacts["beta_curve"] = pd.DataFrame(betas, columns=["t", "beta", "se"])
        xs = ab.w_hat + np.linspace(-1.0, 1.0, 11)
        table = [{"t": t, "x": float(x), "alpha": float(ab.alpha(t)), "beta": beta,
                  "v": float(ab.alpha(t) * (x - ab.w_hat) ** 2 + beta)} for t, beta, _ in betas for x in xs]
        self.artifacts["value_table"] = pd.DataFrame(table)
        if optimal.sample is not None:
            self.artifacts["paths"] = optimal.sample.to_frame()
        return rows

    def _value_target_row(self, ab: AlphaBeta, v_opt: float, beta_se: float) -> CheckRow:
        """v_opt(0, x0) against a beta computed without the solver's own beta"""
        model, prob = self.model, self.problem
        head = float(ab.alpha(0.0)) * (prob.x0 - ab.w_hat) ** 2
        if model.coeffs.state_independent():
            quad = FeynmanKacBeta(model, ab.rate, prob.lam).frozen_state_integral(0.0, prob.y0)
            return CheckRow("v_opt(0, x0) vs quadrature of beta", v_opt, head + quad, VALUE_QUAD_TOL, exact=True)
        reference = ab.beta_estimator
        replicate = FeynmanKacBeta(model, ab.rate, prob.lam, seed=self.config.seed + 1,
                                   outer=reference.outer, inner=reference.inner)
        beta, se = replicate.estimate(0.0, prob.y0)
        return CheckRow.within("v_opt(0, x0) vs independent Feynman-Kac replicate", v_opt, head + beta,
                               float(np.hypot(beta_se, se)), self.thresholds["value_se"])

    def _run_hjb(self) -> List[CheckRow]:
        model, prob, th = self.model, self.problem, self.thresholds
        self._scale()
        ab = self._alpha_beta()
        probes = hjb_probe_points(ab, model, prob.y0)
        residual = hjb_residual(ab, model, probes)
        perturbed = hjb_residual(ab.with_rate(1.01 * ab.rate), model, probes)
        tol = th["hjb_atoms"] if model.jumps.law in ("atoms", "none") else th["hjb_continuous"]
        self._print(f"📝 HJB residual at {residual.size} probes")

        t, x, y = probes
        table = pd.DataFrame({"t": t, "x": x})
        for j in range(model.dimension):
            table[f"y_{j + 1}"] = y[:, j]
        table["residual"] = residual
        table["residual_K_x1.01"] = perturbed
        self.artifacts["hjb_residual"] = table
        return [
            CheckRow("max |HJB residual|", np.max(np.abs(residual)), 0.0, tol, exact=True),
            CheckRow("detector max |residual| at K x 1.01", np.max(np.abs(perturbed)), th["hjb_detector"], 0.0,
                     exact=True, relation="ge"),
        ]

    def _run_explicit(self) -> List[CheckRow]:
        n_paths, fine = self._scale()
        model, prob, th = self.model, self.problem, self.thresholds
        ab = self._alpha_beta()
        compare = [n for n in self.config.n_grid if 64 <= n < fine and fine % n == 0]
        if len(compare) < 2:
            raise InputError(f"explicit suite needs two comparison grids dividing {fine}, got {compare}")
        self._print(f"📝 Explicit wealth on n = {fine} against Euler on n = {compare}, {n_paths} paths")
        result = simulate_optimal_wealth_explicit(model, ab, prob.x0, prob.y0, self._sim_config(n_paths, fine),
                                                  compare_steps=compare, block_paths=1024, tag="explicit")
        rows = []
        for label, gaps in (("X*", result.wealth_gaps), ("E(-Z)", result.exponential_gaps)):
            for n0, n1 in zip(compare, compare[1:]):
                (g0, s0), (g1, s1) = gaps[n0], gaps[n1]
                ratio = g0 / g1 if g1 > 0 else np.inf
                se = ratio * np.hypot(s0 / g0, s1 / g1) if g0 > 0 and g1 > 0 else None
                rows.append(CheckRow.band(f"RMS gap ratio {label} n={n0}/{n1}", ratio,
                                          th["ratio_low"], th["ratio_high"], se=se))
        terminal = result.terminal
        se = float(terminal.std(ddof=1) / np.sqrt(terminal.size))
        target = float(mean_wealth_curve(ab.rate, prob.x0, ab.w_hat, model.horizon))
        rows.append(CheckRow.within("E[X*_T] explicit", terminal.mean(), target, se, th["se_factor"]))
        self.artifacts["strong_gaps"] = pd.DataFrame([
            {"n": n, "wealth_rms": result.wealth_gaps[n][0], "wealth_se": result.wealth_gaps[n][1],
             "exponential_rms": result.exponential_gaps[n][0], "exponential_se": result.exponential_gaps[n][1]}
            for n in compare])
        return rows

    def _run_lagrange(self) -> List[CheckRow]:
        n_paths, n_steps = self._scale()
        model, prob, th = self.model, self.problem, self.thresholds
        ab = solve_alpha_beta(model, prob.lam, fk_seed=self.config.seed)
        closed = lagrange_multiplier_closed(ab.rate, model.horizon, prob.x0, prob.zhat)
        ab = ab.with_w_hat(closed)
        self._print(f"📝 Closed-form w_hat = {closed:.6f}")
        rows = [CheckRow("E[X*_T] at closed w_hat", mean_wealth_curve(ab.rate, prob.x0, closed, model.horizon),
                         prob.zhat, th["identity_tol"], exact=True)]

        sim = self._sim_config(n_paths, n_steps)
        mc = lagrange_multiplier_mc(model, ab, prob.x0, prob.y0, prob.zhat, sim, tag="lagrange")
        self._print(f"📝 Monte Carlo w_hat = {mc.w_hat:.6f} +- {mc.se:.2g}")
        rows.append(CheckRow.within("w_hat Monte Carlo vs closed form", mc.w_hat, closed, mc.se,
                                    th["multiplier_se"]))

        check = simulate_optimal_wealth_explicit(model, ab.with_w_hat(mc.w_hat), prob.x0, prob.y0, sim,
                                                 tag="lagrange:terminal")
        terminal = check.terminal
        se_mean = float(terminal.std(ddof=1) / np.sqrt(terminal.size))
        # the multiplier's own error moves E[X*_T] by (1 - E[E_T]) per unit of w_hat
        se = float(np.hypot(se_mean, (1.0 - mc.exponential_mean) * mc.se))
        rows.append(CheckRow.within("E[X*_T] at Monte Carlo w_hat", terminal.mean(), prob.zhat, se,
                                    th["multiplier_se"]))
        self.artifacts["multiplier"] = mc.to_dict()
        self.artifacts["multiplier_closed"] = {"w_hat": closed, "se": 0.0, "method": "closed-form"}
        return rows

    def _run_wang_zhou(self) -> List[CheckRow]:
        n_paths, n_steps = self._scale()
        prob, th = self.problem, self.thresholds
        if self.model.dimension != 1 or not self.model.coeffs.state_independent():
            raise InputError("the one-dimensional reduction needs D = 1 and constant coefficients")
        quiet = self.model.without_jumps()
        ab = self._alpha_beta(quiet)
        rho = float(np.sqrt(ab.rate))
        sigma = float(quiet.coeffs.a(prob.y0).ravel()[0])
        horizon = quiet.horizon

        ts = np.linspace(0.0, 0.9 * horizon, 10)
        xs = ab.w_hat + np.linspace(-1.0, 1.0, 10)
        tt, xx = np.meshgrid(ts, xs, indexing="ij")
        general = np.array([[float(value_function(ab, t, x, prob.y0)) for x in xs] for t in ts])
        reduced = wang_zhou_value(tt, xx, rho, sigma, prob.lam, ab.w_hat, horizon)
        rows = [CheckRow("max |v_general - v_reduced| on 10x10 grid", np.max(np.abs(general - reduced)), 0.0,
                         th["identity_tol"], exact=True)]

        k = th["se_factor"]
        times = [t * horizon for t in WANG_ZHOU_TIMES]
        sim = self._sim_config(n_paths, n_steps)
        self._print(f"📝 Explicit wealth without jumps: {n_paths} paths on n = {n_steps}")
        result = simulate_optimal_wealth_explicit(quiet, ab, prob.x0, prob.y0, sim, times=times,
                                                  tag="wang-zhou:explicit")
        grid = Partition.uniform(horizon, n_steps)
        for t in times:
            samples = result.at_times[float(t)]
            t_grid = float(grid.grid[grid.index_at(t)])
            target = float(mean_wealth_curve(ab.rate, prob.x0, ab.w_hat, t_grid))
            se = float(samples.std(ddof=1) / np.sqrt(samples.size))
            rows.append(CheckRow.within(f"E[X*_t] t={t_grid:.4g}", samples.mean(), target, se, k))

        reduced_paths = simulate_wang_zhou(rho, prob.lam, ab.w_hat, prob.x0, horizon, n_steps, n_paths,
                                           self.config.seed)[horizon]
        for power in (1, 2):
            a, b = result.terminal ** power, reduced_paths ** power
            se = float(np.hypot(a.std(ddof=1) / np.sqrt(a.size), b.std(ddof=1) / np.sqrt(b.size)))
            rows.append(CheckRow.within(f"E[X_T^{power}] explicit vs reduced SDE", a.mean(), b.mean(), se, k))
        return rows

    def _run_demo_sample_state(self) -> List[CheckRow]:
        n_paths, n_steps = self._scale()
        k = self.thresholds["se_factor"]
        demo = sample_state_demo(self.model, n_steps, n_paths, self.problem.x0, self.problem.y0,
                                 seed=self.config.seed)
        return [
            CheckRow.within("corr(X_T - x0, W_T)", demo["corr"], 0.0, demo["corr_se"], k),
            CheckRow.within("Var(X_T - x0)", demo["var"], demo["var_target"], demo["var_se"], k),
        ]

    # writers

    def save_results_to_csv(self, report: ExperimentReport, output_dir: Optional[str] = None) -> Path:
        """Report rows as CSV behind '#' header lines"""
        directory = Path(output_dir or self.config.out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        return write_frame(report.to_frame(), report.header, directory, f"{report.experiment}_report")

    def save_results_to_json(self, report: ExperimentReport, output_dir: Optional[str] = None) -> Path:
        directory = Path(output_dir or self.config.out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        return write_json(report.to_dict(), directory, f"{report.experiment}_report")

    def save_artifacts(self, report: ExperimentReport, output_dir: Optional[str] = None) -> List[Path]:
        directory = Path(output_dir or self.config.out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, artifact in report.artifacts.items():
            stem = f"{report.experiment}_{name}"
            if isinstance(artifact, pd.DataFrame):
                if name == "scenarios" and self.config.dump_scenarios == "per-path":
                    for path_id, frame in artifact.groupby("path"):
                        written.append(write_frame(frame, report.header, directory, f"{stem}_path{path_id}"))
                    continue
                written.append(write_frame(artifact, report.header, directory, stem))
            else:
                written.append(write_json({"header": report.header, **artifact}, directory, stem))
        return written

    def save(self, report: ExperimentReport) -> List[Path]:
        """Write the report in the configured formats plus every artifact"""
        fmt = self.config.output_format
        written = []
        if fmt in ("both", "csv"):
            written.append(self.save_results_to_csv(report))
        if fmt in ("both", "json"):
            written.append(self.save_results_to_json(report))
        written.extend(self.save_artifacts(report))

        failed = len(report.failing_rows)
        self._print(f"\n📊 EXPERIMENT SUMMARY:")
        self._print(f"   Experiment: {report.experiment}")
        self._print(f"   Checks: {len(report.rows)}")
        self._print(f"   Passed: {len(report.rows) - failed}")
        self._print(f"   Failed: {failed}")
        self._print(f"   Wall clock: {report.wall_clock:.1f}s")
        for path in written:
            self._print(f"\n💾 Results saved to: {path}")
        return written


def run(config: ExperimentConfig, quiet: bool = False, write: bool = True) -> ExperimentReport:
    """Run one experiment and, unless write is False, save its report and artifacts"""
    pipeline = ExperimentPipeline(config, quiet=quiet)
    report = pipeline.run()
    if write:
        pipeline.save(report)
    return report
