"""
Config loading for jumpex experiments.

A config file is TOML or JSON with the tables `model`, `problem`,
`experiment` and `thresholds`. Unknown keys are rejected with their dotted
path. CLI flags override the file; the environment only supplies the output
directory (JUMPEX_OUT_DIR) and the worker count (JUMPEX_THREADS).
"""

import copy
import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import ConfigError, JumpexError
from .levy_model import (ConstantCoefficients, CosineUField, Damping, JumpSpec, MarketModel,
                         ProportionalCoefficients, UField)

OUT_DIR_ENV = "JUMPEX_OUT_DIR"
DEFAULT_OUT_DIR = "results"

DEFAULT_THRESHOLDS: Dict[str, float] = {
    "cf_abs": 0.02,
    "cf_se": 3.0,
    "trend_se": 2.0,
    "se_factor": 4.0,
    "value_se": 3.0,
    "perturbed_se": 2.0,
    "multiplier_se": 3.0,
    "hjb_atoms": 1e-8,
    "hjb_continuous": 1e-6,
    "hjb_detector": 1e-3,
    "ratio_low": 1.25,
    "ratio_high": 1.65,
    "identity_tol": 1e-12,
}

SCHEMA: Dict[str, set] = {
    "": {"model", "problem", "experiment", "thresholds"},
    "model": {"dimension", "horizon", "coefficients", "jumps", "damping", "probe"},
    "model.coefficients": {"variant", "b", "a", "gamma", "b_tilde", "a_tilde", "gamma_tilde", "u_field"},
    "model.coefficients.u_field": {"kind", "base", "amplitude", "frequency"},
    "model.jumps": {"intensity", "law", "atoms", "probabilities", "mean", "cov", "low", "high",
                    "quadrature_nodes"},
    "model.damping": {"c"},
    "model.probe": {"count", "radius"},
    "problem": {"lambda", "x0", "zhat", "y0", "w_hat"},
    "experiment": {"seed", "paths", "steps", "n_grid", "out", "times"},
    "thresholds": set(DEFAULT_THRESHOLDS),
}


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    lam: float
    x0: float
    zhat: float
    y0: np.ndarray
    w_hat: Optional[float] = None


@dataclass(eq=False)
class ExperimentConfig:
    """
    Everything one run needs. `paths` and `steps` are None unless set in the
    file or on the command line; each suite then uses its own default.
    """
    name: str
    config_path: str
    model: MarketModel
    problem: ProblemSpec
    seed: int = 0
    paths: Optional[int] = None
    steps: Optional[int] = None
    n_grid: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 256, 512, 1024])
    times: List[float] = field(default_factory=lambda: [0.5, 1.0])
    out_dir: str = DEFAULT_OUT_DIR
    thresholds: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    output_format: str = "both"
    dump_scenarios: Optional[str] = None
    dump_paths: bool = False
    digest: str = ""
    raw: Dict[str, Any] = field(default_factory=dict)

    def header(self) -> Dict[str, Any]:
        """Fields recorded verbatim at the top of every output file"""
        return {
            "experiment": self.name,
            "config": self.config_path,
            "config_digest": self.digest,
            "seed": self.seed,
            "paths": self.paths,
            "steps": self.steps,
            "thresholds": dict(self.thresholds),
        }


def read_config_file(path: str) -> Dict[str, Any]:
    suffix = Path(path).suffix.lower()
    try:
        if suffix == ".toml":
            with open(path, "rb") as f:
                return tomllib.load(f)
        if suffix == ".json":
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError("config", f"cannot parse {path}: {e}") from None
    raise ConfigError("config", f"unsupported config extension '{suffix}' (use .toml or .json)")


def check_keys(data: Dict[str, Any], prefix: str = "") -> None:
    allowed = SCHEMA.get(prefix)
    if allowed is None:
        return
    if not isinstance(data, dict):
        raise ConfigError(prefix or "config", "expected a table")
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in allowed:
            raise ConfigError(dotted, f"unknown key (allowed: {', '.join(sorted(allowed))})")
        if isinstance(value, dict):
            check_keys(value, dotted)


def _number(section: Dict, key: str, where: str, default: Any = None, positive: bool = False) -> float:
    if key not in section:
        if default is None:
            raise ConfigError(f"{where}.{key}", "missing required value")
        return default
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key}", f"expected a number, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{where}.{key}", f"must be positive, got {value}")
    return float(value)


def _array(section: Dict, key: str, where: str, shape: tuple) -> np.ndarray:
    if key not in section:
        raise ConfigError(f"{where}.{key}", "missing required value")
    try:
        arr = np.asarray(section[key], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}", "expected numbers") from None
    if arr.size != int(np.prod(shape)):
        raise ConfigError(f"{where}.{key}", f"expected {int(np.prod(shape))} entries for shape {shape}, got {arr.size}")
    return arr.reshape(shape)


def parse_model(section: Dict[str, Any]) -> MarketModel:
    d = int(_number(section, "dimension", "model", positive=True))
    horizon = _number(section, "horizon", "model", default=1.0, positive=True)
    coeffs_raw = section.get("coefficients")
    if coeffs_raw is None:
        raise ConfigError("model.coefficients", "missing required table")
    variant = coeffs_raw.get("variant", "constant")
    where = "model.coefficients"
    if variant == "constant":
        coeffs = ConstantCoefficients(_array(coeffs_raw, "b", where, (d,)), _array(coeffs_raw, "a", where, (d, d)),
                                      _array(coeffs_raw, "gamma", where, (d, d)))
    elif variant == "proportional":
        u_raw = coeffs_raw.get("u_field", {"kind": "identity"})
        kind = u_raw.get("kind", "identity")
        if kind == "identity":
            u_field = UField()
        elif kind == "cosine":
            uw = f"{where}.u_field"
            u_field = CosineUField(_number(u_raw, "base", uw, default=1.0), _number(u_raw, "amplitude", uw, default=0.0),
                                   _number(u_raw, "frequency", uw, default=1.0))
        else:
            raise ConfigError(f"{where}.u_field.kind", f"unknown field kind '{kind}' (identity or cosine)")
        coeffs = ProportionalCoefficients(_array(coeffs_raw, "b_tilde", where, (d,)),
                                          _array(coeffs_raw, "a_tilde", where, (d, d)),
                                          _array(coeffs_raw, "gamma_tilde", where, (d, d)), u_field)
    else:
        raise ConfigError(f"{where}.variant", f"unknown variant '{variant}' (constant or proportional)")

    jumps_raw = section.get("jumps", {"law": "none", "intensity": 0.0})
    law = jumps_raw.get("law", "none")
    jw = "model.jumps"
    kwargs: Dict[str, Any] = {
        "intensity": _number(jumps_raw, "intensity", jw, default=0.0),
        "law": law,
        "dimension": d,
        "quadrature_nodes": int(_number(jumps_raw, "quadrature_nodes", jw, default=64)),
    }
    if law == "atoms":
        probs = np.asarray(jumps_raw.get("probabilities", []), dtype=float)
        kwargs["probabilities"] = probs
        kwargs["atoms"] = _array(jumps_raw, "atoms", jw, (probs.size, d))
    elif law == "gaussian":
        kwargs["mean"] = _array(jumps_raw, "mean", jw, (d,)) if "mean" in jumps_raw else np.zeros(d)
        kwargs["cov"] = _array(jumps_raw, "cov", jw, (d, d))
    elif law == "uniform":
        kwargs["low"] = _array(jumps_raw, "low", jw, (d,))
        kwargs["high"] = _array(jumps_raw, "high", jw, (d,))
    elif law != "none":
        raise ConfigError(f"{jw}.law", f"unknown jump law '{law}' (atoms, gaussian, uniform or none)")
    jumps = JumpSpec(**kwargs)

    damping = Damping(_number(section.get("damping", {}), "c", "model.damping", default=0.5, positive=True))
    probe = section.get("probe", {})
    return MarketModel(coeffs, jumps, damping, horizon,
                       probe_count=int(_number(probe, "count", "model.probe", default=32, positive=True)),
                       probe_radius=_number(probe, "radius", "model.probe", default=1.0, positive=True))


def parse_problem(section: Dict[str, Any], dimension: int) -> ProblemSpec:
    lam = _number(section, "lambda", "problem", default=0.1)
    if lam < 0:
        raise ConfigError("problem.lambda", f"must be >= 0, got {lam}")
    y0 = _array(section, "y0", "problem", (dimension,)) if "y0" in section else np.zeros(dimension)
    w_hat = _number(section, "w_hat", "problem") if "w_hat" in section else None
    return ProblemSpec(lam, _number(section, "x0", "problem", default=1.0),
                       _number(section, "zhat", "problem", default=1.4), y0, w_hat)


def config_digest(raw: Dict[str, Any]) -> str:
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_experiment_config(path: str, name: str, seed: Optional[int] = None, paths: Optional[int] = None,
                           steps: Optional[int] = None, out_dir: Optional[str] = None,
                           output_format: str = "both", dump_scenarios: Optional[str] = None,
                           dump_paths: bool = False) -> ExperimentConfig:
    """
    Read, validate and override a config file.

    Raises:
        ConfigError: malformed file, unknown key or invalid value (field path in the message)
    """
    raw = read_config_file(path)
    check_keys(raw)
    if "model" not in raw:
        raise ConfigError("model", "missing required table")
    effective = copy.deepcopy(raw)
    exp = effective.setdefault("experiment", {})
    if seed is not None:
        exp["seed"] = seed
    if paths is not None:
        exp["paths"] = paths
    if steps is not None:
        exp["steps"] = steps

    try:
        model = parse_model(raw["model"])
        problem = parse_problem(raw.get("problem", {}), model.dimension)
        model.validate(problem.y0)
    except ConfigError:
        raise
    except JumpexError as e:
        raise ConfigError("model", str(e)) from None

    thresholds = dict(DEFAULT_THRESHOLDS)
    for key in raw.get("thresholds", {}):
        thresholds[key] = _number(raw["thresholds"], key, "thresholds", positive=True)

    def _count(key: str) -> Optional[int]:
        if key not in exp:
            return None
        value = _number(exp, key, "experiment", positive=True)
        if value != int(value):
            raise ConfigError(f"experiment.{key}", f"expected an integer, got {value}")
        return int(value)

    n_grid = [int(n) for n in exp.get("n_grid", [16, 32, 64, 128, 256, 512, 1024])]
    if not n_grid or any(n < 1 for n in n_grid):
        raise ConfigError("experiment.n_grid", "expected a non-empty list of positive step counts")
    times = [float(t) for t in exp.get("times", [0.5 * model.horizon, model.horizon])]
    if any(not 0 < t <= model.horizon for t in times):
        raise ConfigError("experiment.times", f"times must lie in (0, {model.horizon}]")
    resolved_out = out_dir or os.getenv(OUT_DIR_ENV) or exp.get("out") or DEFAULT_OUT_DIR
    if output_format not in ("both", "json", "csv"):
        raise ConfigError("output_format", f"unknown format '{output_format}'")
    if dump_scenarios not in (None, "per-path", "long"):
        raise ConfigError("dump_scenarios", f"expected per-path or long, got '{dump_scenarios}'")

    return ExperimentConfig(
        name=name,
        config_path=str(path),
        model=model,
        problem=problem,
        seed=int(_number(exp, "seed", "experiment", default=0)),
        paths=_count("paths"),
        steps=_count("steps"),
        n_grid=sorted(n_grid),
        times=times,
        out_dir=str(resolved_out),
        thresholds=thresholds,
        output_format=output_format,
        dump_scenarios=dump_scenarios,
        dump_paths=dump_paths,
        digest=config_digest(effective),
        raw=effective,
    )
