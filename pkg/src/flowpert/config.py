"""Run configuration: dataclasses, TOML loading and writing.

Files are flat TOML: ``[section]`` tables of ``key = value`` (dotted keys such
as ``smc.n_particles = 500`` work too).  Every section and key is optional;
unknown keys are errors, so typos fail loudly.

Sections and defaults::

    seed = 0            # master seed
    out = "runs"        # output root
    workers = 1         # worker processes over independent runs

    [target]    kind = "benchmark" | "stationary" | "linear_gaussian"
                dim = 10, seed = 0, diag_noise_std = 0.5, weights = [0.25, 0.75],
                flow_weights = [0.5, 0.5], scale = 0.5
    [flow]      beta_min = 0.1, beta_max = 20.0, t_max = 1.0, steps = 100,
                integrator = "heun"
    [estimator] kind = "fppp", delta = 1e-4, mode = "fd", n_probes = 1,
                probe_dist = "gaussian", probe_reuse = "trajectory"
    [smc]       n_particles = 1000, n_levels = 200, mcmc_steps = 10, block_size,
                prop_scale = 0.1, ess_threshold = 0.5, resample = "systematic",
                noise_refresh = "mh", betas
    [bench]     estimators = ["fppp"], n_runs = 10, direct_samples = 100000,
                rc_bins = 60, rc_range = [-4.0, 4.0], energy_bins = 50
    [validate]  see :class:`ValidateSpec`
    [estimate]  n_draws = 10, n_points = 1, z_file
"""

from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimators import EstimatorConfig
from .flow import INTEGRATORS, DiffusionSchedule, LinearGaussianFlow, ProbabilityFlow, TimeGrid
from .gmm import GmmSpec, build_benchmark_gmm, single_gaussian, with_weights
from .smc import SmcConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

TARGET_KINDS = ("benchmark", "stationary", "linear_gaussian")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "benchmark"
    dim: int = 10
    seed: int = 0
    diag_noise_std: float = 0.5
    weights: tuple = (0.25, 0.75)
    # mixture the flow transports to; uniform weights mimic a flow trained on
    # samples drawn uniformly from the modes
    flow_weights: tuple = (0.5, 0.5)
    # isotropic target std for the linear_gaussian system
    scale: float = 0.5

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ConfigError(f"target.kind must be one of {TARGET_KINDS}, got {self.kind!r}")
        if self.dim < 1 or (self.kind == "benchmark" and self.dim < 2):
            raise ConfigError(f"target.dim too small: {self.dim}")
        if self.diag_noise_std < 0:
            raise ConfigError("target.diag_noise_std must be >= 0")
        for name in ("weights", "flow_weights"):
            w = np.asarray(getattr(self, name), dtype=float)
            if w.shape != (2,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError(f"target.{name} must be two positive numbers summing to 1")
        if not self.scale > 0:
            raise ConfigError("target.scale must be positive")


@dataclass(frozen=True)
class FlowSpec:
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_max: float = 1.0
    steps: int = 100
    integrator: str = "heun"

    def __post_init__(self):
        if not 0 <= self.beta_min <= self.beta_max:
            raise ConfigError("flow.beta_min must satisfy 0 <= beta_min <= beta_max")
        if not self.t_max > 0:
            raise ConfigError("flow.t_max must be positive")
        if self.steps < 1:
            raise ConfigError("flow.steps must be >= 1")
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"flow.integrator must be one of {INTEGRATORS}")


@dataclass(frozen=True)
class BenchSpec:
    estimators: tuple = ("fppp",)
    n_runs: int = 10
    direct_samples: int = 100_000
    rc_bins: int = 60
    rc_range: tuple = (-4.0, 4.0)
    energy_bins: int = 50

    def __post_init__(self):
        if not self.estimators:
            raise ConfigError("bench.estimators must list at least one estimator")
        for tok in self.estimators:
            parse_estimator_token(tok, EstimatorConfig())
        if self.n_runs < 1 or self.direct_samples < 10:
            raise ConfigError("bench.n_runs must be >= 1 and bench.direct_samples >= 10")
        if self.rc_bins < 1 or self.energy_bins < 1:
            raise ConfigError("histogram bin counts must be >= 1")
        if len(self.rc_range) != 2 or not self.rc_range[0] < self.rc_range[1]:
            raise ConfigError("bench.rc_range must be [lo, hi] with lo < hi")


@dataclass(frozen=True)
class ValidateSpec:
    """Sizes and tolerances of the validation suites."""

    sphere_matrices: int = 200
    sphere_dims: tuple = (2, 3, 5, 10)
    sphere_cond_max: float = 1e3
    sphere_draws: int = 100_000
    sphere_n_se: float = 4.0
    roundtrip_points: int = 100
    roundtrip_tol: float = 1e-3
    unbiased_dim: int = 5
    unbiased_steps: int = 16
    unbiased_draws: int = 100_000
    unbiased_n_se: float = 3.0
    variance_points: int = 10
    variance_draws: int = 10_000
    variance_min_pass: int = 9
    variance_confidence: float = 0.99

    def __post_init__(self):
        if any(d < 1 for d in self.sphere_dims) or not self.sphere_dims:
            raise ConfigError("validate.sphere_dims must be positive integers")
        if not self.sphere_cond_max >= 1:
            raise ConfigError("validate.sphere_cond_max must be >= 1")
        if not 0.5 < self.variance_confidence < 1:
            raise ConfigError("validate.variance_confidence must lie in (0.5, 1)")
        if self.variance_min_pass > self.variance_points:
            raise ConfigError("validate.variance_min_pass exceeds validate.variance_points")
        for name in ("sphere_draws", "unbiased_draws", "variance_draws"):
            if getattr(self, name) < 2:
                raise ConfigError(f"validate.{name} must be >= 2")


@dataclass(frozen=True)
class EstimateSpec:
    n_draws: int = 10
    n_points: int = 1
    z_file: str | None = None

    def __post_init__(self):
        if self.n_draws < 1 or self.n_points < 1:
            raise ConfigError("estimate.n_draws and estimate.n_points must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    target: TargetSpec = field(default_factory=TargetSpec)
    flow: FlowSpec = field(default_factory=FlowSpec)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    smc: SmcConfig = field(default_factory=SmcConfig)
    bench: BenchSpec = field(default_factory=BenchSpec)
    validate: ValidateSpec = field(default_factory=ValidateSpec)
    estimate: EstimateSpec = field(default_factory=EstimateSpec)
    seed: int = 0
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    # -- builders -----------------------------------------------------------

    def build_target(self) -> GmmSpec:
        t = self.target
        if t.kind == "benchmark":
            return build_benchmark_gmm(t.dim, t.seed, t.diag_noise_std, t.weights)
        if t.kind == "stationary":
            return single_gaussian(np.zeros(t.dim), np.eye(t.dim))
        return single_gaussian(np.zeros(t.dim), t.scale**2 * np.eye(t.dim))

    def build_flow(self, counter=None):
        f, t = self.flow, self.target
        grid = TimeGrid.uniform(f.steps, f.t_max)
        if t.kind == "linear_gaussian":
            return LinearGaussianFlow(np.zeros(t.dim), t.scale, grid, counter)
        schedule = DiffusionSchedule(f.beta_min, f.beta_max, f.t_max)
        if t.kind == "stationary":
            data = single_gaussian(np.zeros(t.dim), np.eye(t.dim))
        else:
            data = with_weights(self.build_target(), t.flow_weights)
        return ProbabilityFlow(data, schedule, grid, f.integrator, counter)


SECTIONS = {
    "target": TargetSpec,
    "flow": FlowSpec,
    "estimator": EstimatorConfig,
    "smc": SmcConfig,
    "bench": BenchSpec,
    "validate": ValidateSpec,
    "estimate": EstimateSpec,
}


def parse_estimator_token(token: str, base: EstimatorConfig) -> EstimatorConfig:
    """``fp``, ``fppp``, ``bruteforce``, or ``hutchinson-G<n>`` / ``hutchinson-R<n>``."""
    tok = token.strip().lower()
    try:
        if tok.startswith("hutchinson-"):
            code = tok.split("-", 1)[1]
            dist = {"g": "gaussian", "r": "rademacher"}[code[0]]
            return dataclasses.replace(base, kind="hutchinson", probe_dist=dist, n_probes=int(code[1:]))
        return dataclasses.replace(base, kind=tok)
    except (KeyError, ValueError, IndexError) as exc:
        raise ConfigError(f"bad estimator token {token!r}: expected fp, fppp, bruteforce or hutchinson-G<n>/R<n>") from exc


def _coerce(value, hint, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, where)
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _build(cls, table: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{prefix}]: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}") for k, v in table.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{prefix}] {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    top = {}
    sections = {}
    for key, val in doc.items():
        if key in SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"[{key}] must be a table")
            sections[key] = _build(SECTIONS[key], val, key)
        else:
            top[key] = val
    return _build(RunConfig, {**top, **sections}, "top level") if top else RunConfig(**sections)


def loads_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return config_from_dict(doc)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads_config(text, str(path))


def _fmt(value) -> str:
    if value is None:
        raise TypeError("None is not representable")
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise ConfigError("non-finite floats cannot be written to config")
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dump_config(cfg: RunConfig) -> str:
    """Resolved config as TOML; ``None`` fields are omitted (their default)."""
    lines = []
    for name in ("seed", "out", "workers"):
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    for section in SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if val is not None:
                lines.append(f"{f.name} = {_fmt(val)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
