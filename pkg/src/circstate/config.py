from __future__ import annotations

import hashlib
import json
import math
import tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from platformdirs import user_config_dir

from circstate.circular import DEFAULT_K_MAX, VonMisesParams
from circstate.model import (
    DEFAULT_BETA_G_MEAN,
    DEFAULT_FIXED_MASK,
    GRID_MODES,
    InverseGammaPrior,
    NormalPrior,
    PriorSpec,
)

APP_NAME = "circstate"
DEFAULT_SEED = 20240101
VARIANCE_WALKS = ("sd", "log")
GENERATORS = ("nonlinear", "model")


@dataclass(frozen=True)
class PriorConfig:
    x0_mu: float = math.pi
    x0_kappa: float = 1.0
    sigma2_eps_shape: float = 4.01
    sigma2_eps_scale: float = 0.005 * 5.01
    sigma2_f_shape: float = 4.01
    sigma2_f_scale: float = 0.1 * 5.01
    sigma2_eta_shape: float = 4.01
    sigma2_eta_scale: float = 0.1 * 5.01
    sigma2_g_shape: float = 4.01
    sigma2_g_scale: float = 0.1 * 5.01
    beta_f_mean: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    beta_f_var: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    beta_g_mean: tuple[float, ...] = DEFAULT_BETA_G_MEAN
    beta_g_var: tuple[float, ...] = (1.0, 1.0, 0.0, 0.0)

    def to_spec(self) -> PriorSpec:
        return PriorSpec(
            x0=VonMisesParams(self.x0_mu, self.x0_kappa),
            sigma2_eps=InverseGammaPrior.from_shape_scale(
                self.sigma2_eps_shape, self.sigma2_eps_scale
            ),
            sigma2_eta=InverseGammaPrior.from_shape_scale(
                self.sigma2_eta_shape, self.sigma2_eta_scale
            ),
            sigma2_f=InverseGammaPrior.from_shape_scale(self.sigma2_f_shape, self.sigma2_f_scale),
            sigma2_g=InverseGammaPrior.from_shape_scale(self.sigma2_g_shape, self.sigma2_g_scale),
            beta_f=NormalPrior.diagonal(self.beta_f_mean, self.beta_f_var),
            beta_g=NormalPrior.diagonal(self.beta_g_mean, self.beta_g_var),
        )


@dataclass(frozen=True)
class GridConfig:
    n: int = 20
    mode: str = "time_scaled"


@dataclass(frozen=True)
class ModelConfig:
    # σ̂_g = 0.1258 and σ̂_η = 0.1348 as reported for the benchmark series
    sigma2_g: float = 0.1258**2
    sigma2_eta: float = 0.1348**2
    beta_g_fixed: tuple[bool, ...] = DEFAULT_FIXED_MASK
    k_max: int = DEFAULT_K_MAX


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 5000
    burn_in: int = 2500
    thin: int = 1
    sigma_walk_var: float = 0.05
    variance_walk: str = "sd"
    x0_kappa: float = 3.0
    mixture_kappas: tuple[float, ...] = (0.5, 3.0)
    mixture_weights: tuple[float, ...] = (0.5, 0.5)
    k_walk_var: float = 1.0
    rebuild_every: int = 500
    audit: bool = False
    audit_every: int = 100
    sample_evolution_variances: bool = False
    evolution_variance_bound: float = math.inf
    evolution_walk_var: float = 0.05
    chains: int = 1

    def __post_init__(self) -> None:
        if self.n_iter <= 0:
            msg = "mcmc.n_iter must be greater than 0"
            raise ValueError(msg)
        if not 0 <= self.burn_in < self.n_iter:
            msg = "mcmc.burn_in must satisfy 0 <= burn_in < n_iter"
            raise ValueError(msg)
        for name in ("thin", "rebuild_every", "audit_every", "chains"):
            if getattr(self, name) <= 0:
                msg = f"mcmc.{name} must be greater than 0"
                raise ValueError(msg)
        for name in ("sigma_walk_var", "x0_kappa", "k_walk_var", "evolution_walk_var"):
            if not getattr(self, name) > 0.0:
                msg = f"mcmc.{name} must be greater than 0"
                raise ValueError(msg)
        if self.variance_walk not in VARIANCE_WALKS:
            msg = f"mcmc.variance_walk must be one of {', '.join(VARIANCE_WALKS)}"
            raise ValueError(msg)
        if self.sample_evolution_variances and not math.isfinite(self.evolution_variance_bound):
            msg = (
                "mcmc.sample_evolution_variances needs a finite mcmc.evolution_variance_bound; "
                "the posterior of the evolution variances is improper otherwise"
            )
            raise ValueError(msg)
        if not self.evolution_variance_bound > 0.0:
            msg = "mcmc.evolution_variance_bound must be greater than 0"
            raise ValueError(msg)

    @property
    def n_kept(self) -> int:
        return len(range(self.burn_in, self.n_iter, self.thin))


@dataclass(frozen=True)
class AnnealConfig:
    init_sigma_g: float = 0.3
    init_sigma_eta: float = 0.3
    proposal_sd: tuple[float, ...] = (0.2, 0.2)
    initial_temperature: float = 1.0
    cooling: float = 0.98
    iterations: int = 300
    mc_samples: int = 200

    def __post_init__(self) -> None:
        if not (self.init_sigma_g > 0.0 and self.init_sigma_eta > 0.0):
            msg = "anneal.init_sigma_g and anneal.init_sigma_eta must be greater than 0"
            raise ValueError(msg)
        if len(self.proposal_sd) != 2 or any(not sd > 0.0 for sd in self.proposal_sd):
            msg = "anneal.proposal_sd must hold two positive numbers"
            raise ValueError(msg)
        if not self.initial_temperature > 0.0:
            msg = "anneal.initial_temperature must be greater than 0"
            raise ValueError(msg)
        if not 0.0 < self.cooling < 1.0:
            msg = "anneal.cooling must lie in (0, 1)"
            raise ValueError(msg)
        if self.iterations < 0:
            msg = "anneal.iterations must be nonnegative"
            raise ValueError(msg)
        if self.mc_samples < 1:
            msg = "anneal.mc_samples must be at least 1"
            raise ValueError(msg)


@dataclass(frozen=True)
class SimulateConfig:
    generator: str = "nonlinear"
    T: int = 101
    alpha: float = 0.05
    beta: float = 0.1
    gamma: float = 0.2
    sigma_u: float = 0.1
    sigma_v: float = 0.1
    theta0: float = math.pi


@dataclass(frozen=True)
class DataConfig:
    detrend: bool = False
    theta_in_degrees: bool = False
    holdout: bool = True


@dataclass(frozen=True)
class OutputConfig:
    n_bins: int = 100
    hpd_level: float = 0.95


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    prior: PriorConfig = field(default_factory=PriorConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    anneal: AnnealConfig = field(default_factory=AnnealConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


SECTIONS: dict[str, type] = {
    "prior": PriorConfig,
    "grid": GridConfig,
    "model": ModelConfig,
    "mcmc": McmcConfig,
    "anneal": AnnealConfig,
    "simulate": SimulateConfig,
    "data": DataConfig,
    "output": OutputConfig,
}


def config_path() -> Path:
    directory = Path(user_config_dir(APP_NAME, appauthor=False))
    return directory / "config.toml"


def load_config(path: Path | None = None) -> RunConfig:
    effective_path = path or config_path()
    if not effective_path.exists():
        return RunConfig()

    try:
        content = tomllib.loads(effective_path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        msg = f"{effective_path} is not valid TOML: {exc}"
        raise ValueError(msg) from exc
    return parse_config(content)


def parse_config(content: dict[str, object]) -> RunConfig:
    unknown = sorted(set(content) - set(SECTIONS) - {"seed"})
    if unknown:
        msg = f"unknown config key: {unknown[0]}"
        raise ValueError(msg)
    seed = _as_int(content.get("seed"), "seed")
    if seed is None:
        seed = DEFAULT_SEED
    if seed < 0:
        msg = "seed must be nonnegative"
        raise ValueError(msg)

    sections: dict[str, object] = {}
    for name, cls in SECTIONS.items():
        table = _as_dict(content.get(name), name)
        sections[name] = _build_section(name, cls, table)
    run = RunConfig(seed=seed, **sections)
    _validate(run)
    return run


def _build_section(section: str, cls: type, table: dict[str, object]) -> object:
    defaults = cls()
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        msg = f"unknown config key: {section}.{unknown[0]}"
        raise ValueError(msg)
    values: dict[str, object] = {}
    for name, raw in table.items():
        key = f"{section}.{name}"
        default = getattr(defaults, name)
        if isinstance(default, bool):
            values[name] = _as_bool(raw, key)
        elif isinstance(default, int):
            values[name] = _as_int(raw, key)
        elif isinstance(default, float):
            values[name] = _as_float(raw, key)
        elif isinstance(default, str):
            values[name] = _as_str(raw, key)
        elif isinstance(default, tuple) and default and isinstance(default[0], bool):
            values[name] = _as_bool_list(raw, key, len(default))
        else:
            values[name] = _as_float_list(raw, key)
    return cls(**values)


def _validate(run: RunConfig) -> None:
    if run.grid.n < 2:
        msg = "grid.n must be at least 2"
        raise ValueError(msg)
    if run.grid.mode not in GRID_MODES:
        msg = f"grid.mode must be one of {', '.join(GRID_MODES)}"
        raise ValueError(msg)
    if not (run.model.sigma2_g > 0.0 and run.model.sigma2_eta > 0.0):
        msg = "model.sigma2_g and model.sigma2_eta must be greater than 0"
        raise ValueError(msg)
    if run.model.k_max < 1:
        msg = "model.k_max must be at least 1"
        raise ValueError(msg)
    for name in ("beta_f_mean", "beta_f_var", "beta_g_mean", "beta_g_var"):
        if len(getattr(run.prior, name)) != 4:
            msg = f"prior.{name} must hold 4 numbers"
            raise ValueError(msg)
    for i, fixed in enumerate(run.model.beta_g_fixed):
        if not fixed and not run.prior.beta_g_var[i] > 0.0:
            msg = f"prior.beta_g_var[{i}] must be greater than 0 for a free component"
            raise ValueError(msg)
    if run.simulate.generator not in GENERATORS:
        msg = f"simulate.generator must be one of {', '.join(GENERATORS)}"
        raise ValueError(msg)
    if run.simulate.T < 2:
        msg = "simulate.T must be at least 2"
        raise ValueError(msg)
    if not (run.simulate.sigma_u > 0.0 and run.simulate.sigma_v > 0.0):
        msg = "simulate.sigma_u and simulate.sigma_v must be greater than 0"
        raise ValueError(msg)
    if run.output.n_bins < 1:
        msg = "output.n_bins must be at least 1"
        raise ValueError(msg)
    if not 0.0 < run.output.hpd_level < 1.0:
        msg = "output.hpd_level must lie in (0, 1)"
        raise ValueError(msg)
    try:
        run.prior.to_spec()
    except ValueError as exc:
        msg = f"invalid prior: {exc}"
        raise ValueError(msg) from exc


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_config(config: RunConfig, path: Path | None = None) -> Path:
    effective_path = path or config_path()
    effective_path.parent.mkdir(parents=True, exist_ok=True)
    effective_path.write_text(render_config(config), encoding="utf-8")
    return effective_path


def render_config(config: RunConfig) -> str:
    lines = [f"seed = {config.seed}", ""]
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_render_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _render_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{_escape_toml_string(value)}"'
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_render_value(v) for v in value) + "]"
    return str(value)


def _escape_toml_string(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"')


def _as_dict(value: object, key: str) -> dict[str, object]:
    if value is None:
        return {}
    if isinstance(value, dict):
        return value
    msg = f"{key} must be a TOML table"
    raise ValueError(msg)


def _as_str(value: object, key: str) -> str:
    if isinstance(value, str):
        return value
    msg = f"{key} must be a string"
    raise ValueError(msg)


def _as_bool(value: object, key: str) -> bool:
    if isinstance(value, bool):
        return value
    msg = f"{key} must be true or false"
    raise ValueError(msg)


def _as_float(value: object, key: str) -> float:
    if isinstance(value, int | float) and not isinstance(value, bool):
        return float(value)
    msg = f"{key} must be a number"
    raise ValueError(msg)


def _as_int(value: object, key: str) -> int | None:
    if value is None:
        return None
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    msg = f"{key} must be an integer"
    raise ValueError(msg)


def _as_float_list(value: object, key: str) -> tuple[float, ...]:
    if isinstance(value, list) and value:
        return tuple(_as_float(v, key) for v in value)
    msg = f"{key} must be a non-empty list of numbers"
    raise ValueError(msg)


def _as_bool_list(value: object, key: str, length: int) -> tuple[bool, ...]:
    if isinstance(value, list) and len(value) == length:
        return tuple(_as_bool(v, key) for v in value)
    msg = f"{key} must be a list of {length} booleans"
    raise ValueError(msg)
