"""Run configuration from an INI file, ``--set`` overrides and ``SPOTVOL_*`` variables.

Precedence, highest first: command-line overrides, the INI file, environment
variables (``SPOTVOL_SIM__SEED=7``), field defaults. Every section rejects unknown keys.
"""

import configparser
import logging
from fractions import Fraction
from pathlib import Path as FilePath
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .models import (
    BANDWIDTH_PRESETS,
    CURVE_MODELS,
    MODEL_PRESETS,
    RATE_MODELS,
    ExperimentConfig,
    FilterParams,
    GaussDampedDiffusion,
    KernelConfig,
    ModelSpec,
    PowerDiffusion,
    SimConfig,
    ThetaSearchConfig,
)

logger = logging.getLogger(__name__)

DEFAULT_BANDWIDTH = 0.15


def parse_number(value: Any) -> Any:
    """Accept ``"1/16000"`` style fractions wherever a float is expected."""
    if isinstance(value, str) and "/" in value:
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"not a number: {value!r}") from e
    return value


def parse_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    preset: Optional[str] = Field(
        None, description="lin, quad, cube, nlin, curve1..curve4 or custom"
    )
    drift_alpha: Optional[float] = Field(None, description="Drift intercept (custom)")
    drift_beta: Optional[float] = Field(None, description="Drift slope (custom)")
    diffusion: Literal["power", "gauss_damped"] = Field(
        "power", description="Diffusion family (custom)"
    )
    s0: Optional[float] = Field(None, description="Power diffusion scale (custom)")
    rho: Optional[float] = Field(None, description="Power diffusion exponent (custom)")
    x0: Optional[float] = Field(None, description="Initial value (custom)")

    @field_validator("drift_alpha", "drift_beta", "s0", "rho", "x0", mode="before")
    @classmethod
    def validate_number(cls, v: Any) -> Any:
        return parse_number(v)

    def resolve(self, default: Optional[str] = None) -> ModelSpec:
        preset = self.preset or default
        if preset is None:
            raise ValueError("no model selected: set [model] preset")
        if preset != "custom":
            if preset not in MODEL_PRESETS:
                choices = ", ".join([*MODEL_PRESETS, "custom"])
                raise ValueError(
                    f"unknown model preset '{preset}' (choose from {choices})"
                )
            return MODEL_PRESETS[preset]

        required = ["drift_alpha", "drift_beta", "x0"]
        if self.diffusion == "power":
            required += ["s0", "rho"]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"custom model needs [model] {', '.join(missing)}")
        diffusion: Union[PowerDiffusion, GaussDampedDiffusion]
        if self.diffusion == "power":
            diffusion = PowerDiffusion(s0=self.s0, rho=self.rho)
        else:
            diffusion = GaussDampedDiffusion()
        return ModelSpec(
            name="custom",
            drift_alpha=self.drift_alpha,
            drift_beta=self.drift_beta,
            diffusion=diffusion,
            x0=self.x0,
        )


class SimSection(_Section):
    gen_dt: float = Field(1 / 3.2e5, gt=0, description="Data-generating Euler step")
    sample_dt: float = Field(1 / 16000, gt=0, description="Observation step")
    burn_in_span: float = Field(0.125, ge=0, description="Discarded leading time")
    total_span: float = Field(0.25, gt=0, description="Span of retained observations")
    seed: Optional[int] = Field(None, ge=0, lt=2**64, description="Root seed")

    @field_validator("gen_dt", "sample_dt", "burn_in_span", "total_span", mode="before")
    @classmethod
    def validate_number(cls, v: Any) -> Any:
        return parse_number(v)


class FilterSection(_Section):
    theta: Optional[float] = Field(
        None, description="Fixed nuisance parameter; empty searches by quasi-likelihood"
    )
    y1_init: float = Field(0.0, description="Initial slope with init_slope=fixed")
    init_slope: Literal["fixed", "local_linear"] = Field(
        "local_linear",
        description="Initial slope: y1_init, or the kernel slope at the window end",
    )
    y_floor: float = Field(1e-12, gt=0, description="Floor of the filtered state")
    theta_min_abs: float = Field(1e-6, gt=0, description="Smallest admissible |theta|")
    innovation: Literal["prediction", "increment"] = Field(
        "prediction", description="Innovation form of the update"
    )
    init_window_len: int = Field(401, ge=2, description="Initial window length")

    @field_validator("theta", "y1_init", "y_floor", "theta_min_abs", mode="before")
    @classmethod
    def validate_number(cls, v: Any) -> Any:
        return None if v == "" else parse_number(v)


class KernelSection(_Section):
    bandwidth: Optional[float] = Field(
        None, gt=0, description="Kernel bandwidth; empty uses the model's preset"
    )

    @field_validator("bandwidth", mode="before")
    @classmethod
    def validate_number(cls, v: Any) -> Any:
        return None if v == "" else parse_number(v)


class ThetaSearchSection(ThetaSearchConfig):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ExperimentSection(_Section):
    n_paths: int = Field(1000, ge=1, description="Monte Carlo paths per model")
    estimation_len: int = Field(2000, ge=3, description="Observations used for fitting")
    evaluation_len: int = Field(2000, ge=2, description="Held-out observations")
    models: Optional[list[str]] = Field(
        None, description="Comma-separated presets; empty uses the default four"
    )
    curve_dts: list[float] = Field(
        [1 / 4000, 1 / 8000, 1 / 16000], description="Curve study observation steps"
    )
    curve_gen_dt: float = Field(1 / 1.28e6, gt=0, description="Curve study Euler step")
    curve_burn_in_span: float = Field(0.5, ge=0, description="Curve study burn-in")
    curve_total_span: float = Field(1.0, gt=0, description="Span of the curve study")
    init_window_span: float = Field(
        0.025, gt=0, description="Initial-window span of the curve study"
    )
    curve_paths: int = Field(1, ge=1, description="Paths in the curve RMSE summary")
    curve_share_theta: bool = Field(
        True, description="Reuse the coarsest step's theta at the finer curve steps"
    )
    batch_size: int = Field(50, ge=1, description="Paths processed together")
    workers: Optional[int] = Field(None, ge=1, description="Worker processes")
    max_drop_fraction: float = Field(
        0.05, ge=0, le=1, description="Tolerated share of dropped paths"
    )

    @field_validator("models", mode="before")
    @classmethod
    def validate_models(cls, v: Any) -> Any:
        if v == "":
            return None
        return parse_list(v)

    @field_validator("curve_dts", mode="before")
    @classmethod
    def validate_curve_dts(cls, v: Any) -> Any:
        return [parse_number(item) for item in parse_list(v)]

    @field_validator(
        "curve_gen_dt",
        "curve_burn_in_span",
        "curve_total_span",
        "init_window_span",
        mode="before",
    )
    @classmethod
    def validate_number(cls, v: Any) -> Any:
        return parse_number(v)


class RunConfig(BaseSettings):
    """Resolved configuration of one command."""

    model_config = SettingsConfigDict(
        env_prefix="SPOTVOL_", env_nested_delimiter="__", extra="forbid"
    )

    model: ModelSection = Field(default_factory=ModelSection)
    sim: SimSection = Field(default_factory=SimSection)
    filter: FilterSection = Field(default_factory=FilterSection)
    kernel: KernelSection = Field(default_factory=KernelSection)
    theta_search: ThetaSearchSection = Field(default_factory=ThetaSearchSection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)

    def require_seed(self) -> int:
        if self.sim.seed is None:
            raise ValueError("a seed is required: pass --seed or set [sim] seed")
        return self.sim.seed

    def model_spec(self, default: Optional[str] = None) -> ModelSpec:
        return self.model.resolve(default)

    def sim_config(self) -> SimConfig:
        return SimConfig(
            gen_dt=self.sim.gen_dt,
            sample_dt=self.sim.sample_dt,
            burn_in_span=self.sim.burn_in_span,
            total_span=self.sim.total_span,
            seed=self.require_seed(),
        )

    def filter_params(
        self, theta: float, alpha_hat: float, beta_hat: float
    ) -> FilterParams:
        return FilterParams(
            theta=theta,
            alpha_hat=alpha_hat,
            beta_hat=beta_hat,
            y1_init=self.filter.y1_init,
            init_slope=self.filter.init_slope,
            y_floor=self.filter.y_floor,
            theta_min_abs=self.filter.theta_min_abs,
            innovation=self.filter.innovation,
        )

    def kernel_config(self, model_name: str) -> KernelConfig:
        bandwidth = self.kernel.bandwidth
        if bandwidth is None:
            bandwidth = BANDWIDTH_PRESETS.get(model_name, DEFAULT_BANDWIDTH)
        return KernelConfig(bandwidth=bandwidth)

    def theta_search_config(self) -> ThetaSearchConfig:
        return ThetaSearchConfig(**self.theta_search.model_dump())

    def table_models(self) -> list[ModelSpec]:
        names = self.experiment.models or list(RATE_MODELS)
        return [ModelSection(preset=name).resolve() for name in names]

    def curve_models(self) -> list[ModelSpec]:
        if self.model.preset is not None:
            return [self.model.resolve()]
        names = self.experiment.models or list(CURVE_MODELS)
        return [ModelSection(preset=name).resolve() for name in names]

    def experiment_config(self, model: ModelSpec) -> ExperimentConfig:
        """Out-of-sample study settings for one model."""
        return ExperimentConfig(
            model=model,
            sim=self.sim_config(),
            n_paths=self.experiment.n_paths,
            estimation_len=self.experiment.estimation_len,
            evaluation_len=self.experiment.evaluation_len,
            init_window_len=self.filter.init_window_len,
            kernel=self.kernel_config(model.name),
            theta_search=self.theta_search_config(),
            filter_template=self.filter_params(1.0, 0.0, 0.0),
            fixed_theta=self.filter.theta,
            batch_size=self.experiment.batch_size,
            max_drop_fraction=self.experiment.max_drop_fraction,
        )


SECTIONS: dict[str, type[BaseModel]] = {
    name: field.annotation  # type: ignore[misc]
    for name, field in RunConfig.model_fields.items()
}


def read_ini(path: Union[str, FilePath]) -> dict[str, dict[str, str]]:
    """Read an INI file into ``{section: {key: value}}``, rejecting unknown sections."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    with open(path, encoding="utf-8") as f:
        parser.read_file(f)
    data: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            expected = ", ".join(SECTIONS)
            raise ValueError(
                f"unknown config section [{section}] (expected one of {expected})"
            )
        data[section] = dict(parser.items(section))
    return data


def parse_override(text: str) -> tuple[str, str, str]:
    """Split ``section.key=value``."""
    target, sep, value = text.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ValueError(f"override must look like section.key=value, got {text!r}")
    if section not in SECTIONS:
        raise ValueError(f"unknown config section '{section}' in override {text!r}")
    return section, key, value.strip()


def load_run_config(
    config_path: Optional[Union[str, FilePath]] = None,
    overrides: Optional[list[str]] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> RunConfig:
    """Merge the INI file, ``--set`` overrides and dedicated flags."""
    data: dict[str, dict[str, Any]] = {}
    if config_path is not None:
        if not FilePath(config_path).is_file():
            raise ValueError(f"config file '{config_path}' not found")
        data = read_ini(config_path)
        logger.debug("read config file %s", config_path)
    for text in overrides or []:
        section, key, value = parse_override(text)
        data.setdefault(section, {})[key] = value
    if seed is not None:
        data.setdefault("sim", {})["seed"] = seed
    if workers is not None:
        data.setdefault("experiment", {})["workers"] = workers
    return RunConfig(**data)


def config_reference() -> str:
    """Every configuration key with its default, for ``--help``."""
    lines = ["configuration keys (INI section / --set section.key=value):"]
    for section, model in SECTIONS.items():
        lines.append(f"  [{section}]")
        for key, field in model.model_fields.items():
            default = field.get_default(call_default_factory=True)
            shown = "(none)" if default is None else default
            if isinstance(default, list):
                shown = ",".join(
                    f"{item:g}" if isinstance(item, float) else str(item)
                    for item in default
                )
            elif isinstance(default, float):
                shown = f"{default:g}"
            lines.append(f"    {key} = {shown}    {field.description or ''}".rstrip())
    return "\n".join(lines)
