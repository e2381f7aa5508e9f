"""
Run configuration.

A run is fully described by one JSON document validated into RunConfig.
The config path comes from --config, or from ADEKI_CONFIG (loaded from a
.env file for local use). A path that names no file but matches a preset
name loads that preset.
"""

import json
import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.discrepancy_net import TrainingSettings
from src.errors import ConfigError
from src.field_solver import Grid2D, SolverSettings, SourceParams, VelocityLaw
from src.observe import Calibrated, Design, ModelConfig, Physics, SourceFamily, SourceModel

CONFIG_ENV_VAR = "ADEKI_CONFIG"
DEFAULT_STAGE_TIMES = [0.030, 0.035, 0.040, 0.045, 0.050, 0.055]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# =============================================================================
# Sections
# =============================================================================

class GridSection(_Section):
    x_min: float = -2.0
    x_max: float = 3.0
    y_min: float = -2.0
    y_max: float = 3.0
    nx: int = Field(101, ge=2)
    ny: int = Field(101, ge=2)

    def build(self) -> Grid2D:
        return Grid2D(self.x_min, self.x_max, self.y_min, self.y_max, self.nx, self.ny)


class SolverSection(_Section):
    cfl: float = Field(0.4, gt=0.0, le=1.0)
    quantum: float = Field(0.005, gt=0.0)
    blowup: float = Field(1e6, gt=0.0)


class TruthSection(_Section):
    family: Literal["gaussian", "cauchy"] = "gaussian"
    theta_x: float = Field(0.45, ge=0.0, le=1.0)
    theta_y: float = Field(0.25, ge=0.0, le=1.0)
    theta_h: float = Field(0.05, gt=0.0)
    theta_s: float = 2.0
    velocity: float = 20.0


class ModelSection(_Section):
    family: Literal["gaussian", "cauchy", "cauchy_nn"] = "gaussian"
    theta_h: float = Field(0.05, gt=0.0)
    theta_s: float = 3.0
    calibrated: Literal["strength", "network"] = "strength"

    @model_validator(mode="after")
    def _network_needs_nn_family(self):
        if self.calibrated == "network" and self.family != "cauchy_nn":
            raise ValueError("calibrated='network' requires family='cauchy_nn'")
        return self


class ScheduleSection(_Section):
    stage_times: list[float] = Field(default_factory=lambda: list(DEFAULT_STAGE_TIMES), min_length=1)
    initial_design: tuple[float, float] = (0.5, 0.5)
    step: float = Field(0.2, gt=0.0)

    @model_validator(mode="after")
    def _increasing(self):
        if any(b <= a for a, b in zip(self.stage_times, self.stage_times[1:])) or self.stage_times[0] <= 0.0:
            raise ValueError("stage_times must be positive and strictly increasing")
        return self


class PriorSection(_Section):
    kind: Literal["uniform", "gaussian"] = "uniform"
    mean: tuple[float, float] = (0.5, 0.5)
    std: float = Field(0.3, gt=0.0)
    flatten_power: float | None = Field(None, gt=0.0)
    n_nodes: int = Field(51, ge=2)


class PhysicalSection(_Section):
    eig_samples: int = Field(30, ge=1)
    lattice: int = Field(9, ge=1)
    cache_stride: int = Field(1, ge=1)


class NetworkSection(_Section):
    ensemble_size: int = Field(30, ge=2)
    iterations: int = Field(5, ge=1)
    eig_samples: int = Field(4, ge=1)
    prior_var: float = Field(1.0, gt=0.0)
    step: float = Field(0.01, gt=0.0)
    max_iters: int = Field(70, ge=0)
    max_halvings: int = Field(6, ge=0)
    tol: float | None = None
    box: float = Field(0.2, gt=0.0)
    design_data_source: Literal["predicted", "measured"] = "predicted"
    resample_each_step: bool = False
    truncate_theta_chain: bool = False
    strategy: Literal["checkpoint", "tape"] = "checkpoint"
    profile_seeds: int = Field(20, ge=0)


class TrainingSection(_Section):
    update_rule: Literal["gradient", "eki_mean"] = "gradient"
    anchored: bool = True
    learning_rate: float = Field(1.0, gt=0.0)
    max_epochs: int = Field(200, ge=1)
    plateau_tol: float = Field(1e-8, ge=0.0)
    max_halvings: int = Field(40, ge=1)


class GradcheckSection(_Section):
    n_designs: int = Field(20, ge=1)
    ensemble_size: int = Field(20, ge=2)
    iterations: int = Field(3, ge=1)
    fd_step: float = Field(1e-4, gt=0.0)
    tolerance: float = Field(1e-3, gt=0.0)
    stage: int = Field(1, ge=0)
    truncate_theta_chain: bool = False


class BenchSection(_Section):
    ensemble_sizes: list[int] = Field(default_factory=lambda: [10, 20, 40, 80])
    iterations: list[int] = Field(default_factory=lambda: [2, 4, 8, 16])
    fixed_ensemble_size: int = Field(20, ge=2)
    fixed_iterations: int = Field(4, ge=1)
    repetitions: int = Field(3, ge=1)
    strategies: list[Literal["forward", "tape", "checkpoint"]] = Field(
        default_factory=lambda: ["forward", "tape", "checkpoint"]
    )


class RunConfig(_Section):
    name: str = "parametric"
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    output_dir: str | None = None
    noise_std: float = Field(0.05, gt=0.0)
    correction: bool = True
    compare_baseline: bool = False
    grid: GridSection = Field(default_factory=GridSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    truth: TruthSection = Field(default_factory=TruthSection)
    model: ModelSection = Field(default_factory=ModelSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    prior: PriorSection = Field(default_factory=PriorSection)
    physical: PhysicalSection = Field(default_factory=PhysicalSection)
    network: NetworkSection = Field(default_factory=NetworkSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    gradcheck: GradcheckSection = Field(default_factory=GradcheckSection)
    bench: BenchSection = Field(default_factory=BenchSection)

    @property
    def noise_var(self) -> float:
        return self.noise_std ** 2

    @property
    def out_path(self) -> Path:
        return Path(self.output_dir or os.path.join("runs", self.name))

    # -- builders -------------------------------------------------------------

    def physics(self) -> Physics:
        settings = SolverSettings(
            cfl=self.solver.cfl, quantum=self.solver.quantum, blowup=self.solver.blowup,
            horizon=max(self.schedule.stage_times),
        )
        return Physics(grid=self.grid.build(), velocity=VelocityLaw(self.truth.velocity), settings=settings)

    def truth_source(self) -> SourceModel:
        t = self.truth
        return SourceModel(SourceFamily(t.family), SourceParams(t.theta_x, t.theta_y, t.theta_h, t.theta_s))

    def initial_model(self) -> ModelConfig:
        """Model at its initial state; the location is a placeholder until the first MAP."""
        m = self.model
        x0, y0 = self.schedule.initial_design
        source = SourceModel(SourceFamily(m.family), SourceParams(x0, y0, m.theta_h, m.theta_s))
        return ModelConfig(physics=self.physics(), source=source, calibrated=Calibrated(m.calibrated))

    def initial_design(self) -> Design:
        x, y = self.schedule.initial_design
        return Design(x, y, self.schedule.stage_times[0])

    def training_settings(self) -> TrainingSettings:
        t, n = self.training, self.network
        return TrainingSettings(
            update_rule=t.update_rule, learning_rate=t.learning_rate, max_epochs=t.max_epochs,
            plateau_tol=t.plateau_tol, max_halvings=t.max_halvings,
            eki_ensemble_size=n.ensemble_size, eki_iterations=n.iterations, eki_prior_var=n.prior_var,
            prior_var=n.prior_var if t.anchored else None, noise_var=self.noise_var,
        )

    def manifest(self) -> dict:
        return {
            "config": self.model_dump(mode="json"),
            "seed": self.seed,
            "grid": self.grid.build().describe(),
            "noise_std": self.noise_std,
            "K": self.network.iterations,
            "J": self.network.ensemble_size,
            "M": self.network.eig_samples,
            "M_physical": self.physical.eig_samples,
            "source_width": {"truth": self.truth.theta_h, "model": self.model.theta_h},
        }


# =============================================================================
# Presets
# =============================================================================

COARSE_NODES = 41
COARSE_SOURCE_WIDTH = 0.1


def _coarse(cfg: RunConfig, name: str) -> RunConfig:
    """
    Desk-scale variant: 41 x 41 nodes (h = 0.125) instead of 101 x 101.

    This also changes the physics. A point-sampled source narrower than the
    spacing aliases, so theta_h is widened from 0.05 to 0.1 for both truth and
    model. Source strength and location are unchanged. The manifest records
    the widths under "source_width".
    """
    data = cfg.model_dump()
    data["name"] = name
    data["grid"].update(nx=COARSE_NODES, ny=COARSE_NODES)
    data["truth"]["theta_h"] = COARSE_SOURCE_WIDTH
    data["model"]["theta_h"] = COARSE_SOURCE_WIDTH
    return RunConfig.model_validate(data)


def _build_presets() -> dict[str, RunConfig]:
    parametric = RunConfig(
        name="parametric",
        truth=TruthSection(family="gaussian", theta_x=0.45, theta_y=0.25, theta_h=0.05, theta_s=2.0, velocity=20.0),
        model=ModelSection(family="gaussian", theta_h=0.05, theta_s=3.0, calibrated="strength"),
        network=NetworkSection(ensemble_size=30, prior_var=1.0),
    )
    structural = RunConfig(
        name="structural",
        truth=TruthSection(family="gaussian", theta_x=0.25, theta_y=0.25, theta_h=0.05, theta_s=2.0, velocity=50.0),
        model=ModelSection(family="cauchy_nn", theta_h=0.05, theta_s=2.0, calibrated="network"),
        network=NetworkSection(ensemble_size=40, prior_var=0.09),
    )
    return {
        "parametric": parametric,
        "structural": structural,
        "parametric-coarse": _coarse(parametric, "parametric-coarse"),
        "structural-coarse": _coarse(structural, "structural-coarse"),
    }


PRESETS = _build_presets()


# =============================================================================
# Loading
# =============================================================================

def _describe(err: ValidationError) -> str:
    first = err.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "<root>"
    return f"invalid config key '{key}': {first['msg']}"


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc


def load_run_config(path: str | None = None) -> RunConfig:
    """
    Load and validate a config document.

    Priority:
    1. Explicit path (CLI --config)
    2. ADEKI_CONFIG environment variable (.env supported)
    """
    if path is None:
        load_dotenv()
        path = os.getenv(CONFIG_ENV_VAR)
    if not path:
        raise ConfigError(f"no config given: pass --config or set {CONFIG_ENV_VAR}")

    file = Path(path)
    if not file.is_file():
        if path in PRESETS:
            return PRESETS[path].model_copy(deep=True)
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(file.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parse_run_config(data)


def with_overrides(cfg: RunConfig, seed: int | None = None, threads: int | None = None, out: str | None = None) -> RunConfig:
    updates = {k: v for k, v in {"seed": seed, "threads": threads, "output_dir": out}.items() if v is not None}
    return parse_run_config({**cfg.model_dump(), **updates}) if updates else cfg
