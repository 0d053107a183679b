"""Experiment configuration (YAML) with validation and an effective-config dump."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .chain import ChainTopology, TopologyError, validate_topology
from .filter import NoiseConfig, SolverConfig
from .simulator import DEFAULT_AMPLITUDES_DEG, DEFAULT_FREQUENCIES_HZ, NoiseSpec

NOISE_PRESETS: dict[str, NoiseConfig] = {
    # reference covariances, the package default
    "table1": NoiseConfig(),
    # rates follow the gyro closely and the joint prior matches the random init
    "tuned": NoiseConfig(q_omega=1.0, sigma_omega=1e-4, p0_joint=0.03),
}


class ConfigError(ValueError):
    """Invalid configuration; the message lists offending field paths."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologySection(_Section):
    imu_count: int = Field(ge=2)
    joints: list[tuple[int, int]]
    external_imu: int = 0

    def build(self) -> ChainTopology:
        return ChainTopology(self.imu_count, tuple(self.joints), self.external_imu)


class ManipulatorSection(_Section):
    amplitudes_deg: tuple[float, float, float] = DEFAULT_AMPLITUDES_DEG
    frequencies_hz: tuple[
        tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]
    ] = DEFAULT_FREQUENCIES_HZ
    segment_length: float = Field(0.5, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if not all(0 < a < 180 for a in self.amplitudes_deg):
            raise ValueError("amplitudes must lie in (0, 180) degrees")
        flat = [f for row in self.frequencies_hz for f in row]
        if not all(f > 0 for f in flat):
            raise ValueError("frequencies must be positive")
        if len(set(flat)) != len(flat):
            raise ValueError("frequencies must be distinct across DOFs")
        return self


class SourceSection(_Section):
    kind: Literal["manipulator", "poses"] = "manipulator"
    manipulator: ManipulatorSection = ManipulatorSection()
    poses_path: Optional[str] = None
    geometry_path: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "poses" and not self.poses_path:
            raise ValueError("poses_path is required when kind is 'poses'")
        return self


class SimulationNoiseSection(_Section):
    gyro_variance: float = Field(8.25e-5, ge=0)
    accel_variance: float = Field(0.0075, ge=0)

    def build(self, seed: int) -> NoiseSpec:
        return NoiseSpec(self.gyro_variance, self.accel_variance, seed)


class FilterNoiseSection(_Section):
    """A named preset plus optional per-field overrides."""

    preset: Literal["table1", "tuned"] = "table1"
    p0_orientation: Optional[float] = Field(None, ge=0)
    p0_omega: Optional[float] = Field(None, ge=0)
    p0_joint: Optional[float] = Field(None, ge=0)
    q_omega: Optional[float] = Field(None, ge=0)
    sigma_omega: Optional[float] = Field(None, gt=0)
    sigma_accel: Optional[float] = Field(None, gt=0)
    sigma_orientation: Optional[float] = Field(None, gt=0)

    def build(self) -> NoiseConfig:
        base = vars(NOISE_PRESETS[self.preset]).copy()
        for key in base:
            value = getattr(self, key)
            if value is not None:
                base[key] = value
        return NoiseConfig(**base)

    def resolved(self) -> FilterNoiseSection:
        return FilterNoiseSection(preset=self.preset, **vars(self.build()))


class SolverSection(_Section):
    max_iterations: int = Field(10, ge=1)
    step_tolerance: float = Field(1e-8, gt=0)
    jacobian: Literal["analytic", "numeric"] = "analytic"
    fd_step: float = Field(1e-7, gt=0)
    regularization: float = Field(1e-12, ge=0)

    def build(self) -> SolverConfig:
        return SolverConfig(**self.model_dump())


class InitSection(_Section):
    orientation: Literal["truth", "identity", "perturbed"] = "truth"
    orientation_perturbation_deg: float = Field(5.0, ge=0)
    perturb_orientation_per_seed: bool = False
    joint_range: float = Field(0.3, gt=0)
    joint_seed_offset: int = 1000


class EvaluationSection(_Section):
    skip_initial: float = Field(10.0, ge=0)
    # None splits the evaluated interval into two halves
    batch_length: Optional[float] = Field(None, gt=0)
    convergence_threshold: float = Field(0.02, gt=0)
    convergence_hold: float = Field(2.0, ge=0)


class ExperimentConfig(_Section):
    topology: Optional[TopologySection] = None
    source: SourceSection = SourceSection()
    simulation_noise: SimulationNoiseSection = SimulationNoiseSection()
    filter_noise: FilterNoiseSection = FilterNoiseSection()
    solver: SolverSection = SolverSection()
    init: InitSection = InitSection()
    evaluation: EvaluationSection = EvaluationSection()
    duration: float = Field(120.0, gt=0)
    rate: float = Field(100.0, gt=0)
    seeds: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.source.kind == "manipulator":
            if self.topology is not None and (
                self.topology.imu_count != 3 or list(self.topology.joints) != [(0, 1), (1, 2)]
            ):
                raise ValueError("the manipulator source is a 3-IMU serial chain (0,1),(1,2)")
            if self.duration <= self.evaluation.skip_initial:
                raise ValueError("duration must exceed evaluation.skip_initial")
        elif self.topology is None:
            raise ValueError("a topology section is required for pose sources")
        if self.topology is not None:
            try:
                validate_topology(self.topology.build())
            except TopologyError as exc:
                raise ValueError(f"topology: {exc}") from None
        return self

    def chain_topology(self) -> ChainTopology:
        if self.topology is not None:
            return self.topology.build()
        return ChainTopology.serial(3, 0)

    def effective(self) -> ExperimentConfig:
        """Copy with every default spelled out, including resolved noise values."""
        return self.model_copy(update={"filter_noise": self.filter_noise.resolved()})

    def to_yaml(self) -> str:
        data = self.effective().model_dump(mode="json")
        return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


def parse_config(data: dict | None, base_dir: str | Path | None = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            path = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{path}: {err['msg']}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines)) from None
    if base_dir is not None:
        # relative data paths are resolved against the config file location
        src = cfg.source
        updates = {}
        for key in ("poses_path", "geometry_path"):
            value = getattr(src, key)
            if value and not Path(value).is_absolute():
                updates[key] = str((Path(base_dir) / value).resolve())
        if updates:
            cfg = cfg.model_copy(update={"source": src.model_copy(update=updates)})
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, path.parent)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_yaml())
