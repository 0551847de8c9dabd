"""
Configuration management for the PNM diagnosis pipeline

One JSON file holds the paths, the pipeline knobs and, once `calibrate` /
`train` have run, the calibrated parameters. Runtime-only settings (log level
and file) come from the environment.
"""

import json
import os
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from pnm.errors import InvalidConfig, Uncalibrated
from pnm.model import (
    DetectionThresholds,
    EpochParams,
    Feature,
    HyperParams,
    Linkage,
    Preprocessing,
)
from pnm.synth import SynthConfig

PathLike = Union[str, Path]


class PathsConfig(BaseModel):
    """Relative paths resolve against the directory of the config file."""

    model_config = ConfigDict(extra="forbid")

    pnm: Path = Path("pnm.csv")
    tickets: Path = Path("tickets.csv")
    output_dir: Path = Path("out")
    ground_truth: Optional[Path] = None
    missing_truth: Optional[Path] = None


class CalibratedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epoch_params: Dict[str, EpochParams] = Field(default_factory=dict)
    missing_threshold_hours: Optional[float] = None
    similarity_thresholds: Dict[Feature, float] = Field(default_factory=dict)
    detection: Optional[DetectionThresholds] = None


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    paths: PathsConfig = Field(default_factory=PathsConfig)
    interval_hours: float = Field(4.0, gt=0)
    n_channels: int = Field(3, ge=1)
    lookback_days: float = Field(1.0, gt=0)
    cluster_size_threshold: int = Field(5, ge=1)
    min_overlap: Optional[int] = Field(None, ge=2)
    anomaly_fraction: float = Field(2 / 3, gt=0, le=1)
    mesh_step: float = Field(0.01, gt=0, le=1)
    seed: int = 7
    split_ts: Optional[float] = None
    linkage: Linkage = Linkage.AVERAGE
    preprocessing: Preprocessing = Preprocessing.ALIGN
    features: Tuple[Feature, ...] = tuple(Feature)
    jobs: int = Field(1, ge=1)
    dbscan_eps: float = Field(0.2, gt=0)
    dbscan_min_samples: int = Field(2, ge=1)
    min_lift: float = Field(1.5, gt=0)
    synth: Optional[SynthConfig] = None
    calibrated: CalibratedConfig = Field(default_factory=CalibratedConfig)

    # --- Runtime only ---
    log_level: str = Field(default_factory=lambda: os.getenv("LOG_LEVEL", "INFO").upper(), exclude=True)
    log_file: Optional[str] = Field(default_factory=lambda: os.getenv("LOG_FILE") or None, exclude=True)
    base_dir: Path = Field(default_factory=Path.cwd, exclude=True)

    def resolve(self, path: Optional[Path]) -> Optional[Path]:
        if path is None:
            return None
        return path if path.is_absolute() else self.base_dir / path

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.paths.output_dir)

    @property
    def is_calibrated(self) -> bool:
        calibrated = self.calibrated
        return (
            calibrated.missing_threshold_hours is not None
            and calibrated.detection is not None
            and all(feature in calibrated.similarity_thresholds for feature in self.features)
        )

    def synth_config(self) -> SynthConfig:
        """The synth section with the pipeline-wide seed, L, N_ch and C_thr."""
        if self.synth is None:
            raise InvalidConfig("config has no synth section")
        return SynthConfig.parse(
            {
                **self.synth.model_dump(),
                "seed": self.seed,
                "interval_hours": self.interval_hours,
                "n_channels": self.n_channels,
                "cluster_size_threshold": self.cluster_size_threshold,
            }
        )

    def _hyper(self, similarity_thresholds: Dict[Feature, float], detection: DetectionThresholds) -> HyperParams:
        try:
            return HyperParams(
                interval_hours=self.interval_hours,
                missing_threshold_hours=self.calibrated.missing_threshold_hours,
                similarity_thresholds=similarity_thresholds,
                cluster_size_threshold=self.cluster_size_threshold,
                lookback_days=self.lookback_days,
                min_overlap=self.min_overlap,
                detection=detection,
                epoch_params=self.calibrated.epoch_params,
                linkage=self.linkage,
                preprocessing=self.preprocessing,
                features=self.features,
                dbscan_eps=self.dbscan_eps,
                dbscan_min_samples=self.dbscan_min_samples,
            )
        except ValidationError as e:
            raise InvalidConfig(f"calibrated parameters are inconsistent: {e}") from e

    def hyper_params(self) -> HyperParams:
        """Everything batch / reactive / eval need; raises Uncalibrated until train has run."""
        if not self.is_calibrated:
            raise Uncalibrated("config is not calibrated; run `train` first")
        return self._hyper(dict(self.calibrated.similarity_thresholds), self.calibrated.detection)

    def training_hyper(self) -> HyperParams:
        """Hyper-parameters for tuning: s_f does not matter while dendrograms are built."""
        if self.calibrated.missing_threshold_hours is None or self.calibrated.detection is None:
            raise Uncalibrated("missing threshold and detection thresholds must be calibrated first")
        return self._hyper({feature: 0.0 for feature in self.features}, self.calibrated.detection)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def save(self, path: PathLike) -> Path:
        """Write the calibrated section into `path`.

        An existing file keeps every other key as written, so CLI overrides
        (jobs, seed, split_ts, mesh_step) never leak into it. A new file gets
        the full config.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self._read_object(path) if path.exists() else None
        if data is None:
            text = self.to_json()
        else:
            data["calibrated"] = self.calibrated.model_dump(mode="json")
            text = json.dumps(data, indent=2, sort_keys=True) + "\n"
        path.write_text(text)
        logger.debug(f"💾 Config saved to {path}")
        return path

    @staticmethod
    def _read_object(path: Path) -> Optional[dict]:
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
        return data if isinstance(data, dict) else None

    @classmethod
    def load(cls, path: PathLike) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise InvalidConfig(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise InvalidConfig(f"config {path} must hold a JSON object")
        try:
            return cls.model_validate({**data, "base_dir": path.resolve().parent})
        except ValidationError as e:
            raise InvalidConfig(f"invalid config {path}: {e}") from e

    def with_overrides(self, **overrides) -> "PipelineConfig":
        updates = {key: value for key, value in overrides.items() if value is not None}
        unknown = [key for key in updates if key not in type(self).model_fields]
        if unknown:
            raise InvalidConfig(f"unknown config overrides: {unknown}")
        try:
            return type(self).model_validate({**self.model_dump(), "base_dir": self.base_dir, **updates})
        except ValidationError as e:
            raise InvalidConfig(f"invalid override: {e}") from e


def get_config(path: PathLike, **overrides) -> PipelineConfig:
    """Factory: load the JSON config and apply non-None CLI overrides."""
    config = PipelineConfig.load(path).with_overrides(**overrides)
    logger.trace("Configuration validated successfully.")
    return config
