from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Stage1Weights(_Section):
    w_rcd: float = Field(1.0, ge=0.0)
    w_lap: float = Field(0.5, ge=0.0)
    w_n: float = Field(0.001, ge=0.0)


class Stage2Weights(_Section):
    w_l1: float = Field(0.8, ge=0.0)
    w_ssim: float = Field(0.2, ge=0.0)
    w_edge: float = Field(0.2, ge=0.0)
    w_lap: float = Field(0.03, ge=0.0)
    w_alpha: float = Field(0.002, ge=0.0)
    # None: 0.1 for static cameras, 0 for orbiting ones
    w_normal: Optional[float] = Field(None, ge=0.0)
    w_flow: float = Field(0.01, ge=0.0)

    def normal_weight(self, camera_mode: str) -> float:
        if self.w_normal is not None:
            return self.w_normal
        return 0.1 if camera_mode == "static" else 0.0


class LossWeights(_Section):
    stage1: Stage1Weights = Stage1Weights()
    stage2: Stage2Weights = Stage2Weights()
    # None: 5% of the canonical bounding-box diagonal
    rcd_truncation: Optional[float] = Field(None, gt=0.0)


class ScheduleConfig(_Section):
    mlp_lr_start: float = Field(1e-3, gt=0.0)
    mlp_lr_end: float = Field(1e-5, gt=0.0)
    anchor_lr: float = Field(1e-2, gt=0.0)
    gaussian_lr: float = Field(1e-3, gt=0.0)
    opacity_lr: float = Field(1e-3, gt=0.0)


class PreprocessConfig(_Section):
    taubin_lambda: float = 0.5
    taubin_mu: float = -0.53
    taubin_iterations: int = Field(10, ge=0)
    initial_faces: int = Field(300, ge=4)
    icp_mode: Literal["auto", "always", "never"] = "auto"
    icp_iterations: int = Field(30, gt=0)


class PopulationConfig(_Section):
    cadence: int = Field(2000, gt=0)
    warmup: int = Field(5000, ge=0)
    subdivide_below: float = Field(0.1, ge=0.0, le=1.0)
    deactivate_above: float = Field(0.9, ge=0.0, le=1.0)
    deactivate_fraction: float = Field(0.9, ge=0.0, le=1.0)
    max_depth: int = Field(6, gt=0)
    pruning: bool = True


class RenderConfig(_Section):
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    rows_per_block: int = Field(8, gt=0)
    snapshot_every: int = Field(1000, gt=0)
    log_every: int = Field(100, gt=0)


class AblationConfig(_Section):
    offset_constraint: bool = True
    scale_constraint: bool = True


class StageConfig(_Section):
    steps: int = Field(..., gt=0)


class TrainConfig(_Section):
    seed: int = 0
    beta: float = Field(0.9, gt=0.0, le=1.0)
    offset_u_mode: Literal["literal", "shifted"] = "literal"
    feature_dim: int = Field(128, gt=0)
    decoder_hidden: int = Field(64, gt=0)
    pose_dim: int = Field(32, gt=0)
    stage1: StageConfig = StageConfig(steps=20000)
    stage2: StageConfig = StageConfig(steps=40000)
    weights: LossWeights = LossWeights()
    schedule: ScheduleConfig = ScheduleConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    population: PopulationConfig = PopulationConfig()
    render: RenderConfig = RenderConfig()
    ablation: AblationConfig = AblationConfig()


class EnvSettings(BaseModel):
    log_level: str = "INFO"
    workers: int = Field(1, gt=0)
    runs_dir: Path = Path("runs")

    @classmethod
    def from_env(cls) -> "EnvSettings":
        try:
            return cls(
                log_level=os.environ.get("MESHSPLAT_LOG_LEVEL", "INFO"),
                workers=int(os.environ.get("MESHSPLAT_WORKERS", "1")),
                runs_dir=Path(os.environ.get("MESHSPLAT_RUNS_DIR", "runs")),
            )
        except (ValueError, ValidationError) as e:
            raise ConfigError(f"invalid environment settings: {e}")


def _set_dotted(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} descends into a scalar")
    node[keys[-1]] = value


def parse_overrides(args: Sequence[str]) -> dict:
    """Turn ["--stage2.steps=500", ...] into a nested dict with YAML-typed values."""
    tree: dict = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"expected --key=value override, got {arg!r}")
        key, raw = arg[2:].split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value for {key}: {e}")
        _set_dotted(tree, key, value)
    return tree


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> TrainConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    data = _merge(data, parse_overrides(overrides))
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e))


def dump_config(config: TrainConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False))
