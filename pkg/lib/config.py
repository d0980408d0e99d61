"""Experiment configuration: one JSON document with sections
{dataset, split, method, training, memory, tc}. Unknown keys are errors.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from lib.episodic_memory import ALL, MemoryBudget
from lib.errors import ConfigError

METHODS = ("finetune", "ewc", "mas", "naive", "icarl", "bic", "naive+tc", "icarl+tc", "bic+tc")
MethodName = Literal["finetune", "ewc", "mas", "naive", "icarl", "bic", "naive+tc", "icarl+tc", "bic+tc"]
REG_METHODS = ("ewc", "mas")
MEMORY_METHODS = ("naive", "icarl", "bic", "naive+tc", "icarl+tc", "bic+tc")

# regularization factors used for the full-scale datasets
LAMBDA_REG_PRESETS = {
    "mas": {"default": 3e5},
    "ewc": {"ucf101": 3e3, "kinetics": 5e2, "activitynet": 3e5, "default": 3e3},
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    manifest: str
    trim: bool = False  # untrimmed manifests: true -> one record per segment, false -> whole-video labels


class SplitSection(_Section):
    num_tasks: int = Field(default=10, ge=2)
    seed: int = 0


class MethodSection(_Section):
    name: MethodName = "icarl"
    lambda_reg: Optional[float] = Field(default=None, gt=0)
    lambda_reg_preset: Optional[str] = None


class TrainingSection(_Section):
    epochs_memory: int = Field(default=50, ge=1)
    epochs_reg: int = Field(default=20, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    optimizer: Literal["adam"] = "adam"
    batch_size: int = Field(default=16, ge=1)
    segments_n: int = Field(default=8, ge=1)
    seed: int = 0
    eval_partition: Literal["val", "test"] = "val"
    bic_heldout_fraction: float = Field(default=0.1, gt=0, lt=1)
    bic_max_iter: int = Field(default=100, ge=1)
    model_width: int = Field(default=24, ge=1)
    feature_dim: int = Field(default=48, ge=1)


class MemorySection(_Section):
    max_video_instances: int = Field(default=2020, ge=1)
    frames_per_video: Union[int, Literal["all"]] = 8

    @model_validator(mode="after")
    def _positive(self):
        if self.frames_per_video != ALL and self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1 or 'all'")
        return self


class TCSection(_Section):
    lambda_tc: float = Field(default=0.5, ge=0, le=1)
    downsample_k: Optional[int] = Field(default=None, ge=1)


class ExperimentConfig(_Section):
    dataset: DatasetSection
    split: SplitSection = SplitSection()
    method: MethodSection = MethodSection()
    training: TrainingSection = TrainingSection()
    memory: MemorySection = MemorySection()
    tc: TCSection = TCSection()

    def resolved_lambda_reg(self) -> Optional[float]:
        name = self.method.name
        if name not in REG_METHODS:
            return self.method.lambda_reg
        if self.method.lambda_reg is not None:
            return self.method.lambda_reg
        presets = LAMBDA_REG_PRESETS[name]
        key = (self.method.lambda_reg_preset or "default").lower()
        if key not in presets:
            raise ConfigError(f"method.lambda_reg_preset: unknown preset '{key}' for {name}")
        return presets[key]

    def to_run_config(self, avg_frames_full: Optional[float] = None) -> "RunConfig":
        mem = self.memory
        budget = None
        if self.method.name in MEMORY_METHODS:
            if mem.frames_per_video == ALL and not avg_frames_full:
                raise ConfigError("memory.frames_per_video: 'all' needs the dataset's average frame count")
            budget = MemoryBudget.build(mem.max_video_instances, mem.frames_per_video, avg_frames_full)
        return RunConfig(
            method=self.method.name,
            epochs_memory=self.training.epochs_memory,
            epochs_reg=self.training.epochs_reg,
            learning_rate=self.training.learning_rate,
            optimizer=self.training.optimizer,
            segments_n=self.training.segments_n,
            lambda_tc=self.tc.lambda_tc,
            lambda_reg=self.resolved_lambda_reg(),
            budget=budget,
            seed=self.training.seed,
            batch_size=self.training.batch_size,
            downsample_k=self.tc.downsample_k,
            eval_partition=self.training.eval_partition,
            bic_heldout_fraction=self.training.bic_heldout_fraction,
            bic_max_iter=self.training.bic_max_iter,
            model_width=self.training.model_width,
            feature_dim=self.training.feature_dim,
        )


@dataclass(frozen=True)
class RunConfig:
    """Flat view of an experiment used by the training harness."""

    method: str = "icarl"
    epochs_memory: int = 50
    epochs_reg: int = 20
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    segments_n: int = 8
    lambda_tc: float = 0.5
    lambda_reg: Optional[float] = None
    budget: Optional[MemoryBudget] = None
    seed: int = 0
    batch_size: int = 16
    downsample_k: Optional[int] = None
    eval_partition: str = "val"
    bic_heldout_fraction: float = 0.1
    bic_max_iter: int = 100
    model_width: int = 24
    feature_dim: int = 48

    @property
    def base_method(self) -> str:
        return self.method.replace("+tc", "")

    @property
    def uses_tc(self) -> bool:
        return self.method.endswith("+tc")

    @property
    def uses_memory(self) -> bool:
        return self.method in MEMORY_METHODS

    @property
    def uses_regularization(self) -> bool:
        return self.method in REG_METHODS

    @property
    def epochs(self) -> int:
        return self.epochs_reg if self.uses_regularization else self.epochs_memory

    def tc_k(self) -> int:
        """Frames in the down-sampled clip X^d: the memory rate unless set explicitly."""
        if self.downsample_k is not None:
            return self.downsample_k
        if self.budget is not None and self.budget.downsampled:
            return int(self.budget.frames_per_video)
        return max(1, self.segments_n // 2)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown method '{self.method}'")
        if self.uses_memory and self.budget is None:
            raise ConfigError(f"method '{self.method}' needs a memory budget")
        if self.uses_regularization and not self.lambda_reg:
            raise ConfigError(f"method '{self.method}' needs lambda_reg")
        if not 0.0 <= self.lambda_tc <= 1.0:
            raise ConfigError("tc.lambda_tc must be in [0, 1]")


# ==========================================
# Load / dump
# ==========================================


def _pretty_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()))
        if err.get("type") == "extra_forbidden":
            parts.append(f"unknown key '{loc}'")
        else:
            parts.append(f"{loc}: {err.get('msg')}")
    return "; ".join(parts)


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(_pretty_errors(e)) from None


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2) + "\n"
