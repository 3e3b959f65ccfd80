"""Run configuration: YAML files validated before any compute."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .losses import ALIGN_WEIGHT, DEFAULT_TAU
from .model import ModelConfig
from .synthgen import SceneConfig

OUTPUT_ROOT_ENV = "CODAF_OUTPUT_ROOT"

# mode -> ModelConfig overrides
MODES: dict[str, dict] = {
    "codaf": {},
    "baseline": {"use_osa": False, "use_magn": False, "use_dacm": False},
    "no-osa": {"use_osa": False},
    "no-magn": {"use_magn": False},
    "no-dacm": {"use_dacm": False},
    "no-stage-1": {"stages": (False, True, True)},
    "no-stage-2": {"stages": (True, False, True)},
    "no-stage-3": {"stages": (True, True, False)},
    "baseline+osa": {"use_magn": False, "use_dacm": False},
    "baseline+magn": {"use_osa": False, "use_dacm": False},
    "baseline+dacm": {"use_osa": False, "use_magn": False},
    "baseline+dafm": {"use_osa": False},
}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    mode: str = "codaf"
    scene: SceneConfig = SceneConfig()
    train_count: int = Field(2000, ge=1)
    eval_count: int = Field(500, ge=1)
    data_dir: str = "data"
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    lr_schedule: Literal["constant", "cosine"] = "cosine"
    aux_lr_scale: float = Field(0.1, gt=0)
    lambda_: float = Field(ALIGN_WEIGHT, ge=0, alias="lambda")
    tau: float = Field(DEFAULT_TAU, gt=0)
    contrastive: bool = True
    attention_source: Literal["ir", "visible"] = "ir"
    residual_read: Literal["shifted", "at_p"] = "shifted"
    label_frame: Literal["ir", "rgb"] = "ir"
    seed: int = 0
    threads: int = Field(1, ge=1)
    output_dir: str = "runs/default"

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        if v not in MODES:
            raise ValueError(f"unknown mode {v!r}; choose from {sorted(MODES)}")
        return v

    def model_config_obj(self) -> ModelConfig:
        return ModelConfig(num_classes=self.scene.classes, attention_source=self.attention_source,
                           residual_read=self.residual_read, **MODES[self.mode])

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if p.is_absolute():
            return p
        return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p

    @property
    def out_path(self) -> Path:
        return self.resolve(self.output_dir)

    @property
    def train_path(self) -> Path:
        return self.resolve(self.data_dir) / "train"

    @property
    def eval_path(self) -> Path:
        return self.resolve(self.data_dir) / "eval"

    def eval_scene(self) -> SceneConfig:
        return self.scene.model_copy(update={"seed": self.scene.seed + 10_007})

    def dump(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(data)
