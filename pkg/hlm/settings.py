"""Configuration models for training, head recovery and evaluation runs."""

import hashlib
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)

from hlm.constants import CONFIG_PATH_ENV_VAR, DEFAULT_CONFIG_FN, SPECIAL_TOKENS
from hlm.errors import ConfigError

Objective = Literal["vanilla_ce", "headless_cwt"]
Task = Literal["mlm", "clm"]
ScheduleKind = Literal["triangular", "cosine", "constant"]
DType = Literal["float32", "float64"]

templates_path = Path(__file__).parent / "templates"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(StrictModel):
    """Transformer shape; ``vocab_size`` includes the special tokens."""

    vocab_size: int = Field(2000, description="V")
    d_model: int = Field(128, gt=0, description="D, hidden size")
    max_len: int = Field(64, gt=0, description="L_max")
    n_layers: int = Field(4, gt=0)
    n_heads: int = Field(4, gt=0)
    d_ff: int = Field(512, gt=0, description="MLP width")
    causal: bool = False
    init_std: float = Field(0.02, gt=0)
    eps: float = Field(1e-5, gt=0, description="layer-norm epsilon")
    final_layer_norm: bool = True

    @field_validator("vocab_size")
    @classmethod
    def validate_vocab_size(cls, v: int) -> int:
        if v <= len(SPECIAL_TOKENS):
            raise ValueError(
                f"vocab_size must exceed the {len(SPECIAL_TOKENS)} special tokens"
            )
        return v

    @model_validator(mode="after")
    def validate_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class OptimizerConfig(StrictModel):
    """AdamW hyperparameters."""

    lr: float = Field(1e-3, ge=0)
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    clip_norm: float = Field(1.0, gt=0)

    @field_validator("betas")
    @classmethod
    def validate_betas(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not all(0 <= b < 1 for b in v):
            raise ValueError("betas must lie in [0, 1)")
        return v


class FinetuneConfig(StrictModel):
    """Head-recovery run; scaled analogues of the decoder fine-tuning recipe."""

    lr: float = Field(1e-4, ge=0)
    total_steps: int = Field(500, gt=0)
    warmup_steps: int = Field(50, ge=0)
    schedule: ScheduleKind = "constant"
    weight_decay: float = Field(0.0, ge=0)
    freeze_backbone: bool = False


class TrainConfig(StrictModel):
    """Everything a run needs; the resolved snapshot is written next to outputs."""

    objective: Objective = "headless_cwt"
    task: Task = "mlm"
    corpus: list[Path] = Field(default_factory=list)
    tokenizer: Path | None = Field(None, description="Pre-trained tokenizer file")
    holdout_fraction: float = Field(0.05, ge=0, lt=1)
    batch_size: int = Field(16, ge=1, description="N, sequences per micro-batch")
    grad_accumulation: int = Field(1, ge=1)
    seq_len: int = Field(64, gt=0, description="L")
    mask_rate: float = Field(0.15, ge=0, lt=1)
    total_steps: int = Field(2000, gt=0)
    warmup_steps: int = Field(100, ge=0)
    schedule: ScheduleKind = "triangular"
    seed: int = 0
    eval_every: int = Field(50, gt=0)
    checkpoint_every: int = Field(1000, gt=0)
    dtype: DType = "float32"
    timing: bool = True
    model: ModelConfig = ModelConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    finetune: FinetuneConfig = FinetuneConfig()

    _source_path: Path | None = PrivateAttr(default=None)

    @model_validator(mode="before")
    @classmethod
    def default_causal_from_task(cls, data: Any) -> Any:
        if isinstance(data, dict):
            model = data.get("model")
            if model is None or isinstance(model, dict):
                model = dict(model or {})
                model.setdefault("causal", data.get("task", "mlm") == "clm")
                data = {**data, "model": model}
        return data

    @model_validator(mode="after")
    def validate_steps(self) -> "TrainConfig":
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.seq_len > self.model.max_len:
            raise ValueError(
                f"seq_len={self.seq_len} exceeds model.max_len={self.model.max_len}"
            )
        if self.model.causal != (self.task == "clm"):
            raise ValueError("model.causal must be true exactly when task is clm")
        return self

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len * self.grad_accumulation

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()

    def update(self, **changes: Any) -> "TrainConfig":
        """Validated copy; dotted keys address sub-models."""
        return build_config(self.model_dump(mode="json"), list(changes.items()))

    def for_head_recovery(self) -> "TrainConfig":
        ft = self.finetune
        return self.update(
            objective="vanilla_ce",
            total_steps=ft.total_steps,
            warmup_steps=ft.warmup_steps,
            schedule=ft.schedule,
            **{"optimizer.lr": ft.lr, "optimizer.weight_decay": ft.weight_decay},
        )

    @classmethod
    def from_file(
        cls, config_path: Path, overrides: list[tuple[str, Any]] | None = None
    ) -> "TrainConfig":
        """Load a YAML config, apply dotted overrides and validate."""
        try:
            with open(config_path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as err:
            raise ConfigError(f"Cannot read config {config_path}: {err}")
        except yaml.YAMLError as err:
            raise ConfigError(f"Invalid YAML in {config_path}: {err}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config {config_path} must be a mapping")
        base = config_path.resolve().parent
        data["corpus"] = [str(base / p) for p in data.get("corpus") or []]
        if data.get("tokenizer"):
            data["tokenizer"] = str(base / data["tokenizer"])
        config = build_config(data, overrides or [])
        config._source_path = config_path
        return config

    def save(self, path: Path) -> None:
        save_yaml(self.model_dump(mode="json"), path)


def save_yaml(data: dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(data, f, default_flow_style=False, indent=2)


def apply_override(data: dict[str, Any], key: str, value: Any) -> None:
    *parents, leaf = key.split(".")
    node = data
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"Cannot override '{key}': '{part}' is not a section")
        node = child
    node[leaf] = value


def build_config(
    data: dict[str, Any], overrides: list[tuple[str, Any]]
) -> TrainConfig:
    for key, value in overrides:
        apply_override(data, key, value)
    try:
        return TrainConfig(**data)
    except ValidationError as err:
        raise ConfigError(str(err))


def default_config_path() -> Path:
    env = os.getenv(CONFIG_PATH_ENV_VAR)
    return Path(env) if env else templates_path / DEFAULT_CONFIG_FN
