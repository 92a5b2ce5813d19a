import hashlib
import json
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from ttp.projection import Budget

TRANSFORM_NAMES = ("rotate", "crop", "flip", "jitter", "grayscale")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AugmentPolicy(_Section):
    rotation_max_deg: float = Field(30.0, ge=0.0, le=180.0)
    crop_area_range: Tuple[float, float] = (0.7, 1.0)
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    jitter_strength: float = Field(0.2, ge=0.0, le=1.0)
    grayscale_prob: float = Field(0.1, ge=0.0, le=1.0)
    selection: Literal["choose-one", "compose"] = "choose-one"
    transforms: Tuple[str, ...] = TRANSFORM_NAMES

    @field_validator("crop_area_range")
    @classmethod
    def _crop_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_area_range must satisfy 0 < lo <= hi <= 1, got {v}")
        return v

    @field_validator("transforms")
    @classmethod
    def _known_transforms(cls, v: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [t for t in v if t not in TRANSFORM_NAMES]
        if unknown or not v:
            raise ValueError(f"transforms must be a non-empty subset of {TRANSFORM_NAMES}, got {v}")
        return v


class LossSwitches(_Section):
    objective: Literal["ttp", "ce"] = "ttp"
    use_aug: bool = True
    use_sim: bool = True


class BudgetSection(_Section):
    # 0-255 pixel scale, converted with /255
    eps: float = Field(16.0, ge=0.0, le=255.0)


class TrainSection(_Section):
    epochs: int = Field(20, ge=1)
    lr: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    batch_size: int = Field(16, ge=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    max_steps: Optional[int] = Field(None, ge=0)
    smooth: bool = True
    debug: bool = False
    feature_layer: Literal["logits", "penultimate"] = "logits"
    # restricts the non-target classes that feed the generator
    source_classes: Optional[List[int]] = None


class DiscSection(_Section):
    epochs: int = Field(30, ge=1)
    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    batch_size: int = Field(128, ge=1)
    batch_norm: bool = True
    min_accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)


class EvalSection(_Section):
    batch_size: int = Field(256, ge=1)
    defense: Optional[Literal["identity", "median-blur"]] = None
    window: int = Field(5, ge=1)
    source_classes: Optional[List[int]] = None


class BaselineSection(_Section):
    method: Literal["pgd", "mim"] = "pgd"
    steps: int = Field(100, ge=0)
    alpha: float = Field(2.0, ge=0.0)
    mu: float = Field(1.0, ge=0.0)


class TrainConfig(_Section):
    """Resolved settings of one generator run (one surrogate set, one target)."""

    epochs: int = Field(20, ge=1)
    lr: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    batch_size: int = Field(16, ge=1)
    eps: float = Field(16.0, ge=0.0, le=255.0)
    target_class: int = Field(..., ge=0)
    seed: int = 0
    loss: LossSwitches = LossSwitches()
    augment: AugmentPolicy = AugmentPolicy()
    discriminators: List[str] = []
    smooth: bool = True
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    max_steps: Optional[int] = Field(None, ge=0)
    debug: bool = False
    feature_layer: Literal["logits", "penultimate"] = "logits"
    source_classes: Optional[List[int]] = None

    @property
    def budget(self) -> Budget:
        return Budget.from_pixels(self.eps)

    @property
    def needs_augmented(self) -> bool:
        return self.loss.objective == "ttp" and (self.loss.use_aug or self.loss.use_sim)


class RunConfig(_Section):
    seed: int = 0
    budget: BudgetSection = BudgetSection()
    augment: AugmentPolicy = AugmentPolicy()
    loss: LossSwitches = LossSwitches()
    train: TrainSection = TrainSection()
    disc: DiscSection = DiscSection()
    eval: EvalSection = EvalSection()
    baseline: BaselineSection = BaselineSection()

    def train_config(self, target_class: int, discriminators: List[str]) -> TrainConfig:
        return TrainConfig(
            target_class=target_class,
            discriminators=list(discriminators),
            seed=self.seed,
            eps=self.budget.eps,
            loss=self.loss,
            augment=self.augment,
            **self.train.model_dump(),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_override(item: str) -> Tuple[str, Any]:
    """`train.epochs=5` -> ("train.epochs", 5); values are JSON when they parse as JSON."""
    if "=" not in item:
        raise ValueError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ValueError(f"cannot set {key}: {p} is not a section")
        node = child
    node[parts[-1]] = value


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < TOML file < overrides. Unknown keys raise pydantic.ValidationError."""
    data: Dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)
    return RunConfig.model_validate(data)
