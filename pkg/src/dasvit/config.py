"""Run configuration: one JSON document with defaults for every tunable.

Unknown keys are rejected with their JSON path; the effective (post-default)
config is echoed into every run directory so a run can be reproduced from
its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fairness import FairnessConfig
from .ops import DEFAULT_CANDIDATES, ModelDims, OpSpec
from .selector import GRAD_MODES


@dataclass
class ModelConfig:
    dim: int = 768
    patch: int = 16
    image: int = 224
    channels: int = 3
    classes: int = 10
    pre_norm: bool = True
    final_norm: bool = True
    precision: str = "float32"

    def dims(self) -> ModelDims:
        return ModelDims(dim=self.dim, patch=self.patch, image=self.image,
                         classes=self.classes, channels=self.channels)


@dataclass
class SelectorConfig:
    lam: float = field(default=0.5, metadata={"json": "lambda"})
    grad_mode: str = "score_scaling"


@dataclass
class SearchConfig:
    stages: int = 3
    epochs_per_stage: int = 30
    first_layers: int = 2
    layer_increment: int = 2
    prune_per_stage: list[int] = field(default_factory=lambda: [3, 2, 0])
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 5e-2
    warmup_epochs: int = 0
    warmup_start_lr: float = 1e-6
    min_lr: float = 0.0
    arch_lr: float = 1e-3
    arch_weight_decay: float = 1e-3
    unrolled: bool = False
    xi: float = 1e-3
    val_fraction: float = 0.5
    shared_alpha: bool = True
    alpha_init_std: float = 1e-3
    score_mode: str = "mean"
    drop_last: bool = True


@dataclass
class RetrainConfig:
    epochs: int = 500
    warmup_epochs: int = 20
    warmup_start_lr: float = 1e-6
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 5e-2
    min_lr: float = 0.0
    checkpoint_every: int = 0  # 0: final checkpoint only
    eval_every: int = 0        # 0: never run the held-out split during training
    drop_last: bool = False


@dataclass
class SyntheticConfig:
    classes: int = 2
    per_class: int = 128
    image: int = 8
    channels: int = 3
    noise: float = 0.05


@dataclass
class DataConfig:
    source: str = "synthetic"
    dir: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    normalize_mean: list[float] | None = None
    normalize_std: list[float] | None = None
    resize: int | None = None  # resize images to this side length when set
    resize_method: str = "bilinear"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    candidates: list[OpSpec] = field(default_factory=lambda: list(DEFAULT_CANDIDATES))
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    fairness: FairnessConfig = field(default_factory=FairnessConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        if self.model.precision not in ("float32", "float64"):
            raise ConfigError(f"model.precision: unknown precision {self.model.precision!r}")
        self.model.dims()  # divisibility and positivity checks
        if not 0 < self.selector.lam <= 1:
            raise ConfigError(f"selector.lambda: must lie in (0, 1], got {self.selector.lam}")
        if self.selector.grad_mode not in GRAD_MODES:
            raise ConfigError(f"selector.grad_mode: must be one of {GRAD_MODES}")
        if not self.candidates:
            raise ConfigError("candidates: must not be empty")
        for i, spec in enumerate(self.candidates):
            if spec.kind == "msa" and self.model.dim % spec.heads != 0:
                raise ConfigError(
                    f"candidates[{i}]: {spec.name} incompatible with embedding dim "
                    f"{self.model.dim}")
        s = self.search
        if s.stages < 1 or s.epochs_per_stage < 1:
            raise ConfigError("search: stages and epochs_per_stage must be >= 1")
        if len(s.prune_per_stage) < s.stages:
            raise ConfigError(
                f"search.prune_per_stage: need at least {s.stages} entries")
        if not 0 < s.val_fraction < 1:
            raise ConfigError("search.val_fraction: must lie in (0, 1)")
        if s.score_mode not in ("mean", "max"):
            raise ConfigError("search.score_mode: must be 'mean' or 'max'")
        if self.data.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"data.source: unknown source {self.data.source!r}")
        if (self.data.normalize_mean is None) != (self.data.normalize_std is None):
            raise ConfigError("data: normalize_mean and normalize_std go together")
        if self.data.resize_method not in ("bilinear", "nearest"):
            raise ConfigError(
                f"data.resize_method: unknown method {self.data.resize_method!r}")
        if self.data.source == "cifar10" and self.data.normalize_mean is None:
            # the dataset's computed per-channel statistics become part of the
            # effective config so the echoed file reproduces the run
            from .data import CIFAR10_MEAN, CIFAR10_STD

            self.data.normalize_mean = list(CIFAR10_MEAN)
            self.data.normalize_std = list(CIFAR10_STD)
        return self


# -- json round trip -----------------------------------------------------------------

_NESTED = {
    ModelConfig, SelectorConfig, SearchConfig, RetrainConfig,
    SyntheticConfig, DataConfig, FairnessConfig, RunConfig,
}


def _field_key(f: dataclasses.Field) -> str:
    return f.metadata.get("json", f.name)


def _from_dict(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    by_key = {_field_key(f): f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in by_key:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {}
    for key, f in by_key.items():
        if key not in doc:
            continue
        value = doc[key]
        sub = f"{path}.{key}"
        if f.type in ("list[OpSpec]",) or f.name == "candidates":
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list of op objects")
            value = [OpSpec.from_json(v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            target = _nested_type(cls, f.name)
            if target is not None:
                value = _from_dict(target, value, sub)
        kwargs[f.name] = value
    try:
        obj = cls(**kwargs)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return obj


def _nested_type(cls, name: str):
    # dataclass fields carry string annotations under `from __future__ import
    # annotations`, so map nested configs by field name instead.
    mapping = {
        "model": ModelConfig, "selector": SelectorConfig, "search": SearchConfig,
        "retrain": RetrainConfig, "synthetic": SyntheticConfig, "data": DataConfig,
        "fairness": FairnessConfig,
    }
    return mapping.get(name)


def _to_dict(obj):
    if isinstance(obj, OpSpec):
        return obj.to_json()
    if dataclasses.is_dataclass(obj) and type(obj) in _NESTED:
        out = {}
        for f in dataclasses.fields(obj):
            out[_field_key(f)] = _to_dict(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    return obj


def config_to_json(cfg: RunConfig) -> dict:
    return _to_dict(cfg)


def config_from_json(doc: dict) -> RunConfig:
    return _from_dict(RunConfig, doc, "config").validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config: file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {p}: {exc}") from None
    return config_from_json(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_json(cfg), indent=2, sort_keys=True) + "\n")


# -- presets ----------------------------------------------------------------------


def paper_defaults() -> RunConfig:
    """Full-scale defaults: ViT-size dims, 3x30 search epochs, 500 retrain epochs."""
    return RunConfig().validate()


def desk_config(seed: int = 0) -> RunConfig:
    """Small, fast configuration that exercises the whole pipeline in minutes.

    The embedding width (32) cannot host 12 or 16 attention heads, so the
    desk registry swaps the head counts to {2, 4, 8} while keeping the same
    zero/identity/3xMSA/3xMLP structure.
    """
    cfg = RunConfig(
        seed=seed,
        model=ModelConfig(dim=32, patch=4, image=8, channels=3, classes=2),
        candidates=[
            OpSpec("zero"),
            OpSpec("identity"),
            OpSpec("msa", heads=2),
            OpSpec("msa", heads=4),
            OpSpec("msa", heads=8),
            OpSpec("mlp", ratio=0.5),
            OpSpec("mlp", ratio=3.0),
            OpSpec("mlp", ratio=4.0),
        ],
        search=SearchConfig(stages=3, epochs_per_stage=3, batch_size=16),
        retrain=RetrainConfig(epochs=100, warmup_epochs=5, batch_size=16),
        data=DataConfig(source="synthetic",
                        synthetic=SyntheticConfig(classes=2, per_class=128, image=8)),
    )
    return cfg.validate()
