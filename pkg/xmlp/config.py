import os
import typing as t
from typing import Optional as Op
from typing_extensions import Annotated
from enum import Enum
from pathlib import Path

import yaml
from pydantic import (
    AfterValidator, BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt,
    ValidationError, field_validator, model_validator,
)

from . import logging
from .errors import ConfigError

logger = logging.get_logger()

# Output channels of the 13 convolutions of VGG-16.
VGG16_CHANNELS = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]

NUM_LAYERS = len(VGG16_CHANNELS)


class Variant(str, Enum):
    basic = "basic"
    expansion = "expansion"
    alternate = "alternate"
    superior = "superior"


class DatasetName(str, Enum):
    mnist = "mnist"
    kmnist = "kmnist"
    fashion_mnist = "fashion-mnist"
    cifar10 = "cifar10"


# (C, H, W) fed to the network; the MNIST family is zero-padded 28 -> 32.
DATASET_INPUT_SHAPES = {
    DatasetName.mnist: (1, 32, 32),
    DatasetName.kmnist: (1, 32, 32),
    DatasetName.fashion_mnist: (1, 32, 32),
    DatasetName.cifar10: (3, 32, 32),
}


def _expandpath(p: Path) -> Path:
    return Path(os.path.expanduser(os.path.expandvars(str(p))))


EnvPath = Annotated[Path, AfterValidator(_expandpath)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AugmentPolicy(_Strict):
    # Zero-pad by this many pixels, then crop back to the original size.
    pad_crop: Op[Annotated[int, Field(ge=0)]] = None
    hflip_prob: Annotated[float, Field(ge=0.0, le=1.0)] = 0.0
    # Uniform rotation in [-rotate_deg, rotate_deg].
    rotate_deg: Op[Annotated[float, Field(ge=0.0)]] = None

    @property
    def is_identity(self) -> bool:
        return not (self.pad_crop or self.hflip_prob or self.rotate_deg)


DEFAULT_AUGMENT = {
    DatasetName.mnist: AugmentPolicy(),
    DatasetName.kmnist: AugmentPolicy(),
    DatasetName.fashion_mnist: AugmentPolicy(),
    DatasetName.cifar10: AugmentPolicy(pad_crop=4, hflip_prob=0.5),
}

# Available for 64x64 datasets; none of the bundled loaders use it.
ROTATE_FLIP_AUGMENT = AugmentPolicy(rotate_deg=20.0, hflip_prob=0.5)


class ModelSpec(_Strict):
    """
    Describes the pyramidal network: 13 X-MLP layers whose channel counts
    follow VGG-16 and whose spatial extent halves whenever the channel count
    grows, never going below `min_spatial`.
    """
    variant: Variant = Variant.basic
    # (C, H, W)
    input_shape: t.Tuple[PositiveInt, PositiveInt, PositiveInt] = (3, 32, 32)
    num_classes: PositiveInt = 10
    channels: t.List[PositiveInt] = Field(default_factory=lambda: list(VGG16_CHANNELS))
    width_mult: PositiveFloat = 1.0
    expansion: PositiveInt = 4
    # Hidden multiplier of the X-Superior mixing block; defaults to `expansion`.
    mix_expansion: Op[PositiveInt] = None
    min_spatial: PositiveInt = 8
    # When false, schedules of any depth are accepted (tiny test models).
    enforce_depth: bool = True

    bn_momentum: Annotated[float, Field(gt=0.0, lt=1.0)] = 0.1
    bn_eps: PositiveFloat = 1e-5
    prelu_init: float = 0.25

    @field_validator("channels")
    def nonempty(cls, v):
        if not v:
            raise ValueError("channel schedule is empty")
        return v

    @model_validator(mode="after")
    def check_schedule(self):
        if self.enforce_depth and len(self.channels) != NUM_LAYERS:
            raise ValueError(
                f"channel schedule must have {NUM_LAYERS} entries, "
                f"got {len(self.channels)}")
        scaled = self.scaled_channels()
        if any(b < a for a, b in zip(scaled, scaled[1:])):
            raise ValueError(f"channel schedule must be non-decreasing: {scaled}")
        return self

    def scaled_channels(self) -> t.List[int]:
        return [max(1, int(round(c * self.width_mult))) for c in self.channels]

    @property
    def mix_hidden_mult(self) -> int:
        return self.mix_expansion or self.expansion


class TrainConfig(_Strict):
    batch_size: PositiveInt = 64
    momentum: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.9
    weight_decay: Annotated[float, Field(ge=0.0)] = 5e-4
    lr_init: PositiveFloat = 1e-2
    lr_min: PositiveFloat = 1e-4
    lr_decay_factor: Annotated[float, Field(gt=1.0)] = 10.0
    # Decay when the mean loss over the last `plateau_window` epochs improves
    # on the epoch before the window by less than `plateau_threshold`
    # (relative).
    plateau_window: PositiveInt = 5
    plateau_threshold: PositiveFloat = 1e-3
    epochs: PositiveInt = 5
    seed: Annotated[int, Field(ge=0)] = 0
    # Independent runs on seeds seed, seed + 1, ...; results are averaged.
    runs: PositiveInt = 1
    checkpoint_every: PositiveInt = 5
    # Depth of the augmented-batch queue fed by the prefetch thread; 0 runs
    # the pipeline inline.
    prefetch: Annotated[int, Field(ge=0)] = 2

    @model_validator(mode="after")
    def check_lrs(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must be <= lr_init")
        return self


class RunConfig(_Strict):
    dataset: DatasetName = DatasetName.mnist
    data_dir: EnvPath = Path("data")
    out: EnvPath = Path("out")

    # Checkpoint to evaluate / restore from / resume.
    checkpoint: Op[EnvPath] = None
    resume: bool = False

    # restore: 1-based layer selection, e.g. "1,3,5-7"; empty means all.
    layers: str = ""
    # restore: central (rows, cols) output positions rendered per layer.
    crop: t.Tuple[PositiveInt, PositiveInt] = (8, 8)
    fold_bn: bool = False
    # restore: matplotlib colormap name; unset writes grayscale P5.
    cmap: Op[str] = None

    threads: Op[PositiveInt] = None
    log_level: str = "INFO"

    gradcheck_seeds: PositiveInt = 5
    gradcheck_tol32: PositiveFloat = 1e-3
    gradcheck_tol64: PositiveFloat = 1e-6

    # None picks the dataset's own recipe.
    augment: Op[AugmentPolicy] = None
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="after")
    def infer_input_shape(self):
        if "input_shape" not in self.model.model_fields_set:
            self.model.input_shape = DATASET_INPUT_SHAPES[self.dataset]
        return self

    @property
    def augment_policy(self) -> AugmentPolicy:
        if self.augment is not None:
            return self.augment
        return DEFAULT_AUGMENT[self.dataset]

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def schema_keys(model: t.Type[BaseModel] = RunConfig, prefix: str = "") -> t.List[str]:
    """Every dotted key the config schema accepts."""
    keys = []
    for name, info in model.model_fields.items():
        key = prefix + name
        sub = _submodel(info.annotation)
        if sub is not None:
            keys.extend(schema_keys(sub, key + "."))
        else:
            keys.append(key)
    return keys


def _submodel(annotation) -> t.Optional[t.Type[BaseModel]]:
    candidates = [annotation, *t.get_args(annotation)]
    for c in candidates:
        if isinstance(c, type) and issubclass(c, BaseModel):
            return c
    return None


def _raise_config_error(e: ValidationError) -> t.NoReturn:
    problems = "; ".join(
        f"{'.'.join(str(i) for i in err['loc']) or '<root>'}: {err['msg']}"
        for err in e.errors())
    raise ConfigError(f"invalid config: {problems}") from None


def load(content: t.Union[Path, str, None] = None) -> RunConfig:
    if isinstance(content, Path):
        if not content.exists():
            raise ConfigError(f"config file {content} doesn't exist")
        content = content.read_text()

    data = yaml.safe_load(content) if content else {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    try:
        return RunConfig(**data)
    except ValidationError as e:
        _raise_config_error(e)


def resolve(config_path: t.Optional[Path] = None, **overrides) -> RunConfig:
    """
    Load `config_path` (if any) and apply dotted-key overrides, e.g.
    `resolve(None, **{"model.variant": "superior"})`. None-valued overrides
    are ignored so unset CLI flags fall through to the file.
    """
    data: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} doesn't exist")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError("config document must be a mapping")

    for key, val in overrides.items():
        if val is None:
            continue
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"can't override {key}: {p} isn't a mapping")
        node[leaf] = val.value if isinstance(val, Enum) else val

    try:
        cfg = RunConfig(**data)
    except ValidationError as e:
        _raise_config_error(e)

    logger.debug("resolved config: %s", cfg)
    return cfg
