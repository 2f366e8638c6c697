from .protofed_aux import ConfigurationError
from .protofed_types import FreezeMode, OptimizerKind, Precision, Variant

import protofed.protofed_types as internal
import configparser
import logging
import typing

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

logger = logging.getLogger(__name__)

__SettingEnums__ = {
    FreezeMode: (internal.__StrFreezeMode__, internal.__FreezeModeStr__),
    OptimizerKind: (internal.__StrOptimizerKind__, internal.__OptimizerKindStr__),
    Precision: (internal.__StrPrecision__, internal.__PrecisionStr__),
    Variant: (internal.__StrVariant__, internal.__VariantStr__),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if type(value) in __SettingEnums__:
        return __SettingEnums__[type(value)][1][value]
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(kind, text: str, where: str):
    text = text.strip()
    origin = typing.get_origin(kind)
    if origin is Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if text.lower() == "none":
            return None
        return _parse_value(args[0], text, where)
    if origin is tuple:
        inner = typing.get_args(kind)[0]
        items = [t for t in text.split(",") if t.strip()]
        return tuple(_parse_value(inner, t, where) for t in items)
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind in __SettingEnums__:
            return __SettingEnums__[kind][0][text.lower()]
        return kind(text)
    except (KeyError, ValueError) as e:
        raise ConfigurationError(
            f"invalid value {text!r} for {where}") from e


class _Section(object):
    """Mixin turning a settings dataclass into an INI section and back."""
    _section_name = ""

    def _to_section(self) -> dict[str, str]:
        return {f.name: _format_value(getattr(self, f.name))
                for f in fields(self)}

    @classmethod
    def _from_section(cls, section: typing.Mapping[str, str]):
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(section) - known)
        if unknown:
            raise ConfigurationError(
                f"unknown key(s) {unknown} in section [{cls._section_name}]")
        values = {name: _parse_value(hints[name], text,
                                     f"[{cls._section_name}] {name}")
                  for name, text in section.items()}
        return cls(**values)


@dataclass
class FedConfig(_Section):
    _section_name = "federation"

    num_clients: int = 4
    rounds: int = 50
    local_epochs: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 16
    eval_batch_size: int = 64
    communicate_adapters: bool = True
    communicate_prototypes: bool = True
    communicate_head: bool = True
    use_prox: bool = True
    optimizer: OptimizerKind = OptimizerKind.Adam
    reset_optimizer: bool = False
    allow_partial: bool = False
    dump_payloads: bool = False
    seed: int = 42

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigurationError("federation needs at least one client")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if not (self.communicate_adapters or self.communicate_prototypes):
            raise ConfigurationError(
                "at least one of communicate_adapters / communicate_prototypes "
                "must be enabled")


@dataclass
class BackboneConfig(_Section):
    _section_name = "backbone"

    num_blocks: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    in_channels: int = 1
    image_size: tuple[int, ...] = (64, 64)
    kernel_size: int = 3
    pool_last_block: bool = False
    adapter_reduction: int = 4
    num_classes: int = 2
    prototypes_per_class: int = 5
    prototype_shape: tuple[int, ...] = (1, 1)
    freeze_mode: FreezeMode = FreezeMode.WarmupPretrained
    warmup_steps: int = 300
    warmup_learning_rate: float = 1e-3
    warmup_samples: int = 800
    calibrate_prototypes: bool = True

    @property
    def feature_shape(self) -> tuple[int, int]:
        """Blocks halve the map except the last, unless ``pool_last_block``."""
        h, w = self.image_size
        for _ in range(self.num_blocks - (0 if self.pool_last_block else 1)):
            h, w = h // 2, w // 2
        return h, w

    @property
    def depth(self) -> int:
        return self.channels[-1]

    @property
    def num_prototypes(self) -> int:
        return self.num_classes * self.prototypes_per_class

    def bottleneck(self, block: int) -> int:
        return max(1, self.channels[block] // self.adapter_reduction)

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigurationError("num_blocks must be >= 1")
        if len(self.channels) != self.num_blocks:
            raise ConfigurationError(
                f"{self.num_blocks} blocks need {self.num_blocks} channel "
                f"counts, got {self.channels}")
        if min(self.channels) < 1 or self.in_channels < 1:
            raise ConfigurationError(
                f"channel counts must be strictly positive: {self.channels}")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigurationError(f"invalid image_size {self.image_size}")
        if len(self.prototype_shape) != 2 or min(self.prototype_shape) < 1:
            raise ConfigurationError(
                f"invalid prototype_shape {self.prototype_shape}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be a positive odd number")
        fh, fw = self.feature_shape
        if fh < self.prototype_shape[0] or fw < self.prototype_shape[1]:
            raise ConfigurationError(
                f"feature map {fh}x{fw} smaller than prototype "
                f"{self.prototype_shape[0]}x{self.prototype_shape[1]}")
        for b, d in enumerate(self.channels):
            if self.bottleneck(b) >= d:
                raise ConfigurationError(
                    f"adapter {b + 1}: bottleneck width {self.bottleneck(b)} "
                    f"must be smaller than depth {d}")
        if self.num_classes < 1 or self.prototypes_per_class < 1:
            raise ConfigurationError(
                "every class needs at least one prototype")
        if self.warmup_steps < 0 or self.warmup_learning_rate <= 0:
            raise ConfigurationError("invalid warm-up settings")


@dataclass
class LossWeights(_Section):
    _section_name = "loss"

    beta: float = 1e-4
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08
    gamma: float = 1e-4
    mu1: float = 0.01
    mu2: float = 0.01
    l1_on_prototypes: bool = False
    sep_cap: Optional[float] = None

    def validate(self) -> None:
        for f in ("beta", "lambda_clst", "lambda_sep", "gamma", "mu1", "mu2"):
            if getattr(self, f) < 0:
                raise ConfigurationError(f"loss weight {f} must be >= 0")
        if self.sep_cap is not None and self.sep_cap <= 0:
            raise ConfigurationError("sep_cap must be > 0 when set")


@dataclass
class DataConfig(_Section):
    _section_name = "data"

    train_sizes: tuple[int, ...] = (600, 500, 400, 300)
    healthy_fractions: tuple[float, ...] = (0.76, 0.55, 0.81, 0.84)
    test_size: int = 600
    test_healthy_fraction: float = 0.82
    external_size: int = 0
    external_healthy_fraction: float = 0.5
    appearance_skew: bool = True
    train_fraction: float = 0.8
    glyph_size: int = 16
    augment: bool = False
    dataset_dir: str = ""
    seed: int = 42

    def validate(self, num_clients: int) -> None:
        if len(self.train_sizes) != num_clients or \
                len(self.healthy_fractions) != num_clients:
            raise ConfigurationError(
                f"{num_clients} clients need {num_clients} train_sizes and "
                f"healthy_fractions")
        fractions = self.healthy_fractions + (self.test_healthy_fraction,
                                              self.external_healthy_fraction)
        if any(not 0.0 <= f <= 1.0 for f in fractions):
            raise ConfigurationError("healthy fractions must lie in [0, 1]")
        if min(self.train_sizes) < 5 or self.test_size < 1:
            raise ConfigurationError("every training site needs >= 5 samples")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")


@dataclass
class InterpretSettings(_Section):
    _section_name = "interpret"

    percentile: float = 95.0
    top_k: int = 3
    max_images: int = 200

    def validate(self) -> None:
        if not 0.0 <= self.percentile <= 100.0:
            raise ConfigurationError("percentile must lie in [0, 100]")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")


@dataclass
class WorkerSettings(_Section):
    _section_name = "worker"

    workers: int = 1

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


@dataclass
class RunSection(_Section):
    _section_name = "run"

    output_dir: str = "runs/default"
    precision: Precision = Precision.Double
    variant: Variant = Variant.Ours


@dataclass
class RunConfig(object):
    federation: FedConfig = field(default_factory=FedConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    interpret: InterpretSettings = field(default_factory=InterpretSettings)
    worker: WorkerSettings = field(default_factory=WorkerSettings)
    run: RunSection = field(default_factory=RunSection)

    def sections(self) -> dict:
        return {getattr(self, f.name)._section_name: getattr(self, f.name)
                for f in fields(self)}

    def validate(self) -> "RunConfig":
        self.federation.validate()
        self.backbone.validate()
        self.loss.validate()
        self.data.validate(self.federation.num_clients)
        self.interpret.validate()
        self.worker.validate()
        return self

    def override(self, dotted: typing.Mapping[str, str]) -> "RunConfig":
        """Returns a copy with ``section.key`` string overrides applied."""
        merged = {name: section._to_section()
                  for name, section in self.sections().items()}
        for key, value in dotted.items():
            section, _, name = key.partition(".")
            if section not in merged or not name:
                raise ConfigurationError(f"unknown override key {key!r}")
            merged[section][name] = value
        return RunConfig._from_mapping(merged)

    def with_variant(self, variant: Variant) -> "RunConfig":
        """Returns a copy whose switches and loss realize ``variant``."""
        fed = self.federation
        loss = self.loss
        plain = replace(loss, beta=0.0, lambda_clst=0.0, lambda_sep=0.0,
                        gamma=0.0)
        if variant is Variant.FedAvg:
            fed = replace(fed, communicate_adapters=True,
                          communicate_prototypes=True, use_prox=False)
            loss = plain
        elif variant is Variant.FedProx:
            fed = replace(fed, communicate_adapters=True,
                          communicate_prototypes=True, use_prox=True)
            loss = replace(plain, mu2=plain.mu1)
        elif variant is Variant.FedAdapterNoProx:
            fed = replace(fed, communicate_adapters=True,
                          communicate_prototypes=False, use_prox=False)
        elif variant is Variant.FedAdapter:
            fed = replace(fed, communicate_adapters=True,
                          communicate_prototypes=False, use_prox=True)
        elif variant is Variant.FedProto:
            fed = replace(fed, communicate_adapters=False,
                          communicate_prototypes=True, use_prox=True)
        elif variant is Variant.Ours:
            fed = replace(fed, communicate_adapters=True,
                          communicate_prototypes=True, use_prox=True)
        return replace(self, federation=fed, loss=loss,
                       run=replace(self.run, variant=variant))

    @classmethod
    def _from_mapping(cls, mapping: typing.Mapping[str, typing.Mapping[str, str]]
                      ) -> "RunConfig":
        by_name = {f.type._section_name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(by_name))
        if unknown:
            raise ConfigurationError(f"unknown config section(s) {unknown}")
        kwargs = {by_name[name].name: by_name[name].type._from_section(values)
                  for name, values in mapping.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "RunConfig":
        """Reads an INI file; missing sections and keys keep their defaults."""
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None,
                                           default_section="__defaults__")
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigurationError(f"cannot parse config {path}: {e}") from e
        return cls._from_mapping({s: dict(parser[s]) for s in parser.sections()})

    def to_ini(self) -> str:
        lines = []
        for name, section in self.sections().items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in section._to_section().items())
            lines.append("")
        return "\n".join(lines)

    def save(self, path: Union[str, Path]) -> Path:
        """Writes the resolved config with every default materialized."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def tiny_config(seed: int = 0) -> RunConfig:
    """Two blocks of eight channels on 16×16 inputs, frozen-random."""
    return RunConfig(
        backbone=BackboneConfig(num_blocks=2, channels=(8, 8),
                                image_size=(16, 16), prototypes_per_class=2,
                                pool_last_block=True,
                                freeze_mode=FreezeMode.FrozenRandom),
        federation=FedConfig(seed=seed),
    )

