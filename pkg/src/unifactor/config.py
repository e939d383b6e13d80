"""Run configuration: dataclasses plus an INI-style ``key = value`` loader.

A config file has one section per dataclass below (``[data]``, ``[model]``,
``[mask]``, ``[pretrain]``, ``[stage1]``, ``[stage2]``, ``[sft]``, ``[eval]``).
Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

DEFAULT_TEMPLATES = (
    "F C S F Q",
    "C S F Q",
    "F F C S Q F",
    "C S Q",
    "F C S Q F F",
)


@dataclass
class DataConfig:
    S: int = 4
    C: int = 4
    G: int = 16
    V_t: int = 64
    V_v: int = 64
    n: int = 2048
    max_caption: int = 8
    n_fillers: int = 16
    palette_size: int = 3
    templates: tuple[str, ...] = DEFAULT_TEMPLATES

    def validate(self) -> None:
        for name in ("S", "C", "G", "V_t", "V_v", "n_fillers", "palette_size", "max_caption"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.n < 0:
            raise ConfigError("n", f"must be >= 0, got {self.n}")
        if self.G < 4 or self.G % 2:
            raise ConfigError("G", f"grid side must be even and >= 4, got {self.G}")
        # local import keeps config free of the data module at import time
        from .synthdata import PROMPT_WORDS

        need_t = self.C + self.S + 4 + len(PROMPT_WORDS) + self.n_fillers
        if self.V_t < need_t:
            raise ConfigError("V_t", f"needs >= {need_t} tokens for the caption layout, got {self.V_t}")
        need_v = self.S * self.C + self.C + self.palette_size
        if self.V_v < need_v:
            raise ConfigError("V_v", f"needs >= {need_v} tokens for objects + texture, got {self.V_v}")
        if not self.templates:
            raise ConfigError("templates", "at least one caption template required")
        for t in self.templates:
            slots = t.split()
            if sorted(s for s in slots if s != "F") != ["C", "Q", "S"] or set(slots) - {"C", "S", "Q", "F"}:
                raise ConfigError("templates", f"template {t!r} must hold C, S, Q once plus F fillers")
            if len(slots) > self.max_caption:
                raise ConfigError("templates", f"template {t!r} longer than max_caption={self.max_caption}")


@dataclass
class ModelConfig:
    num_layers: int = 8
    width: int = 128
    heads: int = 4
    mid_range: tuple[int, int] | None = None
    d_z: int = 64
    rank: int = 24
    encoder: str = "gated-mlp"

    def resolved_mid_range(self) -> tuple[int, int]:
        if self.mid_range is not None:
            return tuple(self.mid_range)
        L = self.num_layers
        return (math.ceil(L / 3) + 1, math.ceil(2 * L / 3))

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers", "must be >= 1")
        if self.width % self.heads:
            raise ConfigError("width", f"width {self.width} not divisible by heads {self.heads}")
        lo, hi = self.resolved_mid_range()
        if not 1 <= lo <= hi <= self.num_layers:
            raise ConfigError("mid_range", f"[{lo}, {hi}] not within [1, {self.num_layers}]")
        if self.rank < 1:
            raise ConfigError("rank", "must be >= 1")
        if self.encoder not in ("gated-mlp", "linear-ln"):
            raise ConfigError("encoder", f"unknown encoder {self.encoder!r}")


@dataclass
class MaskConfig:
    ratio_min: float = 0.2
    ratio_max: float = 0.6
    pattern: str = "random"

    def validate(self) -> None:
        if not 0.0 <= self.ratio_min <= self.ratio_max <= 1.0:
            raise ConfigError("ratio_min", f"need 0 <= {self.ratio_min} <= {self.ratio_max} <= 1")
        if self.pattern not in ("random", "contiguous"):
            raise ConfigError("pattern", f"unknown mask pattern {self.pattern!r}")


@dataclass
class OptimConfig:
    steps: int = 0
    batch_size: int = 8
    lr: float = 3e-4
    lr_floor: float = 0.0
    warmup: int = 0
    weight_decay: float = 0.01
    log_every: int = 50

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "contrastive terms need batch_size >= 2")
        if self.warmup < 0:
            raise ConfigError("warmup", "must be >= 0")


@dataclass
class PretrainConfig(OptimConfig):
    steps: int = 2000
    lr: float = 1e-3
    warmup: int = 100


@dataclass
class Stage1Config(OptimConfig):
    steps: int = 4000
    warmup: int = 200
    shared_only_fraction: float = 0.3
    lambda_ortho: float = 0.2
    lambda_und: float = 1.0
    lambda_gen: float = 1.0

    def validate(self) -> None:
        super().validate()
        if not 0.0 <= self.shared_only_fraction <= 1.0:
            raise ConfigError("shared_only_fraction", "must lie in [0, 1]")
        if self.lambda_ortho < 0:
            raise ConfigError("lambda_ortho", "must be >= 0")


@dataclass
class Stage2Config(OptimConfig):
    steps: int = 8000
    warmup: int = 800
    lambda_sha_max: float = 0.6
    lambda_uni_max: float = 0.6
    ramp_steps: int = 2000
    trainable_range: tuple[int, int] | None = None
    ema_start: float = 0.99
    ema_end: float = 0.999
    tau: float = 0.1
    critic_lr: float = 5e-3
    train_head: bool = False
    no_uni: bool = False
    no_sg: bool = False
    lambda_und: float = 1.0
    lambda_gen: float = 1.0

    def validate(self) -> None:
        super().validate()
        if self.lambda_sha_max < 0 or self.lambda_uni_max < 0 or self.ramp_steps < 0:
            raise ConfigError("lambda_sha_max", "ramps must be non-negative")
        if not 0.0 <= self.ema_start <= 1.0 or not 0.0 <= self.ema_end <= 1.0:
            raise ConfigError("ema_start", "EMA decays must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau", "must be > 0")


@dataclass
class SFTConfig(OptimConfig):
    # None = stage1.steps + stage2.steps (matched total budget)
    steps: int | None = None
    warmup: int = 800
    trainable_range: tuple[int, int] | None = None

    def validate(self) -> None:
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")


@dataclass
class EvalConfig:
    batch_size: int = 256
    var_threshold: float = 0.95
    freq_cutoff: float = 0.5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    sft: SFTConfig = field(default_factory=SFTConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if hasattr(sub, "validate"):
                try:
                    sub.validate()
                except ConfigError as e:
                    raise ConfigError(f"{f.name}.{e.field}", str(e).split(": ", 1)[-1]) from None
        L = self.model.num_layers
        for name, rng in (("stage2.trainable_range", self.stage2.trainable_range),
                          ("sft.trainable_range", self.sft.trainable_range)):
            if rng is not None and not 1 <= rng[0] <= rng[1] <= L:
                raise ConfigError(name, f"{rng} not within [1, {L}]")
        return self

    def sft_steps(self) -> int:
        if self.sft.steps is not None:
            return self.sft.steps
        return self.stage1.steps + self.stage2.steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for section, values in d.items():
            apply_section(cfg, section, values)
        return cfg


def _coerce(value: Any, current: Any, hint: str, key: str):
    if isinstance(value, str):
        text = value.strip()
    else:
        text = value
    if "tuple[int, int]" in hint:
        if text is None or (isinstance(text, str) and text.lower() in ("", "none")):
            return None
        if isinstance(text, (list, tuple)):
            return (int(text[0]), int(text[1]))
        a, b = str(text).replace(",", ":").split(":")
        return (int(a), int(b))
    if "tuple[str" in hint:
        if isinstance(text, (list, tuple)):
            return tuple(text)
        return tuple(t.strip() for t in str(text).split("|") if t.strip())
    if hint.startswith("bool"):
        if isinstance(text, bool):
            return text
        low = str(text).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(key, f"expected boolean, got {value!r}")
    if "int | None" in hint:
        if text is None or str(text).lower() in ("", "none"):
            return None
        return int(text)
    if hint.startswith("int"):
        return int(text)
    if hint.startswith("float"):
        return float(text)
    return text


def apply_section(cfg: RunConfig, section: str, values: dict) -> None:
    if not hasattr(cfg, section) or section.startswith("_"):
        raise ConfigError(section, "unknown config section")
    sub = getattr(cfg, section)
    hints = {f.name: str(f.type) for f in dataclasses.fields(sub)}
    for key, value in values.items():
        if key not in hints:
            raise ConfigError(f"{section}.{key}", "unknown config key")
        try:
            setattr(sub, key, _coerce(value, getattr(sub, key), hints[key], f"{section}.{key}"))
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{section}.{key}", f"cannot parse {value!r}") from None


def load_config(path: str | Path | None, overrides: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    """Read an INI config (if given), apply ``{"section.key": value}`` overrides, validate.

    Values are layered over ``base`` (a copy) when given, else over the defaults.
    """
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from None
        for section in parser.sections():
            apply_section(cfg, section, dict(parser[section]))
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        apply_section(cfg, section, {key: value})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the same INI dialect accepted by :func:`load_config`."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, (list, tuple)) and key == "templates":
                value = " | ".join(value)
            elif isinstance(value, (list, tuple)):
                value = f"{value[0]}:{value[1]}"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
