"""Experiment configuration.

Config files are UTF-8 text with one ``section.key = value`` assignment per
line; ``#`` starts a comment.  Every key must name a field of one of the
dataclasses below; anything else is rejected so that typos in experiment
files fail loudly instead of silently running the default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    vocab_size: int = 16
    accents: int = 4
    feat_dim: int = 80
    frames_per_token: int = 8
    len_range: tuple[int, int] = (3, 10)
    noise_std: float = 0.3
    accent_offset: float = 1.0
    subband: int = 8
    accent_warp: float = 0.0
    template_seed: int = 1234
    num_train: int = 512
    num_dev: int = 64
    num_test: int = 128
    seed: int = 0


@dataclass
class FeatureConfig:
    cmvn: str = "global"  # global | utterance
    spec_augment: bool = True
    num_freq_masks: int = 1
    max_freq_width: int = 8
    num_time_masks: int = 1
    max_time_width: int = 4


@dataclass
class EncoderConfig:
    d_model: int = 64
    heads: int = 4
    num_blocks: int = 12
    sub2_after: int = 3
    num_taps: int = 7
    ffn_mult: int = 4
    conv_kernel: int = 15
    causal_conv: bool = True
    max_len: int = 512


@dataclass
class LafConfig:
    mode: str = "concat"  # concat | weighted_sum | probe | none
    probe_layer: int = 8
    channels: int = 4
    kernel: int = 5
    cls_kernel: int = 3


@dataclass
class FusionConfig:
    mode: str = "cross"  # cross | self | none
    heads: int = 1
    residual: bool = False
    reproject: bool = False


@dataclass
class DecoderConfig:
    layers: int = 3
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 64
    ctc_weight: float = 0.3
    beam: int = 8
    method: str = "greedy"  # greedy | rescore


@dataclass
class TrainConfig:
    lambda_ctc: float = 0.3
    lambda_aid: float = 0.3
    lr: float = 2e-3
    warmup: int = 300
    batch_size: int = 16
    max_steps: int = 3000
    seed: int = 0
    chunk_policy: str = "dynamic"  # dynamic | fixed | full
    chunk_size: int = 4
    dtype: str = "float32"
    clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    log_every: int = 1


@dataclass
class AblationConfig:
    variants: tuple[str, ...] = ("A1", "A2", "A3", "A4", "Q1", "Q2")
    steps: int = 1500
    stream_chunk: int = 2
    margin: float = 0.0
    probe_layers: tuple[int, ...] = (6, 7, 8, 9, 10, 11)
    probe_steps: int = 300
    seeds: int = 1


@dataclass
class Config:
    synth: SynthConfig = field(default_factory=SynthConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    laf: LafConfig = field(default_factory=LafConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def copy(self) -> "Config":
        return parse_config(dump_config(self))

    def set(self, dotted: str, value: Any) -> None:
        section, key = _split_key(dotted)
        sec = getattr(self, section)
        hints = get_type_hints(type(sec))
        setattr(sec, key, value if not isinstance(value, str) else _coerce(value, hints[key], dotted))


def _split_key(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"expected section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in {f.name for f in dataclasses.fields(Config)}:
        raise ConfigError(f"unknown config section {section!r} in {dotted!r}")
    sec_type = {f.name: f for f in dataclasses.fields(Config)}[section].default_factory
    if key not in {f.name for f in dataclasses.fields(sec_type)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    return section, key


def _coerce(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        origin = getattr(typ, "__origin__", None)
        if origin is tuple:
            args = typ.__args__
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = args[0]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(p, elem, where) for p in parts)
            if len(parts) != len(args):
                raise ValueError(raw)
            return tuple(_coerce(p, t, where) for p, t in zip(parts, args))
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {where}") from None
    raise ConfigError(f"unsupported type for {where}")


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: Config) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
