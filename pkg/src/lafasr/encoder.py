"""Conformer acoustic encoder with progressive subsampling and layer taps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import EncoderConfig
from .decoder import build_chunk_mask
from .layers import ffn, init_ffn, init_mha, key_mask, mha
from .numcore import ConfigurationError, Tensor
from .params import Init, ModelParams

SUB_KERNEL = 3
FACTOR = 4


class DegenerateInputError(ValueError):
    """Input too short for the temporal subsampling stages."""


@dataclass
class EncoderTaps:
    taps: list[Tensor]  # (B, T', d) each, shallowest first
    layers: list[int]  # 1-based block index of each tap
    lengths: np.ndarray  # valid T' per utterance
    subsample_factor: int = FACTOR

    @property
    def final(self) -> Tensor:
        return self.taps[-1]

    def tap(self, layer: int) -> Tensor:
        if layer not in self.layers:
            raise ConfigurationError(f"layer {layer} is not tapped (taps: {self.layers})")
        return self.taps[self.layers.index(layer)]


def tap_layers(cfg: EncoderConfig) -> list[int]:
    first = cfg.num_blocks - cfg.num_taps + 1
    if cfg.num_taps < 1 or first <= cfg.sub2_after:
        raise ConfigurationError(
            f"{cfg.num_taps} taps over {cfg.num_blocks} blocks would include blocks before the second subsampling")
    return list(range(first, cfg.num_blocks + 1))


def encoded_length(n_frames) -> np.ndarray:
    return np.asarray(n_frames) // FACTOR


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def init_block(init: Init, prefix: str, d: int, mult: int, kernel: int) -> None:
    init_ffn(init, f"{prefix}.ffn1", d, mult)
    init.norm(f"{prefix}.mhsa_norm", d)
    init_mha(init, f"{prefix}.mhsa", d)
    init.norm(f"{prefix}.conv.norm1", d)
    init.linear(f"{prefix}.conv.pw1", d, 2 * d)
    init.uniform(f"{prefix}.conv.dw.w", (kernel, d), kernel, kernel)
    init.const(f"{prefix}.conv.dw.b", (d,), 0.0)
    init.norm(f"{prefix}.conv.norm2", d)
    init.linear(f"{prefix}.conv.pw2", d, d)
    init_ffn(init, f"{prefix}.ffn2", d, mult)
    init.norm(f"{prefix}.norm", d)


def init_encoder(init: Init, cfg: EncoderConfig, feat_dim: int) -> None:
    d = cfg.d_model
    if d % cfg.heads:
        raise ConfigurationError(f"d_model {d} not divisible by {cfg.heads} heads")
    tap_layers(cfg)
    init.uniform("encoder.sub1.w", (SUB_KERNEL, feat_dim, d), SUB_KERNEL * feat_dim, d)
    init.const("encoder.sub1.b", (d,), 0.0)
    init.normal("encoder.pos", (cfg.max_len, d), 0.02)
    for i in range(1, cfg.num_blocks + 1):
        if i == cfg.sub2_after + 1:
            init.uniform("encoder.sub2.w", (SUB_KERNEL, d, d), SUB_KERNEL * d, d)
            init.const("encoder.sub2.b", (d,), 0.0)
        init_block(init, f"encoder.block{i}", d, cfg.ffn_mult, cfg.conv_kernel)


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------


def subsample(x: Tensor, w: Tensor, b: Tensor, cache: dict | None = None, key: str = "") -> Tensor:
    """Halve the time axis of (B, T, C) with a causal stride-2 convolution + ReLU.

    Output frame j reads input frames 2j-1 .. 2j+1; an odd trailing frame is dropped.
    """
    keep = SUB_KERNEL - 2
    if cache is not None:
        prev = cache.get(key)
        if prev is None:
            prev = nc.Tensor(np.zeros((x.shape[0], keep, x.shape[2]), dtype=x.dtype))
        xin = nc.concat([prev, x], axis=1)
        cache[key] = xin[:, xin.shape[1] - keep:]
        return nc.relu(nc.conv1d(xin, w, b, stride=2, left_pad=0))
    if x.shape[1] < 2:
        raise DegenerateInputError(f"cannot subsample {x.shape[1]} frame(s)")
    return nc.relu(nc.conv1d(x, w, b, stride=2, left_pad=keep))


def conv_module(x: Tensor, p: ModelParams, prefix: str, causal: bool = True, valid: np.ndarray | None = None,
                cache: dict | None = None) -> Tensor:
    h = nc.layer_norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
    h = nc.glu(nc.linear(h, p[f"{prefix}.pw1.w"], p[f"{prefix}.pw1.b"]), axis=-1)
    w, b = p[f"{prefix}.dw.w"], p[f"{prefix}.dw.b"]
    k = w.shape[0]
    if cache is not None:
        prev = cache.get(prefix)
        if prev is None:
            prev = nc.Tensor(np.zeros((h.shape[0], k - 1, h.shape[2]), dtype=h.dtype))
        hin = nc.concat([prev, h], axis=1)
        cache[prefix] = hin[:, hin.shape[1] - (k - 1):]
        h = nc.depthwise_conv1d(hin, w, b)
    elif causal:
        h = nc.depthwise_conv1d(h, w, b, left_pad=k - 1)
    else:
        if valid is not None:
            h = nc.where(valid[..., None], h, 0.0)
        h = nc.depthwise_conv1d(h, w, b, left_pad=(k - 1) // 2, right_pad=k // 2)
    h = nc.swish(nc.layer_norm(h, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"]))
    return nc.linear(h, p[f"{prefix}.pw2.w"], p[f"{prefix}.pw2.b"])


def conformer_block(x: Tensor, p: ModelParams, prefix: str, heads: int, mask: np.ndarray | None,
                    causal: bool = True, valid: np.ndarray | None = None, cache: dict | None = None) -> Tensor:
    """Macaron conformer block: FFN/2, MHSA, conv module, FFN/2, each residual, then LayerNorm."""
    t = x.shape[-2]
    if mask is not None and (mask.shape[-1] != t or mask.shape[-2] not in (1, t)):
        raise nc.DimensionError(f"attention mask {mask.shape} does not match {t} frames")
    x = x + ffn(x, p, f"{prefix}.ffn1") * 0.5
    h = nc.layer_norm(x, p[f"{prefix}.mhsa_norm.g"], p[f"{prefix}.mhsa_norm.b"])
    x = x + mha(h, h, p, f"{prefix}.mhsa", heads, mask, cache)
    x = x + conv_module(x, p, f"{prefix}.conv", causal, valid, cache)
    x = x + ffn(x, p, f"{prefix}.ffn2") * 0.5
    return nc.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])


def _attn_mask(t_len: int, chunk: int | None, lengths) -> np.ndarray:
    keys = key_mask(lengths, t_len)
    if chunk is None or chunk >= t_len:
        return keys
    return build_chunk_mask(t_len, chunk).matrix[None, None] & keys


def encode(features: Tensor, lengths, p: ModelParams, cfg: EncoderConfig, chunk: int | None = None) -> EncoderTaps:
    """Run the encoder on padded (B, T, F) features.

    ``chunk`` is the chunk size at the output resolution (None = full context);
    blocks before the second subsampling use the equivalent chunk of 2*chunk.
    """
    lengths = np.asarray(lengths)
    t_enc = encoded_length(lengths)
    if t_enc.min() < 1:
        raise DegenerateInputError(f"utterances need at least {FACTOR} frames, got {int(lengths.min())}")
    t_max = int(t_enc.max()) * FACTOR
    x = features[:, :t_max] if features.shape[1] > t_max else features
    x = subsample(x, p["encoder.sub1.w"], p["encoder.sub1.b"])
    x = x + p["encoder.pos"][: x.shape[1]]
    len1 = t_enc * 2
    mask = _attn_mask(x.shape[1], None if chunk is None else 2 * chunk, len1)
    valid = np.arange(x.shape[1])[None] < len1[:, None]
    layers = tap_layers(cfg)
    taps = []
    for i in range(1, cfg.num_blocks + 1):
        if i == cfg.sub2_after + 1:
            x = subsample(x, p["encoder.sub2.w"], p["encoder.sub2.b"])
            mask = _attn_mask(x.shape[1], chunk, t_enc)
            valid = np.arange(x.shape[1])[None] < t_enc[:, None]
        x = conformer_block(x, p, f"encoder.block{i}", cfg.heads, mask, cfg.causal_conv, valid)
        if i in layers:
            taps.append(x)
    return EncoderTaps(taps, layers, t_enc)


class EncoderStream:
    """Incremental encoder: feed 4*C input frames at a time, get C frames of every tap."""

    def __init__(self, p: ModelParams, cfg: EncoderConfig):
        if not cfg.causal_conv:
            raise ConfigurationError("streaming requires causal convolutions")
        self.p, self.cfg = p, cfg
        self.cache: dict = {}
        self.offset = 0  # frames emitted after the first subsampling
        self.layers = tap_layers(cfg)

    def step(self, feats: Tensor) -> list[Tensor]:
        if feats.shape[1] % FACTOR:
            raise DegenerateInputError(f"chunk of {feats.shape[1]} frames is not a multiple of {FACTOR}")
        p, cfg = self.p, self.cfg
        x = subsample(feats, p["encoder.sub1.w"], p["encoder.sub1.b"], self.cache, "sub1")
        n = x.shape[1]
        x = x + p["encoder.pos"][self.offset: self.offset + n]
        self.offset += n
        taps = []
        for i in range(1, cfg.num_blocks + 1):
            if i == cfg.sub2_after + 1:
                x = subsample(x, p["encoder.sub2.w"], p["encoder.sub2.b"], self.cache, "sub2")
            x = conformer_block(x, p, f"encoder.block{i}", cfg.heads, None, True, None, self.cache)
            if i in self.layers:
                taps.append(x)
        return taps
