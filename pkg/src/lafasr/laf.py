"""Layer-adapted fusion: weighted encoder taps feeding a causal accent classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import LafConfig
from .encoder import EncoderTaps
from .numcore import ConfigurationError, Tensor
from .params import Init, ModelParams

MODES = ("concat", "weighted_sum", "probe")


@dataclass
class AccentResult:
    embedding: Tensor  # (B, T', d), input of the linear discriminator
    frame_logits: Tensor  # (B, T', A)
    lengths: np.ndarray

    @property
    def utterance_posterior(self) -> np.ndarray:
        """softmax of the temporal mean of frame logits, per utterance (B, A)."""
        return utterance_posterior(self.frame_logits.data, self.lengths)


def utterance_posterior(frame_logits: np.ndarray, lengths) -> np.ndarray:
    lengths = np.asarray(lengths)
    valid = np.arange(frame_logits.shape[1])[None, :] < lengths[:, None]
    m = (frame_logits * valid[..., None]).sum(axis=1) / lengths[:, None]
    m = m - m.max(axis=-1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=-1, keepdims=True)


def in_channels(cfg: LafConfig, n_taps: int) -> int:
    if cfg.mode not in MODES:
        raise ConfigurationError(f"unknown LAF mode {cfg.mode!r}")
    return n_taps if cfg.mode == "concat" else 1


def init_laf(init: Init, cfg: LafConfig, n_taps: int, d: int, accents: int, head_only: bool = False) -> None:
    if not head_only:
        init.const("laf.w", (n_taps,), 1.0 / n_taps)
    c_in, c = in_channels(cfg, n_taps), cfg.channels
    k = cfg.kernel
    init.uniform("laf.conv1.w", (c, c_in, k, k), c_in * k * k, c * k * k)
    init.const("laf.conv1.b", (c,), 0.0)
    init.uniform("laf.conv2.w", (c, c, k, k), c * k * k, c * k * k)
    init.const("laf.conv2.b", (c,), 0.0)
    init.linear("laf.proj", c * d, d)
    init.uniform("laf.cls.conv.w", (cfg.cls_kernel, d, d), cfg.cls_kernel * d, d)
    init.const("laf.cls.conv.b", (d,), 0.0)
    init.linear("laf.cls.out", d, accents)


def layer_adapt(taps: EncoderTaps, p: ModelParams, cfg: LafConfig) -> Tensor:
    """Fuse the tapped layers into a (B, C, T', d) map for the 2-D conv stack."""
    if cfg.mode == "probe":
        if cfg.probe_layer not in taps.layers:
            raise ConfigurationError(f"probe layer {cfg.probe_layer} outside tapped layers {taps.layers}")
        h = taps.tap(cfg.probe_layer)
        return nc.reshape(h, (h.shape[0], 1) + h.shape[1:])
    w = p["laf.w"]
    if w.shape[0] != len(taps.taps):
        raise nc.DimensionError(f"{w.shape[0]} layer weights for {len(taps.taps)} taps")
    stacked = nc.stack(taps.taps, axis=1)  # (B, n, T', d)
    weighted = stacked * nc.reshape(w, (1, -1, 1, 1))
    if cfg.mode == "concat":
        return weighted
    if cfg.mode == "weighted_sum":
        return nc.tsum(weighted, axis=1, keepdims=True)
    raise ConfigurationError(f"unknown LAF mode {cfg.mode!r}")


def _conv2d_step(x: Tensor, w: Tensor, b: Tensor, cache: dict | None, key: str) -> Tensor:
    kt, kf = w.shape[2:]
    if cache is None:
        return nc.causal_conv(x, w, mode="2d", bias=b)
    prev = cache.get(key)
    if prev is None:
        prev = nc.Tensor(np.zeros(x.shape[:2] + (kt - 1, x.shape[3]), dtype=x.dtype))
    xin = nc.concat([prev, x], axis=2)
    cache[key] = xin[:, :, xin.shape[2] - (kt - 1):]
    return nc.conv2d(xin, w, b, time_pad=(0, 0), feat_pad=((kf - 1) // 2, kf // 2))


def aid_decode(fused: Tensor, lengths, p: ModelParams, cache: dict | None = None) -> AccentResult:
    """Causal conv stack + linear discriminator over a fused (B, C, T', d) map."""
    h = nc.relu(_conv2d_step(fused, p["laf.conv1.w"], p["laf.conv1.b"], cache, "laf.conv1"))
    h = nc.relu(_conv2d_step(h, p["laf.conv2.w"], p["laf.conv2.b"], cache, "laf.conv2"))
    b, c, t, d = h.shape
    h = nc.reshape(nc.transpose(h, (0, 2, 1, 3)), (b, t, c * d))
    h = nc.relu(nc.linear(h, p["laf.proj.w"], p["laf.proj.b"]))
    w, bias = p["laf.cls.conv.w"], p["laf.cls.conv.b"]
    if cache is None:
        emb = nc.causal_conv(h, w, mode="1d", bias=bias)
    else:
        k = w.shape[0]
        prev = cache.get("laf.cls")
        if prev is None:
            prev = nc.Tensor(np.zeros((b, k - 1, d), dtype=h.dtype))
        hin = nc.concat([prev, h], axis=1)
        cache["laf.cls"] = hin[:, hin.shape[1] - (k - 1):]
        emb = nc.conv1d(hin, w, bias)
    emb = nc.relu(emb)
    logits = nc.linear(emb, p["laf.cls.out.w"], p["laf.cls.out.b"])
    return AccentResult(emb, logits, np.asarray(lengths))


def aid_loss(result: AccentResult, labels) -> Tensor:
    """Frame-averaged cross entropy against the utterance label broadcast to every frame."""
    logits = result.frame_logits
    b, t, _ = logits.shape
    valid = np.arange(t)[None, :] < result.lengths[:, None]
    target = np.broadcast_to(np.asarray(labels)[:, None], (b, t))
    nll = -nc.pick(nc.log_softmax(logits, axis=-1), target)
    return nc.tsum(nc.where(valid, nll, 0.0)) * (1.0 / valid.sum())
