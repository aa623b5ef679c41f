"""Sub-layers shared by the encoder, fusion and attention decoder."""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .params import Init, ModelParams

MASK_FILL = -1e9


def init_ffn(init: Init, prefix: str, d: int, mult: int) -> None:
    init.norm(f"{prefix}.norm", d)
    init.linear(f"{prefix}.fc1", d, d * mult)
    init.linear(f"{prefix}.fc2", d * mult, d)


def ffn(x: Tensor, p: ModelParams, prefix: str, act=nc.swish) -> Tensor:
    h = nc.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    h = act(nc.linear(h, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    return nc.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])


def init_mha(init: Init, prefix: str, d: int) -> None:
    for name in ("q", "k", "v", "o"):
        init.linear(f"{prefix}.{name}", d, d)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return nc.transpose(nc.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention; ``mask`` is True where a key may be read."""
    scores = nc.matmul(q, nc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = nc.where(mask, scores, MASK_FILL)
    return nc.matmul(nc.softmax(scores, axis=-1), v)


def mha(x_q: Tensor, x_kv: Tensor, p: ModelParams, prefix: str, heads: int,
        mask: np.ndarray | None, cache: dict | None = None) -> Tensor:
    """Multi-head attention of ``x_q`` over ``x_kv`` (both (B, T, d)).

    With ``cache``, projected keys/values of earlier calls are prepended and
    the extended history is stored back under ``prefix``.
    """
    q = nc.linear(x_q, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
    k = nc.linear(x_kv, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
    v = nc.linear(x_kv, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
    if cache is not None:
        old = cache.get(prefix)
        if old is not None:
            k = nc.concat([old[0], k], axis=1)
            v = nc.concat([old[1], v], axis=1)
        cache[prefix] = (k, v)
    out = attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads), mask)
    return nc.linear(merge_heads(out), p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])


def key_mask(lengths, t_max: int) -> np.ndarray:
    """(B, 1, 1, T) boolean mask of valid key frames."""
    lengths = np.asarray(lengths)
    return (np.arange(t_max)[None, :] < lengths[:, None])[:, None, None, :]
