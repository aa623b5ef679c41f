"""Two-stage cross-attention injecting frame-level accent embeddings into acoustic frames."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .config import FusionConfig
from .layers import attend, merge_heads, split_heads
from .numcore import ConfigurationError, Tensor
from .params import Init, ModelParams

MODES = ("cross", "self", "none")


def init_fusion(init: Init, d: int) -> None:
    for name in ("wq", "wk", "wv"):
        init.uniform(f"fusion.{name}", (d, d), d, d)


def _proj(x: Tensor, w: Tensor, heads: int) -> Tensor:
    return split_heads(nc.matmul(x, w), heads)


def cross_attention(h_ac: Tensor, h_ga: Tensor, p: ModelParams, cfg: FusionConfig,
                    mask: np.ndarray | None = None, cache: dict | None = None) -> Tensor:
    """Accent-queried attention over acoustic keys/values, applied twice.

    stage 1: Q' = relu(softmax(Q K^T / sqrt(d_att)) V) with Q from ``h_ac``
    stage 2: O  = relu(softmax(Q' K^T / sqrt(d_att)) V), same K and V.
    ``mask`` is True where a key frame may be read.  With ``cache`` the
    projected keys/values of earlier chunks are prepended.
    """
    if cfg.mode not in MODES or cfg.mode == "none":
        raise ConfigurationError(f"cross_attention called with fusion mode {cfg.mode!r}")
    if h_ac.shape != h_ga.shape:
        raise nc.DimensionError(f"accent embedding {h_ac.shape} and acoustic frames {h_ga.shape} differ")
    heads = cfg.heads
    query_src = h_ac if cfg.mode == "cross" else h_ga
    q = _proj(query_src, p["fusion.wq"], heads)
    k = nc.matmul(h_ga, p["fusion.wk"])
    v = nc.matmul(h_ga, p["fusion.wv"])
    if cache is not None:
        old = cache.get("fusion")
        if old is not None:
            k = nc.concat([old[0], k], axis=1)
            v = nc.concat([old[1], v], axis=1)
        cache["fusion"] = (k, v)
    k, v = split_heads(k, heads), split_heads(v, heads)
    q_att = nc.relu(attend(q, k, v, mask))
    if cfg.reproject:
        q_att = _proj(merge_heads(q_att), p["fusion.wq"], heads)
    out = merge_heads(nc.relu(attend(q_att, k, v, mask)))
    if cfg.residual:
        out = out + h_ga
    return out
