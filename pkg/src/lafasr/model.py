"""Full model: encoder -> LAF accent head -> fusion -> CTC head + attention decoders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .decoder import build_chunk_mask, ctc_head, init_attention_decoder, init_ctc_head
from .encoder import EncoderTaps, encode, init_encoder, tap_layers
from .fusion import cross_attention, init_fusion
from .laf import AccentResult, aid_decode, init_laf, layer_adapt
from .layers import key_mask
from .numcore import Tensor
from .params import Init, ModelParams


@dataclass
class ForwardOutput:
    taps: EncoderTaps
    accent: AccentResult | None
    o_att: Tensor
    log_probs: Tensor
    lengths: np.ndarray


class Model:
    def __init__(self, cfg: Config, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: Config, seed: int | None = None, dtype=None) -> "Model":
        dtype = np.dtype(dtype or cfg.train.dtype)
        params = ModelParams()
        init = Init(params, cfg.train.seed if seed is None else seed, dtype)
        enc, d = cfg.encoder, cfg.encoder.d_model
        init_encoder(init, enc, cfg.synth.feat_dim)
        if cfg.laf.mode != "none":
            init_laf(init, cfg.laf, len(tap_layers(enc)), d, cfg.synth.accents)
        if cfg.laf.mode != "none" and cfg.fusion.mode != "none":
            init_fusion(init, d)
        init_ctc_head(init, d, cfg.synth.vocab_size)
        for direction in ("l2r", "r2l"):
            init_attention_decoder(init, f"decoder.{direction}", d, cfg.synth.vocab_size, cfg.decoder.layers,
                                   cfg.decoder.ffn_mult, cfg.decoder.max_len)
        return cls(cfg, params)

    @property
    def has_aid(self) -> bool:
        return self.cfg.laf.mode != "none"

    @property
    def has_fusion(self) -> bool:
        return self.has_aid and self.cfg.fusion.mode != "none"

    def astype(self, dtype) -> "Model":
        return Model(self.cfg, self.params.astype(dtype))

    def forward(self, feats, lengths, chunk: int | None = None) -> ForwardOutput:
        """Padded (B, T, F) features -> every head's output.

        ``chunk`` (encoder-resolution frames) restricts attention to the
        current and earlier chunks; None means full context.
        """
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        p, cfg = self.params, self.cfg
        taps = encode(feats, lengths, p, cfg.encoder, chunk)
        accent = None
        o_att = taps.final
        if self.has_aid:
            accent = aid_decode(layer_adapt(taps, p, cfg.laf), taps.lengths, p)
        if self.has_fusion:
            t = o_att.shape[1]
            mask = key_mask(taps.lengths, t)
            if chunk is not None and chunk < t:
                mask = mask & build_chunk_mask(t, chunk).matrix[None, None]
            o_att = cross_attention(accent.embedding, taps.final, p, cfg.fusion, mask)
        return ForwardOutput(taps, accent, o_att, ctc_head(o_att, p), taps.lengths)
