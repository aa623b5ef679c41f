"""Chunk-by-chunk decoding with cached encoder, LAF and fusion state."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .decoder import BLANK, Hypothesis, ctc_head
from .encoder import FACTOR, EncoderStream, EncoderTaps
from .fusion import cross_attention
from .laf import aid_decode, layer_adapt
from .model import Model
from .numcore import Tensor


class StreamingSession:
    """Owns the caches of one utterance; parameters are shared read-only.

    ``feed`` accepts any number of input frames, processes every complete
    group of 4 and returns the tokens newly emitted by greedy CTC.  Emitted
    tokens are never revised.
    """

    def __init__(self, model: Model):
        self.model = model
        self.encoder = EncoderStream(model.params, model.cfg.encoder)
        self.cache: dict = {}
        self.pending = np.zeros((0, model.cfg.synth.feat_dim), dtype=np.float32)
        self.log_probs: list[np.ndarray] = []
        self.frame_logits: list[np.ndarray] = []
        self.tokens: list[int] = []
        self.emitted_at: list[int] = []
        self.score = 0.0
        self.chunks = 0
        self._prev = None

    def feed(self, frames: np.ndarray) -> list[int]:
        frames = np.asarray(frames, dtype=np.float32)
        buf = np.concatenate([self.pending, frames.reshape(-1, self.pending.shape[1])])
        usable = buf.shape[0] // FACTOR * FACTOR
        self.pending = buf[usable:]
        if usable == 0:
            return []
        chunk_idx = self.chunks
        self.chunks += 1
        dtype = next(iter(self.model.params.values())).dtype
        with nc.no_grad():
            lp, logits = self._forward(Tensor(buf[None, :usable], dtype=dtype))
        self.log_probs.append(lp)
        if logits is not None:
            self.frame_logits.append(logits)
        new = []
        for k, row in zip(lp.argmax(axis=-1).tolist(), lp):
            self.score += float(row[k])
            if k != self._prev and k != BLANK:
                new.append(k)
                self.emitted_at.append(chunk_idx)
            self._prev = k
        self.tokens.extend(new)
        return new

    def _forward(self, feats: Tensor):
        model, p, cfg = self.model, self.model.params, self.model.cfg
        taps_list = self.encoder.step(feats)
        n = taps_list[-1].shape[1]
        lengths = np.array([n])
        taps = EncoderTaps(taps_list, self.encoder.layers, lengths)
        o_att = taps.final
        logits = None
        if model.has_aid:
            accent = aid_decode(layer_adapt(taps, p, cfg.laf), lengths, p, self.cache)
            logits = accent.frame_logits.data[0]
            if model.has_fusion:
                o_att = cross_attention(accent.embedding, taps.final, p, cfg.fusion, None, self.cache)
        return ctc_head(o_att, p).data[0], logits

    def hypothesis(self) -> Hypothesis:
        return Hypothesis(list(self.tokens), self.score, list(self.emitted_at))

    def all_log_probs(self) -> np.ndarray:
        return np.concatenate(self.log_probs) if self.log_probs else np.zeros((0, 0))

    def all_frame_logits(self) -> np.ndarray | None:
        return np.concatenate(self.frame_logits) if self.frame_logits else None


def stream_decode(features: np.ndarray, chunk: int, model: Model, on_partial=None) -> Hypothesis:
    """Decode (T, F) features ``chunk`` encoder frames (4*chunk input frames) at a time.

    ``on_partial(chunk_idx, tokens_so_far)`` is called after every chunk.
    """
    session = run_stream(features, chunk, model, on_partial)
    return session.hypothesis()


def run_stream(features: np.ndarray, chunk: int, model: Model, on_partial=None) -> StreamingSession:
    if chunk < 1:
        raise nc.ConfigurationError(f"chunk size must be >= 1, got {chunk}")
    session = StreamingSession(model)
    x = np.asarray(features)
    usable = x.shape[0] // FACTOR * FACTOR
    step = chunk * FACTOR
    for k, start in enumerate(range(0, usable, step)):
        session.feed(x[start:min(start + step, usable)])
        if on_partial is not None:
            on_partial(k, list(session.tokens))
    return session
