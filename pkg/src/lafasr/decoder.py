"""Output heads and decoding: chunk masks, CTC, attention decoder, search."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .layers import ffn, init_ffn, init_mha, key_mask, mha
from .numcore import ConfigurationError, ContractError, Tensor
from .params import Init, ModelParams

BLANK = 0
SENTINEL = 0  # start/end symbol of the attention decoder vocabulary


class InfeasibleTargetError(ValueError):
    """The CTC target cannot be aligned to the available frames."""


@dataclass
class ChunkMask:
    size: int
    matrix: np.ndarray


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float = 0.0
    emitted_at: list[int] = field(default_factory=list)


def build_chunk_mask(t_len: int, chunk: int, full_context: bool = False) -> ChunkMask:
    """Row i may read columns j < (i // chunk + 1) * chunk."""
    if full_context:
        return ChunkMask(t_len, np.ones((t_len, t_len), dtype=bool))
    if not 1 <= chunk <= t_len:
        raise ConfigurationError(f"chunk size {chunk} outside [1, {t_len}]")
    limit = (np.arange(t_len) // chunk + 1) * chunk
    return ChunkMask(chunk, np.arange(t_len)[None, :] < limit[:, None])


# --------------------------------------------------------------------------
# CTC
# --------------------------------------------------------------------------


def init_ctc_head(init: Init, d: int, vocab: int) -> None:
    init.linear("ctc", d, vocab + 1)


def ctc_head(o_att: Tensor, p: ModelParams) -> Tensor:
    """Log-probabilities over blank (index 0) and the fine-grained vocabulary."""
    return nc.log_softmax(nc.linear(o_att, p["ctc.w"], p["ctc.b"]), axis=-1)


def min_frames(target) -> int:
    """Fewest frames able to emit ``target`` (one blank between each repeat)."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _extend(target) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def _ctc_alpha_beta(lp: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Total log-probability and d(log p)/d(lp) for one utterance (lp: T x V)."""
    t_len = lp.shape[0]
    ext = _extend(target)
    s_len = len(ext)
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    neg = -np.inf
    emit = lp[:, ext]  # T x S
    alpha = np.full((t_len, s_len), neg, dtype=lp.dtype)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta = np.full((t_len, s_len), neg, dtype=lp.dtype)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    ends = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    logp = float(ends)
    if not np.isfinite(logp):
        raise InfeasibleTargetError(f"target of length {len(target)} unalignable in {t_len} frames")
    occ = np.exp(alpha + beta - logp)  # T x S posterior occupancy
    grad = np.zeros_like(lp)
    np.add.at(grad.T, ext, occ.T)
    return logp, grad


def ctc_loss(log_probs: Tensor, target, length: int | None = None) -> Tensor:
    """Negative log of the summed probability of every blank-augmented alignment.

    ``log_probs`` is (T, V+1); only the first ``length`` frames are used.
    """
    if log_probs.ndim != 2:
        raise nc.DimensionError(f"ctc_loss expects (T, V+1) log-probs, got {log_probs.shape}")
    t_len = log_probs.shape[0] if length is None else length
    target = [int(x) for x in target]
    if min_frames(target) > t_len:
        raise InfeasibleTargetError(f"target needs {min_frames(target)} frames, only {t_len} available")
    lp = log_probs.data[:t_len]
    if not target:
        logp = float(lp[:, BLANK].sum())
        grad = np.zeros_like(lp)
        grad[:, BLANK] = 1.0
    else:
        logp, grad = _ctc_alpha_beta(lp, target)

    def bw(g):
        full = np.zeros_like(log_probs.data)
        full[:t_len] = -g * grad
        return (full,)

    return nc._node(np.asarray(-logp, dtype=log_probs.dtype), (log_probs,), bw)


def batch_ctc_loss(log_probs: Tensor, targets, lengths, utt_ids=None) -> tuple[Tensor | None, list[int]]:
    """Mean CTC loss over the feasible utterances of a padded batch (B, T, V+1).

    Infeasible targets are dropped with a warning; their batch indices are returned.
    """
    losses, dropped = [], []
    for b, (tgt, n) in enumerate(zip(targets, lengths)):
        try:
            losses.append(ctc_loss(log_probs[b], tgt, int(n)))
        except InfeasibleTargetError as e:
            uid = utt_ids[b] if utt_ids is not None else b
            warnings.warn(f"dropping utterance {uid} from CTC loss: {e}", stacklevel=2)
            dropped.append(b)
    if not losses:
        return None, dropped
    return nc.mean(nc.stack(losses)), dropped


def greedy_ctc_decode(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.asarray(log_probs).argmax(axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def ctc_prefix_beam_search(log_probs: np.ndarray, beam: int) -> list[Hypothesis]:
    """n-best label sequences by CTC prefix beam search (score = log-probability)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    neg = -np.inf
    beams: dict[tuple, tuple[float, float]] = {(): (0.0, neg)}  # prefix -> (log p blank-ending, log p symbol-ending)
    for t in range(lp.shape[0]):
        row = lp[t]
        cands = np.argsort(-row)[: max(beam, 1)]
        nxt: dict[tuple, list[float]] = {}

        def acc(prefix, pb, pnb):
            cur = nxt.setdefault(prefix, [neg, neg])
            cur[0] = np.logaddexp(cur[0], pb)
            cur[1] = np.logaddexp(cur[1], pnb)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            for k in cands:
                k = int(k)
                p = row[k]
                if k == BLANK:
                    acc(prefix, total + p, neg)
                    continue
                last = prefix[-1] if prefix else None
                ext = prefix + (k,)
                if k == last:
                    acc(ext, neg, pb + p)
                    acc(prefix, neg, pnb + p)
                else:
                    acc(ext, neg, total + p)
        ranked = sorted(((k, v) for k, v in nxt.items() if np.logaddexp(*v) > neg),
                        key=lambda kv: -np.logaddexp(*kv[1]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam]}
    hyps = [Hypothesis(list(k), float(np.logaddexp(*v))) for k, v in beams.items()]
    hyps.sort(key=lambda h: -h.score)
    return hyps


# --------------------------------------------------------------------------
# attention decoder
# --------------------------------------------------------------------------


def init_attention_decoder(init: Init, prefix: str, d: int, vocab: int, layers: int, mult: int, max_len: int) -> None:
    init.normal(f"{prefix}.embed", (vocab + 1, d), 1.0 / math.sqrt(d))
    init.normal(f"{prefix}.pos", (max_len, d), 0.02)
    for i in range(layers):
        lp = f"{prefix}.layer{i}"
        init.norm(f"{lp}.norm1", d)
        init_mha(init, f"{lp}.self", d)
        init.norm(f"{lp}.norm2", d)
        init_mha(init, f"{lp}.src", d)
        init_ffn(init, f"{lp}.ffn", d, mult)
    init.norm(f"{prefix}.norm", d)
    init.linear(f"{prefix}.out", d, vocab + 1)


def decoder_inputs(targets, direction: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs/outputs framed by the sentinel, padded with it.

    Returns (inputs (B, L+1), outputs (B, L+1), lengths) with L = longest target.
    """
    if direction not in ("l2r", "r2l"):
        raise ConfigurationError(f"unknown decoder direction {direction!r}")
    seqs = []
    for tgt in targets:
        tgt = [int(x) for x in tgt]
        if not tgt:
            raise ContractError("attention decoder needs a non-empty target")
        seqs.append(tgt[::-1] if direction == "r2l" else tgt)
    n = max(len(s) for s in seqs) + 1
    ins = np.full((len(seqs), n), SENTINEL, dtype=np.int64)
    outs = np.full((len(seqs), n), SENTINEL, dtype=np.int64)
    lens = np.array([len(s) + 1 for s in seqs])
    for b, s in enumerate(seqs):
        ins[b, 1: len(s) + 1] = s
        outs[b, : len(s)] = s
    return ins, outs, lens


def attention_decoder(o_att: Tensor, mem_lengths, tokens: np.ndarray, p: ModelParams, prefix: str,
                      heads: int, layers: int) -> Tensor:
    """Logits (B, L, V+1) for decoder input ``tokens`` (B, L) attending to ``o_att``.

    Self-attention is causal in sequence order; the caller reverses targets
    for the right-to-left direction.
    """
    tokens = np.asarray(tokens)
    _, length = tokens.shape
    if length > p[f"{prefix}.pos"].shape[0]:
        raise ContractError(f"decoder input of length {length} exceeds max_len")
    x = nc.getitem(p[f"{prefix}.embed"], tokens) * math.sqrt(o_att.shape[-1])
    x = x + p[f"{prefix}.pos"][:length]
    causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
    mem_mask = key_mask(mem_lengths, o_att.shape[1])
    for i in range(layers):
        lp = f"{prefix}.layer{i}"
        h = nc.layer_norm(x, p[f"{lp}.norm1.g"], p[f"{lp}.norm1.b"])
        x = x + mha(h, h, p, f"{lp}.self", heads, causal)
        h = nc.layer_norm(x, p[f"{lp}.norm2.g"], p[f"{lp}.norm2.b"])
        x = x + mha(h, o_att, p, f"{lp}.src", heads, mem_mask)
        x = x + ffn(x, p, f"{lp}.ffn", act=nc.relu)
    x = nc.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    return nc.linear(x, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])


def decoder_ce(logits: Tensor, outputs: np.ndarray, lengths) -> Tensor:
    """Token-averaged cross entropy over the unpadded decoder positions."""
    valid = np.arange(outputs.shape[1])[None, :] < np.asarray(lengths)[:, None]
    nll = -nc.pick(nc.log_softmax(logits, axis=-1), outputs)
    return nc.tsum(nc.where(valid, nll, 0.0)) * (1.0 / valid.sum())


def sequence_loglik(o_att: Tensor, mem_length: int, hyp, p: ModelParams, prefix: str, direction: str,
                    heads: int, layers: int) -> float:
    """Log-likelihood of ``hyp`` (+ end sentinel) under one decoder direction."""
    tokens = list(hyp)
    seq = tokens[::-1] if direction == "r2l" else tokens
    ins = np.array([[SENTINEL] + seq])
    outs = np.array([seq + [SENTINEL]])
    logits = attention_decoder(o_att, [mem_length], ins, p, prefix, heads, layers)
    lp = nc.log_softmax(logits, axis=-1).data[0]
    return float(lp[np.arange(len(seq) + 1), outs[0]].sum())


def rescore(hyps: list[Hypothesis], o_att: Tensor, mem_length: int, p: ModelParams, heads: int, layers: int,
            ctc_weight: float = 0.3) -> Hypothesis:
    """Pick the hypothesis maximising the CTC/bidirectional-attention score blend.

    Ties go to the shorter hypothesis, then the lexicographically smaller one.
    """
    if not hyps:
        raise ContractError("rescore needs at least one hypothesis")
    if len(hyps) == 1:
        return hyps[0]
    scored = []
    with nc.no_grad():
        for h in hyps:
            l2r = sequence_loglik(o_att, mem_length, h.tokens, p, "decoder.l2r", "l2r", heads, layers)
            r2l = sequence_loglik(o_att, mem_length, h.tokens, p, "decoder.r2l", "r2l", heads, layers)
            total = ctc_weight * h.score + (1 - ctc_weight) * (0.5 * l2r + 0.5 * r2l)
            scored.append((total, h))
    best = min(scored, key=lambda sh: (-sh[0], len(sh[1].tokens), sh[1].tokens))
    return Hypothesis(list(best[1].tokens), best[0], list(best[1].emitted_at))
