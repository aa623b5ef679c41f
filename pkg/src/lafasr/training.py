"""Multi-task loss, dynamic chunk sampling, optimisation and checkpointing."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import numcore as nc
from .checkpoint import check_schema, read_container, write_container
from .config import Config, TrainConfig, dump_config, parse_config
from .decoder import attention_decoder, batch_ctc_loss, decoder_ce, decoder_inputs
from .features import AugmentPolicy, CmvnStats, spec_augment
from .laf import aid_loss
from .model import ForwardOutput, Model
from .numcore import Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, utt_ids):
        super().__init__(f"non-finite loss in batch with utterances: {', '.join(map(str, utt_ids))}")
        self.utt_ids = list(utt_ids)


@dataclass
class LossWeights:
    ctc: float = 0.3
    aid: float = 0.3

    def __post_init__(self):
        if self.ctc < 0 or self.aid < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Batch:
    ids: list[str]
    feats: np.ndarray  # (B, T, F) padded
    lengths: np.ndarray
    transcripts: list[list[int]]
    accents: np.ndarray


def combine(l_att: float, l_ctc: float, l_aid: float, weights: LossWeights) -> float:
    return l_att + weights.ctc * l_ctc + weights.aid * l_aid


def total_loss(out: ForwardOutput, model: Model, transcripts, accents, weights: LossWeights,
               utt_ids=None) -> tuple[Tensor, dict[str, float]]:
    """L_all = L_att + w_ctc * L_ctc + w_aid * L_aid, plus the per-term breakdown."""
    p, dcfg = model.params, model.cfg.decoder
    atts = []
    for direction in ("l2r", "r2l"):
        ins, outs, lens = decoder_inputs(transcripts, direction)
        logits = attention_decoder(out.o_att, out.lengths, ins, p, f"decoder.{direction}", dcfg.heads, dcfg.layers)
        atts.append(decoder_ce(logits, outs, lens))
    l_att = (atts[0] + atts[1]) * 0.5
    total = l_att
    l_ctc, _ = batch_ctc_loss(out.log_probs, transcripts, out.lengths, utt_ids)
    if l_ctc is not None:
        total = total + l_ctc * weights.ctc
    l_aid = None
    if out.accent is not None:
        l_aid = aid_loss(out.accent, accents)
        total = total + l_aid * weights.aid
    parts = {
        "L_all": total.item(),
        "L_att": l_att.item(),
        "L_ctc": 0.0 if l_ctc is None else l_ctc.item(),
        "L_aid": 0.0 if l_aid is None else l_aid.item(),
    }
    return total, parts


def sample_chunk_size(t_len: int, rng: np.random.Generator) -> int:
    """Uniform on {1, ..., t_len}."""
    return int(rng.integers(1, max(int(t_len), 1) + 1))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then inverse square-root decay (step is 1-based)."""
    step = max(step, 1)
    return cfg.lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        if cfg.warmup < 1:
            raise ValueError("warmup must be >= 1")
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def clip(self, max_norm: float) -> float:
        sq = sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for t in self.params.values() if t.grad is not None)
        norm = math.sqrt(sq)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-6)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad = t.grad * scale
        return norm

    def update(self, lr: float) -> None:
        self.step_count += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for k, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad.astype(t.data.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data = t.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array(float(self.step_count))}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, entries) -> None:
        self.step_count = int(entries["adam.step"])
        for k in self.params:
            self.m[k] = entries[f"adam.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = entries[f"adam.v.{k}"].astype(self.v[k].dtype)


def pick_chunk(t_len: int, cfg: TrainConfig, rng: np.random.Generator) -> int | None:
    if cfg.chunk_policy == "full":
        return None
    if cfg.chunk_policy == "fixed":
        return min(cfg.chunk_size, t_len)
    if cfg.chunk_policy == "dynamic":
        c = sample_chunk_size(t_len, rng)
        return None if c >= t_len else c
    raise ValueError(f"unknown chunk policy {cfg.chunk_policy!r}")


def train_step(batch: Batch, model: Model, optimizer: Adam, cfg: TrainConfig, rng: np.random.Generator,
               weights: LossWeights | None = None) -> dict[str, float]:
    """One optimisation step; gradients are zeroed on exit."""
    weights = weights or LossWeights(cfg.lambda_ctc, cfg.lambda_aid)
    t_enc = int((batch.lengths // 4).max())
    chunk = pick_chunk(t_enc, cfg, rng)
    dtype = next(iter(model.params.values())).dtype
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = model.forward(Tensor(batch.feats, dtype=dtype), batch.lengths, chunk)
        loss, parts = total_loss(out, model, batch.transcripts, batch.accents, weights, batch.ids)
    if not np.isfinite(parts["L_all"]):
        optimizer.zero_grad()
        raise NonFiniteLossError(batch.ids)
    nc.backward(loss)
    parts["grad_norm"] = optimizer.clip(cfg.clip)
    lr = lr_at(optimizer.step_count + 1, cfg)
    optimizer.update(lr)
    optimizer.zero_grad()
    parts["lr"] = lr
    parts["C"] = t_enc if chunk is None else chunk
    return parts


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    ids: list[str]
    feats: list[np.ndarray]
    transcripts: list[list[int]]
    accents: list[int]
    skipped: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def batch(self, index, augment: AugmentPolicy | None = None, seed: int = 0) -> Batch:
        index = list(index)
        feats = [self.feats[i] for i in index]
        if augment is not None:
            feats = [spec_augment(f, AugmentPolicy(augment.num_freq_masks, augment.max_freq_width,
                                                   augment.num_time_masks, augment.max_time_width,
                                                   seed * 100003 + j)) for j, f in enumerate(feats)]
        lengths = np.array([f.shape[0] for f in feats])
        out = np.zeros((len(feats), int(lengths.max()), feats[0].shape[1]), dtype=np.float32)
        for j, f in enumerate(feats):
            out[j, : f.shape[0]] = f
        return Batch([self.ids[i] for i in index], out, lengths, [self.transcripts[i] for i in index],
                     np.array([self.accents[i] for i in index]))


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Deterministic indices for 0-based ``step``: epoch-wise shuffles seeded by (seed, epoch)."""
    per_epoch = max(n // batch_size, 1)
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return order[k * batch_size:(k + 1) * batch_size]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


CMVN_KEYS = ("cmvn.mean", "cmvn.var")


def save_checkpoint(model: Model, path: str | Path, cmvn: CmvnStats | None = None) -> None:
    """Write parameters (plus optional CMVN stats) to ``path`` and the config to ``path.conf``."""
    entries = dict(model.params.state())
    if cmvn is not None:
        entries["cmvn.mean"] = cmvn.mean
        entries["cmvn.var"] = cmvn.var
    write_container(path, entries)
    Path(str(path) + ".conf").write_text(dump_config(model.cfg), encoding="utf-8")


def load_checkpoint(path: str | Path, cfg: Config | None = None) -> tuple[Model, CmvnStats | None]:
    """Rebuild the model described by ``path.conf`` (or ``cfg``) and fill in saved parameters."""
    if cfg is None:
        cfg = parse_config(Path(str(path) + ".conf").read_text(encoding="utf-8"))
    entries = read_container(path)
    model = Model.create(cfg, dtype=np.float32)
    expected = {k: t.shape for k, t in model.params.items()}
    check_schema(entries, expected, optional=CMVN_KEYS)
    for k, t in model.params.items():
        t.data = entries[k].copy()
    cmvn = None
    if "cmvn.mean" in entries:
        cmvn = CmvnStats(entries["cmvn.mean"].astype(np.float64), entries["cmvn.var"].astype(np.float64), 1)
    return model, cmvn


def save_cmvn(path: str | Path, stats: CmvnStats) -> None:
    write_container(path, {"cmvn.mean": stats.mean, "cmvn.var": stats.var})


def load_cmvn(path: str | Path) -> CmvnStats:
    entries = read_container(path)
    check_schema(entries, {"cmvn.mean": entries.get("cmvn.mean", np.zeros(0)).shape,
                           "cmvn.var": entries.get("cmvn.var", np.zeros(0)).shape})
    return CmvnStats(entries["cmvn.mean"].astype(np.float64), entries["cmvn.var"].astype(np.float64), 1)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


LOG_FIELDS = ("L_all", "L_att", "L_ctc", "L_aid", "grad_norm", "lr", "C")


def format_log_line(step: int, metrics: dict[str, float]) -> str:
    vals = [f"{metrics[k]:.6f}" if k != "C" else str(int(metrics[k])) for k in LOG_FIELDS]
    return "\t".join([str(step)] + vals)


def train_loop(model: Model, data: Dataset, cfg: Config, steps: int | None = None, log_file: TextIO | None = None,
               optimizer: Adam | None = None, callback: Callable[[int, dict], None] | None = None) -> list[dict]:
    tcfg = cfg.train
    optimizer = optimizer or Adam(model.params, tcfg)
    steps = tcfg.max_steps if steps is None else steps
    policy = AugmentPolicy.from_config(cfg.features, 0) if cfg.features.spec_augment else None
    history = []
    start = optimizer.step_count
    for step in range(start, start + steps):
        idx = batch_indices(len(data), tcfg.batch_size, step, tcfg.seed)
        batch = data.batch(idx, policy, seed=tcfg.seed * 1_000_003 + step)
        rng = np.random.default_rng([tcfg.seed, step, 7])
        metrics = train_step(batch, model, optimizer, tcfg, rng)
        history.append(metrics)
        if log_file is not None and (step + 1) % max(tcfg.log_every, 1) == 0:
            log_file.write(format_log_line(step + 1, metrics) + "\n")
            log_file.flush()
        if callback is not None:
            callback(step + 1, metrics)
    return history
