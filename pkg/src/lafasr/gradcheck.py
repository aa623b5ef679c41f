"""Finite-difference verification of the full multi-task gradient in 64-bit."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import Config
from .model import Model
from .training import LossWeights, total_loss

TOY_OVERRIDES = {
    "synth.vocab_size": 5,
    "synth.accents": 3,
    "synth.feat_dim": 12,
    "encoder.d_model": 32,
    "encoder.heads": 4,
    "encoder.num_blocks": 4,
    "encoder.sub2_after": 1,
    "encoder.num_taps": 3,
    "encoder.ffn_mult": 2,
    "encoder.conv_kernel": 5,
    "encoder.max_len": 16,
    "laf.channels": 2,
    "decoder.layers": 1,
    "decoder.max_len": 8,
}


def toy_config() -> Config:
    """d=32, four blocks, three taps (every block after the second subsampling)."""
    cfg = Config()
    for k, v in TOY_OVERRIDES.items():
        cfg.set(k, v)
    return cfg


@dataclass
class GradCheck:
    name: str
    probe: str  # "direction" or "entry[i]"
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


# Central differences at eps=1e-5 carry ~1e-10 of round-off.  Derivatives below
# this floor (e.g. key biases, which softmax ignores) are therefore judged on
# absolute error: rel < 1e-4 means |a - n| < 1e-9.
ABS_FLOOR = 1e-5


def relative_error(a: float, b: float, floor: float = ABS_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def param_group(name: str) -> str:
    """Coarse group used in reports: ``encoder.block2``, ``laf.conv1``, ``decoder.l2r`` ..."""
    parts = name.split(".")
    return ".".join(parts[:2]) if len(parts) > 2 else parts[0]


def _toy_batch(cfg: Config, t_enc: int, seed: int):
    rng = np.random.default_rng(seed)
    lengths = np.array([4 * t_enc, 4 * (t_enc - 1)])
    feats = rng.normal(size=(2, 4 * t_enc, cfg.synth.feat_dim))
    feats[1, lengths[1]:] = 0.0
    transcripts = [[1, 2, 2], [3, 1]]
    accents = np.array([0, cfg.synth.accents - 1])
    return feats, lengths, transcripts, accents


def run_gradcheck(cfg: Config | None = None, t_enc: int = 6, chunk: int | None = 3, seed: int = 0,
                  eps: float = 1e-5, entries: int = 3) -> list[GradCheck]:
    """Compare analytic and central-difference derivatives of L_all for every parameter tensor.

    Each tensor is probed along one random unit direction plus ``entries``
    individual coordinates (largest analytic gradient first).
    """
    cfg = (cfg or toy_config()).copy()
    cfg.features.spec_augment = False
    weights = LossWeights(cfg.train.lambda_ctc, cfg.train.lambda_aid)
    with nc.precision(np.float64):
        model = Model.create(cfg, seed=seed, dtype=np.float64)
        feats, lengths, transcripts, accents = _toy_batch(cfg, t_enc, seed)
        x = nc.Tensor(feats)

        def loss_value() -> float:
            with nc.no_grad():
                out = model.forward(x, lengths, chunk)
                return total_loss(out, model, transcripts, accents, weights)[0].item()

        out = model.forward(x, lengths, chunk)
        loss, _ = total_loss(out, model, transcripts, accents, weights)
        nc.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in model.params.items()}
        model.params.zero_grad()

        rng = np.random.default_rng([seed, 1])
        results = []
        for name, t in model.params.items():
            g = grads[name]
            base = t.data.copy()
            u = rng.normal(size=base.shape)
            u /= np.linalg.norm(u)
            probes = [("direction", u)]
            for i in np.argsort(-np.abs(g).ravel(), kind="stable")[:entries]:
                e = np.zeros(base.size)
                e[i] = 1.0
                probes.append((f"entry[{int(i)}]", e.reshape(base.shape)))
            for label, v in probes:
                t.data = base + eps * v
                up = loss_value()
                t.data = base - eps * v
                down = loss_value()
                t.data = base
                results.append(GradCheck(name, label, float(np.sum(g * v)), (up - down) / (2 * eps)))
    return results


def summarize(results: list[GradCheck]) -> "OrderedDict[str, float]":
    """Max relative error per parameter group, in parameter order."""
    out: "OrderedDict[str, float]" = OrderedDict()
    for r in results:
        grp = param_group(r.name)
        out[grp] = max(out.get(grp, 0.0), r.rel_error)
    return out


def format_report(results: list[GradCheck], tol: float = 1e-4) -> str:
    lines = ["group\tmax_rel_error\tstatus"]
    for grp, err in summarize(results).items():
        lines.append(f"{grp}\t{err:.3e}\t{'ok' if err < tol else 'FAIL'}")
    worst = max(results, key=lambda r: r.rel_error)
    lines.append(f"# worst: {worst.name} {worst.probe} analytic={worst.analytic:.10g} "
                 f"numeric={worst.numeric:.10g} rel={worst.rel_error:.3e}")
    return "\n".join(lines)
