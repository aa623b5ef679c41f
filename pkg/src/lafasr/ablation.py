"""Toy-scale ablations: LAF on/off, sum vs concat, cross vs self attention, probes, streaming."""

from __future__ import annotations

import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import Config
from .corpus import load_split
from .encoder import encode, tap_layers
from .laf import AccentResult, aid_decode, aid_loss, init_laf, utterance_posterior
from .metrics import EvalReport, evaluate
from .model import Model
from .params import Init, ModelParams
from .training import Adam, Dataset, batch_indices, lr_at, save_checkpoint, train_loop

log = logging.getLogger(__name__)

VARIANTS = {
    "A1": ("w/o LAF+AID", {"laf.mode": "none"}),
    "A2": ("LAF weighted sum", {"laf.mode": "weighted_sum"}),
    "A3": ("w/o cross-attention", {"fusion.mode": "none"}),
    "A4": ("self-attention fusion", {"fusion.mode": "self"}),
    "Q1": ("concat+cross (stream)", {}),
    "Q2": ("concat+cross (non-stream)", {}),
}
STREAM_VARIANTS = {"Q1": "Q2"}  # evaluated from another variant's model


def variant_config(base: Config, variant: str, seed: int) -> Config:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    cfg = base.copy()
    for k, v in VARIANTS[variant][1].items():
        cfg.set(k, v)
    cfg.train.seed = seed
    return cfg


@dataclass
class VariantRow:
    variant: str
    seed: int
    report: EvalReport | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.report is None

    @property
    def cer(self) -> float:
        return float("nan") if self.report is None else self.report.total_cer

    @property
    def aid_accuracy(self) -> float | None:
        return None if self.report is None else self.report.aid_accuracy


@dataclass
class TrendCheck:
    name: str
    lhs: float
    rhs: float
    relation: str  # "<" or "<=" or ">="
    margin: float
    passed: bool


@dataclass
class AblationResult:
    rows: list[VariantRow]
    probes: dict[int, float] = field(default_factory=dict)
    trends: list[TrendCheck] = field(default_factory=list)

    def row(self, variant: str, seed: int | None = None) -> VariantRow:
        for r in self.rows:
            if r.variant == variant and (seed is None or r.seed == seed):
                return r
        raise KeyError(variant)


# --------------------------------------------------------------------------
# single-tap probes
# --------------------------------------------------------------------------


def collect_taps(model: Model, data: Dataset, layer: int, batch_size: int = 32) -> list[np.ndarray]:
    """Frozen-encoder output of one block for every utterance, (T', d) each."""
    layers = tap_layers(model.cfg.encoder)
    if layer not in layers:
        raise nc.ConfigurationError(f"layer {layer} is not tapped (taps: {layers})")
    dtype = next(iter(model.params.values())).dtype
    out = []
    with nc.no_grad():
        for start in range(0, len(data), batch_size):
            b = data.batch(range(start, min(start + batch_size, len(data))))
            taps = encode(nc.Tensor(b.feats, dtype=dtype), b.lengths, model.params, model.cfg.encoder)
            h = taps.tap(layer).data
            out.extend(h[j, : taps.lengths[j]].copy() for j in range(h.shape[0]))
    return out


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([s.shape[0] for s in seqs])
    x = np.zeros((len(seqs), int(lengths.max()), seqs[0].shape[1]), dtype=seqs[0].dtype)
    for j, s in enumerate(seqs):
        x[j, : s.shape[0]] = s
    return x, lengths


def _probe_forward(p: ModelParams, x: np.ndarray, lengths) -> AccentResult:
    fused = nc.Tensor(x[:, None], dtype=x.dtype)
    return aid_decode(fused, lengths, p)


def train_probe(model: Model, train: Dataset, test: Dataset, layer: int, steps: int, seed: int = 0) -> float:
    """Fit a fresh single-tap accent head on a frozen encoder; returns test utterance accuracy."""
    cfg = model.cfg.copy()
    cfg.laf.mode = "probe"
    cfg.laf.probe_layer = layer
    tr, te = collect_taps(model, train, layer), collect_taps(model, test, layer)
    dtype = tr[0].dtype
    params = ModelParams()
    init_laf(Init(params, seed, dtype), cfg.laf, 1, cfg.encoder.d_model, cfg.synth.accents, head_only=True)
    tcfg = cfg.train
    opt = Adam(params, tcfg)
    labels = np.asarray(train.accents)
    for step in range(steps):
        idx = batch_indices(len(tr), tcfg.batch_size, step, seed)
        x, lengths = _pad([tr[i] for i in idx])
        loss = aid_loss(_probe_forward(params, x, lengths), labels[idx])
        nc.backward(loss)
        opt.clip(tcfg.clip)
        opt.update(lr_at(opt.step_count + 1, tcfg))
        opt.zero_grad()
    correct = 0
    with nc.no_grad():
        for start in range(0, len(te), 64):
            x, lengths = _pad(te[start:start + 64])
            post = utterance_posterior(_probe_forward(params, x, lengths).frame_logits.data, lengths)
            correct += int(np.sum(post.argmax(axis=-1) == np.asarray(test.accents[start:start + 64])))
    return correct / len(te)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


def train_variant(cfg: Config, train: Dataset, steps: int, out_dir: Path | None = None) -> Model:
    model = Model.create(cfg)
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train.log", "w", encoding="utf-8")
    try:
        train_loop(model, train, cfg, steps, log_file)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.qfn")
    return model


def run_ablation(cfg: Config, data_dir: str | Path, out_dir: str | Path | None = None, seeds: int | None = None,
                 variants=None, probe_layers=None) -> AblationResult:
    """Train every variant with the same data, seed and step budget, then evaluate on the test split.

    A variant that raises is recorded as failed; the others still run.
    """
    acfg = cfg.ablation
    seeds = seeds or acfg.seeds
    variants = list(variants or acfg.variants)
    probe_layers = list(acfg.probe_layers if probe_layers is None else probe_layers)
    out = Path(out_dir) if out_dir is not None else None
    train, test = load_split(data_dir, "train", cfg), load_split(data_dir, "test", cfg)
    rows: list[VariantRow] = []
    probes: dict[int, list[float]] = {}
    for s in range(seeds):
        seed = cfg.train.seed + s
        models: dict[str, Model | None] = {}
        for v in variants:
            src = STREAM_VARIANTS.get(v, v)
            row = VariantRow(v, seed)
            try:
                if src not in models:
                    models[src] = None
                    vdir = None if out is None else out / (src if seeds == 1 else f"{src}-seed{seed}")
                    models[src] = train_variant(variant_config(cfg, src, seed), train, acfg.steps, vdir)
                model = models[src]
                if model is None:
                    raise RuntimeError(f"{src} failed to train")
                chunk = acfg.stream_chunk if v in STREAM_VARIANTS else None
                row.report = evaluate(test, model, chunk=chunk)
            except Exception as e:  # noqa: BLE001 - a failed variant must not stop the others
                row.error = f"{type(e).__name__}: {e}"
                log.warning("variant %s (seed %d) failed: %s", v, seed, row.error)
                log.debug(traceback.format_exc())
            rows.append(row)
        base = models.get("Q2")
        if base is not None and base.has_aid:
            for layer in probe_layers:
                acc = train_probe(base, train, test, layer, acfg.probe_steps, seed)
                probes.setdefault(layer, []).append(acc)
    result = AblationResult(rows, {k: float(np.mean(v)) for k, v in probes.items()})
    result.trends = check_trends(result, acfg.margin, seeds)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.tsv").write_text(format_table(result), encoding="utf-8")
    return result


def _compare(lhs: float, rhs: float, relation: str, margin: float) -> bool:
    if np.isnan(lhs) or np.isnan(rhs):
        return False
    if relation == "<":
        return lhs + margin < rhs
    if relation == "<=":
        return lhs <= rhs + margin
    return lhs + margin >= rhs


def check_trends(result: AblationResult, margin: float = 0.0, seeds: int = 1) -> list[TrendCheck]:
    """Directional checks; with several seeds each trend needs a strict majority of seeds."""
    specs = [("CER(Q2) < CER(A1)", "Q2", "A1", "<", "cer"),
             ("CER(Q2) <= CER(A3)", "Q2", "A3", "<=", "cer"),
             ("ACC(Q2) >= ACC(A2)", "Q2", "A2", ">=", "acc")]
    present = {r.variant for r in result.rows}
    checks = []
    for name, a, b, rel, metric in specs:
        if a not in present or b not in present:
            continue
        wins, lhs_all, rhs_all = 0, [], []
        seed_list = sorted({r.seed for r in result.rows})
        for seed in seed_list:
            ra, rb = result.row(a, seed), result.row(b, seed)
            if metric == "cer":
                lhs, rhs = ra.cer, rb.cer
            else:
                lhs = float("nan") if ra.aid_accuracy is None else ra.aid_accuracy
                rhs = float("nan") if rb.aid_accuracy is None else rb.aid_accuracy
            lhs_all.append(lhs)
            rhs_all.append(rhs)
            wins += _compare(lhs, rhs, rel, margin)
        checks.append(TrendCheck(name, float(np.mean(lhs_all)), float(np.mean(rhs_all)), rel, margin,
                                 wins * 2 > len(seed_list)))
    if 6 in result.probes and 8 in result.probes:
        lhs, rhs = result.probes[8], result.probes[6]
        checks.append(TrendCheck("ACC(probe L8) >= ACC(probe L6)", lhs, rhs, ">=", margin,
                                 _compare(lhs, rhs, ">=", margin)))
    return checks


def format_table(result: AblationResult) -> str:
    reports = [r.report for r in result.rows if r.report is not None]
    accents = sorted({a for rep in reports for a in rep.per_accent})
    header = ["ID", "seed", "Model", "AID ACC(%)", "Total"] + [f"accent{a}" for a in accents] + ["N", "S", "I", "D"]
    lines = ["\t".join(header)]
    for r in result.rows:
        name = VARIANTS[r.variant][0]
        if r.report is None:
            cells = ["failed"] * (len(header) - 3)
        else:
            cells = r.report.cells()
        lines.append("\t".join([r.variant, str(r.seed), name] + cells))
    if result.probes:
        lines.append("")
        lines.append("probe_layer\tAID ACC(%)")
        lines.extend(f"L{k}\t{100 * v:.2f}" for k, v in sorted(result.probes.items()))
    if result.trends:
        lines.append("")
        lines.append("trend\tlhs\trhs\tmargin\tresult")
        lines.extend(f"{t.name}\t{t.lhs:.4f}\t{t.rhs:.4f}\t{t.margin:g}\t{'pass' if t.passed else 'FAIL'}"
                     for t in result.trends)
    return "\n".join(lines) + "\n"
