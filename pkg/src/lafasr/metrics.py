"""Edit distance, CER / AID accuracy aggregation and model evaluation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .decoder import Hypothesis, ctc_prefix_beam_search, greedy_ctc_decode, rescore
from .laf import utterance_posterior
from .model import Model
from .streaming import run_stream
from .training import Dataset


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref, hyp) -> EditCounts:
    """Unit-cost Levenshtein distance with S/I/D counts from one optimal alignment.

    On backtrace, substitution (or match) is preferred over deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(d[n, m]), int(s), ins, dels)


@dataclass
class AccentRow:
    utterances: int = 0
    ref_len: int = 0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    aid_correct: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def cer(self) -> float:
        return self.errors / self.ref_len if self.ref_len else 0.0


@dataclass
class EvalReport:
    per_accent: dict[int, AccentRow] = field(default_factory=dict)
    has_aid: bool = True
    skipped: int = 0

    def add(self, accent: int, counts: EditCounts, ref_len: int, aid_correct: bool | None) -> None:
        row = self.per_accent.setdefault(int(accent), AccentRow())
        row.utterances += 1
        row.ref_len += ref_len
        row.substitutions += counts.substitutions
        row.insertions += counts.insertions
        row.deletions += counts.deletions
        row.aid_correct += bool(aid_correct)

    def _sum(self, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.per_accent.values())

    @property
    def utterances(self) -> int:
        return self._sum("utterances")

    @property
    def ref_len(self) -> int:
        return self._sum("ref_len")

    @property
    def substitutions(self) -> int:
        return self._sum("substitutions")

    @property
    def insertions(self) -> int:
        return self._sum("insertions")

    @property
    def deletions(self) -> int:
        return self._sum("deletions")

    @property
    def total_cer(self) -> float:
        n = self.ref_len
        return (self.substitutions + self.insertions + self.deletions) / n if n else 0.0

    @property
    def aid_accuracy(self) -> float | None:
        if not self.has_aid or not self.utterances:
            return None
        return self._sum("aid_correct") / self.utterances

    def header(self) -> list[str]:
        return ["AID ACC(%)", "Total"] + [f"accent{a}" for a in sorted(self.per_accent)] + ["N", "S", "I", "D"]

    def cells(self) -> list[str]:
        acc = self.aid_accuracy
        vals = ["-" if acc is None else f"{100 * acc:.2f}", f"{100 * self.total_cer:.2f}"]
        vals += [f"{100 * self.per_accent[a].cer:.2f}" for a in sorted(self.per_accent)]
        vals += [str(self.utterances), str(self.substitutions), str(self.insertions), str(self.deletions)]
        return vals

    def to_table(self, row_id: str = "-", name: str = "model") -> str:
        return "\t".join(["ID", "Model"] + self.header()) + "\n" + "\t".join([row_id, name] + self.cells()) + "\n"


@dataclass
class Decoded:
    utt_id: str
    hypothesis: Hypothesis
    accent_posterior: np.ndarray | None
    partials: list[tuple[int, list[int]]] = field(default_factory=list)


def decode_dataset(data: Dataset, model: Model, chunk: int | None = None, method: str | None = None,
                   batch_size: int = 32) -> list[Decoded]:
    """Decode every utterance; ``chunk`` selects streaming decoding with that chunk size."""
    method = method or model.cfg.decoder.method
    dcfg = model.cfg.decoder
    dtype = next(iter(model.params.values())).dtype
    results: list[Decoded] = []
    if chunk is not None:
        for uid, x in zip(data.ids, data.feats):
            partials: list[tuple[int, list[int]]] = []
            session = run_stream(x, chunk, model, lambda k, toks: partials.append((k, toks)))
            hyp = session.hypothesis()
            if method == "rescore":
                hyp = _rescore_one(model, x, session.all_log_probs(), dtype)
            logits = session.all_frame_logits()
            post = None if logits is None else utterance_posterior(logits[None], [logits.shape[0]])[0]
            results.append(Decoded(uid, hyp, post, partials))
        return results
    with nc.no_grad():
        for start in range(0, len(data), batch_size):
            b = data.batch(range(start, min(start + batch_size, len(data))))
            out = model.forward(nc.Tensor(b.feats, dtype=dtype), b.lengths)
            posts = None
            if out.accent is not None:
                posts = utterance_posterior(out.accent.frame_logits.data, out.lengths)
            for j, uid in enumerate(b.ids):
                lp = out.log_probs.data[j, : out.lengths[j]]
                if method == "rescore":
                    hyps = ctc_prefix_beam_search(lp, dcfg.beam)
                    hyp = rescore(hyps, out.o_att[j: j + 1], int(out.lengths[j]), model.params, dcfg.heads,
                                  dcfg.layers, dcfg.ctc_weight)
                else:
                    hyp = Hypothesis(greedy_ctc_decode(lp), float(lp.max(axis=-1).sum()))
                results.append(Decoded(uid, hyp, None if posts is None else posts[j]))
    return results


def _rescore_one(model: Model, feats: np.ndarray, log_probs: np.ndarray, dtype) -> Hypothesis:
    dcfg = model.cfg.decoder
    with nc.no_grad():
        out = model.forward(nc.Tensor(feats[None], dtype=dtype), [feats.shape[0]])
    hyps = ctc_prefix_beam_search(log_probs, dcfg.beam)
    return rescore(hyps, out.o_att, int(out.lengths[0]), model.params, dcfg.heads, dcfg.layers, dcfg.ctc_weight)


def evaluate(data: Dataset, model: Model, chunk: int | None = None, method: str | None = None) -> EvalReport:
    """CER overall and per accent plus utterance-level AID accuracy."""
    report = EvalReport(has_aid=model.has_aid, skipped=len(data.skipped))
    decoded = decode_dataset(data, model, chunk, method)
    for d, ref, accent in zip(decoded, data.transcripts, data.accents):
        counts = edit_distance(ref, d.hypothesis.tokens)
        correct = None if d.accent_posterior is None else int(np.argmax(d.accent_posterior)) == accent
        report.add(accent, counts, len(ref), correct)
    if data.skipped:
        warnings.warn(f"{len(data.skipped)} utterance(s) skipped as unreadable", stacklevel=2)
    return report
