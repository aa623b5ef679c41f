import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lafasr.metrics import AccentRow, EditCounts, EvalReport, edit_distance

seqs = st.lists(st.integers(0, 4), max_size=12)


def oracle(a, b):
    """Plain recursive-memo Levenshtein."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_examples():
    assert edit_distance("abc", "abc") == EditCounts(0, 0, 0, 0)
    assert edit_distance("abc", "") == EditCounts(3, 0, 0, 3)
    assert edit_distance("kitten", "sitting").distance == 3


def test_counts_consistent(rng):
    for _ in range(500):
        a = list(rng.integers(0, 4, size=rng.integers(0, 10)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 10)))
        c = edit_distance(a, b)
        assert c.substitutions + c.insertions + c.deletions == c.distance == oracle(tuple(a), tuple(b))
        assert c.deletions - c.insertions == len(a) - len(b)


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, seqs)
def test_metric_axioms(a, b, c):
    ab = edit_distance(a, b).distance
    assert ab == edit_distance(b, a).distance
    assert (ab == 0) == (a == b)
    assert edit_distance(a, c).distance <= ab + edit_distance(b, c).distance


def _report():
    rep = EvalReport()
    rep.add(0, EditCounts(1, 1, 0, 0), 5, True)
    rep.add(0, EditCounts(2, 0, 1, 1), 4, False)
    rep.add(2, EditCounts(0, 0, 0, 0), 3, True)
    return rep


def test_report_recombination():
    rep = _report()
    assert rep.utterances == sum(r.utterances for r in rep.per_accent.values()) == 3
    assert rep.ref_len == 12
    assert rep.total_cer == (rep.substitutions + rep.insertions + rep.deletions) / rep.ref_len == 3 / 12
    weighted = sum(r.cer * r.ref_len for r in rep.per_accent.values()) / rep.ref_len
    assert weighted == pytest.approx(rep.total_cer, abs=1e-15)
    assert rep.aid_accuracy == 2 / 3


def test_perfect_hypotheses():
    rep = EvalReport()
    for a in range(3):
        rep.add(a, edit_distance([1, 2], [1, 2]), 2, True)
    assert rep.total_cer == 0 and all(r.cer == 0 for r in rep.per_accent.values())


def test_no_aid_column_empty():
    rep = EvalReport(has_aid=False)
    rep.add(0, EditCounts(0, 0, 0, 0), 2, None)
    assert rep.aid_accuracy is None
    header, row = rep.to_table("A1", "x").splitlines()
    assert row.split("\t")[header.split("\t").index("AID ACC(%)")] == "-"


def test_random_posteriors_give_chance_accuracy():
    a, n = 4, 4000
    rng = np.random.default_rng(0)
    rep = EvalReport()
    for i in range(n):
        post = rng.dirichlet(np.ones(a))
        rep.add(i % a, EditCounts(0, 0, 0, 0), 1, int(np.argmax(post)) == i % a)
    half_width = 3 * np.sqrt(0.25 * 0.75 / n)
    assert abs(rep.aid_accuracy - 1 / a) < half_width


def test_accent_row_zero_length():
    assert AccentRow().cer == 0.0
