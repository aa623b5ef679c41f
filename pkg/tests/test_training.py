import math

import numpy as np
import pytest
from scipy import stats

from lafasr import numcore as nc
from lafasr.gradcheck import run_gradcheck, summarize
from lafasr.model import Model
from lafasr.training import (Adam, Batch, LossWeights, NonFiniteLossError, batch_indices, combine, lr_at,
                             sample_chunk_size, total_loss, train_loop, train_step)
from conftest import tiny_config
from lafasr.corpus import split_records
from lafasr.features import load_utterance
from lafasr.training import Dataset


def tiny_dataset(cfg, n=8, split="train"):
    cfg.synth.num_train = n
    recs = split_records(cfg, split)
    utts = [load_utterance(r, cfg.synth) for r in recs]
    return Dataset([u.id for u in utts], [u.features.frames for u in utts], [u.transcript for u in utts],
                   [u.accent_label for u in utts])


def test_combine_arithmetic():
    assert combine(2.0, 1.0, 4.0, LossWeights(0.3, 0.3)) == pytest.approx(3.5, abs=1e-12)


def test_zero_weights_leave_attention_loss(tiny_cfg):
    model = Model.create(tiny_cfg, seed=0)
    data = tiny_dataset(tiny_cfg, 4)
    b = data.batch(range(4))
    out = model.forward(nc.Tensor(b.feats), b.lengths)
    loss, parts = total_loss(out, model, b.transcripts, b.accents, LossWeights(0.0, 0.0))
    assert loss.item() == parts["L_att"]


def test_breakdown_recombines(tiny_cfg):
    model = Model.create(tiny_cfg, seed=1)
    data = tiny_dataset(tiny_cfg, 4)
    b = data.batch(range(4))
    out = model.forward(nc.Tensor(b.feats), b.lengths)
    _, parts = total_loss(out, model, b.transcripts, b.accents, LossWeights(0.3, 0.3))
    assert abs(combine(parts["L_att"], parts["L_ctc"], parts["L_aid"], LossWeights()) - parts["L_all"]) < 1e-6


def test_toy_batch_gradient():
    results = run_gradcheck(t_enc=5, chunk=None)
    assert max(summarize(results).values()) < 1e-4


class TestChunkSampling:
    def test_single_frame(self):
        rng = np.random.default_rng(0)
        assert {sample_chunk_size(1, rng) for _ in range(100)} == {1}

    def test_uniform_chi_square(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_chunk_size(8, rng) for _ in range(100_000)])
        counts = np.bincount(draws, minlength=9)[1:]
        assert stats.chisquare(counts).pvalue > 0.01

    def test_deterministic(self):
        a = [sample_chunk_size(8, np.random.default_rng(5)) for _ in range(3)]
        b = [sample_chunk_size(8, np.random.default_rng(5)) for _ in range(3)]
        assert a == b


def test_lr_schedule():
    cfg = tiny_config().train
    assert lr_at(cfg.warmup, cfg) == pytest.approx(cfg.lr)
    assert lr_at(cfg.warmup // 2, cfg) == pytest.approx(cfg.lr / 2, rel=1e-2)
    assert lr_at(4 * cfg.warmup, cfg) == pytest.approx(cfg.lr / 2)


def _fixed_batch(cfg, n=4):
    return tiny_dataset(cfg, n).batch(range(n))


def test_zero_lr_leaves_parameters(tiny_cfg):
    tiny_cfg.train.lr = 0.0
    model = Model.create(tiny_cfg, seed=0)
    before = {k: t.data.copy() for k, t in model.params.items()}
    opt = Adam(model.params, tiny_cfg.train)
    train_step(_fixed_batch(tiny_cfg), model, opt, tiny_cfg.train, np.random.default_rng(0))
    assert all(np.array_equal(before[k], t.data) for k, t in model.params.items())


def test_loss_decreases_on_fixed_batch(tiny_cfg):
    tiny_cfg.train.warmup = 1
    tiny_cfg.train.lr = 1e-3
    tiny_cfg.train.chunk_policy = "full"
    model = Model.create(tiny_cfg, seed=0)
    opt = Adam(model.params, tiny_cfg.train)
    batch = _fixed_batch(tiny_cfg)
    losses = [train_step(batch, model, opt, tiny_cfg.train, np.random.default_rng(i))["L_all"] for i in range(20)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_metrics_fields(tiny_cfg):
    model = Model.create(tiny_cfg, seed=0)
    m = train_step(_fixed_batch(tiny_cfg), model, Adam(model.params, tiny_cfg.train), tiny_cfg.train,
                   np.random.default_rng(0))
    assert {"L_all", "L_att", "L_ctc", "L_aid", "grad_norm", "lr", "C"} <= set(m)
    assert abs(m["L_att"] + 0.3 * m["L_ctc"] + 0.3 * m["L_aid"] - m["L_all"]) < 1e-6


def test_identical_runs_identical_curves(tiny_cfg):
    data = tiny_dataset(tiny_cfg, 8)
    tiny_cfg.train.batch_size = 4
    curves = []
    for _ in range(2):
        model = Model.create(tiny_cfg, seed=0)
        curves.append([m["L_all"] for m in train_loop(model, data, tiny_cfg, steps=4)])
    assert curves[0] == curves[1]


def test_non_finite_loss_names_utterances(tiny_cfg):
    model = Model.create(tiny_cfg, seed=0)
    b = _fixed_batch(tiny_cfg)
    bad = Batch(b.ids, np.full_like(b.feats, np.nan), b.lengths, b.transcripts, b.accents)
    with pytest.raises(NonFiniteLossError) as e:
        train_step(bad, model, Adam(model.params, tiny_cfg.train), tiny_cfg.train, np.random.default_rng(0))
    assert e.value.utt_ids == b.ids


def test_batch_indices_cover_epoch():
    seen = np.concatenate([batch_indices(10, 5, s, 0) for s in range(2)])
    assert sorted(seen) == list(range(10))
    assert list(batch_indices(10, 5, 3, 0)) == list(batch_indices(10, 5, 3, 0))


def test_gradient_clipping(tiny_cfg):
    model = Model.create(tiny_cfg, seed=0)
    opt = Adam(model.params, tiny_cfg.train)
    for t in model.params.values():
        t.grad = np.ones_like(t.data)
    norm = opt.clip(5.0)
    assert math.isclose(norm, math.sqrt(model.params.size()))
    clipped = math.sqrt(sum(float((t.grad ** 2).sum()) for t in model.params.values()))
    assert clipped == pytest.approx(5.0, rel=1e-5)
