import numpy as np
import pytest

from lafasr import numcore as nc
from lafasr.config import Config, EncoderConfig
from lafasr.encoder import (DegenerateInputError, EncoderStream, conformer_block, encode, init_block, init_encoder,
                            subsample, tap_layers)
from lafasr.params import Init, ModelParams
from conftest import assert_grads_match, check_param_grads


def block_params(d=8, kernel=5, seed=0, dtype=np.float64):
    p = ModelParams()
    init_block(Init(p, seed, dtype), "b", d, 2, kernel)
    return p


def encoder_params(cfg: EncoderConfig, feat_dim=6, seed=0, dtype=np.float64):
    p = ModelParams()
    init_encoder(Init(p, seed, dtype), cfg, feat_dim)
    return p


SMALL = EncoderConfig(d_model=8, heads=2, num_blocks=4, sub2_after=1, num_taps=3, ffn_mult=2, conv_kernel=3, max_len=32)


class TestConformerBlock:
    def test_zero_weights_collapse_to_layer_norm(self, rng):
        p = block_params()
        for name, t in p.items():
            if not name.endswith(".g"):
                t.data[...] = 0.0
        with nc.precision(np.float64):
            x = nc.Tensor(rng.normal(size=(2, 5, 8)))
            out = conformer_block(x, p, "b", 2, None)
            ref = nc.layer_norm(x, p["b.norm.g"], p["b.norm.b"])
        assert np.array_equal(out.data, ref.data)

    def test_shape_preserved(self, rng):
        p = block_params(seed=3)
        with nc.precision(np.float64):
            out = conformer_block(nc.Tensor(rng.normal(size=(3, 7, 8))), p, "b", 2, None)
        assert out.shape == (3, 7, 8)

    def test_gradient(self, rng):
        p = block_params(d=8, seed=2)
        mask = np.tril(np.ones((4, 4), dtype=bool))[None, None]
        with nc.precision(np.float64):
            x = nc.Tensor(rng.normal(size=(2, 4, 8)))
            readout = rng.normal(size=(4, 8))  # sum of squares after LayerNorm is nearly constant
            check_param_grads(lambda: nc.tsum(conformer_block(x, p, "b", 2, mask) * readout), p)
            assert_grads_match(lambda x: nc.tsum(conformer_block(x, p, "b", 2, mask) * readout), [(1, 4, 8)])

    def test_mask_shape_checked(self, rng):
        with pytest.raises(nc.DimensionError):
            conformer_block(nc.Tensor(rng.normal(size=(1, 4, 8))), block_params(), "b", 2, np.ones((1, 1, 3, 3), bool))


class TestSubsample:
    def test_halves(self, rng):
        w, b = nc.Tensor(rng.normal(size=(3, 4, 5))), nc.Tensor(np.zeros(5))
        assert subsample(nc.Tensor(rng.normal(size=(1, 8, 4))), w, b).shape == (1, 4, 5)

    def test_zero_weights(self, rng):
        w, b = nc.Tensor(np.zeros((3, 4, 5))), nc.Tensor(np.zeros(5))
        out = subsample(nc.Tensor(rng.normal(size=(1, 8, 4))), w, b)
        assert out.shape == (1, 4, 5) and not out.data.any()

    def test_two_stages(self, rng):
        w1, w2 = nc.Tensor(rng.normal(size=(3, 4, 4))), nc.Tensor(rng.normal(size=(3, 4, 4)))
        b = nc.Tensor(np.zeros(4))
        assert subsample(subsample(nc.Tensor(rng.normal(size=(1, 64, 4))), w1, b), w2, b).shape == (1, 16, 4)

    def test_degenerate(self, rng):
        with pytest.raises(DegenerateInputError):
            subsample(nc.Tensor(rng.normal(size=(1, 1, 4))), nc.Tensor(np.zeros((3, 4, 4))), nc.Tensor(np.zeros(4)))


class TestEncode:
    def test_default_has_seven_taps(self):
        cfg = Config()
        assert tap_layers(cfg.encoder) == list(range(6, 13))

    def test_taps_and_alias(self, rng):
        p = encoder_params(SMALL)
        with nc.precision(np.float64):
            taps = encode(nc.Tensor(rng.normal(size=(1, 24, 6))), [24], p, SMALL)
        assert len(taps.taps) == 3 and all(t.shape == (1, 6, 8) for t in taps.taps)
        assert taps.final is taps.taps[-1] and taps.tap(4) is taps.final

    def test_full_mask_equals_chunk_of_full_length(self, rng):
        p = encoder_params(SMALL)
        with nc.precision(np.float64):
            x = nc.Tensor(rng.normal(size=(1, 24, 6)))
            a = encode(x, [24], p, SMALL)
            b = encode(x, [24], p, SMALL, chunk=6)
        for ta, tb in zip(a.taps, b.taps):
            assert np.array_equal(ta.data, tb.data)

    @pytest.mark.parametrize("chunk", [1, 2, 3])
    def test_chunk_causality(self, rng, chunk):
        p = encoder_params(SMALL, seed=4)
        x = rng.normal(size=(1, 24, 6))
        with nc.precision(np.float64):
            ref = encode(nc.Tensor(x), [24], p, SMALL, chunk)
            for t in range(6):
                boundary = (t // chunk + 1) * chunk
                if boundary >= 6:
                    continue
                y = x.copy()
                y[:, 4 * boundary:] += rng.normal(size=y[:, 4 * boundary:].shape) * 3
                out = encode(nc.Tensor(y), [24], p, SMALL, chunk)
                for ta, tb in zip(ref.taps, out.taps):
                    assert np.abs(ta.data[0, t] - tb.data[0, t]).max() < 1e-12

    def test_deterministic(self, rng):
        p = encoder_params(SMALL)
        x = nc.Tensor(rng.normal(size=(2, 20, 6)))
        a = encode(x, [20, 16], p, SMALL, 2)
        b = encode(x, [20, 16], p, SMALL, 2)
        assert a.final.data.tobytes() == b.final.data.tobytes()

    def test_padding_does_not_leak(self, rng):
        p = encoder_params(SMALL, seed=5)
        with nc.precision(np.float64):
            x = rng.normal(size=(2, 24, 6))
            alone = encode(nc.Tensor(x[1:, :16]), [16], p, SMALL, 2).final.data[0]
            x[1, 16:] = 99.0
            batched = encode(nc.Tensor(x), [24, 16], p, SMALL, 2).final.data[1, :4]
        np.testing.assert_allclose(batched, alone, atol=1e-12)

    def test_too_short(self, rng):
        with pytest.raises(DegenerateInputError):
            encode(nc.Tensor(rng.normal(size=(1, 3, 6))), [3], encoder_params(SMALL), SMALL)

    def test_taps_must_follow_second_subsampling(self):
        with pytest.raises(nc.ConfigurationError):
            tap_layers(EncoderConfig(num_blocks=4, sub2_after=2, num_taps=3))


def test_stream_matches_chunked_encode(rng):
    p = encoder_params(SMALL, seed=7)
    x = rng.normal(size=(1, 24, 6))
    with nc.precision(np.float64):
        ref = encode(nc.Tensor(x), [24], p, SMALL, chunk=2)
        stream = EncoderStream(p, SMALL)
        outs = [stream.step(nc.Tensor(x[:, i:i + 8])) for i in range(0, 24, 8)]
    for k in range(3):
        got = np.concatenate([o[k].data for o in outs], axis=1)
        np.testing.assert_allclose(got, ref.taps[k].data, atol=1e-12)
