import numpy as np
import pytest

from lafasr import numcore as nc
from lafasr.config import FusionConfig
from lafasr.decoder import build_chunk_mask
from lafasr.fusion import cross_attention, init_fusion
from lafasr.params import Init, ModelParams
from conftest import check_param_grads

D = 8


@pytest.fixture(autouse=True)
def f64():
    with nc.precision(np.float64):
        yield


def params(seed=0):
    p = ModelParams()
    init_fusion(Init(p, seed, np.float64), D)
    return p


def test_single_key_collapse(rng):
    p = params()
    h_ac, h_ga = nc.Tensor(rng.normal(size=(1, 1, D))), nc.Tensor(rng.normal(size=(1, 1, D)))
    out = cross_attention(h_ac, h_ga, p, FusionConfig())
    v = h_ga.data @ p["fusion.wv"].data
    np.testing.assert_allclose(out.data, np.maximum(v, 0.0), atol=1e-15)


def test_key_permutation_invariance(rng):
    p = params(1)
    h_ac, h_ga = rng.normal(size=(1, 5, D)), rng.normal(size=(1, 5, D))
    a = cross_attention(nc.Tensor(h_ac), nc.Tensor(h_ga), p, FusionConfig()).data
    # permuting h_ga permutes K and V jointly; queries stay in place
    perm = rng.permutation(5)
    b = cross_attention(nc.Tensor(h_ac), nc.Tensor(h_ga[:, perm]), p, FusionConfig()).data
    assert np.abs(a - b).max() < 1e-10


def test_shape_and_non_negative(rng):
    out = cross_attention(nc.Tensor(rng.normal(size=(2, 7, D))), nc.Tensor(rng.normal(size=(2, 7, D))), params(),
                          FusionConfig())
    assert out.shape == (2, 7, D) and (out.data >= 0).all()


def test_chunk_masked_causality(rng):
    p = params(2)
    h_ac, h_ga = rng.normal(size=(1, 6, D)), rng.normal(size=(1, 6, D))
    mask = build_chunk_mask(6, 2).matrix[None, None]
    ref = cross_attention(nc.Tensor(h_ac), nc.Tensor(h_ga), p, FusionConfig(), mask).data
    a2, g2 = h_ac.copy(), h_ga.copy()
    a2[:, 4:] += 5.0
    g2[:, 4:] -= 5.0
    out = cross_attention(nc.Tensor(a2), nc.Tensor(g2), p, FusionConfig(), mask).data
    assert np.abs(out[:, :4] - ref[:, :4]).max() < 1e-12


def test_keys_values_projected_once(rng, monkeypatch):
    import lafasr.fusion as fusion

    calls = []
    real = nc.matmul

    def counting(a, b):
        calls.append(getattr(b, "name", None))
        return real(a, b)

    monkeypatch.setattr(fusion.nc, "matmul", counting)
    cross_attention(nc.Tensor(rng.normal(size=(1, 4, D))), nc.Tensor(rng.normal(size=(1, 4, D))), params(),
                    FusionConfig())
    assert calls.count("fusion.wk") == 1 and calls.count("fusion.wv") == 1


def test_self_mode_ignores_accent(rng):
    p = params(3)
    h_ga = nc.Tensor(rng.normal(size=(1, 4, D)))
    a = cross_attention(nc.Tensor(rng.normal(size=(1, 4, D))), h_ga, p, FusionConfig(mode="self")).data
    b = cross_attention(nc.Tensor(rng.normal(size=(1, 4, D))), h_ga, p, FusionConfig(mode="self")).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("cfg", [FusionConfig(), FusionConfig(heads=2, residual=True, reproject=True)])
def test_gradients(rng, cfg):
    p = params(4)
    h_ac, h_ga = nc.Tensor(rng.normal(size=(2, 5, D))), nc.Tensor(rng.normal(size=(2, 5, D)))
    w = rng.normal(size=(5, D))
    check_param_grads(lambda: nc.tsum(cross_attention(h_ac, h_ga, p, cfg) * w), p)


def test_shape_mismatch(rng):
    with pytest.raises(nc.DimensionError):
        cross_attention(nc.Tensor(rng.normal(size=(1, 4, D))), nc.Tensor(rng.normal(size=(1, 5, D))), params(),
                        FusionConfig())
