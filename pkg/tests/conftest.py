import numpy as np
import pytest

from lafasr import numcore as nc
from lafasr.config import Config
from lafasr.gradcheck import TOY_OVERRIDES


def tiny_config(**overrides) -> Config:
    cfg = Config()
    for k, v in TOY_OVERRIDES.items():
        cfg.set(k, v)
    cfg.synth.frames_per_token = 8
    cfg.synth.len_range = (2, 4)
    cfg.synth.subband = 4
    for k, v in overrides.items():
        cfg.set(k.replace("__", "."), v)
    return cfg


def numeric_grad(fn, arrays, eps=1e-5):
    """Central-difference gradient of the scalar fn() w.r.t. every entry of each array (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            up = fn()
            a[i] = old - eps
            down = fn()
            a[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def assert_grads_match(build, shapes, rtol=1e-4, seed=0, atol=1e-8):
    """build(*tensors) -> scalar Tensor; compares backward() to central differences in float64."""
    rng = np.random.default_rng(seed)
    with nc.precision(np.float64):
        arrays = [rng.normal(size=s) for s in shapes]
        tensors = [nc.Tensor(a, requires_grad=True) for a in arrays]
        nc.backward(build(*tensors))
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def value():
            with nc.no_grad():
                return build(*tensors).item()

        numeric = numeric_grad(value, [t.data for t in tensors])
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol)
        assert err.max() < rtol, f"max relative error {err.max():.3e}"


def assert_grads_match_array(build, x0, rtol=1e-4, floor=1e-4):
    with nc.precision(np.float64):
        x = nc.Tensor(x0.copy(), requires_grad=True)
        nc.backward(build(x))
        a = x.grad

        def value():
            with nc.no_grad():
                return build(x).item()

        (n,) = numeric_grad(value, [x.data])
    err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    assert err.max() < rtol, f"max relative error {err.max():.3e}"


def check_param_grads(loss_fn, params, rtol=1e-4, eps=1e-5, seed=0):
    """Directional central differences for every tensor of a float64 ModelParams."""
    from lafasr.gradcheck import relative_error

    params.zero_grad()
    nc.backward(loss_fn())
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    params.zero_grad()
    rng = np.random.default_rng(seed)
    worst = (0.0, None)
    for name, t in params.items():
        base = t.data.copy()
        u = rng.normal(size=base.shape)
        u /= np.linalg.norm(u)
        vals = []
        for sign in (1, -1):
            t.data = base + sign * eps * u
            with nc.no_grad():
                vals.append(loss_fn().item())
        t.data = base
        err = relative_error(float(np.sum(grads[name] * u)), (vals[0] - vals[1]) / (2 * eps))
        worst = max(worst, (err, name), key=lambda e: e[0])
    assert worst[0] < rtol, f"{worst[1]}: relative error {worst[0]:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# acceptance reporting: one line per criterion in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {detail}")
