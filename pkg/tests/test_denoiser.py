import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svnr.denoiser import (AnalyticDenoiser, GaussianPrior, TinyNet, analytic_predict, param_shapes,
                           time_embedding, tinynet_predict, x0_from_eps)
from svnr.schedule import build_schedule, gamma_at, time_for_variance


def test_embedding_at_zero():
    e = time_embedding(np.zeros((2, 2)))
    assert e.shape == (2, 2, 16)
    np.testing.assert_array_equal(e[..., 0::2], 0.0)
    np.testing.assert_array_equal(e[..., 1::2], 1.0)


def test_embedding_locality(rng):
    t = rng.uniform(0, 20, (5, 5))
    t2 = t.copy()
    t2[2, 3] += 1.0
    diff = np.any(time_embedding(t) != time_embedding(t2), axis=-1)
    assert diff.sum() == 1 and diff[2, 3]
    c = time_embedding(np.full((3, 3), 7.0))
    assert np.all(c == c[0, 0])


def test_embedding_dim_check():
    with pytest.raises(ValueError):
        time_embedding(np.zeros(2), dim=5)


def _one_px_schedule_at(s, g):
    return np.full((1, 1), time_for_variance(s, g))


def test_analytic_example():
    # mu0=0, var0=1, gamma=1, x_t=2 -> x0_hat = 1, eps_hat = 1
    s = build_schedule(2, 0.5, 0.5, 2.0)  # gamma_1 = 1
    prior = GaussianPrior(np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
    t = np.ones((1, 1))
    assert gamma_at(s, 1.0) == pytest.approx(1.0)
    eps = analytic_predict(prior, np.full((1, 1, 1), 2.0), t, s)
    assert eps.item() == pytest.approx(1.0)
    assert x0_from_eps(np.full((1, 1, 1), 2.0), eps, t, s, clip=False).item() == pytest.approx(1.0)


def test_analytic_limits(sched):
    x_t = np.full((1, 1, 1), 0.8)
    prior = GaussianPrior(np.full((1, 1, 1), -0.3), np.ones((1, 1, 1)))
    tiny = _one_px_schedule_at(sched, 1e-12)
    x0 = x0_from_eps(x_t, analytic_predict(prior, x_t, tiny, sched), tiny, sched, clip=False)
    assert x0.item() == pytest.approx(0.8, abs=1e-9)
    sharp = GaussianPrior(np.full((1, 1, 1), -0.3), np.full((1, 1, 1), 1e-12))
    t = _one_px_schedule_at(sched, 0.3)
    x0 = x0_from_eps(x_t, analytic_predict(sharp, x_t, t, sched), t, sched, clip=False)
    assert x0.item() == pytest.approx(-0.3, abs=1e-9)
    with pytest.raises(ValueError):
        GaussianPrior(np.zeros(1), np.zeros(1))


def test_x0_from_eps(sched, rng):
    x0 = rng.uniform(-1, 1, (4, 4, 3))
    t = rng.uniform(0.1, 3, (4, 4))
    eps = rng.standard_normal(x0.shape)
    x_t = x0 + np.sqrt(gamma_at(sched, t))[..., None] * eps
    np.testing.assert_allclose(x0_from_eps(x_t, eps, t, sched, clip=False), x0, atol=1e-12)
    assert np.array_equal(x0_from_eps(x_t, eps, np.zeros((4, 4)), sched), np.clip(x_t, -1, 1))
    big = x0_from_eps(x_t, 100 * eps, t, sched)
    assert np.all(np.abs(big) <= 1)


def test_zero_net_zero_output(rng):
    net = TinyNet.zeros()
    out = net.predict(rng.standard_normal((2, 5, 5, 3)), rng.uniform(0, 5, (2, 5, 5)),
                      rng.standard_normal((2, 5, 5, 3)))
    assert out.shape == (2, 5, 5, 3) and np.all(out == 0)


def test_shape_checks(rng):
    net = TinyNet.init(0)
    with pytest.raises(ValueError):
        net.predict(np.zeros((4, 4, 3)), np.zeros((4, 4)), np.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        TinyNet({"W1": np.zeros(1)})
    with pytest.raises(ValueError):
        TinyNet.init(0, padding="reflect")


def test_unconditioned_ignores_y(rng):
    net = TinyNet.init(3, conditioned=False)
    x = rng.standard_normal((6, 6, 3))
    t = rng.uniform(0, 4, (6, 6))
    a = net.predict(x, t, rng.standard_normal(x.shape))
    b = net.predict(x, t, None)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("padding", ["zero", "wrap"])
def test_gradient_check(padding):
    # central differences on 20 random weights, float64, h = 1e-5, rel err <= 1e-4
    rng = np.random.default_rng(42)
    net = TinyNet.init(5, padding=padding, dtype=np.float64)
    for k in net.params:  # nonzero biases so every path is exercised
        if k[0] in "bc":
            net.params[k] = rng.normal(0, 0.1, net.params[k].shape)
    x = rng.standard_normal((2, 5, 6, 3))
    y = rng.standard_normal((2, 5, 6, 3))
    t = rng.uniform(0, 10, (2, 5, 6))
    target = rng.standard_normal((2, 5, 6, 3))
    _, grads = net.loss_and_grad(x, y, t, target)
    names = list(param_shapes())
    h = 1e-5
    for _ in range(20):
        k = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in net.params[k].shape)
        orig = net.params[k][idx]
        net.params[k][idx] = orig + h
        lp, _ = net.loss_and_grad(x, y, t, target)
        net.params[k][idx] = orig - h
        lm, _ = net.loss_and_grad(x, y, t, target)
        net.params[k][idx] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[k][idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
        assert rel <= 1e-4 or abs(fd - an) < 1e-10, (k, idx, fd, an)


@settings(max_examples=10, deadline=None)
@given(dy=st.integers(-4, 4), dx=st.integers(-4, 4))
def test_wrap_translation_equivariance(dy, dx):
    rng = np.random.default_rng(8)
    net = TinyNet.init(9, padding="wrap", dtype=np.float64)
    x = rng.standard_normal((6, 7, 3))
    y = rng.standard_normal((6, 7, 3))
    t = rng.uniform(0, 5, (6, 7))
    shift = lambda a: np.roll(a, (dy, dx), axis=(0, 1))  # noqa: E731
    a = shift(net.predict(x, t, y))
    b = net.predict(shift(x), shift(t), shift(y))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_serialization_round_trip(tmp_path, rng):
    net = TinyNet.init(11, scheme="C3")
    path = tmp_path / "w.bin"
    net.save(path)
    raw = path.read_bytes()
    assert raw[:8] == b"SVNRNET1"
    back = TinyNet.load(path)
    assert back.seed == 11 and back.scheme == "C3" and back.conditioned
    for k in net.params:
        assert np.array_equal(back.params[k], net.params[k])
    x = rng.standard_normal((4, 4, 3))
    t = rng.uniform(0, 3, (4, 4))
    assert np.array_equal(tinynet_predict(back, x, x, t), net.predict(x, t, x))
    assert back.to_bytes() == raw


def test_serialization_rejects_corruption():
    raw = TinyNet.init(0).to_bytes()
    with pytest.raises(ValueError, match="magic"):
        TinyNet.from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError, match="truncated"):
        TinyNet.from_bytes(raw[:-8])
    with pytest.raises(ValueError, match="trailing"):
        TinyNet.from_bytes(raw + b"\0\0\0\0")


def test_analytic_denoiser_protocol(sched, rng):
    prior = GaussianPrior(np.zeros((3, 3, 3)), np.full((3, 3, 3), 0.2))
    d = AnalyticDenoiser(prior, sched)
    x = rng.standard_normal((3, 3, 3))
    t = np.full((3, 3), 0.5)
    assert np.array_equal(d.predict(x, t, None), analytic_predict(prior, x, t, sched))


def test_architecture_signature_checked():
    import json
    import struct
    raw = TinyNet.init(0).to_bytes()
    (n,) = struct.unpack("<I", raw[8:12])
    head = json.loads(raw[12:12 + n])
    head["architecture"]["emb_freq_range"] = [1.0, 1e-4]
    new = json.dumps(head).encode()
    with pytest.raises(ValueError, match="architecture"):
        TinyNet.from_bytes(raw[:8] + struct.pack("<I", len(new)) + new + raw[12 + n:])
