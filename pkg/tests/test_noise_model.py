import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from svnr.noise_model import (BUILTIN_PRESETS, Domain, ImageGrid, NoiseParams, PresetFileError,
                              delinearize, find_preset, linearize, load_gain_presets, noise_std,
                              scale_from_model_range, scale_to_model_range, simulate_noise)


def srgb(v, shape=(4, 4, 3)):
    return ImageGrid(np.full(shape, v, dtype=float), Domain.SRGB)


def lin(v, shape=(4, 4, 3)):
    return ImageGrid(np.full(shape, v, dtype=float), Domain.LINEAR)


def test_linearize_examples():
    assert np.all(linearize(srgb(0.0), 0.5).data == 0)
    assert np.allclose(linearize(srgb(1.0), 0.5).data, 0.5)
    assert linearize(srgb(0.5), 1.0).data[0, 0, 0] == pytest.approx(0.5 ** 2.2)
    assert linearize(srgb(0.5), 1.0).data[0, 0, 0] == pytest.approx(0.2176, abs=1e-4)


def test_delinearize_examples():
    assert delinearize(lin(0.2176), 1.0).data[0, 0, 0] == pytest.approx(0.5, abs=1e-4)
    # values above the white level clip to 1
    assert np.all(delinearize(lin(0.8), 0.5).data == 1.0)


@pytest.mark.parametrize("w", [0.0, -0.1, 1.5])
def test_white_level_range(w):
    with pytest.raises(ValueError):
        linearize(srgb(0.3), w)
    with pytest.raises(ValueError):
        delinearize(lin(0.3), w)


def test_domain_checks():
    with pytest.raises(ValueError):
        linearize(lin(0.3), 0.5)
    with pytest.raises(ValueError):
        delinearize(srgb(0.3), 0.5)


def test_round_trip_random_raster(rng):
    img = ImageGrid(rng.random((32, 32, 3)), Domain.SRGB)
    back = delinearize(linearize(img, 0.5), 0.5)
    assert np.max(np.abs(back.data - img.data)) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 5, 3), elements=st.floats(0, 1)), st.floats(0.05, 1.0))
def test_round_trip_property(data, w):
    back = delinearize(linearize(ImageGrid(data, Domain.SRGB), w), w)
    np.testing.assert_allclose(back.data, data, atol=1e-6)


def test_grayscale_promoted():
    g = ImageGrid(np.zeros((3, 4)), Domain.SRGB)
    assert g.shape == (3, 4, 1)
    with pytest.raises(ValueError):
        ImageGrid(np.zeros((3, 4, 2)), Domain.SRGB)


def test_noiseless_is_exact(rng):
    x0 = ImageGrid(rng.random((6, 6, 3)), Domain.LINEAR)
    y, _ = simulate_noise(x0, NoiseParams(0.0, 0.0), rng)
    assert np.array_equal(y.data, x0.data)


class FixedRng:
    def __init__(self, value):
        self.value = value

    def standard_normal(self, shape):
        return np.full(shape, self.value)


def test_clip_at_zero():
    y, n = simulate_noise(lin(0.0, (1, 1, 1)), NoiseParams(1.0, 0.0), FixedRng(-0.5))
    assert y.data.item() == 0.0 and n.data.item() == -0.5
    y, _ = simulate_noise(lin(0.0, (1, 1, 1)), NoiseParams(1.0, 0.0), FixedRng(-0.5), clip_at_zero=False)
    assert y.data.item() == -0.5


def test_clipping_only_raises_negatives(rng):
    x0 = ImageGrid(rng.random((16, 16, 3)) * 0.1, Domain.LINEAR)
    p = NoiseParams(0.05, 0.2)
    y_c, _ = simulate_noise(x0, p, np.random.default_rng(3))
    y_u, _ = simulate_noise(x0, p, np.random.default_rng(3), clip_at_zero=False)
    changed = y_c.data != y_u.data
    assert np.all(y_u.data[changed] < 0) and np.all(y_c.data >= y_u.data)
    # highlights are not clipped
    y_hi, _ = simulate_noise(lin(0.99, (64, 64, 1)), NoiseParams(0.1, 0.0), rng)
    assert y_hi.data.max() > 1.0


def test_negative_clean_rejected(rng):
    with pytest.raises(ValueError):
        simulate_noise(lin(-0.1), NoiseParams(0.1, 0.1), rng)


def test_noise_moments():
    # 1e5 draws per pixel value: mean -> x0, variance -> sigma_r^2 + sigma_s^2 x0 (2 %)
    rng = np.random.default_rng(2024)
    levels = np.array([0.0, 0.1, 0.5, 1.0])
    x0 = ImageGrid(np.broadcast_to(levels, (100_000, 4)).copy(), Domain.LINEAR)
    p = NoiseParams(0.02, 0.1)
    y, _ = simulate_noise(x0, p, rng, clip_at_zero=False)
    var = y.data[..., 0].var(axis=0, ddof=1)
    expected = 0.02 ** 2 + 0.1 ** 2 * levels
    np.testing.assert_allclose(var, expected, rtol=0.02)
    se = np.sqrt(expected / 100_000)
    assert np.all(np.abs(y.data[..., 0].mean(axis=0) - levels) < 4 * se)


def test_noise_std_and_scaling():
    p = NoiseParams(0.1, 0.2)
    assert noise_std(lin(0.25, (1, 1, 1)), p).item() == pytest.approx(np.sqrt(0.01 + 0.04 * 0.25))
    img, ps = scale_to_model_range(ImageGrid(np.array([[[0.0, 1.0, 0.5]]]), Domain.LINEAR), p)
    assert img.data.ravel().tolist() == [-1.0, 1.0, 0.0]
    assert ps.sigma_r == pytest.approx(0.2) and ps.scaled
    # the scaled params give exactly 4x the linear variance
    assert ps.model_variance(0.3) == pytest.approx(4 * p.variance(0.3))
    assert p.model_variance(0.3) == pytest.approx(ps.model_variance(0.3))
    back, pb = scale_from_model_range(img, ps)
    assert np.allclose(back.data.ravel(), [0, 1, 0.5]) and pb == p
    with pytest.raises(ValueError):
        scale_to_model_range(img, p)


def test_noise_params_validation():
    with pytest.raises(ValueError):
        NoiseParams(-0.1, 0.1)
    with pytest.raises(ValueError):
        NoiseParams(0.1, np.inf)
    assert NoiseParams(0, 0).is_noiseless


def test_builtin_presets_monotone():
    names = [f"gain{g}" for g in (1, 2, 4, 8, 16, 20)]
    sr = [BUILTIN_PRESETS[n].sigma_r for n in names]
    ss = [BUILTIN_PRESETS[n].sigma_s for n in names]
    assert sr == sorted(sr) and ss == sorted(ss)
    assert load_gain_presets() == list(BUILTIN_PRESETS.values())


def test_preset_file(tmp_path):
    f = tmp_path / "p.json"
    f.write_text(json.dumps({"gain16": {"sigma_r": 0.03, "sigma_s": 0.2}}))
    assert find_preset("gain16", f).params() == NoiseParams(0.03, 0.2, label="gain16")
    with pytest.raises(KeyError):
        find_preset("gain2", f)


def test_empty_preset_file(tmp_path, caplog):
    f = tmp_path / "empty.json"
    f.write_text("")
    assert load_gain_presets(f) == []
    assert "empty" in caplog.text


def test_malformed_preset_file(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text('{\n  "gain1": {"sigma_r": 0.1,\n  oops\n}')
    with pytest.raises(PresetFileError, match="line 3"):
        load_gain_presets(f)
    f.write_text('{"g": {"sigma_r": -1, "sigma_s": 0}}')
    with pytest.raises(PresetFileError):
        load_gain_presets(f)
    f.write_text('{"g": {"sigma_r": 0.1}}')
    with pytest.raises(PresetFileError):
        load_gain_presets(f)


def test_missing_preset_file_falls_back(tmp_path):
    assert len(load_gain_presets(tmp_path / "nope.json")) == len(BUILTIN_PRESETS)
