import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from vrlab import gradcore as gc
from vrlab.quant import (OFFSET_LITERAL, GainQuantizerSpec, UniformQuantizerSpec, centroid_offset_oracle,
                         dequantize_uniform, dequantize_with_offset, export_oracle_csv, quantize_gain,
                         quantize_uniform, train_proxy, write_oracle_csv)


@pytest.mark.parametrize("y,delta,q", [(2.6, 1, 3), (2.6, 2, 1), (0.0, 3.7, 0), (2.5, 1, 2), (3.5, 1, 4), (-2.5, 1, -2)])
def test_quantize_uniform(y, delta, q):
    assert quantize_uniform(np.array(y), delta) == q


@pytest.mark.parametrize("q,delta,y", [(3, 1, 3.0), (1, 2, 2.0), (0, 5, 0.0)])
def test_dequantize_uniform(q, delta, y):
    assert dequantize_uniform(q, delta) == y


def test_quantizer_input_checks():
    with pytest.raises(ValueError):
        quantize_uniform(np.array([1.0, np.nan]), 1.0)
    with pytest.raises(ValueError):
        quantize_uniform(np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        UniformQuantizerSpec(-1.0)


@pytest.mark.parametrize("q,expect", [(1, 1.51), (-1, -1.51)])
def test_offset_reconstruction(q, expect):
    assert dequantize_with_offset(q, 2.0, 0.245) == pytest.approx(expect)


def test_offset_zero_bin_untouched():
    assert dequantize_with_offset(0, 2.0, 0.4) == 0.0


def test_offset_range_checked():
    with pytest.raises(ValueError):
        dequantize_with_offset([1], 1.0, 0.5)
    with pytest.raises(ValueError):
        dequantize_with_offset([1], 1.0, -0.1)


def test_literal_offset_mode():
    np.testing.assert_allclose(dequantize_with_offset([-1, 0, 2], 2.0, 0.25, mode=OFFSET_LITERAL), [-1.5, 0, 4.5])


@settings(max_examples=200, deadline=None)
@given(y=st.floats(-1e3, 1e3), delta=st.floats(1e-2, 50), off=st.floats(0, 0.4999))
def test_round_trip_and_offset_stay_in_bin(y, delta, off):
    q = quantize_uniform(np.array(y), delta)
    assert abs(dequantize_uniform(q, delta) - y) <= delta / 2 * (1 + 1e-12)
    rec = dequantize_with_offset(q, delta, off)
    assert (q - 0.5) * delta - 1e-9 <= rec <= (q + 0.5) * delta + 1e-9


def test_gain_unit_gains():
    r = quantize_gain(np.array([[2.6]]), GainQuantizerSpec(np.ones(1), np.ones(1)))
    assert r.indices[0, 0] == 3 and r.reconstruction[0, 0] == 3


def test_gain_non_inverse():
    r = quantize_gain(np.array([[1.0]]), GainQuantizerSpec(np.array([2.0]), np.array([0.4])))
    assert r.indices[0, 0] == 2 and r.reconstruction[0, 0] == pytest.approx(0.8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), delta=st.sampled_from([0.5, 1.0, 2.0, 4.0, 8.0]))
def test_gain_reproduces_uniform(seed, delta):
    # inverse gains that are exact in binary floating point give elementwise equality
    y = np.random.default_rng(seed).normal(scale=10, size=(7, 5))
    r = quantize_gain(y, GainQuantizerSpec.from_delta(delta, 5))
    q = quantize_uniform(y, delta)
    np.testing.assert_array_equal(r.indices, q)
    np.testing.assert_array_equal(r.reconstruction, dequantize_uniform(q, delta))


def test_gain_channel_mismatch():
    with pytest.raises(ValueError):
        quantize_gain(np.ones((2, 3)), GainQuantizerSpec.from_delta(1.0, 4))


def test_ste_proxy():
    y = gc.tensor([2.6], requires_grad=True)
    out = train_proxy(y, 1.0, "ste")
    assert out.data[0] == 3.0
    gc.reduce_sum(out).backward()
    assert y.grad[0] == 1.0


def test_noise_proxy_reproducible_and_degenerate():
    y = gc.tensor(np.linspace(-3, 3, 50))
    a = train_proxy(y, 1.0, "noise", np.random.default_rng(3)).data
    b = train_proxy(y, 1.0, "noise", np.random.default_rng(3)).data
    assert a.tobytes() == b.tobytes()
    assert np.max(np.abs(a - y.data)) <= 0.5
    tiny = train_proxy(y, 1e-12, "noise", np.random.default_rng(3)).data
    np.testing.assert_allclose(tiny, y.data, atol=1e-12)


def _centroid_by_quadrature(sigma, delta, q):
    lo, hi = (abs(q) - 0.5) * delta, (abs(q) + 0.5) * delta
    mass = stats.norm.cdf(hi, scale=sigma) - stats.norm.cdf(lo, scale=sigma)
    first = integrate.quad(lambda x: x * stats.norm.pdf(x, scale=sigma), lo, hi)[0]
    return abs(q) - first / mass / delta


def test_oracle_reference_value():
    # N(0,1) centroid on [1, 3): (phi(1) - phi(3)) / (Phi(3) - Phi(1)) ~ 1.510
    centroid = (stats.norm.pdf(1) - stats.norm.pdf(3)) / (stats.norm.cdf(3) - stats.norm.cdf(1))
    assert centroid_offset_oracle(1.0, 2.0, 1) == pytest.approx(1 - centroid / 2, abs=1e-9)
    assert centroid_offset_oracle(1.0, 2.0, 1) == pytest.approx(0.245, abs=5e-4)


@pytest.mark.parametrize("sigma,delta,q", [(0.7, 1.0, 1), (3.0, 2.0, -2), (1.0, 0.5, 5), (10.0, 1.0, 3)])
def test_oracle_matches_independent_quadrature(sigma, delta, q):
    assert centroid_offset_oracle(sigma, delta, q) == pytest.approx(_centroid_by_quadrature(sigma, delta, q), abs=1e-8)


def test_oracle_symmetry_and_limits():
    assert centroid_offset_oracle(1.3, 1.0, 2) == centroid_offset_oracle(1.3, 1.0, -2)
    assert centroid_offset_oracle(1e4, 1.0, 1) < 1e-6
    with pytest.raises(ValueError):
        centroid_offset_oracle(1.0, 1.0, 0)
    with pytest.raises(ValueError):
        centroid_offset_oracle(0.01, 1.0, 400)


def test_oracle_monotone_trends():
    ratios = np.geomspace(0.25, 8.0, 25)
    by_sigma = [centroid_offset_oracle(r, 1.0, 1) for r in ratios]
    assert all(b <= a for a, b in zip(by_sigma, by_sigma[1:]))
    by_delta = [centroid_offset_oracle(1.0, d, 1) for d in 1.0 / ratios[::-1]]
    assert all(b >= a for a, b in zip(by_delta, by_delta[1:]))


def test_oracle_csv(tmp_path):
    n = export_oracle_csv(tmp_path / "o.csv", [1.0, 2.0], [2.0], qs=(1, -1))
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert n == 4 and lines[0] == "sigma,delta,q,offset"
    assert float(lines[1].split(",")[3]) == pytest.approx(0.245, abs=5e-4)
    buf = io.StringIO()
    assert write_oracle_csv(buf, [(1.0, 2.0)]) == 1
    assert math.isclose(float(buf.getvalue().splitlines()[1].split(",")[3]), float(lines[1].split(",")[3]))
