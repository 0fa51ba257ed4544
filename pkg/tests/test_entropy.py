import math

import numpy as np
import pytest
from scipy import stats

from vrlab import gradcore as gc
from vrlab.entropy import (BACKEND, Bitstream, CoderError, FactorizedModel, GaussianCond, StreamError, bin_probability,
                           estimated_bits, range_decode, range_encode, rate_bits)
from vrlab.entropy.coder import MAX_ALPHABET

BACKENDS = ["python"] + (["cython"] if BACKEND == "cython" else [])


def test_unit_gaussian_zero_bin():
    p = bin_probability(GaussianCond(0.0, 1.0), np.array([0]), 2.0).data[0]
    assert p == pytest.approx(stats.norm.cdf(1) - stats.norm.cdf(-1), abs=1e-12)
    assert p == pytest.approx(0.6827, abs=1e-4)


def test_rate_of_half():
    assert rate_bits(np.array([0.5])).item() == 1.0


def _assert_unit_mass(p):
    # far-tail bins sit at the probability floor, which adds at most size * floor
    assert 1 - 1e-9 <= p.sum() <= 1 + p.size * 2.0 ** -32 + 1e-9


@pytest.mark.parametrize("mu,sigma,delta", [(0.0, 1.0, 1.0), (0.3, 0.2, 0.1), (-2.0, 5.0, 3.0)])
def test_bin_masses_sum_to_one(mu, sigma, delta):
    q = np.arange(-2000, 2001)
    _assert_unit_mass(bin_probability(GaussianCond(mu, sigma), q, delta).data)


def test_factorized_masses_sum_to_one():
    m = FactorizedModel(gc.tensor([0.4]), gc.tensor([math.log(1.7)]))
    q = np.arange(-3000, 3001).reshape(-1, 1)
    _assert_unit_mass(bin_probability(m, q, 0.5).data)


def test_probability_floor_and_sigma_clamp():
    p = bin_probability(GaussianCond(0.0, 1.0), np.array([500]), 1.0).data
    assert p[0] == 2.0 ** -32
    assert GaussianCond(0.0, 0.0).sigma.data == 1e-4


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        bin_probability(GaussianCond(0.0, 1.0), np.array([0]), 0.0)
    with pytest.raises(ValueError):
        GaussianCond(np.nan, 1.0)
    with pytest.raises(ValueError):
        rate_bits(np.array([0.0]))
    with pytest.raises(ValueError):
        rate_bits(np.array([1.5]))


def test_translation_invariance():
    q = np.arange(-5, 6)
    a = bin_probability(GaussianCond(0.0, 1.3), q, 0.7).data
    b = bin_probability(GaussianCond(3 * 0.7, 1.3), q + 3, 0.7).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_rate_decreases_with_step():
    rng = np.random.default_rng(0)
    y = rng.normal(scale=3.0, size=2000)
    m = GaussianCond(0.0, 3.0)
    bits = [estimated_bits(m, np.rint(y / d).astype(int), d) for d in (0.25, 0.5, 1, 2, 4, 8)]
    assert all(b < a for a, b in zip(bits, bits[1:]))


def test_rate_gradient_flows_to_scale():
    s = gc.tensor(1.5, requires_grad=True)
    assert gc.finite_diff_check(
        lambda: rate_bits(bin_probability(GaussianCond(0.0, s), np.array([0, 1, -2]), 1.0)), [s]) < 1e-4


def _random_case(rng):
    n = int(rng.integers(1, 200))
    mu = rng.normal(scale=3, size=n)
    sigma = np.exp(rng.uniform(-3, 3, size=n))
    delta = float(np.exp(rng.uniform(-1, 1.5)))
    q = np.rint((mu + sigma * rng.normal(size=n)) / delta).astype(np.int64)
    return q, GaussianCond(mu, sigma), delta


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_round_trip_many_trials(backend, seed):
    rng = np.random.default_rng(seed)
    for _ in range(1000 if backend == "cython" else 200):
        q, model, delta = _random_case(rng)
        bs = range_encode(q, model, delta, backend=backend)
        back, used = Bitstream.from_bytes(bs.to_bytes())
        assert used == bs.nbytes
        np.testing.assert_array_equal(range_decode(back, model, delta, backend=backend), q)


def test_backends_produce_identical_streams():
    if BACKEND != "cython":
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(9)
    for _ in range(50):
        q, model, delta = _random_case(rng)
        assert range_encode(q, model, delta, "python").payload == range_encode(q, model, delta, "cython").payload


def test_round_trip_factorized_2d():
    rng = np.random.default_rng(4)
    m = FactorizedModel(gc.tensor(rng.normal(size=6)), gc.tensor(rng.uniform(-1, 2, size=6)))
    q = rng.integers(-9, 10, size=(40, 6))
    np.testing.assert_array_equal(range_decode(range_encode(q, m, 0.5), m, 0.5), q)


def test_degenerate_stream():
    q = np.zeros(500, dtype=np.int64)
    bs = range_encode(q, GaussianCond(0.0, 0.05), 1.0)
    assert bs.payload_bits <= 64
    np.testing.assert_array_equal(range_decode(bs, GaussianCond(0.0, 0.05), 1.0), q)
    empty = range_encode(np.zeros(0, dtype=np.int64), GaussianCond(0.0, 1.0), 1.0)
    assert range_decode(empty, GaussianCond(0.0, 1.0), 1.0).shape == (0,)


def test_coded_length_close_to_estimate():
    rng = np.random.default_rng(7)
    y = rng.normal(scale=4.0, size=20000)
    m = GaussianCond(0.0, 4.0)
    q = np.rint(y).astype(np.int64)
    est = estimated_bits(m, q, 1.0)
    assert abs(range_encode(q, m, 1.0).payload_bits - est) <= 0.02 * est + 64


def test_corrupt_streams_raise():
    m = GaussianCond(0.0, 2.0)
    q = np.arange(-20, 21)
    raw = range_encode(q, m, 1.0).to_bytes()
    with pytest.raises(StreamError):
        Bitstream.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(StreamError):
        Bitstream.from_bytes(raw[:10])
    with pytest.raises(StreamError):
        Bitstream.from_bytes(raw[:-1])
    bs, _ = Bitstream.from_bytes(raw)
    with pytest.raises(StreamError):
        range_decode(bs, m, 2.0)
    with pytest.raises(StreamError):
        range_decode(bs, FactorizedModel(gc.tensor([0.0]), gc.tensor([0.0])), 1.0)
    padded = Bitstream(bs.shape, bs.delta, bs.qmin, bs.qmax, bs.kind, bs.payload + b"\x00" * 8)
    with pytest.raises(StreamError):
        range_decode(padded, m, 1.0)


def test_unrepresentable_alphabet():
    q = np.array([0, MAX_ALPHABET + 5])
    with pytest.raises(CoderError):
        range_encode(q, GaussianCond(0.0, 1.0), 1.0)


def test_non_integer_indices_rejected():
    with pytest.raises(TypeError):
        range_encode(np.array([0.5]), GaussianCond(0.0, 1.0), 1.0)
