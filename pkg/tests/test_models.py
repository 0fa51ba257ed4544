import math

import numpy as np
import pytest

from vrlab import gradcore as gc
from vrlab.data import make_source
from vrlab.entropy import GaussianCond, StreamError, bin_probability, rate_bits
from vrlab.models import (CodecModel, Flags, ModelConfig, NonFiniteActivation, ProxyMode, RatePoint, analyze, compress,
                          decompress, delta_schedule, forward_train, geometric_lambdas, high_rate_gain, pack_coded,
                          psnr, unpack_coded)

STE = ProxyMode("ste", "ste")


def _batch(seed=0, n=64, dim=16):
    return make_source("linear", dim).sample(n, np.random.default_rng(seed))


def _model(lams=(30.0, 300.0), **kw):
    m = CodecModel(ModelConfig(**kw), list(lams))
    if m.config.family == "linear":
        m.init_basis(_batch(99, 2000, m.config.dim))
    return m


@pytest.mark.parametrize("ratio,delta", [(1, 1.0), (4, 2.0), (100, 10.0)])
def test_delta_schedule(ratio, delta):
    assert delta_schedule([300.0 / ratio, 300.0])[0] == pytest.approx(delta)


def test_delta_schedule_errors():
    for bad in ([], [0.0, 1.0], [-1.0, 2.0], [5.0, 1.0]):
        with pytest.raises(ValueError):
            delta_schedule(bad)


def test_geometric_lambdas_span_one_to_ten():
    d = delta_schedule(geometric_lambdas(8, 300.0))
    assert d[0] == pytest.approx(10.0) and d[-1] == 1.0
    assert all(b < a for a, b in zip(d, d[1:]))


def test_high_rate_gain():
    g = high_rate_gain(300.0)
    f = lambda v: math.log2(v) + 300.0 / (12 * v * v)
    assert f(g) < f(g * 1.01) and f(g) < f(g * 0.99)
    with pytest.raises(ValueError):
        high_rate_gain(0.0)


def test_rate_point_validation():
    with pytest.raises(ValueError):
        RatePoint(0, 1.0, 1.0)
    with pytest.raises(ValueError):
        RatePoint(1, 1.0, 0.0)


def test_zero_input_costs_only_the_zero_indices():
    m = CodecModel(ModelConfig(), [300.0])
    m.params["g_a.w"].data = np.eye(16)
    m.params["g_s.w"].data = np.eye(16)
    a = analyze(m, np.zeros((4, 16)), 1.0)
    assert a.mse == 0.0
    assert not a.q_y.any()
    expect = rate_bits(bin_probability(GaussianCond(0.0, a.sigma), np.zeros_like(a.q_y), 1.0)).item()
    assert a.bits_latent_est == pytest.approx(expect, rel=1e-12)


def test_rate_nonincreasing_when_delta_doubles():
    m = _model()
    x = _batch(1, 500)
    bits = [analyze(m, x, d).bits_est for d in (0.5, 1, 2, 4, 8, 16)]
    assert all(b <= a for a, b in zip(bits, bits[1:]))


def test_larger_step_codes_fewer_latent_bits():
    m = _model()
    x = _batch(2, 300)
    assert compress(m, x, 10.0).latent.payload_bits < compress(m, x, 1.0).latent.payload_bits


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("flags", [Flags(), Flags(True, True)])
def test_compress_decompress_is_exact(seed, flags):
    m = _model()
    x = _batch(seed, 100)
    for delta in (1.0, 3.7, 10.0):
        c = compress(m, x, delta, flags)
        hyper, latent = c.streams_from_bytes(c.to_bytes())
        out = decompress(m, hyper, latent, delta, flags)
        assert out.tobytes() == c.x_hat.tobytes()


def test_coded_bits_track_estimate():
    m = _model()
    x = _batch(3, 2000)
    for delta in (1.0, 4.0):
        c = compress(m, x, delta).metrics
        est = c["bits_latent_est"] + c["bits_hyper_est"]
        assert abs(c["bits_total"] - est) <= 0.02 * est + 128


def test_coded_container_round_trip_and_errors():
    m = _model()
    c = compress(m, _batch(4, 10), 2.0)
    raw = pack_coded(c, (10, 16))
    delta, dims, hyper, latent = unpack_coded(raw)
    assert delta == 2.0 and dims == (10, 16)
    assert decompress(m, hyper, latent, delta).tobytes() == c.x_hat.tobytes()
    for bad in (b"NOPE" + raw[4:], raw[:9], raw + b"\x00"):
        with pytest.raises(StreamError):
            unpack_coded(bad)
    with pytest.raises(StreamError):
        decompress(m, hyper, latent, 3.0)


def test_latent_shape_mismatch_is_reported():
    m = _model()
    c = compress(m, _batch(5, 10), 1.0)
    other = compress(m, _batch(5, 11), 1.0)
    with pytest.raises(StreamError):
        decompress(m, c.hyper, other.latent, 1.0)


def test_aux_net_output_ranges():
    m = CodecModel(ModelConfig(seed=3))
    rng = np.random.default_rng(0)
    for p in (m.params[k] for k in m.params if m.params.group(k) in ("offset_net", "deltaz_net")):
        p.data = p.data + rng.normal(scale=3.0, size=p.shape)
    sigma = gc.tensor(np.geomspace(1e-4, 1e4, 50))
    for delta in (1e-3, 1.0, 10.0, 1e3):
        off = m.offset_net(sigma, delta).data
        assert np.all(off >= 0) and np.all(off < 0.5)
        assert m.deltaz_net(delta).item() > 0


def test_fresh_deltaz_net_is_identity_step():
    m = CodecModel(ModelConfig())
    assert m.deltaz_net(3.0).item() == pytest.approx(1.0)


def test_aux_net_parameter_counts(capsys):
    counts = CodecModel(ModelConfig()).parameter_counts()
    with capsys.disabled():
        print(f"\noffset_net {counts['offset_net']} parameters, deltaz_net {counts['deltaz_net']} parameters")
    assert counts["offset_net"] <= 300 and counts["deltaz_net"] <= 300
    assert (counts["offset_net"], counts["deltaz_net"]) == (205, 141)


def test_parameter_partition():
    m = CodecModel(ModelConfig(), [10.0, 40.0, 300.0])
    m.set_rates(m.rates, trainable_delta=True)
    shared = m.params.shared()
    assert shared and not any(k.startswith("delta.") for k in shared)
    for i in (1, 2, 3):
        assert list(m.params.specific(i)) == [f"delta.{i}"]
    assert sum(m.params.count(g) for g in ("g_a", "g_s", "h_a", "h_s")) > 100 * m.params.count("delta")


def test_psnr_definition():
    assert psnr(1e-2) == pytest.approx(20.0)
    assert psnr(0.25, peak=2.0) == pytest.approx(10 * math.log10(16))
    assert psnr(0.0) == math.inf


def test_reference_forward_value():
    # frozen once from this seed; flags off at step 1 is the plain single-rate hyperprior model
    m = CodecModel(ModelConfig(seed=0), [100.0])
    x = np.random.default_rng(0).normal(size=(8, 16))
    r, d, loss = forward_train(m, x, m.rates[0], Flags(), STE)
    assert r.item() == pytest.approx(5.71340853200482, rel=1e-10)
    assert d.item() == pytest.approx(0.0008507114249830105, rel=1e-8)
    assert loss.item() == pytest.approx(5.798479674503121, rel=1e-10)


def test_forward_train_argument_checks():
    m = CodecModel(ModelConfig(), [100.0])
    with pytest.raises(ValueError):
        forward_train(m, np.zeros((4, 15)), m.rates[0], proxy=STE)
    with pytest.raises(ValueError):
        forward_train(m, np.zeros((4, 16)), m.rates[0])
    with pytest.raises(ValueError):
        forward_train(m, np.zeros((4, 16)), m.rates[0], Flags(True, False), ProxyMode("noise", "noise"),
                      np.random.default_rng(0))


def test_nonfinite_activation_names_layer():
    m = CodecModel(ModelConfig(), [100.0])
    m.params["g_a.w"].data[0, 0] = np.inf
    with pytest.raises(NonFiniteActivation, match="g_a"):
        forward_train(m, np.ones((2, 16)), m.rates[0], proxy=STE)


def test_config_validation():
    for kw in ({"family": "conv"}, {"variant": "x"}, {"synthesis": "x"}, {"synthesis": "inverse", "latent": 8},
               {"dim": 0}, {"offset_mode": "x"}):
        with pytest.raises(ValueError):
            ModelConfig(**kw)


def test_mlp_gradients_match_finite_differences():
    m = CodecModel(ModelConfig(family="mlp", dim=64, latent=8, mlp_hidden=6), [1000.0])
    x = make_source("mlp", 64).sample(6, np.random.default_rng(0))
    params = [m.params[k] for k in m.params.trainable_names()]

    def loss():
        return forward_train(m, x, m.rates[0], Flags(), ProxyMode("noise", "noise"), np.random.default_rng(7))[2]

    assert gc.finite_diff_check(loss, params) < 1e-4


def test_copy_is_independent():
    m = _model()
    c = m.copy()
    c.params["g_a.w"].data += 1.0
    assert not np.array_equal(c.params["g_a.w"].data, m.params["g_a.w"].data)
    assert [r.delta for r in c.rates] == [r.delta for r in m.rates]
