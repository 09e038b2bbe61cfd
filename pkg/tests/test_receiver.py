import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sapit.channel import gen_channels
from sapit.core import InvalidArgument, RngStream, make_constellation
from sapit.frame import CodeContext, FrameConfig, random_frame, synthesize
from sapit.oracle import enumerate_pi, enumerate_s_posterior, enumerate_x_posterior, quadrature_mixture_moments
from sapit.receiver import (DivergenceError, ReceiverConfig, _assert_normalized, _s_posterior_fast,
                            _x_posterior_fast, compute_pi, posterior_c, posterior_s, posterior_u, posterior_uc,
                            posterior_x, run)

BPSK = make_constellation("bpsk").points
QPSK = make_constellation("qpsk").points


def test_uc_matches_oracle(rng):
    for _ in range(5):
        pts = QPSK if rng.random() < 0.5 else BPSK
        pi = rng.dirichlet(np.ones(pts.size))
        d, p = rng.normal(size=2) @ [1, 1j], rng.normal(size=2) @ [1, 1j]
        td, tp = 10 ** rng.uniform(-1.5, 0.5, 2)
        mu, var = posterior_u(d, td, p, tp, pi, pts)
        mq, vq = quadrature_mixture_moments(pi, pts, p, tp, d, td, "u")
        assert abs(mu - mq) < 1e-6 and abs(var - vq) < 1e-6
        mu, var = posterior_c(d, td, p, tp, pi, pts)
        mq, vq = quadrature_mixture_moments(pi, pts, p, tp, d, td, "c")
        assert abs(mu - mq) < 1e-6 and abs(var - vq) < 1e-6


def test_fused_uc_equals_separate_kernels(rng):
    d = rng.normal(size=(7, 5)) + 1j * rng.normal(size=(7, 5))
    p = rng.normal(size=(7, 5)) + 1j * rng.normal(size=(7, 5))
    pi = rng.dirichlet(np.ones(4), size=(7, 5))
    mu_u, var_u, mu_c, var_c, flag = posterior_uc(d, 0.3, p, 0.7, pi, QPSK)
    assert not flag
    assert np.allclose(mu_u, posterior_u(d, 0.3, p, 0.7, pi, QPSK)[0])
    assert np.allclose(var_c, posterior_c(d, 0.3, p, 0.7, pi, QPSK)[1])


def test_fused_x_and_s_match_reference(rng):
    r = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    o = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    beta = rng.dirichlet(np.ones(4), size=(3, 4))
    m1, v1, p1 = posterior_x(r, 0.4, o, 0.9, beta, QPSK, return_probs=True)
    m2, v2, p2 = _x_posterior_fast(r, 0.4, o, 0.9, beta, QPSK)
    assert np.allclose(m1, m2) and np.allclose(v1, v2) and np.allclose(p1, p2)
    d = rng.normal(size=(5, 3)) + 1j * rng.normal(size=(5, 3))
    p = rng.normal(size=(5, 3)) + 1j * rng.normal(size=(5, 3))
    alpha = rng.dirichlet(np.ones(2), size=5)
    pi, mean, var, prob = _s_posterior_fast(d, p, 0.8, alpha, BPSK)
    assert np.allclose(pi, compute_pi(alpha, d, p, 0.5, 0.3, BPSK))
    m, v, pr = posterior_s(d, p, 0.5, 0.3, alpha, BPSK)
    assert np.allclose(mean, m) and np.allclose(var, v) and np.allclose(prob, pr)


def test_x_and_s_posteriors_match_enumeration(rng):
    beta = rng.dirichlet(np.ones(4))
    m, v = posterior_x(0.3 + 0.1j, 0.5, -0.2j, 0.8, beta, QPSK)
    me, ve, _ = enumerate_x_posterior(0.3 + 0.1j, 0.5, -0.2j, 0.8, beta, QPSK)
    assert abs(m - me) < 1e-12 and abs(v - ve) < 1e-12
    d, p = np.array([0.4 + 1j, -0.3j]), np.array([1.0 + 0.2j, 0.5 - 0.5j])
    alpha = np.array([0.3, 0.7])
    m, v, _ = posterior_s(d, p, 0.2, 0.3, alpha, BPSK)
    me, ve, _ = enumerate_s_posterior(d, p, 0.5, alpha, BPSK)
    assert abs(m - me) < 1e-12 and abs(v - ve) < 1e-12
    pi = compute_pi(alpha, d, p, 0.2, 0.3, BPSK)
    assert np.allclose(pi[0], enumerate_pi(d, p, 0.5, alpha, BPSK, 0), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_posterior_x_variance_bounded(re, im, tr, to):
    beta = np.full(4, 0.25)
    m, v = posterior_x(re + 1j * im, tr, 0.0, to, beta, QPSK)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert abs(m) <= 1.0 + 1e-12


def test_underflow_gives_uniform_flag():
    pi = np.array([0.0, 0.0])
    mu, var, flag = posterior_u(1.0, 0.1, 1.0, 0.1, pi, BPSK, return_flag=True)
    assert flag and np.isfinite(mu)


def test_normalization_check_raises():
    with pytest.raises(DivergenceError):
        _assert_normalized(bad=np.array([[0.5, 0.6]]))
    _assert_normalized(ok=np.array([[0.25, 0.75]]))


def _setup(power=40.0, direct=True, coded=False, seed=1, **kw):
    dims = dict(N=64, M=64, K=8, N_P=6, Q=16, T=2)
    dims.update(kw)
    cfg = FrameConfig(power_dbm=power, direct_link=direct, coded=coded, **dims)
    rs = RngStream(seed)
    ch = gen_channels((cfg.N, cfg.M, cfg.K), rng=rs)
    ctx = CodeContext.for_config(cfg, rs) if coded else None
    fr = random_frame(cfg, rs, ctx)
    Y = synthesize(ch, fr, cfg.noise_var, rs, cfg.T, direct)
    return cfg, ch, ctx, fr, Y


def test_high_snr_recovers_everything():
    # RIS rows see Rayleigh-faded cascade gains, so they need a wider margin than X
    cfg, ch, ctx, fr, Y = _setup(power=55.0)
    res = run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(max_iter=30), truth=fr)
    assert np.array_equal(res.tx_bits, fr.tx_bits)
    assert np.array_equal(res.ris_bits, fr.ris_bits)
    assert res.trace[-1]["mse_x"] < 1e-3
    keys, rows = res.trace_columns()
    assert keys[0] == "iteration" and len(rows) == res.iterations


def test_blocked_direct_link_still_detects():
    cfg, ch, ctx, fr, Y = _setup(power=45.0, direct=False)
    res = run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(max_iter=30, direct_link=False), truth=fr)
    assert np.mean(res.tx_bits != fr.tx_bits) < 0.01


def test_genie_modes_fix_other_stream():
    cfg, ch, ctx, fr, Y = _setup(power=30.0)
    res = run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(genie="known_S"), truth=fr)
    assert np.array_equal(res.ris_bits, fr.ris_bits)
    res = run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(genie="known_X"), truth=fr)
    assert np.array_equal(res.tx_bits, fr.tx_bits)


def test_coded_joint_mode():
    cfg, ch, ctx, fr, Y = _setup(power=30.0, coded=True, Q=32)
    res = run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(mode="joint", max_iter=15), ctx, fr)
    assert res.tx_bits.size == fr.tx_bits.size
    assert np.mean(res.tx_bits != fr.tx_bits) < 0.05


def test_argument_checks():
    cfg, ch, ctx, fr, Y = _setup()
    with pytest.raises(InvalidArgument):
        run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(mode="joint"))
    with pytest.raises(InvalidArgument):
        run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(genie="known_S"))
    with pytest.raises(InvalidArgument):
        ReceiverConfig(damping=0.0)


def test_deterministic():
    cfg, ch, ctx, fr, Y = _setup(power=32.0)
    a = run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(max_iter=10, tol=0))
    b = run(Y, ch, cfg, fr.S[:cfg.N_P], ReceiverConfig(max_iter=10, tol=0))
    assert np.array_equal(a.mu_x, b.mu_x) and a.iterations == 10
