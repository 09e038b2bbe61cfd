import numpy as np
import pytest

from sapit.core import InvalidArgument, make_constellation
from sapit.oracle import awgn_mi_quadrature
from sapit.rate_analysis import (DecoderCurve, MonotonicPath, awgn_mutual_information, check_convergence, eta,
                                 eta_along, line_integral, matched_curves, psi_s, psi_s_un, psi_x, psi_x_un,
                                 separate_rate, sum_rate)
from sapit.state_evolution import SEConfig

QPSK = make_constellation("qpsk")
BPSK = make_constellation("bpsk")


def _cfg(**kw):
    base = dict(N=64, M=256, K=32, N_P=20, T=1, zeta=0.6, noise_var=0.1, tx_const=QPSK, ris_const=BPSK,
                samples=5000)
    base.update(kw)
    return SEConfig(**base)


def test_psi_s_un_at_zero_is_T():
    for T in (1, 2, 3):
        assert psi_s_un(0.0, BPSK, T) == pytest.approx(T)


def test_psi_s_quadrature_matches_mc():
    q = psi_s_un(2.0, BPSK, 2)
    mc = psi_s_un(2.0, BPSK, 2, method="mc", samples=200_000, rng=1)
    assert mc == pytest.approx(q, rel=0.02)


def test_psi_decreasing_in_both_arguments():
    assert psi_x(1.0, 0.5, QPSK) < psi_x_un(1.0, QPSK)
    assert psi_x(2.0, 0.5, QPSK) < psi_x(1.0, 0.5, QPSK)
    assert psi_s(1.0, 0.3, BPSK, 1) < psi_s(1.0, 0.8, BPSK, 1)
    assert psi_x(1.0, 0.0, QPSK) == 0.0


def test_mutual_information_matches_quadrature():
    assert awgn_mutual_information(BPSK, 1.0) == pytest.approx(0.5000721361, abs=1e-6)
    assert awgn_mutual_information(QPSK, 4.0) == pytest.approx(awgn_mi_quadrature(QPSK.points, 4.0), abs=1e-6)
    assert awgn_mutual_information(QPSK, 200.0) == pytest.approx(np.log(4), abs=1e-6)


def test_paths():
    p = MonotonicPath.straight(10)
    assert p.t_x[0] == 1 and p.t_x[-1] == 0 and np.all(np.diff(p.t_x) <= 0)
    r = MonotonicPath.random(np.random.default_rng(1), 10)
    assert np.all(np.diff(r.t_s) <= 0)
    with pytest.raises(InvalidArgument):
        MonotonicPath([1, 0.5, 0.7, 0], [1, 0.5, 0.2, 0])


def test_decoder_curve():
    c = DecoderCurve(np.array([0.0, 0.5, 1.0]), np.array([4.0, 2.0, 1.0]))
    assert c(0.5) == 1.0 and c(10.0) == 0.0
    assert c(2.0) == pytest.approx(0.5)
    assert c.inverse(0.25) == pytest.approx(3.0)
    assert DecoderCurve.genie()(0.1) == 0.0


def test_eta_monotone():
    cfg = _cfg()
    a, b = eta(1.0, 1.0, cfg), eta(0.5, 0.5, cfg)
    assert b.rho_x > a.rho_x and b.rho_s > a.rho_s
    with pytest.raises(InvalidArgument):
        eta(1.5, 0.2, cfg)


def test_predicate_and_rates():
    cfg = _cfg()
    path = MonotonicPath.straight(12)
    etas = eta_along(path, cfg)
    below = matched_curves(path, etas, 0.05)
    above = matched_curves(path, etas, -0.05)
    assert check_convergence(path, *below, cfg, etas)
    assert not check_convergence(path, *above, cfg, etas)
    ix, is_ = line_integral(path, cfg, etas)
    assert ix > 0 and is_ > 0
    sep = separate_rate(cfg)
    tot = sum_rate(cfg, n_paths=2, rng=0, n_points=12)
    assert sep.sum <= tot.sum
    # the Tx part cannot exceed K log2 |X| per channel use
    assert tot.R_T <= cfg.K * 2 + 1e-6
