import numpy as np
import pytest

from sapit.core import InvalidArgument, make_constellation
from sapit.oracle import (awgn_mi_quadrature, bpsk_mmse_tanh, enumerate_s_posterior, exact_joint_map,
                          quadrature_mixture_moments, scalar_mmse_quadrature)

BPSK = make_constellation("bpsk").points


def test_bpsk_mmse_known_values():
    # real-valued SNR 1 corresponds to rho = 0.5
    assert bpsk_mmse_tanh(0.5) == pytest.approx(0.4495995, abs=1e-6)
    assert bpsk_mmse_tanh(0.0) == 1.0
    assert bpsk_mmse_tanh(1.0, n_grid=4001) == pytest.approx(bpsk_mmse_tanh(1.0), abs=1e-7)


def test_mixture_with_single_component_is_gaussian_product():
    mq, vq = quadrature_mixture_moments(np.array([1.0, 0.0]), BPSK, 0.5 + 0.2j, 0.4, 1.0 - 1j, 0.6, "u")
    tbar = 0.4 * 0.6 / 1.0
    assert mq == pytest.approx(tbar * ((0.5 + 0.2j) / 0.4 + (1 - 1j) / 0.6), abs=1e-9)
    assert vq == pytest.approx(tbar, abs=1e-9)


def test_enumeration_is_normalized():
    m, v, w = enumerate_s_posterior([1.0], [1.0], 0.5, [0.5, 0.5], BPSK)
    assert w.sum() == pytest.approx(1.0) and 0 <= v <= 1


def test_exact_map_noiseless():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(4, 3)) + 1j * rng.normal(size=(4, 3))
    H = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    F = rng.normal(size=(3, 2)) + 1j * rng.normal(size=(3, 2))
    X = np.array([[1.0], [-1.0]])
    S = np.array([[1.0], [-1.0], [1.0]])
    Y = (G @ np.diag(S[:, 0]) @ F + H) @ X
    out = exact_joint_map(Y, G, H, F, 1e-3, S[:1], 1, BPSK, BPSK)
    assert out["x_map"].ravel().tolist() == [0, 1]
    assert out["s_map"].ravel().tolist() == [1, 0]
    assert np.allclose(out["x_marg"].sum(-1), 1.0)


def test_budget_guard():
    with pytest.raises(InvalidArgument):
        exact_joint_map(np.zeros((2, 40)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((3, 2)), 1.0,
                        np.ones((1, 20)), 2, BPSK, BPSK, budget=1000)


def test_scalar_references():
    assert scalar_mmse_quadrature(BPSK, 0.5) == pytest.approx(0.4495995, abs=1e-6)
    assert awgn_mi_quadrature(make_constellation("qpsk").points, 4.0) == pytest.approx(1.26544039, abs=1e-6)
