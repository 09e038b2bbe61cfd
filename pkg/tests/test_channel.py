import numpy as np
import pytest

from sapit.channel import (ChannelSet, DegenerateChannel, Geometry, PathLossParams, dump_channels, gen_channels,
                           link_gains, load_channels, normalize, path_loss, perturb_csi)
from sapit.core import InvalidArgument, RngStream


def test_default_distances():
    d_f, d_g, d_h = Geometry().distances()
    assert d_f == pytest.approx(490.204, abs=1e-3)
    assert d_g == pytest.approx(np.sqrt(200.0))
    assert d_h == pytest.approx(np.sqrt(500 ** 2 + 10 ** 2))


def test_path_loss_reference_and_exponents():
    assert path_loss(1.0) == pytest.approx(1e-3)
    assert path_loss(10.0) == pytest.approx(1e-3 * 10 ** -2.2)
    assert path_loss(10.0, link="direct") == pytest.approx(1e-3 * 10 ** -3.5)
    with pytest.raises(InvalidArgument):
        path_loss(0.0)


def test_link_gains_frozen():
    bf, bg, bh = link_gains()
    assert bf == pytest.approx(1.2055100966e-09, rel=1e-8)
    assert bg == pytest.approx(2.9435200933e-06, rel=1e-8)
    assert bh == pytest.approx(3.5752057446e-13, rel=1e-8)


def test_entry_variances_follow_gains():
    ch = gen_channels((200, 300, 50), rng=RngStream(1))
    bf, bg, bh = link_gains()
    assert np.mean(np.abs(ch.G) ** 2) == pytest.approx(bg, rel=0.02)
    assert np.mean(np.abs(ch.H) ** 2) == pytest.approx(bh, rel=0.03)
    assert np.mean(np.abs(ch.F) ** 2) == pytest.approx(bf, rel=0.03)
    assert ch.dims == (200, 300, 50)


def test_normalize_norms():
    ch = gen_channels((40, 60, 8), rng=RngStream(2))
    nc = normalize(ch)
    N, M, K = ch.dims
    assert np.vdot(nc.G, nc.G).real == pytest.approx(N)
    assert np.vdot(nc.H, nc.H).real == pytest.approx(K)
    assert np.vdot(nc.F, nc.F).real == pytest.approx(nc.zeta * K)
    # the cascade G diag(s) F is only rescaled by 1/a
    s = np.exp(1j * np.arange(N))
    A = ch.G @ np.diag(s) @ ch.F
    B = nc.G @ np.diag(s) @ nc.F
    assert np.allclose(B, A / nc.a)


def test_degenerate_channel():
    z = np.zeros((3, 2), complex)
    with pytest.raises(DegenerateChannel):
        normalize(ChannelSet(z, np.zeros((3, 1), complex), np.ones((2, 1), complex)))


def test_perturb_csi_nmse():
    ch = gen_channels((100, 100, 40), rng=RngStream(3))
    est = perturb_csi(ch, -20.0, RngStream(3))
    nmse = np.sum(np.abs(est.G - ch.G) ** 2) / np.sum(np.abs(ch.G) ** 2)
    assert 10 * np.log10(nmse) == pytest.approx(-20.0, abs=0.2)
    same = perturb_csi(ch, -np.inf, RngStream(3))
    assert np.array_equal(same.F, ch.F)


def test_dump_roundtrip(tmp_path):
    ch = gen_channels((5, 7, 3), rng=RngStream(9))
    dump_channels(ch, tmp_path / "c.bin")
    back = load_channels(tmp_path / "c.bin")
    assert back.seed == 9
    for a, b in zip((ch.G, ch.H, ch.F), (back.G, back.H, back.F)):
        assert np.array_equal(a, b)


def test_geometry_validation():
    with pytest.raises(InvalidArgument):
        Geometry(tx=(0.0, 0.0))
    with pytest.raises(InvalidArgument):
        PathLossParams(beta0=0.0)
