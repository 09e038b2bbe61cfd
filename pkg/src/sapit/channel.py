"""Geometric Rayleigh channels for the Tx/RIS/Rx triangle."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, RngStream, STREAM_CHANNEL, STREAM_CSI, as_generator, cgauss


class DegenerateChannel(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    tx: tuple = (0.0, 0.0, 1.5)
    rx: tuple = (0.0, 500.0, 11.5)
    ris: tuple = (10.0, 490.0, 11.5)

    def __post_init__(self):
        for p in (self.tx, self.rx, self.ris):
            if len(p) != 3 or not np.all(np.isfinite(p)):
                raise InvalidArgument("coordinates must be finite 3-vectors")

    def distances(self):
        """(Tx->RIS, RIS->Rx, Tx->Rx) distances in meters."""
        d = lambda a, b: float(np.linalg.norm(np.subtract(a, b)))
        return d(self.tx, self.ris), d(self.ris, self.rx), d(self.tx, self.rx)


@dataclass(frozen=True)
class PathLossParams:
    d0: float = 1.0
    beta0: float = 1e-3  # -30 dB
    alpha_ris: float = 2.2
    alpha_direct: float = 3.5

    def __post_init__(self):
        if min(self.d0, self.beta0, self.alpha_ris, self.alpha_direct) <= 0:
            raise InvalidArgument("path-loss parameters must be positive")


def path_loss(d, params: PathLossParams = PathLossParams(), link: str = "ris"):
    """Large-scale gain ``beta0 * (d / d0) ** -alpha``; ``link`` is ``'ris'`` or ``'direct'``."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise InvalidArgument("distance must be positive")
    alpha = {"ris": params.alpha_ris, "direct": params.alpha_direct}[link]
    return params.beta0 * (d / params.d0) ** (-alpha)


def link_gains(geometry: Geometry = Geometry(), params: PathLossParams = PathLossParams()):
    """Per-entry variances (beta_F, beta_G, beta_H) for Tx->RIS, RIS->Rx and Tx->Rx."""
    d_f, d_g, d_h = geometry.distances()
    return (float(path_loss(d_f, params, "ris")), float(path_loss(d_g, params, "ris")),
            float(path_loss(d_h, params, "direct")))


@dataclass(frozen=True, eq=False)
class ChannelSet:
    G: np.ndarray  # M x N
    H: np.ndarray  # M x K
    F: np.ndarray  # N x K
    seed: int = -1

    def __post_init__(self):
        M, N = self.G.shape
        if self.H.shape[0] != M or self.F.shape != (N, self.H.shape[1]):
            raise InvalidArgument("inconsistent channel dimensions")

    @property
    def dims(self):
        """(N, M, K)."""
        return self.G.shape[1], self.G.shape[0], self.H.shape[1]


@dataclass(frozen=True, eq=False)
class NormalizedChannels:
    """Rescaled channels with ||G||^2/N = 1, ||H||^2/K = 1, ||F||^2/K = zeta.

    ``a`` scales the received signal (y -> y / a) and ``b`` moves gain
    between G and F.
    """

    G: np.ndarray
    H: np.ndarray
    F: np.ndarray
    zeta: float
    a: float
    b: float

    @property
    def dims(self):
        return self.G.shape[1], self.G.shape[0], self.H.shape[1]


def gen_channels(dims, geometry: Geometry = Geometry(), params: PathLossParams = PathLossParams(),
                 rng=None) -> ChannelSet:
    """Draw i.i.d. Rayleigh G, H, F whose per-entry variances equal the link path-loss gains."""
    N, M, K = dims
    if min(N, M, K) < 1:
        raise InvalidArgument("dims must be positive")
    beta_f, beta_g, beta_h = link_gains(geometry, params)
    g = as_generator(rng.child(STREAM_CHANNEL) if isinstance(rng, RngStream) else rng)
    G = cgauss(g, (M, N), beta_g)
    H = cgauss(g, (M, K), beta_h)
    F = cgauss(g, (N, K), beta_f)
    seed = rng.seed if isinstance(rng, RngStream) else -1
    return ChannelSet(G, H, F, seed)


def normalize(ch) -> NormalizedChannels:
    N, M, K = ch.dims
    g2 = np.vdot(ch.G, ch.G).real
    h2 = np.vdot(ch.H, ch.H).real
    f2 = np.vdot(ch.F, ch.F).real
    if g2 <= 0 or h2 <= 0:
        raise DegenerateChannel("G and H must have nonzero Frobenius norm")
    a = np.sqrt(h2 / K)
    b = np.sqrt(g2 / N)
    zeta = g2 * f2 / (N * h2)
    return NormalizedChannels(ch.G / b, ch.H / a, b * ch.F / a, float(zeta), float(a), float(b))


def scale_like(ch: ChannelSet, ref: NormalizedChannels) -> NormalizedChannels:
    """Apply the scaling of ``ref`` to another channel set (e.g. channel estimates)."""
    a, b = ref.a, ref.b
    return NormalizedChannels(ch.G / b, ch.H / a, b * ch.F / a, ref.zeta, a, b)


def perturb_csi(ch: ChannelSet, nmse_db: float, rng) -> ChannelSet:
    """Channel estimates with independent Gaussian errors at the given normalized MSE."""
    if np.isneginf(nmse_db):
        return ChannelSet(ch.G.copy(), ch.H.copy(), ch.F.copy(), ch.seed)
    if not np.isfinite(nmse_db):
        raise InvalidArgument("nmse_db must be finite or -inf")
    g = as_generator(rng.child(STREAM_CSI) if isinstance(rng, RngStream) else rng)
    frac = 10.0 ** (nmse_db / 10.0)
    out = []
    for A in (ch.G, ch.H, ch.F):
        per_entry = np.vdot(A, A).real / A.size
        out.append(A + cgauss(g, A.shape, frac * per_entry))
    return ChannelSet(*out, seed=ch.seed)


_MAGIC = b"SAPITCH1"


def dump_channels(ch: ChannelSet, path) -> None:
    """Write G, H, F as little-endian float64 (re, im) pairs, row-major, after a small header."""
    N, M, K = ch.dims
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqq", N, M, K, int(ch.seed)))
        for A in (ch.G, ch.H, ch.F):
            fh.write(np.ascontiguousarray(A, dtype="<c16").tobytes(order="C"))


def load_channels(path) -> ChannelSet:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise InvalidArgument("not a channel dump")
        N, M, K, seed = struct.unpack("<qqqq", fh.read(32))
        mats = []
        for shape in ((M, N), (M, K), (N, K)):
            n = shape[0] * shape[1]
            mats.append(np.frombuffer(fh.read(16 * n), dtype="<c16").reshape(shape).astype(complex))
    return ChannelSet(*mats, seed=seed)
