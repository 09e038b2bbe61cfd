"""Constellations, unit conversions and seeded randomness shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's precondition."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def gray(n):
    return np.asarray(n) ^ (np.asarray(n) >> 1)


def _bits(values, nbits):
    values = np.asarray(values)
    return ((values[:, None] >> np.arange(nbits - 1, -1, -1)) & 1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class Constellation:
    """A finite unit-power symbol alphabet with a bijective Gray bit labeling.

    ``labels[i]`` is the bit pattern (MSB first) of ``points[i]``.
    """

    points: np.ndarray
    labels: np.ndarray
    kind: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex)
        lab = np.asarray(self.labels, dtype=np.int8)
        if not _is_pow2(pts.size):
            raise InvalidArgument(f"constellation size {pts.size} is not a power of two")
        if lab.shape != (pts.size, self.bits_per_symbol):
            raise InvalidArgument("labels must have one bit row per point")
        codes = lab @ (1 << np.arange(self.bits_per_symbol - 1, -1, -1))
        if np.unique(codes).size != pts.size:
            raise InvalidArgument("labels are not a bijection")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def bits_per_symbol(self) -> int:
        return int(np.log2(self.points.size))

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.points) ** 2))

    def modulate(self, bits) -> np.ndarray:
        """Map a flat bit array (length multiple of bits/symbol) to symbols."""
        bits = np.asarray(bits, dtype=np.int64).reshape(-1, self.bits_per_symbol)
        codes = bits @ (1 << np.arange(self.bits_per_symbol - 1, -1, -1))
        lookup = np.empty(self.size, dtype=np.int64)
        lookup[self.labels @ (1 << np.arange(self.bits_per_symbol - 1, -1, -1))] = np.arange(self.size)
        return self.points[lookup[codes]]

    def nearest(self, z) -> np.ndarray:
        """Index of the closest point for every entry of ``z``."""
        z = np.asarray(z)
        return np.argmin(np.abs(z[..., None] - self.points) ** 2, axis=-1)

    def demodulate_hard(self, z) -> np.ndarray:
        return self.labels[self.nearest(np.ravel(z))].reshape(-1)


def make_psk(order: int) -> Constellation:
    """Gray-labeled PSK with ``order`` points on the unit circle, first point at 1."""
    if not isinstance(order, (int, np.integer)) or order < 2 or not _is_pow2(order):
        raise InvalidArgument(f"PSK order must be a power of two >= 2, got {order}")
    k = np.arange(order)
    pts = np.exp(2j * np.pi * k / order)
    if order == 2:
        pts = np.array([1.0 + 0j, -1.0 + 0j])
    elif order == 4:
        pts = np.array([1, 1j, -1, -1j], dtype=complex)
    nbits = int(np.log2(order))
    return Constellation(pts, _bits(gray(k), nbits), "PSK")


def make_qam(order: int) -> Constellation:
    """Square Gray-labeled QAM normalized to unit average power."""
    side = int(round(np.sqrt(order)))
    if order < 4 or side * side != order or not _is_pow2(order):
        raise InvalidArgument(f"unsupported QAM order {order}; use a square power of two")
    half = int(np.log2(side))
    levels = 2 * np.arange(side) - (side - 1)
    lab_axis = _bits(gray(np.arange(side)), half)
    ii, qq = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    ii, qq = ii.ravel(), qq.ravel()
    pts = (levels[ii] + 1j * levels[qq]) / np.sqrt(2 * (order - 1) / 3)
    labels = np.concatenate([lab_axis[ii], lab_axis[qq]], axis=1)
    return Constellation(pts, labels, "QAM")


def ris_phase_set(angles) -> Constellation:
    """RIS reflection alphabet ``{exp(j*theta)}`` with Gray labels over the given angle order."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if not _is_pow2(angles.size):
        raise InvalidArgument("number of RIS phases must be a power of two")
    # Snap cos/sin round-off so that e.g. angle pi gives exactly -1.
    re, im = np.cos(angles), np.sin(angles)
    re[np.abs(re) < 1e-15] = 0.0
    im[np.abs(im) < 1e-15] = 0.0
    nbits = int(np.log2(angles.size))
    return Constellation(re + 1j * im, _bits(gray(np.arange(angles.size)), nbits), "PSK")


def make_constellation(name: str) -> Constellation:
    """Parse names such as ``bpsk``, ``qpsk``, ``8psk``, ``16qam``."""
    key = name.strip().lower()
    if key == "bpsk":
        return make_psk(2)
    if key == "qpsk":
        return make_psk(4)
    if key.endswith("psk"):
        return make_psk(int(key[:-3]))
    if key.endswith("qam"):
        return make_qam(int(key[:-3]))
    raise InvalidArgument(f"unknown constellation {name!r}")


def dbm_to_watts(p_dbm):
    return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(p_w):
    return 10.0 * np.log10(np.asarray(p_w, dtype=float)) + 30.0


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def noise_power(density_dbm_hz: float = -150.0, bandwidth_hz: float = 1e6) -> float:
    """Thermal noise power in watts over ``bandwidth_hz``."""
    return float(dbm_to_watts(density_dbm_hz + 10.0 * np.log10(bandwidth_hz)))


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator so that streams for
    different trials never depend on scheduling order.
    """

    seed: int
    stream_id: int = 0
    path: tuple = field(default=())

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & ((1 << 64) - 1),
                                    spawn_key=(int(self.stream_id),) + self.path)
        return np.random.Generator(np.random.Philox(ss))


# Named sub-streams so independent draws never share counters.
STREAM_CHANNEL, STREAM_NOISE, STREAM_PILOT, STREAM_BITS, STREAM_CSI, STREAM_INTERLEAVER = range(6)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def cgauss(rng, shape, var=1.0) -> np.ndarray:
    """Circularly symmetric complex Gaussian samples with variance ``var``."""
    g = as_generator(rng)
    scale = np.sqrt(np.asarray(var, dtype=float) / 2.0)
    return scale * (g.standard_normal(shape) + 1j * g.standard_normal(shape))


def sample_cgaussian(rng, mean=0.0, var=1.0, size=None):
    if np.any(np.asarray(var) < 0):
        raise InvalidArgument("variance must be nonnegative")
    shape = () if size is None else size
    out = mean + cgauss(rng, shape, var)
    if size is None:
        return complex(out)
    return out
