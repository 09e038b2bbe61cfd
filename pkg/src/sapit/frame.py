"""Tx/RIS frame assembly and received-signal synthesis."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .coding import ConvCode, Interleaver, encode, interleave
from .core import (Constellation, InvalidArgument, RngStream, STREAM_BITS, STREAM_INTERLEAVER,
                   STREAM_NOISE, STREAM_PILOT, as_generator, cgauss, dbm_to_watts, make_psk)


@dataclass(frozen=True)
class FrameConfig:
    N: int
    M: int
    K: int
    N_P: int
    Q: int
    T: int
    tx_const: Constellation = field(default_factory=lambda: make_psk(4))
    ris_const: Constellation = field(default_factory=lambda: make_psk(2))
    power_dbm: float = 12.0
    noise_var: float = 1e-12
    coded: bool = False
    direct_link: bool = True

    def __post_init__(self):
        if min(self.N, self.M, self.K, self.Q, self.T) < 1:
            raise InvalidArgument("N, M, K, Q, T must be positive")
        if not 1 <= self.N_P < self.N:
            raise InvalidArgument("pilot rows must be fewer than N and at least one")

    @property
    def n_data_rows(self) -> int:
        return self.N - self.N_P

    @property
    def power_w(self) -> float:
        return float(dbm_to_watts(self.power_dbm))

    @property
    def symbol_scale(self) -> float:
        """Amplitude applied to unit-power Tx symbols (total power split over K antennas)."""
        return float(np.sqrt(self.power_w / self.K))

    @property
    def tx_coded_bits(self) -> int:
        return self.K * self.Q * self.T * self.tx_const.bits_per_symbol

    @property
    def ris_coded_bits(self) -> int:
        return self.n_data_rows * self.Q * self.ris_const.bits_per_symbol

    def payload_sizes(self, code: ConvCode = ConvCode()):
        """Information bits carried by (Tx, RIS) per block."""
        if not self.coded:
            return self.tx_coded_bits, self.ris_coded_bits
        return code.info_length(self.tx_coded_bits), code.info_length(self.ris_coded_bits)


@dataclass(frozen=True, eq=False)
class CodeContext:
    code: ConvCode
    pi_tx: Interleaver
    pi_ris: Interleaver

    @classmethod
    def for_config(cls, cfg: FrameConfig, rng, code: ConvCode = ConvCode()):
        g = as_generator(rng.child(STREAM_INTERLEAVER) if isinstance(rng, RngStream) else rng)
        return cls(code, Interleaver.random(cfg.tx_coded_bits, g),
                   Interleaver.random(cfg.ris_coded_bits, g))


@dataclass(frozen=True, eq=False)
class FrameData:
    X: np.ndarray          # K x QT, scaled by symbol_scale
    S: np.ndarray          # N x Q, first N_P rows are pilots
    tx_bits: np.ndarray    # payload (info bits when coded)
    ris_bits: np.ndarray
    tx_coded: np.ndarray   # bits actually mapped onto X (after interleaving)
    ris_coded: np.ndarray
    Y: np.ndarray | None = None

    def with_received(self, Y):
        return FrameData(self.X, self.S, self.tx_bits, self.ris_bits, self.tx_coded, self.ris_coded, Y)


def gen_pilots(n_p: int, q: int, phase_set: Constellation, rng) -> np.ndarray:
    if n_p < 1:
        raise InvalidArgument("need at least one pilot row")
    g = as_generator(rng.child(STREAM_PILOT) if isinstance(rng, RngStream) else rng)
    return phase_set.points[g.integers(0, phase_set.size, size=(n_p, q))]


def _to_matrix(symbols, rows):
    return np.reshape(symbols, (rows, -1), order="F")


def build_frames(cfg: FrameConfig, tx_payload, ris_payload, S_P, ctx: CodeContext | None = None) -> FrameData:
    """Encode, interleave and map payloads column-major into X and S_D."""
    tx_payload = np.asarray(tx_payload, dtype=np.int8)
    ris_payload = np.asarray(ris_payload, dtype=np.int8)
    code = ctx.code if ctx is not None else ConvCode()
    n_tx, n_ris = cfg.payload_sizes(code)
    if tx_payload.size != n_tx or ris_payload.size != n_ris:
        raise InvalidArgument(f"payload sizes must be ({n_tx}, {n_ris}), got "
                              f"({tx_payload.size}, {ris_payload.size})")
    if S_P.shape != (cfg.N_P, cfg.Q):
        raise InvalidArgument("pilot matrix has wrong shape")
    if cfg.coded:
        if ctx is None:
            raise InvalidArgument("coded frames need a CodeContext")
        tx_coded = interleave(encode(tx_payload, code), ctx.pi_tx).astype(np.int8)
        ris_coded = interleave(encode(ris_payload, code), ctx.pi_ris).astype(np.int8)
    else:
        tx_coded, ris_coded = tx_payload, ris_payload
    X = cfg.symbol_scale * _to_matrix(cfg.tx_const.modulate(tx_coded), cfg.K)
    S_D = _to_matrix(cfg.ris_const.modulate(ris_coded), cfg.n_data_rows)
    S = np.vstack([S_P, S_D])
    return FrameData(X, S, tx_payload, ris_payload, tx_coded, ris_coded)


def random_frame(cfg: FrameConfig, rng: RngStream, ctx: CodeContext | None = None) -> FrameData:
    code = ctx.code if ctx is not None else ConvCode()
    n_tx, n_ris = cfg.payload_sizes(code)
    g = as_generator(rng.child(STREAM_BITS))
    tx = g.integers(0, 2, n_tx).astype(np.int8)
    ris = g.integers(0, 2, n_ris).astype(np.int8)
    return build_frames(cfg, tx, ris, gen_pilots(cfg.N_P, cfg.Q, cfg.ris_const, rng), ctx)


def expand_phases(S, T):
    """Repeat each RIS column T times so it lines up with the QT symbol columns."""
    return np.repeat(S, T, axis=1)


def noiseless(G, H, F, X, S, T, direct_link=True):
    U = expand_phases(S, T) * (F @ X)
    Z = G @ U
    if direct_link:
        Z = Z + H @ X
    return Z


def synthesize(ch, frame: FrameData, noise_var: float, rng, T: int, direct_link: bool = True) -> np.ndarray:
    """Received block ``y_qt = (G diag(s_q) F + H) x_qt + w_qt`` for all q, t."""
    N, M, K = ch.dims
    if frame.X.shape[0] != K or frame.S.shape[0] != N or frame.X.shape[1] != frame.S.shape[1] * T:
        raise InvalidArgument("frame and channel dimensions disagree")
    Z = noiseless(ch.G, ch.H, ch.F, frame.X, frame.S, T, direct_link)
    g = as_generator(rng.child(STREAM_NOISE) if isinstance(rng, RngStream) else rng)
    return Z + cgauss(g, Z.shape, noise_var)


def dump_matrix_csv(path, A) -> None:
    """One CSV row per matrix row, entries written as Python complex literals."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(A):
            w.writerow([repr(complex(v)) for v in row])


def load_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[complex(v) for v in row] for row in csv.reader(fh)])
