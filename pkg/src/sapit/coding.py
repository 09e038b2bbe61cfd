"""Rate-1/2 convolutional coding with exact log-domain BCJR and bit/symbol conversions.

LLR convention throughout: ``L = ln P(bit = 0) / P(bit = 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import InvalidArgument, as_generator

PROB_FLOOR = 1e-30
LLR_CLIP = 60.0


@dataclass(frozen=True)
class ConvCode:
    generators: tuple = (0o171, 0o133)
    constraint_length: int = 7

    def __post_init__(self):
        for g in self.generators:
            if g >> self.constraint_length:
                raise InvalidArgument("generator degree must be below the constraint length")

    @property
    def memory(self) -> int:
        return self.constraint_length - 1

    @property
    def n_states(self) -> int:
        return 1 << self.memory

    def coded_length(self, n_info: int) -> int:
        return len(self.generators) * (n_info + self.memory)

    def info_length(self, n_coded: int) -> int:
        """Payload size that fills exactly ``n_coded`` coded bits (zero-tail)."""
        n = n_coded // len(self.generators) - self.memory
        if n < 1 or self.coded_length(n) != n_coded:
            raise InvalidArgument(f"{n_coded} coded bits cannot hold a zero-tail codeword")
        return n

    def trellis(self):
        """(next_state[s, u], outputs[s, u, j]) with the newest input in the register MSB."""
        m = self.memory
        s = np.arange(self.n_states)[:, None]
        u = np.arange(2)[None, :]
        reg = (u << m) | s
        nxt = reg >> 1
        outs = np.stack([_parity(reg & g) for g in self.generators], axis=-1)
        return nxt.astype(np.int64), outs.astype(np.int8)


def _parity(x):
    x = np.asarray(x).copy()
    p = np.zeros_like(x)
    while np.any(x):
        p ^= x & 1
        x >>= 1
    return p


def encode(bits, code: ConvCode = ConvCode()) -> np.ndarray:
    """Feedforward encoding with ``memory`` zero tail bits; output streams interleaved per step."""
    bits = np.asarray(bits, dtype=np.int64)
    if bits.size == 0:
        raise InvalidArgument("payload must be non-empty")
    u = np.concatenate([bits, np.zeros(code.memory, dtype=np.int64)])
    m = code.memory
    # Register at step t holds u_t (MSB) ... u_{t-m}.
    padded = np.concatenate([np.zeros(m, dtype=np.int64), u])
    reg = np.zeros(u.size, dtype=np.int64)
    for i in range(m + 1):
        reg |= padded[m - i: m - i + u.size] << (m - i)
    out = np.stack([_parity(reg & g) for g in code.generators], axis=1)
    return out.reshape(-1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class Interleaver:
    perm: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if not np.array_equal(np.sort(p), np.arange(p.size)):
            raise InvalidArgument("interleaver permutation must be a bijection")
        object.__setattr__(self, "perm", p)

    @classmethod
    def random(cls, length: int, rng) -> "Interleaver":
        return cls(as_generator(rng).permutation(length))

    @classmethod
    def identity(cls, length: int) -> "Interleaver":
        return cls(np.arange(length))

    def __len__(self):
        return self.perm.size


def interleave(x, pi: Interleaver):
    x = np.asarray(x)
    if x.shape[0] != len(pi):
        raise InvalidArgument("length mismatch with interleaver")
    return x[pi.perm]


def deinterleave(x, pi: Interleaver):
    x = np.asarray(x)
    if x.shape[0] != len(pi):
        raise InvalidArgument("length mismatch with interleaver")
    out = np.empty_like(x)
    out[pi.perm] = x
    return out


def uniform_priors(slots, constellation) -> np.ndarray:
    shape = (slots,) if np.isscalar(slots) else tuple(slots)
    return np.full(shape + (constellation.size,), 1.0 / constellation.size)


def symbol_logp_to_bit_llrs(logp, labels) -> np.ndarray:
    """Exact bit marginals from (unnormalized) symbol log-probabilities.

    ``logp`` has shape (..., |C|); returns (..., bits_per_symbol).
    """
    logp = np.asarray(logp, dtype=float)
    labels = np.asarray(labels)
    nb = labels.shape[1]
    out = np.empty(logp.shape[:-1] + (nb,))
    for i in range(nb):
        zero = labels[:, i] == 0
        out[..., i] = _lse(logp[..., zero], -1) - _lse(logp[..., ~zero], -1)
    return np.clip(out, -LLR_CLIP, LLR_CLIP)


def symbols_to_bit_llrs(probs, labels) -> np.ndarray:
    probs = np.maximum(np.asarray(probs, dtype=float), PROB_FLOOR)
    return symbol_logp_to_bit_llrs(np.log(probs), labels)


def bit_llrs_to_symbol_logp(llrs, labels) -> np.ndarray:
    """Product-form symbol log-priors (normalized) from independent bit LLRs (..., nb)."""
    llrs = np.asarray(llrs, dtype=float)
    labels = np.asarray(labels)
    lp0 = -np.logaddexp(0.0, -llrs)  # ln P(b = 0)
    lp1 = -np.logaddexp(0.0, llrs)
    logp = lp0[..., None, :] * (labels == 0) + lp1[..., None, :] * (labels == 1)
    logp = logp.sum(-1)
    return logp - _lse(logp, -1)[..., None]


def bit_llrs_to_symbol_priors(llrs, labels) -> np.ndarray:
    p = np.exp(bit_llrs_to_symbol_logp(llrs, labels))
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum(-1, keepdims=True)


def _lse(a, axis):
    a = np.asarray(a)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


@numba.njit(cache=True)
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@numba.njit(cache=True)
def _bcjr_core(llr, nxt, outs, n_info, memory):
    n_states = nxt.shape[0]
    n_out = outs.shape[2]
    steps = llr.shape[0] // n_out
    L = llr.reshape(steps, n_out)
    # gamma[t, s, u] = sum_j (1 - 2 c_j) L_j / 2
    alpha = np.full((steps + 1, n_states), -np.inf)
    beta = np.full((steps + 1, n_states), -np.inf)
    alpha[0, 0] = 0.0
    beta[steps, 0] = 0.0
    for t in range(steps):
        umax = 2 if t < n_info else 1
        for s in range(n_states):
            a = alpha[t, s]
            if a == -np.inf:
                continue
            for u in range(umax):
                g = 0.0
                for j in range(n_out):
                    g += (0.5 - outs[s, u, j]) * L[t, j]
                ns = nxt[s, u]
                alpha[t + 1, ns] = _lse2(alpha[t + 1, ns], a + g)
        # Normalize to keep magnitudes bounded.
        m = -np.inf
        for s in range(n_states):
            if alpha[t + 1, s] > m:
                m = alpha[t + 1, s]
        for s in range(n_states):
            alpha[t + 1, s] -= m
    for t in range(steps - 1, -1, -1):
        umax = 2 if t < n_info else 1
        for s in range(n_states):
            acc = -np.inf
            for u in range(umax):
                ns = nxt[s, u]
                b = beta[t + 1, ns]
                if b == -np.inf:
                    continue
                g = 0.0
                for j in range(n_out):
                    g += (0.5 - outs[s, u, j]) * L[t, j]
                acc = _lse2(acc, b + g)
            beta[t, s] = acc
        m = -np.inf
        for s in range(n_states):
            if beta[t, s] > m:
                m = beta[t, s]
        for s in range(n_states):
            beta[t, s] -= m
    ext = np.zeros((steps, n_out))
    app_info = np.zeros(n_info)
    for t in range(steps):
        umax = 2 if t < n_info else 1
        num = np.full(n_out, -np.inf)
        den = np.full(n_out, -np.inf)
        u0 = -np.inf
        u1 = -np.inf
        for s in range(n_states):
            a = alpha[t, s]
            if a == -np.inf:
                continue
            for u in range(umax):
                ns = nxt[s, u]
                b = beta[t + 1, ns]
                if b == -np.inf:
                    continue
                g = 0.0
                for j in range(n_out):
                    g += (0.5 - outs[s, u, j]) * L[t, j]
                tot = a + g + b
                for j in range(n_out):
                    # Drop bit j's own channel term to get its extrinsic value.
                    e = tot - (0.5 - outs[s, u, j]) * L[t, j]
                    if outs[s, u, j] == 0:
                        num[j] = _lse2(num[j], e)
                    else:
                        den[j] = _lse2(den[j], e)
                if u == 0:
                    u0 = _lse2(u0, tot)
                else:
                    u1 = _lse2(u1, tot)
        for j in range(n_out):
            if num[j] == -np.inf and den[j] == -np.inf:
                ext[t, j] = 0.0
            else:
                ext[t, j] = num[j] - den[j]
        if t < n_info:
            app_info[t] = u0 - u1
    return ext.reshape(-1), app_info


def bcjr_decode(llrs, code: ConvCode = ConvCode()):
    """Exact forward-backward decoding of a zero-tail codeword.

    Returns ``(extrinsic coded-bit LLRs, a-posteriori info-bit LLRs)``.
    """
    llrs = np.clip(np.asarray(llrs, dtype=float), -LLR_CLIP, LLR_CLIP)
    n_info = code.info_length(llrs.size)
    nxt, outs = code.trellis()
    ext, app = _bcjr_core(llrs, nxt, outs, n_info, code.memory)
    return np.clip(ext, -LLR_CLIP, LLR_CLIP), app


def bcjr_extrinsic(llrs_in, code: ConvCode = ConvCode(), pi: Interleaver | None = None):
    """Extrinsic LLRs for interleaved coded bits.

    ``llrs_in`` is in channel (interleaved) order; the output is in the same order.
    """
    llrs = deinterleave(llrs_in, pi) if pi is not None else np.asarray(llrs_in, dtype=float)
    ext, _ = bcjr_decode(llrs, code)
    return interleave(ext, pi) if pi is not None else ext


def hard_info_bits(app_llrs) -> np.ndarray:
    return (np.asarray(app_llrs) < 0).astype(np.int8)
