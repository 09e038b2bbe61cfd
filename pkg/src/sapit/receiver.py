"""Message-passing bilinear detector for joint Tx-symbol / RIS-phase recovery.

All quantities are handled in the normalized domain: unit-power Tx symbols,
``||G||^2/N = ||H||^2/K = 1`` and ``||F||^2/K = zeta``.  ``run`` performs
that rescaling itself from the raw channels and received block.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .channel import normalize, scale_like
from .coding import (bcjr_decode, bit_llrs_to_symbol_priors, deinterleave,
                     hard_info_bits, interleave, symbol_logp_to_bit_llrs)
from .core import InvalidArgument

EPS_V = 1e-12


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scalar-channel kernels


@numba.njit(cache=True, inline="always")
def _abs2(z):
    return z.real * z.real + z.imag * z.imag


@numba.njit(cache=True)
def _softmax_rows(L):
    n, S = L.shape
    W = np.empty_like(L)
    bad = False
    for i in range(n):
        m = -np.inf
        for j in range(S):
            if L[i, j] > m:
                m = L[i, j]
        if not np.isfinite(m):
            for j in range(S):
                W[i, j] = 1.0 / S
            bad = True
            continue
        tot = 0.0
        for j in range(S):
            e = np.exp(L[i, j] - m)
            W[i, j] = e
            tot += e
        for j in range(S):
            W[i, j] /= tot
    return W, bad


def _softmax(logw, axis=-1):
    """Normalize log-weights along ``axis``; rows with no finite weight become uniform (flagged)."""
    logw = np.asarray(logw, dtype=float)
    if axis in (-1, logw.ndim - 1):
        S = logw.shape[-1]
        W, bad = _softmax_rows(np.ascontiguousarray(logw.reshape(-1, S)))
        return W.reshape(logw.shape), bool(bad)
    m = np.max(logw, axis=axis, keepdims=True)
    bad = ~np.isfinite(m)
    m = np.where(bad, 0.0, m)
    w = np.exp(logw - m)
    s = w.sum(axis=axis, keepdims=True)
    underflow = (s <= 0) | bad
    if np.any(underflow):
        w = np.where(underflow, 1.0, w)
        s = w.sum(axis=axis, keepdims=True)
    return w / s, bool(np.any(underflow))


@numba.njit(cache=True)
def _uc_kernel(d, p, pi, points, tau_d, tau_p):
    """Fused u and c mixture posteriors over flat arrays; ``pi`` is (n, |S|)."""
    n = d.shape[0]
    S = points.shape[0]
    tbar = tau_p * tau_d / (tau_p + tau_d)
    tsum = tau_p + tau_d
    mu_u = np.empty(n, dtype=np.complex128)
    mu_c = np.empty(n, dtype=np.complex128)
    var_u = np.empty(n)
    var_c = np.empty(n)
    lw = np.empty(S)
    bad = False
    for i in range(n):
        m = -np.inf
        for j in range(S):
            if pi[i, j] > 0:
                lw[j] = np.log(pi[i, j]) - _abs2(d[i] - p[i] * points[j]) / tsum
            else:
                lw[j] = -np.inf
            if lw[j] > m:
                m = lw[j]
        if not np.isfinite(m):
            bad = True
            for j in range(S):
                lw[j] = 0.0
            m = 0.0
        tot = 0.0
        for j in range(S):
            lw[j] = np.exp(lw[j] - m)
            tot += lw[j]
        au = 0j
        ac = 0j
        su = 0.0
        sc = 0.0
        for j in range(S):
            w = lw[j] / tot
            mu = tbar * (p[i] * points[j] / tau_p + d[i] / tau_d)
            mc = tbar * (d[i] * np.conj(points[j]) / tau_d + p[i] / tau_p)
            au += w * mu
            ac += w * mc
            su += w * (mu.real * mu.real + mu.imag * mu.imag)
            sc += w * (mc.real * mc.real + mc.imag * mc.imag)
        mu_u[i] = au
        mu_c[i] = ac
        var_u[i] = max(tbar + su - (au.real * au.real + au.imag * au.imag), 0.0)
        var_c[i] = max(tbar + sc - (ac.real * ac.real + ac.imag * ac.imag), 0.0)
    return mu_u, var_u, mu_c, var_c, bad


def posterior_uc(d, tau_d, p, tau_p, pi, points):
    """Both mixture posteriors in one pass: ``(mu_u, var_u, mu_c, var_c, underflow_flag)``."""
    d = np.asarray(d, dtype=complex)
    p = np.broadcast_to(np.asarray(p, dtype=complex), d.shape)
    points = np.asarray(points, dtype=complex)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), d.shape + (points.size,))
    out = _uc_kernel(np.ascontiguousarray(d.reshape(-1)), np.ascontiguousarray(p.reshape(-1)),
                     np.ascontiguousarray(pi.reshape(-1, points.size)), points, float(tau_d), float(tau_p))
    mu_u, var_u, mu_c, var_c, bad = out
    sh = d.shape
    return mu_u.reshape(sh), var_u.reshape(sh), mu_c.reshape(sh), var_c.reshape(sh), bool(bad)


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _mixture_weights(d, tau_d, p, tau_p, pi, points):
    ps = p[..., None] * points
    logw = _log(pi) - np.abs(d[..., None] - ps) ** 2 / (tau_p + tau_d)
    return _softmax(logw)


def posterior_u(d, tau_d, p, tau_p, pi, points, return_flag=False):
    """Mean and variance of ``u`` under ``(sum_s pi(s) CN(u; p s, tau_p)) CN(u; d, tau_d)``.

    ``d``, ``p`` have any common shape ``B``; ``pi`` has shape ``B + (|S|,)``.
    """
    d = np.asarray(d, dtype=complex)
    p = np.asarray(p, dtype=complex)
    points = np.asarray(points)
    tbar = tau_p * tau_d / (tau_p + tau_d)
    w, flag = _mixture_weights(d, tau_d, p, tau_p, pi, points)
    m = tbar * (p[..., None] * points / tau_p + d[..., None] / tau_d)
    mean = np.sum(w * m, axis=-1)
    var = np.sum(w * (tbar + np.abs(m) ** 2), axis=-1) - np.abs(mean) ** 2
    var = np.maximum(var, 0.0)
    return (mean, var, flag) if return_flag else (mean, var)


def posterior_c(d, tau_d, p, tau_p, pi, points, return_flag=False):
    """Mean and variance of ``c`` under ``(sum_s pi(s) CN(c; d/s, tau_d)) CN(c; p, tau_p)``, |s| = 1."""
    d = np.asarray(d, dtype=complex)
    p = np.asarray(p, dtype=complex)
    points = np.asarray(points)
    tbar = tau_p * tau_d / (tau_p + tau_d)
    w, flag = _mixture_weights(d, tau_d, p, tau_p, pi, points)
    m = tbar * (d[..., None] * np.conj(points) / tau_d + p[..., None] / tau_p)
    mean = np.sum(w * m, axis=-1)
    var = np.sum(w * (tbar + np.abs(m) ** 2), axis=-1) - np.abs(mean) ** 2
    var = np.maximum(var, 0.0)
    return (mean, var, flag) if return_flag else (mean, var)


def x_loglik(r, tau_r, o, tau_o, points):
    """Unnormalized log-likelihood of each constellation point from the two AWGN observations."""
    ll = 0.0
    if r is not None:
        ll = ll - np.abs(np.asarray(r)[..., None] - points) ** 2 / tau_r
    if o is not None and np.isfinite(tau_o):
        ll = ll - np.abs(np.asarray(o)[..., None] - points) ** 2 / tau_o
    if np.isscalar(ll):
        shape = np.shape(r if r is not None else o)
        ll = np.zeros(shape + (len(points),))
    return ll


def posterior_x(r, tau_r, o, tau_o, beta, points, return_probs=False):
    """Discrete posterior ``beta(x) CN(x; r, tau_r) CN(x; o, tau_o)`` reduced to mean and variance.

    Pass ``r=None`` when the direct link is blocked.
    """
    points = np.asarray(points)
    logp = x_loglik(r, tau_r, o, tau_o, points) + _log(beta)
    prob, _ = _softmax(logp)
    mean = prob @ points if prob.ndim == 1 else np.einsum("...s,s->...", prob, points)
    var = np.maximum(np.einsum("...s,s->...", prob, np.abs(points) ** 2) - np.abs(mean) ** 2, 0.0)
    if return_probs:
        return mean, var, prob
    return mean, var


def s_loglik(d, p, tau, points):
    """Per-slot log-likelihoods ``ln CN(d_t; p_t s, tau)`` up to a constant, shape B + (T, |S|)."""
    return -np.abs(np.asarray(d)[..., None] - np.asarray(p)[..., None] * points) ** 2 / tau


def compute_pi(alpha, d, p, tau_d, tau_p, points):
    """Extrinsic RIS-symbol beliefs per slot: ``pi_t(s) ∝ alpha(s) prod_{j != t} CN(d_j; p_j s, tau_d + tau_p)``.

    ``d``, ``p`` have shape ``B + (T,)``, ``alpha`` has ``B + (|S|,)``; returns ``B + (T, |S|)``.
    """
    ll = s_loglik(d, p, tau_d + tau_p, points)
    tot = ll.sum(axis=-2, keepdims=True)
    logpi = _log(alpha)[..., None, :] + (tot - ll)
    return _softmax(logpi)[0]


def posterior_s(d, p, tau_d, tau_p, alpha, points):
    """Mean, variance and full posterior of ``s`` from all T slots and the decoder prior."""
    ll = s_loglik(d, p, tau_d + tau_p, points).sum(axis=-2)
    prob, _ = _softmax(_log(alpha) + ll)
    mean = np.einsum("...s,s->...", prob, points)
    var = np.maximum(np.einsum("...s,s->...", prob, np.abs(points) ** 2) - np.abs(mean) ** 2, 0.0)
    return mean, var, prob


@numba.njit(cache=True)
def _x_kernel(r, inv_r, o, inv_o, beta, points):
    n, S = beta.shape
    prob = np.empty((n, S))
    mean = np.empty(n, dtype=np.complex128)
    var = np.empty(n)
    p2 = np.empty(S)
    for j in range(S):
        p2[j] = points[j].real ** 2 + points[j].imag ** 2
    for i in range(n):
        m = -np.inf
        for j in range(S):
            if beta[i, j] > 0:
                v = np.log(beta[i, j]) - _abs2(r[i] - points[j]) * inv_r - _abs2(o[i] - points[j]) * inv_o
            else:
                v = -np.inf
            prob[i, j] = v
            if v > m:
                m = v
        tot = 0.0
        for j in range(S):
            e = np.exp(prob[i, j] - m) if np.isfinite(m) else 1.0
            prob[i, j] = e
            tot += e
        mu = 0j
        s2 = 0.0
        for j in range(S):
            prob[i, j] /= tot
            mu += prob[i, j] * points[j]
            s2 += prob[i, j] * p2[j]
        mean[i] = mu
        var[i] = max(s2 - (mu.real * mu.real + mu.imag * mu.imag), 0.0)
    return mean, var, prob


def _x_posterior_fast(r, tau_r, o, tau_o, beta, points):
    """Same result as ``posterior_x(..., return_probs=True)`` in one compiled pass."""
    shape = o.shape
    o1 = np.ascontiguousarray(o.reshape(-1))
    inv_o = 1.0 / tau_o if np.isfinite(tau_o) else 0.0
    if r is None:
        r1, inv_r = o1, 0.0
    else:
        r1, inv_r = np.ascontiguousarray(r.reshape(-1)), 1.0 / tau_r
    b = np.ascontiguousarray(beta.reshape(-1, points.size), dtype=float)
    mean, var, prob = _x_kernel(r1, inv_r, o1, inv_o, b, np.asarray(points, dtype=complex))
    return mean.reshape(shape), var.reshape(shape), prob.reshape(shape + (points.size,))


@numba.njit(cache=True)
def _s_kernel(d, p, inv_tau, alpha, points):
    n, T = d.shape
    S = points.shape[0]
    pi = np.empty((n, T, S))
    prob = np.empty((n, S))
    mean = np.empty(n, dtype=np.complex128)
    var = np.empty(n)
    ll = np.empty((T, S))
    tot = np.empty(S)
    for i in range(n):
        for j in range(S):
            tot[j] = np.log(alpha[i, j]) if alpha[i, j] > 0 else -np.inf
            for t in range(T):
                ll[t, j] = -_abs2(d[i, t] - p[i, t] * points[j]) * inv_tau
                tot[j] += ll[t, j]
        # full posterior
        m = -np.inf
        for j in range(S):
            if tot[j] > m:
                m = tot[j]
        z = 0.0
        for j in range(S):
            e = np.exp(tot[j] - m) if np.isfinite(m) else 1.0
            prob[i, j] = e
            z += e
        mu = 0j
        s2 = 0.0
        for j in range(S):
            prob[i, j] /= z
            mu += prob[i, j] * points[j]
            s2 += prob[i, j] * (points[j].real ** 2 + points[j].imag ** 2)
        mean[i] = mu
        var[i] = max(s2 - (mu.real * mu.real + mu.imag * mu.imag), 0.0)
        # extrinsic per slot: leave slot t out
        for t in range(T):
            m = -np.inf
            for j in range(S):
                v = tot[j] - ll[t, j] if np.isfinite(tot[j]) else -np.inf
                pi[i, t, j] = v
                if v > m:
                    m = v
            z = 0.0
            for j in range(S):
                e = np.exp(pi[i, t, j] - m) if np.isfinite(m) else 1.0
                pi[i, t, j] = e
                z += e
            for j in range(S):
                pi[i, t, j] /= z
    return pi, mean, var, prob


def _s_posterior_fast(d, p, tau, alpha, points):
    """``compute_pi`` and ``posterior_s`` fused: returns ``(pi, mean, var, prob)``."""
    B, T, S = d.shape[:-1], d.shape[-1], points.size
    pi, mean, var, prob = _s_kernel(np.ascontiguousarray(d.reshape(-1, T)), np.ascontiguousarray(p.reshape(-1, T)),
                                    1.0 / tau, np.ascontiguousarray(alpha.reshape(-1, S), dtype=float),
                                    np.asarray(points, dtype=complex))
    return pi.reshape(B + (T, S)), mean.reshape(B), var.reshape(B), prob.reshape(B + (S,))


# ---------------------------------------------------------------------------
# linear steps


def moduleA_to_u(mu_u, b, tau_b, G, Y, noise_var, g2=None, Gh=None):
    N = G.shape[1]
    g2 = np.vdot(G, G).real if g2 is None else g2
    Gh = G.conj().T if Gh is None else Gh
    tau_d = N * (noise_var + tau_b) / g2
    d = mu_u + (N / g2) * (Gh @ (Y - b))
    return d, tau_d


def moduleB_to_c(mu_x, mu_c, p_prev, tau_p_prev, v_x, F, f2=None, eps=EPS_V):
    N = F.shape[0]
    f2 = np.vdot(F, F).real if f2 is None else f2
    tau_p = max(f2 * v_x / N, eps)
    p = F @ mu_x - (tau_p / max(tau_p_prev, eps)) * (mu_c - p_prev)
    return p, tau_p


def direct_observation(mu_x, b, tau_b, H, Y, noise_var, h2=None, Hh=None):
    K = H.shape[1]
    h2 = np.vdot(H, H).real if h2 is None else h2
    Hh = H.conj().T if Hh is None else Hh
    tau_r = K * (noise_var + tau_b) / h2
    r = mu_x + (K / h2) * (Hh @ (Y - b))
    return r, tau_r


def ris_observation(mu_x, mu_c, p, tau_p, v_c, F, f2=None, eps=EPS_V, Fh=None):
    """Returns ``(o, tau_o, clamped)``."""
    K = F.shape[1]
    f2 = np.vdot(F, F).real if f2 is None else f2
    Fh = F.conj().T if Fh is None else Fh
    gap = tau_p - v_c
    clamped = gap <= eps
    gap = max(gap, eps)
    tau_o = K * tau_p ** 2 / (f2 * gap)
    o = mu_x + (K / f2) * (tau_p / gap) * (Fh @ (mu_c - p))
    return o, tau_o, clamped


def x_observations(mu_x, b, tau_b, mu_c, p, tau_p, v_c, H, F, Y, noise_var, direct_link=True):
    """Steps 5-6: ``(r, tau_r, o, tau_o)``; ``r`` and ``tau_r`` are None without a direct link."""
    r = tau_r = None
    if direct_link:
        r, tau_r = direct_observation(mu_x, b, tau_b, H, Y, noise_var)
    o, tau_o, _ = ris_observation(mu_x, mu_c, p, tau_p, v_c, F)
    return r, tau_r, o, tau_o


def update_b(mu_u, mu_x, v_u, v_x, b_prev, tau_b_prev, G, H, Y, noise_var, direct_link=True, g2=None, h2=None):
    M = G.shape[0]
    g2 = np.vdot(G, G).real if g2 is None else g2
    tau_b = g2 * v_u / M
    z = G @ mu_u
    if direct_link:
        h2 = np.vdot(H, H).real if h2 is None else h2
        tau_b += h2 * v_x / M
        z = z + H @ mu_x
    b = z - tau_b / (noise_var + tau_b_prev) * (Y - b_prev)
    return b, tau_b


# ---------------------------------------------------------------------------
# driver


@dataclass
class ReceiverConfig:
    max_iter: int = 50
    tol: float = 1e-4          # <= 0 runs exactly max_iter iterations
    mode: str = "uncoded"      # uncoded | joint | separate
    direct_link: bool = True
    genie: str = "none"        # none | known_S | known_X
    damping: float = 1.0
    eps_v: float = EPS_V
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.mode not in ("uncoded", "joint", "separate"):
            raise InvalidArgument(f"unknown mode {self.mode!r}")
        if self.genie not in ("none", "known_S", "known_X"):
            raise InvalidArgument(f"unknown genie {self.genie!r}")
        if not 0 < self.damping <= 1:
            raise InvalidArgument("damping must lie in (0, 1]")


@dataclass
class ReceiverState:
    mu_x: np.ndarray
    mu_u: np.ndarray
    mu_c: np.ndarray
    p: np.ndarray
    d: np.ndarray
    b: np.ndarray
    v_x: float
    v_u: float
    v_c: float
    v_s: float
    tau_b: float
    tau_p: float
    tau_d: float = np.nan
    tau_r: float = np.nan
    tau_o: float = np.nan
    r: np.ndarray | None = None
    o: np.ndarray | None = None
    pi: np.ndarray | None = None       # N x Q x T x |S|
    alpha: np.ndarray | None = None    # N_D x Q x |S|
    beta: np.ndarray | None = None     # K x QT x |X|
    mu_s: np.ndarray | None = None     # N x Q
    s_prob: np.ndarray | None = None   # N_D x Q x |S|
    x_prob: np.ndarray | None = None   # K x QT x |X|


@dataclass
class DetectionResult:
    mu_x: np.ndarray
    mu_s: np.ndarray
    x_idx: np.ndarray
    s_idx: np.ndarray
    tx_bits: np.ndarray
    ris_bits: np.ndarray
    trace: list
    iterations: int
    flags: set = field(default_factory=set)

    def trace_columns(self):
        keys = ["iteration", "v_x", "v_u", "v_c", "v_s", "tau_d", "tau_p", "tau_o", "tau_r", "tau_b",
                "mse_x", "mse_s"]
        return keys, [[row.get(k, np.nan) for k in keys] for row in self.trace]


@dataclass(frozen=True, eq=False)
class Problem:
    """Normalized detection problem handed to the iterations."""

    Y: np.ndarray
    G: np.ndarray
    H: np.ndarray
    F: np.ndarray
    noise_var: float
    S_P: np.ndarray
    T: int
    tx_points: np.ndarray
    ris_points: np.ndarray
    zeta: float


def normalized_problem(Y, channels, fcfg, S_P, reference=None):
    """Rescale a raw block to unit-power symbols and normalized channels.

    ``reference`` fixes the scaling (useful when ``channels`` are estimates);
    by default it is derived from ``channels`` themselves.
    """
    nc = normalize(channels) if reference is None else scale_like(channels, reference)
    scale = nc.a * fcfg.symbol_scale
    return Problem(Y / scale, nc.G, nc.H, nc.F, fcfg.noise_var / scale ** 2, np.asarray(S_P),
                   fcfg.T, fcfg.tx_const.points, fcfg.ris_const.points, nc.zeta)


def init_state(prob: Problem, direct_link=True, eps=EPS_V) -> ReceiverState:
    N, K = prob.F.shape
    M = prob.G.shape[0]
    QT = prob.Y.shape[1]
    Q = QT // prob.T
    n_p = prob.S_P.shape[0]
    ns = prob.ris_points.size
    f2 = np.vdot(prob.F, prob.F).real
    v_x = 1.0
    v_u = v_c = tau_p = max(f2 / N * v_x, eps)
    tau_b = np.vdot(prob.G, prob.G).real / M * v_u
    if direct_link:
        tau_b += np.vdot(prob.H, prob.H).real / M * v_x
    pi = np.full((N, Q, prob.T, ns), 1.0 / ns)
    pi[:n_p] = _one_hot(prob.S_P, prob.ris_points)[:, :, None, :]
    zN = np.zeros((N, QT), dtype=complex)
    return ReceiverState(
        mu_x=np.zeros((K, QT), dtype=complex), mu_u=zN.copy(), mu_c=zN.copy(), p=zN.copy(), d=zN.copy(),
        b=np.zeros((M, QT), dtype=complex), v_x=v_x, v_u=v_u, v_c=v_c, v_s=1.0, tau_b=tau_b, tau_p=tau_p,
        pi=pi, alpha=np.full((N - n_p, Q, ns), 1.0 / ns),
        beta=np.full((K, QT, prob.tx_points.size), 1.0 / prob.tx_points.size),
        mu_s=np.vstack([prob.S_P, np.zeros((N - n_p, Q), dtype=complex)]))


def _one_hot(values, points):
    idx = np.argmin(np.abs(np.asarray(values)[..., None] - points), axis=-1)
    return np.eye(points.size)[idx]


def _bit_order(arr):
    """(rows, cols, nb) -> flat coded-bit order (symbols column-major, bits MSB first)."""
    return np.transpose(arr, (1, 0, 2)).reshape(-1)


def _from_bit_order(flat, rows, cols, nb):
    return np.transpose(flat.reshape(cols, rows, nb), (1, 0, 2))


def decode_symbols(ll, labels, code, pi):
    """Run one decoder on symbol log-likelihoods of shape (rows, cols, |C|).

    Symbols are read column-major, matching the frame mapping.  Returns
    ``(extrinsic symbol priors, info-bit APP LLRs)``.
    """
    rows, cols, _ = ll.shape
    nb = labels.shape[1]
    llr = _bit_order(symbol_logp_to_bit_llrs(ll, labels))
    ext, app = bcjr_decode(deinterleave(llr, pi), code)
    ext = _from_bit_order(interleave(ext, pi), rows, cols, nb)
    return bit_llrs_to_symbol_priors(ext, labels), app


def run(Y, channels, fcfg, S_P, rcfg: ReceiverConfig = ReceiverConfig(), ctx=None, truth=None,
        reference=None) -> DetectionResult:
    """Iterate the detector on one received block.

    ``truth`` (a FrameData) enables per-iteration MSE traces and the genie modes.
    """
    if rcfg.mode != "uncoded" and ctx is None:
        raise InvalidArgument("coded modes need a CodeContext")
    if rcfg.genie != "none" and truth is None:
        raise InvalidArgument("genie modes need the true frame")
    prob = normalized_problem(Y, channels, fcfg, S_P, reference)
    return iterate(prob, fcfg, rcfg, ctx, truth)


def iterate(prob: Problem, fcfg, rcfg: ReceiverConfig, ctx=None, truth=None) -> DetectionResult:
    eps = rcfg.eps_v
    direct = rcfg.direct_link
    G, H, F, Y, sw = prob.G, prob.H, prob.F, prob.Y, prob.noise_var
    N, K = F.shape
    M = G.shape[0]
    T = prob.T
    QT = Y.shape[1]
    Q = QT // T
    n_p = prob.S_P.shape[0]
    nd = N - n_p
    sp, xp = prob.ris_points, prob.tx_points
    g2, h2, f2 = np.vdot(G, G).real, np.vdot(H, H).real, np.vdot(F, F).real
    Gh, Hh, Fh = (A.conj().T for A in (G, H, F))
    st = init_state(prob, direct, eps)
    flags = set()
    trace = []

    X_true = S_true = None
    if truth is not None:
        X_true = truth.X / fcfg.symbol_scale
        S_true = truth.S[n_p:]
    if rcfg.genie == "known_S":
        st.pi[n_p:] = _one_hot(S_true, sp)[:, :, None, :]
        st.alpha = _one_hot(S_true, sp)
    if rcfg.genie == "known_X":
        st.beta = _one_hot(X_true, xp)

    tau_b_init = st.tau_b
    tau_p_prev = st.tau_p
    p_prev = st.p
    b_prev, tau_b_prev = st.b, st.tau_b
    joint = rcfg.mode == "joint"
    it = 0
    for it in range(1, rcfg.max_iter + 1):
        v_x_old, v_s_old = st.v_x, st.v_s
        # 1: module A -> u
        d, tau_d = moduleA_to_u(st.mu_u, st.b, st.tau_b, G, Y, sw, g2, Gh)
        tau_d = max(tau_d, eps)
        # 2: module B -> c
        p, tau_p = moduleB_to_c(st.mu_x, st.mu_c, p_prev, tau_p_prev, st.v_x, F, f2, eps)
        # 3-4: u and c posteriors
        pi_flat = st.pi.reshape(N, QT, sp.size)
        mu_u, var_u, mu_c, var_c, fl_uc = posterior_uc(d, tau_d, p, tau_p, pi_flat, sp)
        if fl_uc:
            flags.add("mixture_weight_underflow")
        st.mu_u = _damp(mu_u, st.mu_u, rcfg.damping)
        st.mu_c = _damp(mu_c, st.mu_c, rcfg.damping)
        st.v_u = max(float(var_u.mean()), eps)
        st.v_c = max(float(var_c.mean()), eps)
        # 5-6: observations of x
        r = tau_r = None
        if direct:
            r, tau_r = direct_observation(st.mu_x, st.b, st.tau_b, H, Y, sw, h2, Hh)
            tau_r = max(tau_r, eps)
        o, tau_o, clamped = ris_observation(st.mu_x, st.mu_c, p, tau_p, st.v_c, F, f2, eps, Fh)
        if clamped:
            flags.add("tau_o_clamped")
        tau_o = max(tau_o, eps)
        # 7: Tx decoder
        if joint and rcfg.genie != "known_X":
            ll_x = x_loglik(r, tau_r, o, tau_o, xp)
            st.beta, _ = decode_symbols(ll_x, fcfg.tx_const.labels, ctx.code, ctx.pi_tx)
        # 8: x posterior
        mu_x, var_x, x_prob = _x_posterior_fast(r, tau_r, o, tau_o, st.beta, xp)
        st.mu_x = _damp(mu_x, st.mu_x, rcfg.damping)
        st.v_x = max(float(var_x.mean()), eps)
        st.x_prob = x_prob
        # 9: RIS decoder and extrinsic beliefs
        d3 = d[n_p:].reshape(nd, Q, T)
        p3 = p[n_p:].reshape(nd, Q, T)
        if joint and rcfg.genie != "known_S":
            ll_s = s_loglik(d3, p3, tau_d + tau_p, sp).sum(axis=-2)
            st.alpha, _ = decode_symbols(ll_s, fcfg.ris_const.labels, ctx.code, ctx.pi_ris)
        # 10: s posterior (and the per-slot extrinsic beliefs)
        pi_new, mu_s, var_s, s_prob = _s_posterior_fast(d3, p3, tau_d + tau_p, st.alpha, sp)
        if rcfg.genie != "known_S":
            st.pi[n_p:] = pi_new
        st.mu_s = np.vstack([prob.S_P, mu_s])
        st.s_prob = s_prob
        st.v_s = max(float(var_s.mean()), eps) if nd else 0.0
        _assert_normalized(pi=st.pi, beta=st.beta, alpha=st.alpha, x_prob=x_prob, s_prob=s_prob)
        # 11: quantities for the next iteration
        b_new, tau_b = update_b(st.mu_u, st.mu_x, st.v_u, st.v_x, st.b, st.tau_b, G, H, Y, sw, direct, g2, h2)
        p_prev, tau_p_prev = p, tau_p
        st.b, st.tau_b = b_new, tau_b
        st.d, st.p, st.tau_d, st.tau_p, st.tau_o = d, p, tau_d, tau_p, tau_o
        st.r, st.o, st.tau_r = r, o, (tau_r if tau_r is not None else np.nan)

        row = dict(iteration=it, v_x=st.v_x, v_u=st.v_u, v_c=st.v_c, v_s=st.v_s, tau_d=tau_d, tau_p=tau_p,
                   tau_o=tau_o, tau_r=st.tau_r, tau_b=tau_b)
        if truth is not None:
            row["mse_x"] = float(np.mean(np.abs(st.mu_x - X_true) ** 2))
            row["mse_s"] = float(np.mean(np.abs(mu_s - S_true) ** 2)) if nd else 0.0
        trace.append(row)

        if not np.isfinite(tau_b) or tau_b > rcfg.divergence_factor * tau_b_init:
            flags.add("diverged")
            break
        if rcfg.tol > 0:
            delta = max(abs(st.v_x - v_x_old), abs(st.v_s - v_s_old)) / max(st.v_x, st.v_s, eps)
            if delta < rcfg.tol:
                break

    return _finish(st, prob, fcfg, rcfg, ctx, trace, it, flags)


@numba.njit(cache=True)
def _row_sum_error(P):
    """Largest deviation of a row sum from one; inf if any entry is negative or NaN."""
    worst = 0.0
    for i in range(P.shape[0]):
        tot = 0.0
        for j in range(P.shape[1]):
            v = P[i, j]
            if not v >= 0.0:
                return np.inf
            tot += v
        worst = max(worst, abs(tot - 1.0))
    return worst


def _assert_normalized(**tables):
    """Every probability table must sum to one over its last axis."""
    for name, P in tables.items():
        if P is None or P.size == 0:
            continue
        err = _row_sum_error(np.ascontiguousarray(P.reshape(-1, P.shape[-1]), dtype=float))
        if not err < 1e-9:
            raise DivergenceError(f"{name} table lost normalization (max error {err:.3g})")


def _damp(new, old, a):
    return new if a == 1.0 else a * new + (1 - a) * old


def _finish(st, prob, fcfg, rcfg, ctx, trace, it, flags):
    n_p = prob.S_P.shape[0]
    x_idx = np.argmax(st.x_prob, axis=-1)
    s_idx = np.argmax(st.s_prob, axis=-1)
    if rcfg.mode == "uncoded" or ctx is None:
        tx_bits = fcfg.tx_const.labels[x_idx.T.reshape(-1)].reshape(-1)
        ris_bits = fcfg.ris_const.labels[s_idx.T.reshape(-1)].reshape(-1)
    else:
        # Final decoding from the channel-side messages of the last iteration.
        ll_x = x_loglik(st.r, st.tau_r if st.r is not None else None, st.o, st.tau_o, prob.tx_points)
        _, app_x = decode_symbols(ll_x, fcfg.tx_const.labels, ctx.code, ctx.pi_tx)
        nd = st.d.shape[0] - n_p
        Q = st.mu_s.shape[1]
        d3 = st.d[n_p:].reshape(nd, Q, prob.T)
        p3 = st.p[n_p:].reshape(nd, Q, prob.T)
        ll_s = s_loglik(d3, p3, st.tau_d + st.tau_p, prob.ris_points).sum(axis=-2)
        _, app_s = decode_symbols(ll_s, fcfg.ris_const.labels, ctx.code, ctx.pi_ris)
        tx_bits, ris_bits = hard_info_bits(app_x), hard_info_bits(app_s)
    return DetectionResult(st.mu_x, st.mu_s, x_idx, s_idx, np.asarray(tx_bits, dtype=np.int8),
                           np.asarray(ris_bits, dtype=np.int8), trace, it, flags)
