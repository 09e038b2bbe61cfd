"""Scalar state evolution of the detector.

Expectations over the equivalent AWGN channel of ``x`` and the Rayleigh
channel of ``s`` are taken by Monte Carlo (with common random numbers, so the
map is deterministic for a fixed seed) or, where a closed reduction exists,
by Gauss-Hermite / Gauss-Laguerre quadrature.

Decoder outputs are described by a :class:`DecoderModel`.  The ``awgn`` and
``curve`` kinds use a normalized state ``t`` in [0, 1]: the decoder output is
equivalent to an observation ``x + CN(0, 1/gamma)`` with ``mmse(gamma) = t``,
so ``t = 1`` carries no information and ``t = 0`` is perfect knowledge.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln, roots_genlaguerre, roots_hermite

from .channel import link_gains, normalize
from .coding import ConvCode, Interleaver, bit_llrs_to_symbol_priors, encode, interleave
from .core import Constellation, InvalidArgument, RngStream, as_generator, cgauss
from .receiver import (EPS_V, _one_hot, _softmax, compute_pi, decode_symbols, posterior_c,
                       posterior_s, posterior_u, s_loglik, x_loglik)

RHO_MAX = 1e8

# ---------------------------------------------------------------------------
# scalar MMSE by quadrature

_GH = {}


def _gh2(n):
    if n not in _GH:
        z, w = roots_hermite(n)
        zz = (z[:, None] + 1j * z[None, :]).ravel()
        ww = (w[:, None] * w[None, :]).ravel() / np.pi
        _GH[n] = (zz, ww)
    return _GH[n]


def awgn_mmse(points, snr, n_gh=64):
    """MMSE of a uniform symbol from ``points`` seen through ``x + CN(0, 1/snr)``.

    Normalized by the constellation power, so it runs from 1 (snr = 0) to 0.
    Vectorized over ``snr``.
    """
    points = np.asarray(points, dtype=complex)
    power = np.mean(np.abs(points) ** 2)
    scalar = np.ndim(snr) == 0
    snr = np.atleast_1d(np.asarray(snr, dtype=float)).ravel()
    out = np.where(snr <= 0, 1.0, 0.0)
    live = np.flatnonzero((snr > 0) & np.isfinite(snr))
    # MMSE is rotation invariant; a 45-degree turn makes QPSK a product set
    axes = _product_axes(points)
    if axes is None:
        axes = _product_axes(points * np.exp(1j * np.pi / 4))
    if axes is not None:
        # I and Q are independent uniform PAMs, each seeing real noise of variance 1/(2 snr)
        for lev in axes:
            if lev.size > 1:
                out[live] += _pam_mse(lev, snr[live], 300) / power
        return float(out[0]) if scalar else out
    zz, ww = _gh2(n_gh)
    S = points.size
    chunk = max(1, int(4e6 // (S * S * zz.size)))
    for i0 in range(0, live.size, chunk):
        sel = live[i0:i0 + chunk]
        g = snr[sel][:, None, None]
        y = points[None, :, None] + zz[None, None, :] / np.sqrt(g)      # (B, X, nodes)
        ll = -g[..., None] * np.abs(y[..., None] - points) ** 2          # (B, X, nodes, X)
        prob, _ = _softmax(ll)
        mean = prob @ points
        err = np.abs(mean - points[None, :, None]) ** 2
        out[sel] = (err @ ww).mean(axis=1) / power
    return float(out[0]) if scalar else out


def _product_axes(points):
    """Real and imaginary level sets if ``points`` is their full Cartesian product."""
    re = np.unique(np.round(points.real, 12))
    im = np.unique(np.round(points.imag, 12))
    if re.size * im.size != points.size:
        return None
    grid = {(a, b) for a in re for b in im}
    have = {(a, b) for a, b in zip(np.round(points.real, 12), np.round(points.imag, 12))}
    return (re, im) if grid == have else None


def _pam_mse(levels, snr, n_gh):
    """Unnormalized MSE of a uniform real PAM in noise N(0, 1/(2 snr))."""
    z, w = roots_hermite(n_gh)
    w = w / np.sqrt(np.pi)
    out = np.empty(snr.size)
    for i, g in enumerate(snr):
        y = levels[:, None] + z[None, :] / np.sqrt(g)                   # (L, nodes)
        ll = -g * (y[..., None] - levels) ** 2
        prob, _ = _softmax(ll)
        err = (prob @ levels - levels[:, None]) ** 2
        out[i] = np.mean(err @ w)
    return out


def _pam_mi(levels, snr, n_gh):
    """Mutual information (nats) of a uniform real PAM in noise N(0, 1/(2 snr))."""
    z, w = roots_hermite(n_gh)
    w = w / np.sqrt(np.pi)
    out = np.empty(snr.size)
    diff = levels[:, None] - levels[None, :]                             # (L, L')
    for i, g in enumerate(snr):
        n = z / np.sqrt(g)
        e = -g * ((diff[:, None, :] + n[None, :, None]) ** 2 - n[None, :, None] ** 2)
        m = e.max(axis=2, keepdims=True)
        lse = m[..., 0] + np.log(np.exp(e - m).sum(axis=2))
        out[i] = np.log(levels.size) - np.mean(lse @ w)
    return out


def awgn_mi(points, snr, n_gh=64):
    """Mutual information (nats) between a uniform symbol and ``x + CN(0, 1/snr)``.  Vectorized over ``snr``."""
    points = np.asarray(points, dtype=complex)
    scalar = np.ndim(snr) == 0
    snr = np.atleast_1d(np.asarray(snr, dtype=float)).ravel()
    out = np.zeros(snr.size)
    out[np.isinf(snr)] = np.log(points.size)
    live = np.flatnonzero((snr > 0) & np.isfinite(snr))
    axes = _product_axes(points)
    if axes is None:
        axes = _product_axes(points * np.exp(1j * np.pi / 4))
    if axes is not None:
        for lev in axes:
            if lev.size > 1:
                out[live] += _pam_mi(lev, snr[live], 300)
        return float(out[0]) if scalar else out
    zz, ww = _gh2(n_gh)
    for i in live:
        g = snr[i]
        n = zz / np.sqrt(g)
        diff = points[:, None, None] - points[None, None, :] + n[None, :, None]
        e = -g * np.abs(diff) ** 2 + g * np.abs(n)[None, :, None] ** 2
        m = e.max(axis=2, keepdims=True)
        lse = m[..., 0] + np.log(np.exp(e - m).sum(axis=2))
        out[i] = np.log(points.size) - np.mean(lse @ ww)
    return float(out[0]) if scalar else out


def gamma_average(func, T, n=40):
    """``E f(G)`` for ``G ~ Gamma(T, 1)`` by generalized Gauss-Laguerre quadrature."""
    g, w = roots_genlaguerre(n, T - 1)
    w = w * np.exp(-gammaln(T))
    return float(np.sum(w * func(g)))


def fading_mmse(points, snr, T, n=40, weighted=False):
    """Average MMSE of a unit-modulus symbol seen over T Rayleigh slots.

    With known fading and |s| = 1 the slots combine into one AWGN observation at
    SNR ``snr * G``, ``G ~ Gamma(T, 1)``.  ``weighted`` returns ``E[G mmse(snr G)]``.
    """
    g, w = roots_genlaguerre(n, T - 1)
    w = w * np.exp(-gammaln(T))
    vals = awgn_mmse(points, snr * g)
    return float(np.sum(w * (g if weighted else 1.0) * vals))


_INV_CACHE: dict = {}


def snr_for_mmse(points, t):
    """Inverse of :func:`awgn_mmse`: the SNR at which the MMSE equals ``t``."""
    if t >= 1.0:
        return 0.0
    if t <= 0.0:
        return np.inf
    key = (np.asarray(points).tobytes(), float(t))
    if key not in _INV_CACHE:
        f = lambda lg: awgn_mmse(points, np.exp(lg)) - t
        lo, hi = -30.0, np.log(RHO_MAX)
        if f(hi) > 0:
            _INV_CACHE[key] = RHO_MAX
        else:
            _INV_CACHE[key] = float(np.exp(brentq(f, lo, hi, xtol=1e-10)))
    return _INV_CACHE[key]


# ---------------------------------------------------------------------------
# decoder models


@dataclass(frozen=True)
class DecoderModel:
    """How decoder outputs enter the detector inside SE.

    kind: ``none`` | ``genie`` | ``gaussian`` (per-bit consistent Gaussian LLRs
    with mean ``1/param``) | ``awgn`` (normalized state ``param``) |
    ``curve`` (``curve(rho) -> t``, AWGN-equivalent output) | ``code`` (real BCJR).
    """

    kind: str = "none"
    param: float | None = None
    curve: Callable | None = None
    code: ConvCode = ConvCode()
    block_symbols: int = 1024

    def __post_init__(self):
        if self.kind not in ("none", "genie", "gaussian", "awgn", "curve", "code"):
            raise InvalidArgument(f"unknown decoder model {self.kind!r}")
        if self.kind in ("gaussian", "awgn") and self.param is None:
            raise InvalidArgument(f"decoder model {self.kind!r} needs a parameter")
        if self.kind == "curve" and self.curve is None:
            raise InvalidArgument("curve decoder model needs a transfer curve")

    def state(self, rho=None):
        """Normalized decoder state ``t`` for the AWGN-type kinds."""
        if self.kind == "none":
            return 1.0
        if self.kind == "genie":
            return 0.0
        if self.kind == "awgn":
            return float(self.param)
        if self.kind == "curve":
            return float(np.clip(self.curve(rho), 0.0, 1.0))
        raise InvalidArgument(f"{self.kind} has no scalar state")

    @property
    def closed_form(self):
        return self.kind in ("none", "genie", "awgn", "curve")


NO_DECODER = DecoderModel()


def _code_blocks(model, const, n, gen):
    """Draw ``n`` (rounded up) symbols as concatenated random codewords."""
    nb = const.bits_per_symbol
    S = model.block_symbols
    n_info = model.code.info_length(S * nb)
    n_blocks = -(-n // S)
    idx, blocks = [], []
    weights = 1 << np.arange(nb - 1, -1, -1)
    for _ in range(n_blocks):
        pi = Interleaver.random(S * nb, gen)
        coded = interleave(encode(gen.integers(0, 2, n_info), model.code), pi)
        lab = coded.reshape(S, nb) @ weights
        lut = np.empty(const.size, dtype=int)
        lut[const.labels @ weights] = np.arange(const.size)
        idx.append(lut[lab])
        blocks.append(pi)
    return np.concatenate(idx), blocks


def draw_symbols(model, const, n, gen):
    if model.kind == "code":
        return _code_blocks(model, const, n, gen)
    return gen.integers(0, const.size, n), None


def decoder_priors(model, const, idx, ll, gen, rho=None, aux=None):
    """Extrinsic priors over ``const`` for true symbols ``idx`` given channel log-likelihoods ``ll``."""
    n = idx.shape[0]
    if model.kind == "none":
        return np.full((n, const.size), 1.0 / const.size)
    if model.kind == "genie":
        return np.eye(const.size)[idx]
    if model.kind == "gaussian":
        mu = 1.0 / model.param
        bits = const.labels[idx]
        llr = mu * (1 - 2 * bits) + np.sqrt(2 * mu) * gen.standard_normal(bits.shape)
        return bit_llrs_to_symbol_priors(llr, const.labels)
    if model.kind == "code":
        S = model.block_symbols
        out = np.empty((n, const.size))
        for j, pi in enumerate(aux):
            sl = slice(j * S, (j + 1) * S)
            pri, _ = decode_symbols(ll[sl][None], const.labels, model.code, pi)
            out[sl] = pri[0]
        return out
    g = snr_for_mmse(const.points, model.state(rho))
    if g == 0:
        return np.full((n, const.size), 1.0 / const.size)
    if not np.isfinite(g):
        return np.eye(const.size)[idx]
    b = const.points[idx] + cgauss(gen, n, 1.0 / g)
    return _softmax(-g * np.abs(b[:, None] - const.points) ** 2)[0]


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class SEConfig:
    N: int
    M: int
    K: int
    N_P: int
    T: int
    zeta: float
    noise_var: float
    tx_const: Constellation
    ris_const: Constellation
    samples: int = 100_000
    x_decoder: DecoderModel = NO_DECODER
    s_decoder: DecoderModel = NO_DECODER
    direct_link: bool = True
    quadrature: bool = False
    seed: int = 0
    pi_lag: bool = True
    max_iter: int = 100
    tol: float = 1e-5

    def __post_init__(self):
        if min(self.N, self.M, self.K, self.T) < 1 or not 0 <= self.N_P <= self.N:
            raise InvalidArgument("invalid SE dimensions")
        if self.zeta <= 0 or self.noise_var < 0:
            raise InvalidArgument("zeta must be positive and the noise variance nonnegative")
        if self.samples < 1:
            raise InvalidArgument("need at least one Monte Carlo sample")

    @property
    def prior_u(self):
        return self.zeta * self.K / self.N

    @classmethod
    def from_frame(cls, fcfg, geometry=None, params=None, channels=None, **kw):
        """Large-system parameters for a frame configuration.

        With ``channels`` the normalization is measured on that realization,
        otherwise expected path-loss values are used.
        """
        if channels is not None:
            nc = normalize(channels)
            zeta, a2 = nc.zeta, nc.a ** 2
        else:
            args = [x for x in (geometry, params) if x is not None]
            bF, bG, bH = link_gains(*args)
            zeta = fcfg.N * bG * bF / bH
            a2 = fcfg.M * bH
        noise = fcfg.noise_var / (a2 * fcfg.power_w / fcfg.K)
        return cls(N=fcfg.N, M=fcfg.M, K=fcfg.K, N_P=fcfg.N_P, T=fcfg.T, zeta=zeta, noise_var=noise,
                   tx_const=fcfg.tx_const, ris_const=fcfg.ris_const, direct_link=fcfg.direct_link, **kw)


@dataclass
class SEState:
    v_x: float
    v_u: float
    v_c: float
    v_s: float
    tau_d: float = np.nan
    tau_r: float = np.nan
    tau_p: float = np.nan
    tau_o: float = np.nan
    se_x_stderr: float = 0.0
    se_s_stderr: float = 0.0

    @property
    def rho_x(self):
        r = 1.0 / self.tau_o
        if np.isfinite(self.tau_r):
            r += 1.0 / self.tau_r
        return r

    def vector(self):
        return np.array([self.v_x, self.v_u, self.v_c, self.v_s])


@dataclass
class SETrajectory:
    states: list
    converged: bool
    flags: set = field(default_factory=set)

    @property
    def fixed_point(self):
        s = self.states[-1]
        return s.v_x, s.v_s

    def column(self, name):
        return np.array([getattr(s, name) for s in self.states])


# ---------------------------------------------------------------------------
# transfer functions


def se_moduleA(v_u, v_x, noise_var, n_over_m, k_over_m, direct_link=True):
    """Returns ``(tau_d, tau_r)``; ``tau_r`` is NaN when the direct link is blocked."""
    if v_u < 0 or v_x < 0:
        raise InvalidArgument("variances must be nonnegative")
    if direct_link:
        t = n_over_m * v_u + k_over_m * v_x + noise_var
        return t, t
    return n_over_m * v_u + noise_var, np.nan


def se_moduleB(v_x, v_c, zeta, k_over_n, eps=EPS_V):
    """Returns ``(tau_p, tau_o, clamped)``."""
    tau_p = max(zeta * k_over_n * v_x, eps)
    gap = tau_p - v_c
    clamped = gap <= eps
    return tau_p, tau_p ** 2 / (zeta * max(gap, eps)), clamped


def _gen(seed, *keys):
    return RngStream(seed, 7).child(*keys).generator()


def se_vx(tau_r, tau_o, decoder=NO_DECODER, const=None, samples=100_000, rng=0, quadrature=False):
    """``E var(x | r, o, b_x)`` and its Monte Carlo standard error.

    ``tau_r = inf`` (or NaN) drops the direct observation.  ``rng`` is a seed
    or generator; equal seeds reuse the same draws.
    """
    tau_r = np.inf if tau_r is None or np.isnan(tau_r) else tau_r
    rho = (1.0 / tau_r if np.isfinite(tau_r) else 0.0) + (1.0 / tau_o if np.isfinite(tau_o) else 0.0)
    if quadrature and decoder.closed_form:
        t = decoder.state(rho)
        g = snr_for_mmse(const.points, t)
        return awgn_mmse(const.points, rho + g) * const.power, 0.0
    gen = rng if isinstance(rng, np.random.Generator) else _gen(rng, 0)
    idx, aux = draw_symbols(decoder, const, samples, gen)
    n = idx.size
    x = const.points[idx]
    z_r, z_o = cgauss(gen, n), cgauss(gen, n)
    r = x + np.sqrt(tau_r) * z_r if np.isfinite(tau_r) else None
    o = x + np.sqrt(tau_o) * z_o if np.isfinite(tau_o) else None
    if r is None and o is None:
        r, tau_r = x * 0, np.inf
        ll = np.zeros((n, const.size))
    else:
        ll = x_loglik(r, tau_r, o, tau_o, const.points)
    beta = decoder_priors(decoder, const, idx, ll, gen, rho, aux)
    prob, _ = _softmax(ll + np.log(np.maximum(beta, 1e-300)))
    mean = prob @ const.points
    var = np.maximum(prob @ np.abs(const.points) ** 2 - np.abs(mean) ** 2, 0.0)
    return float(var.mean()), float(var.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def se_module_c(tau_d, tau_p, cfg: SEConfig, rng=0, prev=None):
    """Module-C expectations ``(v_s, v_u, v_c, stderr_s)``.

    The data term draws ``s`` uniformly (or from a codeword), ``p_t ~ CN(0, zeta K/N - tau_p)`` and
    ``d_t = p_t s + CN(0, tau_p + tau_d)`` for ``t = 1..T``; pilot rows contribute the
    Gaussian-product variance exactly.

    ``prev = (tau_d, tau_p)`` of the previous iteration makes the beliefs ``pi``
    used for ``u`` and ``c`` come from observations of that quality, as in the
    detector, where they are formed one iteration earlier.  ``prev=None`` with
    ``cfg.pi_lag`` means the first iteration (uniform beliefs).
    """
    T = cfg.T
    lam = max(cfg.prior_u - tau_p, 0.0)
    tbar = tau_p * tau_d / (tau_p + tau_d)
    w_d = (cfg.N - cfg.N_P) / cfg.N
    w_p = cfg.N_P / cfg.N
    if w_d == 0:
        return np.nan, tbar, tbar, 0.0
    const = cfg.ris_const
    sp = const.points
    dec = cfg.s_decoder
    rho_s = lam / (tau_p + tau_d)
    gen = rng if isinstance(rng, np.random.Generator) else _gen(rng, 1)
    idx, aux = draw_symbols(dec, const, cfg.samples, gen)
    n = idx.size
    s = sp[idx]
    p = np.sqrt(lam) * cgauss(gen, (n, T))
    d = p * s[:, None] + np.sqrt(tau_p + tau_d) * cgauss(gen, (n, T))
    ll = s_loglik(d, p, tau_d + tau_p, sp).sum(axis=-2)
    alpha = decoder_priors(dec, const, idx, ll, gen, rho_s, aux)
    if not cfg.pi_lag:
        pi = compute_pi(alpha, d, p, tau_d, tau_p, sp)
    elif prev is None:
        pi = np.full((n, T, sp.size), 1.0 / sp.size)
    else:
        td0, tp0 = prev
        lam0 = max(cfg.prior_u - tp0, 0.0)
        p0 = np.sqrt(lam0) * cgauss(gen, (n, T))
        d0 = p0 * s[:, None] + np.sqrt(tp0 + td0) * cgauss(gen, (n, T))
        ll0 = s_loglik(d0, p0, td0 + tp0, sp).sum(axis=-2)
        alpha0 = decoder_priors(dec, const, idx, ll0, gen, lam0 / (tp0 + td0), aux)
        pi = compute_pi(alpha0, d0, p0, td0, tp0, sp)
    _, var_u = posterior_u(d, tau_d, p, tau_p, pi, sp)
    _, var_c = posterior_c(d, tau_d, p, tau_p, pi, sp)
    v_u = w_d * var_u.mean() + w_p * tbar
    v_c = w_d * var_c.mean() + w_p * tbar
    if cfg.quadrature and dec.closed_form:
        g = snr_for_mmse(sp, dec.state(rho_s))
        snr = rho_s
        v_s = fading_mmse(sp, snr, T) if g == 0 else (
            0.0 if not np.isfinite(g) else
            gamma_average(lambda G: awgn_mmse(sp, snr * G + g), T))
        return v_s, float(v_u), float(v_c), 0.0
    _, var_s, _ = posterior_s(d, p, tau_d, tau_p, alpha, sp)
    return float(var_s.mean()), float(v_u), float(v_c), float(var_s.std(ddof=1) / np.sqrt(n))


def se_vs(tau_d, tau_p, cfg, rng=0):
    return se_module_c(tau_d, tau_p, cfg, rng)[0]


def se_vu(tau_d, tau_p, cfg, rng=0):
    return se_module_c(tau_d, tau_p, cfg, rng)[1]


def se_vc(tau_d, tau_p, cfg, rng=0):
    return se_module_c(tau_d, tau_p, cfg, rng)[2]


def se_step(st: SEState, cfg: SEConfig, it: int = 0):
    """One pass A -> B -> C -> x -> s.  Returns the new state and flags raised."""
    flags = set()
    tau_d, tau_r = se_moduleA(st.v_u, st.v_x, cfg.noise_var, cfg.N / cfg.M, cfg.K / cfg.M, cfg.direct_link)
    tau_d = max(tau_d, EPS_V)
    tau_p = max(cfg.zeta * cfg.K / cfg.N * st.v_x, EPS_V)
    prev = (st.tau_d, st.tau_p) if np.isfinite(st.tau_d) else None
    v_s, v_u, v_c, se_s = se_module_c(tau_d, tau_p, cfg, _gen(cfg.seed, 1), prev)
    _, tau_o, clamped = se_moduleB(st.v_x, v_c, cfg.zeta, cfg.K / cfg.N)
    if clamped:
        flags.add("tau_o_clamped")
    v_x, se_x = se_vx(tau_r, tau_o, cfg.x_decoder, cfg.tx_const, cfg.samples, _gen(cfg.seed, 0), cfg.quadrature)
    v_x = v_x / cfg.tx_const.power
    new = SEState(v_x=max(v_x, 0.0), v_u=max(v_u, 0.0), v_c=max(v_c, 0.0),
                  v_s=v_s if np.isfinite(v_s) else 0.0, tau_d=tau_d, tau_r=tau_r, tau_p=tau_p, tau_o=tau_o,
                  se_x_stderr=se_x, se_s_stderr=se_s)
    return new, flags


def initial_state(cfg: SEConfig) -> SEState:
    return SEState(v_x=1.0, v_u=cfg.prior_u, v_c=cfg.prior_u, v_s=1.0)


def run_se(cfg: SEConfig, n_iter: int | None = None, init: SEState | None = None) -> SETrajectory:
    """Iterate the SE from the no-information start (or from ``init``).

    ``n_iter`` forces a fixed number of iterations; otherwise stop when the
    relative state change drops below ``cfg.tol`` or after ``cfg.max_iter``.
    """
    st = initial_state(cfg) if init is None else init
    states, flags = [], set()
    converged = False
    for it in range(n_iter or cfg.max_iter):
        new, fl = se_step(st, cfg, it)
        flags |= fl
        states.append(new)
        if n_iter is None:
            diff = np.linalg.norm(new.vector() - st.vector())
            if diff <= cfg.tol * max(np.linalg.norm(new.vector()), EPS_V):
                converged = True
                break
        st = new
    if n_iter is None and not converged:
        flags.add("not_converged")
    return SETrajectory(states, converged, flags)


def blocked_direct_se(cfg: SEConfig, n_iter: int | None = None) -> SETrajectory:
    return run_se(replace(cfg, direct_link=False), n_iter)


SE_COLUMNS = ["iteration", "v_x", "v_u", "v_c", "v_s", "tau_d", "tau_p", "tau_o", "tau_r",
              "se_x_stderr", "se_s_stderr"]


def trajectory_rows(traj: SETrajectory):
    return [[i + 1] + [getattr(s, k) for k in SE_COLUMNS[1:]] for i, s in enumerate(traj.states)]


def write_trajectory_csv(traj: SETrajectory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SE_COLUMNS)
        for row in trajectory_rows(traj):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
