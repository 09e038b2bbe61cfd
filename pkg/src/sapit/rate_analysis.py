"""Transfer curves, the detector map eta, the convergence predicate and achievable rates.

Decoder states are normalized: ``t = 1`` is the no-information end
(tau^max) and ``t = 0`` is perfect decoding.  A decoder in state ``t``
is modelled as an extra AWGN observation whose MMSE alone would be ``t``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .core import InvalidArgument, cgauss, as_generator
from .receiver import posterior_s
from .state_evolution import (DecoderModel, SEConfig, SEState, awgn_mi, awgn_mmse, gamma_average, run_se,
                              snr_for_mmse)

LN2 = np.log(2.0)
RHO_CAP = 1e4
T_FLOOR = 1e-4      # state 0 is evaluated here; psi vanishes like t, so the error is negligible


def psi_x_un(rho, const):
    """Normalized MMSE of a uniform symbol through AWGN at SNR ``rho`` (Gauss-Hermite)."""
    return awgn_mmse(const.points, rho)


def psi_x(rho, t, const):
    """Detector-side MSE of x at channel SNR ``rho`` with the decoder in state ``t``."""
    return awgn_mmse(const.points, np.asarray(rho, dtype=float) + snr_for_mmse(const.points, t))


def psi_s_un(rho, const, T, method="quadrature", samples=200_000, rng=0):
    """Normalized MSE ``v_ps`` of ``sum_t p_t s`` over T unit-power Rayleigh slots at SNR ``rho``.

    ``quadrature`` reduces the T slots to one AWGN observation at SNR ``rho G``
    with ``G ~ Gamma(T, 1)``; ``mc`` samples the fading model directly.
    """
    return psi_s(rho, 1.0, const, T, method, samples, rng)


def psi_s(rho, t, const, T, method="quadrature", samples=200_000, rng=0):
    rho = float(rho)
    g = snr_for_mmse(const.points, t)
    if not np.isfinite(g):
        return 0.0
    if method == "quadrature":
        return gamma_average(lambda G: G * awgn_mmse(const.points, rho * G + g), T)
    if method != "mc":
        raise InvalidArgument(f"unknown method {method!r}")
    gen = as_generator(rng)
    sp = const.points
    idx = gen.integers(0, sp.size, samples)
    s = sp[idx]
    p = cgauss(gen, (samples, T))
    if rho > 0:
        d = p * s[:, None] + cgauss(gen, (samples, T), 1.0 / rho)
        tau = 1.0 / rho
    else:
        d, tau = np.zeros_like(p), np.inf
    if g > 0:
        b = s + cgauss(gen, samples, 1.0 / g)
        la = -g * np.abs(b[:, None] - sp) ** 2
        alpha = np.exp(la - la.max(axis=1, keepdims=True))
        alpha /= alpha.sum(axis=1, keepdims=True)
    else:
        alpha = np.full((samples, sp.size), 1.0 / sp.size)
    if np.isfinite(tau):
        _, var, _ = posterior_s(d, p, tau, 0.0, alpha, sp)
    else:
        var = 1.0 - np.abs(alpha @ sp) ** 2
    vals = np.sum(np.abs(p) ** 2, axis=1) * var
    return float(vals.mean())


def awgn_mutual_information(const, rho):
    """Constellation-constrained AWGN mutual information in nats; ``d/drho`` of it is ``psi_x_un``."""
    return awgn_mi(const.points, rho)


def fading_mutual_information(const, rho, T, gamma=0.0):
    """``E_G I(rho G + gamma)`` with ``G ~ Gamma(T, 1)``; its ``rho``-derivative is ``psi_s``."""
    if not np.isfinite(gamma):
        return float(np.log(const.size))
    return gamma_average(lambda G: awgn_mi(const.points, rho * G + gamma), T)


# ---------------------------------------------------------------------------
# the detector map


def detector_config(cfg: SEConfig, t_x, t_s, samples=20_000):
    return replace(cfg, x_decoder=DecoderModel("awgn", float(t_x)), s_decoder=DecoderModel("awgn", float(t_s)),
                   quadrature=True, samples=min(cfg.samples, samples))


@dataclass
class EtaPoint:
    rho_x: float
    rho_s: float
    state: SEState
    converged: bool


def eta(t_x, t_s, cfg: SEConfig, init: SEState | None = None, samples=20_000) -> EtaPoint:
    """Output SNRs ``(rho_x, rho_s)`` of the detector at its inner fixed point for decoder states ``(t_x, t_s)``."""
    if not (0 <= t_x <= 1 and 0 <= t_s <= 1):
        raise InvalidArgument("decoder states must lie in [0, 1]")
    traj = run_se(detector_config(cfg, max(t_x, T_FLOOR), max(t_s, T_FLOOR), samples), init=init)
    st = traj.states[-1]
    lam = max(cfg.prior_u - st.tau_p, 0.0)
    rho_s = lam / (st.tau_p + st.tau_d)
    return EtaPoint(min(st.rho_x, RHO_CAP), min(rho_s, RHO_CAP), st, traj.converged)


# ---------------------------------------------------------------------------
# paths and curves


@dataclass
class MonotonicPath:
    t_x: np.ndarray
    t_s: np.ndarray

    def __post_init__(self):
        self.t_x = np.asarray(self.t_x, dtype=float)
        self.t_s = np.asarray(self.t_s, dtype=float)
        if self.t_x.shape != self.t_s.shape or self.t_x.size < 2:
            raise InvalidArgument("path needs matching coordinate arrays of length >= 2")
        if self.t_x[0] != 1 or self.t_s[0] != 1 or self.t_x[-1] != 0 or self.t_s[-1] != 0:
            raise InvalidArgument("path must run from (1, 1) to (0, 0)")
        if np.any(np.diff(self.t_x) > 0) or np.any(np.diff(self.t_s) > 0):
            raise InvalidArgument("path coordinates must be nonincreasing")

    @classmethod
    def straight(cls, n=40):
        t = _param_grid(n)
        return cls(t, t.copy())

    @classmethod
    def random(cls, rng, n=40):
        """Monotone staircase from independently sorted uniform draws on each axis."""
        g = as_generator(rng)
        while True:
            ux = np.sort(g.uniform(size=n - 2))[::-1]
            us = np.sort(g.uniform(size=n - 2))[::-1]
            if np.unique(ux).size == ux.size and np.unique(us).size == us.size:
                break
        tx = np.concatenate([[1.0], ux, [0.0]])
        ts = np.concatenate([[1.0], us, [0.0]])
        return cls(_refine_tail(tx), _refine_tail(ts))

    def points(self):
        return list(zip(self.t_x, self.t_s))


def _param_grid(n):
    """Descending grid on [0, 1], denser near 0 where the SNRs grow fast."""
    lin = np.linspace(1.0, 0.0, n)
    return _refine_tail(lin)


def _refine_tail(t):
    """Insert a short geometric tail before the final 0 so the last segment is tiny."""
    last = t[-2]
    if last <= T_FLOOR:
        return t
    tail = np.geomspace(last, T_FLOOR, 6)[1:]
    return np.concatenate([t[:-1], tail, [0.0]])


@dataclass
class DecoderCurve:
    """A monotone decoder transfer curve given by its inverse ``rho = f^{-1}(t)`` on a grid of t."""

    t: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        order = np.argsort(self.t)
        self.t = np.asarray(self.t, dtype=float)[order]
        self.rho = np.maximum.accumulate(np.asarray(self.rho, dtype=float)[order][::-1])[::-1]

    def inverse(self, t):
        """Input SNR the decoder needs to reach state ``t``."""
        return np.interp(t, self.t, self.rho)

    def __call__(self, rho):
        """Decoder output state ``f(rho)``: 1 below ``f^{-1}(1)``, 0 above ``f^{-1}(0)``."""
        r = self.rho[::-1]
        tt = self.t[::-1]
        if rho <= r[0]:
            return 1.0
        if rho >= r[-1]:
            return 0.0
        return float(np.interp(rho, r, tt))

    @classmethod
    def genie(cls):
        return cls(np.array([0.0, 1.0]), np.array([0.0, 0.0]))

    @classmethod
    def worthless(cls):
        return cls(np.array([0.0, 1.0]), np.array([np.inf, 0.0]))


def eta_along(path: MonotonicPath, cfg: SEConfig, samples=20_000):
    """Evaluate eta at every path point, warm-starting each inner SE from the previous fixed point.

    Valid because the detector SE is monotone: the previous fixed point lies
    above the next one, so iterating from it reaches the same (largest) fixed point.
    """
    out, init = [], None
    for tx, ts in path.points():
        e = eta(tx, ts, cfg, init=init, samples=samples)
        out.append(e)
        init = e.state
    return out


def check_convergence(path: MonotonicPath, curve_x: DecoderCurve, curve_s: DecoderCurve, cfg: SEConfig,
                      etas=None) -> bool:
    """True iff ``(f_x^{-1}(t_x), f_s^{-1}(t_s)) < eta(t_x, t_s)`` at every path point."""
    etas = eta_along(path, cfg) if etas is None else etas
    for (tx, ts), e in zip(path.points(), etas):
        if not (curve_x.inverse(tx) < e.rho_x and curve_s.inverse(ts) < e.rho_s):
            return False
    return True


def matched_curves(path: MonotonicPath, etas, delta=0.0):
    """Decoder curves ``f^{-1} = (1 - delta) eta`` along ``path`` (negative delta lies above eta)."""
    rx = np.array([e.rho_x for e in etas]) * (1 - delta)
    rs = np.array([e.rho_s for e in etas]) * (1 - delta)
    return DecoderCurve(path.t_x, rx), DecoderCurve(path.t_s, rs)


# ---------------------------------------------------------------------------
# rates


@dataclass
class RateResult:
    R_T: float
    R_R: float
    unit: str = "bits"
    best_path: int = -1
    path_values: list = field(default_factory=list)
    rho0: tuple = (0.0, 0.0)

    @property
    def sum(self):
        return self.R_T + self.R_R


def _weights(cfg):
    return cfg.K, (cfg.N - cfg.N_P) / cfg.T


def uncoded_terms(cfg: SEConfig, rho0=None):
    """The two leading rate integrals (nats) up to the uncoded fixed point."""
    if rho0 is None:
        e = eta(1.0, 1.0, cfg)
        rho0 = (e.rho_x, e.rho_s)
    # By I-MMSE, the integral of psi from 0 to rho0 is the mutual information at rho0.
    wx, ws = _weights(cfg)
    rx = wx * awgn_mi(cfg.tx_const.points, rho0[0]) if wx else 0.0
    rs = ws * fading_mutual_information(cfg.ris_const, rho0[1], cfg.T) if ws else 0.0
    return rx, rs, rho0


def line_integral(path: MonotonicPath, cfg: SEConfig, etas=None):
    """Line integral of ``(K psi_x, (N - N_P)/T psi_s) . d eta`` along ``path`` (nats).

    On each segment the decoder state is held at either end and the two
    results averaged; with the state fixed, the integral over ``rho`` is an
    exact mutual-information difference.  This stays accurate when ``eta``
    jumps between neighbouring path points.
    """
    etas = eta_along(path, cfg) if etas is None else etas
    wx, ws = _weights(cfg)
    rx = np.array([e.rho_x for e in etas])
    rs = np.array([e.rho_s for e in etas])
    gx = [snr_for_mmse(cfg.tx_const.points, t) for t in path.t_x]
    gs = [snr_for_mmse(cfg.ris_const.points, t) for t in path.t_s]
    ix = is_ = 0.0
    for k in range(len(etas) - 1):
        for g in (gx[k], gx[k + 1]):
            if np.isfinite(g):
                ix += 0.5 * (awgn_mi(cfg.tx_const.points, rx[k + 1] + g) - awgn_mi(cfg.tx_const.points, rx[k] + g))
        for g in (gs[k], gs[k + 1]):
            if np.isfinite(g):
                is_ += 0.5 * (fading_mutual_information(cfg.ris_const, rs[k + 1], cfg.T, g)
                              - fading_mutual_information(cfg.ris_const, rs[k], cfg.T, g))
    return wx * ix, ws * is_


def _scale(unit):
    if unit not in ("bits", "nats"):
        raise InvalidArgument("unit must be 'bits' or 'nats'")
    return 1.0 / LN2 if unit == "bits" else 1.0


def separate_rate(cfg: SEConfig, unit="bits") -> RateResult:
    """Rate of separate detection and decoding: uncoded integrals up to the uncoded SE fixed point."""
    rx, rs, rho0 = uncoded_terms(cfg)
    c = _scale(unit)
    return RateResult(rx * c, rs * c, unit, rho0=rho0)


def sum_rate(cfg: SEConfig, n_paths=10, rng=0, unit="bits", n_points=40) -> RateResult:
    """Maximal achievable sum rate: uncoded terms plus the best of ``n_paths`` sampled path integrals.

    Path 0 is the straight line; the rest are random monotone staircases.
    """
    if cfg.K == 0 and cfg.N == cfg.N_P:
        return RateResult(0.0, 0.0, unit)
    g = as_generator(rng)
    paths = [MonotonicPath.straight(n_points)] + [MonotonicPath.random(g, n_points) for _ in range(n_paths - 1)]
    vals = []
    rho0 = None
    for p in paths:
        etas = eta_along(p, cfg)
        rho0 = (etas[0].rho_x, etas[0].rho_s)
        vals.append(line_integral(p, cfg, etas))
    rx, rs, _ = uncoded_terms(cfg, rho0)
    best = int(np.argmax([a + b for a, b in vals]))
    c = _scale(unit)
    return RateResult((rx + vals[best][0]) * c, (rs + vals[best][1]) * c, unit, best,
                      [(a + b) * c for a, b in vals], rho0)


def write_rate_csv(rows, path, header=("N", "R_T", "R_R", "sum", "separate")) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
