"""Brute-force references for the detector kernels and small systems.

Nothing here reuses the receiver or SE kernels: mixture moments come from
adaptive quadrature of the defining integrands, discrete posteriors from
direct enumeration in the linear domain.
"""
from __future__ import annotations

import itertools
import warnings

import numpy as np
from scipy import integrate

from .core import InvalidArgument

HYPOTHESIS_BUDGET = 2 ** 20


# ---------------------------------------------------------------------------
# Gaussian-mixture moments


def _axis_moments(centers, precisions, lo, hi):
    """0th-2nd moments of exp(-sum_i prec_i (x - c_i)^2) over [lo, hi], with a log offset."""
    xs = np.linspace(lo, hi, 20001)
    expo = -sum(w * (xs - c) ** 2 for c, w in zip(centers, precisions))
    off = expo.max()

    def f(x, k):
        e = -sum(w * (x - c) ** 2 for c, w in zip(centers, precisions)) - off
        return x ** k * np.exp(e)

    pts = sorted(set(float(c) for c in centers))
    with warnings.catch_warnings():
        # round-off warnings fire once the integral is already at machine precision
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        m = [integrate.quad(f, lo, hi, args=(k,), points=pts, epsabs=0, epsrel=1e-12, limit=400)[0]
             for k in range(3)]
    return off, m


def quadrature_mixture_moments(pi, points, p, tau_p, d, tau_d, mode="u"):
    """Posterior mean and variance of ``u`` (or ``c``) by numerical integration.

    mode ``u``: density ∝ sum_s pi(s) CN(u; p s, tau_p) CN(u; d, tau_d).
    mode ``c``: density ∝ sum_s pi(s) CN(s c; d, tau_d) CN(c; p, tau_p).
    Each term is a product of isotropic Gaussians, so the plane integral
    factorizes into two adaptive 1-D quadratures.
    """
    if mode not in ("u", "c"):
        raise InvalidArgument("mode must be 'u' or 'c'")
    pi = np.asarray(pi, dtype=float)
    points = np.asarray(points, dtype=complex)
    logs, m_re, m_im = [], [], []
    for w, s in zip(pi, points):
        if w <= 0:
            continue
        if mode == "u":
            a, va = p * s, tau_p
            b, vb = d, tau_d
        else:
            # |s c - d|^2 = |c - d/s|^2 when |s| = 1
            a, va = d / s, tau_d / abs(s) ** 2
            b, vb = p, tau_p
        width = 12 * np.sqrt(max(va, vb))
        parts = []
        for ca, cb in ((a.real, b.real), (a.imag, b.imag)):
            lo, hi = min(ca, cb) - width, max(ca, cb) + width
            parts.append(_axis_moments([ca, cb], [1 / va, 1 / vb], lo, hi))
        (o_r, mr), (o_i, mi) = parts
        logs.append(np.log(w) - np.log(np.pi * va) - np.log(np.pi * vb) + o_r + o_i)
        m_re.append(mr)
        m_im.append(mi)
    logs = np.array(logs)
    scale = np.exp(logs - logs.max())
    Z = sum(sc * mr[0] * mi[0] for sc, mr, mi in zip(scale, m_re, m_im))
    ex = sum(sc * mr[1] * mi[0] for sc, mr, mi in zip(scale, m_re, m_im)) / Z
    ey = sum(sc * mr[0] * mi[1] for sc, mr, mi in zip(scale, m_re, m_im)) / Z
    e2 = sum(sc * (mr[2] * mi[0] + mr[0] * mi[2]) for sc, mr, mi in zip(scale, m_re, m_im)) / Z
    mean = ex + 1j * ey
    return mean, e2 - abs(mean) ** 2


# ---------------------------------------------------------------------------
# finite-alphabet enumeration


def _cn(z, m, v):
    return np.exp(-abs(z - m) ** 2 / v) / (np.pi * v)


def enumerate_x_posterior(r, tau_r, o, tau_o, beta, points):
    """Posterior over a finite alphabet from two AWGN looks and a prior, by enumeration."""
    w = []
    for b, x in zip(beta, points):
        val = b * _cn(o, x, tau_o)
        if r is not None:
            val *= _cn(r, x, tau_r)
        w.append(val)
    w = np.array(w) / sum(w)
    mean = sum(wi * x for wi, x in zip(w, points))
    var = sum(wi * abs(x) ** 2 for wi, x in zip(w, points)) - abs(mean) ** 2
    return mean, var, w


def enumerate_s_posterior(d, p, tau, alpha, points):
    """Posterior of s from slots ``d_t = p_t s + CN(0, tau)`` and prior ``alpha``."""
    w = []
    for a, s in zip(alpha, points):
        val = a
        for dt, pt in zip(d, p):
            val *= _cn(dt, pt * s, tau)
        w.append(val)
    w = np.array(w) / sum(w)
    mean = sum(wi * s for wi, s in zip(w, points))
    var = sum(wi * abs(s) ** 2 for wi, s in zip(w, points)) - abs(mean) ** 2
    return mean, var, w


def enumerate_pi(d, p, tau, alpha, points, t):
    """Extrinsic belief for slot ``t``: the slot-``t`` likelihood is left out."""
    keep = [j for j in range(len(d)) if j != t]
    return enumerate_s_posterior([d[j] for j in keep], [p[j] for j in keep], tau, alpha, points)[2]


# ---------------------------------------------------------------------------
# tiny-system joint detector


def exact_joint_map(Y, G, H, F, noise_var, S_P, T, tx_points, ris_points, direct_link=True,
                    budget=HYPOTHESIS_BUDGET):
    """Enumerate every (X, S_D) and return exact marginals plus joint and per-symbol MAP.

    ``X`` hypotheses are in the same units as ``Y``'s model (scale points beforehand).
    Returns ``dict(x_marg, s_marg, x_map, s_map, x_joint, s_joint)`` with marginals
    of shape (K, QT, |X|) and (N_D, Q, |S|).
    """
    Y = np.asarray(Y)
    M, QT = Y.shape
    N, K = F.shape
    Q = QT // T
    n_p = S_P.shape[0]
    nd = N - n_p
    nx, ns = len(tx_points), len(ris_points)
    n_hyp = float(nx) ** (K * QT) * float(ns) ** (nd * Q)
    if n_hyp > budget:
        raise InvalidArgument(f"{n_hyp:.3g} hypotheses exceed the budget of {budget}")
    x_marg = np.zeros((K, QT, nx))
    s_marg = np.zeros((nd, Q, ns))
    best, best_ll = None, -np.inf
    Hx = H if direct_link else np.zeros_like(H)
    # Columns of different sub-blocks q are independent given the hypotheses,
    # but enumerating the whole frame keeps the reference dead simple.
    log_w = []
    hyps = []
    for s_idx in itertools.product(range(ns), repeat=nd * Q):
        S_D = np.array([ris_points[i] for i in s_idx]).reshape(nd, Q, order="F")
        S = np.vstack([S_P, S_D]) if nd else np.asarray(S_P)
        for x_idx in itertools.product(range(nx), repeat=K * QT):
            X = np.array([tx_points[i] for i in x_idx]).reshape(K, QT, order="F")
            ll = 0.0
            for col in range(QT):
                q = col // T
                A = G @ np.diag(S[:, q]) @ F + Hx
                e = Y[:, col] - A @ X[:, col]
                ll -= np.vdot(e, e).real / noise_var
            log_w.append(ll)
            hyps.append((x_idx, s_idx))
    log_w = np.array(log_w)
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    for wi, (x_idx, s_idx) in zip(w, hyps):
        xi = np.array(x_idx).reshape(K, QT, order="F")
        si = np.array(s_idx).reshape(nd, Q, order="F")
        for k in range(K):
            for c in range(QT):
                x_marg[k, c, xi[k, c]] += wi
        for n in range(nd):
            for q in range(Q):
                s_marg[n, q, si[n, q]] += wi
    jx, js = hyps[int(np.argmax(log_w))]
    return dict(x_marg=x_marg, s_marg=s_marg,
                x_map=np.argmax(x_marg, axis=-1), s_map=np.argmax(s_marg, axis=-1),
                x_joint=np.array(jx).reshape(K, QT, order="F"),
                s_joint=np.array(js).reshape(nd, Q, order="F"))


# ---------------------------------------------------------------------------
# scalar references


def bpsk_mmse_tanh(rho, n_grid=None):
    """``1 - ∫ (pi tau)^{-1/2} tanh(2R/tau) exp(-(R-1)^2/tau) dR`` with ``tau = 1/rho``.

    Adaptive quadrature by default; ``n_grid`` switches to a fixed trapezoid grid.
    """
    if rho <= 0:
        return 1.0
    tau = 1.0 / rho
    f = lambda R: (np.pi * tau) ** -0.5 * np.tanh(2 * R / tau) * np.exp(-(R - 1) ** 2 / tau)
    half = 12 * np.sqrt(tau)
    lo, hi = 1 - half, 1 + half
    if n_grid is None:
        val = integrate.quad(f, lo, hi, points=[0.0, 1.0] if lo < 0 else [1.0], epsabs=1e-14,
                             epsrel=1e-12, limit=400)[0]
    else:
        R = np.linspace(lo, hi, n_grid)
        val = np.trapezoid(f(R), R)
    return 1.0 - val


def scalar_mmse_quadrature(points, rho):
    """Normalized MMSE of a uniform symbol through ``x + CN(0, 1/rho)`` by 2-D adaptive quadrature."""
    pts = np.asarray(points, dtype=complex)
    if rho <= 0:
        return 1.0
    if np.allclose(pts.imag, 0) and len(pts) == 2 and np.allclose(sorted(pts.real), [-1, 1]):
        return bpsk_mmse_tanh(rho)
    power = np.mean(np.abs(pts) ** 2)
    sd = 1 / np.sqrt(rho)
    tot = 0.0
    for x in pts:
        def f(b, a):
            y = x + a + 1j * b
            lik = np.exp(-rho * np.abs(y - pts) ** 2 + rho * (a * a + b * b))
            est = np.sum(lik * pts) / np.sum(lik)
            return abs(est - x) ** 2 * rho / np.pi * np.exp(-rho * (a * a + b * b))
        tot += integrate.dblquad(f, -9 * sd, 9 * sd, -9 * sd, 9 * sd, epsabs=1e-11, epsrel=1e-9)[0]
    return tot / len(pts) / power


def awgn_mi_quadrature(points, rho):
    """Constellation-constrained AWGN mutual information (nats) by 2-D adaptive quadrature."""
    pts = np.asarray(points, dtype=complex)
    if rho <= 0:
        return 0.0
    sd = 1 / np.sqrt(rho)
    tot = 0.0
    for x in pts:
        def f(b, a):
            n2 = a * a + b * b
            e = -rho * np.abs(x - pts + a + 1j * b) ** 2 + rho * n2
            m = e.max()
            return (m + np.log(np.sum(np.exp(e - m)))) * rho / np.pi * np.exp(-rho * n2)
        tot += integrate.dblquad(f, -9 * sd, 9 * sd, -9 * sd, 9 * sd, epsabs=1e-10, epsrel=1e-9)[0]
    return float(np.log(len(pts)) - tot / len(pts))
