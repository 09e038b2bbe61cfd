"""Acceptance suite.  Each test prints one PASS/FAIL line; the lines are repeated in the terminal summary."""
import filecmp
import time

import numpy as np
import pytest
from scipy import integrate

from sapit.channel import gen_channels
from sapit.core import RngStream, make_constellation
from sapit.experiments import ber_trial, get_preset, list_presets, mse_trial, run_experiment
from sapit.frame import FrameConfig, random_frame, synthesize
from sapit.oracle import (awgn_mi_quadrature, bpsk_mmse_tanh, enumerate_pi, enumerate_s_posterior,
                          enumerate_x_posterior, exact_joint_map, quadrature_mixture_moments)
from sapit.rate_analysis import (MonotonicPath, check_convergence, eta_along, matched_curves, psi_x_un,
                                 separate_rate, sum_rate)
from sapit.receiver import (ReceiverConfig, compute_pi, normalized_problem, posterior_c, posterior_s,
                            posterior_u, posterior_uc, posterior_x, run)
from sapit.state_evolution import DecoderModel, SEConfig, run_se, se_vx

pytestmark = pytest.mark.slow

BPSK = make_constellation("bpsk")
QPSK = make_constellation("qpsk")


def _db(a, b):
    return abs(10 * np.log10(a / b))


# ---------------------------------------------------------------------------


def test_01_se_matches_simulation(acceptance):
    cfg = get_preset("fig4-left-desk", iterations=10, trials=20)
    res = [mse_trial(cfg, t) for t in range(cfg.trials)]
    sim_x = np.mean([r["mse_x"] for r in res], axis=0)
    sim_s = np.mean([r["mse_s"] for r in res], axis=0)
    traj = run_se(cfg.se_config(), n_iter=cfg.iterations)
    se_x, se_s = traj.column("v_x")[:10], traj.column("v_s")[:10]

    def close(sim, se):
        rel = np.abs(sim - se) / se
        return (rel <= 0.2) | (np.array([_db(a, b) for a, b in zip(sim, se)]) <= 1.0)

    ok_x, ok_s = close(sim_x, se_x), close(sim_s, se_s)
    start = 0.3 <= se_x[0] <= 0.8
    worst_x = max(_db(a, b) for a, b in zip(sim_x, se_x))
    worst_s = max(_db(a, b) for a, b in zip(sim_s, se_s))
    ok = start and ok_x.all() and ok_s.all()
    acceptance(1, "SE vs simulation", ok,
               f"v_x(1)={se_x[0]:.3f}; X within tol at {ok_x.sum()}/10 iters (worst {worst_x:.2f} dB), "
               f"S_D at {ok_s.sum()}/10 (worst {worst_s:.2f} dB)")
    assert ok


def test_02_posteriors_match_oracles(acceptance, rng):
    err_uc = err_xs = 0.0
    for _ in range(100):
        const = QPSK if rng.random() < 0.5 else BPSK
        S = const.size
        pi = rng.dirichlet(np.ones(S))
        d, p = rng.normal(size=2) + 1j * rng.normal(size=2)
        tau_d, tau_p = rng.uniform(0.05, 2.0, size=2)
        for mode, fn in (("u", posterior_u), ("c", posterior_c)):
            mq, vq = quadrature_mixture_moments(pi, const.points, p, tau_p, d, tau_d, mode)
            m, v = fn(d, tau_d, p, tau_p, pi, const.points)
            err_uc = max(err_uc, abs(m - mq), abs(v - vq))
        mu, vu, mc, vc, _ = posterior_uc(np.array([d]), tau_d, np.array([p]), tau_p, pi[None], const.points)
        for (m, v), mode in (((mu[0], vu[0]), "u"), ((mc[0], vc[0]), "c")):
            mq, vq = quadrature_mixture_moments(pi, const.points, p, tau_p, d, tau_d, mode)
            err_uc = max(err_uc, abs(m - mq), abs(v - vq))

        beta = rng.dirichlet(np.ones(S))
        r, o = rng.normal(size=2) + 1j * rng.normal(size=2)
        tau_r, tau_o = rng.uniform(0.05, 2.0, size=2)
        m, v, w = posterior_x(r, tau_r, o, tau_o, beta, const.points, return_probs=True)
        me, ve, we = enumerate_x_posterior(r, tau_r, o, tau_o, beta, const.points)
        err_xs = max(err_xs, abs(m - me), abs(v - ve), np.max(np.abs(w - we)))

        T = int(rng.integers(1, 4))
        alpha = rng.dirichlet(np.ones(S))
        ds = rng.normal(size=T) + 1j * rng.normal(size=T)
        ps = rng.normal(size=T) + 1j * rng.normal(size=T)
        m, v, w = posterior_s(ds, ps, tau_d, tau_p, alpha, const.points)
        me, ve, we = enumerate_s_posterior(ds, ps, tau_d + tau_p, alpha, const.points)
        err_xs = max(err_xs, abs(m - me), abs(v - ve), np.max(np.abs(w - we)))
        pis = compute_pi(alpha, ds, ps, tau_d, tau_p, const.points)
        for t in range(T):
            err_xs = max(err_xs, np.max(np.abs(pis[t] - enumerate_pi(ds, ps, tau_d + tau_p, alpha,
                                                                      const.points, t))))
    ok = err_uc <= 1e-6 and err_xs <= 1e-12
    acceptance(2, "posteriors vs oracles", ok, f"u/c max err {err_uc:.1e}, x/s max err {err_xs:.1e}")
    assert ok


def _tiny_trial(power, seed):
    f = FrameConfig(N=3, M=4, K=2, N_P=1, Q=1, T=1, tx_const=BPSK, ris_const=BPSK, power_dbm=power,
                    direct_link=True)
    rs = RngStream(seed)
    ch = gen_channels((3, 4, 2), rng=rs)
    fr = random_frame(f, rs)
    Y = synthesize(ch, fr, f.noise_var, rs, 1)
    res = run(Y, ch, f, fr.S[:1], ReceiverConfig(max_iter=50))
    pr = normalized_problem(Y, ch, f, fr.S[:1])
    ex = exact_joint_map(pr.Y, pr.G, pr.H, pr.F, pr.noise_var, pr.S_P, 1, BPSK.points, BPSK.points)
    xt = BPSK.nearest(fr.X / f.symbol_scale)
    st = BPSK.nearest(fr.S[1:])
    amp = np.sum(res.x_idx != xt) + np.sum(res.s_idx != st)
    opt = np.sum(ex["x_map"] != xt) + np.sum(ex["s_map"] != st)
    return amp, opt, xt.size + st.size


def test_03_tiny_system_map_ordering(acceptance):
    powers = (50.0, 55.0, 60.0, 65.0, 70.0)
    parts = []
    ok = True
    for p in powers:
        r = np.array([_tiny_trial(p, s) for s in range(500)])
        n = r[:, 2].sum()
        ser_amp, ser_map = r[:, 0].sum() / n, r[:, 1].sum() / n
        ok &= ser_map <= ser_amp
        parts.append(f"{p:g} dBm {ser_map:.4f}<={ser_amp:.4f}")
    acceptance(3, "exact MAP SER <= message-passing SER", ok, "; ".join(parts))
    assert ok


def test_04_genie_bounds(acceptance):
    cfg = get_preset("fig5-left-desk", trials=100)
    ok, strict, parts = True, False, []
    for p in cfg.power_dbm:
        res = [ber_trial(cfg, p, t)[0] for t in range(cfg.trials)]
        avg = {k: np.mean([r[k] for r in res]) for k in res[0]}
        jx, gx = avg[("joint", "X")], avg[("known_S", "X")]
        js, gs = avg[("joint", "S")], avg[("known_X", "S")]
        ok &= gx <= jx and gs <= js
        strict |= gx < jx or gs < js
        parts.append(f"{p:g} dBm X {gx:.2e}/{jx:.2e} S {gs:.2e}/{js:.2e}")
    ok = ok and strict
    acceptance(4, "genie-aided BER <= joint BER", ok, "; ".join(parts))
    assert ok


def test_05_coded_waterfall(acceptance):
    coded = get_preset("fig5-right-desk", trials=20, genie=False, csi_nmse_db=None)
    uncoded = get_preset("fig5-right-desk", trials=20, genie=False, csi_nmse_db=None, coded=False)
    hit, parts = None, []
    for p in coded.power_dbm:
        bc = np.mean([ber_trial(coded, p, t)[0][("joint", "X")] for t in range(coded.trials)])
        bu = np.mean([ber_trial(uncoded, p, t)[0][("joint", "X")] for t in range(uncoded.trials)])
        parts.append(f"{p:g} dBm coded {bc:.1e} uncoded {bu:.1e}")
        if bc < 1e-3 and bu > 1e-2 and hit is None:
            hit = p
    ok = hit is not None
    acceptance(5, "coded waterfall", ok, "; ".join(parts))
    assert ok


def test_06_i_mmse_identity(acceptance):
    K = 32
    worst = 0.0
    for const in (BPSK, QPSK):
        for rho in (1.0, 4.0, 10.0):
            lhs = K * integrate.quad(lambda r: psi_x_un(r, const), 0.0, rho, epsabs=1e-12, limit=200)[0]
            rhs = K * awgn_mi_quadrature(const.points, rho)
            worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-2
    acceptance(6, "I-MMSE identity", ok, f"max |K int psi - K I| = {worst:.2e} nats")
    assert ok


def test_07_bpsk_mmse(acceptance):
    parts, ok = [], True
    for i, tau_r in enumerate((0.25, 0.5, 1.0, 2.0, 4.0)):
        v, se = se_vx(tau_r, np.inf, const=BPSK, samples=100_000, rng=100 + i)
        ref = bpsk_mmse_tanh(1.0 / tau_r)
        z = abs(v - ref) / se
        ok &= z <= 3.0
        parts.append(f"tau_r {tau_r:g}: {z:.2f} se")
    acceptance(7, "BPSK MMSE vs tanh integral", ok, "; ".join(parts))
    assert ok


def test_08_rate_trend(acceptance):
    cfg = get_preset("fig6-left-desk")
    sums, seps = [], []
    for n in cfg.N_grid:
        sc = cfg.se_config(N=n)
        sums.append(sum_rate(sc, cfg.n_paths, RngStream(cfg.seed).child(n).generator(), cfg.unit,
                             cfg.path_points).sum)
        seps.append(separate_rate(sc, cfg.unit).sum)
    sums, seps = np.array(sums), np.array(seps)
    ok = bool(np.all(np.diff(sums) >= 0) and np.all(seps <= sums))
    acceptance(8, "rate trend in N", ok,
               ", ".join(f"N={n}: {a:.2f}/{b:.2f}" for n, a, b in zip(cfg.N_grid, seps, sums))
               + " (separate/sum bits)")
    assert ok


def test_09_convergence_predicate(acceptance):
    cfg = SEConfig(N=64, M=256, K=32, N_P=20, T=1, zeta=0.6, noise_var=0.6, tx_const=QPSK, ris_const=BPSK,
                   samples=20_000, quadrature=True)
    start = run_se(cfg).states[-1]
    path = MonotonicPath.straight(40)
    etas = eta_along(path, cfg)
    out = {}
    for name, delta in (("below", 0.05), ("above", -0.05)):
        cx, cs = matched_curves(path, etas, delta)
        pred = check_convergence(path, cx, cs, cfg, etas)
        coded = SEConfig(**{**cfg.__dict__, "x_decoder": DecoderModel("curve", curve=cx),
                            "s_decoder": DecoderModel("curve", curve=cs), "max_iter": 400})
        end = run_se(coded).states[-1]
        out[name] = (pred, end.v_x, end.v_s)
    b, a = out["below"], out["above"]
    ok = (start.v_x > 0.1 and start.v_s > 0.1 and b[0] and max(b[1:]) < 1e-3
          and not a[0] and min(a[1:]) > 0.1)
    acceptance(9, "convergence predicate", ok,
               f"uncoded ({start.v_x:.3f}, {start.v_s:.3f}); eta-5%: pred={b[0]} v=({b[1]:.1e}, {b[2]:.1e}); "
               f"eta+5%: pred={a[0]} v=({a[1]:.3f}, {a[2]:.3f})")
    assert ok


_SMALL = dict(trials=2, iterations=3, max_iter=5, se_samples=2000, n_paths=2, path_points=6)


def _reduced(name):
    cfg = get_preset(name)
    over = dict(_SMALL, power_dbm=cfg.power_dbm[:2])
    if not name.endswith("-desk"):
        over.update(trials=1, power_dbm=cfg.power_dbm[:1])
        if cfg.N_grid:
            over["N_grid"] = cfg.N_grid[:2]
    return get_preset(name, **over)


def test_10_determinism(acceptance, tmp_path):
    bad = []
    for name in list_presets():
        cfg = _reduced(name)
        a = run_experiment(cfg, tmp_path / "a" / name, threads=1)
        b = run_experiment(cfg, tmp_path / "b" / name, threads=1)
        for fa, fb in zip(a, b):
            if fa.suffix == ".csv" and not filecmp.cmp(fa, fb, shallow=False):
                bad.append(fa.name)
    ok = not bad
    acceptance(10, "determinism", ok, f"{len(list_presets())} presets rerun" + (f", differ: {bad}" if bad else ""))
    assert ok


def _per_iteration(N, M, K, Q, T, reps=5):
    f = FrameConfig(N=N, M=M, K=K, N_P=20, Q=Q, T=T, power_dbm=34.0, direct_link=True)
    rs = RngStream(1)
    ch = gen_channels((N, M, K), rng=rs)
    fr = random_frame(f, rs)
    Y = synthesize(ch, fr, f.noise_var, rs, T)
    best = []
    for n in (2, 10):
        ts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            run(Y, ch, f, fr.S[:20], ReceiverConfig(max_iter=n, tol=0.0))
            ts.append(time.perf_counter() - t0)
        best.append(min(ts))
    return (best[1] - best[0]) / 8


def test_11_linear_complexity(acceptance):
    base = dict(N=1536, M=2048, K=1536, Q=32, T=2)
    t0 = _per_iteration(**base)
    ratios = {}
    for k in base:
        ratios[k] = _per_iteration(**{**base, k: 2 * base[k]}) / t0
    ok = all(1.6 <= r <= 2.6 for r in ratios.values())
    acceptance(11, "per-iteration cost doubling", ok, ", ".join(f"{k} x{r:.2f}" for k, r in ratios.items()))
    assert ok
