"""Achievable rate as the RIS grows.

Separate detection and decoding stops at the uncoded fixed point.  The sum
rate adds the line integral along the best sampled decoder path, so it is
never below the separate rate.  A few paths keep this quick; the preset uses more.

    python3 demos/rate_vs_ris_size.py
"""
from sapit.core import RngStream
from sapit.experiments import get_preset
from sapit.rate_analysis import separate_rate, sum_rate

cfg = get_preset("fig6-left-desk", n_paths=3, path_points=20)
print(f"16QAM users, BPSK RIS symbols, {cfg.power_dbm[0]:g} dBm; rates in bits per channel use")
print(f"{'N':>5} {'separate':>10} {'sum':>10} {'R_T':>8} {'R_R':>8}")
for n in cfg.N_grid:
    sc = cfg.se_config(N=n)
    sep = separate_rate(sc)
    best = sum_rate(sc, cfg.n_paths, RngStream(cfg.seed).child(n).generator(), n_points=cfg.path_points)
    print(f"{n:>5} {sep.sum:10.2f} {best.sum:10.2f} {best.R_T:8.2f} {best.R_R:8.2f}")
