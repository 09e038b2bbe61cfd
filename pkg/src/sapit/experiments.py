"""Experiment configurations, presets and the Monte Carlo orchestrator."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .channel import Geometry, PathLossParams, gen_channels, perturb_csi
from .core import InvalidArgument, RngStream, make_constellation, noise_power
from .frame import CodeContext, FrameConfig, random_frame, synthesize
from .rate_analysis import separate_rate, sum_rate
from .receiver import ReceiverConfig, run
from .state_evolution import SEConfig, run_se, trajectory_rows, SE_COLUMNS

KINDS = ("mse-vs-iteration", "ber-vs-power", "rate-vs-N", "se-only", "rate-only")


class ConfigError(InvalidArgument):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class NumericalFailure(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    kind: str = "mse-vs-iteration"
    trials: int = 20
    seed: int = 0
    # system
    N: int = 256
    M: int = 256
    K: int = 32
    N_P: int = 20
    Q: int = 64
    T: int = 2
    tx: str = "qpsk"
    ris: str = "bpsk"
    power_dbm: tuple = (12.0,)
    N_grid: tuple = ()
    noise_dbm_hz: float = -150.0
    bandwidth_hz: float = 1e6
    coded: bool = False
    direct_link: bool = True
    csi_nmse_db: float | None = None
    # receiver
    mode: str = ""
    genie: bool = True
    max_iter: int = 50
    tol: float = 1e-4
    damping: float = 1.0
    iterations: int = 10
    # analysis
    se_samples: int = 100_000
    n_paths: int = 10
    path_points: int = 40
    unit: str = "bits"
    # geometry
    tx_pos: tuple = Geometry().tx
    rx_pos: tuple = Geometry().rx
    ris_pos: tuple = Geometry().ris
    warnings: list = field(default_factory=list, compare=False)

    @property
    def receiver_mode(self):
        return self.mode or ("joint" if self.coded else "uncoded")

    @property
    def noise_var(self):
        return noise_power(self.noise_dbm_hz, self.bandwidth_hz)

    @property
    def geometry(self):
        return Geometry(tuple(self.tx_pos), tuple(self.rx_pos), tuple(self.ris_pos))

    def frame(self, power_dbm=None, N=None) -> FrameConfig:
        return FrameConfig(N=N or self.N, M=self.M, K=self.K, N_P=self.N_P, Q=self.Q, T=self.T,
                           tx_const=make_constellation(self.tx), ris_const=make_constellation(self.ris),
                           power_dbm=self.power_dbm[0] if power_dbm is None else power_dbm,
                           noise_var=self.noise_var, coded=self.coded, direct_link=self.direct_link)

    def receiver(self, genie="none", fixed=False) -> ReceiverConfig:
        return ReceiverConfig(max_iter=self.iterations if fixed else self.max_iter, tol=0.0 if fixed else self.tol,
                              mode=self.receiver_mode, direct_link=self.direct_link, genie=genie,
                              damping=self.damping)

    def se_config(self, power_dbm=None, N=None) -> SEConfig:
        return SEConfig.from_frame(self.frame(power_dbm, N), self.geometry, samples=self.se_samples, seed=self.seed)

    def canonical(self):
        d = dataclasses.asdict(self)
        d.pop("warnings")
        return d

    def hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# parsing


_SECTIONS = {
    "experiment": ("name", "kind", "trials", "seed"),
    "system": ("N", "M", "K", "N_P", "Q", "T", "tx", "ris", "power_dbm", "N_grid", "noise_dbm_hz",
               "bandwidth_hz", "coded", "direct_link", "csi_nmse_db"),
    "receiver": ("mode", "genie", "max_iter", "tol", "damping", "iterations"),
    "analysis": ("se_samples", "n_paths", "path_points", "unit"),
    "geometry": ("tx_pos", "rx_pos", "ris_pos"),
}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key, raw):
    t = _TYPES[key]
    raw = raw.strip()
    if key in ("power_dbm", "N_grid", "tx_pos", "rx_pos", "ris_pos"):
        vals = [v for v in raw.replace(";", ",").split(",") if v.strip()]
        conv = int if key == "N_grid" else float
        return tuple(conv(v) for v in vals)
    if key == "csi_nmse_db":
        return None if raw.lower() in ("", "none", "off") else float(raw)
    if t in ("int",):
        return int(raw)
    if t in ("float",):
        return float(raw)
    if t in ("bool",):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def _check(cfg: ExperimentConfig):
    errs = []
    if cfg.kind not in KINDS:
        errs.append(f"kind: unknown experiment kind {cfg.kind!r}")
    if cfg.trials < 1:
        errs.append("trials: must be at least 1")
    for k in ("N", "M", "K", "Q", "T"):
        if getattr(cfg, k) < 1:
            errs.append(f"{k}: must be positive")
    if not 1 <= cfg.N_P < cfg.N:
        errs.append("N_P: pilot rows must be fewer than N")
    for n in cfg.N_grid:
        if not cfg.N_P < n:
            errs.append(f"N_grid: pilot rows must be fewer than N (N={n})")
    if not cfg.power_dbm:
        errs.append("power_dbm: sweep grid is empty")
    if cfg.kind == "rate-vs-N" and not cfg.N_grid:
        errs.append("N_grid: sweep grid is empty")
    for k in ("tx", "ris"):
        try:
            make_constellation(getattr(cfg, k))
        except InvalidArgument as e:
            errs.append(f"{k}: {e}")
    if cfg.mode not in ("", "uncoded", "joint", "separate"):
        errs.append(f"mode: unknown receiver mode {cfg.mode!r}")
    if cfg.mode in ("joint", "separate") and not cfg.coded:
        errs.append("mode: coded receiver modes need coded = true")
    if not 0 < cfg.damping <= 1:
        errs.append("damping: must lie in (0, 1]")
    if cfg.max_iter < 1 or cfg.iterations < 1:
        errs.append("max_iter/iterations: must be positive")
    if cfg.se_samples < 1 or cfg.n_paths < 1 or cfg.path_points < 3:
        errs.append("analysis: sample and path counts must be positive (path_points >= 3)")
    if cfg.unit not in ("bits", "nats"):
        errs.append("unit: must be bits or nats")
    for k in ("tx_pos", "rx_pos", "ris_pos"):
        if len(getattr(cfg, k)) != 3:
            errs.append(f"{k}: need three coordinates")
    if cfg.coded:
        try:
            cfg.frame().payload_sizes()
        except InvalidArgument as e:
            errs.append(f"coded: frame cannot carry whole codewords ({e})")
    return errs


def parse_config(text: str, base: ExperimentConfig | None = None):
    """Parse INI text into ``(config, errors)``; every problem is collected, none raised."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    errs = []
    try:
        cp.read_string(text)
    except configparser.Error as e:
        return None, [f"syntax: {e}"]
    values = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            errs.append(f"[{sec}]: unknown section")
            continue
        for key, raw in cp.items(sec):
            if key not in _SECTIONS[sec]:
                errs.append(f"{sec}.{key}: unknown key")
                continue
            try:
                values[key] = _convert(key, raw)
            except ValueError as e:
                errs.append(f"{sec}.{key}: {e}")
    cfg = dataclasses.replace(base, **values) if base is not None else ExperimentConfig(**values)
    cfg.warnings = list(base.warnings) if base is not None else []
    if base is None and "seed" not in values:
        cfg.warnings.append("seed missing; defaulted to 0")
    errs += _check(cfg)
    return cfg, errs


def validate_config(path):
    """Read and check a config file.  Returns ``(config, errors)``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        return None, [f"config: cannot read {path}: {e}"]
    return parse_config(text)


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec, keys in _SECTIONS.items():
        cp[sec] = {}
        for k in keys:
            v = getattr(cfg, k)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            cp[sec][k] = str(v)
    import io
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# presets


def _preset_table():
    full = dict(N=512, M=512, K=64, N_P=40, Q=1000)
    desk = dict(N=256, M=256, K=32, N_P=20, Q=64)
    common4l = dict(kind="mse-vs-iteration", T=2, tx="qpsk", ris="bpsk", coded=False, direct_link=False,
                    iterations=20)
    common4r = dict(kind="mse-vs-iteration", T=2, tx="qpsk", ris="bpsk", coded=True, direct_link=True,
                    iterations=20)
    common5l = dict(kind="ber-vs-power", T=2, tx="qpsk", ris="bpsk", coded=False, direct_link=False)
    common5r = dict(kind="ber-vs-power", T=2, tx="qpsk", ris="bpsk", coded=True, direct_link=True,
                    csi_nmse_db=-20.0)
    common6l = dict(kind="rate-vs-N", T=1, tx="16qam", ris="bpsk", direct_link=True, trials=1)
    common6r = dict(kind="rate-vs-N", T=1, tx="64qam", ris="qpsk", direct_link=True, trials=1)
    return {
        "fig4-left": {**full, **common4l, "power_dbm": (12.0,)},
        "fig4-left-desk": {**desk, **common4l, "power_dbm": (34.0,)},
        "fig4-right": {**full, **common4r, "power_dbm": (6.0,)},
        "fig4-right-desk": {**desk, **common4r, "power_dbm": (26.0,)},
        "fig5-left": {**full, **common5l, "power_dbm": (4.0, 6.0, 8.0, 10.0, 12.0)},
        "fig5-left-desk": {**desk, **common5l, "power_dbm": (31.0, 32.0, 33.0, 34.0, 35.0)},
        "fig5-right": {**full, **common5r, "power_dbm": (0.0, 2.0, 4.0, 6.0, 8.0)},
        "fig5-right-desk": {**desk, **common5r, "power_dbm": (22.0, 24.0, 26.0, 28.0, 30.0)},
        "fig6-left": {**full, **common6l, "power_dbm": (8.0,), "N_grid": tuple(range(100, 801, 100))},
        "fig6-left-desk": {**desk, **common6l, "power_dbm": (24.0,), "N_grid": (64, 128, 192, 256)},
        "fig6-right": {**full, **common6r, "power_dbm": (12.0,), "N_grid": tuple(range(100, 801, 100))},
        "fig6-right-desk": {**desk, **common6r, "power_dbm": (28.0,), "N_grid": (64, 128, 192, 256)},
    }


def list_presets():
    return sorted(_preset_table())


def get_preset(name: str, **overrides) -> ExperimentConfig:
    table = _preset_table()
    if name not in table:
        raise ConfigError([f"preset: unknown preset {name!r}"])
    cfg = ExperimentConfig(name=name, **{**table[name], **overrides})
    errs = _check(cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


# ---------------------------------------------------------------------------
# trials


def _trial_setup(cfg: ExperimentConfig, power, trial):
    fcfg = cfg.frame(power)
    rs = RngStream(cfg.seed).child(trial)
    ch = gen_channels((fcfg.N, fcfg.M, fcfg.K), cfg.geometry, PathLossParams(), rs)
    ctx = CodeContext.for_config(fcfg, rs) if fcfg.coded else None
    fr = random_frame(fcfg, rs, ctx)
    Y = synthesize(ch, fr, fcfg.noise_var, rs, fcfg.T, fcfg.direct_link)
    return fcfg, rs, ch, ctx, fr, Y


def mse_trial(cfg: ExperimentConfig, trial: int):
    fcfg, rs, ch, ctx, fr, Y = _trial_setup(cfg, cfg.power_dbm[0], trial)
    res = run(Y, ch, fcfg, fr.S[:fcfg.N_P], cfg.receiver(fixed=True), ctx, fr)
    return dict(mse_x=[r["mse_x"] for r in res.trace], mse_s=[r["mse_s"] for r in res.trace],
                diverged="diverged" in res.flags)


def ber_trial(cfg: ExperimentConfig, power: float, trial: int):
    fcfg, rs, ch, ctx, fr, Y = _trial_setup(cfg, power, trial)
    S_P = fr.S[:fcfg.N_P]
    out = {}
    diverged = False

    def record(label, res, which=("X", "S")):
        nonlocal diverged
        diverged |= "diverged" in res.flags
        if "X" in which:
            out[(label, "X")] = float(np.mean(res.tx_bits != fr.tx_bits))
        if "S" in which:
            out[(label, "S")] = float(np.mean(res.ris_bits != fr.ris_bits))

    record("joint", run(Y, ch, fcfg, S_P, cfg.receiver(), ctx, fr))
    if cfg.genie:
        record("known_S", run(Y, ch, fcfg, S_P, cfg.receiver("known_S"), ctx, fr), ("X",))
        record("known_X", run(Y, ch, fcfg, S_P, cfg.receiver("known_X"), ctx, fr), ("S",))
    if cfg.csi_nmse_db is not None:
        est = perturb_csi(ch, cfg.csi_nmse_db, rs)
        record("imperfect_csi", run(Y, est, fcfg, S_P, cfg.receiver(), ctx, fr))
    return out, diverged


def _map(fn, jobs, threads):
    if threads <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------------------
# orchestration


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _stderr(a, axis=0):
    a = np.asarray(a, dtype=float)
    n = a.shape[axis]
    return a.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(np.delete(a.shape, axis))


def _check_divergence(flags):
    frac = float(np.mean(flags)) if len(flags) else 0.0
    if frac > 0.1:
        raise NumericalFailure(f"{frac:.0%} of trials diverged")


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int | None = None):
    """Run ``cfg`` and write CSVs, metadata and a plot script into ``out_dir``.  Returns the paths."""
    errs = _check(cfg)
    if errs:
        raise ConfigError(errs)
    threads = threads or os.cpu_count() or 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    stem = out / cfg.name
    files = []
    if cfg.kind == "mse-vs-iteration":
        res = _map(mse_trial, [(cfg, t) for t in range(cfg.trials)], threads)
        _check_divergence([r["diverged"] for r in res])
        mx = np.array([r["mse_x"] for r in res])
        ms = np.array([r["mse_s"] for r in res])
        traj = run_se(cfg.se_config(), n_iter=cfg.iterations)
        se_x, se_s = traj.column("v_x"), traj.column("v_s")
        rows = [(h, cfg.seed, i + 1, mx[:, i].mean(), _stderr(mx[:, i]), ms[:, i].mean(), _stderr(ms[:, i]),
                 se_x[i], se_s[i], cfg.trials) for i in range(cfg.iterations)]
        files.append(_emit(stem.with_name(cfg.name + "_mse.csv"),
                           ["config_hash", "seed", "iteration", "mse_x_mean", "mse_x_stderr", "mse_s_mean",
                            "mse_s_stderr", "se_v_x", "se_v_s", "trials"], rows))
        files.append(_emit_se(stem.with_name(cfg.name + "_se.csv"), traj, h, cfg.seed))
    elif cfg.kind == "ber-vs-power":
        rows, flags = [], []
        for p in cfg.power_dbm:
            res = _map(ber_trial, [(cfg, p, t) for t in range(cfg.trials)], threads)
            flags += [d for _, d in res]
            keys = sorted(res[0][0])
            for k in keys:
                v = np.array([r[0][k] for r in res])
                rows.append((h, cfg.seed, p, k[0], k[1], v.mean(), _stderr(v), cfg.trials))
        _check_divergence(flags)
        files.append(_emit(stem.with_name(cfg.name + "_ber.csv"),
                           ["config_hash", "seed", "power_dbm", "detector", "stream", "ber_mean", "ber_stderr",
                            "trials"], rows))
    elif cfg.kind in ("rate-vs-N", "rate-only"):
        grid = cfg.N_grid if cfg.kind == "rate-vs-N" else (cfg.N,)
        rows = []
        for n in grid:
            sc = cfg.se_config(N=n)
            r = sum_rate(sc, cfg.n_paths, RngStream(cfg.seed).child(n).generator(), cfg.unit, cfg.path_points)
            sep = separate_rate(sc, cfg.unit)
            spread = (max(r.path_values) - min(r.path_values)) if r.path_values else 0.0
            rows.append((h, cfg.seed, n, r.R_T, r.R_R, r.sum, sep.sum, spread, cfg.unit))
        files.append(_emit(stem.with_name(cfg.name + "_rate.csv"),
                           ["config_hash", "seed", "N", "R_T", "R_R", "sum_rate", "separate_rate", "path_spread",
                            "unit"], rows))
    elif cfg.kind == "se-only":
        traj = run_se(cfg.se_config(), n_iter=None)
        files.append(_emit_se(stem.with_name(cfg.name + "_se.csv"), traj, h, cfg.seed))
    files.append(_write_meta(stem.with_name(cfg.name + "_meta.json"), cfg, h))
    files.append(_write_plot(stem.with_name(cfg.name + "_plot.py"), cfg, [f for f in files if f.suffix == ".csv"]))
    return files


def _emit(path, header, rows):
    _write_csv(path, header, rows)
    return path


def _emit_se(path, traj, h, seed):
    rows = [(h, seed, *r) for r in trajectory_rows(traj)]
    _write_csv(path, ["config_hash", "seed"] + SE_COLUMNS, rows)
    return path


def _write_meta(path, cfg, h):
    meta = dict(config_hash=h, config=cfg.canonical(), warnings=cfg.warnings)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


_PLOT = '''"""Plot {name} from its CSV output (matplotlib)."""
import csv
import sys
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


fig, ax = plt.subplots()
kind = {kind!r}
files = {files!r}
if kind == "mse-vs-iteration":
    r = rows(files[0])
    it = [int(x["iteration"]) for x in r]
    for col, lab, style in (("mse_x_mean", "X sim", "-o"), ("se_v_x", "X SE", "--"),
                            ("mse_s_mean", "S_D sim", "-s"), ("se_v_s", "S_D SE", "--")):
        ax.semilogy(it, [float(x[col]) for x in r], style, label=lab)
    ax.set_xlabel("iteration")
    ax.set_ylabel("MSE")
elif kind == "ber-vs-power":
    curves = defaultdict(list)
    for x in rows(files[0]):
        curves[(x["detector"], x["stream"])].append((float(x["power_dbm"]), float(x["ber_mean"])))
    for (det, stream), pts in sorted(curves.items()):
        pts.sort()
        ax.semilogy([p for p, _ in pts], [max(b, 1e-7) for _, b in pts], "-o", label=f"{{stream}} {{det}}")
    ax.set_xlabel("transmit power (dBm)")
    ax.set_ylabel("BER")
elif kind in ("rate-vs-N", "rate-only"):
    r = rows(files[0])
    n = [int(x["N"]) for x in r]
    ax.plot(n, [float(x["sum_rate"]) for x in r], "-o", label="joint (matched codes)")
    ax.plot(n, [float(x["separate_rate"]) for x in r], "--s", label="separate")
    ax.set_xlabel("N")
    ax.set_ylabel("sum rate ({unit}/channel use)")
else:
    r = rows(files[0])
    it = [int(x["iteration"]) for x in r]
    ax.semilogy(it, [float(x["v_x"]) for x in r], label="v_x")
    ax.semilogy(it, [float(x["v_s"]) for x in r], label="v_s")
    ax.set_xlabel("iteration")
ax.grid(True, which="both", alpha=0.3)
ax.legend()
fig.savefig(sys.argv[1] if len(sys.argv) > 1 else "{name}.png", dpi=150)
'''


def _write_plot(path, cfg, csvs):
    path.write_text(_PLOT.format(name=cfg.name, kind=cfg.kind, files=[p.name for p in csvs], unit=cfg.unit),
                    encoding="utf-8")
    return path
