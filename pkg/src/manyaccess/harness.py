"""Monte Carlo trials, sweep aggregation and CSV/SVG output."""
from __future__ import annotations

import csv
import math
import multiprocessing
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import analysis, codec
from .config import ConfigError, FixedCount, SystemConfig
from .model import (codebook_for, draw_scenario, modulate_qpsk, qpsk_decide,
                    trial_rng, uncoded_source)
from .recovery import (Dictionary, RecoveryError, RecoveryResult, bomp_recover, decode_block,
                       icbomp_recover)

ALGORITHMS = ("bomp", "nbomp", "icbomp")
CODED_BLOCK_LEN = codec.CODED_BITS // 2

CSV_HEADER = ("snr_db,algorithm,M,N,Na,d,T,K,trials,udsr,gudsr,ser,gudsr_bound,ser_pred,"
              "ser_g0,udsr_se,gudsr_se,ser_se").split(",")


def coded_source(rng: np.random.Generator, n_active: int, d: int):
    """200 random bits per user -> CRC-16 -> shortened BCH -> 124 QPSK symbols."""
    if d != CODED_BLOCK_LEN:
        raise ConfigError(f"coded packets need d = {CODED_BLOCK_LEN}, got d = {d}")
    info = rng.integers(0, 2, size=(n_active, codec.INFO_BITS), dtype=np.uint8)
    syms = np.empty((n_active, d), dtype=np.complex128)
    for i in range(n_active):
        syms[i] = modulate_qpsk(codec.encode_packet(info[i]))
    return syms, info


def uses_coding(cfg: SystemConfig, algorithm: str) -> bool:
    return cfg.coded or algorithm == "icbomp"


@dataclass(frozen=True)
class TrialMetrics:
    trial_index: int
    n_active: int
    detected_active: int
    missed_active: int
    false_selected: int
    group_success: bool
    symbol_errors: int
    symbols_total: int
    blocks_updated: tuple
    cancelled: int = 0
    excluded: bool = False                  # recovery failed; not aggregated
    error: str = ""
    wall_time: float = field(default=0.0, compare=False)


def score(active: np.ndarray, true_symbols: np.ndarray, result: RecoveryResult,
          symbols: dict, d: int) -> tuple:
    """(detected, missed, false_selected, symbol_errors) for one recovery.

    ``symbols`` maps detected users to the symbols used for the decision;
    a missed active user contributes all d symbols as errors.
    """
    active_set = set(int(u) for u in active)
    picked = set(result.selected)
    detected = len(active_set & picked)
    errors = 0
    for u in active_set:
        if u in symbols:
            errors += int(np.count_nonzero(qpsk_decide(symbols[u]) != true_symbols[u]))
        else:
            errors += d
    return detected, len(active_set) - detected, len(picked - active_set), errors


def recover(algorithm: str, y: np.ndarray, dic: Dictionary, cfg: SystemConfig) -> RecoveryResult:
    if algorithm == "bomp":
        return bomp_recover(y, dic, cfg.iterations, normalize=False)
    if algorithm == "nbomp":
        return bomp_recover(y, dic, cfg.iterations, normalize=True)
    if algorithm == "icbomp":
        return icbomp_recover(y, dic, cfg.iterations, adaptive_k=cfg.adaptive_k)
    raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")


def decision_symbols(result: RecoveryResult, coded: bool) -> dict:
    """Symbols each detected user is judged on.

    Cancelled ICBOMP users already carry re-encoded symbols. With coding,
    any remaining estimate whose packet decodes is replaced by its
    re-modulated codeword (final-only decoding for BOMP).
    """
    out = {}
    for u, est in result.estimates.items():
        if coded and u not in result.decoded:
            outcome, clean = decode_block(est)
            result.decoded.setdefault(u, outcome)
            if clean is not None:
                est = clean
        out[u] = est
    return out


def run_trial(cfg: SystemConfig, algorithm: str, trial_index: int, snr_index: int = 0,
              codebook: Optional[np.ndarray] = None, keep_result: bool = False):
    """One frame: draw, recover, score. Returns TrialMetrics (and the RecoveryResult if asked)."""
    start = time.perf_counter()
    coded = uses_coding(cfg, algorithm)
    if codebook is None:
        codebook = codebook_for(cfg)
    rng = trial_rng(cfg.seed, snr_index, trial_index)
    draw = draw_scenario(cfg, codebook, rng, coded_source if coded else uncoded_source)
    dic = Dictionary(codebook, draw.channels, cfg.rho0)
    n_active = int(draw.active.size)
    d = cfg.block_len
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = recover(algorithm, draw.received, dic, cfg)
    except (RecoveryError, np.linalg.LinAlgError) as exc:
        m = TrialMetrics(trial_index, n_active, 0, n_active, 0, False, n_active * d, n_active * d,
                         (), excluded=True, error=str(exc), wall_time=time.perf_counter() - start)
        return (m, None, draw) if keep_result else m
    detected, missed, false_sel, errors = score(draw.active, draw.symbols, result,
                                                decision_symbols(result, coded), d)
    m = TrialMetrics(trial_index, n_active, detected, missed, false_sel, missed == 0, errors,
                     n_active * d, tuple(result.blocks_updated), len(result.cancelled_at),
                     wall_time=time.perf_counter() - start)
    return (m, result, draw) if keep_result else m


@dataclass
class MetricsRow:
    snr_db: float
    algorithm: str
    M: int
    N: int
    Na: float                    # active count, or N*p for Bernoulli activity
    d: int
    T: int
    K: int
    trials: int
    udsr: float
    gudsr: float
    ser: float
    gudsr_bound: float = math.nan
    ser_pred: float = math.nan
    ser_g0: float = math.nan
    udsr_se: float = math.nan
    gudsr_se: float = math.nan
    ser_se: float = math.nan
    mean_blocks_per_iteration: list = field(default_factory=list)
    excluded: int = 0
    mean_active: float = math.nan
    false_selected: float = math.nan      # per trial
    ser_cluster_se: float = math.nan      # trial-level standard error of the pooled SER
    metrics: list = field(default_factory=list, repr=False)

    def csv_values(self) -> list:
        return [getattr(self, k) for k in CSV_HEADER]

    def interval(self, metric: str, z: float = 1.959964) -> tuple:
        v, se = getattr(self, metric), getattr(self, metric + "_se")
        return v - z * se, v + z * se


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n) if n else math.nan


def _ratio_cluster_se(num: np.ndarray, den: np.ndarray) -> float:
    """Standard error of sum(num)/sum(den) treating trials as independent clusters."""
    n = num.size
    if n < 2 or den.sum() == 0:
        return math.nan
    r = num.sum() / den.sum()
    resid = num - r * den
    return float(math.sqrt(n / (n - 1) * np.sum(resid ** 2)) / den.sum())


def nominal_active(cfg: SystemConfig) -> float:
    if isinstance(cfg.activity, FixedCount):
        return float(cfg.activity.count)
    return cfg.num_online * cfg.activity.p


def aggregate(cfg: SystemConfig, algorithm: str, metrics: Sequence[TrialMetrics],
              analytic: bool = True) -> MetricsRow:
    """Ordered reduction of per-trial metrics into one row."""
    metrics = sorted(metrics, key=lambda m: m.trial_index)
    used = [m for m in metrics if not m.excluded]
    n = len(used)
    if n == 0:
        raise RecoveryError("every trial in the cell failed")
    act = np.array([m.n_active for m in used], dtype=float)
    det = np.array([m.detected_active for m in used], dtype=float)
    err = np.array([m.symbol_errors for m in used], dtype=float)
    tot = np.array([m.symbols_total for m in used], dtype=float)
    total_active = act.sum()
    udsr = det.sum() / total_active if total_active else 1.0
    gudsr = sum(m.group_success for m in used) / n
    ser = err.sum() / tot.sum() if tot.sum() else 0.0
    depth = max(len(m.blocks_updated) for m in used)
    blocks = []
    for i in range(depth):
        vals = [m.blocks_updated[i] for m in used if len(m.blocks_updated) > i]
        blocks.append(float(np.mean(vals)))
    row = MetricsRow(cfg.snr_db, algorithm, cfg.num_antennas, cfg.num_online, nominal_active(cfg),
                     cfg.block_len, cfg.frame_len, cfg.iterations, n, float(udsr), float(gudsr),
                     float(ser), udsr_se=_binomial_se(udsr, int(total_active)),
                     gudsr_se=_binomial_se(gudsr, n), ser_se=_binomial_se(ser, int(tot.sum())),
                     mean_blocks_per_iteration=blocks, excluded=len(metrics) - n,
                     mean_active=float(act.mean()),
                     false_selected=float(np.mean([m.false_selected for m in used])),
                     ser_cluster_se=_ratio_cluster_se(err, tot), metrics=list(metrics))
    if analytic:
        attach_analysis(row, cfg)
    return row


def attach_analysis(row: MetricsRow, cfg: SystemConfig) -> None:
    """Predicted GUDSR bound and SER for fixed-activity configs (NaN otherwise)."""
    M, T, K, d = cfg.num_antennas, cfg.frame_len, cfg.iterations, cfg.block_len
    if K * d < M * T:
        row.ser_pred = analysis.ser_average(M, T, K, d, cfg.rho0)
        row.ser_g0 = analysis.ser_g0(M, T, K, d, cfg.rho0)
    if isinstance(cfg.activity, FixedCount) and cfg.num_online > cfg.activity.count:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", analysis.ApproximationWarning)
            row.gudsr_bound = analysis.gudsr_lower_bound(cfg)


def analytic_row(cfg: SystemConfig) -> MetricsRow:
    row = MetricsRow(cfg.snr_db, "analysis", cfg.num_antennas, cfg.num_online, nominal_active(cfg),
                     cfg.block_len, cfg.frame_len, cfg.iterations, 0,
                     math.nan, math.nan, math.nan)
    attach_analysis(row, cfg)
    return row


# worker state for forked pools; the codebook is inherited, never pickled
_WORKER: dict = {}


def _run_chunk(args) -> list:
    snr_index, snr_db, indices = args
    cfg = _WORKER["cfg"].with_(snr_db=snr_db)
    return [run_trial(cfg, _WORKER["algorithm"], i, snr_index, _WORKER["codebook"]) for i in indices]


def parse_snr_grid(text: str) -> list:
    """``start:step:stop`` (stop included), a comma list, or a single value."""
    text = text.strip()
    try:
        if ":" in text:
            start, step, stop = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ConfigError(f"bad SNR range {text!r}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 10) for i in range(count)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad SNR grid {text!r}") from exc


def run_sweep(cfg: SystemConfig, snr_grid: Sequence[float], trials: int, algorithm: str,
              workers: Optional[int] = None, analytic: bool = True, chunk: int = 8,
              codebook: Optional[np.ndarray] = None,
              progress: Optional[Callable[[str], None]] = None) -> list:
    """One MetricsRow per SNR; trial t at grid point i always uses stream (seed, i, t)."""
    if not snr_grid:
        raise ConfigError("empty SNR grid")
    if trials < 1:
        raise ConfigError("trials must be positive")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    if uses_coding(cfg, algorithm) and cfg.block_len != CODED_BLOCK_LEN:
        raise ConfigError(f"coded packets need d = {CODED_BLOCK_LEN}, got d = {cfg.block_len}")
    if codebook is None:
        codebook = codebook_for(cfg)
    workers = workers or 1
    jobs = [(si, float(snr), list(range(lo, min(lo + chunk, trials))))
            for si, snr in enumerate(snr_grid) for lo in range(0, trials, chunk)]
    _WORKER.update(cfg=cfg, algorithm=algorithm, codebook=codebook)
    try:
        if workers > 1:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
                outputs = list(pool.map(_run_chunk, jobs))
        else:
            outputs = [_run_chunk(job) for job in jobs]
    finally:
        _WORKER.clear()
    per_snr: dict = {i: [] for i in range(len(snr_grid))}
    for (si, _, _), out in zip(jobs, outputs):
        per_snr[si].extend(out)
    rows = []
    for si, snr in enumerate(snr_grid):
        row = aggregate(cfg.with_(snr_db=float(snr)), algorithm, per_snr[si], analytic)
        rows.append(row)
        if progress:
            progress(f"{algorithm} {snr:g} dB: udsr={row.udsr:.4f} gudsr={row.gudsr:.4f} "
                     f"ser={row.ser:.3e} ({row.trials} trials)")
    return rows


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


# ---------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def emit_csv(rows: Sequence[MetricsRow], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(v) for v in r.csv_values()])


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


SER_FLOOR = 1e-6


def emit_svg(rows: Sequence[MetricsRow], path) -> None:
    """SER (log scale) and UDSR versus Es/N0, one series per (algorithm, Na)."""
    if not rows:
        raise ValueError("no rows to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.fonttype"] = "none"
    matplotlib.rcParams["svg.hashsalt"] = "manyaccess"

    series: dict = {}
    for r in rows:
        series.setdefault((r.algorithm, r.Na), []).append(r)
    fig, (ax_ser, ax_udsr) = plt.subplots(1, 2, figsize=(10, 4))
    floored = False
    for (algo, na), rs in sorted(series.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        rs = sorted(rs, key=lambda r: r.snr_db)
        x = [r.snr_db for r in rs]
        label = f"{algo}, Na={na:g}"
        ser = np.array([r.ser for r in rs], dtype=float)
        if np.any(np.isfinite(ser)):
            zero = ser <= 0
            shown = np.where(zero, SER_FLOOR, ser)
            line, = ax_ser.semilogy(x, shown, "o-", label=label)
            if zero.any():
                floored = True
                ax_ser.plot(np.array(x)[zero], shown[zero], "v", color=line.get_color(), markersize=9)
            udsr = [r.udsr for r in rs]
            ax_udsr.plot(x, udsr, "o-", color=line.get_color(), label=label)
        pred = np.array([r.ser_pred for r in rs], dtype=float)
        if np.any(np.isfinite(pred)):
            ax_ser.semilogy(x, np.maximum(pred, SER_FLOOR), "--", label=f"predicted SER ({label})")
        bound = np.array([r.gudsr_bound for r in rs], dtype=float)
        if np.any(np.isfinite(bound)):
            ax_udsr.plot(x, bound, "--", label=f"GUDSR bound ({label})")
    ax_ser.set_ylim(bottom=SER_FLOOR / 2)
    if floored:
        ax_ser.annotate(f"triangles: zero errors, drawn at {SER_FLOOR:g}", xy=(0.02, 0.02),
                        xycoords="axes fraction", fontsize=8)
    ax_ser.set_xlabel("Es/N0 (dB)")
    ax_ser.set_ylabel("SER")
    ax_udsr.set_xlabel("Es/N0 (dB)")
    ax_udsr.set_ylabel("UDSR")
    ax_udsr.set_ylim(-0.02, 1.02)
    for ax in (ax_ser, ax_udsr):
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def coding_loss_report(n: int = 255, k: int = 223) -> tuple[float, str]:
    loss = analysis.coding_loss_db(n, k)
    return loss, f"{loss:.1f} dB"
