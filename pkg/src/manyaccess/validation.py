"""Cross-check oracles for every module, each compared against an independent computation."""
from __future__ import annotations

import binascii
import itertools
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from . import analysis, codec
from .config import FixedCount, SystemConfig
from .model import (assemble_measurement, complex_normal, draw_channels, explicit_dictionary,
                    generate_codebook, modulate_qpsk, trial_rng)
from .recovery import Dictionary, bomp_recover


@dataclass
class OracleResult:
    name: str
    passed: bool
    measured: str
    tolerance: str
    seconds: float = 0.0
    notes: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" [{self.notes}]" if self.notes else ""
        return f"{tag}  {self.name}: {self.measured} (tolerance {self.tolerance}, {self.seconds:.1f}s){extra}"


@dataclass
class ValidationReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, name: str) -> OracleResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def text(self) -> str:
        lines = [r.line() for r in self.results]
        ok = sum(r.passed for r in self.results)
        lines.append(f"{ok}/{len(self.results)} oracles passed")
        return "\n".join(lines)


# ---------------------------------------------------------------- codec

def oracle_crc_reference(rng, fast: bool):
    """Check value plus agreement with binascii.crc_hqx on random byte strings."""
    check = codec.crc16(np.unpackbits(np.frombuffer(b"123456789", np.uint8)))
    agree = 0
    n = 50 if fast else 200
    for _ in range(n):
        data = rng.bytes(int(rng.integers(1, 40)))
        ours = codec.crc16(np.unpackbits(np.frombuffer(data, np.uint8)))
        agree += ours == binascii.crc_hqx(data, 0xFFFF)
    ok = check == 0x29B1 and agree == n
    return ok, f"check value {check:#06x}, {agree}/{n} strings match crc_hqx", "0x29b1 and all match"


def oracle_crc_single_flip(rng, fast: bool):
    words = 2 if fast else 10
    detected = total = 0
    for _ in range(words):
        word = codec.crc16_append(rng.integers(0, 2, codec.INFO_BITS, dtype=np.uint8))
        if not codec.crc16_check(word):
            return False, "unflipped word rejected", "100%"
        for pos in range(word.size):
            bad = word.copy()
            bad[pos] ^= 1
            detected += not codec.crc16_check(bad)
            total += 1
    return detected == total, f"{detected}/{total} single flips detected", "100%"


def oracle_bch_four_flips(rng, fast: bool):
    trials = 1000 if fast else 10_000
    good = 0
    for _ in range(trials):
        info = rng.integers(0, 2, codec.INFO_BITS, dtype=np.uint8)
        word = codec.encode_packet(info)
        pos = rng.choice(word.size, 4, replace=False)
        word[pos] ^= 1
        out = codec.bch_decode(word)
        good += (out.status is codec.DecodeStatus.CORRECTED and out.num_bit_errors == 4
                 and np.array_equal(out.bits, info))
    return good == trials, f"{good}/{trials} corrected", "100%"


def oracle_bch_crc_gate(rng, fast: bool):
    trials = 300 if fast else 2000
    accepted = bad = 0
    for _ in range(trials):
        word = codec.encode_packet(rng.integers(0, 2, codec.INFO_BITS, dtype=np.uint8))
        word[rng.choice(word.size, 20, replace=False)] ^= 1
        out = codec.bch_decode(word)
        if out.ok:
            accepted += 1
            bad += not codec.crc16_check(out.word)
    ok = bad == 0 and accepted <= 0.01 * trials
    return ok, f"{accepted}/{trials} accepted at 20 flips, {bad} without CRC pass", "<=1%, none unchecked"


# ---------------------------------------------------------------- model / recovery

def _small_shapes():
    for M, T in itertools.product(range(1, 5), range(2, 5)):
        if M * T > 16:
            continue
        for d in range(1, T):
            yield M, T, d


def oracle_kronecker(rng, fast: bool):
    worst = 0.0
    count = 0
    for M, T, d in _small_shapes():
        for N in range(1, 5):
            book = generate_codebook(N, T, d, rng)
            H = complex_normal(rng, (N, M))
            s = complex_normal(rng, (N, d))
            y = assemble_measurement(1.7, book, H, s, active=np.arange(N))
            ref = math.sqrt(1.7) * explicit_dictionary(book, H) @ s.ravel()
            worst = max(worst, float(np.max(np.abs(y - ref))))
            count += 1
    return worst <= 1e-10, f"max deviation {worst:.2e} over {count} instances", "1e-10"


def reference_omp(y, B, N, d, K, rho0, normalize=True):
    """OMP on an explicit dictionary, least squares by numpy lstsq."""
    r = y.copy()
    chosen = []
    est = None
    for _ in range(K):
        c = np.full(N, -np.inf)
        for n in range(N):
            if n in chosen:
                continue
            Bn = B[:, n * d:(n + 1) * d]
            v = Bn.conj().T @ r
            c[n] = np.vdot(v, v).real / (np.vdot(Bn[:, 0], Bn[:, 0]).real if normalize else 1.0)
        chosen.append(int(np.argmax(c)))
        cols = np.concatenate([np.arange(n * d, (n + 1) * d) for n in chosen])
        est = np.linalg.lstsq(math.sqrt(rho0) * B[:, cols], y, rcond=None)[0]
        r = y - math.sqrt(rho0) * B[:, cols] @ est
    return chosen, est.reshape(-1, d)


def oracle_brute_force_recovery(rng, fast: bool):
    worst = 0.0
    mismatches = count = 0
    for M, T, d in _small_shapes():
        for N in range(2, 5):
            for normalize in (True, False):
                book = generate_codebook(N, T, d, rng)
                H = complex_normal(rng, (N, M))
                K = min(N - 1, (M * T) // d)
                if K < 1:
                    continue
                s = np.zeros((N, d), complex)
                act = rng.choice(N, size=max(1, K - 1), replace=False)
                s[act] = modulate_qpsk(rng.integers(0, 2, (act.size, 2 * d))).reshape(-1, d)
                y = assemble_measurement(3.0, book, H, s, rng, active=act)
                res = bomp_recover(y, Dictionary(book, H, 3.0), K, normalize)
                ref_sel, ref_est = reference_omp(y, explicit_dictionary(book, H), N, d, K, 3.0, normalize)
                count += 1
                if res.selected != ref_sel:
                    mismatches += 1
                    continue
                ours = np.array([res.estimates[u] for u in ref_sel])
                worst = max(worst, float(np.max(np.abs(ours - ref_est))))
    ok = mismatches == 0 and worst <= 1e-8
    return ok, f"{mismatches} selection mismatches, max estimate deviation {worst:.2e} over {count} runs", \
        "identical selections, 1e-8"


# ---------------------------------------------------------------- analysis

def oracle_densities(rng, fast: bool):
    devs = {}
    for M in (1, 2, 8):
        devs[f"chi2 M={M}"] = integrate.quad(lambda x: analysis.chi2_pdf(x, M), 0, np.inf,
                                             epsabs=1e-12, limit=200)[0]
    for n in (1, 4, 8):
        devs[f"ordered n={n}/8"] = analysis.ordered_moment(n, 8, 8, power=0)
    dist = analysis.g_distribution(8, 500, 30, 100)
    lo, hi = dist.ppf(1e-15), dist.isf(1e-15)
    devs["f_G"] = integrate.quad(lambda g: math.exp(analysis.g_log_pdf(g, 8, 500, 30, 100)), lo, hi,
                                 points=[dist.mean()], epsabs=1e-12, limit=200)[0]
    m = 72
    devs["max of 72 Gaussians"] = integrate.quad(
        lambda x: m * math.exp((m - 1) * special.log_ndtr(x)) * math.exp(-x * x / 2) / math.sqrt(2 * math.pi),
        -12, 12, points=[2.0], epsabs=1e-12, limit=200)[0]
    worst = max(abs(v - 1) for v in devs.values())
    name = max(devs, key=lambda k: abs(devs[k] - 1))
    return worst <= 1e-6, f"worst |integral - 1| = {worst:.1e} ({name})", "1e-6"


def oracle_ordered_sum(rng, fast: bool):
    worst = 0.0
    for M, Na in ((1, 2), (8, 8), (8, 24), (4, 30)):
        total = analysis.ordered_moments(M, Na).first.sum()
        worst = max(worst, abs(total - Na * M))
    return worst <= 1e-4, f"max |sum - Na*M| = {worst:.1e}", "1e-4"


def oracle_g_mean(rng, fast: bool):
    """G = 1/[(B^H B)^-1]_11 for i.i.d. CN(0, 1/T) entries; mean should be (MT-Kd+1)/T."""
    M, T, d, K = 4, 50, 10, 8
    MT, Kd = M * T, K * d
    trials = 300 if fast else 1000
    vals = np.empty(trials)
    for i in range(trials):
        B = complex_normal(rng, (MT, Kd)) / math.sqrt(T)
        inv = np.linalg.inv(B.conj().T @ B)
        vals[i] = 1.0 / inv[0, 0].real
    expected = (MT - Kd + 1) / T
    rel = abs(vals.mean() - expected) / expected
    return rel <= 0.02, f"mean {vals.mean():.4f} vs {expected:.4f} (rel {rel:.2%})", "2%"


def oracle_third_moment(rng, fast: bool):
    d, T = 100, 500
    emp = analysis.mp_third_moment(d, T, "empirical", rng=rng, trials=50 if fast else 200)
    mp = analysis.mp_third_moment(d, T, "mp_moment")
    closed = analysis.mp_third_moment(d, T, "paper_formula")
    rel = abs(emp - mp) / mp
    note = f"closed-form (3+9b-2b^2)/8 = {closed:.3f} disagrees with empirical by {abs(closed - emp) / emp:.0%}"
    return rel <= 0.02, f"empirical {emp:.4f} vs 1+3b+b^2 = {mp:.4f} (rel {rel:.2%})", "2%", note


def oracle_sigma_k(rng, fast: bool):
    """Propagated-error variance before iteration 2 with the stronger of two users selected."""
    M, T, d = 8, 500, 100
    cfg = SystemConfig(M, 80, FixedCount(2), d, T, 2, snr_db=4.0)
    predicted = analysis.residual_noise_variance(2, cfg, analysis.ordered_moments(M, 2))
    trials = 100 if fast else 400
    MT = M * T
    acc = 0.0
    for _ in range(trials):
        book = generate_codebook(2, T, d, rng)
        chans = draw_channels(2, M, rng)
        order = np.argsort(-chans.norms2)
        first, second = int(order[0]), int(order[1])
        s = modulate_qpsk(rng.integers(0, 2, (2, 2 * d))).reshape(2, d)
        z = complex_normal(rng, MT)
        other = math.sqrt(cfg.rho0) * np.kron(book[second], chans.vectors[second][:, None]) @ s[second]
        B1 = np.kron(book[first], chans.vectors[first][:, None])
        y_in = other + z                              # the selected user's own part is projected out exactly
        proj = B1 @ np.linalg.lstsq(B1, y_in, rcond=None)[0]
        zt = z - proj
        acc += np.vdot(zt, zt).real / MT
    measured = acc / trials
    rel = abs(measured - predicted) / predicted
    return rel <= 0.10, f"sampled {measured:.5f} vs closed form {predicted:.5f} (rel {rel:.2%})", "10%"


def oracle_first_iteration(rng, fast: bool):
    """Mean first-iteration correlations of inactive users and of the strongest active user."""
    M, N, Na, d, T = 8, 80, 4, 100, 500
    cfg = SystemConfig(M, N, FixedCount(Na), d, T, 30, snr_db=4.0)
    st = analysis.correlation_stats(1, cfg, analysis.ordered_moments(M, Na))
    draws = 500 if fast else 2000
    book = generate_codebook(N, T, d, rng)
    inactive_sum = active_sum = 0.0
    inactive_n = 0
    for _ in range(draws):
        chans = draw_channels(N, M, rng)
        act = np.sort(rng.choice(N, Na, replace=False))
        s = np.zeros((N, d), complex)
        s[act] = modulate_qpsk(rng.integers(0, 2, (Na, 2 * d))).reshape(Na, d)
        y = assemble_measurement(cfg.rho0, book, chans, s, rng, active=act)
        c = Dictionary(book, chans, cfg.rho0).correlations(y.reshape(M, T, order="F"))
        mask = np.ones(N, bool)
        mask[act] = False
        inactive_sum += c[mask].sum()
        inactive_n += int(mask.sum())
        active_sum += c[act[np.argmax(chans.norms2[act])]]
    mu0, mu1 = inactive_sum / inactive_n, active_sum / draws
    r0, r1 = abs(mu0 - st.mu0) / st.mu0, abs(mu1 - st.mu1) / st.mu1
    ok = r0 <= 0.15 and r1 <= 0.15
    return ok, (f"mu0 {mu0:.1f} vs {st.mu0:.1f} ({r0:.1%}), "
                f"mu1 {mu1:.1f} vs {st.mu1:.1f} ({r1:.1%})"), "15%"


ORACLES: list = [
    ("crc16 reference", oracle_crc_reference),
    ("crc16 single-bit flips", oracle_crc_single_flip),
    ("bch 4-error correction", oracle_bch_four_flips),
    ("bch crc gate at 20 errors", oracle_bch_crc_gate),
    ("kronecker measurement", oracle_kronecker),
    ("brute-force recovery", oracle_brute_force_recovery),
    ("density normalization", oracle_densities),
    ("ordered-moment sum", oracle_ordered_sum),
    ("G statistic mean", oracle_g_mean),
    ("third eigenvalue moment", oracle_third_moment),
    ("propagated-error variance", oracle_sigma_k),
    ("first-iteration correlation means", oracle_first_iteration),
]


def validate(fast: bool = False, seed: int = 20240601,
             echo: Optional[Callable[[str], None]] = None, only: Optional[list] = None) -> ValidationReport:
    """Run every oracle; each gets its own random stream so they can be run in isolation."""
    report = ValidationReport()
    for idx, (name, fn) in enumerate(ORACLES):
        if only is not None and name not in only:
            continue
        rng = trial_rng(seed, 0x0A11, idx)
        start = time.perf_counter()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", analysis.ApproximationWarning)
                out = fn(rng, fast)
        except Exception as exc:                                  # an oracle crash is a failure
            out = (False, f"raised {type(exc).__name__}: {exc}", "-")
        ok, measured, tol = out[:3]
        notes = out[3] if len(out) > 3 else ""
        res = OracleResult(name, bool(ok), measured, tol, time.perf_counter() - start, notes)
        report.results.append(res)
        if echo:
            echo(res.line())
    return report
