"""Analytical predictions for normalized BOMP: group detection lower bound and SER.

The detection analysis assumes the active users are picked in decreasing
order of channel energy, one per iteration, and approximates every squared
correlation as Gaussian. Channel energies h^H h of the active users are
treated as order statistics of N_a i.i.d. Gamma(M, 1) variables.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate, special, stats

from .config import ConfigError, FixedCount, SystemConfig

QUAD_ABS = 1e-9
QUAD_REL = 1e-7

THIRD_MOMENT_MODES = ("paper_formula", "mp_moment", "empirical")


class AnalysisError(ArithmeticError):
    """A numerical integral did not converge."""


class ApproximationWarning(RuntimeWarning):
    """A moment approximation produced a negative variance and was clamped."""


def _quad(fn, a: float, b: float, what: str, points=None, limit: int = 200,
          epsabs: float = QUAD_ABS) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(fn, a, b, epsabs=epsabs, epsrel=QUAD_REL,
                                      limit=limit, points=points)
        except integrate.IntegrationWarning as exc:
            raise AnalysisError(f"{what}: quadrature on [{a:.6g}, {b:.6g}] failed ({exc})") from exc
    if not math.isfinite(val):
        raise AnalysisError(f"{what}: non-finite integral")
    return val


# ---------------------------------------------------------------- channel energy

def chi2_pdf(x, M: int):
    """Density of h^H h for h ~ CN(0, I_M): e^-x x^(M-1) / (M-1)!."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        logf = -x + (M - 1) * np.log(np.where(x > 0, x, 1.0)) - special.gammaln(M)
    out = np.where(x > 0, np.exp(logf), 0.0)
    if M == 1:
        out = np.where(x == 0, 1.0, out)
    return out if out.ndim else float(out)


def chi2_cdf(x, M: int):
    """1 - e^-x sum_{k<M} x^k/k!, the regularized lower incomplete gamma."""
    x = np.asarray(x, dtype=float)
    out = np.where(x > 0, special.gammainc(M, np.maximum(x, 0.0)), 0.0)
    return out if out.ndim else float(out)


def ordered_upper_limit(M: int, Na: int) -> float:
    return M + 12.0 * math.sqrt(M) * math.log(Na + 1)


def ordered_log_density(x: float, n: int, Na: int, M: int) -> float:
    """log f_n(x) for the n-th largest of Na channel energies."""
    if x <= 0:
        return -math.inf
    logc = special.gammaln(Na + 1) - special.gammaln(Na - n + 1) - special.gammaln(n)
    out = logc - x + (M - 1) * math.log(x) - special.gammaln(M)
    if Na - n:
        lower = special.gammainc(M, x)
        if lower == 0:
            return -math.inf
        out += (Na - n) * math.log(lower)
    if n - 1:
        upper = special.gammaincc(M, x)
        if upper == 0:
            return -math.inf
        out += (n - 1) * math.log(upper)
    return out


def ordered_density(x: float, n: int, Na: int, M: int) -> float:
    return math.exp(ordered_log_density(x, n, Na, M))


def _tail_bound(upper: float, M: int, Na: int, power: int) -> float:
    # E{X^p 1[X > u]} = Gamma(M+p, u)/Gamma(M) for X ~ Gamma(M, 1)
    log_part = special.gammaln(M + power) - special.gammaln(M)
    return Na * math.exp(log_part) * special.gammaincc(M + power, upper)


def ordered_moment(n: int, Na: int, M: int, power: int = 1) -> float:
    """E{(h^H h)^power} of the n-th largest of Na channel energies."""
    if not 1 <= n <= Na:
        raise ValueError(f"order index n={n} outside [1, {Na}]")
    if power not in (0, 1, 2):
        raise ValueError("power must be 0, 1 or 2")
    upper = ordered_upper_limit(M, Na)
    # the neglected tail is below Na * E{X^p; X > upper}; widen the range until it is tiny
    while _tail_bound(upper, M, Na, power) > 1e-12:
        upper *= 1.5
        if upper > 1e4 * (M + 1):
            raise AnalysisError(f"ordered moment: tail bound does not vanish (M={M}, Na={Na})")
    mode = max(M - 1.0, 0.0)
    points = [p for p in (mode, M, M + math.sqrt(M) * 2) if 0 < p < upper]
    return _quad(lambda x: x ** power * ordered_density(x, n, Na, M), 0.0, upper,
                 f"ordered moment n={n}, Na={Na}, M={M}", points=points)


@dataclass(frozen=True)
class OrderedChannelMoments:
    """First and second moments of the ordered channel energies, index 0 is the largest."""
    M: int
    Na: int
    first: np.ndarray
    second: np.ndarray

    def mean(self, n: int) -> float:
        """E{h_n^H h_n}, 1-based order index."""
        return float(self.first[n - 1])

    def tail_sum(self, k: int) -> float:
        """sum_{n=k}^{Na} E{h_n^H h_n}; zero when k > Na."""
        return float(self.first[k - 1:].sum()) if k <= self.Na else 0.0


@lru_cache(maxsize=64)
def ordered_moments(M: int, Na: int) -> OrderedChannelMoments:
    first = np.array([ordered_moment(n, Na, M, 1) for n in range(1, Na + 1)])
    second = np.array([ordered_moment(n, Na, M, 2) for n in range(1, Na + 1)])
    first.setflags(write=False)
    second.setflags(write=False)
    return OrderedChannelMoments(M, Na, first, second)


# ---------------------------------------------------------------- per-iteration statistics

def mp_third_moment(d: int, T: int, mode: str = "paper_formula",
                    rng: Optional[np.random.Generator] = None, trials: int = 200) -> float:
    """Mean eigenvalue of (P^H P)^3 for a T x d unit-column Gaussian precoder.

    ``paper_formula`` is (3 + 9b - 2b^2)/8 with b = d/T, ``mp_moment`` the
    Marchenko-Pastur third moment 1 + 3b + b^2, ``empirical`` a Monte Carlo
    average over ``trials`` generated precoders.
    """
    if not 0 < d < T:
        raise ConfigError(f"need 0 < d < T, got d={d}, T={T}")
    beta = d / T
    if mode == "paper_formula":
        return (3 + 9 * beta - 2 * beta ** 2) / 8
    if mode == "mp_moment":
        return 1 + 3 * beta + beta ** 2
    if mode == "empirical":
        from .model import generate_precoding
        rng = rng if rng is not None else np.random.default_rng(0)
        acc = 0.0
        for _ in range(trials):
            P = generate_precoding(T, d, rng)
            lam = np.linalg.eigvalsh(P.conj().T @ P)
            acc += float(np.mean(lam ** 3))
        return acc / trials
    raise ValueError(f"unknown third-moment mode {mode!r}; use one of {THIRD_MOMENT_MODES}")


def cross_term_factor(d: int, T: int, third_moment: float) -> float:
    """Coefficient c in rho0 d c sigma^2 E{h^H h}, the cross term of the active-user variance.

    Equals 2 lambda3 + 2 d (d + T - 1) / T, which for the closed form
    lambda3 = (3 + 9b - 2b^2)/8 is 3/4 + 2d + 2d^2/T + d/(4T) - d^2/(2T^2).
    """
    return 2.0 * third_moment + 2.0 * d * (d + T - 1) / T


def _require_fixed(cfg: SystemConfig) -> int:
    if not isinstance(cfg.activity, FixedCount):
        raise ConfigError("the analysis needs a fixed number of active users")
    return cfg.activity.count


def residual_noise_variance(k: int, cfg: SystemConfig, moments: OrderedChannelMoments) -> float:
    """Per-element variance of the noise plus propagated error before iteration k."""
    Na = moments.Na
    if not 1 <= k <= Na:
        raise ValueError(f"iteration k={k} outside [1, {Na}]")
    M, T, d, rho0 = cfg.num_antennas, cfg.frame_len, cfg.block_len, cfg.rho0
    MT = M * T
    return 1.0 - (k - 1) * d / MT + rho0 * (k - 1) * d ** 2 / MT ** 2 * moments.tail_sum(k)


@dataclass(frozen=True)
class IterationStats:
    k: int
    sigma2: float              # noise + propagated error, per element
    resid_var: float           # residual r_{k-1}, per element
    resid_var_tilde: float     # r_{k-1} minus the k-th active user's signal
    mu0: float                 # inactive-user correlation mean
    var0: float
    mu1: float                 # k-th active user correlation mean
    var1: float
    selected_before: int       # active users picked in the first k-1 iterations
    clamped: tuple = ()


def _clamp(name: str, var: float, mu: float, clamped: list) -> float:
    if var >= 0:
        return var
    floor = 1e-12 * mu * mu
    warnings.warn(f"{name} = {var:.4g} < 0; clamped to {floor:.3g} (Gaussian approximation breaks down)",
                  ApproximationWarning, stacklevel=3)
    clamped.append(name)
    return floor


def correlation_stats(k: int, cfg: SystemConfig, moments: OrderedChannelMoments,
                      third_moment: str | float = "paper_formula") -> IterationStats:
    """Means and variances of the squared correlations at iteration k."""
    Na = moments.Na
    if not 1 <= k <= Na:
        raise ValueError(f"iteration k={k} outside [1, {Na}]")
    M, T, d, rho0 = cfg.num_antennas, cfg.frame_len, cfg.block_len, cfg.rho0
    MT = M * T
    lam3 = third_moment if isinstance(third_moment, (int, float)) else mp_third_moment(d, T, third_moment)
    s2 = residual_noise_variance(k, cfg, moments)
    Sk = moments.tail_sum(k)
    Sk1 = moments.tail_sum(k + 1)
    Eh, Eh2 = moments.mean(k), float(moments.second[k - 1])
    rv = rho0 * d / MT * Sk + s2
    rv_t = rho0 * d / MT * Sk1 + s2
    clamped: list = []

    mu0 = rho0 * d ** 2 / MT * Sk + d * s2
    if k == Na:
        second0 = (rho0 ** 2 * d / (M ** 2 * T ** 3) * (4 * (d * T + 1) + (d * d - d) * (d * T + d + T)) * Eh2
                   + 2 * rho0 * d ** 2 / (M * T ** 2) * (d * T + d + T - 1) * Eh * s2
                   + d * (d + 1) * s2 ** 2)
    else:
        second0 = d * (d + 1) * rv ** 2
    var0 = _clamp("var0", second0 - mu0 ** 2, mu0, clamped)

    mu1 = rho0 * d / T * (d + T - 1) * Eh + rho0 * d ** 2 / MT * Sk1 + d * s2
    second1 = (rho0 ** 2 / T ** 2 * (d * d + d) * (d + T - 1) ** 2 * Eh2
               + d * (d + 1) * rv_t ** 2
               + rho0 * d * cross_term_factor(d, T, lam3) * rv_t * Eh)
    var1 = _clamp("var1", second1 - mu1 ** 2, mu1, clamped)
    return IterationStats(k, s2, rv, rv_t, mu0, var0, mu1, var1, k - 1, tuple(clamped))


def correlation_means_generic(cfg: SystemConfig, sigma2: float, selected_before: int,
                              channel_energy: Optional[float] = None) -> tuple[float, float]:
    """Means of c_{j,k} for an inactive and an active user after ``selected_before`` active picks.

    Uses unordered channels (E{h^H h} = M) for the remaining active users;
    ``channel_energy`` is E{h_j^H h_j} of the active user, default M.
    """
    Na = _require_fixed(cfg)
    M, T, d, rho0 = cfg.num_antennas, cfg.frame_len, cfg.block_len, cfg.rho0
    Eh = M if channel_energy is None else channel_energy
    left = Na - selected_before
    mu0 = left * rho0 * d ** 2 / T + d * sigma2
    mu1 = rho0 * d / T * (d + T - 1) * Eh + rho0 * (left - 1) * d ** 2 / T + d * sigma2
    return mu0, mu1


# ---------------------------------------------------------------- detection probability

def detection_prob(stats_k: IterationStats | None = None, N: int = 0, Na: int = 0, *,
                   mu0: Optional[float] = None, var0: Optional[float] = None,
                   mu1: Optional[float] = None, var1: Optional[float] = None) -> float:
    """P(active user beats the best of N - Na inactive users).

    Integrates Phi((x - mu0)/sd0)^(N - Na) against the active user's Gaussian
    density over mu1 +- 12 sd1.
    """
    if stats_k is not None:
        mu0, var0, mu1, var1 = stats_k.mu0, stats_k.var0, stats_k.mu1, stats_k.var1
    if N <= Na:
        raise ValueError("need more online than active users")
    m = N - Na
    sd0, sd1 = math.sqrt(var0), math.sqrt(var1)
    if sd0 <= 0 or sd1 <= 0:
        raise AnalysisError("degenerate correlation variance")
    a, b = mu1 / sd0 - mu0 / sd0, sd1 / sd0

    def integrand(z):
        return math.exp(m * special.log_ndtr(a + b * z) - 0.5 * z * z) / math.sqrt(2 * math.pi)

    # the max-CDF switches on around z* = (q - a)/b, with q the median of the max
    q = float(special.ndtri(0.5 ** (1.0 / m)))
    zs = (q - a) / b
    points = [p for p in (zs - 1 / b, zs, zs + 1 / b, 0.0) if -12 < p < 12]
    val = _quad(integrand, -12.0, 12.0, "detection probability", points=sorted(set(points)))
    return min(max(val, 0.0), 1.0)


def gudsr_lower_bound(cfg: SystemConfig, third_moment: str | float = "paper_formula",
                      detail: bool = False):
    """Product over k = 1..Na of P(E_k) under the energy-ordered selection."""
    Na = _require_fixed(cfg)
    moments = ordered_moments(cfg.num_antennas, Na)
    probs, all_stats = [], []
    for k in range(1, Na + 1):
        st = correlation_stats(k, cfg, moments, third_moment)
        all_stats.append(st)
        probs.append(detection_prob(st, cfg.num_online, Na))
    bound = float(np.prod(probs))
    if detail:
        return bound, probs, all_stats
    return bound


# ---------------------------------------------------------------- symbol error rate

def ser_conditional(g, rho0: float):
    """QPSK symbol error probability at post-detection SNR rho0 * g."""
    e = special.erfc(np.sqrt(0.5 * rho0 * np.asarray(g, dtype=float)))
    out = e - (0.5 * e) ** 2
    return out if np.ndim(out) else float(out)


def _g_dof(M: int, T: int, K: int, d: int) -> int:
    a = M * T - K * d + 1
    if a < 1:
        raise ConfigError(f"K*d = {K * d} exceeds M*T = {M * T}")
    return a


def g_distribution(M: int, T: int, K: int, d: int):
    """G = sum of MT-Kd+1 terms |b|^2 with b ~ CN(0, 1/T): Gamma(MT-Kd+1, scale 1/T)."""
    return stats.gamma(_g_dof(M, T, K, d), scale=1.0 / T)


def g_log_pdf(g, M: int, T: int, K: int, d: int):
    """log of T^a / (a-1)! e^(-Tg) g^(a-1), a = MT-Kd+1, in log domain."""
    a = _g_dof(M, T, K, d)
    g = np.asarray(g, dtype=float)
    with np.errstate(divide="ignore"):
        return a * math.log(T) - special.gammaln(a) - T * g + (a - 1) * np.log(g)


def g0(M: int, T: int, K: int, d: int) -> float:
    return M - (K * d - 1) / T


def ser_average(M: int, T: int, K: int, d: int, rho0: float) -> float:
    """SER(g) averaged over the density of G."""
    dist = g_distribution(M, T, K, d)
    a = _g_dof(M, T, K, d)
    # SER(g) falls off on the scale 1/rho0, which can be far below the bulk of G
    scale = 1.0 / max(rho0, 1e-300)
    lo, hi = min(float(dist.ppf(1e-15)), 1e-3 * scale), float(dist.isf(1e-15))
    mean = float(dist.mean())

    def integrand(g):
        if g <= 0:
            return 0.75 if a == 1 else 0.0
        return ser_conditional(g, rho0) * math.exp(float(g_log_pdf(g, M, T, K, d)))

    points = [p for p in (mean - dist.std(), mean, mean + dist.std(), scale, 10 * scale, 100 * scale)
              if lo < p < hi]
    # relative accuracy only: the SER itself can sit far below QUAD_ABS
    return _quad(integrand, lo, hi, "average SER", points=sorted(points), epsabs=0.0)


def ser_g0(M: int, T: int, K: int, d: int, rho0: float) -> float:
    _g_dof(M, T, K, d)
    return ser_conditional(g0(M, T, K, d), rho0)


@dataclass(frozen=True)
class SerPrediction:
    dof: int                  # 2(MT-Kd+1) real degrees of freedom
    scale: float              # 1/T
    average: float
    g0: float
    ser_g0: float


def ser_prediction(cfg: SystemConfig) -> SerPrediction:
    M, T, K, d = cfg.num_antennas, cfg.frame_len, cfg.iterations, cfg.block_len
    return SerPrediction(2 * _g_dof(M, T, K, d), 1.0 / T, ser_average(M, T, K, d, cfg.rho0),
                         g0(M, T, K, d), ser_g0(M, T, K, d, cfg.rho0))


def coding_loss_db(n: int = 255, k: int = 223) -> float:
    """Es/N0 penalty of rate k/n coding at equal energy per information bit."""
    return 10.0 * math.log10(n / k)
