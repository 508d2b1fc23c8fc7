"""Block-precoded uplink: precoders, channels, user activity, QPSK and the received frame.

The received frame is kept as the M x T matrix

    Y = sqrt(rho0) * sum_n h_n (P_n s_n)^T + Z

and ``vec`` (column stacking) maps it to y = sqrt(rho0) * B s + z with
B_n = kron(P_n, h_n). B itself is only built by :func:`explicit_dictionary`
for small cross-checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import Activity, Bernoulli, ConfigError, FixedCount, SystemConfig

_SQRT_HALF = np.sqrt(0.5)

# Gray map 00 -> 1+j, 01 -> -1+j, 11 -> -1-j, 10 -> 1-j (scaled by 1/sqrt(2)):
# the first bit of a pair sets the imaginary sign, the second the real sign.
_QPSK_TABLE = np.array([1 + 1j, -1 + 1j, 1 - 1j, -1 - 1j]) * _SQRT_HALF  # index 2*b0 + b1


def trial_rng(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, *counters)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *counters])))


# stream tag for the user codebook, kept apart from per-trial counters
CODEBOOK_STREAM = 0xC0DEB00C


def complex_normal(rng: np.random.Generator, shape, dtype=np.complex128) -> np.ndarray:
    """i.i.d. circularly-symmetric complex Gaussian, unit variance."""
    out = np.empty(shape, dtype=dtype)
    out.real = rng.standard_normal(shape)
    out.imag = rng.standard_normal(shape)
    out *= _SQRT_HALF
    return out


def normalize_columns(P: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(P, axis=-2, keepdims=True)
    if np.any(norms == 0):
        raise ConfigError("precoding column with zero norm")
    return P / norms


def generate_precoding(T: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Complex Gaussian T x d matrix with every column scaled to unit 2-norm."""
    if d < 1 or T < 1 or d >= T:
        raise ConfigError(f"precoding needs 0 < d < T, got T={T}, d={d}")
    return normalize_columns(complex_normal(rng, (T, d)))


def generate_codebook(N: int, T: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """One precoder per online user, shape (N, T, d).

    Filled user by user so peak memory stays at the size of the result.
    """
    if d < 1 or T < 1 or d >= T:
        raise ConfigError(f"precoding needs 0 < d < T, got T={T}, d={d}")
    book = np.empty((N, T, d), dtype=np.complex128)
    for n in range(N):
        book[n] = generate_precoding(T, d, rng)
    # identical matrices would make two users indistinguishable
    first_cols = {book[n, :, 0].tobytes() for n in range(N)}
    if len(first_cols) != N:
        raise ConfigError("two users drew the same precoding matrix")
    return book


def codebook_for(cfg: SystemConfig) -> np.ndarray:
    rng = trial_rng(cfg.seed, CODEBOOK_STREAM)
    return generate_codebook(cfg.num_online, cfg.frame_len, cfg.block_len, rng)


@dataclass(frozen=True)
class ChannelSet:
    vectors: np.ndarray   # (N, M)
    norms2: np.ndarray    # (N,) squared 2-norms

    @classmethod
    def from_vectors(cls, vectors: np.ndarray) -> "ChannelSet":
        vectors = np.asarray(vectors, dtype=np.complex128)
        if vectors.ndim != 2:
            raise ValueError("channel vectors must be a (N, M) array")
        return cls(vectors, np.einsum("nm,nm->n", vectors.conj(), vectors).real)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def draw_channels(N: int, M: int, rng: np.random.Generator) -> ChannelSet:
    return ChannelSet.from_vectors(complex_normal(rng, (N, M)))


def draw_active_set(N: int, activity: Activity, rng: np.random.Generator) -> np.ndarray:
    """Sorted 0-based indices of the active users."""
    if isinstance(activity, FixedCount):
        if not 0 <= activity.count <= N:
            raise ConfigError(f"cannot pick {activity.count} of {N} users")
        idx = rng.choice(N, size=activity.count, replace=False)
        return np.sort(idx)
    if isinstance(activity, Bernoulli):
        return np.flatnonzero(rng.random(N) < activity.p)
    raise ConfigError(f"unknown activity model {activity!r}")


def modulate_qpsk(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size % 2:
        raise ValueError("QPSK needs an even number of bits")
    pairs = bits.reshape(-1, 2)
    return _QPSK_TABLE[2 * pairs[:, 0] + pairs[:, 1]]


def demodulate_qpsk(symbols) -> np.ndarray:
    """Independent sign decisions; inverse of :func:`modulate_qpsk`."""
    symbols = np.asarray(symbols).ravel()
    out = np.empty((symbols.size, 2), dtype=np.uint8)
    out[:, 0] = symbols.imag < 0
    out[:, 1] = symbols.real < 0
    return out.ravel()


def qpsk_decide(symbols) -> np.ndarray:
    """Nearest constellation point for each symbol."""
    symbols = np.asarray(symbols)
    return (np.where(symbols.real < 0, -1.0, 1.0) + 1j * np.where(symbols.imag < 0, -1.0, 1.0)) * _SQRT_HALF


def vec(Y: np.ndarray) -> np.ndarray:
    return Y.reshape(-1, order="F")


def unvec(y: np.ndarray, M: int) -> np.ndarray:
    return np.asarray(y).reshape(M, -1, order="F")


def superpose(precodings: np.ndarray, channels: np.ndarray, users, symbols: np.ndarray) -> np.ndarray:
    """sum over ``users`` of h_n (P_n s_n)^T as an M x T matrix (no noise, no rho0)."""
    users = np.asarray(users, dtype=int)
    M = channels.shape[1]
    T = precodings.shape[1]
    if users.size == 0:
        return np.zeros((M, T), dtype=np.complex128)
    X = np.einsum("ntd,nd->nt", precodings[users], symbols)       # rows x_n = P_n s_n
    return channels[users].T @ X


def assemble_measurement(rho0: float, precodings: np.ndarray, channels: ChannelSet | np.ndarray,
                         symbols: np.ndarray, rng: Optional[np.random.Generator] = None,
                         active=None) -> np.ndarray:
    """Received vector y = vec(Y) for the block symbol array ``symbols`` of shape (N, d).

    ``rng=None`` gives the noiseless frame. Only rows listed in ``active``
    (default: the nonzero rows) are superposed.
    """
    H = channels.vectors if isinstance(channels, ChannelSet) else np.asarray(channels)
    symbols = np.asarray(symbols)
    N, T, d = precodings.shape
    if H.shape[0] != N or symbols.shape != (N, d):
        raise ValueError(f"dimension mismatch: precodings {precodings.shape}, "
                         f"channels {H.shape}, symbols {symbols.shape}")
    if active is None:
        active = np.flatnonzero(np.any(symbols != 0, axis=1))
    Y = np.sqrt(rho0) * superpose(precodings, H, active, symbols[active])
    if rng is not None:
        Y = Y + complex_normal(rng, Y.shape)
    return vec(Y)


def explicit_dictionary(precodings: np.ndarray, channels: np.ndarray) -> np.ndarray:
    """Full MT x Nd matrix B = [kron(P_1, h_1), ...]. Small instances only."""
    H = channels.vectors if isinstance(channels, ChannelSet) else np.asarray(channels)
    return np.hstack([np.kron(P, h[:, None]) for P, h in zip(precodings, H)])


@dataclass
class ScenarioDraw:
    """One realized frame."""
    active: np.ndarray            # sorted user indices
    symbols: np.ndarray           # (N, d), zero rows for inactive users
    payload: np.ndarray           # (len(active), bits per packet) source bits
    channels: ChannelSet
    received: np.ndarray          # y, length M*T
    rho0: float
    noise_variance: float = 1.0

    @property
    def s(self) -> np.ndarray:
        return self.symbols.ravel()


SymbolSource = Callable[[np.random.Generator, int, int], "tuple[np.ndarray, np.ndarray]"]


def uncoded_source(rng: np.random.Generator, n_active: int, d: int):
    bits = rng.integers(0, 2, size=(n_active, 2 * d), dtype=np.uint8)
    syms = modulate_qpsk(bits).reshape(n_active, d)
    return syms, bits


def draw_scenario(cfg: SystemConfig, codebook: np.ndarray, rng: np.random.Generator,
                  source: SymbolSource = uncoded_source, noise: bool = True) -> ScenarioDraw:
    N, M, d = cfg.num_online, cfg.num_antennas, cfg.block_len
    if codebook.shape != (N, cfg.frame_len, d):
        raise ConfigError(f"codebook shape {codebook.shape} does not match config")
    channels = draw_channels(N, M, rng)
    active = draw_active_set(N, cfg.activity, rng)
    syms, payload = source(rng, active.size, d)
    symbols = np.zeros((N, d), dtype=np.complex128)
    symbols[active] = syms
    y = assemble_measurement(cfg.rho0, codebook, channels, symbols,
                             rng if noise else None, active=active)
    return ScenarioDraw(active, symbols, payload, channels, y, cfg.rho0)
