"""Scenario parameters and the flat key-value config file format."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union


class ConfigError(ValueError):
    """Invalid scenario parameters."""


@dataclass(frozen=True)
class FixedCount:
    """Exactly ``count`` users, chosen uniformly among the online users."""
    count: int

    def __str__(self) -> str:
        return f"fixed:{self.count}"


@dataclass(frozen=True)
class Bernoulli:
    """Each online user is active independently with probability ``p``."""
    p: float

    def __str__(self) -> str:
        return f"bernoulli:{self.p!r}"


Activity = Union[FixedCount, Bernoulli]


@dataclass(frozen=True)
class SystemConfig:
    num_antennas: int          # M
    num_online: int            # N
    activity: Activity
    block_len: int             # d
    frame_len: int             # T
    iterations: int            # K
    max_active: int = 0        # N_amax, 0 -> derived from activity
    snr_db: float = 0.0        # Es/N0
    seed: int = 0
    coded: bool = False        # BCH+CRC packets (required by icbomp)
    adaptive_k: bool = False   # one extra iteration per cancellation

    def __post_init__(self):
        if self.max_active == 0:
            if isinstance(self.activity, FixedCount):
                object.__setattr__(self, "max_active", self.activity.count)
            else:
                object.__setattr__(self, "max_active", self.iterations)
        self.validate()

    @property
    def rho0(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)

    @property
    def max_iterations(self) -> int:
        """floor(MT/d): the most blocks an LS fit can hold."""
        return (self.num_antennas * self.frame_len) // self.block_len

    @property
    def num_active(self) -> int | None:
        if isinstance(self.activity, FixedCount):
            return self.activity.count
        return None

    def validate(self) -> None:
        M, N, d, T, K = (self.num_antennas, self.num_online, self.block_len,
                         self.frame_len, self.iterations)
        for name, v in (("num_antennas", M), ("num_online", N), ("block_len", d),
                        ("frame_len", T), ("iterations", K), ("max_active", self.max_active)):
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if d >= T:
            raise ConfigError(f"block_len d={d} must be smaller than frame_len T={T}")
        if K * d > M * T:
            raise ConfigError(f"K*d={K * d} exceeds M*T={M * T}")
        if K > N:
            raise ConfigError(f"iterations K={K} exceeds the number of online users N={N}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not math.isfinite(self.snr_db):
            raise ConfigError("snr_db must be finite")
        act = self.activity
        if isinstance(act, FixedCount):
            if not 1 <= act.count <= N:
                raise ConfigError(f"active count {act.count} outside [1, N={N}]")
            if act.count > self.max_active:
                raise ConfigError("active count exceeds max_active")
            if act.count == self.max_active and K < self.max_active:
                raise ConfigError(f"K={K} smaller than max_active={self.max_active}")
        elif isinstance(act, Bernoulli):
            if not 0.0 < act.p < 1.0:
                raise ConfigError(f"activity probability {act.p} outside (0, 1)")
        else:
            raise ConfigError(f"unknown activity model {act!r}")

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)


_ALIASES = {
    "m": "num_antennas", "n": "num_online", "d": "block_len", "t": "frame_len",
    "k": "iterations", "na_max": "max_active", "namax": "max_active",
}
_INT_KEYS = {"num_antennas", "num_online", "block_len", "frame_len", "iterations",
             "max_active", "seed"}
_BOOL_KEYS = {"coded", "adaptive_k"}


def parse_activity(text: str) -> Activity:
    kind, _, value = text.strip().partition(":")
    kind = kind.strip().lower()
    try:
        if kind in ("fixed", "fixedcount"):
            return FixedCount(int(value))
        if kind in ("bernoulli", "p"):
            return Bernoulli(float(value))
    except ValueError as exc:
        raise ConfigError(f"bad activity value {text!r}") from exc
    raise ConfigError(f"activity must be 'fixed:<n>' or 'bernoulli:<p>', got {text!r}")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


def parse_config_text(text: str, **overrides) -> SystemConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys are the SystemConfig field names, or the short symbols
    M, N, d, T, K, Na_max. ``activity`` takes ``fixed:<n>`` or ``bernoulli:<p>``.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        key = _ALIASES.get(key.lower(), key)
        value = value.strip()
        try:
            if key in _INT_KEYS:
                values[key] = int(value, 0)
            elif key in _BOOL_KEYS:
                values[key] = _parse_bool(value)
            elif key == "snr_db":
                values[key] = float(value)
            elif key == "activity":
                values[key] = parse_activity(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    missing = {"num_antennas", "num_online", "activity", "block_len", "frame_len",
               "iterations"} - values.keys()
    if missing:
        raise ConfigError(f"missing keys: {', '.join(sorted(missing))}")
    try:
        return SystemConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, **overrides) -> SystemConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, **overrides)


def format_config(cfg: SystemConfig) -> str:
    return "\n".join([
        f"num_antennas = {cfg.num_antennas}",
        f"num_online = {cfg.num_online}",
        f"activity = {cfg.activity}",
        f"max_active = {cfg.max_active}",
        f"block_len = {cfg.block_len}",
        f"frame_len = {cfg.frame_len}",
        f"iterations = {cfg.iterations}",
        f"snr_db = {cfg.snr_db!r}",
        f"seed = {cfg.seed}",
        f"coded = {str(cfg.coded).lower()}",
        f"adaptive_k = {str(cfg.adaptive_k).lower()}",
    ]) + "\n"
