"""Packet coding: CRC-16 error detection and a shortened binary BCH(255,223) code.

A packet is 200 information bits, followed by a 16-bit CRC, encoded with
BCH(255,223) shortened by 7 known-zero bits to 248 transmitted bits, i.e.
124 QPSK symbols. Bits are numpy uint8 arrays, most significant bit first.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

INFO_BITS = 200
CRC_BITS = 16
CRC16_POLY = 0x1021      # CRC-16/CCITT-FALSE
CRC16_INIT = 0xFFFF

GF_PRIMITIVE = 0x11D     # x^8 + x^4 + x^3 + x^2 + 1


def _as_bits(bits, length: Optional[int] = None, what: str = "input") -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if length is not None and bits.size != length:
        raise ValueError(f"{what} must have {length} bits, got {bits.size}")
    return bits


@lru_cache(maxsize=8)
def _crc16_table(poly: int) -> tuple:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ poly) if crc & 0x8000 else (crc << 1)
        table.append(crc & 0xFFFF)
    return tuple(table)


def crc16(bits, poly: Optional[int] = None, init: int = CRC16_INIT) -> int:
    """CRC-16 of a bit string (no reflection, no final xor)."""
    poly = CRC16_POLY if poly is None else poly
    bits = _as_bits(bits)
    crc = init
    whole = bits.size - bits.size % 8
    table = _crc16_table(poly)
    for byte in np.packbits(bits[:whole]).tolist():
        crc = ((crc << 8) & 0xFFFF) ^ table[((crc >> 8) ^ byte) & 0xFF]
    for b in bits[whole:].tolist():
        top = ((crc >> 15) & 1) ^ b
        crc = (crc << 1) & 0xFFFF
        if top:
            crc ^= poly
    return crc


def _int_to_bits(value: int, width: int) -> np.ndarray:
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def crc16_append(bits) -> np.ndarray:
    bits = _as_bits(bits, INFO_BITS, "CRC input")
    return np.concatenate([bits, _int_to_bits(crc16(bits), CRC_BITS)])


def crc16_check(bits) -> bool:
    bits = _as_bits(bits, INFO_BITS + CRC_BITS, "CRC-protected word")
    return crc16(bits[:INFO_BITS]) == int(np.packbits(bits[INFO_BITS:]).view(">u2")[0])


class GF256:
    """Log/antilog tables for GF(2^8)."""

    def __init__(self, primitive: int = GF_PRIMITIVE):
        exp = np.zeros(512, dtype=np.int64)
        log = np.zeros(256, dtype=np.int64)
        x = 1
        for i in range(255):
            exp[i] = x
            log[x] = i
            x <<= 1
            if x & 0x100:
                x ^= primitive
        if len(set(exp[:255].tolist())) != 255:
            raise ValueError(f"{primitive:#x} is not primitive")
        exp[255:510] = exp[:255]
        self.exp = exp
        self.log = log
        self.primitive = primitive

    def mul(self, a: int, b: int) -> int:
        if a == 0 or b == 0:
            return 0
        return int(self.exp[self.log[a] + self.log[b]])

    def div(self, a: int, b: int) -> int:
        if b == 0:
            raise ZeroDivisionError("GF division by zero")
        if a == 0:
            return 0
        return int(self.exp[(self.log[a] - self.log[b]) % 255])

    def pow_alpha(self, e: int) -> int:
        return int(self.exp[e % 255])


def _gf_poly_mul(gf: GF256, p, q):
    out = [0] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] ^= gf.mul(a, b)
    return out


def minimal_polynomial(gf: GF256, i: int) -> int:
    """Minimal polynomial of alpha^i over GF(2), as a bit mask (bit k = coeff of x^k)."""
    coset = []
    e = i % 255
    while e not in coset:
        coset.append(e)
        e = (2 * e) % 255
    poly = [1]                              # ascending coefficients over GF(2^8)
    for e in coset:
        poly = _gf_poly_mul(gf, poly, [gf.pow_alpha(e), 1])
    if any(c not in (0, 1) for c in poly):
        raise ArithmeticError("minimal polynomial is not binary")
    return sum(c << k for k, c in enumerate(poly))


def _gf2_mul(a: int, b: int) -> int:
    out = 0
    while b:
        if b & 1:
            out ^= a
        a <<= 1
        b >>= 1
    return out


class DecodeStatus(enum.Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    FAILED = "failed"


@dataclass(frozen=True)
class DecodeOutcome:
    status: DecodeStatus
    num_bit_errors: int = 0
    bits: Optional[np.ndarray] = None          # 200 information bits
    word: Optional[np.ndarray] = None          # corrected 216-bit info+CRC word

    @property
    def ok(self) -> bool:
        return self.status is not DecodeStatus.FAILED


FAILED = DecodeOutcome(DecodeStatus.FAILED)


class ShortenedBCH:
    """Narrow-sense binary BCH(n, k) over GF(2^8), shortened by ``shorten`` bits."""

    def __init__(self, n: int = 255, k: int = 223, t: int = 4, shorten: int = 7,
                 gf: Optional[GF256] = None):
        self.gf = gf or GF256()
        self.n, self.k, self.t, self.shorten = n, k, t, shorten
        g = 1
        seen = set()
        for i in range(1, 2 * t + 1):
            m = minimal_polynomial(self.gf, i)
            if m not in seen:
                seen.add(m)
                g = _gf2_mul(g, m)
        self.generator = g
        self.parity_bits = g.bit_length() - 1
        if self.parity_bits != n - k:
            raise ValueError(f"generator degree {self.parity_bits} != n-k = {n - k}")
        self.message_bits = k - shorten
        self.length = n - shorten
        self._table = self._division_table()
        # Chien search: locator evaluated at alpha^(-j) for every exponent j
        self._neg_j = (-np.arange(n)) % 255
        self._syndrome_powers = np.arange(1, 2 * t + 1)[:, None]

    def _division_table(self):
        width = self.parity_bits
        mask = (1 << width) - 1
        low = self.generator & mask
        table = []
        for byte in range(256):
            reg = byte << (width - 8)
            for _ in range(8):
                reg = ((reg << 1) ^ low) if reg & (1 << (width - 1)) else (reg << 1)
            table.append(reg & mask)
        return table

    def parity(self, message) -> int:
        """Remainder of m(x) x^(n-k) modulo g(x); leading shortened zeros do not change it."""
        width = self.parity_bits
        mask = (1 << width) - 1
        reg = 0
        bits = _as_bits(message)
        pad = (-bits.size) % 8
        if pad:
            bits = np.concatenate([np.zeros(pad, np.uint8), bits])
        table = self._table
        for byte in np.packbits(bits).tolist():
            reg = ((reg << 8) & mask) ^ table[((reg >> (width - 8)) ^ byte) & 0xFF]
        return reg

    def encode(self, bits) -> np.ndarray:
        bits = _as_bits(bits, self.message_bits, "BCH message")
        return np.concatenate([bits, _int_to_bits(self.parity(bits), self.parity_bits)])

    def syndromes(self, word: np.ndarray) -> np.ndarray:
        ones = np.flatnonzero(word)
        if ones.size == 0:
            return np.zeros(2 * self.t, dtype=np.int64)
        expo = (self.length - 1 - ones)[None, :]                 # x^e for each set bit
        terms = self.gf.exp[(self._syndrome_powers * expo) % 255]
        return np.bitwise_xor.reduce(terms, axis=1)

    def error_locator(self, S) -> Optional[list]:
        """Berlekamp-Massey; ascending locator coefficients, None if inconsistent."""
        gf = self.gf
        C, B = [1], [1]
        L, m, b = 0, 1, 1
        for n in range(2 * self.t):
            delta = int(S[n])
            for i in range(1, L + 1):
                if i < len(C):
                    delta ^= gf.mul(C[i], int(S[n - i]))
            if delta == 0:
                m += 1
                continue
            coef = gf.div(delta, b)
            shifted = [0] * m + [gf.mul(coef, c) for c in B]
            new_C = [(C[i] if i < len(C) else 0) ^ (shifted[i] if i < len(shifted) else 0)
                     for i in range(max(len(C), len(shifted)))]
            if 2 * L <= n:
                B, b, L = C, delta, n + 1 - L
                m = 1
            else:
                m += 1
            C = new_C
        while len(C) > 1 and C[-1] == 0:
            C.pop()
        if len(C) - 1 != L:
            return None                     # locator degree disagrees with LFSR length
        return C

    def error_positions(self, locator) -> Optional[np.ndarray]:
        """Exponents e with locator(alpha^-e) = 0, or None if the locator does not split."""
        deg = len(locator) - 1
        gf = self.gf
        acc = np.zeros(self.n, dtype=np.int64)
        for k, c in enumerate(locator):
            if c:
                acc ^= gf.exp[(gf.log[c] + k * self._neg_j) % 255]
        roots = np.flatnonzero(acc == 0)
        if roots.size != deg:
            return None
        return roots

    def decode_word(self, word) -> tuple[Optional[np.ndarray], int]:
        """Hard-decision decode; returns (corrected message bits, errors) or (None, 0)."""
        word = _as_bits(word, self.length, "BCH word").copy()
        S = self.syndromes(word)
        if not S.any():
            return word[:self.message_bits], 0
        locator = self.error_locator(S)
        if locator is None or len(locator) - 1 > self.t:
            return None, 0
        roots = self.error_positions(locator)
        if roots is None:
            return None, 0
        # roots at exponents >= length fall on the shortened zeros
        if np.any(roots >= self.length):
            return None, 0
        word[self.length - 1 - roots] ^= 1
        return word[:self.message_bits], int(roots.size)


@lru_cache(maxsize=1)
def default_code() -> ShortenedBCH:
    return ShortenedBCH()


def bch_encode(bits) -> np.ndarray:
    """216 bits (info + CRC) -> 248 transmitted bits, systematic."""
    return default_code().encode(bits)


def bch_decode(bits) -> DecodeOutcome:
    """248 received bits -> outcome; CLEAN/CORRECTED only when the CRC also passes."""
    msg, nerr = default_code().decode_word(bits)
    if msg is None or not crc16_check(msg):
        return FAILED
    status = DecodeStatus.CLEAN if nerr == 0 else DecodeStatus.CORRECTED
    return DecodeOutcome(status, nerr, msg[:INFO_BITS].copy(), msg)


def encode_packet(info_bits) -> np.ndarray:
    """200 information bits -> 248 coded bits."""
    return bch_encode(crc16_append(info_bits))


CODED_BITS = 248
