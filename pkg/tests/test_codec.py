import binascii
import itertools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manyaccess import codec

FIXTURE = Path(__file__).parent / "fixtures" / "crc16_ccitt_false.txt"


def bits_of(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, np.uint8))


def load_vectors():
    out = []
    for line in FIXTURE.read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        msg, crc = line.split()
        out.append((b"" if msg == "-" else bytes.fromhex(msg), int(crc, 16)))
    return out


@pytest.mark.parametrize("msg,expected", load_vectors())
def test_crc16_fixture_vectors(msg, expected):
    assert codec.crc16(bits_of(msg)) == expected


def test_crc16_check_value():
    assert codec.crc16(bits_of(b"123456789")) == 0x29B1


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=64))
def test_crc16_matches_binascii(data):
    assert codec.crc16(bits_of(data)) == binascii.crc_hqx(data, 0xFFFF)


def test_crc16_partial_byte_equals_bitwise_definition():
    bits = np.random.default_rng(0).integers(0, 2, 203, dtype=np.uint8)
    crc = 0xFFFF
    for b in bits:
        top = ((crc >> 15) & 1) ^ int(b)
        crc = ((crc << 1) & 0xFFFF) ^ (0x1021 if top else 0)
    assert codec.crc16(bits) == crc


def test_crc_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        assert codec.crc16_check(codec.crc16_append(rng.integers(0, 2, 200, dtype=np.uint8)))


def test_crc_detects_every_single_flip():
    word = codec.crc16_append(np.random.default_rng(2).integers(0, 2, 200, dtype=np.uint8))
    for pos in range(216):
        bad = word.copy()
        bad[pos] ^= 1
        assert not codec.crc16_check(bad)


def test_lengths_enforced():
    with pytest.raises(ValueError):
        codec.crc16_append(np.zeros(199, np.uint8))
    with pytest.raises(ValueError):
        codec.crc16_check(np.zeros(215, np.uint8))
    with pytest.raises(ValueError):
        codec.bch_encode(np.zeros(200, np.uint8))
    with pytest.raises(ValueError):
        codec.bch_decode(np.zeros(247, np.uint8))


def test_generator_polynomial():
    code = codec.default_code()
    g = code.generator
    assert g.bit_length() - 1 == 32
    gf = code.gf
    # g(alpha^i) = 0 for the 2t = 8 designed roots
    for i in range(1, 9):
        acc = 0
        for k in range(33):
            if (g >> k) & 1:
                acc ^= gf.pow_alpha(i * k)
        assert acc == 0
    # g divides x^255 + 1 over GF(2)
    rem = (1 << 255) | 1
    while rem.bit_length() >= g.bit_length():
        rem ^= g << (rem.bit_length() - g.bit_length())
    assert rem == 0


def test_non_primitive_polynomial_rejected():
    with pytest.raises(ValueError):
        codec.GF256(0x11B)          # AES polynomial: irreducible but x is not primitive


def test_encode_zero_and_systematic():
    assert not codec.bch_encode(np.zeros(216, np.uint8)).any()
    msg = np.random.default_rng(3).integers(0, 2, 216, dtype=np.uint8)
    word = codec.bch_encode(msg)
    assert word.size == codec.CODED_BITS == 248
    np.testing.assert_array_equal(word[:216], msg)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_encode_is_linear(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, (2, 216), dtype=np.uint8)
    np.testing.assert_array_equal(codec.bch_encode(a ^ b), codec.bch_encode(a) ^ codec.bch_encode(b))


def test_decode_clean():
    info = np.random.default_rng(4).integers(0, 2, 200, dtype=np.uint8)
    out = codec.bch_decode(codec.encode_packet(info))
    assert out.status is codec.DecodeStatus.CLEAN and out.num_bit_errors == 0
    np.testing.assert_array_equal(out.bits, info)


def test_decode_every_one_and_two_error_pattern():
    info = np.random.default_rng(5).integers(0, 2, 200, dtype=np.uint8)
    word = codec.encode_packet(info)
    code = codec.default_code()
    for pos in itertools.chain(((p,) for p in range(248)), itertools.combinations(range(248), 2)):
        bad = word.copy()
        bad[list(pos)] ^= 1
        msg, nerr = code.decode_word(bad)
        assert nerr == len(pos)
        assert np.array_equal(msg[:200], info)


@pytest.mark.parametrize("flips", [3, 4])
def test_decode_random_three_and_four_errors(flips):
    rng = np.random.default_rng(6 + flips)
    for _ in range(2000):
        info = rng.integers(0, 2, 200, dtype=np.uint8)
        word = codec.encode_packet(info)
        word[rng.choice(248, flips, replace=False)] ^= 1
        out = codec.bch_decode(word)
        assert out.status is codec.DecodeStatus.CORRECTED and out.num_bit_errors == flips
        np.testing.assert_array_equal(out.bits, info)


def test_heavy_corruption_fails_or_passes_crc():
    rng = np.random.default_rng(8)
    failed = 0
    for _ in range(1000):
        word = codec.encode_packet(rng.integers(0, 2, 200, dtype=np.uint8))
        word[rng.choice(248, 20, replace=False)] ^= 1
        out = codec.bch_decode(word)
        if out.ok:
            assert codec.crc16_check(out.word)
        else:
            failed += 1
            assert out.bits is None
    assert failed >= 990


def test_error_on_shortened_position_is_not_corrected():
    code = codec.default_code()
    # a full-length message with a leading 1 is x^222; its parity is x^254 mod g(x),
    # so the parity bits alone carry the syndrome of one error in a shortened position
    unit = np.zeros(code.k, np.uint8)
    unit[0] = 1
    rem = code.parity(unit)
    word = np.zeros(248, np.uint8)
    word[216:] = [(rem >> (31 - i)) & 1 for i in range(32)]
    msg, _ = code.decode_word(word)
    assert msg is None
    assert not codec.bch_decode(word).ok
