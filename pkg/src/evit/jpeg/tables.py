"""Fixed JPEG tables: Annex K quantizers, typical Huffman tables, zig-zag order."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Natural (row-major) order.
LUMA_QUANT = np.array(
    [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ],
    dtype=np.int32,
)

CHROMA_QUANT = np.array(
    [
        17, 18, 24, 47, 99, 99, 99, 99,
        18, 21, 26, 66, 99, 99, 99, 99,
        24, 26, 56, 99, 99, 99, 99, 99,
        47, 66, 99, 99, 99, 99, 99, 99,
    ]
    + [99] * 32,
    dtype=np.int32,
)

# ZIGZAG[k] = natural index of the k-th coefficient in scan order.
ZIGZAG = np.array(
    [
        0, 1, 8, 16, 9, 2, 3, 10,
        17, 24, 32, 25, 18, 11, 4, 5,
        12, 19, 26, 33, 40, 48, 41, 34,
        27, 20, 13, 6, 7, 14, 21, 28,
        35, 42, 49, 56, 57, 50, 43, 36,
        29, 22, 15, 23, 30, 37, 44, 51,
        58, 59, 52, 45, 38, 31, 39, 46,
        53, 60, 61, 54, 47, 55, 62, 63,
    ],
    dtype=np.intp,
)
UNZIGZAG = np.argsort(ZIGZAG)

DC_LUMA_BITS = (0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0)
DC_LUMA_VALS = tuple(range(12))
DC_CHROMA_BITS = (0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0)
DC_CHROMA_VALS = tuple(range(12))

AC_LUMA_BITS = (0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D)
AC_LUMA_VALS = (
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06,
    0x13, 0x51, 0x61, 0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08,
    0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0, 0x24, 0x33, 0x62, 0x72,
    0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45,
    0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59,
    0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75,
    0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3,
    0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6,
    0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9,
    0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4,
    0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
)

AC_CHROMA_BITS = (0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77)
AC_CHROMA_VALS = (
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41,
    0x51, 0x07, 0x61, 0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91,
    0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0, 0x15, 0x62, 0x72, 0xD1,
    0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44,
    0x45, 0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58,
    0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74,
    0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A,
    0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4,
    0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7,
    0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4,
    0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
)

EOB = 0x00
ZRL = 0xF0
N_DC_ROWS = 12
N_AC_ROWS = 162

# AC table rows are the 162 legal (run, size) symbols in ascending symbol order:
# row 0 = EOB, rows 1..10 = 0/1..0/A, ..., row 151 = ZRL, rows 152..161 = F/1..F/A.
AC_SYMBOLS = tuple(
    sorted([EOB, ZRL] + [(run << 4) | size for run in range(16) for size in range(1, 11)])
)
AC_ROW = np.full(256, -1, dtype=np.int32)
AC_ROW[list(AC_SYMBOLS)] = np.arange(N_AC_ROWS, dtype=np.int32)


def scale_quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling; quality 50 returns ``base`` unchanged."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    table = (base.astype(np.int64) * scale + 50) // 100
    return np.clip(table, 1, 255).astype(np.int32)


def quant_tables(quality: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """(luma, chroma) quantizer step tables in natural order."""
    return scale_quant_table(LUMA_QUANT, quality), scale_quant_table(CHROMA_QUANT, quality)


@dataclass(frozen=True)
class HuffmanTable:
    """A canonical Huffman table given by its DHT ``bits``/``values`` lists."""

    bits: tuple[int, ...]
    values: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bits) != 16:
            raise ValueError("Huffman BITS list must have 16 entries")
        if sum(self.bits) != len(self.values):
            raise ValueError("Huffman BITS/HUFFVAL size mismatch")

    @property
    def codes(self) -> dict[int, tuple[int, int]]:
        """symbol -> (code, length), generated per Annex C."""
        return _canonical_codes(self.bits, self.values)

    def code_strings(self) -> dict[int, str]:
        return {sym: format(code, f"0{length}b") for sym, (code, length) in self.codes.items()}

    def encode_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (code, length) arrays indexed by symbol; length 0 marks unused."""
        code = np.zeros(256, dtype=np.uint32)
        size = np.zeros(256, dtype=np.int32)
        for sym, (c, n) in self.codes.items():
            code[sym] = c
            size[sym] = n
        return code, size

    def decode_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """MINCODE/MAXCODE/VALPTR (indexed by length 1..16) and HUFFVAL (Annex F.2.2.3)."""
        mincode = np.zeros(17, dtype=np.int32)
        maxcode = np.full(18, -1, dtype=np.int32)
        valptr = np.zeros(17, dtype=np.int32)
        huffval = np.zeros(256, dtype=np.int32)
        huffval[: len(self.values)] = self.values
        code = 0
        k = 0
        for length in range(1, 17):
            n = self.bits[length - 1]
            if n:
                valptr[length] = k
                mincode[length] = code
                code += n
                k += n
                maxcode[length] = code - 1
            code <<= 1
        maxcode[17] = 0x7FFFFFFF
        return mincode, maxcode, valptr, huffval


@lru_cache(maxsize=None)
def _canonical_codes(bits: tuple[int, ...], values: tuple[int, ...]) -> dict[int, tuple[int, int]]:
    out: dict[int, tuple[int, int]] = {}
    code = 0
    k = 0
    for length in range(1, 17):
        for _ in range(bits[length - 1]):
            out[values[k]] = (code, length)
            code += 1
            k += 1
        if code > (1 << length):
            raise ValueError("Huffman table over-subscribed")
        code <<= 1
    return out


DC_LUMA = HuffmanTable(DC_LUMA_BITS, DC_LUMA_VALS)
DC_CHROMA = HuffmanTable(DC_CHROMA_BITS, DC_CHROMA_VALS)
AC_LUMA = HuffmanTable(AC_LUMA_BITS, AC_LUMA_VALS)
AC_CHROMA = HuffmanTable(AC_CHROMA_BITS, AC_CHROMA_VALS)


@dataclass(frozen=True)
class HuffmanTables:
    """DC and AC tables used by each of the three components (Y, U, V)."""

    dc: tuple[HuffmanTable, HuffmanTable, HuffmanTable] = (DC_LUMA, DC_CHROMA, DC_CHROMA)
    ac: tuple[HuffmanTable, HuffmanTable, HuffmanTable] = (AC_LUMA, AC_CHROMA, AC_CHROMA)

    def for_component(self, comp: int) -> tuple[HuffmanTable, HuffmanTable]:
        """(dc, ac) tables for component 0=Y, 1=U, 2=V."""
        return self.dc[comp], self.ac[comp]


STANDARD_TABLES = HuffmanTables()
