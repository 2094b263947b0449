"""Token-level Huffman/VLI entropy coding of quantized blocks.

This is the readable reference path. It works on '0'/'1' strings and doubles as
the pure-Python scan backend; the compiled backend in ``_entropy_fast`` must
agree with it bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .tables import AC_ROW, EOB, N_AC_ROWS, N_DC_ROWS, STANDARD_TABLES, ZRL, HuffmanTable, HuffmanTables
from .vli import MAX_CATEGORY, vli_decode, vli_encode


class EntropyError(ValueError):
    """Malformed entropy-coded data."""


@dataclass(frozen=True)
class VliToken:
    """One Huffman symbol plus the VLI bits that follow it.

    ``kind`` is ``dc``, ``ac``, ``eob`` or ``zrl``; markers carry no bits.
    ``run`` is the zero run preceding an AC value.
    """

    kind: str
    category: int
    bits: str
    huffman_row: int
    run: int = 0

    def __post_init__(self) -> None:
        if len(self.bits) != self.category:
            raise ValueError(f"token has {len(self.bits)} bits for category {self.category}")

    @property
    def symbol(self) -> int:
        if self.kind == "dc":
            return self.category
        if self.kind == "eob":
            return EOB
        if self.kind == "zrl":
            return ZRL
        return (self.run << 4) | self.category

    def with_bits(self, bits: str) -> "VliToken":
        return VliToken(self.kind, self.category, bits, self.huffman_row, self.run)


class BlockTokens(NamedTuple):
    dc: VliToken
    ac: list[VliToken]


@dataclass
class EntropyStream:
    """Per-component token lists, one :class:`BlockTokens` per block in raster order."""

    components: list[list[BlockTokens]] = field(default_factory=lambda: [[], [], []])


def dc_token(diff: int) -> VliToken:
    cat, bits = vli_encode(diff)
    if cat >= N_DC_ROWS:
        raise EntropyError(f"DC difference {diff} needs category {cat} > 11")
    return VliToken("dc", cat, bits, cat)


def ac_token(run: int, value: int) -> VliToken:
    cat, bits = vli_encode(value)
    if not 1 <= cat <= 10 or not 0 <= run <= 15:
        raise EntropyError(f"AC (run={run}, value={value}) outside the table")
    return VliToken("ac", cat, bits, int(AC_ROW[(run << 4) | cat]), run)


EOB_TOKEN = VliToken("eob", 0, "", int(AC_ROW[EOB]))
ZRL_TOKEN = VliToken("zrl", 0, "", int(AC_ROW[ZRL]))


def tokenize_block(zz, prev_dc: int) -> BlockTokens:
    """Zig-zag ordered block (DC absolute) -> DPCM DC token + run-length AC tokens."""
    coeffs = [int(c) for c in np.asarray(zz).ravel()]
    if len(coeffs) != 64:
        raise ValueError("a block has 64 coefficients")
    dc = dc_token(coeffs[0] - prev_dc)
    ac: list[VliToken] = []
    run = 0
    for value in coeffs[1:]:
        if value == 0:
            run += 1
            continue
        while run > 15:
            ac.append(ZRL_TOKEN)
            run -= 16
        ac.append(ac_token(run, value))
        run = 0
    if run:
        ac.append(EOB_TOKEN)
    return BlockTokens(dc, ac)


def detokenize_block(tokens: BlockTokens, prev_dc: int) -> tuple[np.ndarray, int]:
    zz = np.zeros(64, dtype=np.int32)
    dc = prev_dc + vli_decode(tokens.dc.category, tokens.dc.bits)
    zz[0] = dc
    k = 1
    for tok in tokens.ac:
        if tok.kind == "eob":
            break
        if tok.kind == "zrl":
            k += 16
            continue
        k += tok.run
        if k > 63:
            raise EntropyError("run length overflows the block")
        zz[k] = vli_decode(tok.category, tok.bits)
        k += 1
    return zz, dc


def tokens_to_bits(tokens: BlockTokens, dc_table: HuffmanTable, ac_table: HuffmanTable) -> str:
    dc_codes = dc_table.code_strings()
    ac_codes = ac_table.code_strings()
    parts = [dc_codes[tokens.dc.symbol], tokens.dc.bits]
    for tok in tokens.ac:
        try:
            parts.append(ac_codes[tok.symbol])
        except KeyError:
            raise EntropyError(f"symbol {tok.symbol:#04x} missing from AC table") from None
        parts.append(tok.bits)
    return "".join(parts)


class BitReader:
    """Sequential reader over a '0'/'1' string."""

    def __init__(self, bits: str, pos: int = 0):
        self.bits = bits
        self.pos = pos

    def read(self, n: int) -> str:
        end = self.pos + n
        if end > len(self.bits):
            raise EntropyError("entropy data truncated")
        out = self.bits[self.pos : end]
        self.pos = end
        return out

    def read_symbol(self, lookup: dict[str, int]) -> int:
        start = self.pos
        for length in range(1, 17):
            end = start + length
            if end > len(self.bits):
                raise EntropyError("entropy data truncated")
            sym = lookup.get(self.bits[start:end])
            if sym is not None:
                self.pos = end
                return sym
        raise EntropyError(f"invalid Huffman code at bit {start}")


def _lookup(table: HuffmanTable) -> dict[str, int]:
    return {code: sym for sym, code in table.code_strings().items()}


def read_block_tokens(reader: BitReader, dc_lookup: dict[str, int], ac_lookup: dict[str, int]) -> BlockTokens:
    cat = reader.read_symbol(dc_lookup)
    if cat > MAX_CATEGORY:
        raise EntropyError(f"DC category {cat} out of range")
    dc = VliToken("dc", cat, reader.read(cat), cat)
    ac: list[VliToken] = []
    k = 1
    while k < 64:
        sym = reader.read_symbol(ac_lookup)
        row = int(AC_ROW[sym])
        if row < 0:
            raise EntropyError(f"AC symbol {sym:#04x} is not a legal (run, size) pair")
        if sym == EOB:
            ac.append(EOB_TOKEN)
            break
        if sym == ZRL:
            ac.append(ZRL_TOKEN)
            k += 16
            continue
        run, size = sym >> 4, sym & 15
        k += run
        if k > 63:
            raise EntropyError("run length overflows the block")
        ac.append(VliToken("ac", size, reader.read(size), row, run))
        k += 1
    if k > 64:
        raise EntropyError("run length overflows the block")
    return BlockTokens(dc, ac)


def encode_block(zz, prev_dc: int, tables: HuffmanTables = STANDARD_TABLES, component: int = 0) -> str:
    dc_table, ac_table = tables.for_component(component)
    return tokens_to_bits(tokenize_block(zz, prev_dc), dc_table, ac_table)


def decode_block(
    bits: str, prev_dc: int, tables: HuffmanTables = STANDARD_TABLES, component: int = 0, pos: int = 0
) -> tuple[np.ndarray, int, int]:
    """Decode one block starting at ``pos``; returns (zz block, new DC predictor, end position)."""
    dc_table, ac_table = tables.for_component(component)
    reader = BitReader(bits, pos)
    tokens = read_block_tokens(reader, _lookup(dc_table), _lookup(ac_table))
    zz, dc = detokenize_block(tokens, prev_dc)
    return zz, dc, reader.pos


def entropy_code_block(block, prev_dc: int, tables: HuffmanTables = STANDARD_TABLES, direction: str = "encode", component: int = 0):
    """``encode``: block -> bit string. ``decode``: bit string -> (block, new prev_dc)."""
    if direction == "encode":
        return encode_block(block, prev_dc, tables, component)
    if direction == "decode":
        zz, dc, _ = decode_block(block, prev_dc, tables, component)
        return zz, dc
    raise ValueError(f"unknown direction {direction!r}")


# -- scan level (interleaved Y, U, V per MCU; 4:4:4) --------------------------------


def tokenize_scan(coefs: np.ndarray) -> EntropyStream:
    stream = EntropyStream()
    for comp in range(3):
        prev = 0
        for zz in coefs[comp]:
            stream.components[comp].append(tokenize_block(zz, prev))
            prev = int(zz[0])
    return stream


def stream_to_bytes(stream: EntropyStream, tables: HuffmanTables = STANDARD_TABLES) -> bytes:
    """Serialize tokens in MCU order; the last byte is padded with 1-bits. No stuffing."""
    pairs = [tables.for_component(c) for c in range(3)]
    n_blocks = len(stream.components[0])
    parts = []
    for b in range(n_blocks):
        for comp in range(3):
            dc_table, ac_table = pairs[comp]
            parts.append(tokens_to_bits(stream.components[comp][b], dc_table, ac_table))
    bits = "".join(parts)
    bits += "1" * (-len(bits) % 8)
    return int(bits, 2).to_bytes(len(bits) // 8, "big") if bits else b""


def read_stream(data: bytes, n_blocks: int, tables: HuffmanTables = STANDARD_TABLES) -> EntropyStream:
    bits = "".join(format(byte, "08b") for byte in data)
    reader = BitReader(bits)
    lookups = [(_lookup(d), _lookup(a)) for d, a in (tables.for_component(c) for c in range(3))]
    stream = EntropyStream()
    for _ in range(n_blocks):
        for comp in range(3):
            stream.components[comp].append(read_block_tokens(reader, *lookups[comp]))
    # only sub-byte padding may follow the last block
    if len(bits) - reader.pos >= 8:
        raise EntropyError("unexpected data after the last block")
    return stream


def stream_to_coefficients(stream: EntropyStream) -> np.ndarray:
    n_blocks = len(stream.components[0])
    coefs = np.zeros((3, n_blocks, 64), dtype=np.int32)
    for comp in range(3):
        prev = 0
        for b, tokens in enumerate(stream.components[comp]):
            coefs[comp, b], prev = detokenize_block(tokens, prev)
    return coefs


def row_counts(stream: EntropyStream) -> np.ndarray:
    """Per component, how often each DC row (12) then AC row (162) is used."""
    counts = np.zeros((3, N_DC_ROWS + N_AC_ROWS), dtype=np.int64)
    for comp in range(3):
        for tokens in stream.components[comp]:
            counts[comp, tokens.dc.huffman_row] += 1
            for tok in tokens.ac:
                counts[comp, N_DC_ROWS + tok.huffman_row] += 1
    return counts


def encode_scan_py(coefs: np.ndarray, tables: HuffmanTables = STANDARD_TABLES) -> bytes:
    return stream_to_bytes(tokenize_scan(np.asarray(coefs)), tables)


def decode_scan_py(data: bytes, n_blocks: int, tables: HuffmanTables = STANDARD_TABLES) -> tuple[np.ndarray, np.ndarray]:
    stream = read_stream(data, n_blocks, tables)
    return stream_to_coefficients(stream), row_counts(stream)
