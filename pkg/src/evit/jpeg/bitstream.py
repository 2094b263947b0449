"""Baseline JFIF writer and parser (SOF0, three components, 4:4:4, 8-bit)."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tables import STANDARD_TABLES, ZIGZAG, HuffmanTable, HuffmanTables

SOI, EOI, SOS, DQT, DHT, SOF0, DRI, COM = 0xD8, 0xD9, 0xDA, 0xDB, 0xC4, 0xC0, 0xDD, 0xFE
APP0 = 0xE0


class JpegFormatError(ValueError):
    """The byte stream is not a JPEG this codec can read."""


@dataclass
class JpegImage:
    """Everything needed to reproduce a baseline 4:4:4 JPEG byte for byte.

    ``coefficients`` holds quantized blocks, shape (3, n_blocks, 64), zig-zag
    order, absolute DC values, blocks in raster order.
    """

    width: int
    height: int
    luma_quant: np.ndarray
    chroma_quant: np.ndarray
    coefficients: np.ndarray
    tables: HuffmanTables = field(default=STANDARD_TABLES)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0 or self.width > 0xFFFF or self.height > 0xFFFF:
            raise ValueError(f"invalid dimensions {self.width}x{self.height}")
        expected = (3, self.n_blocks, 64)
        if self.coefficients.shape != expected:
            raise ValueError(f"coefficients have shape {self.coefficients.shape}, expected {expected}")

    @property
    def blocks_w(self) -> int:
        return (self.width + 7) // 8

    @property
    def blocks_h(self) -> int:
        return (self.height + 7) // 8

    @property
    def n_blocks(self) -> int:
        return self.blocks_w * self.blocks_h

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, JpegImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.luma_quant, other.luma_quant)
            and np.array_equal(self.chroma_quant, other.chroma_quant)
            and np.array_equal(self.coefficients, other.coefficients)
            and self.tables == other.tables
        )


def _segment(marker: int, payload: bytes) -> bytes:
    return struct.pack(">BBH", 0xFF, marker, len(payload) + 2) + payload


def _dht_payload(table_class: int, table_id: int, table: HuffmanTable) -> bytes:
    return bytes([(table_class << 4) | table_id]) + bytes(table.bits) + bytes(table.values)


def stuff(data: bytes) -> bytes:
    return data.replace(b"\xff", b"\xff\x00")


def serialize_jpeg(img: JpegImage) -> bytes:
    """JpegImage -> JFIF bytes: SOI, APP0, DQT, SOF0, DHT, SOS, scan, EOI."""
    t = img.tables
    if t.dc[1] != t.dc[2] or t.ac[1] != t.ac[2]:
        raise ValueError("U and V must share Huffman tables")
    for q in (img.luma_quant, img.chroma_quant):
        if q.shape != (64,) or q.min() < 1 or q.max() > 255:
            raise ValueError("quantization tables need 64 8-bit steps")
    out = [b"\xff\xd8"]
    out.append(_segment(APP0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00"))
    dqt = b"".join(
        bytes([tid]) + np.asarray(q, dtype=np.uint8)[ZIGZAG].tobytes()
        for tid, q in ((0, img.luma_quant), (1, img.chroma_quant))
    )
    out.append(_segment(DQT, dqt))
    sof = struct.pack(">BHHB", 8, img.height, img.width, 3) + bytes([1, 0x11, 0, 2, 0x11, 1, 3, 0x11, 1])
    out.append(_segment(SOF0, sof))
    dht = (
        _dht_payload(0, 0, t.dc[0]) + _dht_payload(1, 0, t.ac[0])
        + _dht_payload(0, 1, t.dc[1]) + _dht_payload(1, 1, t.ac[1])
    )
    out.append(_segment(DHT, dht))
    out.append(_segment(SOS, bytes([3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0])))
    out.append(stuff(kernels.encode_scan(img.coefficients, img.tables)))
    out.append(b"\xff\xd9")
    return b"".join(out)


_MARKER_IN_SCAN = re.compile(rb"\xff[^\x00]")


@dataclass
class _Header:
    width: int = 0
    height: int = 0
    quant: dict = field(default_factory=dict)
    huffman: dict = field(default_factory=dict)
    components: list = field(default_factory=list)


def _read_segments(data: bytes) -> tuple[_Header, HuffmanTables, bytes]:
    if len(data) < 4 or data[:2] != b"\xff\xd8":
        raise JpegFormatError("missing SOI marker")
    hdr = _Header()
    pos = 2
    while True:
        if pos + 2 > len(data):
            raise JpegFormatError("truncated stream: no SOS segment")
        if data[pos] != 0xFF:
            raise JpegFormatError(f"expected a marker at offset {pos}")
        marker = data[pos + 1]
        if marker == 0xFF:  # fill byte
            pos += 1
            continue
        if marker == EOI:
            raise JpegFormatError("EOI before any scan")
        if pos + 4 > len(data):
            raise JpegFormatError("truncated segment header")
        (length,) = struct.unpack(">H", data[pos + 2 : pos + 4])
        payload = data[pos + 4 : pos + 2 + length]
        if length < 2 or len(payload) != length - 2:
            raise JpegFormatError(f"truncated segment {marker:#04x}")
        pos += 2 + length
        if APP0 <= marker <= 0xEF or marker == COM:
            continue
        if marker == DQT:
            _parse_dqt(payload, hdr)
        elif marker == SOF0:
            _parse_sof(payload, hdr)
        elif marker == DHT:
            _parse_dht(payload, hdr)
        elif marker == SOS:
            tables = _parse_sos(payload, hdr)
            return hdr, tables, _scan_bytes(data, pos)
        else:
            raise JpegFormatError(f"unsupported or unknown marker 0xFF{marker:02X}")


def _parse_dqt(payload: bytes, hdr: _Header) -> None:
    i = 0
    while i < len(payload):
        pq, tq = payload[i] >> 4, payload[i] & 15
        if pq != 0:
            raise JpegFormatError("16-bit quantization tables are not supported")
        if i + 65 > len(payload):
            raise JpegFormatError("truncated DQT")
        natural = np.zeros(64, dtype=np.int32)
        natural[ZIGZAG] = np.frombuffer(payload[i + 1 : i + 65], dtype=np.uint8)
        hdr.quant[tq] = natural
        i += 65


def _parse_sof(payload: bytes, hdr: _Header) -> None:
    if len(payload) < 6:
        raise JpegFormatError("truncated SOF0")
    precision, height, width, ncomp = struct.unpack(">BHHB", payload[:6])
    if precision != 8 or ncomp != 3 or len(payload) != 6 + 3 * ncomp:
        raise JpegFormatError("only 8-bit, 3-component frames are supported")
    comps = []
    for c in range(3):
        cid, sampling, tq = payload[6 + 3 * c : 9 + 3 * c]
        if sampling != 0x11:
            raise JpegFormatError("chroma subsampling is not supported (4:4:4 only)")
        comps.append((cid, tq))
    if width == 0 or height == 0:
        raise JpegFormatError("zero image dimension")
    hdr.width, hdr.height, hdr.components = width, height, comps


def _parse_dht(payload: bytes, hdr: _Header) -> None:
    i = 0
    while i < len(payload):
        if i + 17 > len(payload):
            raise JpegFormatError("truncated DHT")
        tc, th = payload[i] >> 4, payload[i] & 15
        bits = tuple(payload[i + 1 : i + 17])
        n = sum(bits)
        values = tuple(payload[i + 17 : i + 17 + n])
        if len(values) != n:
            raise JpegFormatError("truncated DHT")
        try:
            hdr.huffman[(tc, th)] = HuffmanTable(bits, values)
        except ValueError as exc:
            raise JpegFormatError(f"bad Huffman table: {exc}") from None
        i += 17 + n


def _parse_sos(payload: bytes, hdr: _Header) -> HuffmanTables:
    if not hdr.components:
        raise JpegFormatError("SOS before SOF0")
    if not payload or payload[0] != 3 or len(payload) != 1 + 2 * 3 + 3:
        raise JpegFormatError("only single interleaved 3-component scans are supported")
    ids = [c[0] for c in hdr.components]
    dc, ac = [None] * 3, [None] * 3
    for k in range(3):
        cs, sel = payload[1 + 2 * k], payload[2 + 2 * k]
        if cs != ids[k]:
            raise JpegFormatError("scan component order differs from frame")
        try:
            dc[k] = hdr.huffman[(0, sel >> 4)]
            ac[k] = hdr.huffman[(1, sel & 15)]
        except KeyError:
            raise JpegFormatError("scan references an undefined Huffman table") from None
    ss, se, a = payload[7:10]
    if (ss, se, a) != (0, 63, 0):
        raise JpegFormatError("progressive scans are not supported")
    return HuffmanTables(dc=tuple(dc), ac=tuple(ac))


def _scan_bytes(data: bytes, start: int) -> bytes:
    m = _MARKER_IN_SCAN.search(data, start)
    if m is None:
        raise JpegFormatError("truncated stream: missing EOI")
    marker = data[m.start() + 1]
    if marker != EOI:
        if 0xD0 <= marker <= 0xD7:
            raise JpegFormatError("restart markers are not supported")
        raise JpegFormatError(f"stuffing violation: 0xFF{marker:02X} inside entropy data")
    return data[start : m.start()].replace(b"\xff\x00", b"\xff")


def parse_jpeg_with_counts(data: bytes) -> tuple[JpegImage, np.ndarray]:
    """Parse and entropy-decode; also returns Huffman row usage counts (3, 174)."""
    hdr, tables, scan = _read_segments(bytes(data))
    try:
        luma_q = hdr.quant[hdr.components[0][1]]
        chroma_q = hdr.quant[hdr.components[1][1]]
    except KeyError:
        raise JpegFormatError("frame references an undefined quantization table") from None
    if hdr.components[1][1] != hdr.components[2][1]:
        raise JpegFormatError("U and V must share a quantization table")
    n_blocks = ((hdr.width + 7) // 8) * ((hdr.height + 7) // 8)
    try:
        coefs, counts = kernels.decode_scan(scan, n_blocks, tables)
    except ValueError as exc:
        raise JpegFormatError(f"corrupt entropy data: {exc}") from None
    img = JpegImage(hdr.width, hdr.height, luma_q, chroma_q, coefs, tables)
    return img, counts


def parse_jpeg(data: bytes) -> JpegImage:
    return parse_jpeg_with_counts(data)[0]
