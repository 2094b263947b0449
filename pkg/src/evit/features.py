"""Key-invariant features read straight from a (cipher) JPEG bitstream.

Two levels:

* per block, the VLI bit-length of every coded coefficient: 64 luma positions
  in zig-zag order followed by the first 32 positions of U and of V;
* per image, how often each Huffman table row was used (12 DC + 162 AC rows
  for each of Y, U, V = 522 counts).

XOR encryption never changes a VLI field's length or its Huffman symbol, so
both levels are identical for the plain and every cipher version of an image.
No key is needed or accepted.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .jpeg.bitstream import parse_jpeg_with_counts
from .jpeg.entropy import BlockTokens
from .jpeg.tables import N_AC_ROWS, N_DC_ROWS
from .jpeg.vli import categories

SEQ_DIM = 128
CHROMA_KEEP = 32
HUFF_DIM = 3 * (N_DC_ROWS + N_AC_ROWS)  # 522

FEATURE_MAGIC = b"EVFT"
FEATURE_VERSION = 1


class FeatureFormatError(ValueError):
    """Unreadable or incompatible feature file."""


@dataclass
class FeatureSet:
    image_id: str
    blocks: np.ndarray  # (N, 128) uint8
    global_counts: np.ndarray  # (522,) uint32

    def __post_init__(self) -> None:
        self.blocks = np.asarray(self.blocks, dtype=np.uint8)
        self.global_counts = np.asarray(self.global_counts, dtype=np.uint32)
        if self.blocks.ndim != 2 or self.blocks.shape[1] != SEQ_DIM:
            raise ValueError(f"blocks must be (N, {SEQ_DIM}), got {self.blocks.shape}")
        if self.global_counts.shape != (HUFF_DIM,):
            raise ValueError(f"global vector must have {HUFF_DIM} entries")

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.blocks, other.blocks)
            and np.array_equal(self.global_counts, other.global_counts)
        )


def _component_lengths(tokens: BlockTokens) -> np.ndarray:
    out = np.zeros(64, dtype=np.uint8)
    out[0] = tokens.dc.category
    pos = 0
    for tok in tokens.ac:
        if tok.kind == "eob":
            break
        if tok.kind == "zrl":
            pos += 16
            continue
        pos += tok.run + 1
        if pos > 63:
            raise ValueError(f"AC token lands at zig-zag index {pos} > 63")
        out[pos] = tok.category
    return out


def block_length_sequence(block: tuple[BlockTokens, BlockTokens, BlockTokens]) -> np.ndarray:
    """Token lists of one block (Y, U, V) -> its 128 VLI lengths."""
    y, u, v = (_component_lengths(t) for t in block)
    return np.concatenate([y, u[:CHROMA_KEEP], v[:CHROMA_KEEP]])


def lengths_from_coefficients(coefs: np.ndarray) -> np.ndarray:
    """(3, N, 64) zig-zag coefficients -> (N, 128) lengths.

    The DC entry is the category of the DPCM difference, which is what the
    bitstream actually carries.
    """
    coefs = np.asarray(coefs, dtype=np.int64)
    lengths = categories(coefs)
    lengths[:, :, 0] = categories(np.diff(coefs[:, :, 0], axis=1, prepend=0))
    return np.concatenate(
        [lengths[0], lengths[1, :, :CHROMA_KEEP], lengths[2, :, :CHROMA_KEEP]], axis=1
    ).astype(np.uint8)


def global_huffman_frequency(cipher: bytes) -> np.ndarray:
    """Huffman row usage over the whole scan, flattened Y then U then V (522,)."""
    _, counts = parse_jpeg_with_counts(cipher)
    return counts.reshape(-1).astype(np.uint32)


def extract(cipher: bytes, image_id: str = "") -> FeatureSet:
    """Cipher JPEG bytes -> FeatureSet. Blocks are in raster order."""
    img, counts = parse_jpeg_with_counts(cipher)
    return FeatureSet(image_id, lengths_from_coefficients(img.coefficients), counts.reshape(-1))


# ---------------------------------------------------------------- file IO


def write_features(path, features: list[FeatureSet]) -> None:
    """Write the little-endian EVFT container (atomically)."""
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC + struct.pack("<HI", FEATURE_VERSION, len(features)))
    for fs in features:
        ident = fs.image_id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise ValueError("image id longer than 65535 bytes")
        buf.write(struct.pack("<H", len(ident)) + ident + struct.pack("<I", fs.n_blocks))
        buf.write(np.ascontiguousarray(fs.blocks, dtype=np.uint8).tobytes())
        buf.write(fs.global_counts.astype("<u4").tobytes())
    atomic_write(path, buf.getvalue())


def read_features(path) -> list[FeatureSet]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: not a feature file (bad magic)")
    if len(data) < 10:
        raise FeatureFormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(
            f"{path}: feature file version {version}, this build reads {FEATURE_VERSION}; re-run `evit extract`"
        )
    pos, out = 10, []
    try:
        for _ in range(count):
            (n_id,) = struct.unpack_from("<H", data, pos)
            ident = bytes(view[pos + 2 : pos + 2 + n_id]).decode("utf-8")
            pos += 2 + n_id
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            end = pos + SEQ_DIM * n + 4 * HUFF_DIM
            if end > len(data):
                raise FeatureFormatError(f"{path}: truncated record for {ident!r}")
            blocks = np.frombuffer(data, np.uint8, SEQ_DIM * n, pos).reshape(n, SEQ_DIM)
            counts = np.frombuffer(data, "<u4", HUFF_DIM, pos + SEQ_DIM * n)
            out.append(FeatureSet(ident, blocks.copy(), counts.astype(np.uint32)))
            pos = end
    except struct.error:
        raise FeatureFormatError(f"{path}: truncated file") from None
    if pos != len(data):
        raise FeatureFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def stack_features(features: list[FeatureSet]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays (B, N, 128) and (B, 522); all images must share N."""
    if not features:
        raise ValueError("no features")
    sizes = {fs.n_blocks for fs in features}
    if len(sizes) != 1:
        raise ValueError(
            f"images have different block counts {sorted(sizes)}; every image in a dataset must share one size"
        )
    return (
        np.stack([fs.blocks for fs in features]),
        np.stack([fs.global_counts for fs in features]),
    )
