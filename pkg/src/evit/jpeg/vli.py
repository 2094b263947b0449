"""Variable-length integer (VLI) magnitude codes used after each Huffman symbol."""

from __future__ import annotations

import numpy as np

MAX_CATEGORY = 11
MAX_MAGNITUDE = (1 << MAX_CATEGORY) - 1

# category of |v| for |v| <= 2047
CATEGORY_LUT = np.zeros(MAX_MAGNITUDE + 1, dtype=np.uint8)
for _c in range(1, MAX_CATEGORY + 1):
    CATEGORY_LUT[1 << (_c - 1) : 1 << _c] = _c
del _c


def category(value: int) -> int:
    return abs(int(value)).bit_length()


def vli_encode(value: int) -> tuple[int, str]:
    """value -> (category, bits). Negative values use the one's complement of |value|."""
    value = int(value)
    if abs(value) > MAX_MAGNITUDE:
        raise ValueError(f"value {value} outside the JPEG range [-2047, 2047]")
    cat = abs(value).bit_length()
    if cat == 0:
        return 0, ""
    raw = value if value > 0 else value + (1 << cat) - 1
    return cat, format(raw, f"0{cat}b")


def vli_decode(cat: int, bits: str) -> int:
    if len(bits) != cat:
        raise ValueError(f"expected {cat} bits, got {len(bits)}")
    if cat == 0:
        return 0
    if cat > MAX_CATEGORY:
        raise ValueError(f"category {cat} exceeds {MAX_CATEGORY}")
    raw = int(bits, 2)
    return raw if bits[0] == "1" else raw - (1 << cat) + 1


def vli_code(value, direction: str = "encode"):
    """``encode``: int -> (category, bits); ``decode``: (category, bits) -> int."""
    if direction == "encode":
        return vli_encode(value)
    if direction == "decode":
        cat, bits = value
        return vli_decode(cat, bits)
    raise ValueError(f"unknown direction {direction!r}")


def categories(values: np.ndarray) -> np.ndarray:
    """Vectorized category of integer values with |v| <= 2047."""
    mag = np.abs(np.asarray(values, dtype=np.int64))
    if mag.size and mag.max() > MAX_MAGNITUDE:
        raise ValueError("value outside the JPEG range [-2047, 2047]")
    return CATEGORY_LUT[mag]


def raw_bits(values: np.ndarray, cats: np.ndarray) -> np.ndarray:
    """Integer value of each VLI bit field (vectorized :func:`vli_encode`)."""
    v = np.asarray(values, dtype=np.int64)
    return np.where(v >= 0, v, v + (np.int64(1) << cats.astype(np.int64)) - 1)


def from_raw_bits(raw: np.ndarray, cats: np.ndarray) -> np.ndarray:
    """Inverse of :func:`raw_bits`: a VLI bit field back to its signed value."""
    raw = np.asarray(raw, dtype=np.int64)
    c = cats.astype(np.int64)
    top = np.where(c > 0, raw >> np.maximum(c - 1, 0), 0)
    return np.where(c == 0, 0, np.where(top == 1, raw, raw - (np.int64(1) << c) + 1))
