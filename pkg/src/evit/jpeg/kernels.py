"""Scan-level entropy coding with a compiled backend and a pure-Python fallback.

The backend is chosen once at import: the Cython extension if it was built,
otherwise :mod:`evit.jpeg.entropy`. Set ``EVIT_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import os
from functools import lru_cache

import numpy as np

from . import entropy
from .entropy import EntropyError
from .tables import AC_ROW, STANDARD_TABLES, HuffmanTables

try:
    if os.environ.get("EVIT_PURE_PYTHON"):
        raise ImportError("pure Python requested")
    from . import _entropy_fast
except ImportError:  # pragma: no cover - depends on the build
    _entropy_fast = None

BACKEND = "cython" if _entropy_fast is not None else "python"


@lru_cache(maxsize=8)
def _encode_arrays(tables: HuffmanTables):
    dc = [tables.for_component(c)[0].encode_arrays() for c in range(3)]
    ac = [tables.for_component(c)[1].encode_arrays() for c in range(3)]
    return (
        np.stack([d[0] for d in dc]), np.stack([d[1] for d in dc]),
        np.stack([a[0] for a in ac]), np.stack([a[1] for a in ac]),
    )


@lru_cache(maxsize=8)
def _decode_arrays(tables: HuffmanTables):
    dc = [tables.for_component(c)[0].decode_arrays() for c in range(3)]
    ac = [tables.for_component(c)[1].decode_arrays() for c in range(3)]
    return tuple(np.ascontiguousarray(np.stack([d[i] for d in dc])) for i in range(4)) + tuple(
        np.ascontiguousarray(np.stack([a[i] for a in ac])) for i in range(4)
    )


def _check_coefs(coefs) -> np.ndarray:
    arr = np.ascontiguousarray(coefs, dtype=np.int32)
    if arr.ndim != 3 or arr.shape[0] != 3 or arr.shape[2] != 64:
        raise ValueError(f"expected (3, n_blocks, 64) coefficients, got {arr.shape}")
    return arr


def encode_scan(coefs, tables: HuffmanTables = STANDARD_TABLES, backend: str | None = None) -> bytes:
    """(3, n_blocks, 64) zig-zag coefficients -> entropy bytes (padded, not stuffed)."""
    arr = _check_coefs(coefs)
    if (backend or BACKEND) == "cython":
        _require_fast()
        try:
            return _entropy_fast.encode_scan(arr, *_encode_arrays(tables))
        except ValueError as exc:
            raise EntropyError(str(exc)) from None
    return entropy.encode_scan_py(arr, tables)


def decode_scan(
    data: bytes, n_blocks: int, tables: HuffmanTables = STANDARD_TABLES, backend: str | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Entropy bytes (unstuffed) -> (coefficients (3, n, 64), Huffman row counts (3, 174))."""
    if (backend or BACKEND) == "cython":
        _require_fast()
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
        try:
            return _entropy_fast.decode_scan(buf, n_blocks, *_decode_arrays(tables), AC_ROW)
        except ValueError as exc:
            raise EntropyError(str(exc)) from None
    return entropy.decode_scan_py(bytes(data), n_blocks, tables)


def _require_fast() -> None:
    if _entropy_fast is None:
        raise RuntimeError("compiled entropy backend is not available")
