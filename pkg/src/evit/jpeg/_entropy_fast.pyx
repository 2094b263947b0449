# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scan-level Huffman/VLI coder (interleaved 4:4:4, no restart markers)."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint8_t, uint32_t, uint64_t

cnp.import_array()


cdef inline int _category(int64_t v) nogil:
    cdef int64_t m = v if v >= 0 else -v
    cdef int c = 0
    while m:
        m >>= 1
        c += 1
    return c


cdef struct Writer:
    uint8_t* out
    Py_ssize_t n
    uint64_t acc
    int nbits


cdef inline void _put(Writer* w, uint32_t code, int size) nogil:
    w.acc = (w.acc << size) | (code & ((<uint64_t>1 << size) - 1))
    w.nbits += size
    while w.nbits >= 8:
        w.nbits -= 8
        w.out[w.n] = <uint8_t>((w.acc >> w.nbits) & 0xFF)
        w.n += 1


def encode_scan(const int32_t[:, :, ::1] coefs,
                const uint32_t[:, ::1] dc_code, const int32_t[:, ::1] dc_size,
                const uint32_t[:, ::1] ac_code, const int32_t[:, ::1] ac_size):
    """Entropy-code (3, n_blocks, 64) zig-zag coefficients; returns unstuffed bytes."""
    cdef Py_ssize_t n_blocks = coefs.shape[1]
    cdef Py_ssize_t b, k
    cdef int comp, run, cat, sym, size
    cdef int64_t diff, v, raw
    cdef int32_t prev[3]
    prev[0] = 0
    prev[1] = 0
    prev[2] = 0
    buf = np.empty(n_blocks * 3 * 216 + 16, dtype=np.uint8)
    cdef uint8_t[::1] view = buf
    cdef Writer w
    w.out = &view[0]
    w.n = 0
    w.acc = 0
    w.nbits = 0
    for b in range(n_blocks):
        for comp in range(3):
            diff = <int64_t>coefs[comp, b, 0] - prev[comp]
            prev[comp] = coefs[comp, b, 0]
            cat = _category(diff)
            if cat > 11:
                raise ValueError(f"DC difference {diff} outside the JPEG range")
            size = dc_size[comp, cat]
            if size == 0:
                raise ValueError(f"DC category {cat} missing from table")
            _put(&w, dc_code[comp, cat], size)
            if cat:
                raw = diff if diff > 0 else diff + (<int64_t>1 << cat) - 1
                _put(&w, <uint32_t>raw, cat)
            run = 0
            for k in range(1, 64):
                v = coefs[comp, b, k]
                if v == 0:
                    run += 1
                    continue
                while run > 15:
                    size = ac_size[comp, 0xF0]
                    if size == 0:
                        raise ValueError("ZRL missing from AC table")
                    _put(&w, ac_code[comp, 0xF0], size)
                    run -= 16
                cat = _category(v)
                if cat > 10:
                    raise ValueError(f"AC value {v} outside the JPEG range")
                sym = (run << 4) | cat
                size = ac_size[comp, sym]
                if size == 0:
                    raise ValueError(f"AC symbol {sym:#04x} missing from table")
                _put(&w, ac_code[comp, sym], size)
                raw = v if v > 0 else v + (<int64_t>1 << cat) - 1
                _put(&w, <uint32_t>raw, cat)
                run = 0
            if run:
                size = ac_size[comp, 0]
                if size == 0:
                    raise ValueError("EOB missing from AC table")
                _put(&w, ac_code[comp, 0], size)
    if w.nbits:
        pad = 8 - w.nbits
        _put(&w, (1 << pad) - 1, pad)
    return bytes(buf[: w.n])


cdef struct Reader:
    const uint8_t* data
    int64_t pos
    int64_t nbits


cdef inline int _bit(Reader* r) nogil:
    if r.pos >= r.nbits:
        return -1
    cdef int out = (r.data[r.pos >> 3] >> (7 - (r.pos & 7))) & 1
    r.pos += 1
    return out


cdef inline int64_t _receive(Reader* r, int n) nogil:
    cdef int64_t v = 0
    cdef int i, bit
    if r.pos + n > r.nbits:
        return -1
    for i in range(n):
        bit = (r.data[r.pos >> 3] >> (7 - (r.pos & 7))) & 1
        r.pos += 1
        v = (v << 1) | bit
    return v


cdef inline int _decode_symbol(Reader* r, const int32_t* mincode, const int32_t* maxcode,
                               const int32_t* valptr, const int32_t* huffval) nogil:
    # -1: truncated, -2: invalid code
    cdef int bit = _bit(r)
    if bit < 0:
        return -1
    cdef int32_t code = bit
    cdef int length = 1
    while code > maxcode[length]:
        length += 1
        if length > 16:
            return -2
        bit = _bit(r)
        if bit < 0:
            return -1
        code = (code << 1) | bit
    return huffval[valptr[length] + code - mincode[length]]


cdef inline int64_t _extend(int64_t raw, int cat) nogil:
    if cat == 0:
        return 0
    if raw < (<int64_t>1 << (cat - 1)):
        return raw - (<int64_t>1 << cat) + 1
    return raw


def decode_scan(const uint8_t[::1] data, Py_ssize_t n_blocks,
                const int32_t[:, ::1] dc_mincode, const int32_t[:, ::1] dc_maxcode,
                const int32_t[:, ::1] dc_valptr, const int32_t[:, ::1] dc_huffval,
                const int32_t[:, ::1] ac_mincode, const int32_t[:, ::1] ac_maxcode,
                const int32_t[:, ::1] ac_valptr, const int32_t[:, ::1] ac_huffval,
                const int32_t[::1] ac_row):
    """Decode unstuffed scan bytes -> ((3, n_blocks, 64) int32 coefficients, (3, 174) row counts)."""
    coefs_arr = np.zeros((3, n_blocks, 64), dtype=np.int32)
    counts_arr = np.zeros((3, 174), dtype=np.int64)
    cdef int32_t[:, :, ::1] coefs = coefs_arr
    cdef int64_t[:, ::1] counts = counts_arr
    cdef Reader r
    r.data = NULL
    if data.shape[0]:
        r.data = &data[0]
    r.pos = 0
    r.nbits = <int64_t>data.shape[0] * 8
    cdef int64_t prev[3]
    prev[0] = 0
    prev[1] = 0
    prev[2] = 0
    cdef Py_ssize_t b
    cdef int comp, k, sym, run, size, row
    cdef int64_t raw
    for b in range(n_blocks):
        for comp in range(3):
            sym = _decode_symbol(&r, &dc_mincode[comp, 0], &dc_maxcode[comp, 0],
                                 &dc_valptr[comp, 0], &dc_huffval[comp, 0])
            if sym == -1:
                raise ValueError("entropy data truncated")
            if sym == -2:
                raise ValueError(f"invalid Huffman code at bit {r.pos}")
            if sym > 11:
                raise ValueError(f"DC category {sym} out of range")
            counts[comp, sym] += 1
            raw = _receive(&r, sym)
            if raw < 0:
                raise ValueError("entropy data truncated")
            prev[comp] += _extend(raw, sym)
            coefs[comp, b, 0] = <int32_t>prev[comp]
            k = 1
            while k < 64:
                sym = _decode_symbol(&r, &ac_mincode[comp, 0], &ac_maxcode[comp, 0],
                                     &ac_valptr[comp, 0], &ac_huffval[comp, 0])
                if sym == -1:
                    raise ValueError("entropy data truncated")
                if sym == -2:
                    raise ValueError(f"invalid Huffman code at bit {r.pos}")
                row = ac_row[sym]
                if row < 0:
                    raise ValueError(f"AC symbol {sym:#04x} is not a legal (run, size) pair")
                counts[comp, 12 + row] += 1
                if sym == 0:
                    break
                if sym == 0xF0:
                    k += 16
                    continue
                run = sym >> 4
                size = sym & 15
                k += run
                if k > 63:
                    raise ValueError("run length overflows the block")
                raw = _receive(&r, size)
                if raw < 0:
                    raise ValueError("entropy data truncated")
                coefs[comp, b, k] = <int32_t>_extend(raw, size)
                k += 1
            if k > 64:
                raise ValueError("run length overflows the block")
    if r.nbits - r.pos >= 8:
        raise ValueError("unexpected data after the last block")
    return coefs_arr, counts_arr
