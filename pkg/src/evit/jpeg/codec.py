"""Whole-image baseline JPEG compression and decompression."""

from __future__ import annotations

import numpy as np

from .bitstream import JpegImage, parse_jpeg, serialize_jpeg
from .tables import STANDARD_TABLES, quant_tables
from .transform import (
    dct_2d,
    merge_blocks,
    pad_to_blocks,
    quantize_block,
    rgb_to_yuv,
    split_blocks,
    yuv_to_rgb,
    zigzag_scan,
)

AC_LIMIT = 1023
DC_LIMIT = 2047


def quantized_coefficients(image, quality: int = 50) -> JpegImage:
    """RGB image -> quantized zig-zag coefficient grid wrapped in a :class:`JpegImage`."""
    yuv = rgb_to_yuv(image)
    _, h, w = yuv.shape
    planes = pad_to_blocks(yuv).astype(np.float64) - 128.0
    luma_q, chroma_q = quant_tables(quality)
    coefs = []
    for comp, table in enumerate((luma_q, chroma_q, chroma_q)):
        blocks = dct_2d(split_blocks(planes[comp]))
        q = zigzag_scan(quantize_block(blocks, table))
        q[:, 1:] = np.clip(q[:, 1:], -AC_LIMIT, AC_LIMIT)
        q[:, 0] = np.clip(q[:, 0], -DC_LIMIT // 2, DC_LIMIT // 2)
        coefs.append(q)
    return JpegImage(w, h, luma_q, chroma_q, np.ascontiguousarray(np.stack(coefs), dtype=np.int32), STANDARD_TABLES)


def reconstruct_planes(img: JpegImage) -> np.ndarray:
    """Dequantize + inverse DCT -> (3, H, W) float YUV samples (unclipped, cropped)."""
    planes = []
    for comp, table in enumerate((img.luma_quant, img.chroma_quant, img.chroma_quant)):
        blocks = zigzag_scan(img.coefficients[comp].astype(np.float64), "inverse")
        spatial = dct_2d(quantize_block(blocks, table, "inverse"), "inverse") + 128.0
        planes.append(merge_blocks(spatial, img.blocks_h, img.blocks_w)[: img.height, : img.width])
    return np.stack(planes)


def decode_pixels(img: JpegImage) -> np.ndarray:
    """Coefficient grid -> RGB uint8 (H, W, 3); samples are rounded and clamped like libjpeg."""
    planes = np.clip(np.rint(reconstruct_planes(img)), 0, 255)
    return yuv_to_rgb(planes)


def encode_jpeg(image, quality: int = 50) -> bytes:
    """Plain (unencrypted) baseline JPEG bytes."""
    return serialize_jpeg(quantized_coefficients(image, quality))


def decode_jpeg(data: bytes) -> np.ndarray:
    return decode_pixels(parse_jpeg(data))
