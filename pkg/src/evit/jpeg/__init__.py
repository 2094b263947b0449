"""Baseline JPEG codec with an exposed entropy-coding layer."""

from .bitstream import JpegFormatError, JpegImage, parse_jpeg, parse_jpeg_with_counts, serialize_jpeg
from .codec import decode_jpeg, decode_pixels, encode_jpeg, quantized_coefficients, reconstruct_planes
from .entropy import EntropyError, EntropyStream, VliToken, entropy_code_block, tokenize_block
from .kernels import BACKEND
from .tables import STANDARD_TABLES, HuffmanTable, HuffmanTables, quant_tables
from .transform import color_convert, dct_2d, quantize_block, rgb_to_yuv, yuv_to_rgb, zigzag_scan
from .vli import vli_code, vli_decode, vli_encode

__all__ = [
    "BACKEND",
    "EntropyError",
    "EntropyStream",
    "HuffmanTable",
    "HuffmanTables",
    "JpegFormatError",
    "JpegImage",
    "STANDARD_TABLES",
    "VliToken",
    "color_convert",
    "dct_2d",
    "decode_jpeg",
    "decode_pixels",
    "encode_jpeg",
    "entropy_code_block",
    "parse_jpeg",
    "parse_jpeg_with_counts",
    "quant_tables",
    "quantize_block",
    "quantized_coefficients",
    "reconstruct_planes",
    "rgb_to_yuv",
    "serialize_jpeg",
    "tokenize_block",
    "vli_code",
    "vli_decode",
    "vli_encode",
    "yuv_to_rgb",
    "zigzag_scan",
]
