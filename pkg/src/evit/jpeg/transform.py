"""Pixel-domain stages of baseline JPEG: color conversion, block DCT, quantization, zig-zag."""

from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

from .tables import UNZIGZAG, ZIGZAG

# JFIF (BT.601 full range) matrices.
_RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YUV_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def as_rgb(image) -> np.ndarray:
    """Validate an H x W x 3 uint8 image (anything array-like is accepted)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 RGB array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError("image must have positive width and height")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def rgb_to_yuv(image) -> np.ndarray:
    """RGB (H, W, 3) uint8 -> YUV planes (3, H, W) uint8."""
    rgb = as_rgb(image).astype(np.float64)
    yuv = np.einsum("ij,hwj->ihw", _RGB_TO_YUV, rgb)
    yuv[1:] += 128.0
    return np.clip(np.rint(yuv), 0, 255).astype(np.uint8)


def yuv_to_rgb(planes) -> np.ndarray:
    """YUV planes (3, H, W) -> RGB (H, W, 3) uint8. Accepts float planes (decoder output)."""
    yuv = np.asarray(planes, dtype=np.float64)
    if yuv.ndim != 3 or yuv.shape[0] != 3:
        raise ValueError(f"expected three equally sized planes, got shape {yuv.shape}")
    shifted = yuv - np.array([0.0, 128.0, 128.0])[:, None, None]
    rgb = np.einsum("ij,jhw->hwi", _YUV_TO_RGB, shifted)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def color_convert(data, direction: str = "forward") -> np.ndarray:
    if direction == "forward":
        return rgb_to_yuv(data)
    if direction == "inverse":
        if isinstance(data, (list, tuple)):
            shapes = {np.shape(p) for p in data}
            if len(shapes) != 1:
                raise ValueError(f"plane dimensions differ: {sorted(shapes)}")
            data = np.stack([np.asarray(p) for p in data])
        return yuv_to_rgb(data)
    raise ValueError(f"unknown direction {direction!r}")


def pad_to_blocks(planes: np.ndarray) -> np.ndarray:
    """Edge-replicate (C, H, W) planes up to multiples of 8."""
    _, h, w = planes.shape
    ph, pw = -h % 8, -w % 8
    if ph == 0 and pw == 0:
        return planes
    return np.pad(planes, ((0, 0), (0, ph), (0, pw)), mode="edge")


def split_blocks(plane: np.ndarray) -> np.ndarray:
    """(H, W) with H, W multiples of 8 -> (n_blocks, 8, 8) in raster order."""
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).swapaxes(1, 2).reshape(-1, 8, 8)


def merge_blocks(blocks: np.ndarray, blocks_h: int, blocks_w: int) -> np.ndarray:
    return blocks.reshape(blocks_h, blocks_w, 8, 8).swapaxes(1, 2).reshape(blocks_h * 8, blocks_w * 8)


def dct_2d(block: np.ndarray, direction: str = "forward") -> np.ndarray:
    """Orthonormal 8x8 DCT-II (JPEG scaling) over the last two axes.

    Input to the forward transform is level-shifted samples (x - 128).
    """
    arr = np.asarray(block, dtype=np.float64)
    if arr.shape[-2:] != (8, 8):
        raise ValueError(f"expected 8x8 blocks, got {arr.shape}")
    if direction == "forward":
        return dctn(arr, type=2, norm="ortho", axes=(-2, -1))
    if direction == "inverse":
        return idctn(arr, type=2, norm="ortho", axes=(-2, -1))
    raise ValueError(f"unknown direction {direction!r}")


def quantize_block(coeffs: np.ndarray, table: np.ndarray, direction: str = "forward") -> np.ndarray:
    """Uniform quantization with round-half-away-from-zero.

    ``table`` holds 64 steps in natural order and broadcasts against (..., 8, 8).
    """
    steps = np.asarray(table).reshape(8, 8)
    if np.any(steps <= 0):
        raise ValueError("quantizer steps must be positive")
    if direction == "forward":
        ratio = np.asarray(coeffs, dtype=np.float64) / steps
        return (np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)).astype(np.int32)
    if direction == "inverse":
        return np.asarray(coeffs, dtype=np.float64) * steps
    raise ValueError(f"unknown direction {direction!r}")


def zigzag_scan(block: np.ndarray, direction: str = "forward") -> np.ndarray:
    """(..., 8, 8) <-> (..., 64) in zig-zag scan order."""
    arr = np.asarray(block)
    if direction == "forward":
        if arr.shape[-2:] != (8, 8):
            raise ValueError(f"expected 8x8 blocks, got {arr.shape}")
        return arr.reshape(*arr.shape[:-2], 64)[..., ZIGZAG]
    if direction == "inverse":
        if arr.shape[-1] != 64:
            raise ValueError(f"expected 64-vectors, got {arr.shape}")
        return arr[..., UNZIGZAG].reshape(*arr.shape[:-1], 8, 8)
    raise ValueError(f"unknown direction {direction!r}")
