"""Feature-space augmentations for contrastive training: random swap and random splice.

Both act on whole block tokens (rows of the N×128 length matrix), like
swapping or rotating words in a sentence. Pixel-space augmentations are not
possible on cipher-images, so these are the only explicit views; dropout in
the model adds a third, implicit one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .features import FeatureSet


@dataclass(frozen=True)
class AugmentConfig:
    n_swaps: int = 2
    p_splice: float = 0.5
    seed: int = 0
    element_level: bool = False  # experimental: permute inside each block instead of across blocks

    def __post_init__(self) -> None:
        if self.n_swaps < 0:
            raise ValueError("n_swaps must be >= 0")
        if not 0.0 <= self.p_splice <= 1.0:
            raise ValueError("p_splice must lie in [0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.n_swaps == 0 and self.p_splice == 0.0


def swap_positions(blocks: np.ndarray, i: int, j: int) -> np.ndarray:
    out = np.array(blocks, copy=True)
    out[[i, j]] = out[[j, i]]
    return out


def splice_at(blocks: np.ndarray, cut: int) -> np.ndarray:
    """blocks[cut:] followed by blocks[:cut]."""
    n = len(blocks)
    if not 1 <= cut <= n - 1:
        raise ValueError(f"cut must lie in [1, {n - 1}], got {cut}")
    return np.concatenate([blocks[cut:], blocks[:cut]])


def random_swap(blocks: np.ndarray, rng: np.random.Generator, n_swaps: int = 2) -> np.ndarray:
    """``n_swaps`` exchanges, each of two distinct positions drawn uniformly."""
    n = len(blocks)
    if n_swaps == 0:
        return np.array(blocks, copy=True)
    if n < 2:
        raise ValueError("random swap needs at least two blocks")
    out = np.array(blocks, copy=True)
    for _ in range(n_swaps):
        i, j = rng.choice(n, size=2, replace=False)
        out[[i, j]] = out[[j, i]]
    return out


def random_splice(blocks: np.ndarray, rng: np.random.Generator, p_splice: float = 0.5) -> np.ndarray:
    """With probability ``p_splice`` rotate at a uniform cut in [1, N-1]."""
    n = len(blocks)
    if n < 2 or rng.random() >= p_splice:
        return np.array(blocks, copy=True)
    return splice_at(blocks, int(rng.integers(1, n)))


def augment_blocks(blocks: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Swap, then splice. With ``element_level`` both run on each block's 128 entries."""
    if cfg.element_level:
        rows = [random_splice(random_swap(row, rng, cfg.n_swaps), rng, cfg.p_splice) for row in blocks]
        return np.stack(rows) if rows else np.array(blocks, copy=True)
    return random_splice(random_swap(blocks, rng, cfg.n_swaps), rng, cfg.p_splice)


def augment_view(fs: FeatureSet, cfg: AugmentConfig, rng: np.random.Generator) -> FeatureSet:
    """One stochastic view; the global Huffman vector passes through untouched."""
    return replace(fs, blocks=augment_blocks(fs.blocks, cfg, rng))


def augment_batch(blocks: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Independent view of every sample in a (B, N, 128) batch."""
    if cfg.is_identity:
        return np.array(blocks, copy=True)
    return np.stack([augment_blocks(b, cfg, rng) for b in blocks])
