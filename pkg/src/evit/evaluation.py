"""Retrieval metrics (cosine ranking, AP@K, mAP@K) and cipher-image security metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .crypto import derive_keyset, encrypt_image, image_key_material
from .jpeg import decode_jpeg, rgb_to_yuv
from .jpeg.transform import as_rgb

IDENTICAL = "identical"  # psnr() result for identical images
KEY_SPACE = "2^1536 (six independent 256-bit keys)"


# ----------------------------------------------------------------- retrieval


@dataclass
class RankedResult:
    query_id: object
    items: list  # [(item_id, score), ...] best first

    @property
    def ids(self) -> list:
        return [i for i, _ in self.items]


def _order(scores: np.ndarray, ids: Sequence) -> np.ndarray:
    """Indices by descending score, ties by ascending id."""
    id_rank = np.argsort(np.argsort(np.asarray(ids), kind="stable"), kind="stable")
    return np.lexsort((id_rank, -scores))


def rank_by_cosine(query: np.ndarray, vectors: np.ndarray, ids: Sequence, k: int, query_id=None) -> RankedResult:
    """Top-``k`` rows of unit ``vectors`` by dot product with ``query``.

    An entry whose id equals ``query_id`` is left out (self-match removal).
    """
    if k <= 0:
        raise ValueError("K must be positive")
    if len(vectors) == 0:
        raise ValueError("index is empty")
    scores = np.asarray(vectors) @ np.asarray(query)
    order = _order(scores, ids)
    items = []
    for i in order:
        if query_id is not None and ids[i] == query_id:
            continue
        items.append((ids[i], float(scores[i])))
        if len(items) == k:
            break
    return RankedResult(query_id, items)


def ap_at_k(ranked: Sequence, relevant: set, k: int, r_q: int | None = None) -> float:
    """(1/R_q) * sum over ranks i <= k of precision@i * rel(i).

    ``ranked`` is a list of ids. When ``r_q`` is None it is the number of
    relevant ids inside the top ``k``.
    """
    if not relevant:
        raise ValueError("relevant set is empty")
    hits, total = 0, 0.0
    for i, item in enumerate(list(ranked)[:k], start=1):
        if item in relevant:
            hits += 1
            total += hits / i
    if r_q is None:
        r_q = hits
    elif r_q < 1:
        raise ValueError("R_q must be >= 1")
    return total / r_q if r_q else 0.0


def map_at_k(vectors: np.ndarray, labels: Sequence, k: int = 100, ids: Sequence | None = None) -> tuple[float, np.ndarray]:
    """Every item queries all the others; relevance = same label. Returns (mAP, per-query AP)."""
    vectors = np.asarray(vectors)
    labels = np.asarray(labels)
    if len(vectors) < 2:
        raise ValueError("need at least two items")
    ids = list(range(len(vectors))) if ids is None else list(ids)
    sims = vectors @ vectors.T
    aps = np.zeros(len(vectors))
    for q in range(len(vectors)):
        order = [i for i in _order(sims[q], ids) if i != q][:k]
        rel = labels[order] == labels[q]
        hits = np.cumsum(rel)
        n = hits[-1] if len(hits) else 0
        aps[q] = float(np.sum(rel * hits / np.arange(1, len(rel) + 1)) / n) if n else 0.0
    return float(aps.mean()), aps


# ----------------------------------------------------------------- security


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a, b) -> float | str:
    """10 log10(255^2 / MSE) over all channels; :data:`IDENTICAL` when MSE is 0."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    return IDENTICAL if mse == 0 else float(10.0 * np.log10(255.0**2 / mse))


def psnr_luma(a, b) -> float | str:
    """PSNR of the BT.601 Y planes of two RGB images."""
    return psnr(rgb_to_yuv(as_rgb(a))[0], rgb_to_yuv(as_rgb(b))[0])


def _channels(x: np.ndarray) -> np.ndarray:
    return x[..., None] if x.ndim == 2 else x


def npcr(c1, c2) -> float:
    """Percentage of differing pixel positions, per channel then averaged."""
    a, b = _pair(c1, c2)
    return float(100.0 * np.mean(_channels(a) != _channels(b), axis=(0, 1)).mean())


def uaci(c1, c2) -> float:
    """Mean absolute intensity difference as a percentage of 255, per channel then averaged."""
    a, b = _pair(c1, c2)
    return float(100.0 * np.mean(np.abs(_channels(a) - _channels(b)) / 255.0, axis=(0, 1)).mean())


def histogram(image) -> np.ndarray:
    """(channels, 256) exact pixel-value counts."""
    x = _channels(np.asarray(image))
    return np.stack([np.bincount(x[..., c].ravel().astype(np.int64), minlength=256) for c in range(x.shape[-1])])


def flatness(image) -> float:
    """Max-bin / mean-bin ratio of the histogram, averaged over channels (1 = perfectly flat)."""
    h = histogram(image).astype(np.float64)
    return float(np.mean(h.max(axis=1) / h.mean(axis=1)))


def one_pixel_change(image, rng: np.random.Generator) -> np.ndarray:
    """Copy of ``image`` with one random channel of one random pixel moved by 1."""
    out = as_rgb(image).copy()
    y, x, c = rng.integers(out.shape[0]), rng.integers(out.shape[1]), rng.integers(3)
    out[y, x, c] = out[y, x, c] + 1 if out[y, x, c] < 255 else 254
    return out


def differential_attack_trial(image, master_secret: bytes, rng: np.random.Generator, quality: int = 50, adaptive: bool = True):
    """NPCR and UACI between the decoded ciphers of an image and its one-pixel variant.

    With ``adaptive`` each image gets its own derived keys; otherwise both are
    encrypted with the keys of the original (control experiment).
    """
    image = as_rgb(image)
    other = one_pixel_change(image, rng)
    k1 = derive_keyset(image_key_material(image), master_secret)
    k2 = derive_keyset(image_key_material(other), master_secret) if adaptive else k1
    d1 = decode_jpeg(encrypt_image(image, k1, quality))
    d2 = decode_jpeg(encrypt_image(other, k2, quality))
    return npcr(d1, d2), uaci(d1, d2)


@dataclass
class CryptoReport:
    psnr_db: list = field(default_factory=list)
    psnr_luma_db: list = field(default_factory=list)
    npcr_percent: float | None = None
    uaci_percent: float | None = None
    histogram_flatness_plain: float | None = None
    histogram_flatness_cipher: float | None = None
    key_space: str = KEY_SPACE

    @staticmethod
    def _mean(values) -> float | None:
        nums = [v for v in values if isinstance(v, float)]
        return float(np.mean(nums)) if nums else None

    @property
    def psnr_mean(self) -> float | None:
        return self._mean(self.psnr_db)

    @property
    def psnr_luma_mean(self) -> float | None:
        return self._mean(self.psnr_luma_db)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr_mean"] = self.psnr_mean
        d["psnr_luma_mean"] = self.psnr_luma_mean
        return d


def crypto_report(plains: Sequence, ciphers: Sequence, differential: Sequence | None = None) -> CryptoReport:
    """Summarize decoded cipher-images against their plain images.

    ``differential`` is an optional list of (npcr, uaci) trial results.
    """
    if len(plains) != len(ciphers):
        raise ValueError("need one cipher per plain image")
    rep = CryptoReport()
    for p, c in zip(plains, ciphers):
        rep.psnr_db.append(psnr(p, c))
        rep.psnr_luma_db.append(psnr_luma(p, c))
    if plains:
        rep.histogram_flatness_plain = float(np.mean([flatness(p) for p in plains]))
        rep.histogram_flatness_cipher = float(np.mean([flatness(c) for c in ciphers]))
    if differential:
        arr = np.asarray(differential, dtype=np.float64)
        rep.npcr_percent, rep.uaci_percent = float(arr[:, 0].mean()), float(arr[:, 1].mean())
    return rep

