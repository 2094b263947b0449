"""Dataset manifests, the retrieval index file and the search path."""

from __future__ import annotations

import hashlib
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .evaluation import RankedResult, rank_by_cosine
from .features import FeatureSet, extract, stack_features
from .model import EViT, checkpoint_bytes, parse_checkpoint
from .training import l2_normalize

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".ppm", ".tif", ".tiff", ".gif", ".webp"}
INDEX_MAGIC = b"EVIX"
INDEX_VERSION = 1


class IndexFormatError(ValueError):
    """Unreadable or incompatible index file."""


class FingerprintMismatch(RuntimeError):
    """Index and checkpoint come from different encoders."""


# ----------------------------------------------------------------- manifest


def image_id(path: Path, root: Path) -> str:
    """Relative path without suffix, with forward slashes: ``class/name``."""
    return path.relative_to(root).with_suffix("").as_posix()


def list_images(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class ManifestEntry:
    path: str  # relative to the image root
    label: str
    split: str  # "train" | "test"

    @property
    def id(self) -> str:
        return Path(self.path).with_suffix("").as_posix()


@dataclass
class DatasetManifest:
    root: str
    split_mode: str
    seed: int
    entries: list = field(default_factory=list)

    @property
    def classes(self) -> list[str]:
        return sorted({e.label for e in self.entries})

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def labels_by_id(self) -> dict[str, str]:
        return {e.id: e.label for e in self.entries}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(d["root"], d["split_mode"], d["seed"], [ManifestEntry(**e) for e in d["entries"]])

    def save(self, path) -> None:
        atomic_write(path, self.to_json().encode())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def build_manifest(
    image_dir, split_mode: str = "closed_set", fraction: float = 0.7, seed: int = 0
) -> DatasetManifest:
    """Split a folder of class sub-directories.

    ``closed_set``: every class keeps ``fraction`` of its images for training.
    ``open_set``: ``fraction`` of the classes go to training, the rest to test.
    """
    root = Path(image_dir)
    by_class: dict[str, list[str]] = {}
    for p in list_images(root):
        rel = p.relative_to(root)
        if len(rel.parts) < 2:
            raise ValueError(f"{rel}: images must live in class sub-directories")
        by_class.setdefault(rel.parts[0], []).append(rel.as_posix())
    if not by_class:
        raise ValueError(f"no images under {root}")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    classes = sorted(by_class)
    if split_mode == "closed_set":
        for c in classes:
            files = by_class[c]
            if len(files) < 2:
                raise ValueError(f"class {c!r} has {len(files)} image(s); closed-set splits need at least 2")
            order = rng.permutation(len(files))
            n_train = min(max(int(round(fraction * len(files))), 1), len(files) - 1)
            for rank, i in enumerate(order):
                entries.append(ManifestEntry(files[i], c, "train" if rank < n_train else "test"))
    elif split_mode == "open_set":
        if len(classes) < 2:
            raise ValueError("open-set splits need at least 2 classes")
        order = rng.permutation(len(classes))
        n_train = min(max(int(round(fraction * len(classes))), 1), len(classes) - 1)
        train_classes = {classes[i] for i in order[:n_train]}
        for c in classes:
            for f in by_class[c]:
                entries.append(ManifestEntry(f, c, "train" if c in train_classes else "test"))
    else:
        raise ValueError(f"unknown split mode {split_mode!r}")
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(str(root), split_mode, seed, entries)


# ----------------------------------------------------------------- index


def fingerprint(checkpoint: bytes) -> bytes:
    """SHA-256 of the checkpoint file."""
    return hashlib.sha256(checkpoint).digest()


@dataclass
class RetrievalIndex:
    ids: list
    vectors: np.ndarray  # (n, D) float32, unit rows
    fingerprint: bytes

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.ids):
            raise ValueError("one vector per id required")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        n, d = self.vectors.shape
        buf.write(INDEX_MAGIC + struct.pack("<HII", INDEX_VERSION, d, n))
        for ident in self.ids:
            raw = ident.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(self.vectors.astype("<f4").tobytes())
        buf.write(self.fingerprint)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "index") -> "RetrievalIndex":
        if data[:4] != INDEX_MAGIC:
            raise IndexFormatError(f"{source}: not an index file (bad magic)")
        try:
            version, d, n = struct.unpack_from("<HII", data, 4)
            if version != INDEX_VERSION:
                raise IndexFormatError(
                    f"{source}: index version {version}, this build reads {INDEX_VERSION}; rebuild with `evit index`"
                )
            pos, ids = 14, []
            for _ in range(n):
                (m,) = struct.unpack_from("<H", data, pos)
                ids.append(data[pos + 2 : pos + 2 + m].decode("utf-8"))
                pos += 2 + m
        except (struct.error, UnicodeDecodeError):
            raise IndexFormatError(f"{source}: truncated id table") from None
        end = pos + 4 * n * d
        if len(data) != end + 32:
            raise IndexFormatError(f"{source}: expected {end + 32} bytes, found {len(data)}")
        vectors = np.frombuffer(data, "<f4", n * d, pos).reshape(n, d).astype(np.float32)
        return cls(ids, vectors, bytes(data[end:]))

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


@dataclass
class Encoder:
    """A loaded checkpoint and its fingerprint."""

    model: EViT
    fingerprint: bytes

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "checkpoint") -> "Encoder":
        model, _, _ = parse_checkpoint(data, source)
        return cls(model, fingerprint(data))

    @classmethod
    def load(cls, path) -> "Encoder":
        return cls.from_bytes(Path(path).read_bytes(), str(path))

    @classmethod
    def from_model(cls, model: EViT) -> "Encoder":
        return cls(model, fingerprint(checkpoint_bytes(model)))

    def encode(self, features: list[FeatureSet]) -> np.ndarray:
        blocks, glob = stack_features(features)
        if blocks.shape[1] != self.model.cfg.n_blocks:
            raise ValueError(
                f"images have {blocks.shape[1]} blocks, the checkpoint expects {self.model.cfg.n_blocks}"
            )
        return l2_normalize(self.model.embed(blocks, glob).astype(np.float64)).astype(np.float32)


def build_index(features: list[FeatureSet], encoder: Encoder) -> RetrievalIndex:
    """Forward every image in eval mode and store unit vectors keyed by image id."""
    return RetrievalIndex([fs.image_id for fs in features], encoder.encode(features), encoder.fingerprint)


def index_cipher_dir(cipher_dir, encoder: Encoder) -> RetrievalIndex:
    root = Path(cipher_dir)
    feats = [extract(p.read_bytes(), image_id(p, root)) for p in list_images(root)]
    if not feats:
        raise ValueError(f"no cipher-images under {root}")
    return build_index(feats, encoder)


def search(query_cipher: bytes, index: RetrievalIndex, encoder: Encoder, k: int = 10, query_id=None):
    """Extract, encode and rank one query. Returns (RankedResult, timings in seconds)."""
    if index.fingerprint != encoder.fingerprint:
        raise FingerprintMismatch(
            "index was built with a different checkpoint; rebuild it with `evit index` or pass the matching checkpoint"
        )
    t0 = time.perf_counter()
    fs = extract(query_cipher, query_id or "")
    t1 = time.perf_counter()
    q = encoder.encode([fs])[0]
    t2 = time.perf_counter()
    ranked: RankedResult = rank_by_cosine(q, index.vectors, index.ids, k, query_id)
    t3 = time.perf_counter()
    timings = {"extract_s": t1 - t0, "forward_s": t2 - t1, "rank_s": t3 - t2, "total_s": t3 - t0}
    return ranked, timings
