"""Contrastive pre-training (momentum encoder + negative queue) and ArcFace fine-tuning.

All losses return ``(loss, gradients)`` so they chain into :meth:`EViT.backward`.
Training is deterministic for a fixed seed: shuffling, augmentation, dropout
and queue initialization all draw from one generator.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_batch
from .model import EViT, ModelConfig, no_decay, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became NaN/Inf."""


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.1
    m: float = 0.99
    queue_size: int = 1022  # largest multiple of the default batch size not above 1024
    batch_size: int = 14
    lr_peak: float = 1e-3
    warmup_epochs: int = 20
    total_epochs: int = 200
    weight_decay: float = 5e-5
    decay_all: bool = False  # also decay LayerNorm parameters and the position embedding
    sgd_momentum: float = 0.9
    in_batch_negatives: bool = True
    seed: int = 0
    # supervised stage
    sup_batch_size: int = 35
    sup_epochs: int = 100
    arc_s: float = 32.0
    arc_alpha: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("m must lie in [0, 1]")
        if self.queue_size % self.batch_size:
            raise ValueError(
                f"queue_size {self.queue_size} is not a multiple of batch_size {self.batch_size}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        aug = d.pop("augment", None)
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if isinstance(aug, dict):
            known["augment"] = AugmentConfig(**aug)
        return cls(**known)


# ----------------------------------------------------------------- vectors


def l2_normalize(h: np.ndarray, axis: int = -1) -> np.ndarray:
    h = np.asarray(h)
    norm = np.linalg.norm(h, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero vector")
    return h / norm


def l2_normalize_backward(dy: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Gradient through y = h/|h| along the last axis."""
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    y = h / norm
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm


def momentum_update(target: dict, online: dict, m: float) -> dict:
    """In place: target <- m * target + (1 - m) * online."""
    for k, v in target.items():
        if v.shape != online[k].shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {online[k].shape}")
        v *= m
        v += (1.0 - m) * online[k]
    return target


# ----------------------------------------------------------------- InfoNCE


class NegativeQueue:
    """Fixed-size FIFO ring of unit vectors; starts full of random directions."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator, dtype="float32"):
        if size <= 0:
            raise ValueError("queue size must be positive")
        self.vectors = l2_normalize(rng.standard_normal((size, dim))).astype(dtype)
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.vectors)

    def enqueue(self, keys: np.ndarray) -> None:
        """Overwrite the oldest ``len(keys)`` entries."""
        n = len(keys)
        if n > len(self.vectors):
            raise ValueError("batch larger than the queue")
        idx = (self.cursor + np.arange(n)) % len(self.vectors)
        self.vectors[idx] = keys
        self.cursor = int((self.cursor + n) % len(self.vectors))

    def ordered(self) -> np.ndarray:
        """Entries from oldest to newest."""
        return np.roll(self.vectors, -self.cursor, axis=0)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def info_nce(h_i: np.ndarray, h_j: np.ndarray, negatives: np.ndarray, tau: float = 0.1) -> float:
    """Single pair against explicit negatives (rows of ``negatives``); inputs must be unit vectors."""
    h_i, h_j = np.asarray(h_i, dtype=np.float64), np.asarray(h_j, dtype=np.float64)
    if np.linalg.norm(h_i) == 0 or np.linalg.norm(h_j) == 0:
        raise ValueError("zero-norm input")
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.size == 0:
        raise ValueError("need at least one negative")
    logits = np.concatenate([[h_i @ h_j], negatives @ h_i]) / tau
    return float(-_log_softmax(logits)[0])


def info_nce_batch(q, k, queue, tau: float = 0.1, in_batch: bool = True):
    """Mean InfoNCE of queries ``q`` (B, D) with positives ``k`` (B, D).

    Negatives are the other keys in the batch (when ``in_batch``) plus every
    queue entry. Returns (loss, dL/dq, dL/dk).
    """
    B = len(q)
    cand = np.concatenate([k, queue], axis=0) if len(queue) else k
    logits = (q @ cand.T) / tau
    if not in_batch:
        off = ~np.eye(B, dtype=bool)
        logits[:, :B][off] = -np.inf
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(B), np.arange(B)]))
    dlogits = np.exp(logp)
    dlogits[np.arange(B), np.arange(B)] -= 1.0
    dlogits /= B * tau
    dq = dlogits @ cand
    dk = dlogits[:, :B].T @ q
    return loss, dq.astype(q.dtype), dk.astype(k.dtype)


# ----------------------------------------------------------------- ArcFace


ARC_EPS = 1e-7


def arcface_loss(h, labels, centers, s: float = 32.0, alpha: float = 0.1):
    """Additive angular margin softmax loss.

    ``h`` are unit features (B, D); ``centers`` (n, D) are normalized here.
    Returns (loss, dL/dh, dL/dcenters).
    """
    labels = np.asarray(labels)
    n = len(centers)
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"labels must lie in [0, {n - 1}]")
    B = len(h)
    cn = np.linalg.norm(centers, axis=1, keepdims=True)
    w = centers / cn
    cos_raw = h @ w.T
    cos = np.clip(cos_raw, -1.0 + ARC_EPS, 1.0 - ARC_EPS)
    inside = (cos_raw > -1.0 + ARC_EPS) & (cos_raw < 1.0 - ARC_EPS)
    rows = np.arange(B)
    theta = np.arccos(cos[rows, labels])
    logits = s * cos
    logits[rows, labels] = s * np.cos(theta + alpha)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[rows, labels]))
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= B
    dcos = s * dlogits
    dcos[rows, labels] *= np.sin(theta + alpha) / np.sin(theta)
    dcos *= inside
    dh = dcos @ w
    dw = dcos.T @ h
    dcenters = (dw - w * (dw * w).sum(axis=1, keepdims=True)) / cn
    return loss, dh.astype(h.dtype), dcenters.astype(centers.dtype)


@dataclass
class ArcFaceHead:
    centers: np.ndarray  # (n_classes, D)
    s: float = 32.0
    alpha: float = 0.1

    @classmethod
    def init(cls, n_classes: int, dim: int, rng: np.random.Generator, s=32.0, alpha=0.1, dtype="float32"):
        return cls(l2_normalize(rng.standard_normal((n_classes, dim))).astype(dtype), s, alpha)

    def loss(self, h, labels):
        return arcface_loss(h, labels, self.centers, self.s, self.alpha)


# ----------------------------------------------------------------- optimisation


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int, total_epochs: int | None = None) -> float:
    """Linear warm-up to ``lr_peak`` over ``warmup_epochs``, then cosine decay to 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    total = (total_epochs if total_epochs is not None else cfg.total_epochs) * steps_per_epoch
    warm = min(cfg.warmup_epochs * steps_per_epoch, total)
    if step < warm:
        return cfg.lr_peak * step / warm
    if total <= warm:
        return cfg.lr_peak
    frac = min((step - warm) / (total - warm), 1.0)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class SGD:
    """Heavy-ball SGD; weight decay is added to the gradient (classic L2)."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0, decay_all: bool = False):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = {k: decay_all or not no_decay(k) for k in params}
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay and self.decay[k]:
                g = g + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= lr * v


def _check_finite(loss: float, grads: dict, where: str) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{where}: loss is {loss}; lower lr_peak or check the inputs")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"{where}: non-finite gradient in {k}")


@dataclass
class History:
    epoch_loss: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)
    seconds: float = 0.0


def _log_row(path: Path | None, epoch: int, loss: float, lr: float) -> None:
    if path is None:
        return
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "loss", "lr"])
        w.writerow([epoch, f"{loss:.6f}", f"{lr:.6e}"])


# ----------------------------------------------------------------- unsupervised


def unsupervised_step(model, key_model, opt, queue, blocks, glob, cfg: TrainConfig, lr, rng):
    """One momentum-contrast update. Returns the batch loss."""
    v1 = augment_batch(blocks, cfg.augment, rng)
    v2 = augment_batch(blocks, cfg.augment, rng)
    q_raw, cache = model.forward(v1, glob, train=True, rng=rng)
    k_raw, _ = key_model.forward(v2, glob, train=True, rng=rng)
    q, k = l2_normalize(q_raw), l2_normalize(k_raw)
    loss, dq, _ = info_nce_batch(q, k, queue.vectors, cfg.tau, cfg.in_batch_negatives)
    grads = model.backward(cache, l2_normalize_backward(dq, q_raw))
    _check_finite(loss, grads, "unsupervised step")
    opt.step(grads, lr)
    momentum_update(key_model.params, model.params, cfg.m)
    queue.enqueue(k)
    return loss


def train_unsupervised(
    blocks: np.ndarray,
    glob: np.ndarray,
    cfg: TrainConfig,
    model: EViT | None = None,
    model_cfg: ModelConfig | None = None,
    out_dir=None,
    epochs: int | None = None,
    progress=None,
) -> tuple[EViT, History]:
    """Momentum-contrast training over a fixed-N dataset (B, N, 128) / (B, 522).

    ``epochs`` stops early while keeping the schedule of ``cfg.total_epochs``.
    With ``out_dir``, a CSV log and the latest checkpoint are written every epoch.
    """
    blocks = np.asarray(blocks)
    glob = np.asarray(glob)
    if len(blocks) < cfg.batch_size:
        raise ValueError(f"dataset has {len(blocks)} samples, fewer than one batch of {cfg.batch_size}")
    if model is None:
        model = EViT(model_cfg or ModelConfig(n_tokens=blocks.shape[1] + 1, seed=cfg.seed))
    if model.cfg.n_blocks != blocks.shape[1]:
        raise ValueError(f"model expects N={model.cfg.n_blocks}, data has N={blocks.shape[1]}")
    if model.cfg.standardize and not model.buffers:
        model.fit_standardization(blocks, glob)
    rng = np.random.default_rng(cfg.seed)
    key_model = model.copy()
    queue = NegativeQueue(cfg.queue_size, model.cfg.D, rng, model.cfg.dtype)
    opt = SGD(model.params, cfg.sgd_momentum, cfg.weight_decay, cfg.decay_all)
    spe = len(blocks) // cfg.batch_size
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "unsup_log.csv").unlink(missing_ok=True)
    hist, t0, step = History(), time.perf_counter(), 0
    n_epochs = min(epochs if epochs is not None else cfg.total_epochs, cfg.total_epochs)
    for epoch in range(n_epochs):
        order = rng.permutation(len(blocks))
        losses = []
        for b in range(spe):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = lr_schedule(step, cfg, spe)
            losses.append(unsupervised_step(model, key_model, opt, queue, blocks[idx], glob[idx], cfg, lr, rng))
            step += 1
        hist.epoch_loss.append(float(np.mean(losses)))
        hist.epoch_lr.append(lr)
        hist.step_loss.extend(losses)
        if out is not None:
            _log_row(out / "unsup_log.csv", epoch, hist.epoch_loss[-1], lr)
            save_checkpoint(out / "unsup.evck", model, meta={"stage": "unsupervised", "epoch": epoch})
        log.info("unsup epoch %d loss %.4f lr %.2e", epoch, hist.epoch_loss[-1], lr)
        if progress is not None:
            progress(epoch, hist.epoch_loss[-1])
    hist.seconds = time.perf_counter() - t0
    return model, hist


# ----------------------------------------------------------------- supervised


def supervised_step(model, head, opt, blocks, glob, labels, lr, rng, train_centers=True):
    rep, cache = model.forward(blocks, glob, train=True, rng=rng)
    h = l2_normalize(rep)
    loss, dh, dcenters = head.loss(h, labels)
    grads = model.backward(cache, l2_normalize_backward(dh, rep))
    grads["arcface.centers"] = dcenters
    _check_finite(loss, grads, "supervised step")
    opt.step(grads, lr)
    return loss


def fine_tune_supervised(
    blocks: np.ndarray,
    glob: np.ndarray,
    labels: np.ndarray,
    init: EViT,
    cfg: TrainConfig,
    out_dir=None,
    epochs: int | None = None,
    progress=None,
) -> tuple[EViT, ArcFaceHead, History]:
    """ArcFace fine-tuning of a copy of ``init`` (typically the unsupervised model)."""
    blocks, glob = np.asarray(blocks), np.asarray(glob)
    labels = np.asarray(labels, dtype=np.int64)
    if init.cfg.n_blocks != blocks.shape[1]:
        raise ValueError(f"checkpoint expects N={init.cfg.n_blocks}, data has N={blocks.shape[1]}")
    if len(labels) != len(blocks):
        raise ValueError("one label per sample required")
    classes = np.unique(labels)
    if not np.array_equal(classes, np.arange(len(classes))):
        raise ValueError("labels must be 0..n_classes-1")
    model = init.copy()
    rng = np.random.default_rng(cfg.seed + 7)
    head = ArcFaceHead.init(len(classes), model.cfg.D, rng, cfg.arc_s, cfg.arc_alpha, model.cfg.dtype)
    params = dict(model.params)
    params["arcface.centers"] = head.centers
    opt = SGD(params, cfg.sgd_momentum, cfg.weight_decay, cfg.decay_all)
    bs = min(cfg.sup_batch_size, len(blocks))
    spe = max(len(blocks) // bs, 1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sup_log.csv").unlink(missing_ok=True)
    hist, t0, step = History(), time.perf_counter(), 0
    n_epochs = min(epochs if epochs is not None else cfg.sup_epochs, cfg.sup_epochs)
    for epoch in range(n_epochs):
        order = rng.permutation(len(blocks))
        losses = []
        for b in range(spe):
            idx = order[b * bs : (b + 1) * bs]
            lr = lr_schedule(step, cfg, spe, cfg.sup_epochs)
            losses.append(supervised_step(model, head, opt, blocks[idx], glob[idx], labels[idx], lr, rng))
            step += 1
        hist.epoch_loss.append(float(np.mean(losses)))
        hist.epoch_lr.append(lr)
        hist.step_loss.extend(losses)
        if out is not None:
            _log_row(out / "sup_log.csv", epoch, hist.epoch_loss[-1], lr)
            save_checkpoint(
                out / "sup.evck", model, extra={"arcface.centers": head.centers},
                meta={"stage": "supervised", "epoch": epoch, "s": head.s, "alpha": head.alpha},
            )
        log.info("sup epoch %d loss %.4f lr %.2e", epoch, hist.epoch_loss[-1], lr)
        if progress is not None:
            progress(epoch, hist.epoch_loss[-1])
    hist.seconds = time.perf_counter() - t0
    return model, head, hist
