"""A small vision transformer over block-length tokens, with hand-written gradients.

Token 0 is a learned embedding of the 522-dim Huffman-frequency vector
(FC -> LayerNorm -> ReLU -> FC) in place of a class token; tokens 1..N are
linear projections of each block's 128 lengths. Position embeddings are added,
then ``L`` pre-norm encoder layers run, and the representation is row 0 of the
output.

Everything is plain numpy. ``forward`` returns a cache that ``backward``
consumes; parameters live in a flat ``name -> array`` dict so optimizers,
EMA updates and checkpoints can treat them uniformly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from ._io import atomic_write
from .features import HUFF_DIM, SEQ_DIM

LN_EPS = 1e-6
CKPT_MAGIC = b"EVCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int  # N + 1
    L: int = 6
    D: int = 128
    h: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1
    d_h: int = 256
    in_dim: int = SEQ_DIM
    huff_dim: int = HUFF_DIM
    cls_mode: str = "huffman"  # "ones" swaps the Huffman embedding for a constant all-ones token
    head: bool = False  # optional 2-layer projection head used only by the training losses
    standardize: bool = False  # subtract/divide frozen per-dataset input statistics
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.D % self.h:
            raise ValueError(f"D={self.D} is not divisible by h={self.h}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_tokens < 2:
            raise ValueError("need at least one block token")
        if self.cls_mode not in ("huffman", "ones"):
            raise ValueError(f"unknown cls_mode {self.cls_mode!r}")

    @property
    def n_blocks(self) -> int:
        return self.n_tokens - 1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ----------------------------------------------------------------- primitives


def linear(x, W, b):
    return x @ W + b


def linear_backward(dy, x, W, grads, prefix):
    x2, dy2 = x.reshape(-1, x.shape[-1]), dy.reshape(-1, dy.shape[-1])
    grads[prefix + ".W"] += x2.T @ dy2
    grads[prefix + ".b"] += dy2.sum(axis=0)
    return dy @ W.T


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, cache, g, grads, prefix):
    xhat, inv = cache
    lead = tuple(range(dy.ndim - 1))
    grads[prefix + ".g"] += (dy * xhat).sum(axis=lead)
    grads[prefix + ".b"] += dy.sum(axis=lead)
    dxhat = dy * g
    return inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dropout(x, p, rng):
    """Inverted dropout; returns (y, mask) with mask None when inactive."""
    if p <= 0.0 or rng is None:
        return x, None
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


# ----------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Truncated-normal(0.02) weights, zero biases, unit LayerNorm scales."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dt = np.dtype(cfg.dtype)

    def tn(*shape):
        return (np.clip(rng.standard_normal(shape), -2.0, 2.0) * 0.02).astype(dt)

    def zeros(*shape):
        return np.zeros(shape, dtype=dt)

    D, H = cfg.D, cfg.mlp_ratio * cfg.D
    p = {
        "block.W": tn(cfg.in_dim, D), "block.b": zeros(D),
        "huff.fc1.W": tn(cfg.huff_dim, cfg.d_h), "huff.fc1.b": zeros(cfg.d_h),
        "huff.ln.g": np.ones(cfg.d_h, dt), "huff.ln.b": zeros(cfg.d_h),
        "huff.fc2.W": tn(cfg.d_h, D), "huff.fc2.b": zeros(D),
        "pos_emb": tn(cfg.n_tokens, D),
    }
    for l in range(cfg.L):
        pre = f"layers.{l}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(D, dt), zeros(D)
        for name in ("q", "k", "v", "o"):
            p[pre + f"attn.{name}.W"], p[pre + f"attn.{name}.b"] = tn(D, D), zeros(D)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(D, dt), zeros(D)
        p[pre + "mlp.fc1.W"], p[pre + "mlp.fc1.b"] = tn(D, H), zeros(H)
        p[pre + "mlp.fc2.W"], p[pre + "mlp.fc2.b"] = tn(H, D), zeros(D)
    if cfg.head:
        p["head.fc1.W"], p["head.fc1.b"] = tn(D, D), zeros(D)
        p["head.fc2.W"], p["head.fc2.b"] = tn(D, D), zeros(D)
    return p


def no_decay(name: str) -> bool:
    """LayerNorm parameters and the position embedding are exempt from weight decay."""
    return ".ln" in name or name == "pos_emb"


# ----------------------------------------------------------------- sub-layers


def huffman_embedding(g, params, cache: list | None = None):
    """(..., 522) -> (..., D): FC -> LayerNorm -> ReLU -> FC."""
    if g.shape[-1] != params["huff.fc1.W"].shape[0]:
        raise ValueError(f"expected {params['huff.fc1.W'].shape[0]} Huffman counts, got {g.shape[-1]}")
    a1 = linear(g, params["huff.fc1.W"], params["huff.fc1.b"])
    n1, ln_cache = layer_norm(a1, params["huff.ln.g"], params["huff.ln.b"])
    r = np.maximum(n1, 0)
    out = linear(r, params["huff.fc2.W"], params["huff.fc2.b"])
    if cache is not None:
        cache.extend([g, ln_cache, n1, r])
    return out


def huffman_embedding_backward(dout, cache, params, grads):
    g, ln_cache, n1, r = cache
    dr = linear_backward(dout, r, params["huff.fc2.W"], grads, "huff.fc2")
    dn1 = dr * (n1 > 0)
    da1 = layer_norm_backward(dn1, ln_cache, params["huff.ln.g"], grads, "huff.ln")
    return linear_backward(da1, g, params["huff.fc1.W"], grads, "huff.fc1")


def assemble_tokens(blocks, glob, params, cfg: ModelConfig, cache: list | None = None):
    """(B, N, 128), (B, 522) -> (B, N+1, D) with position embeddings added."""
    B, N, _ = blocks.shape
    if N + 1 != params["pos_emb"].shape[0]:
        raise ValueError(f"got {N} blocks, model expects {params['pos_emb'].shape[0] - 1}")
    tok = linear(blocks, params["block.W"], params["block.b"])
    hc: list = []
    if cfg.cls_mode == "huffman":
        row0 = huffman_embedding(glob, params, hc)
    else:
        row0 = np.ones((B, cfg.D), dtype=tok.dtype)
    x = np.concatenate([row0[:, None, :], tok], axis=1) + params["pos_emb"]
    if cache is not None:
        cache.extend([blocks, hc])
    return x


def assemble_tokens_backward(dx, cache, params, cfg, grads):
    blocks, hc = cache
    grads["pos_emb"] += dx.sum(axis=0)
    linear_backward(dx[:, 1:], blocks, params["block.W"], grads, "block")
    if cfg.cls_mode == "huffman":
        huffman_embedding_backward(dx[:, 0], hc, params, grads)


def multi_head_attention(x, params, prefix, n_heads, p_drop=0.0, rng=None, cache: list | None = None):
    """Scaled dot-product attention over ``n_heads`` heads; (B, T, D) -> (B, T, D)."""
    B, T, D = x.shape
    if D % n_heads:
        raise ValueError(f"D={D} is not divisible by {n_heads} heads")
    dk = D // n_heads

    def split(t):
        return t.reshape(B, T, n_heads, dk).transpose(0, 2, 1, 3)

    q = split(linear(x, params[prefix + "q.W"], params[prefix + "q.b"]))
    k = split(linear(x, params[prefix + "k.W"], params[prefix + "k.b"]))
    v = split(linear(x, params[prefix + "v.W"], params[prefix + "v.b"]))
    scale = x.dtype.type(1.0 / np.sqrt(dk))
    p = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    a = (p @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    o = linear(a, params[prefix + "o.W"], params[prefix + "o.b"])
    o, mask = dropout(o, p_drop, rng)
    if cache is not None:
        cache.extend([x, q, k, v, p, a, mask, scale])
    return o


def multi_head_attention_backward(do, cache, params, prefix, grads):
    x, q, k, v, p, a, mask, scale = cache
    B, T, D = x.shape
    nh, dk = q.shape[1], q.shape[3]
    if mask is not None:
        do = do * mask
    da = linear_backward(do, a, params[prefix + "o.W"], grads, prefix + "o")
    da = da.reshape(B, T, nh, dk).transpose(0, 2, 1, 3)
    dp = da @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ da
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk_ = ds.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, T, D)

    dx = linear_backward(merge(dq), x, params[prefix + "q.W"], grads, prefix + "q")
    dx += linear_backward(merge(dk_), x, params[prefix + "k.W"], grads, prefix + "k")
    dx += linear_backward(merge(dv), x, params[prefix + "v.W"], grads, prefix + "v")
    return dx


def encoder_layer(x, params, l: int, cfg: ModelConfig, rng=None, cache: list | None = None):
    """Pre-norm block: x' = x + MSA(LN(x)); out = x' + MLP(LN(x'))."""
    pre = f"layers.{l}."
    p_drop = cfg.dropout if rng is not None else 0.0
    h1, ln1 = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
    ac: list = []
    x1 = x + multi_head_attention(h1, params, pre + "attn.", cfg.h, p_drop, rng, ac)
    h2, ln2 = layer_norm(x1, params[pre + "ln2.g"], params[pre + "ln2.b"])
    m1 = linear(h2, params[pre + "mlp.fc1.W"], params[pre + "mlp.fc1.b"])
    gm = gelu(m1)
    m2 = linear(gm, params[pre + "mlp.fc2.W"], params[pre + "mlp.fc2.b"])
    m2, mask = dropout(m2, p_drop, rng)
    if cache is not None:
        cache.extend([ln1, ac, ln2, h2, m1, gm, mask])
    return x1 + m2


def encoder_layer_backward(dout, cache, params, l: int, grads):
    pre = f"layers.{l}."
    ln1, ac, ln2, h2, m1, gm, mask = cache
    dm2 = dout * mask if mask is not None else dout
    dgm = linear_backward(dm2, gm, params[pre + "mlp.fc2.W"], grads, pre + "mlp.fc2")
    dm1 = dgm * gelu_grad(m1)
    dh2 = linear_backward(dm1, h2, params[pre + "mlp.fc1.W"], grads, pre + "mlp.fc1")
    dx1 = dout + layer_norm_backward(dh2, ln2, params[pre + "ln2.g"], grads, pre + "ln2")
    dh1 = multi_head_attention_backward(dx1, ac, params, pre + "attn.", grads)
    return dx1 + layer_norm_backward(dh1, ln1, params[pre + "ln1.g"], grads, pre + "ln1")


# ----------------------------------------------------------------- model


@dataclass
class Cache:
    cfg: ModelConfig
    tokens: list = field(default_factory=list)
    emb_mask: np.ndarray | None = None
    layers: list = field(default_factory=list)
    head: list | None = None
    x_last_shape: tuple = ()
    used: bool = False


class EViT:
    """Parameters plus frozen input statistics; forward/backward over batches."""

    def __init__(self, cfg: ModelConfig, params: dict | None = None, buffers: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.buffers = buffers if buffers is not None else {}
        self._rng = np.random.default_rng(cfg.seed + 1)

    # -- input handling

    def fit_standardization(self, blocks: np.ndarray, glob: np.ndarray) -> None:
        """Freeze per-dataset mean/scale of both inputs (used when ``cfg.standardize``)."""
        dt = np.dtype(self.cfg.dtype)
        b = np.asarray(blocks, dtype=np.float64).reshape(-1, blocks.shape[-1])
        g = np.asarray(glob, dtype=np.float64)
        self.buffers = {
            "std.block_mean": b.mean(0).astype(dt), "std.block_scale": (b.std(0) + 1e-3).astype(dt),
            "std.huff_mean": g.mean(0).astype(dt), "std.huff_scale": (g.std(0) + 1e-3).astype(dt),
        }

    def prepare(self, blocks, glob):
        dt = np.dtype(self.cfg.dtype)
        blocks = np.asarray(blocks, dtype=dt)
        glob = np.asarray(glob, dtype=dt)
        if blocks.ndim == 2:
            blocks, glob = blocks[None], glob[None]
        if self.cfg.standardize:
            if not self.buffers:
                raise RuntimeError("standardize=True but fit_standardization was never called")
            blocks = (blocks - self.buffers["std.block_mean"]) / self.buffers["std.block_scale"]
            glob = (glob - self.buffers["std.huff_mean"]) / self.buffers["std.huff_scale"]
        return blocks, glob

    # -- forward / backward

    def forward(self, blocks, glob, train: bool = False, rng=None, project: bool = True):
        """Return (representations (B, D), cache). ``train`` enables dropout."""
        cfg, P = self.cfg, self.params
        blocks, glob = self.prepare(blocks, glob)
        drop_rng = (rng if rng is not None else self._rng) if train and cfg.dropout > 0 else None
        cache = Cache(cfg)
        x = assemble_tokens(blocks, glob, P, cfg, cache.tokens)
        x, cache.emb_mask = dropout(x, cfg.dropout, drop_rng)
        for l in range(cfg.L):
            lc: list = []
            x = encoder_layer(x, P, l, cfg, drop_rng, lc)
            cache.layers.append(lc)
        cache.x_last_shape = x.shape
        rep = x[:, 0]
        if cfg.head and project:
            h1 = linear(rep, P["head.fc1.W"], P["head.fc1.b"])
            r = np.maximum(h1, 0)
            cache.head = [rep, h1, r]
            rep = linear(r, P["head.fc2.W"], P["head.fc2.b"])
        return rep, cache

    def backward(self, cache: Cache, d_rep) -> dict[str, np.ndarray]:
        """Parameter gradients given dLoss/d(representation)."""
        if cache is None or not cache.layers:
            raise ValueError("backward needs the cache of a forward pass")
        if cache.used:
            raise ValueError("this cache was already consumed by backward")
        cache.used = True
        cfg, P = self.cfg, self.params
        grads = {k: np.zeros_like(v) for k, v in P.items()}
        d_rep = np.asarray(d_rep, dtype=np.dtype(cfg.dtype))
        if cache.head is not None:
            rep, h1, r = cache.head
            dr = linear_backward(d_rep, r, P["head.fc2.W"], grads, "head.fc2")
            d_rep = linear_backward(dr * (h1 > 0), rep, P["head.fc1.W"], grads, "head.fc1")
        dx = np.zeros(cache.x_last_shape, dtype=d_rep.dtype)
        dx[:, 0] = d_rep
        for l in reversed(range(cfg.L)):
            dx = encoder_layer_backward(dx, cache.layers[l], P, l, grads)
        if cache.emb_mask is not None:
            dx = dx * cache.emb_mask
        assemble_tokens_backward(dx, cache.tokens, P, cfg, grads)
        return grads

    def embed(self, blocks, glob, batch_size: int = 64) -> np.ndarray:
        """Eval-mode backbone representations v_L^0 for a whole dataset, (B, D)."""
        blocks = np.asarray(blocks)
        glob = np.asarray(glob)
        if blocks.ndim == 2:
            blocks, glob = blocks[None], glob[None]
        out = [
            self.forward(blocks[i : i + batch_size], glob[i : i + batch_size], train=False, project=False)[0]
            for i in range(0, len(blocks), batch_size)
        ]
        return np.concatenate(out, axis=0)

    # -- utilities

    def copy(self) -> "EViT":
        twin = EViT(self.cfg, {k: v.copy() for k, v in self.params.items()}, dict(self.buffers))
        return twin

    def astype(self, dtype: str) -> "EViT":
        cfg = ModelConfig.from_dict({**asdict(self.cfg), "dtype": dtype})
        return EViT(
            cfg,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# ----------------------------------------------------------------- checkpoints


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def checkpoint_bytes(model: EViT, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> bytes:
    """Serialize config, parameters, buffers and any extra named tensors."""
    header = json.dumps({"config": asdict(model.cfg), "meta": meta or {}}, sort_keys=True).encode()
    tensors = {**model.params, **model.buffers, **(extra or {})}
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)) + header)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_tensor(buf, name, tensors[name])
    return buf.getvalue()


def save_checkpoint(path, model: EViT, extra=None, meta=None) -> None:
    atomic_write(path, checkpoint_bytes(model, extra, meta))


def parse_checkpoint(data: bytes, source: str = "checkpoint") -> tuple[EViT, dict, dict]:
    """Bytes -> (model, extra tensors, meta)."""
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(
                f"{source}: checkpoint version {version}, this build reads {CKPT_VERSION}; retrain or convert it"
            )
        pos = 10
        header = json.loads(data[pos : pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(data):
                raise CheckpointError(f"{source}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{source}: truncated or corrupt checkpoint") from None
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes")
    cfg = ModelConfig.from_dict(header["config"])
    dt = np.dtype(cfg.dtype)
    expected = init_params(cfg, np.random.default_rng(0))
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise CheckpointError(f"{source}: missing tensors {missing[:3]}")
    params = {k: tensors.pop(k).astype(dt) for k in expected}
    for k, v in params.items():
        if v.shape != expected[k].shape:
            raise CheckpointError(f"{source}: tensor {k} has shape {v.shape}, config implies {expected[k].shape}")
    buffers = {k: tensors.pop(k).astype(dt) for k in list(tensors) if k.startswith("std.")}
    return EViT(cfg, params, buffers), tensors, header.get("meta", {})


def load_checkpoint(path) -> tuple[EViT, dict, dict]:
    return parse_checkpoint(Path(path).read_bytes(), str(path))
