import math

import numpy as np
import pytest

from evit.model import (
    CheckpointError,
    EViT,
    ModelConfig,
    assemble_tokens,
    checkpoint_bytes,
    gelu,
    gelu_grad,
    init_params,
    layer_norm,
    load_checkpoint,
    multi_head_attention,
    no_decay,
    parse_checkpoint,
    save_checkpoint,
    softmax,
)


def tiny(n_tokens=5, dtype="float64", **kw):
    base = dict(n_tokens=n_tokens, L=2, D=8, h=2, mlp_ratio=2, d_h=6, in_dim=128, huff_dim=522,
                dropout=0.0, dtype=dtype, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def inputs(rng, B=3, N=4):
    return rng.integers(0, 12, (B, N, 128)).astype(float), rng.integers(0, 50, (B, 522)).astype(float)


def randomize(model, rng, scale=0.3):
    for k, v in model.params.items():
        model.params[k] = (rng.standard_normal(v.shape) * scale).astype(v.dtype)
        if k.endswith(".g"):
            model.params[k] += 1.0


def fd_check(model, blocks, glob, rng, names, n_entries=6, eps=1e-5):
    w = rng.standard_normal((len(blocks), model.cfg.D))

    def loss():
        return float(np.sum(model.forward(blocks, glob)[0] * w))

    rep, cache = model.forward(blocks, glob)
    grads = model.backward(cache, w)
    worst = 0.0
    for name in names:
        p = model.params[name]
        for idx in [tuple(rng.integers(0, s) for s in p.shape) for _ in range(n_entries)]:
            old = p[idx]
            p[idx] = old + eps
            up = loss()
            p[idx] = old - eps
            down = loss()
            p[idx] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - grads[name][idx]) / max(abs(num), abs(grads[name][idx]), 1e-4))
    return worst


class TestPrimitives:
    def test_softmax_rows(self, rng):
        p = softmax(rng.standard_normal((4, 7)) * 30)
        assert np.allclose(p.sum(-1), 1) and np.all(p >= 0)

    def test_gelu_values(self):
        assert gelu(np.array([0.0]))[0] == 0
        x = 1.3
        assert gelu(np.array([x]))[0] == pytest.approx(0.5 * x * (1 + math.erf(x / math.sqrt(2))))
        h = 1e-6
        fd = (gelu(np.array([x + h])) - gelu(np.array([x - h]))) / (2 * h)
        assert gelu_grad(np.array([x]))[0] == pytest.approx(fd[0], rel=1e-6)

    def test_layer_norm_zero_mean_unit_var(self, rng):
        y, _ = layer_norm(rng.standard_normal((5, 16)) * 4 + 3, np.ones(16), np.zeros(16))
        assert np.allclose(y.mean(-1), 0, atol=1e-9) and np.allclose(y.var(-1), 1, atol=1e-4)

    def test_no_decay(self):
        assert no_decay("layers.0.ln1.g") and no_decay("pos_emb") and no_decay("huff.ln.b")
        assert not no_decay("layers.0.attn.q.W") and not no_decay("block.b")


class TestAttention:
    def test_single_token_passes_value_through(self, rng):
        cfg = tiny()
        P = init_params(cfg, rng)
        x = rng.standard_normal((2, 1, 8))
        out = multi_head_attention(x, P, "layers.0.attn.", 2)
        v = x @ P["layers.0.attn.v.W"] + P["layers.0.attn.v.b"]
        assert np.allclose(out, v @ P["layers.0.attn.o.W"] + P["layers.0.attn.o.b"])

    def test_two_token_hand_oracle(self, rng):
        cfg = tiny()
        P = init_params(cfg, rng)
        pre = "layers.0.attn."
        x = rng.standard_normal((1, 2, 8))
        out = multi_head_attention(x, P, pre, 2)
        q, k, v = (x[0] @ P[pre + n + ".W"] + P[pre + n + ".b"] for n in "qkv")
        expect = np.zeros((2, 8))
        for head in range(2):
            s = slice(4 * head, 4 * head + 4)
            for i in range(2):
                logits = [float(q[i, s] @ k[j, s]) / 2.0 for j in range(2)]
                e = [math.exp(t - max(logits)) for t in logits]
                a = [t / sum(e) for t in e]
                expect[i, s] = a[0] * v[0, s] + a[1] * v[1, s]
        assert np.allclose(out[0], expect @ P[pre + "o.W"] + P[pre + "o.b"])


class TestModel:
    def test_shapes_and_determinism(self, rng):
        m = EViT(tiny())
        blocks, glob = inputs(rng)
        a = m.forward(blocks, glob)[0]
        assert a.shape == (3, 8)
        assert np.array_equal(a, m.forward(blocks, glob)[0])
        assert np.array_equal(a, EViT(tiny()).forward(blocks, glob)[0])

    def test_residual_identity(self, rng):
        m = EViT(tiny(L=1))
        for k in m.params:
            if k.startswith("layers.0.") and (k.endswith("o.W") or k.endswith("o.b") or "mlp.fc2" in k):
                m.params[k][...] = 0
        blocks, glob = inputs(rng)
        rep = m.forward(blocks, glob)[0]
        x = assemble_tokens(*m.prepare(blocks, glob), m.params, m.cfg)
        assert np.allclose(rep, x[:, 0])

    def test_dropout_only_in_train_mode(self, rng):
        m = EViT(tiny(dropout=0.3))
        blocks, glob = inputs(rng)
        ev = m.forward(blocks, glob)[0]
        assert np.array_equal(ev, m.forward(blocks, glob)[0])
        t1 = m.forward(blocks, glob, train=True, rng=np.random.default_rng(1))[0]
        t2 = m.forward(blocks, glob, train=True, rng=np.random.default_rng(2))[0]
        assert not np.allclose(t1, t2)
        t1b = m.forward(blocks, glob, train=True, rng=np.random.default_rng(1))[0]
        assert np.array_equal(t1, t1b)

    def test_ones_token_ignores_huffman_input(self, rng):
        m = EViT(tiny(cls_mode="ones"))
        blocks, glob = inputs(rng)
        assert np.allclose(m.forward(blocks, glob)[0], m.forward(blocks, glob * 0 + 7)[0])
        h = EViT(tiny())
        assert not np.allclose(h.forward(blocks, glob)[0], h.forward(blocks, glob * 0 + 7)[0])

    def test_block_count_mismatch(self, rng):
        blocks, glob = inputs(rng, N=6)
        with pytest.raises(ValueError, match="expects 4"):
            EViT(tiny()).forward(blocks, glob)

    def test_backward_cache_rules(self, rng):
        m = EViT(tiny())
        blocks, glob = inputs(rng)
        rep, cache = m.forward(blocks, glob)
        m.backward(cache, np.ones_like(rep))
        with pytest.raises(ValueError):
            m.backward(cache, np.ones_like(rep))
        with pytest.raises(ValueError):
            m.backward(None, np.ones_like(rep))

    @pytest.mark.parametrize("kw", [{}, {"cls_mode": "ones"}, {"head": True}, {"standardize": True}])
    def test_gradients_match_finite_differences(self, rng, kw):
        m = EViT(tiny(**kw))
        randomize(m, rng)
        blocks, glob = inputs(rng)
        if m.cfg.standardize:
            m.fit_standardization(blocks, glob)
        names = [n for n in m.params if not n.endswith("attn.k.b")]
        assert fd_check(m, blocks, glob, rng, names) < 1e-6

    def test_key_bias_gradient_is_zero(self, rng):
        # Softmax is shift invariant per query row, so the key bias never matters.
        m = EViT(tiny())
        randomize(m, rng)
        blocks, glob = inputs(rng)
        rep, cache = m.forward(blocks, glob)
        g = m.backward(cache, rng.standard_normal(rep.shape))
        assert np.abs(g["layers.0.attn.k.b"]).max() < 1e-10

    def test_dropout_gradients(self, rng):
        m = EViT(tiny(dropout=0.2))
        randomize(m, rng)
        blocks, glob = inputs(rng)
        w = rng.standard_normal((3, 8))
        rep, cache = m.forward(blocks, glob, train=True, rng=np.random.default_rng(9))
        g = m.backward(cache, w)
        name, idx = "layers.1.mlp.fc1.W", (2, 3)
        eps, vals = 1e-5, []
        for s in (1, -1):
            m.params[name][idx] += s * eps
            vals.append(np.sum(m.forward(blocks, glob, train=True, rng=np.random.default_rng(9))[0] * w))
            m.params[name][idx] -= s * eps
        assert g[name][idx] == pytest.approx((vals[0] - vals[1]) / (2 * eps), rel=1e-5, abs=1e-8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        m = EViT(tiny(dtype="float32", head=True, standardize=True))
        blocks, glob = inputs(rng)
        m.fit_standardization(blocks, glob)
        extra = {"arcface.centers": rng.standard_normal((3, 8)).astype(np.float32)}
        save_checkpoint(tmp_path / "m.evck", m, extra, {"epoch": 4})
        back, ex, meta = load_checkpoint(tmp_path / "m.evck")
        assert back.cfg == m.cfg and meta == {"epoch": 4}
        assert np.array_equal(ex["arcface.centers"], extra["arcface.centers"])
        assert np.array_equal(back.forward(blocks, glob)[0], m.forward(blocks, glob)[0])
        assert checkpoint_bytes(back, ex, meta) == checkpoint_bytes(m, extra, meta)

    def test_errors(self):
        data = checkpoint_bytes(EViT(tiny(dtype="float32")))
        for blob in (b"XXXX" + data[4:], data[:4] + b"\x07\x00" + data[6:], data[:-3], data + b"\x00"):
            with pytest.raises(CheckpointError):
                parse_checkpoint(blob)
        # same header length, but the config no longer matches the tensor shapes
        big = checkpoint_bytes(EViT(tiny(dtype="float32", D=16)))
        with pytest.raises(CheckpointError, match="shape"):
            parse_checkpoint(big.replace(b'"D": 16', b'"D": 8 '))


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(D=9, h=2)
    with pytest.raises(ValueError):
        tiny(cls_mode="cls")
    with pytest.raises(ValueError):
        tiny(n_tokens=1)
