"""Acceptance checks. Each test prints one ``PASS``/``FAIL`` line with its measurement."""

import io
import time
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from corpus import random_images, scene_corpus
from evit.augment import AugmentConfig, augment_batch
from evit.crypto import decrypt_jpeg, encrypt_adaptive
from evit.evaluation import differential_attack_trial, map_at_k, psnr, psnr_luma, rank_by_cosine
from evit.features import extract, stack_features
from evit.jpeg import decode_jpeg, encode_jpeg, entropy_code_block, parse_jpeg, vli_decode, vli_encode, zigzag_scan
from evit.model import EViT, ModelConfig
from evit.store import Encoder, RetrievalIndex, build_manifest, search
from evit.synth import CLASSES, texture_corpus
from evit.training import (
    TrainConfig,
    arcface_loss,
    fine_tune_supervised,
    info_nce_batch,
    l2_normalize,
    l2_normalize_backward,
    train_unsupervised,
)


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return report


def masters(n, seed):
    rng = np.random.default_rng(seed)
    return [rng.bytes(32) for _ in range(n)]


def test_key_invariance(verdict):
    t0 = time.perf_counter()
    images = random_images(50, seed=100)
    mismatches = 0
    for i, img in enumerate(images):
        feats = [extract(encrypt_adaptive(img, m)[0], str(i)) for m in masters(5, seed=i)]
        mismatches += sum(f != feats[0] for f in feats[1:])
    secs = time.perf_counter() - t0
    verdict("key invariance", mismatches == 0 and secs < 60,
            f"{mismatches} mismatching feature sets over 50 images x 5 keys in {secs:.1f}s")


def test_format_compliance(verdict):
    t0 = time.perf_counter()
    failures = 0
    for img, m in zip(random_images(100, seed=200), masters(100, seed=1)):
        cipher, _ = encrypt_adaptive(img, m)
        try:
            with Image.open(io.BytesIO(cipher)) as im:
                im.load()
                failures += im.size != (img.shape[1], img.shape[0])
        except Exception:
            failures += 1
    secs = time.perf_counter() - t0
    verdict("format compliance", failures == 0 and secs < 60,
            f"{100 - failures}/100 cipher-JPEGs decoded by Pillow in {secs:.1f}s")


def test_lossless_round_trip(verdict):
    bad = 0
    for img, m in zip(random_images(100, seed=300), masters(100, seed=2)):
        cipher, keys = encrypt_adaptive(img, m)
        plain = parse_jpeg(encode_jpeg(img))
        bad += not np.array_equal(decrypt_jpeg(cipher, keys).coefficients, plain.coefficients)
    verdict("lossless round trip", bad == 0, f"{100 - bad}/100 images recover the plain coefficients exactly")


def test_codec_self_consistency(verdict):
    rng = np.random.default_rng(400)
    block_errors, prev = 0, 0
    for n in range(10_000):
        zz = np.zeros(64, np.int32)
        mask = rng.random(63) < rng.uniform(0.02, 0.9)
        cats = rng.integers(1, 11, 63)
        mags = rng.integers(1 << (cats - 1), 1 << cats)
        zz[1:] = np.where(mask, mags * rng.choice([-1, 1], 63), 0)
        zz[0] = int(np.clip(prev + rng.integers(-2047, 2048), -2047, 2047))
        comp = n % 2
        bits = entropy_code_block(zz, prev, direction="encode", component=comp)
        out, dc = entropy_code_block(bits, prev, direction="decode", component=comp)
        block_errors += not (np.array_equal(out, zz) and dc == zz[0])
        prev = int(zz[0])
    zig_errors = sum(
        not np.array_equal(zigzag_scan(zigzag_scan(b), "inverse"), b) for b in rng.integers(-2047, 2048, (1000, 8, 8))
    )
    vli_errors = sum(vli_decode(*vli_encode(v)) != v for v in range(-2047, 2048))
    ok = block_errors == zig_errors == vli_errors == 0
    verdict("codec self-consistency", ok,
            f"{block_errors} block, {zig_errors} zig-zag, {vli_errors} VLI errors (10^4 blocks, 4095 values)")


# ----------------------------------------------------------------- gradients

GRAD_FLOOR = 1e-3  # fraction of the largest gradient entry below which errors count as absolute


def _grad_setup():
    rng = np.random.default_rng(500)
    cfg = ModelConfig(n_tokens=5, L=2, D=8, h=2, mlp_ratio=2, d_h=8, dropout=0.0, dtype="float64", seed=1)
    model = EViT(cfg)
    for k, v in model.params.items():
        w = rng.standard_normal(v.shape) * 0.3 + (1.0 if k.endswith(".g") else 0.0)
        model.params[k] = w.astype(np.float32).astype(np.float64)  # exactly representable in both precisions
    key = model.copy()
    for v in key.params.values():
        v += (rng.standard_normal(v.shape) * 0.05).astype(np.float32)
    v1 = rng.integers(0, 12, (3, 4, 128)).astype(np.float64)
    data = {
        "v1": v1, "v2": v1[:, ::-1].copy(), "glob": rng.integers(0, 30, (3, 522)).astype(np.float64),
        "queue": l2_normalize(rng.standard_normal((6, 8))).astype(np.float32).astype(np.float64),
        "labels": np.array([0, 1, 0]),
        "centers": rng.standard_normal((2, 8)).astype(np.float32).astype(np.float64),
    }
    return model, key, data


def _info_nce(model, key, d):
    q_raw, cache = model.forward(d["v1"], d["glob"])
    k = l2_normalize(key.forward(d["v2"], d["glob"])[0])
    q = l2_normalize(q_raw)
    loss, dq, _ = info_nce_batch(q, k.astype(q.dtype), d["queue"].astype(q.dtype), 0.1)
    return loss, lambda: model.backward(cache, l2_normalize_backward(dq, q_raw))


def _arcface(model, centers, d):
    rep, cache = model.forward(d["v1"], d["glob"])
    h = l2_normalize(rep)
    loss, dh, dc = arcface_loss(h, d["labels"], centers.astype(h.dtype), 8.0, 0.1)
    return loss, lambda: {**model.backward(cache, l2_normalize_backward(dh, rep)), "arcface.centers": dc}


def _numeric(f, params, eps=1e-5):
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = f()
            p[idx] = old - eps
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def _worst(analytic, numeric):
    scale = max(np.abs(g).max() for g in numeric.values())
    worst, where = 0.0, ""
    for name, n in numeric.items():
        a = analytic[name].astype(np.float64)
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR * scale)
        if err.max() > worst:
            worst, where = float(err.max()), name
    return worst, where


def test_gradient_correctness(verdict):
    model, key, d = _grad_setup()
    t0 = time.perf_counter()
    ref_nce = _numeric(lambda: _info_nce(model, key, d)[0], model.params)
    centers = d["centers"].copy()
    ref_arc = _numeric(lambda: _arcface(model, centers, d)[0], {**model.params, "arcface.centers": centers})
    results = {}
    for dtype, tol in (("float64", 1e-6), ("float32", 1e-3)):
        m, k = model.astype(dtype), key.astype(dtype)
        results[("InfoNCE", dtype)] = (_worst(_info_nce(m, k, d)[1](), ref_nce), tol)
        results[("ArcFace", dtype)] = (_worst(_arcface(m, d["centers"], d)[1](), ref_arc), tol)
    secs = time.perf_counter() - t0
    ok = all(err < tol for (err, _), tol in results.values())
    detail = ", ".join(f"{loss}/{dt} {err:.1e} ({where})" for (loss, dt), ((err, where), _) in results.items())
    verdict("gradient correctness", ok, f"max relative error {detail}; {secs:.0f}s")


# ----------------------------------------------------------------- metrics


def _brute_ap(ranked_labels, label, k):
    hits, total = 0, 0.0
    for i, lab in enumerate(ranked_labels[:k], start=1):
        if lab == label:
            hits += 1
            total += hits / i
    return total / hits if hits else 0.0


def test_metric_oracles(verdict):
    rng = np.random.default_rng(600)
    vecs = l2_normalize(rng.standard_normal((20, 6)))
    labels = np.repeat(np.arange(4), 5)
    map_mismatch = 0
    for k in (1, 3, 5, 10, 19, 100):
        got, _ = map_at_k(vecs, labels, k)
        expect = []
        for q in range(20):
            others = sorted((i for i in range(20) if i != q), key=lambda i: (-float(vecs[i] @ vecs[q]), i))
            expect.append(_brute_ap(labels[others].tolist(), labels[q], k))
        map_mismatch += got != float(np.mean(expect))
    big = l2_normalize(rng.standard_normal((1000, 32)))
    ids = [f"v{i:04d}" for i in range(1000)]
    rank_mismatch = 0
    for q in rng.integers(0, 1000, 25):
        res = rank_by_cosine(big[q], big, ids, 50)
        scores = big @ big[q]
        scan = sorted(range(1000), key=lambda i: (-scores[i], ids[i]))[:50]
        rank_mismatch += res.items != [(ids[i], float(scores[i])) for i in scan]
    verdict("metric oracles", map_mismatch == rank_mismatch == 0,
            f"{map_mismatch} mAP@K mismatches (6 K values), {rank_mismatch}/25 ranking mismatches on 1000 vectors")


# ----------------------------------------------------------------- security


def test_encryption_security(verdict):
    t0 = time.perf_counter()
    images = scene_corpus(24, seed=0)
    master = bytes(range(32))
    decoded = [decode_jpeg(encrypt_adaptive(img, master)[0]) for img in images]
    p_rgb = float(np.mean([psnr(a, b) for a, b in zip(images, decoded)]))
    p_luma = float(np.mean([psnr_luma(a, b) for a, b in zip(images, decoded)]))
    rng = np.random.default_rng(0)
    trials = np.array([differential_attack_trial(img, master, rng) for img in images])
    n, u = trials.mean(axis=0)
    secs = time.perf_counter() - t0
    ok = p_rgb < 20 and p_luma < 20 and n > 90 and 40 <= u <= 55 and secs < 300
    verdict("encryption security", ok,
            f"24 images: PSNR {p_rgb:.2f} dB (luma {p_luma:.2f} dB), NPCR {n:.2f}%, UACI {u:.2f}% in {secs:.0f}s")


# ----------------------------------------------------------------- training

DESK_MODEL = dict(L=2, D=64, h=4, d_h=128, dropout=0.1)
DESK_TRAIN = dict(queue_size=140, batch_size=14, lr_peak=0.05, warmup_epochs=5, total_epochs=50)
DESK_SUP = dict(lr_peak=0.01, warmup_epochs=2, sup_epochs=15, sup_batch_size=35)


def test_training_sanity(verdict, tmp_path):
    t0 = time.perf_counter()
    images, labels = texture_corpus(100, seed=0)
    for i, (img, lab) in enumerate(zip(images, labels)):
        d = tmp_path / CLASSES[lab]
        d.mkdir(exist_ok=True)
        Image.fromarray(img).save(d / f"{i:03d}.png")
    manifest = build_manifest(tmp_path, "closed_set", 0.7, seed=0)
    master = bytes(range(32))
    feats, label_of = {}, {}
    for e in manifest.entries:
        with Image.open(tmp_path / e.path) as im:
            feats[e.id] = extract(encrypt_adaptive(np.asarray(im.convert("RGB")), master)[0], e.id)
        label_of[e.id] = CLASSES.index(e.label)
    train_ids = [e.id for e in manifest.subset("train")]
    test_ids = [e.id for e in manifest.subset("test")]
    tb, tg = stack_features([feats[i] for i in train_ids])
    mcfg = ModelConfig(n_tokens=tb.shape[1] + 1, **DESK_MODEL)
    model, hist = train_unsupervised(tb, tg, TrainConfig(**DESK_TRAIN), model_cfg=mcfg)
    drop = 1.0 - hist.epoch_loss[-1] / hist.epoch_loss[0]
    sup, _, _ = fine_tune_supervised(tb, tg, np.array([label_of[i] for i in train_ids]), model,
                                     TrainConfig(**DESK_SUP))
    xb, xg = stack_features([feats[i] for i in test_ids])
    m10, _ = map_at_k(l2_normalize(sup.embed(xb, xg)), [label_of[i] for i in test_ids], 10)
    mins = (time.perf_counter() - t0) / 60
    verdict("training sanity", drop >= 0.30 and m10 >= 0.8 and mins < 30,
            f"unsupervised loss {hist.epoch_loss[0]:.3f} -> {hist.epoch_loss[-1]:.3f} ({100 * drop:.0f}% drop, "
            f"50 epochs); ArcFace mAP@10 {m10:.3f} on {len(test_ids)} held-out images; {mins:.1f} min")


def test_ablation_hooks(verdict):
    rng = np.random.default_rng(700)
    blocks = rng.integers(0, 12, (6, 16, 128)).astype(np.float32)
    glob = rng.integers(0, 40, (6, 522)).astype(np.float32)
    cfg = ModelConfig(n_tokens=17, L=2, D=16, h=2, d_h=16, dropout=0.0)
    base = EViT(cfg)
    ones = EViT(replace(cfg, cls_mode="ones"), dict(base.params))
    changed = float(np.abs(base.embed(blocks, glob) - ones.embed(blocks, glob)).max())
    aug = AugmentConfig(n_swaps=0, p_splice=0.0)
    v1, v2 = augment_batch(blocks, aug, rng), augment_batch(blocks, aug, rng)
    key = base.copy()
    q = base.forward(v1, glob, train=True, rng=rng)[0]
    k = key.forward(v2, glob, train=True, rng=rng)[0]
    same = np.array_equal(v1, v2) and np.array_equal(q, k)
    verdict("ablation hooks", changed > 1e-3 and same,
            f"all-ones token moves representations by up to {changed:.3f}; "
            f"views identical without augmentation or dropout: {same}")


def test_search_latency(verdict):
    rng = np.random.default_rng(800)
    img = scene_corpus(9, seed=0)[8]  # 128x192
    cipher, _ = encrypt_adaptive(img, bytes(range(32)))
    n_blocks = extract(cipher).n_blocks
    enc = Encoder.from_model(EViT(ModelConfig(n_tokens=n_blocks + 1, **DESK_MODEL)))
    ids = [f"img{i:05d}" for i in range(10_000)]
    index = RetrievalIndex(ids, l2_normalize(rng.standard_normal((10_000, 64))), enc.fingerprint)
    search(cipher, index, enc, k=10)  # warm caches
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        res, parts = search(cipher, index, enc, k=10)
        times.append(time.perf_counter() - t0)
    worst = max(times)
    verdict("search latency", worst < 1.0 and len(res.ids) == 10,
            f"10k-vector index, worst of 5 queries {worst * 1000:.0f} ms "
            f"(extract {parts['extract_s'] * 1000:.0f}, forward {parts['forward_s'] * 1000:.0f}, "
            f"rank {parts['rank_s'] * 1000:.0f} ms)")
