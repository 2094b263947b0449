"""``evit`` command line: encrypt, decrypt, extract, split, train-unsup, train-sup,
index, search, eval-map, eval-crypto.

Exit codes: 0 success, 2 validation error, 3 IO or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from ._io import atomic_write
from .crypto import KeySet, decrypt_image, decrypt_to_jpeg_bytes, encrypt_adaptive, parse_master_key
from .evaluation import crypto_report, differential_attack_trial, map_at_k
from .features import FeatureFormatError, extract, read_features, stack_features, write_features
from .jpeg import JpegFormatError, decode_jpeg
from .model import CheckpointError, EViT, ModelConfig, load_checkpoint
from .store import (
    DatasetManifest,
    Encoder,
    FingerprintMismatch,
    IndexFormatError,
    RetrievalIndex,
    build_index,
    build_manifest,
    image_id,
    list_images,
    search,
)
from .training import TrainConfig, fine_tune_supervised, train_unsupervised

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3
MASTER_KEY_ENV = "EVIT_MASTER_KEY"
log = logging.getLogger("evit")


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------- config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    """JSON object, or ``section.key=value`` lines (``#`` comments allowed).

    Sections: ``model``, ``train``, ``augment``.
    """
    if path is None:
        return {}
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    cfg: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        cfg.setdefault(section or "train", {})[name] = _parse_value(value)
    return cfg


def train_config(cfg: dict, seed: int | None) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    if "augment" in cfg:
        d["augment"] = cfg["augment"]
    if seed is not None:
        d["seed"] = seed
    return TrainConfig.from_dict(d)


def master_key(args) -> bytes:
    value = args.master_key or os.environ.get(MASTER_KEY_ENV)
    if not value:
        raise UsageError(f"no master key: pass --master-key or set {MASTER_KEY_ENV}")
    return parse_master_key(value)


def load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# ----------------------------------------------------------------- verbs


def _encrypt_one(job):
    src, dst, master, quality = job
    cipher, keys = encrypt_adaptive(load_rgb(src), master, quality)
    atomic_write(dst, cipher)
    return keys.to_dict()


def cmd_encrypt(args) -> int:
    src_root, out_root = Path(args.inp), Path(args.out)
    master = master_key(args)
    files = list_images(src_root)
    if not files:
        raise UsageError(f"no images under {src_root}")
    jobs = [(p, out_root / (image_id(p, src_root) + ".jpg"), master, args.quality) for p in files]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            keys = list(pool.map(_encrypt_one, jobs, chunksize=16))
    else:
        keys = [_encrypt_one(j) for j in jobs]
    sidecar = Path(args.keys_out) if args.keys_out else out_root / "keys.json"
    atomic_write(sidecar, json.dumps({image_id(p, src_root): k for p, k in zip(files, keys)}, indent=1).encode())
    os.chmod(sidecar, 0o600)
    print(f"encrypted {len(files)} images -> {out_root} (keys: {sidecar})")
    return EXIT_OK


def cmd_decrypt(args) -> int:
    src_root, out_root = Path(args.inp), Path(args.out)
    keys = json.loads(Path(args.keys).read_text())
    n = 0
    for p in list_images(src_root):
        ident = image_id(p, src_root)
        if ident not in keys:
            raise UsageError(f"no keys for {ident} in {args.keys}")
        ks = KeySet.from_dict(keys[ident])
        if args.format == "png":
            dst = out_root / (ident + ".png")
            dst.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(decrypt_image(p.read_bytes(), ks)).save(dst)
        else:
            atomic_write(out_root / (ident + ".jpg"), decrypt_to_jpeg_bytes(p.read_bytes(), ks))
        n += 1
    print(f"decrypted {n} images -> {out_root}")
    return EXIT_OK


def _extract_one(job):
    path, ident = job
    return extract(Path(path).read_bytes(), ident)


def cmd_extract(args) -> int:
    root = Path(args.inp)
    jobs = [(p, image_id(p, root)) for p in list_images(root)]
    if not jobs:
        raise UsageError(f"no cipher-images under {root}")
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            feats = list(pool.map(_extract_one, jobs, chunksize=16))
    else:
        feats = [_extract_one(j) for j in jobs]
    write_features(args.out, feats)
    print(f"extracted {len(feats)} feature sets -> {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    seed = args.seed if args.seed is not None else 0
    man = build_manifest(args.inp, args.mode, args.fraction, seed)
    man.save(args.out)
    print(f"{len(man.subset('train'))} train / {len(man.subset('test'))} test -> {args.out}")
    return EXIT_OK


def _select(features, manifest: DatasetManifest | None, split: str | None):
    if manifest is None or split is None:
        return features, None
    wanted = {e.id: e.label for e in manifest.subset(split)}
    chosen = [fs for fs in features if fs.image_id in wanted]
    if not chosen:
        raise UsageError(f"no feature sets match the {split!r} split of the manifest")
    return chosen, [wanted[fs.image_id] for fs in chosen]


def cmd_train_unsup(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg, args.seed)
    manifest = DatasetManifest.load(args.manifest) if args.manifest else None
    feats, _ = _select(read_features(args.features), manifest, args.split if manifest else None)
    blocks, glob = stack_features(feats)
    mc = ModelConfig.from_dict({"n_tokens": blocks.shape[1] + 1, "seed": tc.seed, **cfg.get("model", {})})
    _, hist = train_unsupervised(blocks, glob, tc, model_cfg=mc, out_dir=args.out, epochs=args.epochs)
    print(f"unsupervised: {len(hist.epoch_loss)} epochs, loss {hist.epoch_loss[0]:.4f} -> {hist.epoch_loss[-1]:.4f}")
    return EXIT_OK


def cmd_train_sup(args) -> int:
    cfg = load_config(args.config)
    tc = train_config(cfg, args.seed)
    manifest = DatasetManifest.load(args.manifest)
    feats, names = _select(read_features(args.features), manifest, "train")
    classes = sorted(set(names))
    labels = np.array([classes.index(n) for n in names])
    blocks, glob = stack_features(feats)
    if args.init:
        init, _, _ = load_checkpoint(args.init)
    else:
        init = EViT(ModelConfig.from_dict({"n_tokens": blocks.shape[1] + 1, "seed": tc.seed, **cfg.get("model", {})}))
    _, head, hist = fine_tune_supervised(blocks, glob, labels, init, tc, out_dir=args.out, epochs=args.epochs)
    atomic_write(Path(args.out) / "classes.json", json.dumps(classes).encode())
    print(f"supervised: {len(hist.epoch_loss)} epochs, loss {hist.epoch_loss[0]:.4f} -> {hist.epoch_loss[-1]:.4f}")
    return EXIT_OK


def cmd_index(args) -> int:
    enc = Encoder.load(args.checkpoint)
    if args.features:
        feats = read_features(args.features)
    else:
        root = Path(args.inp)
        feats = [extract(p.read_bytes(), image_id(p, root)) for p in list_images(root)]
    if not feats:
        raise UsageError("nothing to index")
    index = build_index(feats, enc)
    index.save(args.out)
    print(f"indexed {len(index.ids)} images (D={index.vectors.shape[1]}) -> {args.out}")
    return EXIT_OK


def cmd_search(args) -> int:
    index = RetrievalIndex.load(args.index)
    enc = Encoder.load(args.checkpoint)
    query = Path(args.query)
    ranked, timings = search(query.read_bytes(), index, enc, args.k, args.query_id)
    print(json.dumps({"query": str(query), "results": ranked.items, "timings": timings}, indent=1))
    return EXIT_OK


def cmd_eval_map(args) -> int:
    index = RetrievalIndex.load(args.index)
    labels_by_id = DatasetManifest.load(args.manifest).labels_by_id()
    rows = [i for i, ident in enumerate(index.ids) if ident in labels_by_id]
    if len(rows) < 2:
        raise UsageError("fewer than two indexed images appear in the manifest")
    ids = [index.ids[i] for i in rows]
    m, aps = map_at_k(index.vectors[rows], [labels_by_id[i] for i in ids], args.k, ids)
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", "label", f"ap@{args.k}"])
            for ident, ap in zip(ids, aps):
                w.writerow([ident, labels_by_id[ident], f"{ap:.6f}"])
    summary = {"k": args.k, "queries": len(ids), "map": m}
    if args.json:
        atomic_write(args.json, json.dumps(summary, indent=1).encode())
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval_crypto(args) -> int:
    plain_root, cipher_root = Path(args.plain), Path(args.cipher)
    ciphers = {image_id(p, cipher_root): p for p in list_images(cipher_root)}
    plains, decoded, ids = [], [], []
    for p in list_images(plain_root):
        ident = image_id(p, plain_root)
        if ident in ciphers:
            plains.append(load_rgb(p))
            decoded.append(decode_jpeg(ciphers[ident].read_bytes()))
            ids.append(ident)
    if not ids:
        raise UsageError("no plain/cipher pairs share an id")
    trials = None
    if args.trials:
        master = master_key(args)
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        trials = [differential_attack_trial(plains[i % len(plains)], master, rng, args.quality) for i in range(args.trials)]
    report = crypto_report(plains, decoded, trials)
    out = {"images": ids, **report.to_dict()}
    text = json.dumps(out, indent=1)
    if args.out:
        atomic_write(args.out, text.encode())
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON or section.key=value file")
    common.add_argument("--master-key", default=None, help=f"64 hex chars (or set {MASTER_KEY_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="evit", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("encrypt", parents=[common], help="plain images -> cipher JPEGs + key sidecar")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quality", type=int, default=50)
    s.add_argument("--keys-out", default=None, help="default: <out>/keys.json")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_encrypt)

    s = sub.add_parser("decrypt", parents=[common], help="cipher JPEGs -> plain JPEGs (or PNG)")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--keys", required=True)
    s.add_argument("--format", choices=("jpeg", "png"), default="jpeg")
    s.set_defaults(func=cmd_decrypt)

    s = sub.add_parser("extract", parents=[common], help="cipher JPEGs -> feature file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("split", parents=[common], help="class folders -> train/test manifest")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("closed_set", "open_set"), default="closed_set")
    s.add_argument("--fraction", type=float, default=0.7)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-unsup", parents=[common], help="momentum-contrast pre-training")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest", default=None)
    s.add_argument("--split", default="train")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_train_unsup)

    s = sub.add_parser("train-sup", parents=[common], help="ArcFace fine-tuning")
    s.add_argument("--features", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", default=None, help="unsupervised checkpoint")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_train_sup)

    s = sub.add_parser("index", parents=[common], help="encode images into a retrieval index")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="inp")
    src.add_argument("--features")
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("search", parents=[common], help="rank the index against one cipher query")
    s.add_argument("--query", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--query-id", default=None, help="exclude this id from the results")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval-map", parents=[common], help="mAP@K of an index against manifest labels")
    s.add_argument("--index", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--csv", default=None)
    s.add_argument("--json", default=None)
    s.set_defaults(func=cmd_eval_map)

    s = sub.add_parser("eval-crypto", parents=[common], help="PSNR / histogram / NPCR / UACI report")
    s.add_argument("--plain", required=True)
    s.add_argument("--cipher", required=True)
    s.add_argument("--trials", type=int, default=0, help="one-pixel differential trials (needs a master key)")
    s.add_argument("--quality", type=int, default=50)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval_crypto)
    return p


IO_ERRORS = (OSError, JpegFormatError, FeatureFormatError, CheckpointError, IndexFormatError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except IO_ERRORS as exc:
        print(f"evit {args.verb}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, FingerprintMismatch) as exc:
        print(f"evit {args.verb}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
