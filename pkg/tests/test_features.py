import numpy as np
import pytest

from evit.crypto import KeySet, encrypt_adaptive, encrypt_image
from evit.features import (
    HUFF_DIM,
    SEQ_DIM,
    FeatureFormatError,
    FeatureSet,
    block_length_sequence,
    extract,
    global_huffman_frequency,
    read_features,
    stack_features,
    write_features,
)
from evit.jpeg import encode_jpeg, parse_jpeg
from evit.jpeg.entropy import read_stream, stream_to_bytes, tokenize_scan


def test_shapes(photo):
    fs = extract(encode_jpeg(photo))
    n = ((photo.shape[0] + 7) // 8) * ((photo.shape[1] + 7) // 8)
    assert fs.blocks.shape == (n, SEQ_DIM) and fs.blocks.dtype == np.uint8
    assert fs.global_counts.shape == (HUFF_DIM,)
    assert fs.blocks.max() <= 11


def test_key_invariance(scenes, rng, master):
    for img in scenes[:4]:
        ref = extract(encode_jpeg(img))
        for _ in range(3):
            assert extract(encrypt_image(img, KeySet.random(rng))) == ref
        assert extract(encrypt_adaptive(img, master)[0]) == ref


def test_matches_token_walk(photo):
    coefs = parse_jpeg(encode_jpeg(photo)).coefficients
    stream = read_stream(stream_to_bytes(tokenize_scan(coefs)), coefs.shape[1])
    fs = extract(encode_jpeg(photo))
    for b in (0, 7, fs.n_blocks - 1):
        toks = tuple(stream.components[c][b] for c in range(3))
        assert np.array_equal(block_length_sequence(toks), fs.blocks[b])


def test_global_counts_match_blocks(photo):
    data = encode_jpeg(photo)
    counts = global_huffman_frequency(data).reshape(3, -1)
    fs = extract(data)
    # DC rows count one token per block; AC non-zero categories agree for luma
    assert counts[0, :12].sum() == fs.n_blocks
    assert np.array_equal(np.bincount(fs.blocks[:, 0], minlength=12), counts[0, :12])


def test_file_round_trip(tmp_path, scenes):
    feats = [extract(encode_jpeg(img), f"c/{i}") for i, img in enumerate(scenes[:3])]
    path = tmp_path / "f.evft"
    write_features(path, feats)
    assert read_features(path) == feats
    write_features(path, [])
    assert read_features(path) == []


def test_file_errors(tmp_path, photo):
    path = tmp_path / "f.evft"
    write_features(path, [extract(encode_jpeg(photo), "x")])
    data = path.read_bytes()
    cases = {
        "magic": b"NOPE" + data[4:],
        "version": data[:4] + b"\x09\x00" + data[6:],
        "truncated": data[:-10],
        "trailing": data + b"\x00",
    }
    for name, blob in cases.items():
        path.write_bytes(blob)
        with pytest.raises(FeatureFormatError, match="evit extract" if name == "version" else None):
            read_features(path)


def test_stack_requires_one_size():
    a = FeatureSet("a", np.zeros((4, SEQ_DIM), np.uint8), np.zeros(HUFF_DIM, np.uint32))
    b = FeatureSet("b", np.zeros((6, SEQ_DIM), np.uint8), np.zeros(HUFF_DIM, np.uint32))
    blocks, glob = stack_features([a, a])
    assert blocks.shape == (2, 4, SEQ_DIM) and glob.shape == (2, HUFF_DIM)
    with pytest.raises(ValueError, match="block counts"):
        stack_features([a, b])
