import io

import numpy as np
import pytest
from PIL import Image

from evit.crypto import (
    KeySet,
    KeystreamCursor,
    decrypt_image,
    decrypt_jpeg,
    derive_keyset,
    encrypt_adaptive,
    encrypt_image,
    encrypt_stream,
    image_key_material,
    keystream_array,
    keystream_bits,
    parse_master_key,
    xor_coefficients,
    xor_vli,
)
from evit.jpeg import decode_jpeg, encode_jpeg, parse_jpeg, quantized_coefficients
from evit.jpeg.entropy import VliToken, stream_to_bytes, tokenize_scan


def tok(bits):
    return VliToken("ac", len(bits), bits, 3)


class TestKeys:
    def test_deterministic(self, photo, master):
        m = image_key_material(photo)
        assert derive_keyset(m, master) == derive_keyset(m, master)

    def test_avalanche(self, rng, master):
        base = rng.bytes(500)
        k0 = derive_keyset(base, master)
        for _ in range(100):
            flipped = bytearray(base)
            flipped[rng.integers(len(base))] ^= 1 << int(rng.integers(8))
            k1 = derive_keyset(bytes(flipped), master)
            assert all(a != b for a, b in zip(k0.dc + k0.ac, k1.dc + k1.ac))

    def test_domain_separation(self, rng, master):
        for _ in range(1000):
            ks = derive_keyset(rng.bytes(32), master)
            assert len(set(ks.dc + ks.ac)) == 6

    def test_errors(self, master):
        with pytest.raises(ValueError):
            derive_keyset(b"", master)
        with pytest.raises(ValueError):
            parse_master_key("abcd")
        assert parse_master_key(master.hex()) == master

    def test_dict_round_trip(self, rng):
        ks = KeySet.random(rng)
        assert KeySet.from_dict(ks.to_dict()) == ks


class TestKeystream:
    def test_zero_and_determinism(self):
        cur = KeystreamCursor(b"k" * 32)
        assert keystream_bits(cur, 0) == "" and cur.bit_offset == 0
        a, b = KeystreamCursor(b"k" * 32, bit_offset=77), KeystreamCursor(b"k" * 32, bit_offset=77)
        assert keystream_bits(a, 1000) == keystream_bits(b, 1000)
        assert a.bit_offset == 1077

    def test_sequential_equals_slice(self):
        cur = KeystreamCursor(b"z" * 32)
        pieces = "".join(keystream_bits(cur, n) for n in (3, 700, 1, 0, 555))
        whole = "".join(map(str, keystream_array(b"z" * 32, 1259)))
        assert pieces == whole

    def test_monobit(self):
        bits = keystream_array(b"m" * 32, 10**6)
        assert abs(bits.mean() - 0.5) < 0.01


class TestXor:
    def test_examples(self):
        assert xor_vli(tok("101"), "100").bits == "001"
        assert xor_vli(tok("101"), "011").bits == "110"
        assert xor_vli(tok("101"), "000").bits == "101"

    def test_involution_keeps_row(self, rng):
        t = tok("10110")
        ks = "".join(rng.choice(["0", "1"], 5))
        once = xor_vli(t, ks)
        assert once.category == t.category and once.huffman_row == t.huffman_row
        assert xor_vli(once, ks) == t

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            xor_vli(tok("101"), "10")

    def test_vectorized_equals_token_path(self, photo, rng):
        keys = KeySet.random(rng)
        coefs = quantized_coefficients(photo).coefficients
        via_tokens = stream_to_bytes(encrypt_stream(tokenize_scan(coefs), keys))
        via_values = stream_to_bytes(tokenize_scan(xor_coefficients(coefs, keys)))
        assert via_tokens == via_values

    def test_categories_preserved(self, photo, rng):
        from evit.jpeg.vli import categories

        coefs = quantized_coefficients(photo).coefficients
        enc = xor_coefficients(coefs, KeySet.random(rng))
        assert np.array_equal(categories(enc[:, :, 1:]), categories(coefs[:, :, 1:]))
        assert np.array_equal(
            categories(np.diff(enc[:, :, 0], prepend=0)), categories(np.diff(coefs[:, :, 0], prepend=0))
        )


class TestImage:
    def test_round_trip(self, scenes, rng):
        for img in scenes[:4]:
            keys = KeySet.random(rng)
            cipher = encrypt_image(img, keys)
            assert decrypt_jpeg(cipher, keys) == parse_jpeg(encode_jpeg(img))
            assert np.array_equal(decrypt_image(cipher, keys), decode_jpeg(encode_jpeg(img)))

    def test_wrong_keys_are_silent(self, photo, rng):
        cipher = encrypt_image(photo, KeySet.random(rng))
        garbage = decrypt_image(cipher, KeySet.random(rng))
        assert garbage.shape == photo.shape

    def test_structure_preserved(self, scenes, master):
        for img in scenes:
            cipher, _ = encrypt_adaptive(img, master)
            plain = encode_jpeg(img)
            assert abs(len(cipher) - len(plain)) < 0.01 * len(plain)
            Image.open(io.BytesIO(cipher)).load()

    def test_scrambles(self, scenes, master):
        from evit.evaluation import psnr

        vals = [psnr(img, decode_jpeg(encrypt_adaptive(img, master)[0])) for img in scenes]
        assert np.mean(vals) < 20
