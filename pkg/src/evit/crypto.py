"""Per-image key derivation and format-compliant VLI stream encryption.

Each (component, DC/AC) pair owns an independent keyed-BLAKE2b counter-mode
keystream, consumed in raster block order. XOR-ing a VLI field never changes
its length, so Huffman symbols, run lengths and the file layout survive
encryption; only magnitude bits change.

Decrypting with the wrong keys is not detected: the output is a valid but
scrambled image.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .jpeg.bitstream import JpegImage, parse_jpeg, serialize_jpeg
from .jpeg.codec import decode_pixels, quantized_coefficients
from .jpeg.entropy import BlockTokens, EntropyStream, VliToken
from .jpeg.transform import as_rgb
from .jpeg.vli import categories, from_raw_bits, raw_bits

KEY_BYTES = 32
COMPONENTS = ("Y", "U", "V")
_DIGEST = 64  # bytes per keystream block


def parse_master_key(value: str | bytes) -> bytes:
    """Accept 32 raw bytes or 64 hex characters."""
    if isinstance(value, str):
        try:
            value = bytes.fromhex(value.strip())
        except ValueError:
            raise ValueError("master key must be hex encoded") from None
    if len(value) != KEY_BYTES:
        raise ValueError(f"master key must be {KEY_BYTES} bytes, got {len(value)}")
    return bytes(value)


@dataclass(frozen=True)
class KeySet:
    """Six 256-bit keys: DC and AC for each of Y, U, V."""

    dc: tuple[bytes, bytes, bytes]
    ac: tuple[bytes, bytes, bytes]

    def __post_init__(self) -> None:
        for k in self.dc + self.ac:
            if len(k) != KEY_BYTES:
                raise ValueError("every key must be 32 bytes")

    def key(self, component: int, klass: str) -> bytes:
        return (self.dc if klass == "dc" else self.ac)[component]

    def to_dict(self) -> dict:
        return {
            f"k_{klass}_{name}": self.key(c, klass).hex()
            for klass in ("dc", "ac")
            for c, name in enumerate(COMPONENTS)
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeySet":
        return cls(
            dc=tuple(bytes.fromhex(d[f"k_dc_{n}"]) for n in COMPONENTS),
            ac=tuple(bytes.fromhex(d[f"k_ac_{n}"]) for n in COMPONENTS),
        )

    @classmethod
    def random(cls, rng: np.random.Generator) -> "KeySet":
        raw = rng.bytes(6 * KEY_BYTES)
        keys = [raw[i * KEY_BYTES : (i + 1) * KEY_BYTES] for i in range(6)]
        return cls(dc=tuple(keys[:3]), ac=tuple(keys[3:]))


def image_key_material(image) -> bytes:
    """Bytes hashed for adaptive keys: dimensions followed by raw RGB pixels."""
    rgb = as_rgb(image)
    return struct.pack("<II", rgb.shape[1], rgb.shape[0]) + np.ascontiguousarray(rgb).tobytes()


def derive_keyset(image_bytes: bytes, master_secret: bytes) -> KeySet:
    """Keyed BLAKE2b(master, image_bytes || tag) with a distinct tag per (class, component)."""
    if not image_bytes:
        raise ValueError("cannot derive keys from empty image bytes")
    master = parse_master_key(master_secret)
    base = hashlib.blake2b(image_bytes, key=master, digest_size=KEY_BYTES)

    def one(tag: str) -> bytes:
        h = base.copy()
        h.update(b"evit-key/" + tag.encode())
        return h.digest()

    return KeySet(
        dc=tuple(one(f"dc/{n}") for n in COMPONENTS),
        ac=tuple(one(f"ac/{n}") for n in COMPONENTS),
    )


def keystream_array(key: bytes, n_bits: int, start_bit: int = 0) -> np.ndarray:
    """Bits [start_bit, start_bit + n_bits) of the keystream, as uint8 0/1 (MSB first)."""
    if n_bits <= 0:
        return np.zeros(0, dtype=np.uint8)
    bits_per = _DIGEST * 8
    first, last = start_bit // bits_per, (start_bit + n_bits - 1) // bits_per
    blob = b"".join(
        hashlib.blake2b(struct.pack("<Q", i), key=key, digest_size=_DIGEST).digest()
        for i in range(first, last + 1)
    )
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8))
    off = start_bit - first * bits_per
    return bits[off : off + n_bits]


@dataclass
class KeystreamCursor:
    """Sequential position in one (component, class) keystream."""

    key: bytes
    component: int = 0
    klass: str = "dc"
    bit_offset: int = field(default=0)


def keystream_bits(cursor: KeystreamCursor, n: int) -> str:
    """Next ``n`` keystream bits as a '0'/'1' string; advances the cursor."""
    if n < 0:
        raise ValueError("n must be non-negative")
    bits = keystream_array(cursor.key, n, cursor.bit_offset)
    cursor.bit_offset += n
    return "".join("1" if b else "0" for b in bits)


def xor_vli(token: VliToken, ks: str) -> VliToken:
    """XOR the token's VLI bits; category and Huffman row are untouched."""
    if len(ks) != token.category:
        raise ValueError(f"keystream has {len(ks)} bits, token needs {token.category}")
    if not ks:
        return token
    out = format(int(token.bits, 2) ^ int(ks, 2), f"0{token.category}b")
    return token.with_bits(out)


def encrypt_stream(stream: EntropyStream, keys: KeySet) -> EntropyStream:
    """Token-level encryption: every DC and AC VLI field XOR-ed in block order."""
    out = EntropyStream()
    for comp in range(3):
        dc_cur = KeystreamCursor(keys.dc[comp], comp, "dc")
        ac_cur = KeystreamCursor(keys.ac[comp], comp, "ac")
        for blk in stream.components[comp]:
            dc = xor_vli(blk.dc, keystream_bits(dc_cur, blk.dc.category))
            ac = [xor_vli(t, keystream_bits(ac_cur, t.category)) for t in blk.ac]
            out.components[comp].append(BlockTokens(dc, ac))
    return out


def _take_fields(bits: np.ndarray, cats: np.ndarray) -> np.ndarray:
    """Read consecutive ``cats``-bit big-endian integers from a bit array."""
    cats = cats.astype(np.int64)
    offsets = np.cumsum(cats) - cats
    padded = np.concatenate([bits.astype(np.int64), np.zeros(11, dtype=np.int64)])
    window = np.zeros(len(cats), dtype=np.int64)
    for t in range(11):
        window = (window << 1) | padded[offsets + t]
    return window >> (11 - cats)


def _xor_values(values: np.ndarray, key: bytes) -> np.ndarray:
    cats = categories(values)
    ks = _take_fields(keystream_array(key, int(cats.sum())), cats)
    return from_raw_bits(raw_bits(values, cats) ^ ks, cats)


def xor_coefficients(coefs: np.ndarray, keys: KeySet) -> np.ndarray:
    """Apply the VLI keystream to a (3, n, 64) coefficient grid (encrypts and decrypts).

    Equivalent to :func:`encrypt_stream` on the tokens, but vectorized: a VLI
    field of category c XOR-ed with c key bits is another value of category c.
    """
    out = np.array(coefs, dtype=np.int64)
    for comp in range(3):
        dc = out[comp, :, 0]
        diffs = np.diff(dc, prepend=0)
        out[comp, :, 0] = np.cumsum(_xor_values(diffs, keys.dc[comp]))
        ac = out[comp, :, 1:]
        nz = ac != 0
        ac[nz] = _xor_values(ac[nz], keys.ac[comp])
    return out.astype(np.int32)


def encrypt_jpeg(plain: JpegImage, keys: KeySet) -> JpegImage:
    return JpegImage(
        plain.width, plain.height, plain.luma_quant, plain.chroma_quant,
        xor_coefficients(plain.coefficients, keys), plain.tables,
    )


def encrypt_image(image, keys: KeySet, quality: int = 50) -> bytes:
    """RGB image -> cipher JPEG bytes."""
    return serialize_jpeg(encrypt_jpeg(quantized_coefficients(image, quality), keys))


def encrypt_adaptive(image, master_secret: bytes, quality: int = 50) -> tuple[bytes, KeySet]:
    """Encrypt with keys derived from the image itself; returns (cipher, keys)."""
    keys = derive_keyset(image_key_material(image), master_secret)
    return encrypt_image(image, keys, quality), keys


def decrypt_jpeg(cipher: bytes, keys: KeySet) -> JpegImage:
    """Cipher bytes -> plain quantized coefficient grid."""
    return encrypt_jpeg(parse_jpeg(cipher), keys)


def decrypt_image(cipher: bytes, keys: KeySet) -> np.ndarray:
    """Cipher bytes -> decoded RGB image."""
    return decode_pixels(decrypt_jpeg(cipher, keys))


def decrypt_to_jpeg_bytes(cipher: bytes, keys: KeySet) -> bytes:
    """Cipher bytes -> the plain JPEG file the owner would have produced."""
    return serialize_jpeg(decrypt_jpeg(cipher, keys))
