"""Compression, digest and encryption seams used by the store-and-forward pipeline.

MD5 is used only as a transfer-integrity checksum, matching the deployed
system. It offers no protection against deliberate tampering. The
``AuthenticatedHybrid`` suite (X25519 + HKDF-SHA256 + ChaCha20-Poly1305)
is what makes modification detectable. Byte layouts are in
docs/batch-container.md.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import zlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthFailure, CorruptStream, KeyUnavailable

# -- compression ------------------------------------------------------------

_Z_MAGIC = 0xC5
_Z_STORED, _Z_DEFLATE = 0, 1
_Z_HEAD = struct.Struct(">BBI")  # magic, method, original length


def compress(data: bytes) -> bytes:
    """Deterministic deflate; falls back to stored so growth is at most 6 bytes."""
    data = bytes(data)
    packed = zlib.compress(data, 9)
    if len(packed) < len(data):
        return _Z_HEAD.pack(_Z_MAGIC, _Z_DEFLATE, len(data)) + packed
    return _Z_HEAD.pack(_Z_MAGIC, _Z_STORED, len(data)) + data


def decompress(blob: bytes) -> bytes:
    blob = bytes(blob)
    if len(blob) < _Z_HEAD.size:
        raise CorruptStream("compressed container shorter than its header")
    magic, method, size = _Z_HEAD.unpack(blob[: _Z_HEAD.size])
    body = blob[_Z_HEAD.size:]
    if magic != _Z_MAGIC:
        raise CorruptStream(f"bad container magic 0x{magic:02x}")
    if method == _Z_STORED:
        out = body
    elif method == _Z_DEFLATE:
        d = zlib.decompressobj()
        try:
            out = d.decompress(body, size + 1)
        except zlib.error as exc:
            raise CorruptStream(str(exc)) from None
        if not d.eof or d.unused_data or d.unconsumed_tail:
            raise CorruptStream("deflate stream truncated or followed by garbage")
    else:
        raise CorruptStream(f"unknown compression method {method}")
    if len(out) != size:
        raise CorruptStream(f"expected {size} bytes, got {len(out)}")
    return out


# -- digest -----------------------------------------------------------------

def md5(data: bytes) -> bytes:
    """16-byte MD5 digest (integrity check only)."""
    return hashlib.md5(bytes(data), usedforsecurity=False).digest()


# -- cipher suites ----------------------------------------------------------

class SuiteId(enum.IntEnum):
    NULL = 0
    AUTHENTICATED_HYBRID = 1


class NullSuite:
    """Identity cipher. Only constructible in test/simulation mode."""

    suite_id = SuiteId.NULL
    name = "Null"

    def __init__(self, test_mode: bool = False):
        if not test_mode:
            raise ValueError("the Null cipher suite is only available in test/simulation mode")

    def seal(self, data: bytes) -> bytes:
        return bytes(data)

    def open(self, data: bytes) -> bytes:
        return bytes(data)


_HKDF_INFO = b"vanetsim batch v1"


class AuthenticatedHybridSuite:
    """Ephemeral-static X25519 key agreement, HKDF-SHA256, ChaCha20-Poly1305.

    A sender only needs the recipient public key; a receiver needs the
    private key. Ciphertext layout: ``ephemeral_pub(32) | nonce(12) | aead``.
    """

    suite_id = SuiteId.AUTHENTICATED_HYBRID
    name = "AuthenticatedHybrid"

    def __init__(self, public_key: X25519PublicKey | None = None,
                 private_key: X25519PrivateKey | None = None):
        if public_key is None and private_key is not None:
            public_key = private_key.public_key()
        self.public_key = public_key
        self.private_key = private_key

    @classmethod
    def generate(cls) -> "AuthenticatedHybridSuite":
        return cls(private_key=X25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, seed: bytes) -> "AuthenticatedHybridSuite":
        """Deterministic key pair for reproducible simulations."""
        raw = hashlib.sha256(b"x25519 key:" + seed).digest()
        return cls(private_key=X25519PrivateKey.from_private_bytes(raw))

    def sender_view(self) -> "AuthenticatedHybridSuite":
        return AuthenticatedHybridSuite(public_key=self.public_key)

    @staticmethod
    def _key(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
        return HKDF(hashes.SHA256(), 32, salt=eph_pub + recipient_pub, info=_HKDF_INFO).derive(shared)

    def seal(self, data: bytes) -> bytes:
        if self.public_key is None:
            raise KeyUnavailable("recipient public key not loaded")
        eph = X25519PrivateKey.generate()
        eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        rec_pub = self.public_key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        key = self._key(eph.exchange(self.public_key), eph_pub, rec_pub)
        nonce = os.urandom(12)
        return eph_pub + nonce + ChaCha20Poly1305(key).encrypt(nonce, bytes(data), eph_pub)

    def open(self, data: bytes) -> bytes:
        if self.private_key is None:
            raise KeyUnavailable("recipient private key not loaded")
        data = bytes(data)
        if len(data) < 32 + 12 + 16:
            raise AuthFailure("ciphertext too short")
        eph_pub, nonce, body = data[:32], data[32:44], data[44:]
        rec_pub = self.private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        try:
            shared = self.private_key.exchange(X25519PublicKey.from_public_bytes(eph_pub))
            key = self._key(shared, eph_pub, rec_pub)
            return ChaCha20Poly1305(key).decrypt(nonce, body, eph_pub)
        except (InvalidTag, ValueError):
            raise AuthFailure("ciphertext failed authentication") from None


CipherSuite = NullSuite | AuthenticatedHybridSuite


def seal(data: bytes, suite: CipherSuite) -> bytes:
    return suite.seal(data)


def open_sealed(data: bytes, suite: CipherSuite) -> bytes:
    return suite.open(data)


# -- batch container ----------------------------------------------------------

BATCH_MAGIC = b"SFQB"
BATCH_VERSION = 1
_BATCH_HEAD = struct.Struct(">4sBB16sQIII")  # magic, version, suite, digest, batch id, origin, count, len


@dataclass(frozen=True)
class BatchContainer:
    suite_id: SuiteId
    digest: bytes
    batch_id: int
    origin: int
    count: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return _BATCH_HEAD.pack(BATCH_MAGIC, BATCH_VERSION, int(self.suite_id), self.digest,
                                self.batch_id, self.origin, self.count, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BatchContainer":
        raw = bytes(raw)
        if len(raw) < _BATCH_HEAD.size:
            raise CorruptStream("batch container shorter than its header")
        magic, version, suite, digest, batch_id, origin, count, n = _BATCH_HEAD.unpack(raw[: _BATCH_HEAD.size])
        if magic != BATCH_MAGIC or version != BATCH_VERSION:
            raise CorruptStream("not a version-1 batch container")
        try:
            suite_id = SuiteId(suite)
        except ValueError:
            raise CorruptStream(f"unknown cipher suite id {suite}") from None
        payload = raw[_BATCH_HEAD.size:]
        if len(payload) != n:
            raise CorruptStream(f"payload length {len(payload)} != declared {n}")
        return cls(suite_id, digest, batch_id, origin, count, payload)
