import json

import pytest
from hypothesis import given, settings, strategies as st

from vanetsim.errors import AuthFailure, CorruptStream, KeyUnavailable
from vanetsim.integrity import (
    AuthenticatedHybridSuite, BatchContainer, NullSuite, SuiteId, compress, decompress, md5, open_sealed, seal,
)

# RFC 1321 appendix A.5 test-suite values
RFC1321 = {
    b"": "d41d8cd98f00b204e9800998ecf8427e",
    b"a": "0cc175b9c0f1b6a831c399e269772661",
    b"abc": "900150983cd24fb0d6963f7d28e17f72",
    b"message digest": "f96b697d7cb7938d525a2f31aaf161d0",
    b"12345678901234567890123456789012345678901234567890123456789012345678901234567890":
        "57edf4a22be3c955ac49da2e2107b67a",
}


def sensor_records(n=160):
    return "".join(json.dumps({"source": "Dcu", "seq": i, "t": i * 3000, "temp": 18.5, "hum": 71.0,
                               "pres": 1013.2}) + "\n" for i in range(n)).encode()


# digest of the fixture corpus; it must never change
FIXTURE_MD5 = "8f2c479cd78d8c42924a6a1ae83f4dd0"


@pytest.mark.parametrize("data", sorted(RFC1321))
def test_md5_reference_vectors(data):
    assert md5(data).hex() == RFC1321[data]
    assert len(md5(data)) == 16


def test_fixture_digest_stable():
    assert md5(sensor_records()).hex() == FIXTURE_MD5


@settings(max_examples=100)
@given(st.binary(min_size=1, max_size=256), st.data())
def test_md5_bit_flip_changes_digest(data, draw):
    i = draw.draw(st.integers(0, len(data) * 8 - 1))
    flipped = bytearray(data)
    flipped[i // 8] ^= 1 << (i % 8)
    assert md5(bytes(flipped)) != md5(data)


def test_compress_empty_roundtrip():
    assert decompress(compress(b"")) == b""


def test_compress_redundant_records():
    data = sensor_records()
    assert len(data) >= 10_000
    assert len(compress(data)) < 0.2 * len(data)


@settings(max_examples=100)
@given(st.binary(max_size=4096))
def test_compress_roundtrip_and_bound(data):
    blob = compress(data)
    assert decompress(blob) == data
    assert len(blob) <= len(data) + 6


def test_compress_large_roundtrip():
    data = bytes(range(256)) * 4096  # 1 MiB
    assert decompress(compress(data)) == data


def test_compress_deterministic():
    assert compress(sensor_records()) == compress(sensor_records())


def test_truncated_stream_rejected():
    blob = compress(sensor_records())
    for cut in (0, 3, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptStream):
            decompress(blob[:cut])
    with pytest.raises(CorruptStream):
        decompress(blob + b"\x00")
    with pytest.raises(CorruptStream):
        decompress(b"\x00" + blob[1:])


@settings(max_examples=300)
@given(st.binary(max_size=64))
def test_decompress_total(blob):
    try:
        decompress(blob)
    except CorruptStream:
        pass


def test_null_suite_is_identity_and_gated():
    s = NullSuite(test_mode=True)
    assert seal(b"abc", s) == b"abc" and open_sealed(b"abc", s) == b"abc"
    with pytest.raises(ValueError):
        NullSuite()


@settings(max_examples=30, deadline=None)
@given(st.binary(max_size=2048))
def test_hybrid_roundtrip(data):
    s = AuthenticatedHybridSuite.from_seed(b"k")
    assert open_sealed(seal(data, s.sender_view()), s) == data


def test_hybrid_rejects_modification():
    s = AuthenticatedHybridSuite.from_seed(b"k")
    ct = seal(b"payload" * 10, s)
    for i in (0, 33, 50, len(ct) - 1):
        bad = bytearray(ct)
        bad[i] ^= 0x01
        with pytest.raises(AuthFailure):
            s.open(bytes(bad))
    with pytest.raises(AuthFailure):
        s.open(ct[:20])


def test_hybrid_wrong_or_missing_key():
    s = AuthenticatedHybridSuite.from_seed(b"k")
    ct = seal(b"secret", s)
    with pytest.raises(AuthFailure):
        AuthenticatedHybridSuite.from_seed(b"other").open(ct)
    with pytest.raises(KeyUnavailable):
        s.sender_view().open(ct)
    with pytest.raises(KeyUnavailable):
        AuthenticatedHybridSuite().seal(b"x")


def test_batch_container_roundtrip_and_checks():
    c = BatchContainer(SuiteId.AUTHENTICATED_HYBRID, md5(b"x"), 7, 101, 3, b"payload")
    raw = c.to_bytes()
    assert raw[:4] == b"SFQB" and BatchContainer.from_bytes(raw) == c
    with pytest.raises(CorruptStream):
        BatchContainer.from_bytes(raw[:-1])
    with pytest.raises(CorruptStream):
        BatchContainer.from_bytes(b"XXXX" + raw[4:])
    bad_suite = bytearray(raw)
    bad_suite[5] = 9
    with pytest.raises(CorruptStream):
        BatchContainer.from_bytes(bytes(bad_suite))
