import pytest
from hypothesis import given, settings, strategies as st

from vanetsim.errors import CryptoFailure, DecryptFailure, IntegrityFailure, InvariantViolation
from vanetsim.geo import GeoPosition
from vanetsim.integrity import AuthenticatedHybridSuite, BatchContainer, NullSuite, md5
from vanetsim.pipeline import (
    LORA_FRAME, Ack, CloudSink, DataPoint, Dcu, Delivered, Environment, Event, GpsFix, IntegrityRetry, LinkFault,
    LoraRedundancy, NoPoA, PersistentQueue, RsuIngest, RsuLink, SeqCounter, SimulatedCrash, Source, build_batch,
    decode_lora_frame, dcu_tick, encode_lora_frame, flush_to_rsu, lora_airtime, to_payload,
)
from vanetsim.radio import LORA_CUSTOM, RadioTech

SUITE = AuthenticatedHybridSuite.from_seed(b"pipeline-tests")


def env_point(seq, t=0, temp=20.0, hum=50.0, pres=1013.0):
    return DataPoint(Source.DCU, Environment(temp, hum, pres), seq, t)


def fill(queue, n, start=1):
    for i in range(start, start + n):
        queue.enqueue(env_point(i, t=i * 3000))


def make_link(faults=lambda a: LinkFault.NONE, suite=SUITE, tech=RadioTech.ITS_G5):
    sink = CloudSink()
    return RsuLink(RsuIngest(suite, sink), tech, faults), sink


# -- DCU ------------------------------------------------------------------------

def test_dcu_cadence():
    d = Dcu(lambda now: (20.0, 50.0, 1013.0))
    assert dcu_tick(d, 0) is not None
    assert dcu_tick(d, 1000) is None
    assert dcu_tick(d, 2999) is None
    assert dcu_tick(d, 3000).seq == 2


def test_dcu_three_ticks_three_points():
    d = Dcu(lambda now: (20.0, 50.0, 1013.0))
    assert [d.tick(t).seq for t in (0, 3000, 6000)] == [1, 2, 3]


def test_dcu_clamps_humidity():
    dp = Dcu(lambda now: (20.0, 140.0, 1013.0)).tick(0)
    assert dp.kind.humidity == 100.0 and dp.quality == "clamped"
    dp = Dcu(lambda now: (20.0, -3.0, 1013.0)).tick(0)
    assert dp.kind.humidity == 0.0 and dp.quality == "clamped"


def test_dcu_rejects_bad_cadence():
    with pytest.raises(InvariantViolation):
        Dcu(lambda now: (0, 0, 0), cadence_s=0)


def test_environment_humidity_invariant():
    with pytest.raises(InvariantViolation):
        Environment(20.0, 101.0, 1000.0)


def test_seq_counter_per_source():
    c = SeqCounter()
    assert [c.next(Source.DCU), c.next(Source.DCU), c.next(Source.OBU_GPS)] == [1, 2, 1]


@pytest.mark.parametrize("kind", [Environment(1.5, 2.0, 3.0), GpsFix(40.6, -8.6, 12.0, 90.0), Event(7, "door")])
def test_datapoint_json_roundtrip(kind):
    dp = DataPoint(Source.OBU_EVENT_LOG, kind, 9, 1234, "ok")
    assert DataPoint.from_json(dp.to_json()) == dp


# -- queue ------------------------------------------------------------------------

def test_queue_lifo():
    q = PersistentQueue()
    q.enqueue(env_point(1))
    q.enqueue(env_point(2))
    assert q.pop().seq == 2 and q.pop().seq == 1 and q.pop() is None


def test_queue_survives_restart(tmp_path):
    path = tmp_path / "q.db"
    q = PersistentQueue(path)
    fill(q, 3)
    q.close()
    q = PersistentQueue(path)
    assert len(q) == 3 and q.pop().seq == 3


def test_queue_crash_between_write_and_commit(tmp_path):
    path = tmp_path / "q.db"
    armed = {"on": False}

    def fault(point):
        if armed["on"] and point == "before_commit":
            raise SimulatedCrash()

    q = PersistentQueue(path, fault=fault)
    fill(q, 2)
    armed["on"] = True
    with pytest.raises(SimulatedCrash):
        q.enqueue(env_point(3))
    q = PersistentQueue(path)
    assert len(q) == 2  # committed entries kept, the torn write is gone


def test_queue_eviction_at_capacity():
    q = PersistentQueue(capacity=3)
    fill(q, 5)
    assert len(q) == 3 and q.evictions == 2
    assert q.evicted_keys() == [("Dcu", 1), ("Dcu", 2)]
    assert [q.pop().seq for _ in range(3)] == [5, 4, 3]


def test_batch_mark_is_stable_until_ack():
    q = PersistentQueue()
    fill(q, 5)
    b1, e1 = q.begin_batch(3)
    fill(q, 2, start=6)
    b2, e2 = q.begin_batch(3)
    assert b1 == b2 and [e.seq for e in e1] == [e.seq for e in e2] == [5, 4, 3]
    assert q.ack(b1) == 3
    assert len(q) == 4  # entries queued after batching are untouched


# -- flush and ingest ---------------------------------------------------------------

def test_flush_happy_path():
    q = PersistentQueue()
    fill(q, 10)
    link, sink = make_link()
    r = flush_to_rsu(q, link, SUITE, 1, 40_000)
    assert isinstance(r, Delivered) and r.count == 10
    assert len(q) == 0 and len(sink.records) == 10


def test_flush_without_poa():
    q = PersistentQueue()
    fill(q, 4)
    assert isinstance(flush_to_rsu(q, None, SUITE, 1, 0), NoPoA)
    link, _ = make_link(tech=RadioTech.LTE)
    assert isinstance(flush_to_rsu(q, link, SUITE, 1, 0), NoPoA)
    assert len(q) == 4


def test_flush_over_5g():
    q = PersistentQueue()
    fill(q, 2)
    link, _ = make_link(tech=RadioTech.FIVE_G)
    assert isinstance(flush_to_rsu(q, link, SUITE, 1, 10_000), Delivered)


def test_flush_corruption_retains_entries():
    q = PersistentQueue()
    fill(q, 10)
    link, sink = make_link(lambda a: LinkFault.CORRUPT if a == 0 else LinkFault.NONE)
    r = flush_to_rsu(q, link, SUITE, 1, 40_000)
    assert isinstance(r, IntegrityRetry) and len(q) == 10 and sink.records == []
    assert isinstance(flush_to_rsu(q, link, SUITE, 1, 41_000), Delivered)
    assert len(q) == 0 and len(sink.records) == 10


def test_flush_lost_ack_then_retry_is_exactly_once():
    q = PersistentQueue()
    fill(q, 6)
    link, sink = make_link(lambda a: LinkFault.DROP_ACK if a == 0 else LinkFault.NONE)
    assert isinstance(flush_to_rsu(q, link, SUITE, 1, 30_000), IntegrityRetry)
    assert len(q) == 6 and len(sink.records) == 6
    assert isinstance(flush_to_rsu(q, link, SUITE, 1, 31_000), Delivered)
    assert len(q) == 0 and sorted(sink.keys()) == [("Dcu", i) for i in range(1, 7)]
    assert link.ingest.replays == 1


def test_flush_without_private_key_is_crypto_failure():
    q = PersistentQueue()
    fill(q, 1)
    link, _ = make_link()
    with pytest.raises(CryptoFailure):
        flush_to_rsu(q, link, AuthenticatedHybridSuite(), 1, 0)


def test_ingest_three_points():
    raw, digest = build_batch([env_point(i, t=i) for i in (1, 2, 3)], 1, 5, SUITE)
    sink = CloudSink()
    payloads, ack = RsuIngest(SUITE, sink).ingest(raw, 10)
    assert len(payloads) == 3 and ack == Ack(1, digest)
    assert {p.entity_type for p in payloads} == {"WeatherObserved"}


def test_ingest_tampered_ciphertext():
    raw, _ = build_batch([env_point(1)], 1, 5, SUITE)
    bad = bytearray(raw)
    bad[-1] ^= 0xFF
    ing = RsuIngest(SUITE, CloudSink())
    with pytest.raises(DecryptFailure):
        ing.ingest(bytes(bad), 10)
    assert ing.sink.records == []


def test_ingest_replay_reacks_without_emission():
    raw, digest = build_batch([env_point(1), env_point(2)], 4, 5, SUITE)
    ing = RsuIngest(SUITE, CloudSink())
    ing.ingest(raw, 10)
    payloads, ack = ing.ingest(raw, 20)
    assert payloads == [] and ack.digest == digest and len(ing.sink.records) == 2


def test_ingest_concurrent_duplicates_emit_once():
    raws = [build_batch([env_point(b * 10 + i) for i in range(3)], b, 5, SUITE)[0] for b in range(1, 9)]
    ing = RsuIngest(SUITE, CloudSink(), workers=8)
    ing.ingest_many(raws * 4, 100)
    assert sorted(ing.sink.keys()) == sorted(("Dcu", b * 10 + i) for b in range(1, 9) for i in range(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_digest_check_catches_any_prefix_bit_flip(bit):
    # null suite: the payload bytes are the compressed bytes the digest covers
    suite = NullSuite(test_mode=True)
    raw, _ = build_batch([env_point(1), env_point(2)], 1, 1, suite)
    header = len(raw) - len(BatchContainer.from_bytes(raw).payload)
    bit %= (len(raw) - header) * 8
    bad = bytearray(raw)
    bad[header + bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(IntegrityFailure):
        RsuIngest(suite, CloudSink()).ingest(bytes(bad), 10)


def test_payload_shapes():
    gps = to_payload(DataPoint(Source.OBU_GPS, GpsFix(40.6, -8.6, 10.0, 45.0), 1, 1000), 3, 2000)
    assert gps.entity_type == "Vehicle" and gps.entity_id.endswith("obu-3")
    doc = gps.to_ngsi_ld()
    assert doc["location"]["value"] == {"type": "Point", "coordinates": [-8.6, 40.6]}
    assert doc["speed"]["observedAt"] == "1970-01-01T00:00:01.000Z"
    with pytest.raises(InvariantViolation):
        to_payload(env_point(1, t=5000), 1, 4000)


def test_cloud_sink_file(tmp_path):
    sink = CloudSink(tmp_path / "sink.jsonl")
    sink.emit([to_payload(env_point(1), 1, 0)])
    assert (tmp_path / "sink.jsonl").read_text().count("\n") == 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(list(LinkFault)), max_size=12), st.integers(1, 40))
def test_exactly_once_under_any_fault_schedule(schedule, n):
    q = PersistentQueue()
    link, sink = make_link(lambda a: schedule[a] if a < len(schedule) else LinkFault.NONE)
    link.corrupt_offset = -5
    fill(q, n)
    for step in range(len(schedule) + 5):
        flush_to_rsu(q, link, SUITE, 1, 10**6 + step * 1000, max_entries=7)
        if step % 3 == 0:
            q.enqueue(env_point(n + 1 + step, t=step))
    while len(q):
        flush_to_rsu(q, link, SUITE, 1, 2 * 10**6)
    keys = sink.keys()
    assert len(keys) == len(set(keys))
    assert set(keys) == {("Dcu", i) for i in range(1, n + 1)} | {
        ("Dcu", n + 1 + s) for s in range(0, len(schedule) + 5, 3)}


# -- LoRa ----------------------------------------------------------------------------

def test_lora_frame_size_and_airtime():
    assert LORA_FRAME.size == 20
    assert lora_airtime(20, LORA_CUSTOM) == pytest.approx(0.370688, abs=1e-9)


def test_lora_frames_every_140s():
    d = Dcu(lambda now: (20.0, 50.0, 1013.0))
    lora = LoraRedundancy(device=1)
    times = []
    for now in range(0, 600_000, 100):
        d.tick(now)
        if lora.tick(now, d.latest, GeoPosition(40.64, -8.65)) is not None:
            times.append(now)
    assert times[:4] == [0, 140_000, 280_000, 420_000]
    assert times == [0, 140_000, 280_000, 420_000, 560_000]  # a 10 min window also fits a fifth


def test_lora_waits_for_first_measurement():
    assert LoraRedundancy(device=1).tick(0, None, None) is None


def test_lora_deferred_when_ledger_saturated():
    lora = LoraRedundancy(device=1)
    lora.ledger.record(0, 36.0)  # 1 % of an hour already spent
    assert lora.tick(1000, env_point(1), None) is None
    assert lora.deferrals == 1 and lora.next_due >= 3_600_000
    assert lora.tick(lora.next_due, env_point(1), None) is not None


def test_lora_frame_carries_latest_value():
    d = Dcu(lambda now: (10.0 + now / 3000, 50.0, 1013.0))
    q = PersistentQueue()
    for t in range(0, 30_000, 3000):
        q.enqueue(d.tick(t))
    frame = LoraRedundancy(device=7).tick(30_000, d.latest, GeoPosition(40.64, -8.65))
    m = decode_lora_frame(frame)
    assert m.temperature == pytest.approx(19.0) and m.counter == 1 and m.device == 7
    assert (m.lat, m.lon) == (40.64, -8.65)


def test_lora_frame_flags_and_errors():
    clamped = DataPoint(Source.DCU, Environment(20.0, 100.0, 1013.0), 1, 0, "clamped")
    m = decode_lora_frame(encode_lora_frame(1, 1, clamped, None))
    assert m.flags == 0x03 and (m.lat, m.lon) == (0.0, 0.0)
    with pytest.raises(InvariantViolation):
        encode_lora_frame(1, 1, DataPoint(Source.OBU_EVENT_LOG, Event(1), 1, 0), None)
    with pytest.raises(InvariantViolation):
        decode_lora_frame(b"\x00" * 20)
    with pytest.raises(InvariantViolation):
        decode_lora_frame(b"\x11" * 19)


def test_digest_is_over_compressed_bytes():
    suite = NullSuite(test_mode=True)
    raw, digest = build_batch([env_point(1)], 1, 1, suite)
    assert md5(BatchContainer.from_bytes(raw).payload) == digest
