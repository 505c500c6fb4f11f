"""Store-and-forward sensing pipeline.

DCU readings and OBU logs land in a durable LIFO queue on the vehicle. Whenever
the OBU is attached over ITS-G5 or 5G, the flusher packs a batch (compress,
digest, seal) and only deletes it once the RSU acknowledges the digest. The
RSU side deduplicates by batch id, so a retransmission after a lost ack never
reaches the cloud sink twice. A compact LoRa frame carries the latest reading
every 140 s as a redundant path.
"""

from __future__ import annotations

import enum
import json
import sqlite3
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Union

from .errors import (
    AuthFailure, CorruptStream, CryptoFailure, DecryptFailure, IntegrityFailure,
    InvariantViolation, KeyUnavailable, StorageFailure,
)
from .geo import GeoPosition
from .integrity import BatchContainer, CipherSuite, compress, decompress, md5
from .radio import (
    LORA_CUSTOM, Allow, DeferUntil, DutyCycleLedger, LoraConfig, RadioTech,
    duty_cycle_gate, lora_airtime,
)

DCU_CADENCE_S = 3.0
LORA_PERIOD_S = 140.0
DEFAULT_QUEUE_CAPACITY = 100_000
DEFAULT_MAX_BATCH = 500


# -- datapoints ---------------------------------------------------------------

class Source(str, enum.Enum):
    DCU = "Dcu"
    OBU_GPS = "ObuGps"
    OBU_EVENT_LOG = "ObuEventLog"


@dataclass(frozen=True)
class Environment:
    temperature: float  # °C
    humidity: float     # %
    pressure: float     # hPa

    def __post_init__(self):
        if not 0 <= self.humidity <= 100:
            raise InvariantViolation(f"humidity {self.humidity} outside [0, 100]")


@dataclass(frozen=True)
class GpsFix:
    lat: float
    lon: float
    speed: float
    heading: float


@dataclass(frozen=True)
class Event:
    code: int
    detail: str = ""


Reading = Union[Environment, GpsFix, Event]
_KIND_NAMES = {Environment: "Environment", GpsFix: "GpsFix", Event: "Event"}
_KINDS = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True)
class DataPoint:
    source: Source
    kind: Reading
    seq: int
    captured_at: int  # ms
    quality: str = "ok"

    @property
    def key(self) -> tuple[str, int]:
        return self.source.value, self.seq

    def to_json(self) -> str:
        body = {"source": self.source.value, "seq": self.seq, "captured_at": self.captured_at,
                "quality": self.quality, "kind": _KIND_NAMES[type(self.kind)],
                "data": self.kind.__dict__}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "DataPoint":
        d = json.loads(line)
        kind = _KINDS[d["kind"]](**d["data"])
        return cls(Source(d["source"]), kind, int(d["seq"]), int(d["captured_at"]), d.get("quality", "ok"))


class SeqCounter:
    """Strictly increasing per-source sequence numbers starting at 1."""

    def __init__(self):
        self._next: dict[Source, int] = {}

    def next(self, source: Source) -> int:
        n = self._next.get(source, 1)
        self._next[source] = n + 1
        return n


class Dcu:
    """Environmental sensor board emitting one reading per cadence."""

    def __init__(self, sensors: Callable[[int], tuple[float, float, float]],
                 cadence_s: float = DCU_CADENCE_S, counter: SeqCounter | None = None):
        if cadence_s <= 0:
            raise InvariantViolation("cadence must be positive")
        self.sensors = sensors
        self.cadence_ms = cadence_s * 1000.0
        self.counter = counter or SeqCounter()
        self.last_emit: int | None = None
        self.latest: DataPoint | None = None

    def tick(self, now: int) -> DataPoint | None:
        if self.last_emit is not None and now - self.last_emit < self.cadence_ms:
            return None
        temp, hum, pres = self.sensors(now)
        quality = "ok"
        if not 0 <= hum <= 100:
            hum, quality = min(max(hum, 0.0), 100.0), "clamped"
        dp = DataPoint(Source.DCU, Environment(temp, hum, pres), self.counter.next(Source.DCU), now, quality)
        self.last_emit = now
        self.latest = dp
        return dp


def dcu_tick(dcu: Dcu, now: int) -> DataPoint | None:
    return dcu.tick(now)


# -- persistent LIFO queue ------------------------------------------------------

class SimulatedCrash(Exception):
    """Raised by a fault hook to emulate the OBU losing power."""


_SCHEMA = """
CREATE TABLE IF NOT EXISTS entries (id INTEGER PRIMARY KEY AUTOINCREMENT, body TEXT NOT NULL, batch INTEGER);
CREATE TABLE IF NOT EXISTS meta (k TEXT PRIMARY KEY, v INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS evicted (source TEXT NOT NULL, seq INTEGER NOT NULL);
CREATE INDEX IF NOT EXISTS entries_batch ON entries(batch);
"""


class PersistentQueue:
    """SQLite-backed LIFO queue. Every mutation commits before returning.

    ``fault`` is called at named points inside each transaction; raising
    ``SimulatedCrash`` there abandons the connection mid-transaction, which is
    what a power cut does to a journaled database.
    """

    def __init__(self, path: str | Path = ":memory:", capacity: int = DEFAULT_QUEUE_CAPACITY,
                 fault: Callable[[str], None] | None = None):
        if capacity <= 0:
            raise InvariantViolation("capacity must be positive")
        self.path = str(path)
        self.capacity = capacity
        self.fault = fault or (lambda point: None)
        self._lock = threading.Lock()
        try:
            self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
            self._db.execute("PRAGMA journal_mode=DELETE")
            self._db.execute("PRAGMA synchronous=FULL")
            self._db.executescript(_SCHEMA)
        except sqlite3.Error as exc:
            raise StorageFailure(str(exc)) from exc

    def _tx(self, fn):
        with self._lock:
            db = self._db
            try:
                db.execute("BEGIN IMMEDIATE")
                out = fn(db)
                self.fault("before_commit")
                db.execute("COMMIT")
                return out
            except SimulatedCrash:
                self._abandon()
                raise
            except sqlite3.Error as exc:
                db.execute("ROLLBACK")
                raise StorageFailure(str(exc)) from exc

    def _abandon(self):
        try:
            self._db.close()  # uncommitted work is rolled back
        finally:
            self._db = None

    def _meta(self, db, key: str) -> int:
        row = db.execute("SELECT v FROM meta WHERE k = ?", (key,)).fetchone()
        return row[0] if row else 0

    def _set_meta(self, db, key: str, value: int) -> None:
        db.execute("INSERT INTO meta(k, v) VALUES(?, ?) ON CONFLICT(k) DO UPDATE SET v = excluded.v", (key, value))

    def enqueue(self, dp: DataPoint) -> None:
        def op(db):
            db.execute("INSERT INTO entries(body) VALUES (?)", (dp.to_json(),))
            self.fault("after_insert")
            (n,) = db.execute("SELECT COUNT(*) FROM entries").fetchone()
            while n > self.capacity:
                row = db.execute("SELECT id, body FROM entries ORDER BY batch IS NOT NULL, id LIMIT 1").fetchone()
                db.execute("DELETE FROM entries WHERE id = ?", (row[0],))
                old = DataPoint.from_json(row[1])
                db.execute("INSERT INTO evicted(source, seq) VALUES (?, ?)", old.key)
                self._set_meta(db, "evictions", self._meta(db, "evictions") + 1)
                n -= 1
        self._tx(op)

    def pop(self) -> DataPoint | None:
        def op(db):
            row = db.execute("SELECT id, body FROM entries WHERE batch IS NULL ORDER BY id DESC LIMIT 1").fetchone()
            if row is None:
                return None
            db.execute("DELETE FROM entries WHERE id = ?", (row[0],))
            return DataPoint.from_json(row[1])
        return self._tx(op)

    def begin_batch(self, max_entries: int = DEFAULT_MAX_BATCH) -> tuple[int, list[DataPoint]]:
        """Mark the newest entries as one in-flight batch, or return the open one.

        The mark is durable, so a batch interrupted by a crash is resent with
        the same id and contents.
        """
        def op(db):
            rows = db.execute("SELECT body, batch FROM entries WHERE batch IS NOT NULL ORDER BY id DESC").fetchall()
            if rows:
                return rows[0][1], [DataPoint.from_json(r[0]) for r in rows]
            ids = db.execute("SELECT id, body FROM entries ORDER BY id DESC LIMIT ?", (max_entries,)).fetchall()
            if not ids:
                return 0, []
            batch_id = self._meta(db, "next_batch") + 1
            self._set_meta(db, "next_batch", batch_id)
            db.executemany("UPDATE entries SET batch = ? WHERE id = ?", [(batch_id, r[0]) for r in ids])
            self.fault("after_mark")
            return batch_id, [DataPoint.from_json(r[1]) for r in ids]
        return self._tx(op)

    def ack(self, batch_id: int) -> int:
        def op(db):
            cur = db.execute("DELETE FROM entries WHERE batch = ?", (batch_id,))
            self.fault("after_delete")
            return cur.rowcount
        return self._tx(op)

    def __len__(self) -> int:
        with self._lock:
            return self._db.execute("SELECT COUNT(*) FROM entries").fetchone()[0]

    @property
    def evictions(self) -> int:
        with self._lock:
            return self._meta(self._db, "evictions")

    def evicted_keys(self) -> list[tuple[str, int]]:
        with self._lock:
            return [(s, q) for s, q in self._db.execute("SELECT source, seq FROM evicted ORDER BY rowid")]

    def close(self) -> None:
        if self._db is not None:
            self._db.close()
            self._db = None


def enqueue(queue: PersistentQueue, dp: DataPoint) -> None:
    queue.enqueue(dp)


# -- platform payloads ------------------------------------------------------------

@dataclass(frozen=True)
class PlatformPayload:
    entity_id: str
    entity_type: str
    attributes: dict
    tenant: str
    source: str
    seq: int
    ingested_at: int

    def to_ngsi_ld(self) -> dict:
        out = {"id": self.entity_id, "type": self.entity_type,
               "source": self.source, "seq": self.seq}
        for name, (value, unit, observed) in sorted(self.attributes.items()):
            prop = {"type": "Property", "value": value, "observedAt": _iso(observed)}
            if unit:
                prop["unitCode"] = unit
            out[name] = prop
        return out


def _iso(ms: int) -> str:
    return datetime.fromtimestamp(ms / 1000, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


def to_payload(dp: DataPoint, origin: int, now: int, tenant: str = "mobility") -> PlatformPayload:
    if dp.captured_at > now:
        raise InvariantViolation("datapoint captured after its ingestion time")
    t = dp.captured_at
    k = dp.kind
    if isinstance(k, Environment):
        attrs = {"temperature": (k.temperature, "CEL", t), "relativeHumidity": (k.humidity, "P1", t),
                 "atmosphericPressure": (k.pressure, "A97", t)}
        return PlatformPayload(f"urn:ngsi-ld:WeatherObserved:obu-{origin}", "WeatherObserved", attrs,
                               tenant, dp.source.value, dp.seq, now)
    if isinstance(k, GpsFix):
        attrs = {"location": ({"type": "Point", "coordinates": [k.lon, k.lat]}, "", t),
                 "speed": (k.speed, "MTS", t), "heading": (k.heading, "DD", t)}
        return PlatformPayload(f"urn:ngsi-ld:Vehicle:obu-{origin}", "Vehicle", attrs,
                               tenant, dp.source.value, dp.seq, now)
    attrs = {"eventCode": (k.code, "", t), "detail": (k.detail, "", t)}
    return PlatformPayload(f"urn:ngsi-ld:VehicleEvent:obu-{origin}", "VehicleEvent", attrs,
                           tenant, dp.source.value, dp.seq, now)


class CloudSink:
    """Stand-in for the data platform: NGSI-LD-shaped JSON lines."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[PlatformPayload] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.write_text("")

    def emit(self, payloads: Iterable[PlatformPayload]) -> None:
        with self._lock:
            payloads = list(payloads)
            self.records.extend(payloads)
            if self.path and payloads:
                with self.path.open("a") as fh:
                    for p in payloads:
                        fh.write(json.dumps(p.to_ngsi_ld(), sort_keys=True) + "\n")

    def keys(self) -> list[tuple[str, int]]:
        return [(p.source, p.seq) for p in self.records]


# -- RSU ingest ----------------------------------------------------------------------

@dataclass(frozen=True)
class Ack:
    batch_id: int
    digest: bytes


@dataclass(frozen=True)
class Nack:
    batch_id: int
    reason: str


class DedupeTable:
    """Batches already emitted, keyed by (origin, batch_id). Shared by all ingest workers."""

    def __init__(self):
        self._seen: dict[tuple[int, int], bytes] = {}
        self.lock = threading.Lock()

    def __contains__(self, key) -> bool:
        return key in self._seen

    def get(self, key):
        return self._seen.get(key)

    def add(self, key, digest: bytes) -> None:
        self._seen[key] = digest

    def __len__(self) -> int:
        return len(self._seen)


class RsuIngest:
    def __init__(self, suite: CipherSuite, sink: CloudSink, dedupe: DedupeTable | None = None,
                 tenant: str = "mobility", workers: int = 4):
        self.suite = suite
        self.sink = sink
        self.dedupe = dedupe if dedupe is not None else DedupeTable()
        self.tenant = tenant
        self.workers = workers
        self.replays = 0

    def ingest(self, raw: bytes, now: int) -> tuple[list[PlatformPayload], Ack]:
        try:
            box = BatchContainer.from_bytes(raw)
        except CorruptStream as exc:
            raise IntegrityFailure(str(exc)) from None
        key = (box.origin, box.batch_id)
        try:
            comp = self.suite.open(box.payload)
        except (AuthFailure, KeyUnavailable) as exc:
            raise DecryptFailure(str(exc)) from None
        if md5(comp) != box.digest:
            raise IntegrityFailure(f"digest mismatch on batch {box.batch_id}")
        try:
            lines = decompress(comp).decode("utf-8").splitlines()
            points = [DataPoint.from_json(ln) for ln in lines]
        except (CorruptStream, UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise IntegrityFailure(f"undecodable batch: {exc}") from None
        if len(points) != box.count:
            raise IntegrityFailure("entry count does not match header")
        payloads = [to_payload(dp, box.origin, now, self.tenant) for dp in points]
        with self.dedupe.lock:
            if key in self.dedupe:
                self.replays += 1
                return [], Ack(box.batch_id, self.dedupe.get(key))
            self.dedupe.add(key, box.digest)
            self.sink.emit(payloads)
        return payloads, Ack(box.batch_id, box.digest)

    def ingest_many(self, raws: Iterable[bytes], now: int) -> list:
        """Decode batches on a worker pool; each result is (payloads, Ack) or the raised error."""
        def one(raw):
            try:
                return self.ingest(raw, now)
            except (IntegrityFailure, DecryptFailure) as exc:
                return exc
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(one, raws))


def rsu_ingest(raw: bytes, ingest: RsuIngest, now: int):
    return ingest.ingest(raw, now)


# -- links and flushing ------------------------------------------------------------------

class LinkFault(str, enum.Enum):
    NONE = "none"
    DROP_BEFORE = "drop_before"   # batch never arrives
    DROP_ACK = "drop_ack"         # batch ingested, ack lost
    CORRUPT = "corrupt"           # one payload byte flipped in transit


@dataclass
class RsuLink:
    """V2I transfer channel to one RSU with an optional fault schedule."""

    ingest: RsuIngest
    tech: RadioTech = RadioTech.ITS_G5
    faults: Callable[[int], LinkFault] = lambda attempt: LinkFault.NONE
    attempts: int = 0
    corrupt_offset: int = -1

    def transmit(self, raw: bytes, now: int) -> Ack | Nack | None:
        fault = self.faults(self.attempts)
        self.attempts += 1
        if fault == LinkFault.DROP_BEFORE:
            return None
        if fault == LinkFault.CORRUPT:
            buf = bytearray(raw)
            buf[self.corrupt_offset] ^= 0x01
            raw = bytes(buf)
        try:
            _, ack = self.ingest.ingest(raw, now)
        except (IntegrityFailure, DecryptFailure) as exc:
            try:
                batch_id = BatchContainer.from_bytes(raw).batch_id
            except CorruptStream:
                batch_id = 0
            return Nack(batch_id, str(exc))
        if fault == LinkFault.DROP_ACK:
            return None
        return ack


@dataclass(frozen=True)
class Delivered:
    count: int
    batch_id: int = 0


@dataclass(frozen=True)
class NoPoA:
    pass


@dataclass(frozen=True)
class IntegrityRetry:
    batch_id: int
    reason: str = ""


TransferResult = Union[Delivered, NoPoA, IntegrityRetry]
_FLUSH_TECHS = (RadioTech.ITS_G5, RadioTech.FIVE_G)


def build_batch(entries: list[DataPoint], batch_id: int, origin: int, suite: CipherSuite) -> tuple[bytes, bytes]:
    """Serialize, compress, digest, seal. Returns (container bytes, digest)."""
    raw = "\n".join(dp.to_json() for dp in entries).encode("utf-8")
    comp = compress(raw)
    digest = md5(comp)
    try:
        sealed = suite.seal(comp)
    except KeyUnavailable as exc:
        raise CryptoFailure(str(exc)) from None
    box = BatchContainer(suite.suite_id, digest, batch_id, origin, len(entries), sealed)
    return box.to_bytes(), digest


def flush_to_rsu(queue: PersistentQueue, link: RsuLink | None, suite: CipherSuite, origin: int,
                 now: int, max_entries: int = DEFAULT_MAX_BATCH) -> TransferResult:
    if link is None or link.tech not in _FLUSH_TECHS:
        return NoPoA()
    batch_id, entries = queue.begin_batch(max_entries)
    if not entries:
        return Delivered(0)
    raw, digest = build_batch(entries, batch_id, origin, suite)
    reply = link.transmit(raw, now)
    if isinstance(reply, Ack) and reply.batch_id == batch_id and reply.digest == digest:
        queue.ack(batch_id)
        return Delivered(len(entries), batch_id)
    reason = "timeout" if reply is None else getattr(reply, "reason", "digest mismatch")
    return IntegrityRetry(batch_id, reason)


# -- LoRa redundancy path -------------------------------------------------------------

LORA_FRAME = struct.Struct(">BHHiihHHB")  # header, device, counter, lat, lon, temp, hum, pres, flags
LORA_HEADER = 0x11  # version 1, measurement frame
FLAG_CLAMPED = 0x01
FLAG_NO_FIX = 0x02


@dataclass(frozen=True)
class LoraMeasurement:
    device: int
    counter: int
    lat: float
    lon: float
    temperature: float
    humidity: float
    pressure: float
    flags: int


def encode_lora_frame(device: int, counter: int, env: DataPoint, pos: GeoPosition | None) -> bytes:
    k = env.kind
    if not isinstance(k, Environment):
        raise InvariantViolation("LoRa frames carry environment readings")
    flags = (FLAG_CLAMPED if env.quality != "ok" else 0) | (FLAG_NO_FIX if pos is None else 0)
    lat = round(pos.lat * 1e6) if pos else 0
    lon = round(pos.lon * 1e6) if pos else 0
    temp = max(-32768, min(32767, round(k.temperature * 100)))
    hum = round(k.humidity * 100)
    pres = max(0, min(65535, round(k.pressure * 10)))
    return LORA_FRAME.pack(LORA_HEADER, device & 0xFFFF, counter & 0xFFFF, lat, lon, temp, hum, pres, flags)


def decode_lora_frame(raw: bytes) -> LoraMeasurement:
    if len(raw) != LORA_FRAME.size:
        raise InvariantViolation(f"LoRa frame must be {LORA_FRAME.size} bytes")
    head, dev, ctr, lat, lon, temp, hum, pres, flags = LORA_FRAME.unpack(raw)
    if head != LORA_HEADER:
        raise InvariantViolation(f"unknown LoRa frame header 0x{head:02x}")
    return LoraMeasurement(dev, ctr, lat / 1e6, lon / 1e6, temp / 100, hum / 100, pres / 10, flags)


@dataclass
class LoraRedundancy:
    device: int
    cfg: LoraConfig = LORA_CUSTOM
    period_s: float = LORA_PERIOD_S
    ledger: DutyCycleLedger = field(default_factory=DutyCycleLedger)
    next_due: int | None = None
    counter: int = 0
    deferrals: int = 0

    @property
    def airtime(self) -> float:
        return lora_airtime(LORA_FRAME.size, self.cfg)

    def tick(self, now: int, latest: DataPoint | None, pos: GeoPosition | None) -> bytes | None:
        if latest is None:
            return None
        if self.next_due is None:
            self.next_due = now
        if now < self.next_due:
            return None
        verdict = duty_cycle_gate(self.ledger, self.airtime, now)
        if isinstance(verdict, DeferUntil):
            self.next_due = verdict.time_ms
            self.deferrals += 1
            return None
        assert isinstance(verdict, Allow)
        self.ledger.record(now, self.airtime)
        self.ledger.prune(now)
        self.counter += 1
        self.next_due = now + int(round(self.period_s * 1000))
        return encode_lora_frame(self.device, self.counter, latest, pos)


def lora_redundancy_tick(state: LoraRedundancy, now: int, latest: DataPoint | None,
                         pos: GeoPosition | None = None) -> bytes | None:
    return state.tick(now, latest, pos)
