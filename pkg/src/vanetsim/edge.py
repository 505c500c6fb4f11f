"""Per-node edge compute: topic bus, 24 h store, sensor models, fusion, latency.

Topics follow ``{node_id}/{sensor}/{stream}``. Subscription patterns use MQTT
wildcards: ``+`` matches one level and a trailing ``#`` matches any number
of levels, including none.

The radar, camera and WiFi sniffer are parametric stochastic stand-ins.
Apart from the radar's 80% class accuracy, their parameters are
configuration defaults and not measured values.
"""

from __future__ import annotations

import binascii
import csv
import enum
import math
import sqlite3
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon

from .errors import InvariantViolation
from .geo import GeoPosition, bearing, destination, haversine_distance, normalize_heading

RETENTION_S = 86_400
LIDAR_RATE_MULTIPLIER = 6500
EDGE_NOTIFICATION_BYTES = 41


# -- topics and bus ---------------------------------------------------------

def validate_topic(topic: str) -> None:
    if not topic or any(seg == "" for seg in topic.split("/")):
        raise InvariantViolation(f"invalid topic {topic!r}")
    if "+" in topic or "#" in topic:
        raise InvariantViolation("wildcards are not allowed in published topics")


def validate_pattern(pattern: str) -> None:
    segs = pattern.split("/")
    for i, seg in enumerate(segs):
        if seg == "" or (seg != "+" and "+" in seg) or ("#" in seg and (seg != "#" or i != len(segs) - 1)):
            raise InvariantViolation(f"invalid subscription pattern {pattern!r}")


def topic_matches(pattern: str, topic: str) -> bool:
    p, t = pattern.split("/"), topic.split("/")
    for i, seg in enumerate(p):
        if seg == "#":
            return True
        if i >= len(t) or (seg != "+" and seg != t[i]):
            return False
    return len(p) == len(t)


@dataclass(frozen=True)
class TopicMessage:
    topic: str
    payload: bytes
    published_at: int


@dataclass
class Subscription:
    pattern: str
    callback: Callable[[TopicMessage], None]
    active: bool = True


class Bus:
    """Synchronous broker. Delivery happens inside ``publish``, so per-topic order is kept."""

    def __init__(self):
        self._subs: list[Subscription] = []
        self._lock = threading.RLock()
        self.published = 0

    def subscribe(self, pattern: str, callback: Callable[[TopicMessage], None]) -> Subscription:
        validate_pattern(pattern)
        sub = Subscription(pattern, callback)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            sub.active = False
            self._subs = [s for s in self._subs if s is not sub]

    def publish(self, topic: str, payload: bytes, now: int) -> TopicMessage:
        validate_topic(topic)
        msg = TopicMessage(topic, bytes(payload), now)
        with self._lock:
            self.published += 1
            targets = [s for s in self._subs if s.active and topic_matches(s.pattern, topic)]
            for s in targets:
                s.callback(msg)
        return msg


def publish(bus: Bus, topic: str, payload: bytes, now: int) -> TopicMessage:
    return bus.publish(topic, payload, now)


def subscribe(bus: Bus, pattern: str, callback: Callable[[TopicMessage], None]) -> Subscription:
    return bus.subscribe(pattern, callback)


class CloudBridge:
    """Republishes every node topic on the cloud bus as ``cloud/<topic>``."""

    def __init__(self, node_bus: Bus, cloud_bus: Bus, node_id: str):
        self.cloud_bus = cloud_bus
        self.forwarded = 0
        node_bus.subscribe(f"{node_id}/#", self._forward)

    def _forward(self, msg: TopicMessage) -> None:
        self.forwarded += 1
        self.cloud_bus.publish(f"cloud/{msg.topic}", msg.payload, msg.published_at)


# -- short-horizon store ----------------------------------------------------------

class ShortHorizonStore:
    """Rows of persisted topics for ``retention_s`` seconds (SQLite, in memory)."""

    def __init__(self, persisted_topics: Sequence[str] = ("#",), retention_s: float = RETENTION_S):
        for p in persisted_topics:
            validate_pattern(p)
        self.persisted_topics = tuple(persisted_topics)
        self.retention_ms = int(round(retention_s * 1000))
        self._db = sqlite3.connect(":memory:", check_same_thread=False)
        self._db.create_function("tmatch", 2, lambda p, t: int(topic_matches(p, t)), deterministic=True)
        self._db.execute("CREATE TABLE rows (id INTEGER PRIMARY KEY, topic TEXT, payload BLOB, published_at INTEGER)")
        self._db.execute("CREATE INDEX rows_t ON rows(published_at)")
        self._lock = threading.Lock()

    def wants(self, topic: str) -> bool:
        return any(topic_matches(p, topic) for p in self.persisted_topics)

    def insert(self, msg: TopicMessage) -> bool:
        if not self.wants(msg.topic):
            return False
        with self._lock:
            self._db.execute("INSERT INTO rows(topic, payload, published_at) VALUES (?, ?, ?)",
                             (msg.topic, msg.payload, msg.published_at))
        return True

    def attach(self, bus: Bus) -> Subscription:
        return bus.subscribe("#", self.insert)

    def compact(self, now: int) -> int:
        with self._lock:
            cur = self._db.execute("DELETE FROM rows WHERE published_at < ?", (now - self.retention_ms,))
            return cur.rowcount

    def query(self, pattern: str, start: int, end: int) -> list[TopicMessage]:
        """Rows matching ``pattern`` with ``start <= published_at <= end``, oldest first."""
        validate_pattern(pattern)
        if end < start:
            raise InvariantViolation("query range must be well ordered")
        with self._lock:
            rows = self._db.execute(
                "SELECT topic, payload, published_at FROM rows WHERE published_at BETWEEN ? AND ? "
                "AND tmatch(?, topic) ORDER BY published_at, id", (start, end, pattern)).fetchall()
        return [TopicMessage(t, bytes(p), ts) for t, p, ts in rows]

    def __len__(self) -> int:
        with self._lock:
            return self._db.execute("SELECT COUNT(*) FROM rows").fetchone()[0]

    def export_csv(self, path: str | Path) -> None:
        with self._lock:
            rows = self._db.execute("SELECT topic, published_at, payload FROM rows ORDER BY published_at, id").fetchall()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["topic", "published_at", "payload_hex"])
            for t, ts, p in rows:
                w.writerow([t, ts, bytes(p).hex()])


def store_query(store: ShortHorizonStore, pattern: str, time_range: tuple[int, int]) -> list[TopicMessage]:
    return store.query(pattern, *time_range)


# -- ground truth and sensor models ---------------------------------------------

class ObjectClass(str, enum.Enum):
    PEDESTRIAN = "Pedestrian"
    BICYCLE = "Bicycle"
    MOTORBIKE = "Motorbike"
    CAR = "Car"
    TRUCK = "Truck"


class RadarClass(str, enum.Enum):
    LIGHT = "Light"
    HEAVY = "Heavy"
    TWO_WHEELER = "TwoWheeler"


_RADAR_OF = {ObjectClass.CAR: RadarClass.LIGHT, ObjectClass.TRUCK: RadarClass.HEAVY,
             ObjectClass.BICYCLE: RadarClass.TWO_WHEELER, ObjectClass.MOTORBIKE: RadarClass.TWO_WHEELER}
_RADAR_CLASSES = list(RadarClass)


@dataclass(frozen=True)
class GroundTruth:
    object_id: str
    pos: GeoPosition
    speed: float
    heading: float
    cls: ObjectClass


@dataclass(frozen=True)
class Sector:
    origin: GeoPosition
    boresight: float       # degrees
    half_angle: float = 45.0
    range_m: float = 150.0

    def __post_init__(self):
        if not 0 < self.half_angle <= 180 or self.range_m <= 0:
            raise InvariantViolation("sector needs a positive range and a half angle in (0, 180]")

    def contains(self, pos: GeoPosition) -> bool:
        d = haversine_distance(self.origin, pos)
        if d > self.range_m:
            return False
        if d == 0:
            return True
        off = abs((bearing(self.origin, pos) - self.boresight + 180.0) % 360.0 - 180.0)
        return off <= self.half_angle


@dataclass(frozen=True)
class RadarParams:
    p_det: float = 0.95
    accuracy: float = 0.80
    jitter_sigma: float = 0.5  # m


@dataclass(frozen=True)
class RadarDetection:
    object_id: str
    pos: GeoPosition
    speed: float
    direction: float
    cls: RadarClass
    true_cls: ObjectClass
    t_ms: int = 0

    def __post_init__(self):
        if self.speed < 0:
            raise InvariantViolation("radar speed must be non-negative")


def _jitter(pos: GeoPosition, sigma: float, rng: np.random.Generator) -> GeoPosition:
    dx, dy = rng.normal(0.0, sigma, 2)
    dist = math.hypot(dx, dy)
    if dist == 0:
        return pos
    return destination(pos, math.degrees(math.atan2(dx, dy)), dist)


def radar_observe(truth: Iterable[GroundTruth], sector: Sector, params: RadarParams,
                  rng: np.random.Generator, t_ms: int = 0) -> list[RadarDetection]:
    out = []
    for obj in truth:
        if not sector.contains(obj.pos):
            continue
        true_radar = _RADAR_OF.get(obj.cls)
        if true_radar is None:   # too small to be typed
            continue
        if rng.random() >= params.p_det:
            continue
        if rng.random() < params.accuracy:
            cls = true_radar
        else:
            others = [c for c in _RADAR_CLASSES if c != true_radar]
            cls = others[int(rng.integers(len(others)))]
        out.append(RadarDetection(obj.object_id, _jitter(obj.pos, params.jitter_sigma, rng),
                                  obj.speed, normalize_heading(obj.heading), cls, obj.cls, t_ms))
    return out


@dataclass(frozen=True)
class CameraParams:
    p_cam: float = 0.9
    frame_interval_ms: float = 40.0
    processing_ms: float = 100.0


@dataclass(frozen=True)
class CameraDetection:
    object_id: str
    pos: GeoPosition
    cls: ObjectClass
    t_ms: int = 0


class FieldOfView:
    """Camera view polygon given as (lon, lat) vertices."""

    def __init__(self, ring: Sequence[Sequence[float]]):
        self.polygon = Polygon(ring)
        if not self.polygon.is_valid or self.polygon.area == 0:
            raise InvariantViolation("field-of-view polygon is not valid")
        shapely.prepare(self.polygon)

    def contains(self, pos: GeoPosition) -> bool:
        return bool(shapely.contains_xy(self.polygon, pos.lon, pos.lat))


def camera_observe(truth: Iterable[GroundTruth], fov: FieldOfView, params: CameraParams,
                   rng: np.random.Generator, t_ms: int = 0) -> tuple[dict[ObjectClass, int], list[CameraDetection]]:
    """One processed frame: per-class counts plus the individual detections."""
    dets = [CameraDetection(o.object_id, o.pos, o.cls, t_ms) for o in truth
            if fov.contains(o.pos) and rng.random() < params.p_cam]
    counts = {c: 0 for c in ObjectClass}
    for d in dets:
        counts[d.cls] += 1
    return counts, dets


class FrameScheduler:
    """Busy-skip: a frame arriving while the previous one is in processing is dropped."""

    def __init__(self, processing_ms: float):
        self.processing_ms = processing_ms
        self.busy_until = -math.inf
        self.processed = 0
        self.skipped = 0

    def offer(self, t_ms: float) -> bool:
        if t_ms < self.busy_until:
            self.skipped += 1
            return False
        self.busy_until = t_ms + self.processing_ms
        self.processed += 1
        return True


def busy_skip_rate(frame_interval_ms: float, processing_ms: float) -> float:
    """Processed frames per second for periodic arrivals under busy-skip."""
    frames_per_cycle = max(1, math.ceil(processing_ms / frame_interval_ms))
    return 1000.0 / (frames_per_cycle * frame_interval_ms)


def wifi_probe_count(devices: Iterable[GeoPosition], center: GeoPosition, radius_m: float,
                     p_probe: float, rng: np.random.Generator) -> int:
    """Binomial count of devices inside the omnidirectional sniffer radius."""
    n = sum(1 for d in devices if haversine_distance(center, d) <= radius_m)
    return int(rng.binomial(n, p_probe)) if n else 0


# -- fusion -----------------------------------------------------------------------

class FusedClass(str, enum.Enum):
    PEDESTRIAN = "Pedestrian"
    TWO_WHEELER = "TwoWheeler"
    LIGHT = "Light"
    HEAVY = "Heavy"


class SourceKind(str, enum.Enum):
    RADAR = "Radar"
    CAMERA = "Camera"
    CAM_MSG = "CamMsg"


_FUSED_OF_OBJECT = {ObjectClass.PEDESTRIAN: FusedClass.PEDESTRIAN, ObjectClass.BICYCLE: FusedClass.TWO_WHEELER,
                    ObjectClass.MOTORBIKE: FusedClass.TWO_WHEELER, ObjectClass.CAR: FusedClass.LIGHT,
                    ObjectClass.TRUCK: FusedClass.HEAVY}
_FUSED_OF_RADAR = {RadarClass.LIGHT: FusedClass.LIGHT, RadarClass.HEAVY: FusedClass.HEAVY,
                   RadarClass.TWO_WHEELER: FusedClass.TWO_WHEELER}


@dataclass(frozen=True)
class CamObservation:
    """A CAM overheard by the node, reduced to what fusion needs."""

    station_id: int
    pos: GeoPosition
    speed: float
    t_ms: int
    cls: FusedClass = FusedClass.LIGHT


@dataclass(frozen=True)
class FusionParams:
    gate_m: float = 3.0
    gate_ms: int = 1000


@dataclass
class TrafficStats:
    window: tuple[int, int]
    counts: dict[FusedClass, int]
    mean_speed: dict[FusedClass, float]
    mean_accel: dict[FusedClass, float]
    source_mix: set[SourceKind] = field(default_factory=set)

    def __post_init__(self):
        if self.window[1] <= self.window[0]:
            raise InvariantViolation("window end must be after start")

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class _Obs:
    source: SourceKind
    key: str
    pos: GeoPosition
    t: int
    speed: float | None
    cls: FusedClass


class _DSU:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, i):
        while self.p[i] != i:
            self.p[i] = self.p[self.p[i]]
            i = self.p[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.p[max(ra, rb)] = min(ra, rb)


_CLASS_PRIORITY = {SourceKind.CAM_MSG: 0, SourceKind.CAMERA: 1, SourceKind.RADAR: 2}


def fuse_counts(radar: Iterable[RadarDetection], camera: Iterable[CameraDetection],
                cam_msgs: Iterable[CamObservation], window: tuple[int, int],
                params: FusionParams = FusionParams()) -> TrafficStats:
    """Merge detections into distinct objects and summarize them.

    Observations with the same per-source track id are one object. Across
    sources, two observations within the position and time gate are merged.
    """
    obs = [_Obs(SourceKind.RADAR, f"r:{d.object_id}", d.pos, d.t_ms, d.speed, _FUSED_OF_RADAR[d.cls]) for d in radar]
    obs += [_Obs(SourceKind.CAMERA, f"c:{d.object_id}", d.pos, d.t_ms, None, _FUSED_OF_OBJECT[d.cls]) for d in camera]
    obs += [_Obs(SourceKind.CAM_MSG, f"m:{m.station_id}", m.pos, m.t_ms, m.speed, m.cls) for m in cam_msgs]
    obs = [o for o in obs if window[0] <= o.t <= window[1]]
    dsu = _DSU(len(obs))
    first: dict[str, int] = {}
    for i, o in enumerate(obs):
        if o.key in first:
            dsu.union(first[o.key], i)
        else:
            first[o.key] = i
    for i in range(len(obs)):
        for j in range(i + 1, len(obs)):
            a, b = obs[i], obs[j]
            if a.source == b.source:
                continue
            if abs(a.t - b.t) <= params.gate_ms and haversine_distance(a.pos, b.pos) <= params.gate_m:
                dsu.union(i, j)
    groups: dict[int, list[_Obs]] = {}
    for i, o in enumerate(obs):
        groups.setdefault(dsu.find(i), []).append(o)

    counts = {c: 0 for c in FusedClass}
    speeds: dict[FusedClass, list[float]] = {c: [] for c in FusedClass}
    accels: dict[FusedClass, list[float]] = {c: [] for c in FusedClass}
    mix: set[SourceKind] = set()
    for members in groups.values():
        cls = min(members, key=lambda o: _CLASS_PRIORITY[o.source]).cls
        counts[cls] += 1
        mix.update(o.source for o in members)
        timed = sorted((o.t, o.speed) for o in members if o.speed is not None)
        if timed:
            speeds[cls].append(float(np.mean([s for _, s in timed])))
            if len(timed) >= 2 and timed[-1][0] > timed[0][0]:
                accels[cls].append((timed[-1][1] - timed[0][1]) / ((timed[-1][0] - timed[0][0]) / 1000.0))
    mean_speed = {c: float(np.mean(v)) if v else 0.0 for c, v in speeds.items()}
    mean_accel = {c: float(np.mean(v)) if v else 0.0 for c, v in accels.items()}
    return TrafficStats(window, counts, mean_speed, mean_accel, mix)


# -- edge vs cloud detection delay --------------------------------------------------

class Deployment(str, enum.Enum):
    EDGE = "Edge"
    CLOUD = "Cloud"


@dataclass(frozen=True)
class LinkModel:
    name: str
    latency_ms: float
    bandwidth_mbps: float

    def transfer_ms(self, n_bytes: int) -> float:
        return self.latency_ms + n_bytes * 8 / (self.bandwidth_mbps * 1e3)


FIBER = LinkModel("fiber", 2.0, 1000.0)
FIVE_G_LINK = LinkModel("5g", 10.0, 100.0)


@dataclass(frozen=True)
class LatencyParams:
    capture_ms: float = 35.0
    edge_processing_ms: float = 30.0    # on-node inference
    cloud_processing_ms: float = 60.0   # platform ingestion, decode and inference
    frame_bytes: int = 250_000          # one compressed 1080p frame

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "LatencyParams":
        """Random parameter set; edge inference never exceeds cloud-side handling."""
        return cls(capture_ms=float(rng.uniform(30, 40)),
                   edge_processing_ms=float(rng.uniform(20, 40)),
                   cloud_processing_ms=float(rng.uniform(45, 90)),
                   frame_bytes=int(rng.integers(150_000, 400_000)))


@dataclass(frozen=True)
class DelayBreakdown:
    capture: float
    processing: float
    communication: float

    @property
    def total(self) -> float:
        return self.capture + self.processing + self.communication


def detection_latency(deployment: Deployment, link: LinkModel,
                      params: LatencyParams = LatencyParams()) -> DelayBreakdown:
    if deployment == Deployment.EDGE:
        return DelayBreakdown(params.capture_ms, params.edge_processing_ms,
                              link.transfer_ms(EDGE_NOTIFICATION_BYTES))
    return DelayBreakdown(params.capture_ms, params.cloud_processing_ms, link.transfer_ms(params.frame_bytes))


_NOTIFICATION = struct.Struct(">BHQI5HiiHBHB")  # + crc16


def edge_notification(node_id: int, captured_at: int, frame_seq: int, counts: dict[ObjectClass, int],
                      where: GeoPosition, mean_confidence: float, processing_ms: float) -> bytes:
    """Detection summary sent upstream by an edge node: always 41 bytes."""
    per_class = [min(65535, counts.get(c, 0)) for c in ObjectClass]
    body = _NOTIFICATION.pack(1, node_id & 0xFFFF, captured_at, frame_seq & 0xFFFFFFFF, *per_class,
                              round(where.lat * 1e6), round(where.lon * 1e6), min(65535, sum(per_class)),
                              max(0, min(255, round(mean_confidence * 255))),
                              max(0, min(65535, round(processing_ms))), 0)
    return body + struct.pack(">H", binascii.crc_hqx(body, 0xFFFF))


def lidar_rate(camera_rate_bps: float) -> float:
    """Uplink rate a LiDAR would need, relative to a camera stream."""
    return camera_rate_bps * LIDAR_RATE_MULTIPLIER


def topic(node_id: str, sensor: str, stream: str) -> str:
    return f"{node_id}/{sensor}/{stream}"
