"""Mobility and safety analytics: congestion levels, driving behavior,
VRU collision warnings and emergency-vehicle DENM dissemination."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import DegenerateData, InsufficientHistory, InsufficientWindow, InvariantViolation, NoRsuInRange
from .geo import (
    GeoPosition, RoadSegment, Route, StationType, VehicleState, from_local_xy, haversine_distance, to_local_xy,
)
from .messages import Denm, EventType

G = 9.81


# -- congestion clustering ------------------------------------------------------

@dataclass(frozen=True)
class SegmentSample:
    segment_id: str
    window: tuple[int, int]
    mean_speed: float
    count_per_meter: float

    def __post_init__(self):
        if self.count_per_meter < 0:
            raise InvariantViolation("count per meter must be non-negative")


@dataclass(frozen=True)
class CongestionLabel:
    cluster_id: int
    level: int  # 0 = least congested


@dataclass(frozen=True)
class ClusterResult:
    assignments: list[int]             # cluster id per sample
    labels: list[CongestionLabel]      # one per cluster, indexed by cluster id
    centroids: np.ndarray              # (k, 2) in original units: speed, count/m

    def levels(self) -> list[int]:
        """Congestion level per sample."""
        lv = {lab.cluster_id: lab.level for lab in self.labels}
        return [lv[c] for c in self.assignments]


def congestion_clusters(samples: Sequence[SegmentSample], k: int = 3, seed: int = 0,
                        n_init: int = 10) -> ClusterResult:
    """k-means on standardized (speed, count per meter) with seeded k-means++ starts."""
    if len(samples) < k:
        raise InvariantViolation(f"need at least k={k} samples, got {len(samples)}")
    x = np.array([[s.mean_speed, s.count_per_meter] for s in samples], dtype=float)
    if np.all(x == x[0]):
        raise DegenerateData("all samples are identical")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    z = (x - mu) / sd
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        cent, lab = kmeans2(z, k, minit="++", seed=rng)
        inertia = float(((z - cent[lab]) ** 2).sum())
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, cent, lab)
    _, cent, lab = best
    centroids = cent * sd + mu
    # least congested first: low count per meter, then high speed
    order = sorted(range(k), key=lambda c: (centroids[c, 1], -centroids[c, 0]))
    labels = [CongestionLabel(c, order.index(c)) for c in range(k)]
    return ClusterResult([int(a) for a in lab], labels, centroids)


# -- driving behavior ------------------------------------------------------------

class SpeedBand(str, enum.Enum):
    UNDER = "UnderLimit"
    NEAR = "NearLimit"
    OVER = "OverLimit"


class Safety(str, enum.Enum):
    WITHIN = "WithinSafety"
    OUTSIDE = "OutsideSafety"


@dataclass(frozen=True)
class BehaviorCategory:
    speed: SpeedBand
    safety: Safety

    def __str__(self):
        return f"{self.speed.value}/{self.safety.value}"


ALL_CATEGORIES = [BehaviorCategory(b, s) for b in SpeedBand for s in Safety]


@dataclass(frozen=True)
class BehaviorParams:
    under: float = 0.9
    over: float = 1.05
    safety_factor: float = 0.5


def max_comfortable_accel(friction: float, safety_factor: float = 0.5) -> float:
    return friction * G * safety_factor


def classify_driving_behavior(window: Sequence[VehicleState], segment: RoadSegment,
                              params: BehaviorParams = BehaviorParams()) -> BehaviorCategory:
    if len(window) < 2:
        raise InsufficientWindow(f"window has {len(window)} sample(s), need 2")
    mean_speed = float(np.mean([v.speed for v in window]))
    ratio = mean_speed / segment.speed_limit
    band = SpeedBand.UNDER if ratio < params.under else SpeedBand.OVER if ratio > params.over else SpeedBand.NEAR
    accels = [abs(v.accel) for v in window]
    for a, b in zip(window, window[1:]):
        dt = (b.timestamp - a.timestamp) / 1000.0
        if dt > 0:
            accels.append(abs(b.speed - a.speed) / dt)
    limit = max_comfortable_accel(segment.friction, params.safety_factor)
    safety = Safety.OUTSIDE if max(accels) > limit else Safety.WITHIN
    return BehaviorCategory(band, safety)


# -- VRU collision avoidance --------------------------------------------------------

@dataclass(frozen=True)
class TrackPoint:
    timestamp: int  # ms
    pos: GeoPosition
    speed: float
    heading: float


@dataclass
class MotionTrack:
    """Kinematic history of one road user, from CAM, VAM, radar or camera."""

    track_id: str
    samples: list[TrackPoint] = field(default_factory=list)

    @classmethod
    def from_history(cls, track_id: str, history) -> "MotionTrack":
        return cls(track_id, [TrackPoint(s.timestamp, s.pos, s.speed, s.heading) for s in history])


@dataclass(frozen=True)
class CollisionParams:
    conflict_radius: float = 2.0
    horizon: float = 5.0
    step: float = 0.1
    issuer_id: int = 0


@dataclass(frozen=True)
class CollisionWarning:
    vehicle_id: str
    vru_id: str
    predicted_conflict_pos: GeoPosition
    time_to_conflict: float
    min_distance: float
    issued_at: int
    recipients: tuple[str, str]


def _velocity(p: TrackPoint) -> np.ndarray:
    h = math.radians(p.heading)
    return np.array([p.speed * math.sin(h), p.speed * math.cos(h)])


def predict_collision(vehicle: MotionTrack, vru: MotionTrack, params: CollisionParams = CollisionParams(),
                      sequence: int = 0) -> tuple[CollisionWarning, Denm] | None:
    """Constant-velocity projection of both parties; warn if they come within the conflict radius.

    The time to conflict is the closest-approach time, clamped to the first
    grid step and the horizon. The result does not depend on which party is
    called the vehicle.
    """
    for tr in (vehicle, vru):
        if len(tr.samples) < 2:
            raise InsufficientHistory(f"track {tr.track_id} has {len(tr.samples)} sample(s)")
    a, b = vehicle.samples[-1], vru.samples[-1]
    t_ref = max(a.timestamp, b.timestamp)
    origin = GeoPosition((a.pos.lat + b.pos.lat) / 2, (a.pos.lon + b.pos.lon) / 2)
    va, vb = _velocity(a), _velocity(b)
    pa = np.array(to_local_xy(origin, a.pos)) + va * (t_ref - a.timestamp) / 1000.0
    pb = np.array(to_local_xy(origin, b.pos)) + vb * (t_ref - b.timestamp) / 1000.0
    dp, dv = pb - pa, vb - va
    vv = float(dv @ dv)
    t_star = -float(dp @ dv) / vv if vv > 0 else 0.0
    if t_star <= 0:
        return None  # separation never shrinks
    t_c = min(max(t_star, params.step), params.horizon)
    gap = float(np.linalg.norm(dp + dv * t_c))
    if gap >= params.conflict_radius:
        return None
    mid = (pa + va * t_c + pb + vb * t_c) / 2
    where = from_local_xy(origin, float(mid[0]), float(mid[1]))
    warning = CollisionWarning(vehicle.track_id, vru.track_id, where, t_c, gap, t_ref,
                               (vehicle.track_id, vru.track_id))
    denm = Denm(params.issuer_id, EventType.COLLISION_RISK, where, t_ref,
                max(1, math.ceil(t_c)), sequence & 0xFFFF)
    return warning, denm


# -- emergency-vehicle DENM dissemination -----------------------------------------------

class Transmitter(str, enum.Enum):
    EV = "Ev"
    DETECTING_RSU = "DetectingRsu"
    UPCOMING_RSU = "UpcomingRsu"


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi))


@dataclass(frozen=True)
class EvLinkModel:
    """Per-hop delay distributions in ms. The defaults come from tools/calibrate_ev.py."""

    tx: Uniform = Uniform(5.0, 15.0)
    ev_processing: Uniform = Uniform(10.0, 30.0)
    rsu_processing: Uniform = Uniform(10.0, 30.0)
    backhaul: Uniform = Uniform(19.0, 39.0)
    ev_range: float = 150.0
    rsu_range: float = 350.0
    detect_range: float = 600.0


@dataclass(frozen=True)
class EvTopology:
    rsus: Mapping[int, GeoPosition]
    route: Route
    receivers: Sequence[tuple[str, GeoPosition]]


@dataclass(frozen=True)
class DisseminationEvent:
    transmitter: Transmitter
    node_id: str
    denm: Denm
    receivers: list[str]
    latency_ms: list[float]
    hops: list[tuple[float, ...]]

    def __post_init__(self):
        if any(lat <= 0 for lat in self.latency_ms):
            raise InvariantViolation("latencies must be positive")


def _upcoming_rsu(ev: VehicleState, topo: EvTopology, exclude: int) -> int | None:
    s_ev, _ = topo.route.project(ev.pos)
    best = None
    for rid, pos in sorted(topo.rsus.items()):
        if rid == exclude:
            continue
        s, _ = topo.route.project(pos)
        ahead = s - s_ev
        if topo.route.loop:
            ahead %= topo.route.length
        if ahead <= 0:
            continue
        if best is None or ahead < best[0]:
            best = (ahead, rid)
    return None if best is None else best[1]


def ev_disseminate(ev: VehicleState, topo: EvTopology, links: EvLinkModel, rng: np.random.Generator,
                   now: int, sequence: int = 0) -> list[DisseminationEvent]:
    """Three-stage DENM fan-out: EV direct, the RSU hearing the EV, the next RSU ahead."""
    if ev.station_type != StationType.EMERGENCY_VEHICLE:
        raise InvariantViolation("only emergency vehicles trigger dissemination")
    denm = Denm(int(ev.id) if str(ev.id).isdigit() else 0, EventType.EMERGENCY_VEHICLE_APPROACHING,
                ev.pos, now, 10, sequence & 0xFFFF)

    def fan_out(kind, node, origin, rng_range, prefix):
        names, lats, hops = [], [], []
        for rid, pos in topo.receivers:
            if haversine_distance(origin, pos) <= rng_range:
                path = (*prefix, links.tx.draw(rng))
                names.append(rid)
                hops.append(path)
                lats.append(sum(path))
        return DisseminationEvent(kind, node, denm, names, lats, hops)

    events = [fan_out(Transmitter.EV, str(ev.id), ev.pos, links.ev_range, (links.ev_processing.draw(rng),))]

    heard = [(haversine_distance(ev.pos, p), rid) for rid, p in topo.rsus.items()]
    heard = sorted(h for h in heard if h[0] <= links.detect_range)
    if not heard:
        raise NoRsuInRange("no RSU hears the emergency vehicle", events=events)
    detecting = heard[0][1]
    cam_tx = links.tx.draw(rng)
    detect_proc = links.rsu_processing.draw(rng)
    events.append(fan_out(Transmitter.DETECTING_RSU, str(detecting), topo.rsus[detecting],
                          links.rsu_range, (cam_tx, detect_proc)))
    upcoming = _upcoming_rsu(ev, topo, detecting)
    if upcoming is not None:
        prefix = (cam_tx, detect_proc, links.backhaul.draw(rng), links.rsu_processing.draw(rng))
        events.append(fan_out(Transmitter.UPCOMING_RSU, str(upcoming), topo.rsus[upcoming],
                              links.rsu_range, prefix))
    return events
