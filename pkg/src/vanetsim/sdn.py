"""Centralized SDN controller for vehicular handover.

RSUs act as switches. They relay each overheard CAM to the controller as an
OBUInfo control frame (ethertype 0xBBBB) tagged with the RSSI they measured.
From that stream the controller keeps a short motion history per OBU,
projects it forward, and repoints the OBU's downlink flow rule at the start
of the tick in which the OBU is expected to switch, before the OBU acts.

The controller has no access to true positions. It reproduces the OBU's own
point-of-access choice with the channel model at zero shadowing, fed with
dead-reckoned positions.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Union

import math

import numpy as np

from .connection import (
    AttachmentDecision, CmParams, Cellular, PoAInfo, Reason, Rsu, Target,
    cellular_candidates, select_attachment,
)
from .errors import ClockSkew, DecodeError, InsufficientHistory, InvariantViolation, UnknownRsu
from .geo import EARTH_RADIUS_M, GeoPosition, VehicleState, destination, final_bearing, haversine_distance
from .messages import ETHERTYPE_OBUINFO, Frame, MessageKind, ObuInfo, decode
from .radio import DEFAULT_CHANNELS, CellularCoverage, ChannelParams, RadioTech

CLOCK_TOLERANCE_MS = 1000
HISTORY_CAPACITY = 20
GATEWAY_REPORTER = 0      # reporting_rsu used for CAMs arriving over the cellular uplink
GATEWAY_RSSI = -127       # lowest encodable value: no radio measurement behind it


# -- mobility view ------------------------------------------------------------

@dataclass(frozen=True)
class TrackSample:
    timestamp: int
    pos: GeoPosition
    speed: float
    heading: float
    rssi: int
    reporting_rsu: int


@dataclass
class ObuTrack:
    obu_id: int
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_CAPACITY))
    current_attachment: Target = None
    attached_since: int = 0

    @property
    def latest(self) -> TrackSample:
        return self.history[-1]

    def decision(self) -> AttachmentDecision:
        reason = Reason.NO_COVERAGE if self.current_attachment is None else Reason.BEST_SCORE
        return AttachmentDecision(self.current_attachment, reason, self.attached_since)


def ingest_obu_info(
    tracks: dict[int, ObuTrack],
    report: ObuInfo,
    now: int,
    tolerance_ms: int = CLOCK_TOLERANCE_MS,
    capacity: int = HISTORY_CAPACITY,
) -> ObuTrack:
    """Append a relayed CAM to its OBU's track.

    Copies of one CAM relayed by several RSUs collapse into one sample that
    keeps the strongest observation.
    """
    cam = report.inner
    if cam.generation_time > now + tolerance_ms:
        raise ClockSkew(f"report from {cam.generation_time - now} ms in the future")
    track = tracks.get(cam.station_id)
    if track is None:
        track = tracks[cam.station_id] = ObuTrack(cam.station_id, deque(maxlen=capacity))
    sample = TrackSample(cam.generation_time, cam.pos, cam.speed, cam.heading, report.rssi, report.reporting_rsu)
    hist = track.history
    for i in range(len(hist) - 1, -1, -1):
        if hist[i].timestamp == cam.generation_time:
            if report.rssi > hist[i].rssi:
                hist[i] = sample
            return track
        if hist[i].timestamp < cam.generation_time:
            break
    if hist and cam.generation_time < hist[-1].timestamp:
        # late copy of an older CAM: slot it in to keep the ring ordered
        items = sorted([*hist, sample], key=lambda s: s.timestamp)[-hist.maxlen:]
        hist.clear()
        hist.extend(items)
    else:
        hist.append(sample)
    return track


# -- prediction ---------------------------------------------------------------

@dataclass(frozen=True)
class ControllerParams:
    cm: CmParams = CmParams()
    channel: ChannelParams = DEFAULT_CHANNELS[RadioTech.ITS_G5]
    horizon_s: float = 3.0
    tick_ms: int = 100
    beacon_period_ms: int = 100
    beacon_phase_ms: int = 0
    extra_loss_db: Mapping[int, float] = field(default_factory=dict)
    coverage: CellularCoverage | None = None
    swap_grace_ticks: int = 5  # how long an early proactive swap may wait for the OBU

    def __post_init__(self):
        if self.swap_grace_ticks < 0:
            raise InvariantViolation("swap grace must be non-negative")
        if self.tick_ms <= 0 or self.beacon_period_ms <= 0:
            raise InvariantViolation("tick and beacon period must be positive")
        if self.horizon_s < 0:
            raise InvariantViolation("horizon must be non-negative")


@dataclass(frozen=True)
class HandoverPlan:
    obu_id: int
    from_rsu: Target
    to_rsu: Target
    predicted_at: int
    execute_by: int

    def __post_init__(self):
        if self.from_rsu == self.to_rsu:
            raise InvariantViolation("handover plan must change the point of access")
        if self.execute_by <= self.predicted_at:
            raise InvariantViolation("execute_by must lie after predicted_at")


def dead_reckon(sample: TrackSample, t_ms: int) -> tuple[GeoPosition, float]:
    """Constant-velocity great-circle projection of ``sample`` to ``t_ms``."""
    d = sample.speed * (t_ms - sample.timestamp) / 1000.0
    if d == 0:
        return sample.pos, sample.heading
    pos = destination(sample.pos, sample.heading, d)
    if abs(d) < 0.5 or haversine_distance(sample.pos, pos) == 0:
        return pos, sample.heading
    course = final_bearing(sample.pos, pos) if d > 0 else (final_bearing(pos, sample.pos))
    return pos, course


def _mean_rssi(d, ch: ChannelParams, extra_loss_db):
    """Log-distance RSSI without shadowing; works on scalars and arrays."""
    value = ch.tx_power - ch.reference_loss_at_1m - 10 * ch.path_loss_exponent * np.log10(np.maximum(d, 1.0))
    return np.clip(value - extra_loss_db, ch.rssi_floor, ch.tx_power)


def modelled_beacons(
    pos: GeoPosition, t_ms: int, rsus: Iterable[PoAInfo], params: ControllerParams,
) -> list[PoAInfo]:
    """RSU beacons an OBU at ``pos`` would decode, at zero shadowing."""
    ch = params.channel
    out = []
    for r in rsus:
        d = haversine_distance(pos, r.pos)
        if d > ch.max_range_hint:
            continue
        rssi = float(_mean_rssi(d, ch, params.extra_loss_db.get(r.rsu_id, 0.0)))
        if rssi > ch.rssi_floor:
            out.append(PoAInfo(r.rsu_id, r.pos, RadioTech.ITS_G5, rssi, t_ms))
    return out


def _project_many(sample: TrackSample, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``dead_reckon``: latitudes, longitudes and courses in degrees."""
    d = sample.speed * (ts - sample.timestamp) / 1000.0
    delta = d / EARTH_RADIUS_M
    theta = math.radians(sample.heading)
    phi1, lam1 = math.radians(sample.pos.lat), math.radians(sample.pos.lon)
    sin_phi2 = np.clip(math.sin(phi1) * np.cos(delta) + math.cos(phi1) * np.sin(delta) * math.cos(theta), -1, 1)
    phi2 = np.arcsin(sin_phi2)
    lam2 = lam1 + np.arctan2(math.sin(theta) * np.sin(delta) * math.cos(phi1), np.cos(delta) - math.sin(phi1) * sin_phi2)
    lat = np.degrees(phi2)
    lon = (np.degrees(lam2) + 540.0) % 360.0 - 180.0
    # course on arrival: reverse bearing from the new point back to the start, plus 180
    dlam = lam1 - lam2
    y = np.sin(dlam) * math.cos(phi1)
    x = np.cos(phi2) * math.sin(phi1) - np.sin(phi2) * math.cos(phi1) * np.cos(dlam)
    course = (np.degrees(np.arctan2(y, x)) + 180.0) % 360.0
    course = np.where(np.abs(d) < 0.5, sample.heading, course)
    return lat, lon, course


def _haversine_many(lat: np.ndarray, lon: np.ndarray, rsus: list[PoAInfo]) -> np.ndarray:
    """Distances (len(lat), len(rsus)) in metres."""
    p1, l1 = np.radians(lat)[:, None], np.radians(lon)[:, None]
    p2 = np.radians([r.pos.lat for r in rsus])[None, :]
    l2 = np.radians([r.pos.lon for r in rsus])[None, :]
    h = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin((l2 - l1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def _is_beacon(t: int, params: ControllerParams) -> bool:
    return (t - params.beacon_phase_ms) % params.beacon_period_ms == 0


def predict_handover(
    track: ObuTrack,
    rsus: Iterable[PoAInfo],
    params: ControllerParams = ControllerParams(),
    horizon: float | None = None,
    known: Mapping[int, PoAInfo] | None = None,
) -> HandoverPlan | None:
    """Project the OBU forward and replay its attachment rule tick by tick.

    ``known`` is the controller's mirror of the OBU's candidate table at the
    latest sample time. Returns the first projected switch within the horizon.
    """
    if len(track.history) < 2:
        raise InsufficientHistory(f"OBU {track.obu_id} has {len(track.history)} sample(s)")
    s = track.latest
    if s.speed == 0:
        return None
    horizon_ms = int(round((params.horizon_s if horizon is None else horizon) * 1000))
    tick = params.tick_ms
    ch = params.channel
    reach = ch.max_range_hint + abs(s.speed) * horizon_ms / 1000.0 + 1.0
    near = [r for r in rsus if haversine_distance(s.pos, r.pos) <= reach]
    steps = horizon_ms // tick
    if steps <= 0:
        return None
    ts = s.timestamp + tick * np.arange(1, steps + 1)
    lat, lon, course = _project_many(s, ts)
    if near:
        dist = _haversine_many(lat, lon, near)
        extra = np.array([params.extra_loss_db.get(r.rsu_id, 0.0) for r in near])
        rssi = _mean_rssi(dist, ch, extra[None, :])
        heard = (dist <= ch.max_range_hint) & (rssi > ch.rssi_floor)
        hits = [[] for _ in range(steps)]
        for k, j in zip(*np.nonzero(heard)):
            hits[k].append(int(j))
    table = dict(known or {})
    current = track.decision()
    cells_at = None
    for k in range(steps):
        t = int(ts[k])
        pos = GeoPosition(float(lat[k]), float(lon[k]))
        if near and _is_beacon(t, params):
            for j in hits[k]:
                r = near[j]
                table[r.rsu_id] = PoAInfo(r.rsu_id, r.pos, RadioTech.ITS_G5, float(rssi[k, j]), t)
        v = VehicleState(str(track.obu_id), pos, s.speed, float(course[k]), timestamp=t)
        cands = list(table.values())
        nxt = select_attachment(v, cands, current, params.cm)
        if nxt.target is None and params.coverage is not None:
            # no eligible RSU, so cellular coverage decides
            if cells_at is None:
                cells_at = params.coverage.available_many(lat, lon)
            nxt = select_attachment(v, cands + cellular_candidates(cells_at[k], pos, t), current, params.cm)
        if nxt.target != current.target:
            return HandoverPlan(track.obu_id, current.target, nxt.target, s.timestamp, t)
        current = nxt
    return None


# -- flow rules -----------------------------------------------------------------

class TrafficClass(str, enum.Enum):
    CONTROL = "Control"
    DATA = "Data"


@dataclass(frozen=True)
class ForwardTo:
    target: Union[Rsu, Cellular]


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class ToController:
    pass


Action = Union[ForwardTo, Drop, ToController]


@dataclass(frozen=True)
class FlowRule:
    obu_id: int | None          # None matches every OBU (the control rule)
    traffic_class: TrafficClass
    action: Action
    installed_at: int = 0
    priority: int = 100

    def __post_init__(self):
        if self.traffic_class == TrafficClass.CONTROL and not isinstance(self.action, ToController):
            raise InvariantViolation("control traffic may only be punted to the controller")
        if self.traffic_class == TrafficClass.DATA and isinstance(self.action, ToController):
            raise InvariantViolation("data traffic is never punted to the controller")
        if not 0 <= self.priority <= 255:
            raise InvariantViolation("priority is a u8")


CONTROL_RULE = FlowRule(None, TrafficClass.CONTROL, ToController(), 0, 255)


@dataclass(frozen=True)
class RuleTable:
    """Immutable rule set: the control punt rule plus one Data rule per OBU."""

    data: Mapping[int, FlowRule] = field(default_factory=dict)
    control: FlowRule = CONTROL_RULE

    def rule_for(self, obu_id: int) -> FlowRule | None:
        return self.data.get(obu_id)

    def with_rule(self, rule: FlowRule) -> "RuleTable":
        if rule.traffic_class != TrafficClass.DATA or rule.obu_id is None:
            raise InvariantViolation("per-OBU rules must be Data rules")
        new = dict(self.data)
        new[rule.obu_id] = rule
        return RuleTable(new, self.control)

    def rules(self) -> list[FlowRule]:
        return [self.control, *(self.data[k] for k in sorted(self.data))]


def _action_for(target: Target) -> Action:
    return Drop() if target is None else ForwardTo(target)


def apply_plan(plan: HandoverPlan, table: RuleTable, now: int, known_rsus: Iterable[int]) -> RuleTable:
    """Repoint the OBU's Data rule to the plan's destination in one step."""
    if isinstance(plan.to_rsu, Rsu) and plan.to_rsu.rsu_id not in set(known_rsus):
        raise UnknownRsu(f"RSU {plan.to_rsu.rsu_id} is not managed by this controller")
    return table.with_rule(FlowRule(plan.obu_id, TrafficClass.DATA, _action_for(plan.to_rsu), now))


@dataclass(frozen=True)
class Consumed:
    """Control frame absorbed by the controller."""


def route_downlink(packet: Frame, obu_id: int, table: RuleTable) -> Consumed | ForwardTo | Drop:
    if packet.ethertype == ETHERTYPE_OBUINFO:
        return Consumed()
    rule = table.rule_for(obu_id)
    if rule is None:
        return Drop()
    return rule.action


# -- controller state machine ---------------------------------------------------

@dataclass
class _Mirror:
    table: dict[int, PoAInfo] = field(default_factory=dict)
    last_beacon: int | None = None


@dataclass
class SwapRecord:
    obu_id: int
    to: Target
    at: int
    proactive: bool


class SdnController:
    """Single logical controller. All mutating calls must be serialized by the caller."""

    def __init__(self, rsus: Mapping[int, GeoPosition], params: ControllerParams = ControllerParams(),
                 on_event: Callable[[dict], None] | None = None):
        self.rsus = [PoAInfo(rid, pos, RadioTech.ITS_G5, 0.0, 0) for rid, pos in sorted(rsus.items())]
        self.rsu_ids = {r.rsu_id for r in self.rsus}
        self.params = params
        self.tracks: dict[int, ObuTrack] = {}
        self.table = RuleTable()
        self.pending: dict[int, HandoverPlan] = {}
        self._mirror: dict[int, _Mirror] = {}
        self._swaps: dict[int, SwapRecord] = {}
        self._ever_attached: set[int] = set()
        self.on_event = on_event or (lambda rec: None)
        self.black_holes = 0
        self.steady_black_holes = 0
        self.misrouted = 0
        self.control_consumed = 0
        self.obuinfo_via_data = 0
        self.clock_skew_rejects = 0

    # ingest / predict

    def ingest(self, reports: Iterable[ObuInfo], now: int) -> None:
        """Merge all reports of one tick, then re-plan each OBU that was heard."""
        touched = []
        for rep in reports:
            try:
                tr = ingest_obu_info(self.tracks, rep, now)
            except ClockSkew:
                self.clock_skew_rejects += 1
                continue
            if tr.obu_id not in touched:
                touched.append(tr.obu_id)
        for obu in touched:
            self._catch_up(self.tracks[obu])
            self._plan(obu, now)

    def _catch_up(self, track: ObuTrack) -> None:
        """Replay modelled beacons up to the latest sample so the mirror matches the OBU's table."""
        m = self._mirror.setdefault(track.obu_id, _Mirror())
        s = track.latest
        prev = track.history[-2] if len(track.history) > 1 else s
        p = self.params
        first = s.timestamp if m.last_beacon is None else m.last_beacon + p.beacon_period_ms
        t0 = first + (-(first - p.beacon_phase_ms)) % p.beacon_period_ms
        if t0 > s.timestamp:
            return
        ts = np.arange(t0, s.timestamp + 1, p.beacon_period_ms)
        # beacons before the latest sample are projected from the previous one
        lat = np.empty(len(ts))
        lon = np.empty(len(ts))
        before = ts < s.timestamp if prev is not s else np.zeros(len(ts), dtype=bool)
        for src, mask in ((prev, before), (s, ~before)):
            if mask.any():
                la, lo, _ = _project_many(src, ts[mask])
                lat[mask], lon[mask] = la, lo
        ch = p.channel
        near = self.rsus
        if near:
            dist = _haversine_many(lat, lon, near)
            extra = np.array([p.extra_loss_db.get(r.rsu_id, 0.0) for r in near])
            rssi = _mean_rssi(dist, ch, extra[None, :])
            heard = (dist <= ch.max_range_hint) & (rssi > ch.rssi_floor)
            for k, t in enumerate(ts):
                for j in np.flatnonzero(heard[k]):
                    r = near[j]
                    m.table[r.rsu_id] = PoAInfo(r.rsu_id, r.pos, RadioTech.ITS_G5, float(rssi[k, j]), int(t))
        m.last_beacon = int(ts[-1])
        # the OBU forgets stale entries; so does the mirror
        for rid in [rid for rid, e in m.table.items() if s.timestamp - e.last_seen >= p.cm.stale_after]:
            del m.table[rid]

    def _plan(self, obu_id: int, now: int) -> None:
        track = self.tracks[obu_id]
        if len(track.history) < 2:
            return
        plan = predict_handover(track, self.rsus, self.params, known=self._mirror[obu_id].table)
        if plan is None:
            self.pending.pop(obu_id, None)
            return
        if plan.execute_by <= now:
            return
        old = self.pending.get(obu_id)
        self.pending[obu_id] = plan
        if old is None or old.to_rsu != plan.to_rsu or old.execute_by != plan.execute_by:
            self.on_event({"event": "plan", "t_ms": now, "obu": obu_id, "from": _fmt(plan.from_rsu),
                           "to": _fmt(plan.to_rsu), "execute_by": plan.execute_by})

    def apply_due(self, now: int) -> None:
        """Install every pending plan that is due. Call at the start of a tick."""
        for obu in sorted(self.pending):
            plan = self.pending[obu]
            if plan.execute_by <= now:
                del self.pending[obu]
                rule = self.table.rule_for(obu)
                if rule is not None and rule.action == _action_for(plan.to_rsu):
                    continue
                self.table = apply_plan(plan, self.table, now, self.rsu_ids)
                self._swaps[obu] = SwapRecord(obu, plan.to_rsu, now, True)
                self.on_event({"event": "rule_swap", "t_ms": now, "obu": obu, "to": _fmt(plan.to_rsu),
                               "proactive": True})

    # association feedback

    def on_association(self, obu_id: int, decision: AttachmentDecision, now: int) -> dict | None:
        """OBU reports its attachment. Returns a handover record when it changed."""
        track = self.tracks.get(obu_id)
        if track is None:
            track = self.tracks[obu_id] = ObuTrack(obu_id)
        changed = track.current_attachment != decision.target
        previous = track.current_attachment
        first = obu_id not in self._ever_attached
        track.current_attachment = decision.target
        track.attached_since = decision.since
        if decision.target is not None:
            self._ever_attached.add(obu_id)
        rule = self.table.rule_for(obu_id)
        want = _action_for(decision.target)
        swap = self._swaps.get(obu_id)
        # a proactive swap that ran slightly ahead of the OBU is kept for a few ticks
        early = (swap is not None and swap.proactive and rule is not None and swap.to != decision.target
                 and rule.action == _action_for(swap.to) and previous == decision.target
                 and now - swap.at < self.params.swap_grace_ticks * self.params.tick_ms)
        if not early and (rule is None or rule.action != want):
            # missed or mispredicted: repair after the fact
            self.table = self.table.with_rule(FlowRule(obu_id, TrafficClass.DATA, want, now))
            self._swaps[obu_id] = SwapRecord(obu_id, decision.target, now, False)
            if rule is not None:
                self.on_event({"event": "rule_swap", "t_ms": now, "obu": obu_id,
                               "to": _fmt(decision.target), "proactive": False})
        if not changed:
            return None
        swap = self._swaps.get(obu_id)
        proactive = swap is not None and swap.proactive and swap.to == decision.target and swap.at <= now
        lead = (now - swap.at) // self.params.tick_ms if proactive else -1
        return {"event": "handover", "t_ms": now, "obu": obu_id, "from": _fmt(previous),
                "to": _fmt(decision.target), "reason": decision.reason.value,
                "initial": first,
                "proactive": proactive, "lead_ticks": lead}

    # data plane

    def downlink(self, packet: Frame, obu_id: int) -> Consumed | ForwardTo | Drop:
        out = route_downlink(packet, obu_id, self.table)
        if isinstance(out, Consumed):
            self.control_consumed += 1
        elif isinstance(out, Drop):
            self.black_holes += 1
            if obu_id in self._ever_attached:
                self.steady_black_holes += 1
        else:
            track = self.tracks.get(obu_id)
            if track is not None and track.current_attachment != out.target:
                self.misrouted += 1
            if _parses_as_obuinfo(packet.payload):
                self.obuinfo_via_data += 1
        return out


def _parses_as_obuinfo(payload: bytes) -> bool:
    try:
        decode(payload, MessageKind.OBUINFO)
    except DecodeError:
        return False
    return True


def _fmt(t: Target) -> str:
    return "none" if t is None else str(t)
