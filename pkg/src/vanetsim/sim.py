"""Fixed-tick simulation loop.

Order of work inside one tick:

1. vehicle and VRU motion
2. the controller installs rule swaps planned for this tick
3. RSU beacons reach OBU candidate tables
4. connection-manager decisions and association reports
5. CAM emission; RSUs relay what they hear as OBUInfo control frames
6. controller ingest and prediction
7. sensing pipeline (DCU, queue, flush) and LoRa redundancy
8. edge sensors and fusion
9. analytics hooks (segments, behavior, collisions, EV dissemination)
10. 1 Hz throughput probes with downlink data frames

Every subsystem draws from its own seeded generator, so adding records to
one never shifts another's random stream.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .analytics import (
    BehaviorParams, CollisionParams, EvLinkModel, EvTopology, MotionTrack, SegmentSample, TrackPoint,
    classify_driving_behavior, congestion_clusters, ev_disseminate, predict_collision,
)
from .connection import (
    COLD_START, AttachmentDecision, Cellular, PoAInfo, Rsu, cellular_candidates, select_and_rank,
)
from .edge import (
    Bus, CameraParams, CamObservation, CloudBridge, FieldOfView, FusedClass, GroundTruth, ObjectClass,
    RadarParams, Sector, ShortHorizonStore, camera_observe, fuse_counts, radar_observe, wifi_probe_count,
)
from .errors import DegenerateData, NoRsuInRange
from .geo import (
    GeoPosition, StationType, VehicleState, destination, from_local_xy, haversine_distance, to_local_xy,
)
from .integrity import AuthenticatedHybridSuite, NullSuite
from .messages import Cam, FrameKind, MessageKind, ObuInfo, Vam, VruProfile, decode, encode, frame, unframe
from .pipeline import (
    CloudSink, Dcu, DataPoint, GpsFix, LinkFault, LoraRedundancy, PersistentQueue, RsuIngest,
    RsuLink, SeqCounter, Source, flush_to_rsu,
)
from .radio import RadioTech, ShadowingProcess, delivery_probability, link_throughput
from .scenario import CONGESTION, Scenario, VehicleSpec, VruSpec
from .sdn import GATEWAY_REPORTER, GATEWAY_RSSI, ControllerParams, Consumed, ForwardTo, SdnController, route_downlink

PDR_CELL_M = 50.0
SENSOR_PERIOD_MS = 1000
FUSION_WINDOW_MS = 60_000
SEGMENT_WINDOW_MS = 60_000
BEHAVIOR_WINDOW_MS = 10_000
COLLISION_PERIOD_MS = 500
EV_PERIOD_MS = 20_000
GPS_PERIOD_MS = 5000
WIFI_PERIOD_MS = 60_000
COMPACT_PERIOD_MS = 600_000
VAM_PERIOD_MS = 1000

_OBJECT_OF = {StationType.CAR: ObjectClass.CAR, StationType.BUS: ObjectClass.TRUCK,
              StationType.GARBAGE_TRUCK: ObjectClass.TRUCK, StationType.EMERGENCY_VEHICLE: ObjectClass.CAR,
              StationType.PEDESTRIAN: ObjectClass.PEDESTRIAN, StationType.CYCLIST: ObjectClass.BICYCLE}
_FUSED_OF = {StationType.CAR: FusedClass.LIGHT, StationType.BUS: FusedClass.HEAVY,
             StationType.GARBAGE_TRUCK: FusedClass.HEAVY, StationType.EMERGENCY_VEHICLE: FusedClass.LIGHT}


def subsystem_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def run_id(scenario: Scenario, seed: int) -> str:
    return hashlib.sha256(f"{scenario.config_hash}:{seed}".encode()).hexdigest()[:16]


@dataclass
class MetricsBundle:
    """Everything a run produces. Row tuples follow the column lists in reports.py."""

    seed: int
    run_id: str
    manifest: dict = field(default_factory=dict)
    rssi_samples: list = field(default_factory=list)
    pdr_cells: dict = field(default_factory=dict)       # (ix, iy) -> [lat, lon, sent, received]
    throughput_trace: list = field(default_factory=list)
    coverage_trace: list = field(default_factory=list)
    handover_events: list = field(default_factory=list)
    pipeline_audit: list = field(default_factory=list)
    dissemination_events: list = field(default_factory=list)
    lora_frames: list = field(default_factory=list)
    congestion: list = field(default_factory=list)
    behavior: list = field(default_factory=list)
    collisions: list = field(default_factory=list)
    traffic_stats: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)


@dataclass
class Hooks:
    """Optional observers used by tests; they must not mutate simulation state."""

    on_decision: Callable[[int, str, VehicleState, list, AttachmentDecision], None] | None = None


# -- runtime actors ---------------------------------------------------------------

@dataclass
class _Vehicle:
    spec: VehicleSpec
    route: object
    factors: list
    seg_ids: list
    s: float
    speed: float
    pos: GeoPosition
    heading: float
    accel: float = 0.0
    table: dict = field(default_factory=dict)
    decision: AttachmentDecision = COLD_START
    dcu: Dcu | None = None
    queue: PersistentQueue | None = None
    counter: SeqCounter | None = None
    generated: list = field(default_factory=list)
    lora: LoraRedundancy | None = None
    behavior_window: list = field(default_factory=list)
    last_two: list = field(default_factory=list)

    @property
    def sid(self) -> int:
        return self.spec.station_id

    def state(self, t: int) -> VehicleState:
        return VehicleState(self.spec.id, self.pos, self.speed, self.heading, self.accel, t, self.spec.station_type)


@dataclass
class _Vru:
    spec: VruSpec
    pos: GeoPosition
    heading: float
    last_two: list = field(default_factory=list)


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None, duration_s: float | None = None,
                 hooks: Hooks | None = None):
        self.sc = scenario
        self.seed = scenario.seed if seed is None else seed
        self.duration_ms = int(round((scenario.duration_s if duration_s is None else duration_s) * 1000))
        self.hooks = hooks or Hooks()
        self.tick = scenario.tick_ms
        self.rid = run_id(scenario, self.seed)
        self.rng = {n: subsystem_rng(self.seed, n) for n in
                    ("beacon", "cam", "probe", "pipeline", "sensors", "segments", "ev", "dcu")}
        self.m = MetricsBundle(self.seed, self.rid)
        self.g5 = scenario.channels[RadioTech.ITS_G5]
        self.shadow = ShadowingProcess(self.g5.shadowing_sigma, self.rng["beacon"])
        self.rsus = list(scenario.rsus)
        self.rsu_pos = {n.station_id: n.pos for n in self.rsus}
        self.rsu_name = {n.station_id: n.id for n in self.rsus}
        self.extra = {n.station_id: n.bridge_attenuation_db for n in self.rsus}
        self._rsu_lat = np.radians([n.pos.lat for n in self.rsus])
        self._rsu_lon = np.radians([n.pos.lon for n in self.rsus])
        self._rsu_cos = np.cos(self._rsu_lat)
        first = self.rsus[0].pos if self.rsus else GeoPosition(0.0, 0.0)
        self.origin = first
        self.controller = SdnController(
            self.rsu_pos,
            ControllerParams(cm=scenario.cm, channel=self.g5, horizon_s=scenario.horizon_s, tick_ms=self.tick,
                             beacon_period_ms=scenario.beacon_period_ms, extra_loss_db=self.extra,
                             coverage=scenario.coverage),
            on_event=self._controller_event,
        )
        self.control_frames = 0
        self.control_via_data = 0
        # pipeline plumbing
        if scenario.cipher == "Null":
            self.suite = NullSuite(test_mode=True)
        else:
            self.suite = AuthenticatedHybridSuite.from_seed(f"{self.seed}".encode())
        self.sender_suite = self.suite if scenario.cipher == "Null" else self.suite.sender_view()
        self.sink = CloudSink()
        self.ingest = RsuIngest(self.suite, self.sink)
        self.flush_ms = int(round(scenario.flush_period_s * 1000))
        self.vehicles = [self._make_vehicle(v) for v in scenario.vehicles]
        self.vrus = [_Vru(u, u.pos, u.heading) for u in scenario.vrus]
        # edge nodes
        self.cloud_bus = Bus()
        self.edge = {}
        for n in scenario.nodes:
            if not n.sensors:
                continue
            bus = Bus()
            store = ShortHorizonStore([f"{n.id}/#"])
            store.attach(bus)
            CloudBridge(bus, self.cloud_bus, n.id)
            fov = self._fov(n.pos, n.radar_boresight)
            self.edge[n.id] = {"node": n, "bus": bus, "store": store, "fov": fov,
                               "sector": Sector(n.pos, n.radar_boresight, 60.0, 150.0),
                               "radar": [], "camera": [], "cams": []}
        self.segment_samples: list[SegmentSample] = []
        self.collision_last: dict = {}
        self.ev_seq = 0

    # -- setup helpers

    def _make_vehicle(self, spec: VehicleSpec) -> _Vehicle:
        rs = self.sc.routes[spec.route]
        factors = [CONGESTION[self.sc.segments[sid].congestion][0] for sid in rs.segment_ids]
        route = rs.route
        s = route._wrap(spec.start_m)
        v = _Vehicle(spec, route, factors, list(rs.segment_ids), s, 0.0, route.point_at(s), route.heading_at(s))
        v.speed = self._target_speed(v)
        if spec.dcu:
            v.counter = SeqCounter()
            rng = self.rng["dcu"]
            base = float(rng.uniform(14, 22))

            def sensors(t, rng=rng, base=base):
                hour = t / 3_600_000
                return (base + 3 * math.sin(2 * math.pi * hour / 24) + float(rng.normal(0, 0.2)),
                        float(np.clip(70 + rng.normal(0, 5), 0, 105)), 1013.0 + float(rng.normal(0, 0.5)))

            v.dcu = Dcu(sensors, counter=v.counter)
            v.queue = PersistentQueue(":memory:")
            v.lora = LoraRedundancy(spec.station_id)
        return v

    def _fov(self, pos: GeoPosition, boresight: float) -> FieldOfView:
        pts = [pos] + [destination(pos, boresight + a, 80.0) for a in (-35, -12, 12, 35)]
        return FieldOfView([(p.lon, p.lat) for p in pts])

    def _target_speed(self, v: _Vehicle) -> float:
        i = v.route.segment_index(v.s)
        limit = v.route.segment_speed_limits[i] if v.route.segment_speed_limits else v.spec.speed
        return min(v.spec.speed, limit * v.factors[i])

    def _controller_event(self, rec: dict) -> None:
        self.m.handover_events.append(rec)

    def _rsu_distances(self, pos: GeoPosition) -> np.ndarray:
        lat, lon = math.radians(pos.lat), math.radians(pos.lon)
        h = np.sin((self._rsu_lat - lat) / 2) ** 2 + math.cos(lat) * self._rsu_cos * np.sin((self._rsu_lon - lon) / 2) ** 2
        return 2 * 6_371_000.0 * np.arcsin(np.sqrt(np.minimum(h, 1.0)))

    # -- main loop

    def run(self) -> MetricsBundle:
        t = 0
        while t < self.duration_ms:
            self._step(t)
            t += self.tick
        self._finish()
        return self.m

    def _step(self, t: int) -> None:
        sc = self.sc
        if t > 0:
            for v in self.vehicles:
                self._move(v)
            for u in self.vrus:
                self._move_vru(u, t)
        for v in self.vehicles:
            v.last_two = (v.last_two + [TrackPoint(t, v.pos, v.speed, v.heading)])[-2:]
        for u in self.vrus:
            u.last_two = (u.last_two + [TrackPoint(t, u.pos, u.spec.speed, u.heading)])[-2:]

        self.controller.apply_due(t)
        obus = [v for v in self.vehicles if v.spec.obu]
        if t % sc.beacon_period_ms == 0:
            for v in obus:
                self._beacons(v, t)
        for v in obus:
            self._decide(v, t)

        reports = []
        for v in obus:
            if (t - v.spec.cam_phase_ms) % sc.cam_period_ms == 0:
                reports.extend(self._cam(v, t))
        if t % VAM_PERIOD_MS == 0:
            for u in self.vrus:
                self._vam(u, t)
        self.controller.ingest(reports, t)

        for v in self.vehicles:
            if v.dcu is not None:
                self._pipeline(v, t)

        if self.edge and t % SENSOR_PERIOD_MS == 0:
            self._sensors(t)
        if t > 0 and t % SEGMENT_WINDOW_MS == 0:
            self._segments(t)
        if t % 1000 == 0:
            self._behavior(t)
        if t % COLLISION_PERIOD_MS == 0 and self.vrus:
            self._collisions(t)
        if t % EV_PERIOD_MS == 0:
            for v in self.vehicles:
                if v.spec.station_type == StationType.EMERGENCY_VEHICLE:
                    self._ev(v, t)
        if t % sc.probe_period_ms == 0:
            for v in obus:
                self._probe(v, t)

    # -- motion

    def _move(self, v: _Vehicle) -> None:
        dt = self.tick / 1000.0
        new_speed = self._target_speed(v)
        v.accel = (new_speed - v.speed) / dt
        v.speed = new_speed
        s = v.s + v.speed * dt
        if v.route.loop:
            s %= v.route.length
        elif s >= v.route.length:
            s, v.speed = v.route.length, 0.0
        v.s = s
        v.pos, v.heading = v.route.pose_at(s)

    def _move_vru(self, u: _Vru, t: int) -> None:
        leg = u.spec.leg_m
        travelled = u.spec.speed * t / 1000.0
        phase = travelled % (2 * leg) if leg > 0 else 0.0
        offset = phase if phase <= leg else 2 * leg - phase
        u.heading = u.spec.heading if phase <= leg else (u.spec.heading + 180.0) % 360.0
        u.pos = destination(u.spec.pos, u.spec.heading, offset) if offset > 0 else u.spec.pos

    # -- connectivity

    def _beacons(self, v: _Vehicle, t: int) -> None:
        p = self.g5
        dists = self._rsu_distances(v.pos)
        for i, node in enumerate(self.rsus):
            d = float(dists[i])
            if d > p.max_range_hint:
                continue
            rssi = self.shadow.rssi((v.sid, node.station_id), v.pos, d, p, self.extra[node.station_id])
            if rssi > p.rssi_floor:
                v.table[node.station_id] = PoAInfo(node.station_id, node.pos, RadioTech.ITS_G5, rssi, t)
        stale = self.sc.cm.stale_after
        for rid in [r for r, e in v.table.items() if t - e.last_seen >= stale]:
            del v.table[rid]

    def _decide(self, v: _Vehicle, t: int) -> None:
        sc = self.sc
        state = v.state(t)
        cells = sc.coverage.available(v.pos)
        cands = [*v.table.values(), *cellular_candidates(cells, v.pos, t)]
        decision, ranked = select_and_rank(state, cands, v.decision, sc.cm)
        if self.hooks.on_decision:
            self.hooks.on_decision(t, v.spec.id, state, cands, decision)
        best = ranked[0][0] if ranked else None
        tech = decision.tech.value if decision.tech else "None"
        self.m.coverage_trace.append((t, v.spec.id, v.pos.lat, v.pos.lon, tech, _target_str(decision.target),
                                      best, int(RadioTech.FIVE_G in cells), int(RadioTech.LTE in cells)))
        # the OBU restates its attachment every tick so a mispredicted swap is repaired at once
        rec = self.controller.on_association(v.sid, decision, t)
        if rec is not None:
            rec["vehicle"] = v.spec.id
            self.m.handover_events.append(rec)
        v.decision = decision

    def _cam(self, v: _Vehicle, t: int) -> list[ObuInfo]:
        rng = self.rng["cam"]
        p = self.g5
        cam = Cam(v.sid, v.spec.station_type, v.pos, v.speed, v.heading, 0, t)
        raw = encode(cam)
        out = []
        dists = self._rsu_distances(v.pos)
        for i, node in enumerate(self.rsus):
            d = float(dists[i])
            if d > p.max_range_hint:
                continue
            rssi = self.shadow.rssi((v.sid, node.station_id), v.pos, d, p, self.extra[node.station_id])
            if rssi <= p.rssi_floor or rng.random() >= delivery_probability(rssi, RadioTech.ITS_G5, p):
                continue
            heard = decode(raw, MessageKind.CAM)
            out.append(self._relay(ObuInfo(heard, max(-127, min(0, int(round(rssi)))), node.station_id), t))
            if node.id in self.edge:
                self.edge[node.id]["cams"].append(
                    CamObservation(v.sid, heard.pos, heard.speed, t, _FUSED_OF.get(v.spec.station_type, FusedClass.LIGHT)))
        received_by_rsu = bool(out)
        self._count(f"cam_sent_{v.spec.id}")
        if received_by_rsu:
            self._count(f"cam_received_{v.spec.id}")
        if isinstance(v.decision.target, Cellular):
            out.append(self._relay(ObuInfo(decode(raw, MessageKind.CAM), GATEWAY_RSSI, GATEWAY_REPORTER), t))
        x, y = to_local_xy(self.origin, v.pos)
        key = (math.floor(x / PDR_CELL_M), math.floor(y / PDR_CELL_M))
        cell = self.m.pdr_cells.get(key)
        if cell is None:
            cx, cy = (key[0] + 0.5) * PDR_CELL_M, (key[1] + 0.5) * PDR_CELL_M
            c = from_local_xy(self.origin, cx, cy)
            cell = self.m.pdr_cells[key] = [c.lat, c.lon, 0, 0]
        cell[2] += 1
        cell[3] += int(received_by_rsu)
        return out

    def _vam(self, u: _Vru, t: int) -> None:
        """VRUs announce themselves; edge nodes feed what they hear into fusion."""
        rng = self.rng["cam"]
        p = self.g5
        cyclist = u.spec.station_type == StationType.CYCLIST
        vam = Vam(u.spec.station_id, u.pos, 0.0, u.heading, u.spec.speed, u.heading, u.heading,
                  vru_profile=VruProfile.CYCLIST if cyclist else VruProfile.PEDESTRIAN)
        raw = encode(vam)
        self._count("vam_sent")
        for nid in sorted(self.edge):
            node = self.edge[nid]["node"]
            d = haversine_distance(u.pos, node.pos)
            if d > p.max_range_hint:
                continue
            rssi = self.shadow.rssi((u.spec.station_id, node.station_id), u.pos, d, p, node.bridge_attenuation_db)
            if rssi <= p.rssi_floor or rng.random() >= delivery_probability(rssi, RadioTech.ITS_G5, p):
                continue
            heard = decode(raw, MessageKind.VAM)
            self._count("vam_received")
            self.edge[nid]["cams"].append(CamObservation(
                heard.station_id, heard.pos, heard.speed, t,
                FusedClass.TWO_WHEELER if cyclist else FusedClass.PEDESTRIAN))

    def _count(self, key: str, n: int = 1) -> None:
        self.m.counters[key] = self.m.counters.get(key, 0) + n

    def _relay(self, info: ObuInfo, t: int) -> ObuInfo:
        """RSU switch path: the OBUInfo goes out as a control frame and the controller parses it."""
        f = frame(encode(info), FrameKind.CONTROL)
        self.control_frames += 1
        verdict = route_downlink(f, info.inner.station_id, self.controller.table)
        if not isinstance(verdict, Consumed):
            self.control_via_data += 1
        kind, payload = unframe(f)
        return decode(payload, MessageKind.OBUINFO)

    # -- pipeline

    def _pipeline(self, v: _Vehicle, t: int) -> None:
        dp = v.dcu.tick(t)
        if dp is not None:
            v.queue.enqueue(dp)
            v.generated.append(dp.key)
        if t % GPS_PERIOD_MS == 0:
            gp = DataPoint(Source.OBU_GPS, GpsFix(v.pos.lat, v.pos.lon, v.speed, v.heading),
                           v.counter.next(Source.OBU_GPS), t)
            v.queue.enqueue(gp)
            v.generated.append(gp.key)
        if t > 0 and t % self.flush_ms == 0:
            tech = v.decision.tech
            link = None
            if tech in (RadioTech.ITS_G5, RadioTech.FIVE_G):
                rng = self.rng["pipeline"]
                fault = LinkFault.NONE
                if rng.random() < self.sc.link_fault_rate:
                    fault = [LinkFault.DROP_BEFORE, LinkFault.DROP_ACK, LinkFault.CORRUPT][int(rng.integers(3))]
                link = RsuLink(self.ingest, tech, faults=lambda attempt, f=fault: f)
            res = flush_to_rsu(v.queue, link, self.sender_suite, v.sid, t)
            self._count(f"flush_{type(res).__name__}")
        frame_bytes = v.lora.tick(t, v.dcu.latest, v.pos)
        if frame_bytes is not None:
            self.m.lora_frames.append((t, v.spec.id, v.lora.counter, len(frame_bytes), v.lora.airtime,
                                       frame_bytes.hex()))

    # -- edge sensing

    def _truth(self) -> list[GroundTruth]:
        out = [GroundTruth(v.spec.id, v.pos, v.speed, v.heading, _OBJECT_OF.get(v.spec.station_type, ObjectClass.CAR))
               for v in self.vehicles]
        out += [GroundTruth(u.spec.id, u.pos, u.spec.speed, u.heading, _OBJECT_OF[u.spec.station_type])
                for u in self.vrus]
        return out

    def _sensors(self, t: int) -> None:
        rng = self.rng["sensors"]
        truth = self._truth()
        for nid in sorted(self.edge):
            e = self.edge[nid]
            near = [g for g in truth if haversine_distance(g.pos, e["node"].pos) <= 160.0]
            if "radar" in e["node"].sensors:
                dets = radar_observe(near, e["sector"], RadarParams(), rng, t)
                e["radar"].extend(dets)
                if dets:
                    e["bus"].publish(f"{nid}/radar/detections", json.dumps(
                        [{"id": d.object_id, "cls": d.cls.value, "speed": round(d.speed, 2)} for d in dets],
                        sort_keys=True).encode(), t)
            if "camera" in e["node"].sensors:
                counts, dets = camera_observe(near, e["fov"], CameraParams(), rng, t)
                e["camera"].extend(dets)
                e["bus"].publish(f"{nid}/camera/counts", json.dumps(
                    {c.value: n for c, n in counts.items()}, sort_keys=True).encode(), t)
            if "wifi_probe" in e["node"].sensors and t % WIFI_PERIOD_MS == 0:
                devices = [u.pos for u in self.vrus] + [v.pos for v in self.vehicles]
                n = wifi_probe_count(devices, e["node"].pos, 100.0, 0.8, rng)
                e["bus"].publish(f"{nid}/wifi/probes", str(n).encode(), t)
            if t > 0 and t % FUSION_WINDOW_MS == 0:
                win = (t - FUSION_WINDOW_MS, t)
                stats = fuse_counts(e["radar"], e["camera"], e["cams"], win)
                for cls in FusedClass:
                    self.m.traffic_stats.append((win[0], win[1], nid, cls.value, stats.counts[cls],
                                                 stats.mean_speed[cls], stats.mean_accel[cls],
                                                 "+".join(sorted(s.value for s in stats.source_mix))))
                e["radar"], e["camera"], e["cams"] = [], [], []
            if t > 0 and t % COMPACT_PERIOD_MS == 0:
                e["store"].compact(t)

    # -- analytics hooks

    def _segments(self, t: int) -> None:
        rng = self.rng["segments"]
        for sid in sorted(self.sc.segments):
            spec = self.sc.segments[sid]
            factor, density = CONGESTION[spec.congestion]
            speed = max(0.1, spec.segment.speed_limit * factor * float(rng.normal(1.0, 0.08)))
            cpm = max(0.0, density * float(rng.normal(1.0, 0.12)))
            self.segment_samples.append(SegmentSample(sid, (t - SEGMENT_WINDOW_MS, t), speed, cpm))

    def _behavior(self, t: int) -> None:
        for v in self.vehicles:
            v.behavior_window.append(v.state(t))
            if t > 0 and t % BEHAVIOR_WINDOW_MS == 0:
                window, v.behavior_window = v.behavior_window, [v.behavior_window[-1]]
                seg_id = v.seg_ids[v.route.segment_index(v.s)]
                cat = classify_driving_behavior(window, self.sc.segments[seg_id].segment, BehaviorParams())
                self.m.behavior.append((t - BEHAVIOR_WINDOW_MS, t, v.spec.id, seg_id,
                                        float(np.mean([w.speed for w in window])), cat.speed.value, cat.safety.value))

    def _collisions(self, t: int) -> None:
        params = CollisionParams()
        for v in self.vehicles:
            if len(v.last_two) < 2:
                continue
            for u in self.vrus:
                if len(u.last_two) < 2 or haversine_distance(v.pos, u.pos) > 80.0:
                    continue
                res = predict_collision(MotionTrack(v.spec.id, v.last_two), MotionTrack(u.spec.id, u.last_two),
                                        params, sequence=len(self.m.collisions) + 1)
                if res is None:
                    continue
                key = (v.spec.id, u.spec.id)
                if t - self.collision_last.get(key, -10**9) < 5000:
                    continue
                self.collision_last[key] = t
                w, denm = res
                self.m.collisions.append((t, w.vehicle_id, w.vru_id, w.predicted_conflict_pos.lat,
                                          w.predicted_conflict_pos.lon, w.time_to_conflict, w.min_distance,
                                          len(encode(denm))))

    def _ev(self, ev: _Vehicle, t: int) -> None:
        receivers = [(o.spec.id, o.pos) for o in self.vehicles if o is not ev]
        receivers += [(u.spec.id, u.pos) for u in self.vrus]
        receivers += [(n.id, n.pos) for n in self.sc.nodes]
        topo = EvTopology(self.rsu_pos, ev.route, receivers)
        self.ev_seq += 1
        try:
            events = ev_disseminate(ev.state(t), topo, EvLinkModel(), self.rng["ev"], t, self.ev_seq)
        except NoRsuInRange as exc:
            events = exc.events
        for e in events:
            node = self.rsu_name.get(int(e.node_id), e.node_id) if e.node_id.isdigit() else e.node_id
            for rcv, lat, hops in zip(e.receivers, e.latency_ms, e.hops):
                self.m.dissemination_events.append((t, e.denm.sequence, e.transmitter.value, node, rcv, lat,
                                                    "+".join(f"{h:.3f}" for h in hops)))

    # -- probes

    def _probe(self, v: _Vehicle, t: int) -> None:
        for rid in sorted(v.table):
            e = v.table[rid]
            if e.last_seen == t - t % self.sc.beacon_period_ms:
                self.m.rssi_samples.append((t, v.spec.id, v.pos.lat, v.pos.lon, self.rsu_name[rid], e.last_rssi))
        target = v.decision.target
        if target is None:
            return
        rng = self.rng["probe"]
        if isinstance(target, Rsu):
            pos = self.rsu_pos[target.rsu_id]
            d = haversine_distance(v.pos, pos)
            rssi = self.shadow.rssi((v.sid, target.rsu_id), v.pos, d, self.g5, self.extra[target.rsu_id])
            mbps = link_throughput(rssi, RadioTech.ITS_G5, self.g5)
            name = self.rsu_name[target.rsu_id]
        else:
            d, rssi = None, None
            mbps = self.sc.coverage.throughput(target.tech) * float(rng.uniform(0.6, 1.0))
            name = target.tech.value
        payload = bytes([0x45, 0x00]) + v.sid.to_bytes(4, "big") + t.to_bytes(8, "big")
        out = self.controller.downlink(frame(payload, FrameKind.DATA), v.sid)
        delivered = isinstance(out, ForwardTo) and out.target == target
        if not delivered:
            mbps = 0.0
        self.m.throughput_trace.append((t, v.spec.id, name, v.decision.tech.value, v.pos.lat, v.pos.lon,
                                        d, rssi, mbps, int(delivered)))

    # -- wrap-up

    def _finish(self) -> None:
        m = self.m
        sink_counts: dict = {}
        for key in self.sink.keys():
            sink_counts[key] = sink_counts.get(key, 0) + 1
        for v in self.vehicles:
            if v.queue is None:
                continue
            evicted = set(v.queue.evicted_keys())
            for key in v.generated:
                m.pipeline_audit.append((v.spec.id, key[0], key[1], sink_counts.get(key, 0), int(key in evicted)))
            m.counters[f"queue_left_{v.spec.id}"] = len(v.queue)
            v.queue.close()
        if len(self.segment_samples) >= 3:
            try:
                res = congestion_clusters(self.segment_samples, 3, seed=self.seed)
                levels = res.levels()
                for s, c, lv in zip(self.segment_samples, res.assignments, levels):
                    m.congestion.append((s.window[0], s.window[1], s.segment_id, s.mean_speed, s.count_per_meter, c, lv))
            except DegenerateData:
                pass
        c = self.controller
        m.counters.update({
            "control_frames": self.control_frames, "control_frames_via_data": self.control_via_data,
            "data_frames_parsed_as_obuinfo": c.obuinfo_via_data, "black_holes": c.black_holes,
            "steady_black_holes": c.steady_black_holes, "misrouted": c.misrouted,
            "cloud_records": len(self.sink.records), "ingest_replays": self.ingest.replays,
            "bus_messages": self.cloud_bus.published,
        })
        m.manifest = {
            "scenario": self.sc.name, "seed": self.seed, "run_id": self.rid, "config_hash": self.sc.config_hash,
            "duration_s": self.duration_ms / 1000, "tick_ms": self.tick, "cipher": self.sc.cipher,
            "test_mode": self.sc.cipher == "Null",
            "rsus": {n.id: [n.pos.lat, n.pos.lon] for n in self.rsus}, "rsu_range_m": self.g5.max_range_hint,
            "versions": {"vanetsim": __version__, "numpy": np.__version__, "format": 1},
            "counters": dict(sorted(m.counters.items())),
        }


def _target_str(t) -> str:
    return "none" if t is None else str(t)


def run(scenario: Scenario, seed: int | None = None, duration_s: float | None = None,
        hooks: Hooks | None = None) -> MetricsBundle:
    return Simulation(scenario, seed, duration_s, hooks).run()
