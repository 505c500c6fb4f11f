"""Scenario files: TOML with road segments embedded as GeoJSON LineString features.

``load_scenario`` reports every problem it finds in one ValidationError
rather than stopping at the first.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .connection import CmParams
from .errors import InvariantViolation, ParseError, ValidationError
from .geo import GeoPosition, RoadSegment, Route, StationType, haversine_distance
from .radio import DEFAULT_CHANNELS, CellularCoverage, ChannelParams, RadioTech

BOX_TYPES = ("SmartLampPost", "WallBox")
NODE_SENSORS = ("radar", "camera", "wifi_probe")
CONGESTION = {"free": (1.0, 0.01), "moderate": (0.6, 0.05), "jammed": (0.2, 0.15)}  # speed factor, veh/m
CIPHERS = ("AuthenticatedHybrid", "Null")
JOIN_TOLERANCE_M = 1.0


@dataclass(frozen=True)
class Node:
    id: str
    station_id: int
    pos: GeoPosition
    box_type: str
    techs: tuple[RadioTech, ...]
    sensors: tuple[str, ...] = ()
    bridge_attenuation_db: float = 0.0
    radar_boresight: float = 0.0


@dataclass(frozen=True)
class SegmentSpec:
    segment: RoadSegment
    congestion: str = "free"

    @property
    def id(self) -> str:
        return self.segment.id


@dataclass(frozen=True)
class RouteSpec:
    id: str
    segment_ids: tuple[str, ...]
    loop: bool
    route: Route


@dataclass(frozen=True)
class VehicleSpec:
    id: str
    station_id: int
    route: str
    station_type: StationType
    obu: bool = True
    dcu: bool = False
    speed: float = 13.9
    start_m: float = 0.0
    cam_phase_ms: int = 0


@dataclass(frozen=True)
class VruSpec:
    id: str
    station_id: int
    station_type: StationType
    pos: GeoPosition
    heading: float
    speed: float
    leg_m: float = 20.0


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration_s: float
    tick_ms: int
    cam_period_ms: int
    beacon_period_ms: int
    probe_period_ms: int
    flush_period_s: float
    cipher: str
    link_fault_rate: float
    coverage: CellularCoverage
    channels: dict[RadioTech, ChannelParams]
    cm: CmParams
    horizon_s: float
    nodes: tuple[Node, ...]
    segments: dict[str, SegmentSpec]
    routes: dict[str, RouteSpec]
    vehicles: tuple[VehicleSpec, ...]
    vrus: tuple[VruSpec, ...]
    source_bytes: bytes = field(default=b"", repr=False)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.source_bytes).hexdigest()

    @property
    def rsus(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if RadioTech.ITS_G5 in n.techs)


class _Errors(list):
    def need(self, table: dict, key: str, where: str, kind=None):
        if key not in table:
            self.append(f"{where}: missing required key '{key}'")
            return None
        value = table[key]
        if kind is not None and (not isinstance(value, kind) or (kind is int and isinstance(value, bool))):
            self.append(f"{where}: '{key}' has the wrong type ({type(value).__name__})")
            return None
        return value


def _pos(errs: _Errors, lat, lon, where: str) -> GeoPosition | None:
    try:
        return GeoPosition(float(lat), float(lon))
    except (TypeError, ValueError, InvariantViolation) as exc:
        errs.append(f"{where}: bad position ({exc})")
        return None


def _station_type(errs: _Errors, name: Any, where: str) -> StationType | None:
    try:
        return StationType.parse(str(name))
    except (KeyError, ValueError):
        errs.append(f"{where}: unknown station type {name!r}")
        return None


def _channels(errs: _Errors, raw: dict) -> dict[RadioTech, ChannelParams]:
    out = dict(DEFAULT_CHANNELS)
    for name, overrides in raw.items():
        try:
            tech = RadioTech(name)
        except ValueError:
            errs.append(f"channel.{name}: unknown radio technology")
            continue
        try:
            out[tech] = out[tech].with_overrides(**overrides)
        except (TypeError, InvariantViolation) as exc:
            errs.append(f"channel.{name}: {exc}")
    return out


def _cm(errs: _Errors, raw: dict) -> CmParams:
    names = {"attach_threshold": "attach_threshold", "handover_margin": "handover_margin",
             "stale_after_ms": "stale_after", "min_dwell_ms": "min_dwell", "alignment_weight": "alignment_weight"}
    kw = {}
    for k, v in raw.items():
        if k not in names:
            errs.append(f"cm: unknown key '{k}'")
        else:
            kw[names[k]] = v
    try:
        return CmParams(**kw)
    except (TypeError, InvariantViolation) as exc:
        errs.append(f"cm: {exc}")
        return CmParams()


def _segment(errs: _Errors, raw: dict, i: int) -> SegmentSpec | None:
    where = f"segments[{i}]"
    sid = errs.need(raw, "id", where, str)
    where = f"segment {sid}" if sid else where
    geom = errs.need(raw, "geometry", where, dict)
    props = raw.get("properties", {})
    if geom is None or sid is None:
        return None
    coords = geom.get("coordinates")
    if geom.get("type") != "LineString" or not isinstance(coords, list) or len(coords) != 2:
        errs.append(f"{where}: geometry must be a two-point GeoJSON LineString")
        return None
    a = _pos(errs, coords[0][1], coords[0][0], where)
    b = _pos(errs, coords[1][1], coords[1][0], where)
    limit = props.get("speed_limit")
    if not isinstance(limit, (int, float)) or isinstance(limit, bool) or limit <= 0:
        errs.append(f"{where}: properties.speed_limit must be a positive number")
        return None
    congestion = props.get("congestion", "free")
    if congestion not in CONGESTION:
        errs.append(f"{where}: congestion must be one of {sorted(CONGESTION)}")
        return None
    if a is None or b is None:
        return None
    try:
        length = float(props.get("length", haversine_distance(a, b)))
        seg = RoadSegment(sid, (a, b), length, float(limit), float(props.get("friction", 0.8)))
    except InvariantViolation as exc:
        errs.append(f"{where}: {exc}")
        return None
    return SegmentSpec(seg, congestion)


def _route(errs: _Errors, raw: dict, i: int, segments: dict[str, SegmentSpec]) -> RouteSpec | None:
    where = f"routes[{i}]"
    rid = errs.need(raw, "id", where, str)
    where = f"route {rid}" if rid else where
    ids = errs.need(raw, "segments", where, list)
    if rid is None or ids is None:
        return None
    if not ids:
        errs.append(f"{where}: needs at least one segment")
        return None
    missing = [s for s in ids if s not in segments]
    for s in missing:
        errs.append(f"{where}: unknown segment '{s}'")
    if missing:
        return None
    segs = [segments[s].segment for s in ids]
    if raw.get("reverse", False):
        segs = [RoadSegment(s.id, (s.endpoints[1], s.endpoints[0]), s.length, s.speed_limit, s.friction)
                for s in reversed(segs)]
    loop = bool(raw.get("loop", False))
    for s1, s2 in zip(segs, segs[1:] + (segs[:1] if loop else [])):
        if haversine_distance(s1.endpoints[1], s2.endpoints[0]) > JOIN_TOLERANCE_M:
            errs.append(f"{where}: segments '{s1.id}' and '{s2.id}' are not connected")
            return None
    # snap joins exactly so the route is continuous
    snapped = [segs[0]]
    for s in segs[1:]:
        a = snapped[-1].endpoints[1]
        snapped.append(RoadSegment(s.id, (a, s.endpoints[1]), haversine_distance(a, s.endpoints[1]),
                                   s.speed_limit, s.friction))
    if loop:
        last = snapped[-1]
        snapped[-1] = RoadSegment(last.id, (last.endpoints[0], snapped[0].endpoints[0]),
                                  haversine_distance(last.endpoints[0], snapped[0].endpoints[0]),
                                  last.speed_limit, last.friction)
    try:
        route = Route.from_segments(snapped, loop)
    except InvariantViolation as exc:
        errs.append(f"{where}: {exc}")
        return None
    return RouteSpec(rid, tuple(s.id for s in segs), loop, route)


def parse_scenario(text: str | bytes, name: str = "<scenario>") -> Scenario:
    raw_bytes = text.encode() if isinstance(text, str) else bytes(text)
    try:
        doc = tomllib.loads(raw_bytes.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{name}: {exc}") from None
    errs = _Errors()

    seed = doc.get("seed")
    if seed is None:
        errs.append("missing required key 'seed' (runs must be reproducible)")
    elif not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        errs.append("seed must be an unsigned 64-bit integer")
    duration = doc.get("duration_s", 600)
    if not isinstance(duration, (int, float)) or duration <= 0:
        errs.append("duration_s must be positive")
    ints = {}
    for key, default in (("tick_ms", 100), ("cam_period_ms", 1000), ("beacon_period_ms", 100),
                         ("probe_period_ms", 1000)):
        v = doc.get(key, default)
        if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            errs.append(f"{key} must be a positive integer")
            v = default
        ints[key] = v
    for key in ("cam_period_ms", "beacon_period_ms", "probe_period_ms"):
        if ints[key] % ints["tick_ms"]:
            errs.append(f"{key} must be a multiple of tick_ms")
    cipher = doc.get("cipher", "AuthenticatedHybrid")
    if cipher not in CIPHERS:
        errs.append(f"cipher must be one of {CIPHERS}")
    fault = doc.get("link_fault_rate", 0.0)
    if not isinstance(fault, (int, float)) or not 0 <= fault < 1:
        errs.append("link_fault_rate must be in [0, 1)")
        fault = 0.0

    cell = doc.get("cellular", {})
    try:
        coverage = CellularCoverage(bool(cell.get("five_g", True)), bool(cell.get("lte", True)),
                                    cell.get("five_g_polygons", []), cell.get("lte_polygons", []))
    except Exception as exc:  # shapely raises several types for malformed rings
        errs.append(f"cellular: bad coverage polygon ({exc})")
        coverage = CellularCoverage()

    channels = _channels(errs, doc.get("channel", {}))
    cm = _cm(errs, doc.get("cm", {}))
    horizon = doc.get("controller", {}).get("horizon_s", 3.0)

    nodes, seen = [], set()
    for i, n in enumerate(doc.get("nodes", [])):
        where = f"nodes[{i}]"
        nid = errs.need(n, "id", where, str)
        where = f"node {nid}" if nid else where
        if nid in seen:
            errs.append(f"{where}: duplicate node id")
        seen.add(nid)
        sid = errs.need(n, "station_id", where, int)
        pos = _pos(errs, n.get("lat"), n.get("lon"), where)
        box = n.get("box_type", "SmartLampPost")
        if box not in BOX_TYPES:
            errs.append(f"{where}: box_type must be one of {BOX_TYPES}")
        techs = []
        for t in n.get("techs", ["ItsG5"]):
            try:
                techs.append(RadioTech(t))
            except ValueError:
                errs.append(f"{where}: unknown technology '{t}'")
        sensors = tuple(n.get("sensors", []))
        for s in sensors:
            if s not in NODE_SENSORS:
                errs.append(f"{where}: unknown sensor '{s}'")
        att = n.get("bridge_attenuation_db", 0.0)
        if not isinstance(att, (int, float)) or att < 0:
            errs.append(f"{where}: bridge_attenuation_db must be >= 0")
            att = 0.0
        if None not in (nid, sid, pos):
            nodes.append(Node(nid, sid, pos, box, tuple(techs), sensors, float(att),
                              float(n.get("radar_boresight", 0.0))))
    if len({n.station_id for n in nodes}) != len(nodes):
        errs.append("node station_id values must be unique")

    segments: dict[str, SegmentSpec] = {}
    for i, s in enumerate(doc.get("segments", [])):
        spec = _segment(errs, s, i)
        if spec is not None:
            if spec.id in segments:
                errs.append(f"segment {spec.id}: duplicate id")
            segments[spec.id] = spec
    routes: dict[str, RouteSpec] = {}
    for i, r in enumerate(doc.get("routes", [])):
        spec = _route(errs, r, i, segments)
        if spec is not None:
            routes[spec.id] = spec

    vehicles, vids = [], set()
    for i, v in enumerate(doc.get("vehicles", [])):
        where = f"vehicles[{i}]"
        vid = errs.need(v, "id", where, str)
        where = f"vehicle {vid}" if vid else where
        if vid in vids:
            errs.append(f"{where}: duplicate id")
        vids.add(vid)
        sid = errs.need(v, "station_id", where, int)
        route = errs.need(v, "route", where, str)
        if route is not None and route not in routes and route not in [r.get("id") for r in doc.get("routes", [])]:
            errs.append(f"{where}: unknown route '{route}'")
        st = _station_type(errs, v.get("type", "Car"), where)
        speed = v.get("speed", 13.9)
        if not isinstance(speed, (int, float)) or speed < 0:
            errs.append(f"{where}: speed must be >= 0")
        if None not in (vid, sid, route, st) and route in routes:
            vehicles.append(VehicleSpec(vid, sid, route, st, bool(v.get("obu", True)), bool(v.get("dcu", False)),
                                        float(speed), float(v.get("start_m", 0.0)), int(v.get("cam_phase_ms", 0))))

    vrus = []
    for i, u in enumerate(doc.get("vrus", [])):
        where = f"vrus[{i}]"
        uid = errs.need(u, "id", where, str)
        sid = errs.need(u, "station_id", where, int)
        pos = _pos(errs, u.get("lat"), u.get("lon"), where)
        st = _station_type(errs, u.get("profile", "Pedestrian"), where)
        if st is not None and not st.is_vru:
            errs.append(f"{where}: profile must be a vulnerable road user")
        if None not in (uid, sid, pos, st):
            vrus.append(VruSpec(uid, sid, st, pos, float(u.get("heading", 0.0)), float(u.get("speed", 1.4)),
                                float(u.get("leg_m", 20.0))))

    ids = [v.station_id for v in vehicles] + [u.station_id for u in vrus]
    if len(set(ids)) != len(ids):
        errs.append("vehicle/VRU station_id values must be unique")
    clash = set(ids) & {n.station_id for n in nodes}
    if clash:
        errs.append(f"station ids {sorted(clash)} are used by both nodes and road users")

    if errs:
        raise ValidationError(errs)
    return Scenario(
        name=str(doc.get("name", name)), seed=int(seed), duration_s=float(duration),
        tick_ms=ints["tick_ms"], cam_period_ms=ints["cam_period_ms"], beacon_period_ms=ints["beacon_period_ms"],
        probe_period_ms=ints["probe_period_ms"], flush_period_s=float(doc.get("flush_period_s", 10.0)),
        cipher=cipher, link_fault_rate=float(fault), coverage=coverage, channels=channels, cm=cm,
        horizon_s=float(horizon), nodes=tuple(nodes), segments=segments, routes=routes,
        vehicles=tuple(vehicles), vrus=tuple(vrus), source_bytes=raw_bytes,
    )


def load_scenario(path: str | Path) -> Scenario:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc}") from None
    return parse_scenario(data, p.stem)


def shipped_scenario_path() -> Path:
    return Path(str(resources.files("vanetsim") / "data" / "aveiro-subset.toml"))
