"""Geographic primitives, road segments, routes and route-following motion.

All geometry is on a sphere of radius 6 371 km. Internally positions are
handled as unit vectors so that interpolation and projection along a
great-circle segment stay exact to well below a micrometre.
"""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

from .errors import DegenerateInput, InvariantViolation, OffRoute

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_SNAP_TOLERANCE_M = 25.0


class StationType(enum.IntEnum):
    """ITS station types (codes follow the ETSI StationType numbering)."""

    PEDESTRIAN = 1
    CYCLIST = 2
    CAR = 5
    BUS = 6
    GARBAGE_TRUCK = 8
    EMERGENCY_VEHICLE = 10

    @property
    def is_vru(self) -> bool:
        return self in (StationType.PEDESTRIAN, StationType.CYCLIST)

    @classmethod
    def parse(cls, name: str) -> "StationType":
        key = name.replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.name.replace("_", "").lower() == key:
                return member
        raise ValueError(f"unknown station type {name!r}")


@dataclass(frozen=True)
class GeoPosition:
    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or math.isnan(self.lat):
            raise InvariantViolation(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0) or math.isnan(self.lon):
            raise InvariantViolation(f"longitude {self.lon} outside [-180, 180]")

    def to_vector(self) -> tuple[float, float, float]:
        phi, lam = math.radians(self.lat), math.radians(self.lon)
        c = math.cos(phi)
        return (c * math.cos(lam), c * math.sin(lam), math.sin(phi))

    @classmethod
    def from_vector(cls, v: Sequence[float], alt: float = 0.0) -> "GeoPosition":
        x, y, z = v
        lat = math.degrees(math.atan2(z, math.hypot(x, y)))
        lon = math.degrees(math.atan2(y, x))
        return cls(lat, lon, alt)


@dataclass(frozen=True)
class VehicleState:
    id: str
    pos: GeoPosition
    speed: float
    heading: float
    accel: float = 0.0
    timestamp: int = 0
    station_type: StationType = StationType.CAR

    def __post_init__(self):
        if self.speed < 0 or math.isnan(self.speed):
            raise InvariantViolation(f"negative speed {self.speed}")
        object.__setattr__(self, "heading", normalize_heading(self.heading))


def normalize_heading(deg: float) -> float:
    h = math.fmod(deg, 360.0)
    if h < 0:
        h += 360.0
    # fmod of a value just below 0 can round up to 360.0
    return 0.0 if h >= 360.0 else h


# -- vector helpers ---------------------------------------------------------

def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _norm(a):
    return math.sqrt(_dot(a, a))


def _angle(a, b) -> float:
    """Angle between unit vectors, well conditioned at small angles."""
    return math.atan2(_norm(_cross(a, b)), _dot(a, b))


# -- scalar operations ------------------------------------------------------

def haversine_distance(a: GeoPosition, b: GeoPosition) -> float:
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def bearing(a: GeoPosition, b: GeoPosition) -> float:
    """Initial great-circle bearing from ``a`` to ``b`` in [0, 360)."""
    if a.lat == b.lat and a.lon == b.lon:
        raise DegenerateInput("bearing between identical positions")
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dlam = math.radians(b.lon - a.lon)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return normalize_heading(math.degrees(math.atan2(y, x)))


def destination(start: GeoPosition, heading_deg: float, distance_m: float) -> GeoPosition:
    """Point reached travelling ``distance_m`` along a great circle."""
    delta = distance_m / EARTH_RADIUS_M
    theta = math.radians(heading_deg)
    phi1, lam1 = math.radians(start.lat), math.radians(start.lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    lon = (math.degrees(lam2) + 540.0) % 360.0 - 180.0
    return GeoPosition(math.degrees(phi2), lon, start.alt)


def final_bearing(a: GeoPosition, b: GeoPosition) -> float:
    """Course on arrival at ``b`` when travelling the great circle from ``a``."""
    return normalize_heading(bearing(b, a) + 180.0)


def interpolate(a: GeoPosition, b: GeoPosition, fraction: float) -> GeoPosition:
    """Point at ``fraction`` of the great-circle arc from ``a`` to ``b``."""
    va, vb = a.to_vector(), b.to_vector()
    omega = _angle(va, vb)
    alt = a.alt + (b.alt - a.alt) * fraction
    if omega == 0.0:
        return GeoPosition(a.lat, a.lon, alt)
    s = math.sin(omega)
    wa = math.sin((1 - fraction) * omega) / s
    wb = math.sin(fraction * omega) / s
    v = (wa * va[0] + wb * vb[0], wa * va[1] + wb * vb[1], wa * va[2] + wb * vb[2])
    return GeoPosition.from_vector(v, alt)


def heading_alignment(v: VehicleState, target: GeoPosition) -> float:
    """Cosine between the vehicle heading and the bearing towards ``target``.

    +1 means driving straight at the target, -1 straight away from it.
    """
    a = v.pos
    if a.lat == target.lat and a.lon == target.lon:
        raise DegenerateInput("vehicle sits on the target")
    # same formula as bearing(); the cosine makes normalizing unnecessary
    phi1, phi2 = math.radians(a.lat), math.radians(target.lat)
    dlam = math.radians(target.lon - a.lon)
    c2 = math.cos(phi2)
    y = math.sin(dlam) * c2
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * c2 * math.cos(dlam)
    return math.cos(math.radians(v.heading) - math.atan2(y, x))


def to_local_xy(origin: GeoPosition, p: GeoPosition) -> tuple[float, float]:
    """East/north metres of ``p`` in an equirectangular frame at ``origin``."""
    x = math.radians(p.lon - origin.lon) * EARTH_RADIUS_M * math.cos(math.radians(origin.lat))
    y = math.radians(p.lat - origin.lat) * EARTH_RADIUS_M
    return x, y


def from_local_xy(origin: GeoPosition, x: float, y: float) -> GeoPosition:
    lat = origin.lat + math.degrees(y / EARTH_RADIUS_M)
    lon = origin.lon + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(origin.lat))))
    return GeoPosition(lat, lon)


# -- road network -----------------------------------------------------------

@dataclass(frozen=True)
class RoadSegment:
    id: str
    endpoints: tuple[GeoPosition, GeoPosition]
    length: float
    speed_limit: float
    friction: float = 0.8

    def __post_init__(self):
        if self.length <= 0:
            raise InvariantViolation(f"segment {self.id}: non-positive length")
        true_len = haversine_distance(*self.endpoints)
        if abs(true_len - self.length) > 0.01 * true_len:
            raise InvariantViolation(
                f"segment {self.id}: length {self.length} differs from endpoint distance {true_len:.2f} by >1%"
            )
        if not 0.0 <= self.friction <= 1.0:
            raise InvariantViolation(f"segment {self.id}: friction outside [0, 1]")

    @classmethod
    def between(cls, id: str, a: GeoPosition, b: GeoPosition, speed_limit: float, friction: float = 0.8):
        return cls(id, (a, b), haversine_distance(a, b), speed_limit, friction)


@dataclass(frozen=True)
class _Leg:
    start: GeoPosition
    end: GeoPosition
    va: tuple
    vb: tuple
    normal: tuple
    length: float
    bearing: float


@dataclass(frozen=True)
class Route:
    waypoints: tuple[GeoPosition, ...]
    segment_speed_limits: tuple[float, ...] = ()
    loop: bool = False
    _legs: tuple = field(init=False, repr=False, compare=False)
    _cum: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = tuple(self.waypoints)
        object.__setattr__(self, "waypoints", pts)
        if len(pts) < 2:
            raise InvariantViolation("route needs at least two waypoints")
        pairs = list(zip(pts, pts[1:]))
        if self.loop and pts[0] != pts[-1]:
            pairs.append((pts[-1], pts[0]))
        legs, cum = [], [0.0]
        for a, b in pairs:
            if a.lat == b.lat and a.lon == b.lon:
                raise InvariantViolation("consecutive route waypoints coincide")
            va, vb = a.to_vector(), b.to_vector()
            n = _cross(va, vb)
            nn = _norm(n)
            n = (n[0] / nn, n[1] / nn, n[2] / nn)
            length = _angle(va, vb) * EARTH_RADIUS_M
            legs.append(_Leg(a, b, va, vb, n, length, bearing(a, b)))
            cum.append(cum[-1] + length)
        limits = tuple(self.segment_speed_limits)
        if limits and len(limits) != len(legs):
            raise InvariantViolation(f"route has {len(legs)} segments but {len(limits)} speed limits")
        object.__setattr__(self, "segment_speed_limits", limits)
        object.__setattr__(self, "_legs", tuple(legs))
        object.__setattr__(self, "_cum", tuple(cum))

    @classmethod
    def from_segments(cls, segments: Sequence[RoadSegment], loop: bool = False) -> "Route":
        pts = [segments[0].endpoints[0]] + [s.endpoints[1] for s in segments]
        limits = tuple(s.speed_limit for s in segments)
        if loop and pts[0] == pts[-1]:
            return cls(tuple(pts), limits, True)
        if loop:
            raise InvariantViolation("loop route must end where it starts")
        return cls(tuple(pts), limits, False)

    @property
    def length(self) -> float:
        return self._cum[-1]

    @property
    def n_segments(self) -> int:
        return len(self._legs)

    def segment_index(self, s: float) -> int:
        s = self._wrap(s)
        i = bisect.bisect_right(self._cum, s) - 1
        return min(max(i, 0), len(self._legs) - 1)

    def speed_limit_at(self, s: float) -> float | None:
        if not self.segment_speed_limits:
            return None
        return self.segment_speed_limits[self.segment_index(s)]

    def _wrap(self, s: float) -> float:
        if self.loop:
            s = math.fmod(s, self.length)
            if s < 0:
                s += self.length
            return s
        return min(max(s, 0.0), self.length)

    def point_at(self, s: float) -> GeoPosition:
        s = self._wrap(s)
        i = self.segment_index(s)
        leg = self._legs[i]
        return interpolate(leg.start, leg.end, (s - self._cum[i]) / leg.length)

    def pose_at(self, s: float) -> tuple[GeoPosition, float]:
        """``(point_at(s), heading_at(s))`` with a single interpolation."""
        s = self._wrap(s)
        i = self.segment_index(s)
        leg = self._legs[i]
        pos = interpolate(leg.start, leg.end, (s - self._cum[i]) / leg.length)
        if self._cum[i + 1] - s < 1e-3:
            return pos, final_bearing(leg.start, leg.end)
        if s - self._cum[i] < 1e-3:
            return pos, leg.bearing
        return pos, bearing(pos, leg.end)

    def heading_at(self, s: float) -> float:
        """Local course of the segment containing arc-length ``s``."""
        s = self._wrap(s)
        i = self.segment_index(s)
        leg = self._legs[i]
        remaining = self._cum[i + 1] - s
        if remaining < 1e-3:
            return final_bearing(leg.start, leg.end)
        if s - self._cum[i] < 1e-3:
            return leg.bearing
        return bearing(interpolate(leg.start, leg.end, (s - self._cum[i]) / leg.length), leg.end)

    def project(self, pos: GeoPosition) -> tuple[float, float]:
        """Arc-length of the closest route point and the distance to it."""
        p = pos.to_vector()
        best = (math.inf, 0.0)
        for i, leg in enumerate(self._legs):
            cross_ang = math.asin(max(-1.0, min(1.0, _dot(p, leg.normal))))
            q = (p[0] - _dot(p, leg.normal) * leg.normal[0],
                 p[1] - _dot(p, leg.normal) * leg.normal[1],
                 p[2] - _dot(p, leg.normal) * leg.normal[2])
            c = _cross(leg.va, q)
            along = math.atan2(math.copysign(_norm(c), _dot(c, leg.normal)), _dot(leg.va, q)) * EARTH_RADIUS_M
            if along <= 0.0:
                d, s = _angle(p, leg.va) * EARTH_RADIUS_M, self._cum[i]
            elif along >= leg.length:
                d, s = _angle(p, leg.vb) * EARTH_RADIUS_M, self._cum[i + 1]
            else:
                d, s = abs(cross_ang) * EARTH_RADIUS_M, self._cum[i] + along
            if d < best[0] - 1e-9:
                best = (d, s)
        return best[1], best[0]


def advance(
    state: VehicleState,
    route: Route,
    dt: float,
    snap_tolerance: float = DEFAULT_SNAP_TOLERANCE_M,
) -> VehicleState:
    """Move ``state`` ``speed * dt`` metres along ``route``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s, off = route.project(state.pos)
    if off > snap_tolerance:
        raise OffRoute(f"{state.id} is {off:.1f} m from its route (tolerance {snap_tolerance} m)")
    s_new = s + state.speed * dt
    speed = state.speed
    if not route.loop and s_new >= route.length:
        s_new, speed = route.length, 0.0
    return replace(
        state,
        pos=route.point_at(s_new),
        heading=route.heading_at(s_new),
        speed=speed,
        timestamp=state.timestamp + int(round(dt * 1000)),
    )
