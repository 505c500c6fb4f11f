"""Compact fixed-layout wire codecs for CAM, DENM, VAM and OBUInfo.

Every message is ``kind:u8 | body_len:u8 | body``; multi-byte fields are
big-endian. The exact layout is documented in ``docs/wire-format.md``.
Values are stored in fixed point (micro-degrees, centi-m/s, deci-degrees,
decimetres), so the round-trip identity holds on that grid.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Union

from .errors import (
    FieldOutOfRange,
    InvariantViolation,
    Truncated,
    UnknownEthertype,
    UnknownKind,
)
from .geo import GeoPosition, StationType

ETHERTYPE_OBUINFO = 0xBBBB
ETHERTYPE_IPV4 = 0x0800


class MessageKind(enum.IntEnum):
    CAM = 0x01
    DENM = 0x02
    VAM = 0x03
    OBUINFO = 0x04


class EventType(enum.IntEnum):
    """DENM cause codes. Codes outside this enum decode to a plain ``int``."""

    ACCIDENT = 2
    QUEUE_END = 27
    EMERGENCY_VEHICLE_APPROACHING = 95
    COLLISION_RISK = 97


class SizeWeightClass(enum.IntEnum):
    LIGHT_VRU = 1
    HEAVY_VRU = 2


class VruProfile(enum.IntEnum):
    PEDESTRIAN = 1
    CYCLIST = 2
    MOTORCYCLIST = 3
    ANIMAL = 4


@dataclass(frozen=True)
class Cam:
    station_id: int
    station_type: StationType
    pos: GeoPosition
    speed: float
    heading: float
    status: int = 0
    generation_time: int = 0


@dataclass(frozen=True)
class Denm:
    originator_id: int
    event_type: Union[EventType, int]
    event_pos: GeoPosition
    detection_time: int
    validity_duration: int
    sequence: int


@dataclass(frozen=True)
class Vam:
    station_id: int
    pos: GeoPosition
    altitude: float
    heading: float
    speed: float
    orientation: float
    direction: float
    size_weight_class: SizeWeightClass = SizeWeightClass.LIGHT_VRU
    vru_profile: VruProfile = VruProfile.PEDESTRIAN


@dataclass(frozen=True)
class ObuInfo:
    inner: Cam
    rssi: int
    reporting_rsu: int


Message = Union[Cam, Denm, Vam, ObuInfo]

# -- fixed-point helpers ----------------------------------------------------

_POS = struct.Struct(">iih")          # lat µdeg, lon µdeg, alt dm
_CAM = struct.Struct(">IB10sHHBI")    # id, type, pos, speed, heading, status, gen time
_DENM = struct.Struct(">IHB10sIH")    # originator, seq, cause, pos, detection, validity
_VAM = struct.Struct(">I10shHHHHBB")  # id, pos, altitude, heading, speed, orient, dir, class, profile
_OBU_HEAD = struct.Struct(">bI")      # rssi, reporting rsu


def _fixed(value: float, scale: float, lo: int, hi: int, name: str) -> int:
    if isinstance(value, float) and not math.isfinite(value):
        raise InvariantViolation(f"{name} is not finite")
    q = round(value * scale)
    if not lo <= q <= hi:
        raise InvariantViolation(f"{name}={value} outside encodable range")
    return q


def _angle(value: float, name: str) -> int:
    if not 0.0 <= value < 360.0:
        raise InvariantViolation(f"{name}={value} outside [0, 360)")
    return round(value * 10) % 3600  # 359.96 and up is north again


def _u(value: int, bits: int, name: str) -> int:
    if not isinstance(value, int) or not 0 <= value < (1 << bits):
        raise InvariantViolation(f"{name}={value!r} is not a u{bits}")
    return value


def _pack_pos(p: GeoPosition) -> bytes:
    return _POS.pack(
        _fixed(p.lat, 1e6, -90_000_000, 90_000_000, "lat"),
        _fixed(p.lon, 1e6, -180_000_000, 180_000_000, "lon"),
        _fixed(p.alt, 10, -32768, 32767, "alt"),
    )


def _unpack_pos(raw: bytes) -> GeoPosition:
    lat, lon, alt = _POS.unpack(raw)
    if not -90_000_000 <= lat <= 90_000_000 or not -180_000_000 <= lon <= 180_000_000:
        raise FieldOutOfRange(f"position ({lat}, {lon}) µdeg out of range")
    return GeoPosition(lat / 1e6, lon / 1e6, alt / 10)


def _check_angle(raw: int, name: str) -> float:
    if raw >= 3600:
        raise FieldOutOfRange(f"{name} {raw / 10} >= 360")
    return raw / 10


def _enum(cls, raw: int, name: str):
    try:
        return cls(raw)
    except ValueError:
        raise FieldOutOfRange(f"unknown {name} code {raw}") from None


# -- bodies -----------------------------------------------------------------

def _cam_body(m: Cam) -> bytes:
    if not isinstance(m.station_type, StationType):
        raise InvariantViolation(f"station_type {m.station_type!r} is not a StationType")
    if m.speed < 0:
        raise InvariantViolation("CAM speed must be non-negative")
    return _CAM.pack(
        _u(m.station_id, 32, "station_id"),
        int(m.station_type),
        _pack_pos(m.pos),
        _fixed(m.speed, 100, 0, 0xFFFF, "speed"),
        _angle(m.heading, "heading"),
        _u(m.status, 8, "status"),
        _u(m.generation_time, 32, "generation_time"),
    )


def _cam_from(body: bytes) -> Cam:
    sid, stype, pos, speed, heading, status, gen = _CAM.unpack(body)
    return Cam(
        station_id=sid,
        station_type=_enum(StationType, stype, "station type"),
        pos=_unpack_pos(pos),
        speed=speed / 100,
        heading=_check_angle(heading, "heading"),
        status=status,
        generation_time=gen,
    )


def _denm_body(m: Denm) -> bytes:
    if m.validity_duration <= 0:
        raise InvariantViolation("DENM validity_duration must be positive")
    return _DENM.pack(
        _u(m.originator_id, 32, "originator_id"),
        _u(m.sequence, 16, "sequence"),
        _u(int(m.event_type), 8, "event_type"),
        _pack_pos(m.event_pos),
        _u(m.detection_time, 32, "detection_time"),
        _u(m.validity_duration, 16, "validity_duration"),
    )


def _denm_from(body: bytes) -> Denm:
    orig, seq, cause, pos, det, validity = _DENM.unpack(body)
    if validity == 0:
        raise FieldOutOfRange("DENM validity_duration is zero")
    try:
        event = EventType(cause)
    except ValueError:
        event = cause
    return Denm(orig, event, _unpack_pos(pos), det, validity, seq)


def _vam_body(m: Vam) -> bytes:
    if m.speed < 0:
        raise InvariantViolation("VAM speed must be non-negative")
    if not isinstance(m.size_weight_class, SizeWeightClass) or not isinstance(m.vru_profile, VruProfile):
        raise InvariantViolation("VAM class/profile must be enum members")
    return _VAM.pack(
        _u(m.station_id, 32, "station_id"),
        _pack_pos(m.pos),
        _fixed(m.altitude, 10, -32768, 32767, "altitude"),
        _angle(m.heading, "heading"),
        _fixed(m.speed, 100, 0, 0xFFFF, "speed"),
        _angle(m.orientation, "orientation"),
        _angle(m.direction, "direction"),
        int(m.size_weight_class),
        int(m.vru_profile),
    )


def _vam_from(body: bytes) -> Vam:
    sid, pos, alt, heading, speed, orient, direction, swc, profile = _VAM.unpack(body)
    return Vam(
        station_id=sid,
        pos=_unpack_pos(pos),
        altitude=alt / 10,
        heading=_check_angle(heading, "heading"),
        speed=speed / 100,
        orientation=_check_angle(orient, "orientation"),
        direction=_check_angle(direction, "direction"),
        size_weight_class=_enum(SizeWeightClass, swc, "size/weight class"),
        vru_profile=_enum(VruProfile, profile, "VRU profile"),
    )


def _obu_body(m: ObuInfo) -> bytes:
    if not -127 <= m.rssi <= 0:
        raise InvariantViolation(f"rssi {m.rssi} outside [-127, 0]")
    return _OBU_HEAD.pack(int(m.rssi), _u(m.reporting_rsu, 32, "reporting_rsu")) + encode(m.inner)


def _obu_from(body: bytes) -> ObuInfo:
    rssi, rsu = _OBU_HEAD.unpack(body[: _OBU_HEAD.size])
    if not -127 <= rssi <= 0:
        raise FieldOutOfRange(f"rssi {rssi} outside [-127, 0]")
    inner = decode(body[_OBU_HEAD.size:], MessageKind.CAM)
    return ObuInfo(inner, rssi, rsu)


_BODY_LEN = {
    MessageKind.CAM: _CAM.size,
    MessageKind.DENM: _DENM.size,
    MessageKind.VAM: _VAM.size,
    MessageKind.OBUINFO: _OBU_HEAD.size + 2 + _CAM.size,
}
_ENCODERS = {Cam: (MessageKind.CAM, _cam_body), Denm: (MessageKind.DENM, _denm_body),
             Vam: (MessageKind.VAM, _vam_body), ObuInfo: (MessageKind.OBUINFO, _obu_body)}
_DECODERS = {MessageKind.CAM: _cam_from, MessageKind.DENM: _denm_from,
             MessageKind.VAM: _vam_from, MessageKind.OBUINFO: _obu_from}


def encoded_size(kind: MessageKind) -> int:
    return 2 + _BODY_LEN[kind]


def encode(msg: Message) -> bytes:
    try:
        kind, body_fn = _ENCODERS[type(msg)]
    except KeyError:
        raise TypeError(f"cannot encode {type(msg).__name__}") from None
    body = body_fn(msg)
    return bytes((kind, len(body))) + body


def decode(data: bytes, expected_kind: MessageKind | None = None) -> Message:
    """Parse one message. Raises a ``DecodeError`` subclass on bad input."""
    data = bytes(data)
    if len(data) < 2:
        raise Truncated(f"need at least 2 header bytes, got {len(data)}")
    try:
        kind = MessageKind(data[0])
    except ValueError:
        raise UnknownKind(f"unknown message kind tag 0x{data[0]:02x}") from None
    if expected_kind is not None and kind != expected_kind:
        raise UnknownKind(f"expected {MessageKind(expected_kind).name}, got {kind.name}")
    declared = data[1]
    if declared != _BODY_LEN[kind]:
        raise FieldOutOfRange(f"{kind.name} body length {declared}, expected {_BODY_LEN[kind]}")
    if len(data) < 2 + declared:
        raise Truncated(f"{kind.name} needs {2 + declared} bytes, got {len(data)}")
    if len(data) > 2 + declared:
        raise FieldOutOfRange(f"{len(data) - 2 - declared} trailing bytes after {kind.name}")
    return _DECODERS[kind](data[2:])


# -- link-layer framing -----------------------------------------------------

class FrameKind(enum.Enum):
    CONTROL = "control"
    DATA = "data"


_ETHERTYPES = {FrameKind.CONTROL: ETHERTYPE_OBUINFO, FrameKind.DATA: ETHERTYPE_IPV4}


@dataclass(frozen=True)
class Frame:
    ethertype: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(">H", self.ethertype) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Frame":
        if len(raw) < 2:
            raise Truncated("frame shorter than its ethertype")
        return cls(struct.unpack(">H", raw[:2])[0], bytes(raw[2:]))


def frame(msg_bytes: bytes, kind: FrameKind) -> Frame:
    return Frame(_ETHERTYPES[kind], bytes(msg_bytes))


def unframe(f: Frame) -> tuple[FrameKind, bytes]:
    for kind, et in _ETHERTYPES.items():
        if f.ethertype == et:
            return kind, f.payload
    raise UnknownEthertype(f"ethertype 0x{f.ethertype:04x} is neither OBUInfo nor IPv4")


# -- smartphone station-type switching ------------------------------------

WALKING_SPEED_LIMIT = 3.0   # m/s
PROMOTION_HOLD_S = 5.0


def classify_station_type(
    speed: float,
    current: StationType,
    threshold: float = WALKING_SPEED_LIMIT,
) -> StationType:
    """Single-observation rule: a pedestrian moving faster than walking pace is a vehicle."""
    if speed < 0:
        raise ValueError("speed must be non-negative")
    if current == StationType.PEDESTRIAN and speed > threshold:
        return StationType.CAR
    return current


class StationTypeClassifier:
    """Streaming variant with a hold time so jogging does not cause flapping.

    Only a device that started as a pedestrian is ever promoted, and it is
    demoted back once it has been at walking pace for the same hold time.
    """

    def __init__(self, base: StationType, threshold: float = WALKING_SPEED_LIMIT,
                 hold_s: float = PROMOTION_HOLD_S):
        self.base = base
        self.current = base
        self.threshold = threshold
        self.hold_ms = hold_s * 1000
        self._since: int | None = None

    def update(self, speed: float, now_ms: int) -> StationType:
        if self.base != StationType.PEDESTRIAN:
            return self.current
        candidate = classify_station_type(speed, StationType.PEDESTRIAN, self.threshold)
        if candidate == self.current:
            self._since = None
        elif self._since is None:
            self._since = now_ms
        elif now_ms - self._since >= self.hold_ms:
            self.current = candidate
            self._since = None
        return self.current
