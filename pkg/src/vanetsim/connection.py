"""OBU-side point-of-access selection.

An RSU's score is its last RSSI plus a heading bonus, so an RSU ahead of
the vehicle beats an equally loud one behind it. Handovers between RSUs
need a margin and a minimum dwell time. Without a usable RSU the OBU
falls back to 5G, then LTE.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Union

from .errors import InvariantViolation, StalePoA
from .geo import GeoPosition, VehicleState, heading_alignment
from .radio import RadioTech

_ALLOWED_TECHS = (RadioTech.ITS_G5, RadioTech.FIVE_G, RadioTech.LTE)


@dataclass(frozen=True)
class PoAInfo:
    rsu_id: int
    pos: GeoPosition
    tech: RadioTech
    last_rssi: float
    last_seen: int

    def __post_init__(self):
        if self.tech not in _ALLOWED_TECHS:
            raise InvariantViolation(f"{self.tech} cannot be a point of access")


@dataclass(frozen=True)
class CmParams:
    attach_threshold: float = -90.0  # dBm (score)
    handover_margin: float = 6.0     # dB
    stale_after: int = 3000          # ms
    min_dwell: int = 5000            # ms
    alignment_weight: float = 8.0    # dB

    def __post_init__(self):
        if self.handover_margin < 0 or self.min_dwell < 0:
            raise InvariantViolation("handover margin and dwell must be non-negative")


@dataclass(frozen=True)
class Rsu:
    rsu_id: int

    def __str__(self):
        return f"rsu:{self.rsu_id}"


@dataclass(frozen=True)
class Cellular:
    tech: RadioTech

    def __str__(self):
        return f"cellular:{self.tech.value}"


Target = Optional[Union[Rsu, Cellular]]


class Reason(str, enum.Enum):
    BEST_SCORE = "BestScore"
    HYSTERESIS = "Hysteresis"
    FALLBACK = "Fallback"
    NO_COVERAGE = "NoCoverage"


@dataclass(frozen=True)
class AttachmentDecision:
    target: Target
    reason: Reason
    since: int = 0  # ms at which the current target was first chosen

    @property
    def tech(self) -> RadioTech | None:
        if isinstance(self.target, Rsu):
            return RadioTech.ITS_G5
        if isinstance(self.target, Cellular):
            return self.target.tech
        return None


COLD_START = AttachmentDecision(None, Reason.NO_COVERAGE, 0)


def is_fresh(poa: PoAInfo, now: int, params: CmParams) -> bool:
    return now - poa.last_seen < params.stale_after


def score_poa(v: VehicleState, poa: PoAInfo, params: CmParams = CmParams()) -> float:
    if not is_fresh(poa, v.timestamp, params):
        raise StalePoA(f"PoA {poa.rsu_id} last seen {v.timestamp - poa.last_seen} ms ago")
    if v.pos.lat == poa.pos.lat and v.pos.lon == poa.pos.lon:
        alignment = 0.0
    else:
        alignment = heading_alignment(v, poa.pos)
    return poa.last_rssi + params.alignment_weight * alignment


def rank_rsus(v: VehicleState, candidates: Iterable[PoAInfo], params: CmParams) -> list[tuple[float, int]]:
    """Eligible (score, rsu_id) pairs, best first; ties go to the lowest id."""
    out = []
    now, w, floor, stale = v.timestamp, params.alignment_weight, params.attach_threshold, params.stale_after
    lat, lon = v.pos.lat, v.pos.lon
    for c in candidates:
        if c.tech != RadioTech.ITS_G5 or now - c.last_seen >= stale:
            continue
        # inlined score_poa
        if lat == c.pos.lat and lon == c.pos.lon:
            s = c.last_rssi
        else:
            s = c.last_rssi + w * heading_alignment(v, c.pos)
        if s >= floor:
            out.append((s, c.rsu_id))
    out.sort(key=lambda t: (-t[0], t[1]))
    return out


def select_attachment(
    v: VehicleState,
    candidates: Iterable[PoAInfo],
    current: AttachmentDecision = COLD_START,
    params: CmParams = CmParams(),
) -> AttachmentDecision:
    return select_and_rank(v, candidates, current, params)[0]


def select_and_rank(
    v: VehicleState,
    candidates: Iterable[PoAInfo],
    current: AttachmentDecision = COLD_START,
    params: CmParams = CmParams(),
) -> tuple[AttachmentDecision, list[tuple[float, int]]]:
    """``select_attachment`` plus the eligible-RSU ranking it was based on."""
    now = v.timestamp
    candidates = list(candidates)
    ranked = rank_rsus(v, candidates, params)

    def decide_r(target, reason):
        since = current.since if target == current.target else now
        return AttachmentDecision(target, reason, since), ranked

    held = None
    if isinstance(current.target, Rsu):
        held = {rid: sc for sc, rid in ranked}.get(current.target.rsu_id)
        if held is None:
            # below the attach threshold: a held RSU stays usable inside the margin band
            for c in candidates:
                if (c.rsu_id == current.target.rsu_id and c.tech == RadioTech.ITS_G5
                        and is_fresh(c, now, params)):
                    sc = score_poa(v, c, params)
                    if sc >= params.attach_threshold - params.handover_margin:
                        held = sc
                    break

    if ranked:
        best_score, best_id = ranked[0]
        if held is not None and best_id != current.target.rsu_id:
            beats = best_score - held >= params.handover_margin
            dwelt = now - current.since >= params.min_dwell
            if not (beats and dwelt):
                return decide_r(current.target, Reason.HYSTERESIS)
        return decide_r(Rsu(best_id), Reason.BEST_SCORE)
    if held is not None:
        return decide_r(current.target, Reason.HYSTERESIS)

    fresh_cells = {c.tech for c in candidates
                   if c.tech in (RadioTech.FIVE_G, RadioTech.LTE) and is_fresh(c, now, params)}
    for tech in (RadioTech.FIVE_G, RadioTech.LTE):
        if tech in fresh_cells:
            return decide_r(Cellular(tech), Reason.FALLBACK)
    return decide_r(None, Reason.NO_COVERAGE)


def cellular_candidates(techs: Iterable[RadioTech], pos: GeoPosition, now: int) -> list[PoAInfo]:
    """Pseudo-PoAs representing cellular coverage at ``pos``."""
    return [PoAInfo(0, pos, t, 0.0, now) for t in techs]
