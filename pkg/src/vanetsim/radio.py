"""Stochastic link models: RSSI, delivery probability, throughput, LoRa airtime
and EU868 duty-cycle accounting. Cellular access is a coverage-polygon model.

Channel defaults and their calibration rationale are in docs/channel-defaults.md.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon

from .errors import InvariantViolation, PayloadTooLarge
from .geo import GeoPosition, haversine_distance


class RadioTech(str, enum.Enum):
    ITS_G5 = "ItsG5"
    WIFI = "Wifi"
    LTE = "Lte"
    FIVE_G = "FiveG"
    LORA = "Lora"


@dataclass(frozen=True)
class ChannelParams:
    tx_power: float             # dBm
    path_loss_exponent: float
    reference_loss_at_1m: float  # dB
    shadowing_sigma: float      # dB
    rssi_floor: float           # dBm, sensitivity
    max_range_hint: float       # m, beyond this no frame is decodable
    max_throughput: float       # Mbit/s
    p50: float                  # dBm at which half the frames get through
    slope: float                # dB, logistic scale

    def __post_init__(self):
        if not 1.6 <= self.path_loss_exponent <= 6:
            raise InvariantViolation(f"path loss exponent {self.path_loss_exponent} outside [1.6, 6]")
        if self.shadowing_sigma < 0:
            raise InvariantViolation("shadowing sigma must be >= 0")
        if self.slope <= 0:
            raise InvariantViolation("logistic slope must be > 0")

    def with_overrides(self, **kw) -> "ChannelParams":
        return replace(self, **kw)


DEFAULT_CHANNELS: dict[RadioTech, ChannelParams] = {
    RadioTech.ITS_G5: ChannelParams(23.0, 2.7, 47.0, 3.0, -99.0, 600.0, 10.5, -92.0, 3.0),
    RadioTech.WIFI: ChannelParams(20.0, 3.0, 40.0, 4.0, -95.0, 150.0, 50.0, -85.0, 3.0),
    RadioTech.LTE: ChannelParams(23.0, 3.5, 38.0, 6.0, -120.0, 5000.0, 15.0, -110.0, 4.0),
    RadioTech.FIVE_G: ChannelParams(23.0, 3.3, 38.0, 6.0, -115.0, 2000.0, 60.0, -105.0, 4.0),
    RadioTech.LORA: ChannelParams(14.0, 2.9, 40.0, 4.0, -137.0, 8000.0, 0.00098, -130.0, 2.0),
}


def rssi_at(
    tx: GeoPosition,
    rx: GeoPosition,
    tech: RadioTech,
    params: ChannelParams | None = None,
    rng: np.random.Generator | None = None,
    extra_loss_db: float = 0.0,
) -> float:
    """Log-distance path loss plus log-normal shadowing, clamped to [floor, tx_power]."""
    p = params or DEFAULT_CHANNELS[tech]
    return rssi_from_distance(haversine_distance(tx, rx), p, rng, extra_loss_db)


def rssi_from_distance(
    d: float,
    p: ChannelParams,
    rng: np.random.Generator | None = None,
    extra_loss_db: float = 0.0,
) -> float:
    value = p.tx_power - p.reference_loss_at_1m - 10 * p.path_loss_exponent * math.log10(max(d, 1.0))
    value -= extra_loss_db
    if p.shadowing_sigma > 0:
        if rng is None:
            raise ValueError("shadowing sigma > 0 requires an rng")
        value += rng.normal(0.0, p.shadowing_sigma)
    return min(max(value, p.rssi_floor), p.tx_power)


def delivery_probability(rssi: float, tech: RadioTech, params: ChannelParams | None = None) -> float:
    p = params or DEFAULT_CHANNELS[tech]
    z = (rssi - p.p50) / p.slope
    if z < -700:
        return 0.0
    return 1.0 / (1.0 + math.exp(-z))


def link_throughput(rssi: float, tech: RadioTech, params: ChannelParams | None = None) -> float:
    p = params or DEFAULT_CHANNELS[tech]
    if rssi <= p.rssi_floor:
        return 0.0
    return p.max_throughput * delivery_probability(rssi, tech, p)


DECORRELATION_DISTANCE_M = 20.0


class ShadowingProcess:
    """Spatially correlated log-normal shadowing, one state per link.

    Gudmundson's model: moving ``dd`` metres multiplies the previous fade by
    ``rho = exp(-dd / d_corr)`` and adds fresh noise scaled so every sample
    stays N(0, sigma^2). Reading the same link at the same position again
    returns the same fade, so uplink and downlink agree.
    """

    def __init__(self, sigma: float, rng: np.random.Generator, d_corr: float = DECORRELATION_DISTANCE_M):
        if sigma < 0 or d_corr <= 0:
            raise InvariantViolation("sigma must be >= 0 and decorrelation distance > 0")
        self.sigma = sigma
        self.rng = rng
        self.d_corr = d_corr
        self._state: dict = {}

    def fade(self, link, pos: GeoPosition) -> float:
        if self.sigma == 0:
            return 0.0
        prev = self._state.get(link)
        if prev is None:
            x = float(self.rng.normal(0.0, self.sigma))
        else:
            x0, p0 = prev
            if p0 == pos:
                return x0
            rho = math.exp(-haversine_distance(p0, pos) / self.d_corr)
            x = rho * x0 + math.sqrt(1 - rho * rho) * float(self.rng.normal(0.0, self.sigma))
        self._state[link] = (x, pos)
        return x

    def rssi(self, link, pos: GeoPosition, d: float, p: ChannelParams, extra_loss_db: float = 0.0) -> float:
        """``rssi_from_distance`` with this process supplying the shadowing term."""
        value = p.tx_power - p.reference_loss_at_1m - 10 * p.path_loss_exponent * math.log10(max(d, 1.0))
        value += self.fade(link, pos) - extra_loss_db
        return min(max(value, p.rssi_floor), p.tx_power)


# -- LoRa -------------------------------------------------------------------

class CodingRate(enum.IntEnum):
    CR4_5 = 1
    CR4_6 = 2
    CR4_7 = 3
    CR4_8 = 4


@dataclass(frozen=True)
class LoraConfig:
    spreading_factor: int = 10
    coding_rate: CodingRate = CodingRate.CR4_5
    bandwidth: int = 125_000
    preamble_symbols: int = 8
    explicit_header: bool = True
    duty_cycle_limit: float = 0.01
    crc: bool = True

    def __post_init__(self):
        if not 7 <= self.spreading_factor <= 12:
            raise InvariantViolation(f"spreading factor {self.spreading_factor} outside 7..12")
        if not 0 < self.duty_cycle_limit <= 1:
            raise InvariantViolation("duty cycle limit must be in (0, 1]")

    @property
    def low_data_rate_optimize(self) -> bool:
        return self.spreading_factor >= 11 and self.bandwidth == 125_000


# SX1272 "mode 3" used by the custom protocol, and the usual LoRaWAN uplink.
LORA_CUSTOM = LoraConfig(spreading_factor=10)
LORAWAN_UPLINK = LoraConfig(spreading_factor=9)


def lora_airtime(payload_len: int, cfg: LoraConfig = LORA_CUSTOM) -> float:
    """Time on air in seconds (Semtech SX127x symbol-count formula)."""
    if not 1 <= payload_len <= 255:
        raise PayloadTooLarge(f"payload length {payload_len} outside 1..255")
    sf = cfg.spreading_factor
    t_sym = (1 << sf) / cfg.bandwidth
    de = 1 if cfg.low_data_rate_optimize else 0
    ih = 0 if cfg.explicit_header else 1
    num = 8 * payload_len - 4 * sf + 28 + 16 * int(cfg.crc) - 20 * ih
    n_payload = 8 + max(math.ceil(num / (4 * (sf - 2 * de))) * (int(cfg.coding_rate) + 4), 0)
    return (cfg.preamble_symbols + 4.25 + n_payload) * t_sym


@dataclass(frozen=True)
class Allow:
    pass


@dataclass(frozen=True)
class DeferUntil:
    time_ms: int


@dataclass
class DutyCycleLedger:
    """Airtime log of one radio in one sub-band; times are milliseconds."""

    duty_cycle_limit: float = 0.01
    window: float = 3600.0  # seconds
    transmissions: list[tuple[float, float]] = field(default_factory=list)

    @property
    def budget_ms(self) -> float:
        return self.duty_cycle_limit * self.window * 1000.0

    def record(self, start_ms: float, airtime_s: float) -> None:
        if self.transmissions and start_ms < self.transmissions[-1][0]:
            raise ValueError("ledger entries must be time-ordered")
        self.transmissions.append((float(start_ms), airtime_s * 1000.0))

    def prune(self, now_ms: float) -> None:
        cutoff = now_ms - self.window * 1000.0
        keep = 0
        for keep, (s, a) in enumerate(self.transmissions):
            if s + a > cutoff:
                break
        else:
            keep = len(self.transmissions)
        del self.transmissions[:keep]

    def usage_between(self, lo_ms: float, hi_ms: float) -> float:
        """Airtime (ms) overlapping the interval [lo, hi]."""
        total = 0.0
        for s, a in self.transmissions:
            total += max(0.0, min(s + a, hi_ms) - max(s, lo_ms))
        return total


def duty_cycle_gate(ledger: DutyCycleLedger, airtime: float, now: float) -> Allow | DeferUntil:
    """Decide whether a transmission of ``airtime`` seconds may start at ``now`` (ms).

    The binding window for a transmission starting at ``t`` is the one that
    ends when it finishes, ``[t + a - W, t + a]``; every other window contains
    less of it or no more past airtime.
    """
    a = airtime * 1000.0
    w = ledger.window * 1000.0
    budget = ledger.budget_ms - a
    if budget < 0:
        raise PayloadTooLarge(f"a single {airtime:.3f} s transmission exceeds the duty-cycle budget")
    start = float(now)
    if ledger.transmissions:
        last_s, last_a = ledger.transmissions[-1]
        start = max(start, last_s + last_a)
    if ledger.usage_between(start + a - w, start) <= budget + 1e-9:
        return Allow() if start == now else DeferUntil(math.ceil(start))
    # past usage after x is piecewise linear and non-increasing in x; find the
    # smallest window start x with usage(x) <= budget.
    tx = ledger.transmissions
    after = 0.0
    x = None
    for s, dur in reversed(tx):
        if after + dur > budget:
            x = s + (after + dur - budget)
            break
        after += dur
    assert x is not None
    start = max(start, x + w - a)
    return DeferUntil(math.ceil(start))


# -- cellular -----------------------------------------------------------------

@dataclass
class CellularCoverage:
    """Coverage polygons (lon/lat rings). An empty polygon list means everywhere."""

    five_g_enabled: bool = True
    lte_enabled: bool = True
    five_g_polygons: Sequence[Sequence[Sequence[float]]] = ()
    lte_polygons: Sequence[Sequence[Sequence[float]]] = ()
    five_g_throughput: float = DEFAULT_CHANNELS[RadioTech.FIVE_G].max_throughput
    lte_throughput: float = DEFAULT_CHANNELS[RadioTech.LTE].max_throughput

    def __post_init__(self):
        self._five = [Polygon(r) for r in self.five_g_polygons]
        self._lte = [Polygon(r) for r in self.lte_polygons]
        shapely.prepare(self._five + self._lte)

    @staticmethod
    def _inside(polys, pos: GeoPosition) -> bool:
        if not polys:
            return True
        return any(shapely.contains_xy(p, pos.lon, pos.lat) for p in polys)

    def five_g_at(self, pos: GeoPosition) -> bool:
        return self.five_g_enabled and self._inside(self._five, pos)

    def lte_at(self, pos: GeoPosition) -> bool:
        return self.lte_enabled and self._inside(self._lte, pos)

    def available(self, pos: GeoPosition) -> list[RadioTech]:
        out = []
        if self.five_g_at(pos):
            out.append(RadioTech.FIVE_G)
        if self.lte_at(pos):
            out.append(RadioTech.LTE)
        return out

    @staticmethod
    def _inside_many(polys, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
        if not polys:
            return np.ones(len(lon), dtype=bool)
        hit = np.zeros(len(lon), dtype=bool)
        for p in polys:
            hit |= shapely.contains_xy(p, lon, lat)
        return hit

    def available_many(self, lat: np.ndarray, lon: np.ndarray) -> list[list[RadioTech]]:
        """``available`` for many points in one pass."""
        n = len(lat)
        five = self._inside_many(self._five, lon, lat) if self.five_g_enabled else np.zeros(n, dtype=bool)
        lte = self._inside_many(self._lte, lon, lat) if self.lte_enabled else np.zeros(n, dtype=bool)
        return [[t for t, ok in ((RadioTech.FIVE_G, f), (RadioTech.LTE, l)) if ok] for f, l in zip(five, lte)]

    def throughput(self, tech: RadioTech) -> float:
        return self.five_g_throughput if tech == RadioTech.FIVE_G else self.lte_throughput
