"""Report files written after a run, and the summary tables behind ``simctl report``.

Every row starts with the run's seed and run id. Floats are written with a
fixed number of decimals so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections import defaultdict
from pathlib import Path

from .errors import SimError
from .geo import GeoPosition, haversine_distance


class IoError(SimError, OSError):
    """A report file could not be written or read."""


COLUMNS = {
    "rssi_map.csv": ["t_ms", "vehicle", "lat", "lon", "rsu", "rssi_dbm"],
    "pdr_map.csv": ["cell_x", "cell_y", "lat", "lon", "sent", "received", "pdr"],
    "throughput.csv": ["t_ms", "vehicle", "poa", "tech", "lat", "lon", "distance_m", "rssi_dbm", "mbps",
                       "delivered"],
    "coverage.csv": ["t_ms", "vehicle", "lat", "lon", "tech", "target", "best_rsu_score", "five_g", "lte"],
    "pipeline_audit.csv": ["vehicle", "source", "seq", "delivered_count", "evicted"],
    "dissemination.csv": ["t_ms", "sequence", "transmitter", "node", "receiver", "latency_ms", "hops_ms"],
    "lora_frames.csv": ["t_ms", "vehicle", "counter", "bytes", "airtime_s", "frame_hex"],
    "analytics/congestion.csv": ["window_start", "window_end", "segment", "mean_speed", "count_per_meter",
                                 "cluster", "level"],
    "analytics/behavior.csv": ["window_start", "window_end", "vehicle", "segment", "mean_speed", "speed_band",
                               "safety"],
    "analytics/collisions.csv": ["t_ms", "vehicle", "vru", "conflict_lat", "conflict_lon", "time_to_conflict_s",
                                 "min_distance_m", "denm_bytes"],
    "analytics/traffic_stats.csv": ["window_start", "window_end", "node", "class", "count", "mean_speed",
                                    "mean_accel", "sources"],
}

# decimals per column; anything not listed is written as-is
_DECIMALS = {"lat": 7, "lon": 7, "conflict_lat": 7, "conflict_lon": 7, "rssi_dbm": 2, "mbps": 3,
             "distance_m": 2, "best_rsu_score": 3, "pdr": 4, "latency_ms": 3, "airtime_s": 6,
             "mean_speed": 3, "count_per_meter": 5, "mean_accel": 3, "time_to_conflict_s": 3, "min_distance_m": 3}


def _fmt(col: str, value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.{_DECIMALS.get(col, 6)}f}"
    if hasattr(value, "item"):  # numpy scalar
        return _fmt(col, value.item())
    return str(value)


def _rows(metrics, name: str) -> list:
    m = metrics
    if name == "pdr_map.csv":
        out = []
        for (ix, iy), (lat, lon, sent, recv) in sorted(m.pdr_cells.items()):
            out.append((ix, iy, lat, lon, sent, recv, recv / sent if sent else 0.0))
        return out
    return {
        "rssi_map.csv": m.rssi_samples, "throughput.csv": m.throughput_trace, "coverage.csv": m.coverage_trace,
        "pipeline_audit.csv": m.pipeline_audit, "dissemination.csv": m.dissemination_events,
        "lora_frames.csv": m.lora_frames, "analytics/congestion.csv": m.congestion,
        "analytics/behavior.csv": m.behavior, "analytics/collisions.csv": m.collisions,
        "analytics/traffic_stats.csv": m.traffic_stats,
    }[name]


def render_csv(metrics, name: str) -> str:
    cols = COLUMNS[name]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "run_id", *cols])
    for row in _rows(metrics, name):
        w.writerow([metrics.seed, metrics.run_id, *(_fmt(c, v) for c, v in zip(cols, row))])
    return buf.getvalue()


def render_handovers(metrics) -> str:
    lines = []
    for rec in metrics.handover_events:
        lines.append(json.dumps({"seed": metrics.seed, "run_id": metrics.run_id, **rec}, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def emit_reports(metrics, out_dir: str | Path) -> list[Path]:
    """Write every report file under ``out_dir``; returns the paths written."""
    out = Path(out_dir)
    written = []
    try:
        (out / "analytics").mkdir(parents=True, exist_ok=True)
        for name in COLUMNS:
            p = out / name
            p.write_text(render_csv(metrics, name), encoding="utf-8")
            written.append(p)
        p = out / "handovers.jsonl"
        p.write_text(render_handovers(metrics), encoding="utf-8")
        written.append(p)
        p = out / "run.json"
        manifest = {"seed": metrics.seed, "run_id": metrics.run_id, **metrics.manifest}
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(p)
    except OSError as exc:
        raise IoError(f"cannot write reports to {out}: {exc}") from None
    return written


# -- summaries ----------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None


def _dist(lat1, lon1, lat2, lon2) -> float:
    return haversine_distance(GeoPosition(lat1, lon1), GeoPosition(lat2, lon2))


def rsu_passes(rows: list[dict], rsus: dict[str, tuple[float, float]], range_m: float) -> list[dict]:
    """Drive-bys: maximal runs of a vehicle's consecutive probes within ``range_m`` of an RSU.

    Only drive-bys with at least one probe served by that RSU are returned;
    the peak is taken over those probes. A drive-by touching the vehicle's
    first or last probe is marked truncated.
    """
    by_vehicle = defaultdict(list)
    for r in rows:
        by_vehicle[r["vehicle"]].append(r)
    passes = []
    for vehicle, probes in sorted(by_vehicle.items()):
        probes.sort(key=lambda r: int(r["t_ms"]))
        for rsu, (lat, lon) in sorted(rsus.items()):
            inside = [_dist(float(r["lat"]), float(r["lon"]), lat, lon) <= range_m for r in probes]
            i = 0
            while i < len(probes):
                if not inside[i]:
                    i += 1
                    continue
                j = i
                while j < len(probes) and inside[j]:
                    j += 1
                served = [float(r["mbps"]) for r in probes[i:j] if r["poa"] == rsu]
                if served:
                    passes.append({"vehicle": vehicle, "rsu": rsu, "start_ms": int(probes[i]["t_ms"]),
                                   "end_ms": int(probes[j - 1]["t_ms"]), "mbps": served,
                                   "truncated": i == 0 or j == len(probes)})
                i = j
    return passes


def summarize(metrics_dir: str | Path) -> dict:
    d = Path(metrics_dir)
    if not (d / "run.json").exists():
        raise IoError(f"{d} has no run.json; not a metrics directory")
    try:
        manifest = json.loads((d / "run.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read {d / 'run.json'}: {exc}") from None
    thr = _read_csv(d / "throughput.csv")
    per_rsu = defaultdict(list)
    for r in thr:
        if r["tech"] == "ItsG5":
            per_rsu[r["poa"]].append(float(r["mbps"]))
    rsus = {k: tuple(v) for k, v in manifest.get("rsus", {}).items()}
    passes = [p for p in rsu_passes(thr, rsus, manifest.get("rsu_range_m", 600.0)) if not p["truncated"]]
    peaks = defaultdict(list)
    for p in passes:
        peaks[p["rsu"]].append(max(p["mbps"]))
    rsu_table = {
        rsu: {"probes": len(v), "median_mbps": round(statistics.median(v), 3), "passes": len(peaks[rsu]),
              "min_pass_peak": round(min(peaks[rsu]), 3) if peaks[rsu] else None}
        for rsu, v in sorted(per_rsu.items())
    }
    cov = _read_csv(d / "coverage.csv")
    tech_share = defaultdict(int)
    for r in cov:
        tech_share[r["tech"]] += 1
    pdr = _read_csv(d / "pdr_map.csv")
    sent = sum(int(r["sent"]) for r in pdr)
    recv = sum(int(r["received"]) for r in pdr)
    hand = []
    try:
        with (d / "handovers.jsonl").open(encoding="utf-8") as fh:
            hand = [json.loads(line) for line in fh if line.strip()]
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read handovers.jsonl: {exc}") from None
    ho = [h for h in hand if h.get("event") == "handover" and not h.get("initial")]
    audit = _read_csv(d / "pipeline_audit.csv")
    dis = _read_csv(d / "dissemination.csv")
    lat = defaultdict(list)
    for r in dis:
        lat[r["transmitter"]].append(float(r["latency_ms"]))
    return {
        "seed": manifest.get("seed"), "run_id": manifest.get("run_id"),
        "rsus": rsu_table,
        "coverage_ticks": dict(sorted(tech_share.items())),
        "cam_pdr": round(recv / sent, 4) if sent else None,
        "handovers": len(ho), "proactive_handovers": sum(1 for h in ho if h.get("proactive")),
        "pipeline": {"generated": len(audit),
                     "delivered_once": sum(1 for r in audit if r["delivered_count"] == "1"),
                     "duplicates": sum(1 for r in audit if int(r["delivered_count"]) > 1),
                     "evicted": sum(1 for r in audit if r["evicted"] == "1")},
        "dissemination_median_ms": {k: round(statistics.median(v), 3) for k, v in sorted(lat.items())},
    }


def format_summary(s: dict) -> str:
    lines = [f"run {s['run_id']} (seed {s['seed']})", "", "RSU      probes  median_Mbps  passes  min_pass_peak"]
    for rsu, r in s["rsus"].items():
        peak = "-" if r["min_pass_peak"] is None else f"{r['min_pass_peak']:.2f}"
        lines.append(f"{rsu:<8} {r['probes']:>6}  {r['median_mbps']:>11.2f}  {r['passes']:>6}  {peak:>13}")
    lines += ["", "technology ticks: " + ", ".join(f"{k}={v}" for k, v in s["coverage_ticks"].items()),
              f"CAM delivery ratio: {s['cam_pdr']}",
              f"handovers: {s['handovers']} ({s['proactive_handovers']} with the rule already in place)",
              "pipeline: " + ", ".join(f"{k}={v}" for k, v in s["pipeline"].items()),
              "DENM median latency (ms): " + ", ".join(f"{k}={v}" for k, v in s["dissemination_median_ms"].items())]
    return "\n".join(lines) + "\n"
