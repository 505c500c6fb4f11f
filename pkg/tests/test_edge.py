import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vanetsim.errors import InvariantViolation
from vanetsim.geo import GeoPosition, destination
from vanetsim.edge import (
    EDGE_NOTIFICATION_BYTES, FIBER, FIVE_G_LINK, Bus, CamObservation, CameraDetection, CameraParams, CloudBridge,
    Deployment, FieldOfView, FrameScheduler, FusedClass, GroundTruth, LatencyParams, LinkModel, ObjectClass,
    RadarClass, RadarDetection, RadarParams, Sector, ShortHorizonStore, SourceKind, busy_skip_rate,
    camera_observe, detection_latency, edge_notification, fuse_counts, lidar_rate, publish, radar_observe,
    store_query, subscribe, topic, topic_matches, wifi_probe_count,
)

POST = GeoPosition(40.6405, -8.6538)


def box_around(center, half_m):
    dlat = half_m / 111_320.0
    dlon = half_m / (111_320.0 * math.cos(math.radians(center.lat)))
    return [(center.lon - dlon, center.lat - dlat), (center.lon + dlon, center.lat - dlat),
            (center.lon + dlon, center.lat + dlat), (center.lon - dlon, center.lat + dlat)]


def obj(i, cls, pos=POST, speed=10.0, heading=0.0):
    return GroundTruth(str(i), pos, speed, heading, cls)


# -- pub/sub -----------------------------------------------------------------------

@pytest.mark.parametrize("pattern,topic_,hit", [
    ("p22/radar/#", "p22/radar/detections", True),
    ("p35/#", "p22/radar/detections", False),
    ("p22/+/detections", "p22/radar/detections", True),
    ("p22/+", "p22/radar/detections", False),
    ("#", "a", True),
    ("p22/radar/#", "p22/radar", True),
    ("+/+/+", "a/b/c", True),
    ("a/b", "a/b/c", False),
])
def test_topic_matching(pattern, topic_, hit):
    assert topic_matches(pattern, topic_) is hit


def test_wildcard_delivery():
    bus = Bus()
    got, other = [], []
    subscribe(bus, "p22/radar/#", got.append)
    subscribe(bus, "p35/#", other.append)
    publish(bus, topic("p22", "radar", "detections"), b"x", 5)
    assert [m.topic for m in got] == ["p22/radar/detections"] and other == []


def test_fan_out_exactly_once():
    bus = Bus()
    a, b = [], []
    bus.subscribe("n/s/t", a.append)
    bus.subscribe("n/s/t", b.append)
    bus.publish("n/s/t", b"1", 0)
    assert len(a) == len(b) == 1


def test_unsubscribe():
    bus = Bus()
    got = []
    sub = bus.subscribe("#", got.append)
    bus.unsubscribe(sub)
    bus.publish("a/b", b"", 0)
    assert got == []


@pytest.mark.parametrize("bad", ["", "a//b", "a/+/b", "a/#"])
def test_invalid_topics(bad):
    with pytest.raises(InvariantViolation):
        Bus().publish(bad, b"", 0)


@pytest.mark.parametrize("bad", ["a/#/b", "a+/b", "", "a/b#"])
def test_invalid_patterns(bad):
    with pytest.raises(InvariantViolation):
        Bus().subscribe(bad, lambda m: None)


segment = st.sampled_from(["a", "b", "c"])
topics = st.lists(segment, min_size=1, max_size=3).map("/".join)


@settings(max_examples=100)
@given(st.lists(st.tuples(topics, st.binary(max_size=4)), max_size=30), st.sampled_from(["#", "a/#", "+/b", "a/+/c"]))
def test_per_topic_fifo_and_no_phantoms(stream, pattern):
    bus = Bus()
    got = []
    bus.subscribe(pattern, got.append)
    sent = [bus.publish(t, p, i) for i, (t, p) in enumerate(stream)]
    expected = [m for m in sent if topic_matches(pattern, m.topic)]
    assert got == expected


def test_cloud_bridge():
    node, cloud = Bus(), Bus()
    seen = []
    cloud.subscribe("cloud/p22/#", seen.append)
    CloudBridge(node, cloud, "p22")
    node.publish("p22/camera/counts", b"c", 9)
    node.publish("p35/camera/counts", b"c", 9)
    assert [m.topic for m in seen] == ["cloud/p22/camera/counts"]


# -- store ----------------------------------------------------------------------------

def test_empty_store_query():
    assert store_query(ShortHorizonStore(), "#", (0, 10**12)) == []


def test_retention_after_compaction():
    store = ShortHorizonStore()
    bus = Bus()
    store.attach(bus)
    bus.publish("n/s/t", b"old", 0)
    bus.publish("n/s/t", b"new", 1000)
    assert store.compact(86_401_000) == 1
    assert [m.payload for m in store.query("#", 0, 10**12)] == [b"new"]


def test_only_persisted_topics_stored():
    store = ShortHorizonStore(persisted_topics=["p22/radar/#"])
    bus = Bus()
    store.attach(bus)
    bus.publish("p22/radar/detections", b"1", 1)
    bus.publish("p22/camera/counts", b"2", 2)
    assert len(store) == 1


def test_query_rejects_reversed_range():
    with pytest.raises(InvariantViolation):
        ShortHorizonStore().query("#", 10, 5)


def test_hundred_rows_half_range():
    rng = np.random.default_rng(3)
    store = ShortHorizonStore()
    msgs = []
    for i in range(100):
        m = Bus().publish(f"n{i % 3}/s/t", bytes([i]), int(rng.integers(0, 100_000)))
        store.insert(m)
        msgs.append(m)
    got = store_query(store, "#", (0, 50_000))
    oracle = sorted((m for m in msgs if m.published_at <= 50_000), key=lambda m: m.published_at)
    assert [(m.published_at, m.payload) for m in got] == [(m.published_at, m.payload) for m in oracle]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(topics, st.integers(0, 1000)), max_size=40),
       st.sampled_from(["#", "a/#", "+/b", "a/+/c", "b"]), st.integers(0, 1000), st.integers(0, 1000))
def test_query_matches_linear_scan(rows, pattern, lo, span):
    store = ShortHorizonStore()
    for i, (t, ts) in enumerate(rows):
        store.insert(Bus().publish(t, i.to_bytes(2, "big"), ts))
    hi = lo + span
    oracle = [(ts, t, i) for i, (t, ts) in enumerate(rows) if lo <= ts <= hi and topic_matches(pattern, t)]
    got = [(m.published_at, m.topic, int.from_bytes(m.payload, "big")) for m in store.query(pattern, lo, hi)]
    assert got == sorted(oracle, key=lambda r: (r[0], r[2]))  # ties keep insertion order


def test_export_csv(tmp_path):
    store = ShortHorizonStore()
    store.insert(Bus().publish("a/b", b"\x01\x02", 7))
    store.export_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["topic,published_at,payload_hex", "a/b,7,0102"]


# -- radar ------------------------------------------------------------------------------

SECTOR = Sector(POST, boresight=0.0)


def test_radar_empty_sector():
    assert radar_observe([], SECTOR, RadarParams(), np.random.default_rng(0)) == []


def test_radar_light_accuracy():
    rng = np.random.default_rng(11)
    ahead = destination(POST, 0.0, 50.0)
    truth = [obj(i, ObjectClass.CAR, ahead) for i in range(10_000)]
    dets = radar_observe(truth, SECTOR, RadarParams(p_det=1.0), rng)
    frac = np.mean([d.cls == RadarClass.LIGHT for d in dets])
    assert len(dets) == 10_000 and abs(frac - 0.80) <= 0.02


def test_radar_confusion_rows():
    rng = np.random.default_rng(5)
    ahead = destination(POST, 0.0, 50.0)
    for cls in (ObjectClass.CAR, ObjectClass.TRUCK, ObjectClass.BICYCLE):
        dets = radar_observe([obj(i, cls, ahead) for i in range(4000)], SECTOR, RadarParams(p_det=1.0), rng)
        row = {c: np.mean([d.cls == c for d in dets]) for c in RadarClass}
        assert sum(row.values()) == pytest.approx(1.0)
        off = sorted(v for c, v in row.items() if v < 0.5)
        assert abs(off[0] - off[1]) < 0.03  # off-diagonal mass split evenly


def test_radar_ignores_pedestrians_and_out_of_sector():
    rng = np.random.default_rng(0)
    ahead = destination(POST, 0.0, 50.0)
    behind = destination(POST, 180.0, 50.0)
    far = destination(POST, 0.0, 500.0)
    truth = [obj(i, ObjectClass.PEDESTRIAN, ahead) for i in range(100)]
    truth += [obj("b", ObjectClass.CAR, behind), obj("f", ObjectClass.CAR, far)]
    assert radar_observe(truth, SECTOR, RadarParams(p_det=1.0), rng) == []


def test_radar_detection_probability_and_jitter():
    rng = np.random.default_rng(2)
    ahead = destination(POST, 0.0, 50.0)
    dets = radar_observe([obj(i, ObjectClass.CAR, ahead) for i in range(5000)], SECTOR, RadarParams(), rng)
    assert abs(len(dets) / 5000 - 0.95) < 0.015
    from vanetsim.geo import haversine_distance
    err = [haversine_distance(ahead, d.pos) for d in dets]
    # radial error of a 2-D Gaussian has mean sigma*sqrt(pi/2)
    assert np.mean(err) == pytest.approx(0.5 * math.sqrt(math.pi / 2), rel=0.05)


def test_radar_detection_speed_invariant():
    with pytest.raises(InvariantViolation):
        RadarDetection("x", POST, -1.0, 0.0, RadarClass.LIGHT, ObjectClass.CAR)


def test_sector_validation():
    with pytest.raises(InvariantViolation):
        Sector(POST, 0.0, half_angle=0.0)


# -- camera -----------------------------------------------------------------------------------

def test_camera_counts_pedestrians():
    fov = FieldOfView(box_around(POST, 20))
    counts, dets = camera_observe([obj(i, ObjectClass.PEDESTRIAN) for i in range(3)], fov,
                                  CameraParams(p_cam=1.0), np.random.default_rng(0))
    assert counts[ObjectClass.PEDESTRIAN] == 3 and len(dets) == 3


def test_camera_outside_view_never_seen():
    fov = FieldOfView(box_around(POST, 20))
    outside = destination(POST, 90.0, 100.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        counts, _ = camera_observe([obj(1, ObjectClass.CAR, outside)], fov, CameraParams(p_cam=1.0), rng)
        assert sum(counts.values()) == 0


def test_invalid_fov():
    with pytest.raises(InvariantViolation):
        FieldOfView([(0, 0), (1, 1), (2, 2)])


@pytest.mark.parametrize("interval,processing", [(40, 100), (40, 40), (33, 100), (100, 40), (40, 120)])
def test_busy_skip_rate_matches_simulation(interval, processing):
    sched = FrameScheduler(processing)
    horizon = 600_000
    for k in range(horizon // interval):
        sched.offer(k * interval)
    assert sched.processed / (horizon / 1000) == pytest.approx(busy_skip_rate(interval, processing), rel=0.01)


def test_busy_skip_bounded_by_processing_rate():
    assert busy_skip_rate(40, 100) <= 1000 / 100
    assert busy_skip_rate(40, 100) == pytest.approx(1000 / 120)


# -- wifi ------------------------------------------------------------------------------------

def test_wifi_zero_devices():
    assert wifi_probe_count([], POST, 50, 0.9, np.random.default_rng(0)) == 0


def test_wifi_outside_radius():
    far = destination(POST, 45.0, 80.0)
    assert wifi_probe_count([far] * 20, POST, 50, 1.0, np.random.default_rng(0)) == 0


def test_wifi_and_camera_synthetic_day():
    rng = np.random.default_rng(21)
    # directional camera: the half-disc north of the post, sniffer: the full disc
    fov = FieldOfView(box_around(destination(POST, 0.0, 15.0), 15.0))
    cam, wifi = [], []
    for hour in range(24):
        crowd = int(rng.poisson(20 + 200 * math.exp(-((hour - 13) / 4) ** 2)))
        people = [destination(POST, float(rng.uniform(0, 360)), float(30 * math.sqrt(rng.uniform()))) for _ in range(crowd)]
        truth = [obj(i, ObjectClass.PEDESTRIAN, p) for i, p in enumerate(people)]
        counts, _ = camera_observe(truth, fov, CameraParams(), rng)
        cam.append(counts[ObjectClass.PEDESTRIAN])
        devices = [p for p in people for _ in range(1 + int(rng.random() < 0.5))]  # 1.5 devices per person
        wifi.append(wifi_probe_count(devices, POST, 40.0, 0.9, rng))
    assert np.mean(wifi) > np.mean(cam)
    assert np.corrcoef(cam, wifi)[0, 1] > 0.8


# -- fusion ---------------------------------------------------------------------------------

W = (0, 10_000)


def test_fusion_one_vehicle_three_sources():
    radar = [RadarDetection("7", POST, 12.0, 0.0, RadarClass.LIGHT, ObjectClass.CAR, 1000)]
    camera = [CameraDetection("c1", destination(POST, 90.0, 1.0), ObjectClass.CAR, 1200)]
    cams = [CamObservation(42, destination(POST, 0.0, 1.5), 12.5, 1100)]
    st_ = fuse_counts(radar, camera, cams, W)
    assert st_.total == 1 and st_.source_mix == {SourceKind.RADAR, SourceKind.CAMERA, SourceKind.CAM_MSG}
    assert st_.mean_speed[FusedClass.LIGHT] == pytest.approx(12.25)


def test_fusion_two_vehicles_apart():
    radar = [RadarDetection("1", POST, 10.0, 0.0, RadarClass.LIGHT, ObjectClass.CAR, 0),
             RadarDetection("2", destination(POST, 0.0, 50.0), 10.0, 0.0, RadarClass.LIGHT, ObjectClass.CAR, 0)]
    assert fuse_counts(radar, [], [], W).total == 2


def test_fusion_camera_only_pedestrian():
    rng = np.random.default_rng(0)
    ped = [obj("p", ObjectClass.PEDESTRIAN)]
    radar = radar_observe(ped, SECTOR, RadarParams(p_det=1.0), rng)
    _, cam = camera_observe(ped, FieldOfView(box_around(POST, 10)), CameraParams(p_cam=1.0), rng)
    st_ = fuse_counts(radar, cam, [], W)
    assert st_.counts[FusedClass.PEDESTRIAN] == 1 and st_.source_mix == {SourceKind.CAMERA}


def test_fusion_time_gate_and_window():
    radar = [RadarDetection("1", POST, 10.0, 0.0, RadarClass.LIGHT, ObjectClass.CAR, 0)]
    camera = [CameraDetection("c", POST, ObjectClass.CAR, 2000), CameraDetection("late", POST, ObjectClass.CAR, 20_000)]
    assert fuse_counts(radar, camera, [], W).total == 2


def test_fusion_acceleration_from_cam_track():
    cams = [CamObservation(1, POST, 10.0, 0), CamObservation(1, destination(POST, 0.0, 10.0), 12.0, 1000)]
    st_ = fuse_counts([], [], cams, W)
    assert st_.total == 1 and st_.mean_accel[FusedClass.LIGHT] == pytest.approx(2.0)


def test_traffic_stats_window_invariant():
    with pytest.raises(InvariantViolation):
        fuse_counts([], [], [], (5, 5))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.sampled_from(["r", "c", "m"])), min_size=1, max_size=25))
def test_fusion_count_bounds(seen):
    # ground-truth objects 40 m apart: gate-separable
    pos = {k: destination(POST, 0.0, 40.0 * k) for k in range(10)}
    radar = [RadarDetection(str(k), pos[k], 5.0, 0.0, RadarClass.LIGHT, ObjectClass.CAR, 10) for k, s in seen if s == "r"]
    cam = [CameraDetection(f"c{k}", pos[k], ObjectClass.CAR, 20) for k, s in seen if s == "c"]
    msgs = [CamObservation(k, pos[k], 5.0, 30) for k, s in seen if s == "m"]
    total = fuse_counts(radar, cam, msgs, W).total
    distinct = {k for k, _ in seen}
    per_source = max(len({k for k, s in seen if s == src}) for src in "rcm")
    assert per_source <= total <= len(distinct)
    assert total == len(distinct)


# -- latency --------------------------------------------------------------------------------

def test_notification_is_41_bytes():
    n = edge_notification(22, 1_700_000_000_000, 5, {ObjectClass.PEDESTRIAN: 3}, POST, 0.87, 31.0)
    assert len(n) == EDGE_NOTIFICATION_BYTES == 41


def test_edge_faster_than_cloud_every_draw():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = LatencyParams.draw(rng)
        for link in (FIBER, FIVE_G_LINK):
            assert detection_latency(Deployment.EDGE, link, p).total < detection_latency(Deployment.CLOUD, link, p).total


def test_zero_latency_link_isolates_processing():
    ideal = LinkModel("ideal", 0.0, math.inf)
    p = LatencyParams()
    e, c = detection_latency(Deployment.EDGE, ideal, p), detection_latency(Deployment.CLOUD, ideal, p)
    assert c.total - e.total == pytest.approx(p.cloud_processing_ms - p.edge_processing_ms)
    assert e.communication == c.communication == 0.0


def test_notification_similar_over_fiber_and_5g():
    assert abs(FIBER.transfer_ms(41) - FIVE_G_LINK.transfer_ms(41)) < 10.0
    assert detection_latency(Deployment.EDGE, FIBER).total == pytest.approx(35 + 30 + 2 + 41 * 8 / 1e6)


def test_lidar_rate():
    assert lidar_rate(1e6) == 6.5e9
