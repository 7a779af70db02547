import math

import numpy as np
import pytest

from bctrace import ingest, vision
from bctrace.errors import (
    BadThresholds,
    InsufficientLines,
    MalformedRow,
    OutOfOrderFrame,
)
from bctrace.vision import (
    BinCounts,
    GrayImage,
    LaneGeometry,
    LaneSelectConfig,
    Line,
    Track,
    TrackerConfig,
    TrackerState,
    assign_lane,
    bin_counts,
    canny,
    classify_stop,
    gaussian_kernel,
    hough_lines,
    rasterize_line,
    read_pgm,
    select_lane_lines,
    update_tracks,
    write_pgm,
)


def oracle_canny(pixels, low, high, sigma):
    """Naive per-pixel recomputation with identical parameters and tap order."""
    h, w = pixels.shape
    img = pixels.astype(float)

    def reflect(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    if sigma > 0:
        k = gaussian_kernel(sigma)
        r = (len(k) - 1) // 2
        tmp = np.zeros_like(img)
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for j in range(len(k)):
                    acc += k[j] * img[y, reflect(x - r + j, w)]
                tmp[y, x] = acc
        sm = np.zeros_like(img)
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for j in range(len(k)):
                    acc += k[j] * tmp[reflect(y - r + j, h), x]
                sm[y, x] = acc
        img = sm

    sx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    sy = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            ax = ay = 0.0
            for dy in range(3):
                for dx in range(3):
                    px = img[reflect(y - 1 + dy, h), reflect(x - 1 + dx, w)]
                    if sx[dy][dx] != 0.0:
                        ax += sx[dy][dx] * px
                    if sy[dy][dx] != 0.0:
                        ay += sy[dy][dx] * px
            gx[y, x], gy[y, x] = ax, ay
    mag = np.hypot(gx, gy)

    thin = np.zeros_like(mag)
    for y in range(h):
        for x in range(w):
            ang = np.mod(np.degrees(np.arctan2(gy[y, x], gx[y, x])), 180.0)
            if ang < 22.5 or ang >= 157.5:
                ny, nx = 0, 1
            elif ang < 67.5:
                ny, nx = 1, 1
            elif ang < 112.5:
                ny, nx = 1, 0
            else:
                ny, nx = 1, -1

            def at(yy, xx):
                return mag[yy, xx] if 0 <= yy < h and 0 <= xx < w else 0.0

            ahead, behind = at(y + ny, x + nx), at(y - ny, x - nx)
            if mag[y, x] > behind and mag[y, x] >= ahead:
                thin[y, x] = mag[y, x]

    strong = thin >= high
    weak = (thin >= low) & ~strong
    edges = strong.copy()
    changed = True
    while changed:
        changed = False
        for y in range(h):
            for x in range(w):
                if weak[y, x] and not edges[y, x]:
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and edges[yy, xx]:
                                edges[y, x] = True
                                changed = True
                                break
                        if edges[y, x]:
                            break
    return np.where(edges, 255, 0).astype(np.uint8)


class TestCanny:
    def test_constant_image_no_edges(self):
        img = GrayImage.from_array(np.full((20, 20), 77))
        out = canny(img, 20, 60)
        assert not out.pixels.any()

    def test_step_edge_single_column(self):
        arr = np.full((24, 30), 50, dtype=np.uint8)
        arr[:, 15:] = 200
        out = canny(GrayImage.from_array(arr), 30, 90)
        cols = {int(x) for x in np.nonzero(out.pixels)[1]}
        assert len(cols) == 1
        assert cols.pop() in (14, 15)
        # every interior row contributes exactly one edge pixel
        per_row = out.pixels[:, :].sum(axis=1) / 255
        assert (per_row >= 1).all()

    def test_two_rectangle_scene_matches_per_pixel_oracle(self):
        arr = np.full((28, 36), 30, dtype=np.uint8)
        arr[4:12, 5:16] = 180
        arr[16:25, 18:32] = 120
        low, high, sigma = 25.0, 70.0, 1.4
        out = canny(GrayImage.from_array(arr), low, high, sigma)
        expected = oracle_canny(arr, low, high, sigma)
        np.testing.assert_array_equal(out.pixels, expected)

    def test_bad_thresholds(self):
        img = GrayImage.from_array(np.zeros((4, 4)))
        with pytest.raises(BadThresholds):
            canny(img, 90, 30)

    def test_outputs_binary(self):
        rng = np.random.default_rng(0)
        img = GrayImage.from_array(rng.integers(0, 256, size=(30, 30)))
        out = canny(img, 40, 100)
        assert set(np.unique(out.pixels)) <= {0, 255}


class TestPgm:
    def test_round_trip(self):
        rng = np.random.default_rng(1)
        img = GrayImage.from_array(rng.integers(0, 256, size=(13, 17)))
        again = read_pgm(write_pgm(img))
        np.testing.assert_array_equal(again.pixels, img.pixels)
        assert (again.width, again.height) == (17, 13)

    def test_comment_in_header(self):
        img = GrayImage.from_array(np.arange(6, dtype=np.uint8).reshape(2, 3))
        data = b"P5\n# a comment\n3 2\n255\n" + img.pixels.tobytes()
        np.testing.assert_array_equal(read_pgm(data).pixels, img.pixels)

    def test_bad_magic(self):
        with pytest.raises(MalformedRow):
            read_pgm(b"P2\n2 2\n255\n....")


def line_through(p1, p2):
    """(rho, theta) normal form of the line through two points."""
    dx, dy = p2[0] - p1[0], p2[1] - p1[1]
    theta = math.atan2(dx, -dy) % math.pi
    rho = p1[0] * math.cos(theta) + p1[1] * math.sin(theta)
    if rho < 0 and abs(theta - math.pi) < 1e-12:
        rho, theta = -rho, 0.0
    return rho, theta


class TestHough:
    def test_blank_image_no_lines(self):
        edges = GrayImage.from_array(np.zeros((40, 40)))
        assert hough_lines(edges, vote_threshold=5) == []

    def test_diagonal_line_recovered(self):
        rho, theta = 100.0, math.pi / 4
        img = rasterize_line(200, 200, rho, theta)
        lines = hough_lines(GrayImage.from_array(img), rho_res=1.0,
                            theta_res=math.pi / 180, vote_threshold=40)
        assert lines
        top = lines[0]
        assert abs(top.rho - rho) <= 1.0
        assert abs(top.theta - theta) <= math.pi / 180

    def test_two_parallel_lines_share_theta(self):
        theta = math.pi / 2 + 0.05
        img = np.zeros((200, 200), dtype=np.uint8)
        rasterize_line(200, 200, 60.0, theta, canvas=img)
        rasterize_line(200, 200, 140.0, theta, canvas=img)
        lines = hough_lines(GrayImage.from_array(img), vote_threshold=60)
        assert len(lines) >= 2
        t1, t2 = lines[0].theta, lines[1].theta
        assert abs(t1 - t2) <= math.pi / 180 + 1e-12
        assert abs(abs(lines[0].rho - lines[1].rho) - 80.0) <= 2.0

    def test_randomized_round_trip(self):
        rng = np.random.default_rng(21)
        hits = 0
        trials = 60
        for _ in range(trials):
            p1 = rng.uniform(20, 180, size=2)
            p2 = rng.uniform(20, 180, size=2)
            if np.hypot(*(p2 - p1)) < 80:
                p2 = p1 + (p2 - p1) * 120 / max(np.hypot(*(p2 - p1)), 1e-9)
            rho, theta = line_through(p1, p2)
            img = rasterize_line(200, 200, rho, theta)
            lines = hough_lines(GrayImage.from_array(img), vote_threshold=50)
            if not lines:
                continue
            got = lines[0]
            dt = abs(got.theta - theta)
            same = dt <= math.pi / 180 + 1e-9 and abs(got.rho - rho) <= 1.0 + 1e-9
            wrap = (math.pi - dt) <= math.pi / 180 + 1e-9 and abs(got.rho + rho) <= 1.0 + 1e-9
            hits += same or wrap
        assert hits / trials >= 0.95


def horizontal_boundary(y_intercept, slope=0.0):
    theta = math.atan2(1.0, -slope) % math.pi
    rho = y_intercept * math.sin(theta)
    return Line(rho=rho, theta=theta, votes=100)


class TestLaneGeometry:
    def geometry(self, intercepts, width=640, height=480):
        lines = [horizontal_boundary(b) for b in intercepts]
        cfg = LaneSelectConfig(image_width=width, image_height=height)
        return select_lane_lines(lines, cfg)

    def test_three_lines_two_lanes(self):
        geom = self.geometry([400.0, 300.0, 200.0])
        assert geom.lane_count == 2

    def test_duplicates_merged(self):
        lines = [horizontal_boundary(400.0), horizontal_boundary(405.0),
                 horizontal_boundary(200.0)]
        lines[0] = Line(lines[0].rho, lines[0].theta, votes=150)
        cfg = LaneSelectConfig(image_width=640, image_height=480)
        geom = select_lane_lines(lines, cfg)
        assert geom.lane_count == 1
        assert geom.boundaries[0].votes == 150

    def test_three_lane_mock_ordered_nearest_first(self):
        # camera at the image bottom: nearest boundary has the largest y
        geom = self.geometry([440.0, 330.0, 220.0, 110.0])
        ys = [b.y_at(320.0) for b in geom.boundaries]
        assert ys == sorted(ys, reverse=True)
        assert geom.lane_count == 3

    def test_orientation_filter(self):
        vertical = Line(rho=100.0, theta=0.01, votes=500)
        lines = [horizontal_boundary(400.0), horizontal_boundary(200.0), vertical]
        cfg = LaneSelectConfig(image_width=640, image_height=480)
        geom = select_lane_lines(lines, cfg)
        assert len(geom.boundaries) == 2

    def test_insufficient_lines(self):
        with pytest.raises(InsufficientLines):
            self.geometry([300.0])


class TestAssignLane:
    def geometry(self, intercepts, slopes=None):
        slopes = slopes or [0.0] * len(intercepts)
        lines = [horizontal_boundary(b, m) for b, m in zip(intercepts, slopes)]
        cfg = LaneSelectConfig(image_width=640, image_height=480)
        return select_lane_lines(lines, cfg)

    def test_midway_is_lane_1(self):
        geom = self.geometry([400.0, 300.0, 200.0])
        assert assign_lane((320.0, 350.0), geom) == 1
        assert assign_lane((320.0, 250.0), geom) == 2

    def test_point_on_interior_boundary_goes_nearer_camera(self):
        geom = self.geometry([400.0, 300.0, 200.0])
        assert assign_lane((320.0, 300.0), geom) == 1

    def test_off_road_unknown(self):
        geom = self.geometry([400.0, 300.0, 200.0])
        assert assign_lane((320.0, 450.0), geom) is None
        assert assign_lane((320.0, 100.0), geom) is None

    def test_against_brute_force_strip_oracle(self):
        rng = np.random.default_rng(17)
        intercepts = [430.0, 320.0, 210.0, 100.0]
        slopes = [0.02, -0.01, 0.015, -0.02]
        geom = self.geometry(intercepts, slopes)

        def oracle(px, py):
            ys = [b.y_at(px) for b in geom.boundaries]
            for j in range(len(ys) - 1):
                if ys[j + 1] < py < ys[j]:
                    return j + 1
            return None

        for _ in range(1000):
            px = float(rng.uniform(0, 640))
            py = float(rng.uniform(0, 480))
            assert assign_lane((px, py), geom) == oracle(px, py)


class TestTracking:
    def test_single_object_single_track(self):
        state = TrackerState()
        for i in range(10):
            update_tracks([("car", (10.0 + 8 * i, 100.0), None)], state, float(i))
        assert len(state.active) == 1
        track = next(iter(state.active.values()))
        assert len(track.history) == 10

    def test_two_crossing_objects_keep_identity(self):
        state = TrackerState()
        cfg = TrackerConfig(max_distance=25.0, max_age=3.0)
        for i in range(21):
            a = ("car", (10.0 + 10 * i, 100.0), None)
            b = ("car", (210.0 - 10 * i, 140.0), None)
            update_tracks([a, b], state, float(i), cfg)
        assert len(state.active) == 2
        by_id = sorted(state.active.values(), key=lambda t: t.track_id)
        xs_a = [p[0] for _, p in by_id[0].history]
        assert xs_a == sorted(xs_a)            # track 1 kept moving right
        xs_b = [p[0] for _, p in by_id[1].history]
        assert xs_b == sorted(xs_b, reverse=True)

    def test_gap_beyond_max_age_opens_new_id(self):
        state = TrackerState()
        cfg = TrackerConfig(max_distance=50.0, max_age=2.0)
        update_tracks([("car", (10.0, 10.0), None)], state, 0.0, cfg)
        update_tracks([], state, 1.0, cfg)
        update_tracks([], state, 3.1, cfg)     # age 3.1 > 2 closes the track
        update_tracks([("car", (12.0, 10.0), None)], state, 4.0, cfg)
        assert len(state.closed) == 1
        assert len(state.active) == 1
        assert next(iter(state.active.values())).track_id == 2

    def test_out_of_order_frame(self):
        state = TrackerState()
        update_tracks([], state, 5.0)
        with pytest.raises(OutOfOrderFrame):
            update_tracks([], state, 4.0)

    def test_bbox_center_used_when_no_centroid(self):
        state = TrackerState()
        update_tracks([("car", None, (10.0, 20.0, 30.0, 60.0))], state, 0.0)
        track = next(iter(state.active.values()))
        assert track.history[0][1] == (20.0, 40.0)

    def test_class_gate(self):
        state = TrackerState()
        update_tracks([("car", (10.0, 10.0), None)], state, 0.0)
        update_tracks([("truck", (12.0, 10.0), None)], state, 1.0)
        assert len(state.active) == 2


def make_track(points, cls="car", lane=1, tid=1):
    return Track(track_id=tid, object_class=cls, lane=lane,
                 history=[(float(t), (float(x), float(y))) for t, x, y in points])


class TestClassifyStop:
    def test_stationary_five_seconds(self):
        track = make_track([(i, 50, 50) for i in range(6)])
        classify_stop(track, speed_eps=2.0)
        assert len(track.stop_intervals) == 1
        s, e = track.stop_intervals[0]
        assert e - s == 5
        assert track.state == "stopped"

    def test_three_seconds_is_not_a_stop(self):
        pts = [(0, 50, 50), (1, 50, 50), (2, 50, 50), (3, 50, 50),
               (4, 80, 50), (5, 120, 50)]
        track = make_track(pts)
        classify_stop(track, speed_eps=2.0)
        # slow span is 3 s, below the 4 s rule
        assert track.stop_intervals == []
        assert track.state == "moving"

    def test_jitter_below_eps_tolerated(self):
        pts = [(i, 50 + (0.5 if i % 2 else -0.5), 50) for i in range(7)]
        track = make_track(pts)
        classify_stop(track, speed_eps=2.0)
        assert len(track.stop_intervals) == 1
        s, e = track.stop_intervals[0]
        assert e - s == 6

    def test_monotone_in_min_duration(self):
        rng = np.random.default_rng(3)
        pts = [(i, float(rng.uniform(0, 100)), 50.0) for i in range(30)]
        track = make_track(pts)
        classify_stop(track, speed_eps=30.0, min_duration=4.0)
        at4 = set(track.stop_intervals)
        classify_stop(track, speed_eps=30.0, min_duration=8.0)
        at8 = set(track.stop_intervals)
        assert at8 <= at4


def make_event(cls, lane, tid, ts):
    return ingest.DetectionEvent(cls, lane, tid, float(ts))


class TestBinCounts:
    def test_appendix_style_bin(self):
        t0 = 1000 * 30.0
        events = [
            make_event("car", 1, 1, t0 + 2),
            make_event("car", 1, 2, t0 + 3),
            make_event("car", 2, 3, t0 + 5),
            make_event("truck", 2, 4, t0 + 7),
            make_event("person", 1, 5, t0 + 9),
            make_event("bicycle", 1, 6, t0 + 9),
        ]
        bins = bin_counts(events, lane_count=2)
        assert len(bins) == 1
        b = bins[0]
        assert b.ldpv == (2, 1)
        assert b.hdv == (0, 1)
        assert b.total_vehicle == 4

    def test_empty_bin_zeroes(self):
        events = [make_event("car", 1, 1, 0.0), make_event("car", 1, 2, 70.0)]
        bins = bin_counts(events, lane_count=1)
        assert len(bins) == 3
        assert bins[1].total_vehicle == 0
        assert bins[1].ldpv == (0,)

    def test_unknown_lane_routed_to_audit_bucket(self):
        events = [make_event("car", None, 1, 5.0), make_event("car", 1, 2, 6.0),
                  make_event("truck", 9, 3, 7.0)]
        bins = bin_counts(events, lane_count=2)
        assert bins[0].unknown == 2
        assert bins[0].total_vehicle == 1

    def test_stop_counts_overlap_bins(self):
        track = make_track([(i, 50, 50) for i in range(70)], lane=2, tid=1)
        classify_stop(track, speed_eps=1.0)
        bins = bin_counts([track], lane_count=2, t0=0.0, n_bins=3)
        assert [b.stop_ldpv[1] for b in bins] == [1, 1, 1]
        assert bins[0].ldpv == (0, 1)
        assert bins[1].total_vehicle == 0

    def test_randomized_streams_match_rescan_oracle(self):
        rng = np.random.default_rng(77)
        classes = ["car", "truck", "bus", "motorcycle", "person", "bicycle", "streetcar"]
        for _ in range(50):
            n = int(rng.integers(1, 60))
            events = [
                make_event(classes[rng.integers(len(classes))],
                           int(rng.integers(1, 4)) if rng.random() > 0.1 else None,
                           tid, float(rng.uniform(0, 600)))
                for tid in range(n)
            ]
            bins = bin_counts(events, lane_count=3, t0=0.0, n_bins=20)

            for i, b in enumerate(bins):
                lo, hi = 30.0 * i, 30.0 * (i + 1)
                inside = [e for e in events if lo <= e.timestamp < hi]
                for lane in (1, 2, 3):
                    expect_l = sum(1 for e in inside
                                   if e.object_class in ("car", "motorcycle") and e.lane == lane)
                    expect_h = sum(1 for e in inside
                                   if e.object_class in ("truck", "bus") and e.lane == lane)
                    assert b.ldpv[lane - 1] == expect_l
                    assert b.hdv[lane - 1] == expect_h

    def test_counting_conservation(self):
        rng = np.random.default_rng(13)
        events = [make_event("car" if rng.random() < 0.9 else "bus",
                             int(rng.integers(1, 3)), tid, float(rng.uniform(0, 900)))
                  for tid in range(200)]
        bins = bin_counts(events, lane_count=2)
        assert sum(b.total_vehicle for b in bins) == 200
