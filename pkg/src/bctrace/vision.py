"""Frame-level lane geometry and detection-stream aggregation.

Lane boundaries come from the classic chain: Gaussian smoothing, Sobel
gradients, non-maximum suppression, hysteresis thresholding, then a
(rho, theta) accumulator over the edge map. Boundaries are ordered from
the camera outward, so lane 1 is the lane nearest the monitoring setup.

Detections are associated frame to frame by nearest centroid under a
distance gate; a track whose speed stays below a small threshold for at
least four seconds is classified as stopped. Per-bin counts split light
from heavy vehicles per lane, with stop counts tallied per bin overlap.

Convolutions accumulate kernel taps in a fixed order so that a per-pixel
reference recomputation reproduces them bit for bit.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadThresholds,
    EmptyInput,
    InsufficientLines,
    MalformedRow,
    MissingKey,
    OutOfOrderFrame,
    RangeViolation,
    TypeMismatch,
)
from .ingest import DetectionEvent, _coerce_time

LDPV_CLASSES = frozenset({"car", "motorcycle"})
HDV_CLASSES = frozenset({"truck", "bus"})
EXCLUDED_CLASSES = frozenset({"person", "bicycle", "streetcar"})


# ---------------------------------------------------------------------------
# images

@dataclass(eq=False)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray          # uint8, shape (height, width)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise RangeViolation(
                f"pixel buffer {self.pixels.shape} does not match "
                f"{self.height}x{self.width}")

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


def read_pgm(data) -> GrayImage:
    """Binary 8-bit PGM (P5)."""
    if hasattr(data, "read_bytes"):
        data = data.read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        m = re.compile(rb"\s*(?:#[^\n]*\n)*\s*(\S+)").match(data, pos)
        if m is None:
            raise MalformedRow(1, "truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise MalformedRow(1, f"not a binary PGM: magic {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise MalformedRow(1, f"only 8-bit PGM supported, maxval {maxval}")
    raw = data[pos + 1: pos + 1 + w * h]
    if len(raw) != w * h:
        raise MalformedRow(1, "truncated PGM pixel data")
    return GrayImage(width=w, height=h,
                     pixels=np.frombuffer(raw, dtype=np.uint8).reshape(h, w))


def write_pgm(img: GrayImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


# ---------------------------------------------------------------------------
# edge detection

def gaussian_kernel(sigma):
    """Normalized 1-D Gaussian, radius 3*sigma."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_separable(img, kernel):
    """Reflect-padded separable convolution, taps accumulated in order."""
    r = (len(kernel) - 1) // 2
    padded = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    out = np.zeros_like(img, dtype=float)
    for j, k in enumerate(kernel):
        out += k * padded[:, j: j + img.shape[1]]
    padded = np.pad(out, ((r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(img, dtype=float)
    for j, k in enumerate(kernel):
        out += k * padded[j: j + img.shape[0], :]
    return out


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=float)


def _correlate3(img, kernel):
    padded = np.pad(img, 1, mode="reflect")
    out = np.zeros_like(img, dtype=float)
    for dy in range(3):
        for dx in range(3):
            k = kernel[dy, dx]
            if k != 0.0:
                out += k * padded[dy: dy + img.shape[0], dx: dx + img.shape[1]]
    return out


def canny(img: GrayImage, low: float, high: float, sigma: float = 1.4) -> GrayImage:
    """Edge map in {0, 255}: smooth, find gradients, thin, link.

    Pixels at or above ``high`` seed edges; pixels between ``low`` and
    ``high`` survive only when 8-connected to a seed.
    """
    if low < 0 or low > high:
        raise BadThresholds(f"need 0 <= low <= high, got low={low}, high={high}")
    data = img.pixels.astype(float)
    if sigma > 0:
        data = _convolve_separable(data, gaussian_kernel(sigma))
    gx = _correlate3(data, _SOBEL_X)
    gy = _correlate3(data, _SOBEL_Y)
    mag = np.hypot(gx, gy)

    thin = _nonmax_suppress(mag, gx, gy)
    strong = thin >= high
    weak = (thin >= low) & ~strong
    edges = _hysteresis(strong, weak)
    return GrayImage.from_array(np.where(edges, 255, 0))


def _nonmax_suppress(mag, gx, gy):
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    # quantized gradient direction -> neighbor offsets (dy, dx)
    offsets = np.zeros((h, w, 2), dtype=int)
    horizontal = (angle < 22.5) | (angle >= 157.5)
    diag_up = (angle >= 22.5) & (angle < 67.5)
    vertical = (angle >= 67.5) & (angle < 112.5)
    diag_down = (angle >= 112.5) & (angle < 157.5)
    offsets[horizontal] = (0, 1)
    offsets[diag_up] = (1, 1)
    offsets[vertical] = (1, 0)
    offsets[diag_down] = (1, -1)

    ys, xs = np.mgrid[0:h, 0:w]
    ny, nx = offsets[..., 0], offsets[..., 1]
    ahead = padded[ys + 1 + ny, xs + 1 + nx]
    behind = padded[ys + 1 - ny, xs + 1 - nx]
    # strict against one side, ties broken toward the earlier pixel
    keep = (mag > behind) & (mag >= ahead)
    return np.where(keep, mag, 0.0)


def _hysteresis(strong, weak):
    edges = strong.copy()
    while True:
        padded = np.pad(edges, 1, mode="constant")
        neighbor = np.zeros_like(edges)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                if dy == 1 and dx == 1:
                    continue
                neighbor |= padded[dy: dy + edges.shape[0], dx: dx + edges.shape[1]]
        grown = edges | (weak & neighbor)
        if grown.sum() == edges.sum():
            return grown
        edges = grown


# ---------------------------------------------------------------------------
# line detection

@dataclass(frozen=True)
class Line:
    rho: float        # pixels, signed distance from the image origin
    theta: float      # radians in [0, pi)
    votes: int = 0

    def __post_init__(self):
        if not 0.0 <= self.theta < math.pi:
            raise RangeViolation(f"theta {self.theta} outside [0, pi)")

    def y_at(self, x):
        if abs(math.sin(self.theta)) < 1e-9:
            raise RangeViolation("vertical line has no y(x)")
        return (self.rho - x * math.cos(self.theta)) / math.sin(self.theta)


def hough_lines(edges: GrayImage, rho_res: float = 1.0,
                theta_res: float = math.pi / 180.0,
                vote_threshold: int = 50) -> list[Line]:
    """Peaks of the (rho, theta) accumulator over the edge pixels.

    Returns accumulator local maxima at or above ``vote_threshold``,
    strongest first; rho and theta are bin centers.
    """
    if rho_res <= 0 or theta_res <= 0:
        raise RangeViolation("resolutions must be > 0")
    ys, xs = np.nonzero(edges.pixels)
    thetas = np.arange(0.0, math.pi - 1e-12, theta_res)
    diag = math.hypot(edges.width - 1, edges.height - 1)
    n_rho = 2 * int(math.ceil(diag / rho_res)) + 1
    offset = n_rho // 2

    acc = np.zeros((n_rho, len(thetas)), dtype=np.int64)
    if len(xs):
        cos = np.cos(thetas)
        sin = np.sin(thetas)
        rho_bins = np.rint((xs[:, None] * cos[None, :] + ys[:, None] * sin[None, :])
                           / rho_res).astype(int) + offset
        for t in range(len(thetas)):
            np.add.at(acc[:, t], rho_bins[:, t], 1)

    peaks = _accumulator_peaks(acc, vote_threshold)
    lines = [Line(rho=(r - offset) * rho_res, theta=float(thetas[t]),
                  votes=int(acc[r, t])) for r, t in peaks]
    lines.sort(key=lambda l: (-l.votes, l.rho, l.theta))
    return lines


def _accumulator_peaks(acc, threshold):
    h, w = acc.shape
    padded = np.pad(acc, 1, mode="constant")
    neighborhood_max = np.zeros_like(acc)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            np.maximum(neighborhood_max,
                       padded[dy: dy + h, dx: dx + w], out=neighborhood_max)
    candidates = np.argwhere((acc >= threshold) & (acc == neighborhood_max))
    # plateaus of equal votes: keep only the first cell in scan order
    kept = []
    kept_set = set()
    for r, t in map(tuple, candidates):
        touches_kept = any(
            (r + dy, t + dx) in kept_set
            for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
        )
        if not touches_kept:
            kept.append((r, t))
            kept_set.add((r, t))
    return kept


def rasterize_line(width, height, rho, theta, value=255, canvas=None):
    """Draw the line x cos(theta) + y sin(theta) = rho onto a uint8 image."""
    img = np.zeros((height, width), dtype=np.uint8) if canvas is None else canvas
    c, s = math.cos(theta), math.sin(theta)
    if abs(s) >= abs(c):
        for x in range(width):
            y = int(round((rho - x * c) / s))
            if 0 <= y < height:
                img[y, x] = value
    else:
        for y in range(height):
            x = int(round((rho - y * s) / c))
            if 0 <= x < width:
                img[y, x] = value
    return img


# ---------------------------------------------------------------------------
# lane geometry

@dataclass(frozen=True)
class LaneSelectConfig:
    image_width: int
    image_height: int
    theta_center: float = math.pi / 2    # lane boundaries run roughly level
    theta_halfwidth: float = math.pi / 8
    min_separation: float = 20.0         # pixels of rho between boundaries


@dataclass
class LaneGeometry:
    boundaries: list[Line]      # ordered nearest-to-camera first
    image_width: int
    image_height: int

    def __post_init__(self):
        if len(self.boundaries) < 2:
            raise InsufficientLines("lane geometry needs at least two boundaries")

    @property
    def lane_count(self):
        return len(self.boundaries) - 1


def _theta_distance(a, b):
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def select_lane_lines(lines, cfg: LaneSelectConfig) -> LaneGeometry:
    """Reduce raw line detections to ordered lane boundaries.

    Lines within the orientation window are single-link clustered on rho;
    each cluster keeps its strongest member. Boundaries are ordered by
    distance from the image bottom edge, nearest the camera first.
    """
    oriented = [l for l in lines
                if _theta_distance(l.theta, cfg.theta_center) <= cfg.theta_halfwidth]
    if len(oriented) < 2:
        raise InsufficientLines(
            f"{len(oriented)} candidate boundaries after orientation filtering")

    oriented.sort(key=lambda l: l.rho)
    clusters = [[oriented[0]]]
    for line in oriented[1:]:
        if line.rho - clusters[-1][-1].rho <= cfg.min_separation:
            clusters[-1].append(line)
        else:
            clusters.append([line])
    if len(clusters) < 2:
        raise InsufficientLines(f"{len(clusters)} boundaries after clustering")

    reps = [max(c, key=lambda l: (l.votes, -l.rho)) for c in clusters]
    mid_x = cfg.image_width / 2.0
    bottom = cfg.image_height - 1.0
    reps.sort(key=lambda l: bottom - l.y_at(mid_x))
    return LaneGeometry(boundaries=reps, image_width=cfg.image_width,
                        image_height=cfg.image_height)


def assign_lane(centroid, geom: LaneGeometry):
    """Lane index (1-based) for a pixel point, or None when off-road.

    A point sitting exactly on an interior boundary belongs to the
    nearer-camera lane; the outermost boundaries count as off-road edges.
    """
    x, y = float(centroid[0]), float(centroid[1])
    ref = (geom.image_width / 2.0, geom.image_height - 1.0)

    def far_side(line, px, py):
        s = px * math.cos(line.theta) + py * math.sin(line.theta) - line.rho
        s_ref = ref[0] * math.cos(line.theta) + ref[1] * math.sin(line.theta) - line.rho
        return -s if s_ref > 0 else s    # > 0 means farther from camera than the line

    sides = [far_side(b, x, y) for b in geom.boundaries]
    for j in range(geom.lane_count):
        if sides[j] > 0 and sides[j + 1] <= 0:
            return j + 1
    return None


# ---------------------------------------------------------------------------
# tracking

@dataclass
class Track:
    track_id: int
    object_class: str
    history: list = field(default_factory=list)       # (timestamp, (x, y))
    lane: int | None = None
    state: str = "moving"
    stop_intervals: list = field(default_factory=list)  # (start, end)

    @property
    def first_seen(self):
        return self.history[0][0]

    @property
    def last_seen(self):
        return self.history[-1][0]


@dataclass(frozen=True)
class TrackerConfig:
    max_distance: float = 60.0   # association gate, pixels
    max_age: float = 2.0         # seconds unseen before a track closes


@dataclass
class TrackerState:
    active: dict = field(default_factory=dict)   # id -> Track
    closed: list = field(default_factory=list)
    next_id: int = 1
    last_time: float | None = None

    def all_tracks(self):
        return self.closed + sorted(self.active.values(), key=lambda t: t.track_id)


def update_tracks(detections, state: TrackerState, timestamp,
                  cfg: TrackerConfig = TrackerConfig(),
                  geometry: LaneGeometry | None = None) -> TrackerState:
    """Fold one frame of detections into the tracker state.

    ``detections`` holds (object_class, centroid, bbox) triples; the bbox
    center stands in when the centroid is absent. Matching is greedy
    nearest-centroid within the same class under the distance gate.
    """
    if state.last_time is not None and timestamp <= state.last_time:
        raise OutOfOrderFrame(
            f"frame at {timestamp} after frame at {state.last_time}")
    state.last_time = timestamp

    # age out stale tracks before matching so they cannot capture detections
    for tid in [t for t in state.active
                if timestamp - state.active[t].last_seen > cfg.max_age]:
        state.closed.append(state.active.pop(tid))

    points = []
    for det in detections:
        cls, centroid, bbox = det
        if centroid is None:
            if bbox is None:
                raise RangeViolation("detection carries neither centroid nor bbox")
            x0, y0, x1, y1 = bbox
            centroid = ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        points.append((cls, (float(centroid[0]), float(centroid[1]))))

    candidates = []
    for di, (cls, pt) in enumerate(points):
        for track in state.active.values():
            if track.object_class != cls:
                continue
            last = track.history[-1][1]
            dist = math.hypot(pt[0] - last[0], pt[1] - last[1])
            if dist <= cfg.max_distance:
                candidates.append((dist, track.track_id, di))
    candidates.sort()

    matched_tracks, matched_dets = set(), set()
    for dist, tid, di in candidates:
        if tid in matched_tracks or di in matched_dets:
            continue
        matched_tracks.add(tid)
        matched_dets.add(di)
        state.active[tid].history.append((timestamp, points[di][1]))

    for di, (cls, pt) in enumerate(points):
        if di in matched_dets:
            continue
        track = Track(track_id=state.next_id, object_class=cls,
                      history=[(timestamp, pt)])
        if geometry is not None:
            track.lane = assign_lane(pt, geometry)
        state.next_id += 1
        state.active[track.track_id] = track

    state.closed.sort(key=lambda t: t.track_id)
    return state


def classify_stop(track: Track, speed_eps: float, min_duration: float = 4.0) -> Track:
    """Mark maximal slow intervals of at least ``min_duration`` as stops."""
    if len(track.history) < 2:
        return track
    times = [t for t, _ in track.history]
    pts = [p for _, p in track.history]
    slow = []
    for i in range(len(pts) - 1):
        dt = times[i + 1] - times[i]
        v = math.hypot(pts[i + 1][0] - pts[i][0], pts[i + 1][1] - pts[i][1]) / dt
        slow.append(v < speed_eps)

    intervals = []
    i = 0
    while i < len(slow):
        if slow[i]:
            j = i
            while j < len(slow) and slow[j]:
                j += 1
            start, end = times[i], times[j]
            if end - start >= min_duration:
                intervals.append((start, end))
            i = j
        else:
            i += 1
    track.stop_intervals = intervals
    track.state = ("stopped" if intervals and intervals[-1][1] == times[-1]
                   else "moving")
    return track


# ---------------------------------------------------------------------------
# on-disk helpers for geometry and per-frame detections

def geometry_to_obj(geom: LaneGeometry):
    return {
        "format": "bctrace-geometry", "version": 1,
        "image_width": geom.image_width, "image_height": geom.image_height,
        "boundaries": [{"rho": b.rho, "theta": b.theta, "votes": b.votes}
                       for b in geom.boundaries],
    }


def geometry_from_obj(obj) -> LaneGeometry:
    if obj.get("format") != "bctrace-geometry":
        raise TypeMismatch("format", "not a lane geometry document")
    boundaries = [Line(rho=float(b["rho"]), theta=float(b["theta"]),
                       votes=int(b.get("votes", 0)))
                  for b in obj["boundaries"]]
    return LaneGeometry(boundaries=boundaries,
                        image_width=int(obj["image_width"]),
                        image_height=int(obj["image_height"]))


def parse_detections(text):
    """Per-frame detections JSON into [(timestamp, [(class, centroid, bbox)])].

    Frames carry a timestamp and a detection list; each detection names its
    class and either a centroid or a bounding box.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    obj = json.loads(text)
    if obj.get("format") != "bctrace-detections":
        raise TypeMismatch("format", "not a detections document")
    frames = []
    for i, frame in enumerate(obj.get("frames", []), start=1):
        if "timestamp" not in frame:
            raise MissingKey("timestamp", f"frame {i}")
        ts = _coerce_time(frame["timestamp"])
        dets = []
        for d in frame.get("detections", []):
            cls = d.get("class")
            if cls is None:
                raise MissingKey("class", f"frame {i}")
            centroid = tuple(d["centroid"]) if d.get("centroid") else None
            bbox = tuple(d["bbox"]) if d.get("bbox") else None
            if centroid is None and bbox is None:
                raise MissingKey("centroid", f"frame {i}")
            dets.append((str(cls), centroid, bbox))
        frames.append((ts, dets))
    frames.sort(key=lambda f: f[0])
    return frames


# ---------------------------------------------------------------------------
# per-bin counts

@dataclass(eq=True)
class BinCounts:
    bin_start: float
    ldpv: tuple[int, ...]
    hdv: tuple[int, ...]
    stop_ldpv: tuple[int, ...]
    stop_hdv: tuple[int, ...]
    unknown: int = 0             # vehicles without a usable lane, audit only

    @property
    def total_vehicle(self):
        return sum(self.ldpv) + sum(self.hdv)


def _as_countable(item):
    """(class, lane, first_seen, stop_intervals) from a Track or event."""
    if isinstance(item, Track):
        return item.object_class, item.lane, item.first_seen, item.stop_intervals
    if isinstance(item, DetectionEvent):
        return item.object_class, item.lane, item.timestamp, ()
    raise RangeViolation(f"cannot count a {type(item).__name__}")


def bin_counts(items, lane_count=None, bin_seconds=30.0, t0=None, n_bins=None):
    """Per-bin vehicle counts split by class group and lane.

    A vehicle lands in the bin of its first appearance. Stop counts tally
    vehicles whose stop interval overlaps each bin. Light vehicles are
    cars and motorcycles, heavy ones trucks and buses; people, bicycles,
    and streetcars never count. Vehicles whose lane is unknown or beyond
    ``lane_count`` go to the audit bucket only.
    """
    rows = [_as_countable(it) for it in items]
    rows = [r for r in rows if r[0] not in EXCLUDED_CLASSES]
    for cls, _, _, _ in rows:
        if cls not in LDPV_CLASSES | HDV_CLASSES:
            raise RangeViolation(f"unclassified object class {cls!r}")
    if not rows and n_bins is None:
        return []

    if lane_count is None:
        lanes = [lane for _, lane, _, _ in rows if lane is not None]
        lane_count = max(lanes) if lanes else 1
    if t0 is None:
        first = min(t for _, _, t, _ in rows)
        t0 = math.floor(first / bin_seconds) * bin_seconds
    if n_bins is None:
        last = max(t for _, _, t, _ in rows)
        n_bins = int(math.floor((last - t0) / bin_seconds)) + 1

    ldpv = np.zeros((n_bins, lane_count), dtype=int)
    hdv = np.zeros((n_bins, lane_count), dtype=int)
    stop_l = np.zeros((n_bins, lane_count), dtype=int)
    stop_h = np.zeros((n_bins, lane_count), dtype=int)
    unknown = np.zeros(n_bins, dtype=int)

    for cls, lane, first_seen, stops in rows:
        b = int(math.floor((first_seen - t0) / bin_seconds))
        if not 0 <= b < n_bins:
            continue
        heavy = cls in HDV_CLASSES
        if lane is None or not 1 <= lane <= lane_count:
            unknown[b] += 1
            continue
        (hdv if heavy else ldpv)[b, lane - 1] += 1
        tally = stop_h if heavy else stop_l
        for s, e in stops:
            lo = max(0, int(math.floor((s - t0) / bin_seconds)))
            hi = min(n_bins - 1, int(math.floor((e - t0) / bin_seconds)))
            for k in range(lo, hi + 1):
                bs, be = t0 + k * bin_seconds, t0 + (k + 1) * bin_seconds
                if s < be and e > bs:
                    tally[k, lane - 1] += 1

    return [
        BinCounts(bin_start=t0 + i * bin_seconds,
                  ldpv=tuple(int(v) for v in ldpv[i]),
                  hdv=tuple(int(v) for v in hdv[i]),
                  stop_ldpv=tuple(int(v) for v in stop_l[i]),
                  stop_hdv=tuple(int(v) for v in stop_h[i]),
                  unknown=int(unknown[i]))
        for i in range(n_bins)
    ]
