"""Fully specified synthetic sessions for end-to-end testing.

A seeded scenario simulates per-lane vehicle arrivals with a periodic red
light at mid-frame, producing genuine stop-and-go queues. Street-level BC
is a weighted emission function of the per-bin features, delayed by a
planted lag (circularly, so the lag stays identifiable at full strength
near the record edges), plus Gaussian noise; an optional wind-dilution
divisor adds a nonlinearity that trees should master and a linear model
should not. Every planted quantity lands in a manifest, and all outputs
are bit-compatible with the session's on-disk formats, so the generator's
files can be pushed through the real pipeline and checked against the
manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import BadConfig
from .ingest import (
    BcSample,
    DetectionEvent,
    TrafficDensitySample,
    WeatherSample,
    format_timestamp,
    serialize_ae51_csv,
    serialize_event_log,
    serialize_traffic,
    serialize_weather,
)
from .vision import Line, rasterize_line

BASE_EPOCH = 1730826000.0        # 2024-11-05 17:00:00 UTC

IMAGE_W, IMAGE_H = 640, 480
LANE_PITCH = 80                  # pixels between boundaries
FIRST_BOUNDARY_Y = 460           # nearest-camera boundary
STOP_LINE_X = 320.0
# kinematics chosen so greedy nearest-centroid tracking at 1 fps cannot
# confuse a follower with its leader: gap > 2 * speed, gate in between,
# and exit headways (gap / speed) longer than the track max age
VEHICLE_SPEED = 12.0             # px/s free flow
QUEUE_GAP = 30.0                 # pixels between queued vehicles
TRACKER_GATE = 15.0              # association gate fitting these kinematics
TRACKER_MAX_AGE = 1.0            # seconds unseen before a track closes

DEFAULT_WEIGHTS = {
    "car_line1": 25.0, "car_line2": 18.0,
    "truck_line1": 150.0, "truck_line2": 120.0,
    "car_line1_stop": 60.0, "car_line2_stop": 45.0,
    "truck_line1_stop": 180.0, "truck_line2_stop": 150.0,
}


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 5400.0
    lane_count: int = 2
    arrival_rate: float = 8.0          # vehicles per minute per lane
    hdv_fraction: float = 0.05
    stop_wave_period: float = 120.0
    stop_wave_dwell: float = 25.0      # red phase length; 0 disables
    planted_lag: float = 160.0
    emission_intercept: float = 250.0
    emission_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    wind_dilution: float = 0.0         # divisor coefficient; 0 disables
    noise_sigma: float = 25.0
    snr_db: float | None = None        # overrides noise_sigma when set
    bc_step: float = 1.0
    bin_seconds: float = 30.0
    pedestrian_rate: float = 0.2       # per minute
    weather_every: float = 120.0
    traffic_every: float = 60.0
    make_frames: bool = False
    emit_detections: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0 or self.lane_count < 1 or self.arrival_rate < 0:
            raise BadConfig("duration, lane_count, arrival_rate must be positive")
        if not 0.0 <= self.hdv_fraction <= 1.0:
            raise BadConfig("hdv_fraction must lie in [0, 1]")
        if abs(self.planted_lag) >= self.duration / 4:
            raise BadConfig("planted lag must stay below a quarter of the duration")


@dataclass
class SyntheticSession:
    config: ScenarioConfig
    events: list                      # DetectionEvent, first-seen order
    frame_detections: list            # (timestamp, [(class, centroid, bbox)])
    weather: list
    traffic: list
    bc_samples: list                  # BcSample at cfg.bc_step
    activity_1s: np.ndarray           # vehicle arrivals per second
    manifest: dict

    def total_vehicle_series(self):
        """Per-bin total vehicle counts as a gridded series (the vector the
        BC record is aligned against)."""
        from .ingest import BcSeries
        totals = [sum(b["ldpv"]) + sum(b["hdv"]) for b in self.manifest["bins"]]
        return BcSeries(start=self.manifest["session_start"],
                        step=self.manifest["bin_seconds"],
                        values=np.asarray(totals, dtype=float))

    def bc_series(self):
        """The generated BC record on its native grid (first cell missing,
        matching the instrument's warm-up row)."""
        from .ingest import BcSeries
        vals = np.array([np.nan if s.bc_raw is None else s.bc_raw
                         for s in self.bc_samples])
        return BcSeries(start=self.bc_samples[0].timestamp,
                        step=self.config.bc_step, values=vals)

    def lane_geometry_obj(self):
        boundaries = [
            {"rho": float(FIRST_BOUNDARY_Y - LANE_PITCH * i), "theta": math.pi / 2}
            for i in range(self.config.lane_count + 1)
        ]
        return {"format": "bctrace-geometry", "version": 1,
                "image_width": IMAGE_W, "image_height": IMAGE_H,
                "boundaries": boundaries}

    def detections_obj(self):
        frames = []
        for t, dets in self.frame_detections:
            frames.append({
                "timestamp": format_timestamp(t),
                "detections": [{"class": cls, "centroid": [float(x), float(y)]}
                               for cls, (x, y), _ in dets],
            })
        return {"format": "bctrace-detections", "version": 1, "frames": frames}


def _lane_center_y(lane):
    return FIRST_BOUNDARY_Y - LANE_PITCH * (lane - 1) - LANE_PITCH / 2.0


STOP_SPEED_EPS = 5.0             # px/s below which a frame pair counts as slow
STOP_MIN_DURATION = 4.0


@dataclass
class _Vehicle:
    track_id: int
    object_class: str
    lane: int
    t_enter: int
    x: float = 0.0
    positions: list = field(default_factory=list)     # (t, x) while on screen
    stops: list = field(default_factory=list)         # (start, end) slow runs
    run_start: int | None = None


def _simulate_traffic(cfg: ScenarioConfig, rng):
    """Integer-second car-following sim with a red light at the stop line."""
    duration = int(cfg.duration)
    red = np.zeros(duration + 1, dtype=bool)
    if cfg.stop_wave_dwell > 0:
        t = np.arange(duration + 1, dtype=float)
        red = (t % cfg.stop_wave_period) < cfg.stop_wave_dwell

    arrivals = rng.poisson(cfg.arrival_rate / 60.0,
                           size=(duration, cfg.lane_count)).tolist()
    vehicles = []
    lanes = [[] for _ in range(cfg.lane_count)]   # active, front first
    next_id = 1
    red_list = red.tolist()

    for t in range(duration):
        row = arrivals[t]
        for lane_i in range(cfg.lane_count):
            for _ in range(row[lane_i]):
                heavy = rng.random() < cfg.hdv_fraction
                if heavy:
                    cls = "truck" if rng.random() < 0.8 else "bus"
                else:
                    cls = "car" if rng.random() < 0.95 else "motorcycle"
                v = _Vehicle(track_id=next_id, object_class=cls,
                             lane=lane_i + 1, t_enter=t)
                next_id += 1
                queue = lanes[lane_i]
                v.x = min(0.0, (queue[-1].x - QUEUE_GAP) if queue else 0.0)
                queue.append(v)
                vehicles.append(v)

        # snapshot at t, then advance positions into t+1; a slow frame pair
        # with both snapshots on screen extends the vehicle's stop run,
        # mirroring what the tracker's stop rule will see at 1 fps
        red_t = red_list[t]
        last_frame = t == duration - 1
        for queue in lanes:
            leader_x = math.inf
            for v in queue:
                x = v.x
                if 0.0 <= x <= IMAGE_W:
                    v.positions.append((t, x))
                nx = x + VEHICLE_SPEED
                if nx > leader_x - QUEUE_GAP:
                    nx = leader_x - QUEUE_GAP
                if red_t and x <= STOP_LINE_X < nx:
                    nx = STOP_LINE_X
                if nx < x:
                    nx = x
                v.x = nx
                leader_x = nx
                if 0.0 <= x and nx <= IMAGE_W and not last_frame:
                    if nx - x < STOP_SPEED_EPS:
                        if v.run_start is None:
                            v.run_start = t
                        continue
                if v.run_start is not None:
                    if t - v.run_start >= STOP_MIN_DURATION:
                        v.stops.append((float(v.run_start), float(t)))
                    v.run_start = None
            while queue and queue[0].x > IMAGE_W:
                queue.pop(0)

    return [v for v in vehicles if v.positions]


def _true_stop_intervals(vehicle, speed_eps=5.0, min_duration=4.0):
    pos = vehicle.positions
    if len(pos) < 2:
        return []
    arr = np.asarray(pos, dtype=float)
    t, x = arr[:, 0], arr[:, 1]
    slow = np.abs(np.diff(x)) / np.diff(t) < speed_eps
    intervals = []
    edges = np.flatnonzero(np.diff(slow.astype(np.int8)))
    starts = [0] if slow[0] else []
    starts += [int(e) + 1 for e in edges if not slow[e]]
    ends = [int(e) + 1 for e in edges if slow[e]]
    if slow[-1]:
        ends.append(len(slow))
    for i, j in zip(starts, ends):
        if t[j] - t[i] >= min_duration:
            intervals.append((float(t[i]), float(t[j])))
    return intervals


def _random_walk(rng, n, start_lo, start_hi, step_sd, lo, hi):
    out = np.empty(n)
    x = rng.uniform(start_lo, start_hi)
    for i in range(n):
        x += rng.normal(0.0, step_sd)
        x = lo + abs(x - lo) if x < lo else x
        x = hi - abs(x - hi) if x > hi else x
        x = min(max(x, lo), hi)
        out[i] = x
    return out


def generate_scenario(cfg: ScenarioConfig = ScenarioConfig()) -> SyntheticSession:
    rng = np.random.default_rng(cfg.seed)
    duration = int(cfg.duration)
    n_bins = int(duration // cfg.bin_seconds)
    bin_s = cfg.bin_seconds

    vehicles = _simulate_traffic(cfg, rng)
    for v in vehicles:
        v.first_seen = int(v.positions[0][0])

    # pedestrians and cyclists: logged and drawn, never counted
    walkers = []
    n_walkers = rng.poisson(cfg.pedestrian_rate * duration / 60.0)
    for _ in range(int(n_walkers)):
        t = int(rng.integers(0, duration))
        cls = "person" if rng.random() < 0.7 else "bicycle"
        walkers.append((t, cls))

    # weather / traffic feeds spanning the session with margin
    wt = np.arange(-300.0, duration + 301.0, cfg.weather_every)
    temp = _random_walk(rng, len(wt), 8, 22, 0.15, -10, 35)
    wind = _random_walk(rng, len(wt), 8, 28, 0.8, 2, 38)
    humid = _random_walk(rng, len(wt), 55, 80, 0.3, 20, 98)
    weather = [
        WeatherSample(BASE_EPOCH + t, round(float(a), 1), round(float(b), 1),
                      round(float(c), 1), "historical")
        for t, a, b, c in zip(wt, temp, wind, humid)
    ]
    weather += [
        WeatherSample(BASE_EPOCH + t, round(float(a) + 0.4, 1),
                      round(float(b) * 0.9, 1), round(min(float(c) + 1.0, 100.0), 1),
                      "forecast")
        for t, a, b, c in zip(wt, temp, wind, humid)
    ]
    tt = np.arange(0.0, duration + 1.0, cfg.traffic_every)
    ratio = _random_walk(rng, len(tt), 0.3, 0.8, 0.03, 0.05, 0.95)
    traffic = [TrafficDensitySample(BASE_EPOCH + t, round(float(r), 2))
               for t, r in zip(tt, ratio)]

    # per-bin ground-truth features
    ldpv = np.zeros((n_bins, cfg.lane_count), dtype=int)
    hdv = np.zeros((n_bins, cfg.lane_count), dtype=int)
    stop_l = np.zeros((n_bins, cfg.lane_count), dtype=int)
    stop_h = np.zeros((n_bins, cfg.lane_count), dtype=int)
    activity_1s = np.zeros(duration)
    for v in vehicles:
        activity_1s[v.first_seen] += 1
        b = int(v.first_seen // bin_s)
        heavy = v.object_class in ("truck", "bus")
        if b < n_bins:
            (hdv if heavy else ldpv)[b, v.lane - 1] += 1
        for s, e in v.stops:
            for k in range(int(s // bin_s), min(int(e // bin_s), n_bins - 1) + 1):
                if s < (k + 1) * bin_s and e > k * bin_s:
                    (stop_h if heavy else stop_l)[k, v.lane - 1] += 1

    def nearest_weather(t_rel):
        i = int(np.argmin(np.abs(wt - t_rel)))
        return temp[i], wind[i], humid[i]

    def nearest_ratio(t_rel):
        return float(ratio[int(np.argmin(np.abs(tt - t_rel)))])

    w = cfg.emission_weights
    emission = np.empty(n_bins)
    wind_at_bin = np.empty(n_bins)
    for k in range(n_bins):
        t_bin = k * bin_s
        te, wi, hu = nearest_weather(t_bin - 120.0)
        wind_at_bin[k] = wi
        lin = cfg.emission_intercept
        lin += w.get("total_vehicle", 0.0) * (ldpv[k].sum() + hdv[k].sum())
        for lane in range(1, cfg.lane_count + 1):
            lin += w.get(f"car_line{lane}", 0.0) * ldpv[k, lane - 1]
            lin += w.get(f"truck_line{lane}", 0.0) * hdv[k, lane - 1]
            lin += w.get(f"car_line{lane}_stop", 0.0) * stop_l[k, lane - 1]
            lin += w.get(f"truck_line{lane}_stop", 0.0) * stop_h[k, lane - 1]
        lin += w.get("history_temperature", 0.0) * te
        lin += w.get("history_wind_speed", 0.0) * wi
        lin += w.get("history_humidity", 0.0) * hu
        lin += w.get("traffic", 0.0) * nearest_ratio(t_bin)
        if cfg.wind_dilution > 0:
            lin /= (1.0 + cfg.wind_dilution * wi)
        emission[k] = lin

    # BC at bc_step: the bin emission delayed by the planted lag, circular
    n_bc = int(duration // cfg.bc_step)
    t_bc = np.arange(n_bc) * cfg.bc_step
    src = np.mod(t_bc - cfg.planted_lag, duration)
    bc_clean = emission[np.minimum((src // bin_s).astype(int), n_bins - 1)]
    if cfg.snr_db is not None:
        sig_var = float(np.var(bc_clean))
        noise_sigma = math.sqrt(sig_var / (10.0 ** (cfg.snr_db / 10.0)))
    else:
        noise_sigma = cfg.noise_sigma
    bc = bc_clean + rng.normal(0.0, noise_sigma, size=n_bc)

    # instrument columns: attenuation loads with deposited BC, scaled so
    # conventional averaging windows span a handful of samples
    atn_rate = 0.008 / max(float(np.mean(np.maximum(bc_clean, 1.0))), 1.0)
    atn = np.round(-3.5 + np.cumsum(np.maximum(bc, 0.0)) * atn_rate * cfg.bc_step,
                   8).tolist()
    bc_int = np.rint(bc).tolist()
    stamps = (BASE_EPOCH + t_bc).tolist()
    bc_samples = [
        BcSample(timestamp=stamps[i], ref_count=890000 + i * 2, sen_count=921500,
                 atn=atn[i], flow=100.0, pcb_temp=20.0, status=0, battery=98.0,
                 bc_raw=None if i == 0 else bc_int[i], ona_pts=None)
        for i in range(n_bc)
    ]

    # event log: one line per first-seen object, time-ordered
    events = []
    for v in vehicles:
        events.append(DetectionEvent(v.object_class, v.lane, v.track_id,
                                     BASE_EPOCH + float(v.first_seen)))
    walker_id = (max((v.track_id for v in vehicles), default=0)) + 1
    for t, cls in walkers:
        events.append(DetectionEvent(cls, 1, walker_id, BASE_EPOCH + float(t)))
        walker_id += 1
    events.sort(key=lambda e: (e.timestamp, e.track_id))

    frame_detections = []
    if cfg.emit_detections:
        by_frame = {}
        for v in vehicles:
            y = _lane_center_y(v.lane)
            for t, x in v.positions:
                by_frame.setdefault(t, []).append((v.object_class, (x, y), None))
        for t, cls in walkers:
            for dt in range(0, 40):
                ft = t + dt
                if ft <= duration:
                    by_frame.setdefault(ft, []).append(
                        (cls, (5.0 + 3.0 * dt, 470.0), None))
        frame_detections = [(BASE_EPOCH + float(t), sorted(by_frame[t]))
                            for t in sorted(by_frame)]

    manifest = {
        "format": "bctrace-manifest",
        "version": 1,
        "seed": cfg.seed,
        "planted_lag": cfg.planted_lag,
        "noise_sigma": noise_sigma,
        "emission_intercept": cfg.emission_intercept,
        "emission_weights": dict(cfg.emission_weights),
        "wind_dilution": cfg.wind_dilution,
        "lane_count": cfg.lane_count,
        "bin_seconds": bin_s,
        "session_start": BASE_EPOCH,
        "n_vehicles": len(vehicles),
        "bins": [
            {
                "bin_start": BASE_EPOCH + k * bin_s,
                "ldpv": ldpv[k].tolist(),
                "hdv": hdv[k].tolist(),
                "stop_ldpv": stop_l[k].tolist(),
                "stop_hdv": stop_h[k].tolist(),
                "emission": float(emission[k]),
            }
            for k in range(n_bins)
        ],
    }

    return SyntheticSession(config=cfg, events=events,
                            frame_detections=frame_detections,
                            weather=weather, traffic=traffic,
                            bc_samples=bc_samples, activity_1s=activity_1s,
                            manifest=manifest)


def make_lane_frame(cfg: ScenarioConfig, rng=None):
    """One synthetic camera frame with the lane boundaries painted."""
    rng = rng or np.random.default_rng(cfg.seed)
    img = np.full((IMAGE_H, IMAGE_W), 90, dtype=np.uint8)
    img = (img + rng.integers(-6, 7, size=img.shape)).clip(0, 255).astype(np.uint8)
    for i in range(cfg.lane_count + 1):
        y = FIRST_BOUNDARY_Y - LANE_PITCH * i
        rasterize_line(IMAGE_W, IMAGE_H, float(y), math.pi / 2, value=230, canvas=img)
        rasterize_line(IMAGE_W, IMAGE_H, float(y - 1), math.pi / 2, value=230, canvas=img)
    return img


def write_scenario(session: SyntheticSession, out_dir):
    """Materialize a scenario as on-disk session files; returns the paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = session.config
    paths = {}

    def emit(name, data):
        p = out / name
        if isinstance(data, str):
            data = data.encode()
        p.write_bytes(data)
        paths[name] = p

    emit("ae51.csv", serialize_ae51_csv(session.bc_samples))
    emit("events.log", serialize_event_log(session.events))
    emit("weather.csv", serialize_weather(session.weather))
    emit("traffic.csv", serialize_traffic(session.traffic))
    emit("geometry.json", json.dumps(session.lane_geometry_obj(), indent=1) + "\n")
    emit("manifest.json", json.dumps(session.manifest, indent=1, sort_keys=True) + "\n")
    emit("scenario.json", json.dumps(scenario_config_to_obj(cfg), indent=1,
                                     sort_keys=True) + "\n")
    if cfg.emit_detections:
        emit("detections.json", json.dumps(session.detections_obj()) + "\n")
    if cfg.make_frames:
        from .vision import GrayImage, write_pgm
        frames_dir = out / "frames"
        frames_dir.mkdir(exist_ok=True)
        rng = np.random.default_rng(cfg.seed + 1)
        for i in range(3):
            img = make_lane_frame(cfg, rng)
            (frames_dir / f"frame{i:03d}.pgm").write_bytes(
                write_pgm(GrayImage.from_array(img)))
        paths["frames"] = frames_dir
    return paths


def scenario_config_to_obj(cfg: ScenarioConfig):
    obj = asdict(cfg)
    obj["format"] = "bctrace-scenario"
    obj["version"] = 1
    return obj


def scenario_config_from_obj(obj):
    fields = {k: v for k, v in obj.items() if k not in ("format", "version")}
    try:
        return ScenarioConfig(**fields)
    except TypeError as exc:
        raise BadConfig(str(exc))
