"""Parsers for the session's on-disk formats and time-grid resampling.

Four formats cross this boundary: the microaethalometer CSV (one reading
per row, 10-30 s cadence), the detection event log (one line per
first-seen object), feature-row JSON (the joined per-bin dataset), and
weather/traffic feeds recorded as CSV or JSON. All timestamps are
normalized to UTC epoch seconds at parse time and re-emitted canonically.

Parsers are total: every input yields either parsed values or a
positioned error, never a silent skip.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyInput,
    MalformedRow,
    MissingKey,
    NonMonotoneTime,
    RangeViolation,
    TypeMismatch,
    UnknownClass,
)

VEHICLE_CLASSES = ("car", "truck", "bus", "motorcycle", "bicycle", "person", "streetcar")

AE51_HEADER = (
    "Date", "Time", "Ref", "Sen", "ATN", "Flow",
    "Pcb temp", "Status", "Battery", "BC", "Ona_#_pts_avg",
)

_EPOCH = dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)


# ---------------------------------------------------------------------------
# timestamps

def parse_timestamp(text):
    """UTC epoch seconds from 'YYYY/MM/DD HH:MM:SS', 'YYYY-MM-DD HH:MM:SS',
    or ISO-8601 with 'T'/'Z'.  Raises ValueError on anything else."""
    s = str(text).strip().replace("/", "-")
    if s.endswith("Z"):
        s = s[:-1]
    s = s.replace("T", " ")
    d = dt.datetime.strptime(s, "%Y-%m-%d %H:%M:%S").replace(tzinfo=dt.timezone.utc)
    return (d - _EPOCH).total_seconds()


def format_timestamp(ts, sep="T", suffix="Z"):
    """Canonical ISO-8601 rendering of UTC epoch seconds."""
    d = _EPOCH + dt.timedelta(seconds=float(ts))
    return d.strftime(f"%Y-%m-%d{sep}%H:%M:%S") + suffix


def _coerce_time(value, key="timestamp"):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    try:
        return parse_timestamp(value)
    except (ValueError, TypeError):
        raise TypeMismatch(key, f"unparseable timestamp {value!r}")


def _decode(text):
    if isinstance(text, bytes):
        return text.decode("utf-8")
    if hasattr(text, "read"):
        data = text.read()
        return data.decode("utf-8") if isinstance(data, bytes) else data
    return text


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class BcSample:
    """One raw microaethalometer reading."""

    timestamp: float
    ref_count: int
    sen_count: int
    atn: float
    flow: float
    pcb_temp: float
    status: int
    battery: float
    bc_raw: float | None = None     # ng/m3, signed; None on warm-up rows
    ona_pts: int | None = None


@dataclass(frozen=True)
class DetectionEvent:
    """First-seen record of one tracked object."""

    object_class: str
    lane: int | None
    track_id: int
    timestamp: float
    centroid: tuple[float, float] | None = None
    bbox: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class WeatherSample:
    timestamp: float
    temperature: float
    wind_speed: float      # km/h
    humidity: float        # percent
    kind: str = "historical"

    def __post_init__(self):
        if not 0.0 <= self.humidity <= 100.0:
            raise RangeViolation(f"humidity {self.humidity} outside [0, 100]")
        if self.wind_speed < 0.0:
            raise RangeViolation(f"wind speed {self.wind_speed} < 0")
        if self.kind not in ("historical", "forecast"):
            raise TypeMismatch("kind", self.kind)


@dataclass(frozen=True)
class TrafficDensitySample:
    timestamp: float
    ratio: float

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise RangeViolation(f"traffic ratio {self.ratio} outside [0, 1]")


@dataclass(eq=False)
class BcSeries:
    """Values on a uniform time grid; NaN marks missing cells.

    ``atn`` and ``ona_pts`` ride along when known (parallel arrays of the
    same length).  ``atn=None`` makes this a plain gridded series, which is
    how vehicle-activity vectors are carried around too.
    """

    start: float
    step: float
    values: np.ndarray
    atn: np.ndarray | None = None
    ona_pts: np.ndarray | None = None

    def __post_init__(self):
        if self.step <= 0:
            raise RangeViolation(f"step {self.step} must be > 0")
        self.values = np.asarray(self.values, dtype=float)
        if self.atn is not None:
            self.atn = np.asarray(self.atn, dtype=float)
            if len(self.atn) != len(self.values):
                raise RangeViolation("atn and values must have equal length")
        if self.ona_pts is not None:
            self.ona_pts = np.asarray(self.ona_pts, dtype=float)
            if len(self.ona_pts) != len(self.values):
                raise RangeViolation("ona_pts and values must have equal length")

    def __len__(self):
        return len(self.values)

    @property
    def duration(self):
        return len(self.values) * self.step

    @property
    def end(self):
        return self.start + self.duration

    def times(self):
        return self.start + self.step * np.arange(len(self.values))

    def cell(self, timestamp):
        """Index of the grid cell containing ``timestamp``, or None."""
        i = math.floor((timestamp - self.start) / self.step)
        return i if 0 <= i < len(self.values) else None


@dataclass(eq=True)
class FeatureRow:
    """One 30-second bin of covariates plus the BC targets.

    Per-lane counts are tuples indexed from lane 1 (nearest the monitor)
    outward.  ``bc_raw`` is the unfiltered target, ``bc_post`` the
    noise-reduced one; either may be None for rows that lack coverage.
    """

    timestamp: float
    ldpv: tuple[int, ...]
    hdv: tuple[int, ...]
    stop_ldpv: tuple[int, ...]
    stop_hdv: tuple[int, ...]
    his_temp: float
    his_wind: float
    his_humid: float
    traffic: float | None = None
    bc_raw: float | None = None
    bc_post: float | None = None
    forecast_temp: float | None = None
    forecast_wind: float | None = None
    forecast_humid: float | None = None
    source: str = ""

    def __post_init__(self):
        lanes = {len(self.ldpv), len(self.hdv), len(self.stop_ldpv), len(self.stop_hdv)}
        if len(lanes) != 1:
            raise RangeViolation("per-lane count tuples must share one lane count")
        for t in (self.ldpv, self.hdv, self.stop_ldpv, self.stop_hdv):
            if any(c < 0 for c in t):
                raise RangeViolation("counts must be >= 0")
        if not 0.0 <= self.his_humid <= 100.0:
            raise RangeViolation(f"humidity {self.his_humid} outside [0, 100]")

    @property
    def lane_count(self):
        return len(self.ldpv)

    @property
    def total_vehicle(self):
        return sum(self.ldpv) + sum(self.hdv)


# ---------------------------------------------------------------------------
# AE51 CSV

def parse_ae51_csv(text):
    """Parse a microaethalometer CSV export into BcSamples.

    The header must carry the instrument's column names (case-insensitive).
    An empty BC field (the warm-up first row) becomes a missing ``bc_raw``;
    a 'NULL' or empty averaging-points field becomes a missing ``ona_pts``.
    """
    lines = _decode(text).splitlines()
    rows = [(i + 1, ln.strip()) for i, ln in enumerate(lines) if ln.strip()]
    if not rows:
        return []

    header_no, header = rows[0]
    names = [c.strip().casefold() for c in header.split(",")]
    if names != [c.casefold() for c in AE51_HEADER]:
        raise MalformedRow(header_no, f"unexpected header {header!r}")

    samples = []
    prev_ts = None
    for lineno, line in rows[1:]:
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(AE51_HEADER):
            raise MalformedRow(lineno, f"expected {len(AE51_HEADER)} columns, got {len(cells)}")
        try:
            ts = parse_timestamp(f"{cells[0]} {cells[1]}")
        except ValueError:
            raise MalformedRow(lineno, f"bad date/time {cells[0]!r} {cells[1]!r}")
        if prev_ts is not None and ts <= prev_ts:
            raise NonMonotoneTime(f"line {lineno}: timestamp {cells[0]} {cells[1]} does not advance")
        prev_ts = ts
        try:
            ref, sen = int(cells[2]), int(cells[3])
            atn = float(cells[4])
            flow = float(cells[5])
            pcb = float(cells[6])
            status = int(cells[7])
            battery = float(cells[8])
            bc = float(cells[9]) if cells[9] != "" else None
            ona = None if cells[10] in ("", "NULL") else int(cells[10])
        except ValueError as exc:
            raise MalformedRow(lineno, str(exc))
        if flow <= 0:
            raise MalformedRow(lineno, f"flow {flow} must be > 0")
        if not 0 <= battery <= 100:
            raise MalformedRow(lineno, f"battery {battery} outside [0, 100]")
        samples.append(BcSample(ts, ref, sen, atn, flow, pcb, status, battery, bc, ona))
    return samples


def serialize_ae51_csv(samples):
    lines = [",".join(AE51_HEADER)]
    for s in samples:
        d = format_timestamp(s.timestamp, sep=" ", suffix="")
        date, time = d.split(" ")
        bc = "" if s.bc_raw is None else _num_str(s.bc_raw)
        ona = "NULL" if s.ona_pts is None else str(s.ona_pts)
        lines.append(",".join([
            date.replace("-", "/"), time,
            str(s.ref_count), str(s.sen_count), repr(float(s.atn)),
            _num_str(s.flow), _num_str(s.pcb_temp), str(s.status),
            _num_str(s.battery), bc, ona,
        ]))
    return "\n".join(lines) + "\n"


def _num_str(x):
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


# ---------------------------------------------------------------------------
# detection event log

_EVENT_RE = re.compile(
    r"^(?P<token>[A-Za-z]+(?:_line\d+)?)\s*:\s*(?P<id>\d+)\s+(?P<stamp>\S+\s+\S+)$"
)


def parse_event_log(text):
    """Parse 'class_lineK : id YYYY-MM-DD HH:MM:SS' lines into events.

    Non-vehicle classes (person, bicycle) are retained; downstream counting
    filters them.  Track ids must be unique within the log.
    """
    events = []
    seen_ids = set()
    for i, raw in enumerate(_decode(text).splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        m = _EVENT_RE.match(line)
        if m is None:
            raise MalformedRow(i, f"unrecognized event line {line!r}")
        token = m.group("token")
        if "_line" in token:
            cls, _, lane_s = token.partition("_line")
            lane = int(lane_s)
            if lane < 1:
                raise MalformedRow(i, f"lane {lane} must be >= 1")
        else:
            cls, lane = token, None
        if cls not in VEHICLE_CLASSES:
            raise UnknownClass(cls)
        track_id = int(m.group("id"))
        if track_id in seen_ids:
            raise MalformedRow(i, f"duplicate track id {track_id}")
        seen_ids.add(track_id)
        try:
            ts = parse_timestamp(m.group("stamp"))
        except ValueError:
            raise MalformedRow(i, f"bad timestamp {m.group('stamp')!r}")
        events.append(DetectionEvent(cls, lane, track_id, ts))
    return events


def serialize_event_log(events):
    lines = []
    for e in events:
        token = e.object_class if e.lane is None else f"{e.object_class}_line{e.lane}"
        lines.append(f"{token} : {e.track_id} {format_timestamp(e.timestamp, sep=' ', suffix='')}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# feature rows (joined dataset)

_LANE_KEY_RE = re.compile(r"^(car|truck)_line(\d+)(_stop)?$")

_SCALAR_KEYS = {
    "Time", "BC", "BC post", "traffic",
    "history_temperature", "history_wind_speed", "history_humidity",
    "forecast_temperature", "forecast_wind_speed", "forecast_humidity",
    "source",
}

_REQUIRED_KEYS = ("Time", "BC", "BC post",
                  "history_temperature", "history_wind_speed", "history_humidity")


def parse_feature_rows(text):
    """Parse the joined dataset (JSON array or newline-delimited objects)."""
    raw = _decode(text).strip()
    if not raw:
        return []
    try:
        data = json.loads(raw)
        objs = data if isinstance(data, list) else [data]
    except json.JSONDecodeError:
        try:
            objs = [json.loads(line) for line in raw.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise MalformedRow(exc.lineno, exc.msg)
    return [_feature_row_from_record(o, i + 1) for i, o in enumerate(objs)]


def _opt_float(obj, key):
    v = obj.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeMismatch(key, f"expected a number, got {v!r}")
    return float(v)


def _feature_row_from_record(obj, rowno):
    if not isinstance(obj, dict):
        raise MalformedRow(rowno, f"expected an object, got {type(obj).__name__}")
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise MissingKey(key, f"row {rowno}")

    lane_counts = {}
    max_lane = 1
    for key, value in obj.items():
        m = _LANE_KEY_RE.match(key)
        if m:
            if isinstance(value, bool) or not isinstance(value, int):
                raise TypeMismatch(key, f"expected an integer count, got {value!r}")
            lane = int(m.group(2))
            if lane < 1:
                raise TypeMismatch(key, "lane index must be >= 1")
            max_lane = max(max_lane, lane)
            lane_counts[(m.group(1), lane, bool(m.group(3)))] = value
        elif key not in _SCALAR_KEYS:
            raise TypeMismatch(key, "unrecognized key")

    def lane_tuple(cls, stop):
        return tuple(lane_counts.get((cls, k, stop), 0) for k in range(1, max_lane + 1))

    ts = _coerce_time(obj["Time"], "Time")
    return FeatureRow(
        timestamp=ts,
        ldpv=lane_tuple("car", False),
        hdv=lane_tuple("truck", False),
        stop_ldpv=lane_tuple("car", True),
        stop_hdv=lane_tuple("truck", True),
        his_temp=_require_float(obj, "history_temperature"),
        his_wind=_require_float(obj, "history_wind_speed"),
        his_humid=_require_float(obj, "history_humidity"),
        traffic=_opt_float(obj, "traffic"),
        bc_raw=_opt_float(obj, "BC"),
        bc_post=_opt_float(obj, "BC post"),
        forecast_temp=_opt_float(obj, "forecast_temperature"),
        forecast_wind=_opt_float(obj, "forecast_wind_speed"),
        forecast_humid=_opt_float(obj, "forecast_humidity"),
        source=str(obj.get("source", "")),
    )


def feature_row_to_record(row):
    """Render one FeatureRow with the on-disk key set, in canonical order."""
    rec = {
        "Time": format_timestamp(row.timestamp, sep=" ", suffix=""),
        "BC": _json_num(row.bc_raw),
        "BC post": _json_num(row.bc_post),
    }
    for k in range(1, row.lane_count + 1):
        rec[f"car_line{k}"] = row.ldpv[k - 1]
    for k in range(1, row.lane_count + 1):
        rec[f"truck_line{k}"] = row.hdv[k - 1]
    for k in range(1, row.lane_count + 1):
        rec[f"car_line{k}_stop"] = row.stop_ldpv[k - 1]
    for k in range(1, row.lane_count + 1):
        rec[f"truck_line{k}_stop"] = row.stop_hdv[k - 1]
    if row.traffic is not None:
        rec["traffic"] = row.traffic
    rec["history_temperature"] = row.his_temp
    rec["history_wind_speed"] = row.his_wind
    rec["history_humidity"] = row.his_humid
    if row.forecast_temp is not None:
        rec["forecast_temperature"] = row.forecast_temp
    if row.forecast_wind is not None:
        rec["forecast_wind_speed"] = row.forecast_wind
    if row.forecast_humid is not None:
        rec["forecast_humidity"] = row.forecast_humid
    if row.source:
        rec["source"] = row.source
    return rec


def serialize_feature_rows(rows):
    return json.dumps([feature_row_to_record(r) for r in rows], indent=1) + "\n"


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    return int(x) if x.is_integer() and abs(x) < 2**53 else x


def _require_float(obj, key):
    v = _opt_float(obj, key)
    if v is None:
        raise MissingKey(key)
    return v


# ---------------------------------------------------------------------------
# weather / traffic feeds

def _records_from_text(text, what):
    """CSV-with-header or JSON (array / NDJSON) into a list of dicts."""
    raw = _decode(text).strip()
    if not raw:
        return []
    if raw[0] in "[{":
        try:
            data = json.loads(raw)
            return data if isinstance(data, list) else [data]
        except json.JSONDecodeError:
            try:
                return [json.loads(ln) for ln in raw.splitlines() if ln.strip()]
            except json.JSONDecodeError as exc:
                raise MalformedRow(exc.lineno, f"bad {what} JSON: {exc.msg}")
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    header = [h.strip() for h in lines[0].split(",")]
    records = []
    for i, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise MalformedRow(i, f"expected {len(header)} columns, got {len(cells)}")
        rec = dict(zip(header, cells))
        records.append(rec)
    return records


def _rec_float(rec, key, rowno):
    if key not in rec or rec[key] in (None, ""):
        raise MissingKey(key, f"row {rowno}")
    try:
        return float(rec[key])
    except (TypeError, ValueError):
        raise TypeMismatch(key, f"row {rowno}: {rec[key]!r}")


def parse_weather(text):
    """Weather feed rows (CSV or JSON), sorted by timestamp."""
    samples = []
    for i, rec in enumerate(_records_from_text(text, "weather"), start=1):
        if "timestamp" not in rec:
            raise MissingKey("timestamp", f"row {i}")
        samples.append(WeatherSample(
            timestamp=_coerce_time(rec["timestamp"]),
            temperature=_rec_float(rec, "temperature", i),
            wind_speed=_rec_float(rec, "wind_speed", i),
            humidity=_rec_float(rec, "humidity", i),
            kind=str(rec.get("kind", "historical") or "historical"),
        ))
    samples.sort(key=lambda s: (s.timestamp, s.kind))
    return samples


def parse_traffic(text):
    """Traffic density feed rows (CSV or JSON), sorted by timestamp."""
    samples = []
    for i, rec in enumerate(_records_from_text(text, "traffic"), start=1):
        if "timestamp" not in rec:
            raise MissingKey("timestamp", f"row {i}")
        samples.append(TrafficDensitySample(
            timestamp=_coerce_time(rec["timestamp"]),
            ratio=_rec_float(rec, "ratio", i),
        ))
    samples.sort(key=lambda s: s.timestamp)
    return samples


def serialize_weather(samples):
    lines = ["timestamp,temperature,wind_speed,humidity,kind"]
    for s in samples:
        lines.append(",".join([
            format_timestamp(s.timestamp),
            _num_str(s.temperature), _num_str(s.wind_speed),
            _num_str(s.humidity), s.kind,
        ]))
    return "\n".join(lines) + "\n"


def serialize_traffic(samples):
    lines = ["timestamp,ratio"]
    for s in samples:
        lines.append(f"{format_timestamp(s.timestamp)},{_num_str(s.ratio)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gridding

def resample_to_grid(samples, step=30.0):
    """Place samples onto a uniform grid anchored at the first sample.

    Each cell [t, t+step) takes the first sample falling inside it; empty
    cells stay missing.  No interpolation: every non-missing output value
    is some input's bc_raw.
    """
    if not samples:
        raise EmptyInput("no samples to resample")
    if step <= 0:
        raise RangeViolation(f"step {step} must be > 0")
    ts = [s.timestamp for s in samples]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise NonMonotoneTime("samples must be sorted with strictly increasing timestamps")

    start = ts[0]
    n = int(math.floor((ts[-1] - start) / step)) + 1
    values = np.full(n, np.nan)
    atn = np.full(n, np.nan)
    ona = np.full(n, np.nan)
    filled = np.zeros(n, dtype=bool)
    for s in samples:
        i = int(math.floor((s.timestamp - start) / step))
        if filled[i]:
            continue
        filled[i] = True
        if s.bc_raw is not None:
            values[i] = s.bc_raw
        atn[i] = s.atn
        if s.ona_pts is not None:
            ona[i] = s.ona_pts
    return BcSeries(start=start, step=float(step), values=values, atn=atn, ona_pts=ona)
