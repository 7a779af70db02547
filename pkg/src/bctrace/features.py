"""Feature-table assembly and correlation pruning.

Each 30-second bin becomes one row: per-lane vehicle counts, weather
joined at a two-minute lookback, the traffic density ratio, and the
aligned BC targets. Highly correlated feature pairs are pruned down to
the member more correlated with the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoWeatherCoverage, TooFewRows
from .ingest import BcSeries, FeatureRow

WEATHER_LOOKBACK = 120.0       # seconds before the bin start
WEATHER_MAX_GAP = 600.0        # how far a nearest sample may be
TRAFFIC_MAX_GAP = 300.0


@dataclass
class CorrelationReport:
    feature_names: list[str]
    matrix: np.ndarray                       # pearson r, unit diagonal
    dropped: list = field(default_factory=list)   # (feature, kept_partner, r)
    constant: list = field(default_factory=list)  # features with zero variance


def _nearest(samples, target, max_gap, key=lambda s: s.timestamp):
    best = None
    best_d = math.inf
    for s in samples:
        d = abs(key(s) - target)
        if d < best_d:
            best, best_d = s, d
    return best if best is not None and best_d <= max_gap else None


def build_feature_table(counts, weather, traffic, bc_post: BcSeries,
                        bc_raw: BcSeries | None = None, source: str = "",
                        bin_seconds: float = 30.0) -> tuple[list[FeatureRow], list]:
    """Join per-bin counts, weather, traffic, and BC targets into rows.

    Historical weather is matched to the sample nearest (bin_start - 120 s);
    a bin with no sample within 10 minutes of that point is an error, never
    a silent fill. Traffic joins at the nearest sample within 5 minutes and
    stays optional. The BC target is the series cell at the bin midpoint
    (for a native 30 s record that is the bin's own cell); bins without a
    BC value are dropped and reported.
    """
    historical = [w for w in weather if w.kind == "historical"]
    forecast = [w for w in weather if w.kind == "forecast"]
    rows, dropped = [], []
    for b in counts:
        w = _nearest(historical, b.bin_start - WEATHER_LOOKBACK, WEATHER_MAX_GAP)
        if w is None:
            raise NoWeatherCoverage(b.bin_start)
        f = _nearest(forecast, b.bin_start - WEATHER_LOOKBACK, WEATHER_MAX_GAP)
        t = _nearest(traffic or [], b.bin_start, TRAFFIC_MAX_GAP)

        mid = b.bin_start + bin_seconds / 2.0
        post = _series_value(bc_post, mid)
        raw = _series_value(bc_raw, mid) if bc_raw is not None else None
        if post is None:
            dropped.append((b.bin_start, "no BC coverage"))
            continue
        rows.append(FeatureRow(
            timestamp=b.bin_start,
            ldpv=b.ldpv, hdv=b.hdv, stop_ldpv=b.stop_ldpv, stop_hdv=b.stop_hdv,
            his_temp=w.temperature, his_wind=w.wind_speed, his_humid=w.humidity,
            traffic=None if t is None else t.ratio,
            bc_raw=raw, bc_post=post,
            forecast_temp=None if f is None else f.temperature,
            forecast_wind=None if f is None else f.wind_speed,
            forecast_humid=None if f is None else f.humidity,
            source=source,
        ))
    return rows, dropped


def _series_value(series, t):
    i = series.cell(t)
    if i is None:
        return None
    v = series.values[i]
    return None if np.isnan(v) else float(v)


# ---------------------------------------------------------------------------
# flat feature matrix

def feature_names(lane_count, with_traffic=True):
    """Canonical model feature columns, in on-disk key style."""
    names = ["total_vehicle"]
    names += [f"car_line{k}" for k in range(1, lane_count + 1)]
    names += [f"truck_line{k}" for k in range(1, lane_count + 1)]
    names += [f"car_line{k}_stop" for k in range(1, lane_count + 1)]
    names += [f"truck_line{k}_stop" for k in range(1, lane_count + 1)]
    names += ["history_temperature", "history_wind_speed", "history_humidity"]
    if with_traffic:
        names.append("traffic")
    return names


def row_value(row: FeatureRow, name: str):
    if name == "total_vehicle":
        return float(row.total_vehicle)
    if name == "history_temperature":
        return row.his_temp
    if name == "history_wind_speed":
        return row.his_wind
    if name == "history_humidity":
        return row.his_humid
    if name == "traffic":
        return math.nan if row.traffic is None else row.traffic
    cls, _, rest = name.partition("_line")
    lane_s, _, stop = rest.partition("_")
    k = int(lane_s) - 1
    if cls == "car":
        t = row.stop_ldpv if stop else row.ldpv
    else:
        t = row.stop_hdv if stop else row.hdv
    return float(t[k]) if k < len(t) else 0.0


def to_matrix(rows, names=None, target="bc_post"):
    """(X, y, names) arrays for model fitting; NaN marks missing cells."""
    if not rows:
        raise TooFewRows("empty feature table")
    if names is None:
        lanes = max(r.lane_count for r in rows)
        with_traffic = any(r.traffic is not None for r in rows)
        names = feature_names(lanes, with_traffic)
    X = np.array([[row_value(r, n) for n in names] for r in rows], dtype=float)
    y = np.array([math.nan if getattr(r, target) is None else getattr(r, target)
                  for r in rows], dtype=float)
    return X, y, list(names)


# ---------------------------------------------------------------------------
# correlation analysis

def _pearson_matrix(X):
    n, p = X.shape
    centered = X - X.mean(axis=0)
    sd = centered.std(axis=0)
    constant = sd == 0.0
    safe = np.where(constant, 1.0, sd)
    z = centered / safe
    r = (z.T @ z) / n
    r[constant, :] = 0.0
    r[:, constant] = 0.0
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0), constant


def correlation_matrix(rows, names=None, target="bc_post") -> CorrelationReport:
    """Pearson correlation over all feature pairs.

    Constant features get r = 0 against everything by convention and are
    listed in the report.
    """
    X, _, names = to_matrix(rows, names, target)
    if len(rows) < 3:
        raise TooFewRows(f"need at least 3 rows, got {len(rows)}")
    r, constant = _pearson_matrix(np.nan_to_num(X, nan=0.0))
    return CorrelationReport(
        feature_names=names, matrix=r,
        constant=[n for n, c in zip(names, constant) if c])


def filter_correlated(rows, threshold=0.70, target="bc_post", names=None):
    """Drop one member of every feature pair with |r| above the threshold.

    The member with the weaker |r| against the target goes; ties break
    toward keeping the lexicographically smaller name. Repeats until no
    pair exceeds the threshold. Targets and timestamps are never features,
    so they are never dropped.
    """
    X, y, names = to_matrix(rows, names, target)
    X = np.nan_to_num(X, nan=0.0)
    y_filled = np.nan_to_num(y, nan=float(np.nanmean(y)) if np.isnan(y).any() else 0.0)

    keep = list(range(len(names)))
    dropped = []
    target_r = _target_correlations(X, y_filled)

    while True:
        sub = X[:, keep]
        r, _ = _pearson_matrix(sub)
        worst = None
        for a in range(len(keep)):
            for b in range(a + 1, len(keep)):
                if abs(r[a, b]) > threshold:
                    if worst is None or abs(r[a, b]) > abs(worst[2]):
                        worst = (a, b, r[a, b])
        if worst is None:
            break
        a, b, rv = worst
        ia, ib = keep[a], keep[b]
        ra, rb = abs(target_r[ia]), abs(target_r[ib])
        if ra < rb or (ra == rb and names[ia] > names[ib]):
            drop, kept = ia, ib
        else:
            drop, kept = ib, ia
        dropped.append((names[drop], names[kept], float(rv)))
        keep.remove(drop)

    kept_names = [names[i] for i in keep]
    r, constant = _pearson_matrix(X[:, keep])
    report = CorrelationReport(
        feature_names=kept_names, matrix=r, dropped=dropped,
        constant=[kept_names[i] for i, c in enumerate(constant) if c])
    return kept_names, report


def _target_correlations(X, y):
    n, p = X.shape
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sx = xc.std(axis=0)
    sy = yc.std()
    out = np.zeros(p)
    ok = (sx > 0) & (sy > 0)
    out[ok] = (xc[:, ok].T @ yc) / (n * sx[ok] * sy)
    return out
