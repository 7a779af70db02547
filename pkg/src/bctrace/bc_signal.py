"""Ground-truth BC conditioning: adaptive attenuation-gated averaging and
confidence-interval outlier trimming.

The averaging filter partitions the record into consecutive windows that
each accumulate a configured attenuation increment, then replaces every
reading with its window mean. Window sizes shrink when the filter strip
loads quickly (high BC, good signal) and grow when it loads slowly, which
is where instrument noise dominates.

Trimming removes target values outside mean +/- z*sigma, either pooled
over all data (global) or per source dataset (local). It is
partition-agnostic; callers apply it to training data only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DegenerateVariance, MissingAtn, RangeViolation
from .ingest import BcSeries

# customary two-sided critical values; other levels fall back to the
# exact normal quantile
_Z_BY_LEVEL = {0.90: 1.645, 0.95: 1.96, 0.99: 2.576}


@dataclass(frozen=True)
class OnaConfig:
    delta_atn: float = 0.05

    def __post_init__(self):
        if self.delta_atn < 0:
            raise RangeViolation(f"delta_atn {self.delta_atn} must be >= 0")


@dataclass(frozen=True)
class TrimConfig:
    mode: str = "local"       # "global" | "local"
    level: float = 0.95

    def __post_init__(self):
        if self.mode not in ("global", "local"):
            raise RangeViolation(f"mode {self.mode!r} must be 'global' or 'local'")
        if not 0.0 < self.level < 1.0:
            raise RangeViolation(f"level {self.level} must lie in (0, 1)")

    @property
    def z(self):
        return _Z_BY_LEVEL.get(self.level, float(stats.norm.ppf((1 + self.level) / 2)))


def ona_windows(atn, valid, delta_atn):
    """Partition the valid samples into consecutive attenuation windows.

    A window closes at the first sample where the cumulative ATN increase
    since the window's first member reaches ``delta_atn``. A downward ATN
    jump (filter change) also closes the current window. Returns a list of
    index arrays covering exactly the valid samples, in order.
    """
    idx = [i for i in range(len(atn)) if valid[i]]
    windows = []
    current = []
    for i in idx:
        if current and atn[i] < atn[current[-1]]:
            windows.append(current)   # instrument reset: never average across it
            current = []
        current.append(i)
        if atn[i] - atn[current[0]] >= delta_atn:
            windows.append(current)
            current = []
    if current:
        windows.append(current)
    return windows


def ona_filter(series: BcSeries, cfg: OnaConfig = OnaConfig()) -> BcSeries:
    """Adaptive time-averaging of a BC series gated by ATN increments.

    Missing cells stay missing and do not join windows. Each output value
    is the arithmetic mean of its window's inputs; the per-sample window
    size is recorded in ``ona_pts``.
    """
    if series.atn is None:
        raise MissingAtn("series carries no attenuation channel")
    values = series.values
    valid = ~np.isnan(values) & ~np.isnan(series.atn)
    out = np.array(values, dtype=float)
    pts = np.full(len(values), np.nan)
    for window in ona_windows(series.atn, valid, cfg.delta_atn):
        mean = float(np.mean(values[window]))
        out[window] = mean
        pts[window] = len(window)
    return BcSeries(start=series.start, step=series.step, values=out,
                    atn=None if series.atn is None else series.atn.copy(),
                    ona_pts=pts)


@dataclass(frozen=True)
class TrimStats:
    mu: float
    sigma: float

    @property
    def bounds(self):
        return self.mu, self.sigma

    def interval(self, z):
        return self.mu - z * self.sigma, self.mu + z * self.sigma


@dataclass
class TrimResult:
    kept: list
    removed: list                      # (item, source, value, reason)
    stats: dict = field(default_factory=dict)   # source -> TrimStats
    z: float = 1.96


def trim_outliers(items, cfg: TrimConfig = TrimConfig(), *, value_of=None,
                  source_of=None, stats_by_source=None) -> TrimResult:
    """Drop items whose target value falls outside mu +/- z*sigma.

    ``value_of`` extracts the target (defaults to ``bc_post`` falling back
    to ``bc_raw`` for feature rows, or the item itself for plain numbers).
    Under ``global`` mode one (mu, sigma) is pooled over everything; under
    ``local`` each source label gets its own. Precomputed ``stats_by_source``
    makes the operation idempotent at fixed bounds.
    """
    if value_of is None:
        value_of = _default_value
    if source_of is None:
        source_of = _default_source

    items = list(items)
    per_source = {}
    for it in items:
        per_source.setdefault(_key(cfg, source_of(it)), []).append(float(value_of(it)))

    z = cfg.z
    if stats_by_source is None:
        stats_by_source = {}
        for src, vals in per_source.items():
            arr = np.asarray(vals, dtype=float)
            stats_by_source[src] = TrimStats(float(arr.mean()), float(arr.std(ddof=0)))

    for src, vals in per_source.items():
        st = stats_by_source[src]
        if st.sigma == 0.0 and any(v != st.mu for v in vals):
            raise DegenerateVariance(
                f"source {src!r}: sigma is 0 but values differ from the mean")

    kept, removed = [], []
    for it in items:
        src = _key(cfg, source_of(it))
        st = stats_by_source[src]
        v = float(value_of(it))
        if abs(v - st.mu) > z * st.sigma:
            lo, hi = st.interval(z)
            side = "below" if v < st.mu else "above"
            removed.append((it, src, v, f"{v:g} {side} [{lo:g}, {hi:g}]"))
        else:
            kept.append(it)
    return TrimResult(kept=kept, removed=removed, stats=stats_by_source, z=z)


def _key(cfg, source):
    return "" if cfg.mode == "global" else source


def _default_value(item):
    if hasattr(item, "bc_post") and item.bc_post is not None:
        return item.bc_post
    if hasattr(item, "bc_raw") and item.bc_raw is not None:
        return item.bc_raw
    return item


def _default_source(item):
    return getattr(item, "source", "")
