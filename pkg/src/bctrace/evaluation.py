"""Evaluation protocol: target-stratified and time-windowed splits, k-fold
cross-validation, error metrics, and paired model comparison.

The stratified split bins rows by target quantile so both sides see the
full concentration range. The windowed split groups rows into fixed
15-minute blocks per source dataset and sends the earliest blocks to
training, so training always precedes testing in time. Splits hand out
row indices; trimming or any other training-side surgery happens after
splitting and never touches the test side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as scipy_stats

from .errors import BadK, DatasetTooShort, LengthMismatch, TooFewRows, ZeroVariance


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "stratified"        # stratified | windowed | kfold
    train_fraction: float = 0.75
    window_length: float = 900.0    # seconds
    k: int = 5
    strata_bins: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise TooFewRows("train_fraction must lie in (0, 1)")
        if self.window_length <= 0:
            raise TooFewRows("window_length must be > 0")


@dataclass
class EvalReport:
    rmse: float
    mae: float
    r2: float | None
    n: int
    p_value: float | None = None
    comparator: str | None = None

    def as_dict(self):
        return {"rmse": self.rmse, "mae": self.mae, "r2": self.r2, "n": self.n,
                "p_value": self.p_value, "comparator": self.comparator}


def stratified_split(targets, spec: SplitSpec = SplitSpec()):
    """Seeded per-stratum 75/25 assignment over target quantile bins.

    Returns (train_idx, test_idx) as sorted integer arrays forming a
    partition of all rows.
    """
    y = np.asarray(targets, dtype=float)
    n = len(y)
    if n < spec.strata_bins:
        raise TooFewRows(f"{n} rows cannot fill {spec.strata_bins} strata")
    edges = np.quantile(y, np.linspace(0, 1, spec.strata_bins + 1))
    strata = np.clip(np.searchsorted(edges, y, side="right") - 1,
                     0, spec.strata_bins - 1)
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for s in range(spec.strata_bins):
        members = np.flatnonzero(strata == s)
        if len(members) == 0:
            continue
        members = members[rng.permutation(len(members))]
        n_train = int(round(spec.train_fraction * len(members)))
        n_train = min(max(n_train, 0), len(members))
        train.extend(members[:n_train])
        test.extend(members[n_train:])
    return np.sort(np.asarray(train, int)), np.sort(np.asarray(test, int))


def windowed_split(timestamps, sources, spec: SplitSpec = SplitSpec(kind="windowed")):
    """Per-dataset contiguous-window split preserving temporal order.

    Rows are grouped into consecutive ``window_length`` blocks anchored at
    each dataset's first timestamp; whole blocks go to one side, earliest
    first into training until the train fraction is reached, with at least
    one block held out for testing.
    """
    ts = np.asarray(timestamps, dtype=float)
    sources = list(sources)
    if len(ts) != len(sources):
        raise LengthMismatch("timestamps and sources differ in length")
    train, test = [], []
    for label in sorted(set(sources)):
        rows = np.asarray([i for i, s in enumerate(sources) if s == label])
        t = ts[rows]
        t0 = float(t.min())
        window_ids = np.floor((t - t0) / spec.window_length).astype(int)
        windows = sorted(set(window_ids.tolist()))
        if len(windows) < 2:
            raise DatasetTooShort(label)
        total = len(rows)
        taken = 0
        cut = len(windows) - 1
        for wi, w in enumerate(windows):
            if taken >= spec.train_fraction * total:
                cut = wi
                break
            taken += int(np.sum(window_ids == w))
        cut = min(max(cut, 1), len(windows) - 1)
        train_windows = set(windows[:cut])
        for i, w in zip(rows, window_ids):
            (train if w in train_windows else test).append(int(i))
    return np.sort(np.asarray(train, int)), np.sort(np.asarray(test, int))


def split_rows(rows, spec: SplitSpec, target="bc_post"):
    """Split FeatureRow lists by the configured scheme."""
    if spec.kind == "stratified":
        y = [getattr(r, target) for r in rows]
        tr, te = stratified_split(y, spec)
    elif spec.kind == "windowed":
        tr, te = windowed_split([r.timestamp for r in rows],
                                [r.source for r in rows], spec)
    else:
        raise TooFewRows(f"unknown split kind {spec.kind!r}")
    return [rows[i] for i in tr], [rows[i] for i in te], tr, te


def kfold_indices(n, k, seed=0):
    if k < 2 or k > n:
        raise BadK(f"k={k} incompatible with {n} rows")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold) for fold in np.array_split(order, k)]


def kfold_cv(X, y, fit_fn, k=5, seed=0):
    """Per-fold reports plus the pooled mean for a fit(X, y) -> model fn."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    reports = []
    all_pred = np.empty(len(y))
    for val_idx in kfold_indices(len(y), k, seed):
        mask = np.ones(len(y), dtype=bool)
        mask[val_idx] = False
        model = fit_fn(X[mask], y[mask])
        pred = model.predict(X[val_idx])
        all_pred[val_idx] = pred
        reports.append(metrics(pred, y[val_idx]))
    mean = EvalReport(
        rmse=float(np.mean([r.rmse for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        r2=(None if any(r.r2 is None for r in reports)
            else float(np.mean([r.r2 for r in reports]))),
        n=len(y))
    return reports, mean, all_pred


def metrics(pred, truth) -> EvalReport:
    """RMSE, MAE, and the coefficient of determination."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(truth)} truths")
    if len(pred) < 2:
        raise TooFewRows("need at least 2 points")
    err = pred - truth
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = None       # undefined on a constant target, reported as missing
    else:
        r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot
    return EvalReport(rmse=rmse, mae=mae, r2=r2, n=len(pred))


def compare_models(errors_a, errors_b):
    """Two-sided paired t-test on squared errors; returns (t, p)."""
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} errors")
    d = a ** 2 - b ** 2
    n = len(d)
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        if float(np.mean(d)) == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, float(np.mean(d))), 0.0
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    p = 2.0 * float(scipy_stats.t.sf(abs(t), n - 1))
    return t, p
