"""Stage wiring: session documents, per-stage transforms, and the full run.

A session document carries the parsed inputs and the BC series through the
conditioning stages. Every stage is a pure function from documents to
documents; the runner stamps each artifact with the configuration hash and
seed, writes through a ``.partial`` temp name, and renames on completion,
so an interrupted run leaves its unfinished artifacts clearly marked.

Outlier trimming is configured at preprocess time but applied only to the
training partition inside evaluation; the preprocess stage emits an audit
of what the configured trim would remove so the setting can be inspected
before any model sees the data.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import bc_signal, evaluation, explain as explain_mod, features as features_mod
from . import ingest, model as model_mod, synth as synth_mod, vision as vision_mod
from .charts import line_chart
from .errors import BctraceError, EmptyInput, InputError, MissingKey, TypeMismatch

SESSION_FORMAT = "bctrace-session"
COUNTS_FORMAT = "bctrace-counts"
REPORT_FORMAT = "bctrace-report"
SHAP_FORMAT = "bctrace-shap"


# ---------------------------------------------------------------------------
# document plumbing

def _series_to_obj(series):
    if series is None:
        return None

    def arr(a):
        return None if a is None else [None if np.isnan(v) else float(v) for v in a]

    return {"start": series.start, "step": series.step,
            "values": arr(series.values), "atn": arr(series.atn),
            "ona_pts": arr(series.ona_pts)}


def _series_from_obj(obj):
    if obj is None:
        return None

    def arr(a):
        return None if a is None else np.array(
            [np.nan if v is None else float(v) for v in a])

    return ingest.BcSeries(start=float(obj["start"]), step=float(obj["step"]),
                           values=arr(obj["values"]), atn=arr(obj.get("atn")),
                           ona_pts=arr(obj.get("ona_pts")))


def _event_to_obj(e):
    return {"class": e.object_class, "lane": e.lane, "track_id": e.track_id,
            "timestamp": ingest.format_timestamp(e.timestamp)}


def _event_from_obj(o):
    return ingest.DetectionEvent(o["class"], o.get("lane"), int(o["track_id"]),
                                 ingest.parse_timestamp(o["timestamp"]))


def session_to_obj(session):
    return {
        "format": SESSION_FORMAT, "version": 1,
        "source": session.get("source", ""),
        "bc_raw": _series_to_obj(session.get("bc_raw")),
        "bc_post": _series_to_obj(session.get("bc_post")),
        "shift": session.get("shift"),
        "trim": session.get("trim"),
        "events": [_event_to_obj(e) for e in session.get("events", [])],
        "weather": [
            {"timestamp": ingest.format_timestamp(w.timestamp),
             "temperature": w.temperature, "wind_speed": w.wind_speed,
             "humidity": w.humidity, "kind": w.kind}
            for w in session.get("weather", [])
        ],
        "traffic": [
            {"timestamp": ingest.format_timestamp(t.timestamp), "ratio": t.ratio}
            for t in session.get("traffic", [])
        ],
    }


def session_from_obj(obj):
    if obj.get("format") != SESSION_FORMAT:
        raise TypeMismatch("format", "not a session document")
    return {
        "source": obj.get("source", ""),
        "bc_raw": _series_from_obj(obj.get("bc_raw")),
        "bc_post": _series_from_obj(obj.get("bc_post")),
        "shift": obj.get("shift"),
        "trim": obj.get("trim"),
        "events": [_event_from_obj(o) for o in obj.get("events", [])],
        "weather": [
            ingest.WeatherSample(ingest.parse_timestamp(w["timestamp"]),
                                 float(w["temperature"]), float(w["wind_speed"]),
                                 float(w["humidity"]), w.get("kind", "historical"))
            for w in obj.get("weather", [])
        ],
        "traffic": [
            ingest.TrafficDensitySample(ingest.parse_timestamp(t["timestamp"]),
                                        float(t["ratio"]))
            for t in obj.get("traffic", [])
        ],
    }


def dump_json(obj, stamp=None):
    if stamp:
        obj = dict(obj)
        obj.setdefault("config_hash", stamp[0])
        obj.setdefault("seed", stamp[1])
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"input file not found: {path}")
    except json.JSONDecodeError as exc:
        raise TypeMismatch(str(path), f"bad JSON: {exc.msg}")


def read_input(path):
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise InputError(f"input file not found: {path}")


def write_artifact(path, data):
    """Write through a .partial name; the final name appears only on completion."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    if isinstance(data, str):
        data = data.encode()
    partial.write_bytes(data)
    os.replace(partial, path)
    return path


def config_hash(obj):
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stages

def stage_ingest(ae51=None, events=None, weather=None, traffic=None,
                 source="", grid_step=30.0):
    session = {"source": source, "bc_raw": None, "bc_post": None,
               "shift": None, "trim": None, "events": [], "weather": [],
               "traffic": []}
    if ae51 is not None:
        samples = ingest.parse_ae51_csv(read_input(ae51))
        if not samples:
            raise EmptyInput(f"no readings in {ae51}")
        session["bc_raw"] = ingest.resample_to_grid(samples, step=grid_step)
    if events is not None:
        session["events"] = ingest.parse_event_log(read_input(events))
    if weather is not None:
        session["weather"] = ingest.parse_weather(read_input(weather))
    if traffic is not None:
        session["traffic"] = ingest.parse_traffic(read_input(traffic))
    return session


def stage_preprocess(session, ona_delta=0.05, trim_mode="local", trim_level=0.95):
    """ONA-filter the BC series and record the trim setting plus an audit."""
    if session.get("bc_raw") is None:
        raise EmptyInput("session carries no BC series")
    cfg = bc_signal.OnaConfig(delta_atn=ona_delta)
    session["bc_post"] = bc_signal.ona_filter(session["bc_raw"], cfg)
    audit_rows = []
    if trim_mode and trim_mode != "none":
        session["trim"] = {"mode": trim_mode, "level": trim_level}
        post = session["bc_post"]
        values = [float(v) for v in post.values[~np.isnan(post.values)]]
        result = bc_signal.trim_outliers(
            values, bc_signal.TrimConfig(mode=trim_mode, level=trim_level),
            source_of=lambda _: session.get("source", ""))
        audit_rows = [(session.get("source", ""), v, reason)
                      for (_, _, v, reason) in result.removed]
    else:
        session["trim"] = None
    return session, audit_rows


def activity_series(session, bin_seconds=30.0):
    """TotalVehicle per bin across the BC record's span."""
    bc = session["bc_raw"] if session.get("bc_raw") is not None else session["bc_post"]
    t0 = math.floor(bc.start / bin_seconds) * bin_seconds
    n_bins = int(math.ceil((bc.end - t0) / bin_seconds))
    bins = vision_mod.bin_counts(session["events"], bin_seconds=bin_seconds,
                                 t0=t0, n_bins=n_bins)
    totals = np.array([b.total_vehicle for b in bins], dtype=float)
    return ingest.BcSeries(start=t0, step=bin_seconds, values=totals)


def stage_align(session, max_shift=600, resample_step=1.0, bin_seconds=30.0):
    """Estimate the BC lag against vehicle activity and advance the series."""
    if session.get("bc_raw") is None:
        raise EmptyInput("session carries no BC series")
    if not session.get("events"):
        raise EmptyInput("session carries no events to align against")
    cfg = align_mod.ShiftSearchConfig(max_shift=max_shift,
                                      resample_step=resample_step)
    result = align_mod.find_optimal_shift(session["bc_raw"],
                                          activity_series(session, bin_seconds),
                                          cfg)
    session["shift"] = result.optimal_shift
    session["bc_raw"] = align_mod.apply_shift(session["bc_raw"], result.optimal_shift)
    if session.get("bc_post") is not None:
        session["bc_post"] = align_mod.apply_shift(session["bc_post"],
                                                   result.optimal_shift)
    return session, result


def detect_geometry(frame_paths, rho_res=1.0, theta_res=math.pi / 360.0,
                    canny_low=30.0, canny_high=90.0,
                    select_cfg=None):
    """Lane geometry from grayscale frames: edges, lines, cluster, order."""
    if not frame_paths:
        raise EmptyInput("no frames to detect lanes from")
    img = vision_mod.read_pgm(Path(frame_paths[0]))
    edges = vision_mod.canny(img, canny_low, canny_high)
    threshold = max(40, int(img.width * 0.25))
    lines = vision_mod.hough_lines(edges, rho_res=rho_res, theta_res=theta_res,
                                   vote_threshold=threshold)
    cfg = select_cfg or vision_mod.LaneSelectConfig(image_width=img.width,
                                                    image_height=img.height)
    return vision_mod.select_lane_lines(lines, cfg)


def stage_vision(detections=None, events=None, frames=None, geometry=None,
                 bin_seconds=30.0, t0=None, n_bins=None,
                 tracker=None, speed_eps=5.0, min_stop=4.0):
    """Turn detections (tracked) or a first-seen event log into bin counts."""
    geom = None
    if geometry is not None:
        geom = vision_mod.geometry_from_obj(geometry) if isinstance(geometry, dict) \
            else geometry
    elif frames:
        geom = detect_geometry(frames)

    if detections is not None:
        if geom is None:
            raise EmptyInput("tracked detections need lane geometry")
        tracker = tracker or vision_mod.TrackerConfig(
            max_distance=synth_mod.TRACKER_GATE, max_age=synth_mod.TRACKER_MAX_AGE)
        state = vision_mod.TrackerState()
        for ts, dets in detections:
            vision_mod.update_tracks(dets, state, ts, tracker, geometry=geom)
        tracks = state.all_tracks()
        for track in tracks:
            vision_mod.classify_stop(track, speed_eps=speed_eps,
                                     min_duration=min_stop)
        items = tracks
        lane_count = geom.lane_count
    elif events is not None:
        items = events
        lane_count = geom.lane_count if geom is not None else None
    else:
        raise EmptyInput("need detections or an event log")

    bins = vision_mod.bin_counts(items, lane_count=lane_count,
                                 bin_seconds=bin_seconds, t0=t0, n_bins=n_bins)
    return bins, geom


def counts_to_obj(bins, bin_seconds=30.0):
    lane_count = len(bins[0].ldpv) if bins else 0
    return {
        "format": COUNTS_FORMAT, "version": 1,
        "bin_seconds": bin_seconds, "lane_count": lane_count,
        "bins": [
            {"bin_start": ingest.format_timestamp(b.bin_start),
             "ldpv": list(b.ldpv), "hdv": list(b.hdv),
             "stop_ldpv": list(b.stop_ldpv), "stop_hdv": list(b.stop_hdv),
             "unknown": b.unknown}
            for b in bins
        ],
    }


def counts_from_obj(obj):
    if obj.get("format") != COUNTS_FORMAT:
        raise TypeMismatch("format", "not a counts document")
    bins = [
        vision_mod.BinCounts(
            bin_start=ingest.parse_timestamp(b["bin_start"]),
            ldpv=tuple(b["ldpv"]), hdv=tuple(b["hdv"]),
            stop_ldpv=tuple(b["stop_ldpv"]), stop_hdv=tuple(b["stop_hdv"]),
            unknown=int(b.get("unknown", 0)))
        for b in obj["bins"]
    ]
    return bins, float(obj.get("bin_seconds", 30.0))


def stage_features(counts, session, prune_threshold=0.70, target="bc_post",
                   bin_seconds=30.0):
    """Join counts with the session feeds and prune correlated features."""
    rows, dropped_bins = features_mod.build_feature_table(
        counts, session.get("weather", []), session.get("traffic", []),
        bc_post=session["bc_post"], bc_raw=session.get("bc_raw"),
        source=session.get("source", ""), bin_seconds=bin_seconds)
    if not rows:
        raise EmptyInput("no feature rows survived the join")
    kept, report = features_mod.filter_correlated(rows, threshold=prune_threshold,
                                                  target=target)
    return rows, kept, report, dropped_bins


def corr_csv(report, stamp=None):
    lines = []
    if stamp:
        lines.append(f"# config={stamp[0]} seed={stamp[1]}")
    lines.append("feature," + ",".join(report.feature_names))
    for name, row in zip(report.feature_names, report.matrix):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    lines.append("")
    lines.append("dropped,kept_partner,r")
    for d, kept, r in report.dropped:
        lines.append(f"{d},{kept},{r:.6f}")
    return "\n".join(lines) + "\n"


def features_doc(kept, report, dropped_bins):
    return {
        "format": "bctrace-features", "version": 1,
        "selected": kept,
        "dropped": [{"feature": d, "kept_partner": k, "r": r}
                    for d, k, r in report.dropped],
        "constant": report.constant,
        "bins_without_target": [
            {"bin_start": ingest.format_timestamp(t), "reason": reason}
            for t, reason in dropped_bins
        ],
    }


def _fit_for_params(kind, X, y, params, names, seed):
    if kind in ("gbt", "gb"):
        hp = model_mod.GbtHyperParams(
            n_estimators=params.get("n_estimators", 50),
            learning_rate=params.get("learning_rate", 0.05),
            max_depth=params.get("max_depth", 5),
            lam=params.get("lam", 1.0 if kind == "gbt" else 0.0),
            min_split_gain=params.get("min_split_gain", 0.0),
            min_samples_split=params.get("min_samples_split", 2))
        return model_mod.fit_gbt(X, y, hp, feature_names=names, seed=seed)
    if kind == "rf":
        return model_mod.fit_forest(
            X, y, n_trees=params.get("n_estimators", 100),
            max_depth=params.get("max_depth"),
            min_samples_split=params.get("min_samples_split", 2),
            seed=seed, feature_names=names)
    if kind == "linear":
        return model_mod.fit_linear(X, y, feature_names=names)
    raise TypeMismatch("model", f"unknown kind {kind!r}")


def stage_train(rows, kind="gbt", params=None, feature_list=None,
                target="bc_post", seed=0):
    X, y, names = features_mod.to_matrix(rows, feature_list, target)
    ok = ~np.isnan(y)
    return _fit_for_params(kind, X[ok], y[ok], params or {}, names, seed)


def stage_evaluate(rows, split_spec, kind="gbt", params=None, feature_list=None,
                   target="bc_post", trim=None, seed=0, with_cv=True):
    """Split, trim the training side only, fit, and report both sides."""
    train_rows, test_rows, tr_idx, te_idx = evaluation.split_rows(
        rows, split_spec, target)

    removed = []
    if trim:
        cfg = bc_signal.TrimConfig(mode=trim.get("mode", "local"),
                                   level=trim.get("level", 0.95))
        result = bc_signal.trim_outliers(
            train_rows, cfg, value_of=lambda r: getattr(r, target))
        train_rows = result.kept
        removed = [(r.timestamp, v, reason) for (r, _, v, reason) in result.removed]

    Xtr, ytr, names = features_mod.to_matrix(train_rows, feature_list, target)
    Xte, yte, _ = features_mod.to_matrix(test_rows, feature_list, target)
    model = _fit_for_params(kind, Xtr, ytr, params or {}, names, seed)
    baseline = model_mod.fit_linear(Xtr, ytr, feature_names=names)

    pred_tr = model.predict(Xtr)
    pred_te = model.predict(Xte)
    train_report = evaluation.metrics(pred_tr, ytr)
    test_report = evaluation.metrics(pred_te, yte)
    base_te = baseline.predict(Xte)
    baseline_report = evaluation.metrics(base_te, yte)
    t_stat, p_value = evaluation.compare_models(pred_te - yte, base_te - yte)

    cv = None
    if with_cv and split_spec.k >= 2 and len(ytr) >= split_spec.k:
        fold_reports, cv_mean, _ = evaluation.kfold_cv(
            Xtr, ytr,
            lambda X, y: _fit_for_params(kind, X, y, params or {}, names, seed),
            k=split_spec.k, seed=seed)
        cv = {"k": split_spec.k,
              "folds": [r.as_dict() for r in fold_reports],
              "mean": cv_mean.as_dict()}

    report = {
        "format": REPORT_FORMAT, "version": 1,
        "model": {"kind": kind, "params": params or {}},
        "features": names,
        "target": target,
        "split": {"kind": split_spec.kind,
                  "train_fraction": split_spec.train_fraction,
                  "window_length": split_spec.window_length,
                  "strata_bins": split_spec.strata_bins,
                  "seed": split_spec.seed},
        "split_manifest": {"train_rows": [int(i) for i in tr_idx],
                           "test_rows": [int(i) for i in te_idx]},
        "trim": trim, "trim_removed": [
            {"timestamp": ingest.format_timestamp(t), "value": v, "reason": reason}
            for t, v, reason in removed
        ],
        "train": train_report.as_dict(),
        "test": test_report.as_dict(),
        "baseline_test": baseline_report.as_dict(),
        "p_value_vs_linear": p_value,
        "t_stat_vs_linear": t_stat,
        "cv": cv,
        "predictions": [
            {"timestamp": ingest.format_timestamp(r.timestamp),
             "observed": float(y), "predicted": float(p)}
            for r, y, p in zip(test_rows, yte, pred_te)
        ],
    }
    return report, model


def stage_explain(model, rows, feature_list, target="bc_post", row_limit=10,
                  background_limit=40, seed=0):
    X, y, names = features_mod.to_matrix(rows, feature_list, target)
    rng = np.random.default_rng(seed)
    bg_idx = rng.permutation(len(X))[: min(background_limit, len(X))]
    background = X[np.sort(bg_idx)]
    explain_idx = list(range(min(row_limit, len(X))))
    reports = explain_mod.explain_rows(model, X[explain_idx], background,
                                       feature_names=names,
                                       row_ids=explain_idx)
    ranking = explain_mod.global_importance(reports)
    doc = {
        "format": SHAP_FORMAT, "version": 1,
        "features": names,
        "background_rows": [int(i) for i in np.sort(bg_idx)],
        "ranking": [{"feature": f, "mean_abs_contribution": v}
                    for f, v in ranking],
        "rows": [
            {"row_id": r.row_id, "base_value": r.base_value,
             "contributions": r.per_feature,
             "prediction": r.total}
            for r in reports
        ],
    }
    return doc, reports, ranking


def shap_csv(reports, rows, names, stamp=None):
    """Beeswarm-style export: one line per (row, feature)."""
    lines = []
    if stamp:
        lines.append(f"# config={stamp[0]} seed={stamp[1]}")
    lines.append("row_id,feature,value,contribution")
    for r in reports:
        row = rows[r.row_id]
        for name in r.per_feature:
            value = features_mod.row_value(row, name)
            lines.append(f"{r.row_id},{name},{value},{r.per_feature[name]}")
    return "\n".join(lines) + "\n"


def report_tables(report, stamp=None):
    """metrics.csv plus the prediction overlay SVG."""
    lines = []
    if stamp:
        lines.append(f"# config={stamp[0]} seed={stamp[1]}")
    lines.append("section,rmse,mae,r2,n,p_value")
    for section in ("train", "test", "baseline_test"):
        m = report[section]
        r2 = "" if m["r2"] is None else f"{m['r2']:.6f}"
        p = ""
        if section == "test" and report.get("p_value_vs_linear") is not None:
            p = f"{report['p_value_vs_linear']:.6g}"
        lines.append(f"{section},{m['rmse']:.6f},{m['mae']:.6f},{r2},{m['n']},{p}")
    if report.get("cv"):
        m = report["cv"]["mean"]
        r2 = "" if m["r2"] is None else f"{m['r2']:.6f}"
        lines.append(f"cv_mean,{m['rmse']:.6f},{m['mae']:.6f},{r2},{m['n']},")
    csv_text = "\n".join(lines) + "\n"

    preds = report.get("predictions", [])
    ts = [ingest.parse_timestamp(p["timestamp"]) for p in preds]
    t0 = min(ts) if ts else 0.0
    xs = [(t - t0) / 60.0 for t in ts]
    svg = line_chart(
        [("observed", xs, [p["observed"] for p in preds]),
         ("predicted", xs, [p["predicted"] for p in preds])],
        title="Estimated vs observed BC on the test split",
        x_label="minutes into session", y_label="BC (ng/m3)")
    return csv_text, svg


# ---------------------------------------------------------------------------
# full run

DEFAULT_PIPELINE = {
    "seed": 7,
    "source": "synthetic",
    "scenario": None,              # ScenarioConfig fields; None = use inputs
    "inputs": {},                  # ae51/events/weather/traffic/detections/geometry
    "grid_step": None,             # BC grid step; None = native sample spacing
    "ona_delta": 0.05,
    "trim": {"mode": "local", "level": 0.95},
    "align": {"max_shift": 600, "resample_step": 1},
    "bin_seconds": 30,
    "prune_threshold": 0.70,
    "target": "bc_post",
    "split": {"kind": "stratified", "train_fraction": 0.75,
              "window_length": 900, "k": 5, "strata_bins": 10},
    "model": {"kind": "gbt", "params": {"n_estimators": 50,
                                        "learning_rate": 0.05, "max_depth": 5}},
    "explain": {"rows": 10, "background": 40},
}


def merge_config(overrides):
    cfg = json.loads(json.dumps(DEFAULT_PIPELINE))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


class StageFailure(BctraceError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)


def run_pipeline(config, out_dir):
    """Execute every stage and return the report document."""
    cfg = merge_config(config)
    seed = int(cfg["seed"])
    stamp = (config_hash(cfg), seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_stage(name, fn):
        try:
            return fn()
        except BctraceError as exc:
            raise StageFailure(name, exc)

    write_artifact(out / "run.json", dump_json(dict(cfg), stamp))

    scenario_inputs = dict(cfg.get("inputs") or {})
    if cfg.get("scenario") is not None:
        def simulate():
            sc_fields = dict(cfg["scenario"])
            sc_fields.setdefault("seed", seed)
            sc = synth_mod.scenario_config_from_obj(sc_fields)
            session_dir = out / "scenario"
            paths = synth_mod.write_scenario(synth_mod.generate_scenario(sc),
                                             session_dir)
            return {k.split(".")[0]: str(v) for k, v in paths.items()}
        produced = run_stage("simulate", simulate)
        for key in ("ae51", "events", "weather", "traffic", "detections",
                    "geometry"):
            if key in produced:
                scenario_inputs.setdefault(key, produced[key])

    def do_ingest():
        step = cfg.get("grid_step")
        if step is None:
            samples = ingest.parse_ae51_csv(read_input(scenario_inputs["ae51"]))
            if len(samples) < 2:
                raise EmptyInput("need at least two BC readings")
            step = samples[1].timestamp - samples[0].timestamp
        return stage_ingest(
            ae51=scenario_inputs.get("ae51"),
            events=scenario_inputs.get("events"),
            weather=scenario_inputs.get("weather"),
            traffic=scenario_inputs.get("traffic"),
            source=cfg.get("source", ""), grid_step=step)

    session = run_stage("ingest", do_ingest)
    write_artifact(out / "session.json", dump_json(session_to_obj(session), stamp))

    def do_preprocess():
        trim = cfg.get("trim") or {}
        return stage_preprocess(session, ona_delta=cfg["ona_delta"],
                                trim_mode=trim.get("mode", "none"),
                                trim_level=trim.get("level", 0.95))
    session2, audit = run_stage("preprocess", do_preprocess)
    write_artifact(out / "session.pre.json",
                   dump_json(session_to_obj(session2), stamp))
    audit_lines = ["source,value,reason"] + \
        [f"{s},{v},{reason}" for s, v, reason in audit]
    write_artifact(out / "trim_audit.csv", "\n".join(audit_lines) + "\n")

    def do_align():
        a = cfg["align"]
        return stage_align(session2, max_shift=int(a["max_shift"]),
                           resample_step=float(a["resample_step"]),
                           bin_seconds=float(cfg["bin_seconds"]))
    session3, shift_result = run_stage("align", do_align)
    write_artifact(out / "session.aligned.json",
                   dump_json(session_to_obj(session3), stamp))
    curve_lines = [f"# config={stamp[0]} seed={stamp[1]}", "lag_seconds,cosine_similarity"]
    curve_lines += [f"{int(l)},{s:.9f}" for l, s in
                    zip(shift_result.lags, shift_result.similarities)]
    write_artifact(out / "curve.csv", "\n".join(curve_lines) + "\n")

    def do_vision():
        bc = session3["bc_raw"]
        t0 = math.floor(bc.start / cfg["bin_seconds"]) * cfg["bin_seconds"]
        n_bins = int(math.ceil((bc.end - t0) / cfg["bin_seconds"]))
        detections = None
        geometry = None
        if scenario_inputs.get("detections"):
            detections = vision_mod.parse_detections(
                read_input(scenario_inputs["detections"]))
        if scenario_inputs.get("geometry"):
            geometry = vision_mod.geometry_from_obj(
                load_json(scenario_inputs["geometry"]))
        frames = None
        if scenario_inputs.get("frames"):
            frames = sorted(Path(scenario_inputs["frames"]).glob("*.pgm"))
        return stage_vision(detections=detections, events=session3["events"],
                            frames=frames, geometry=geometry,
                            bin_seconds=float(cfg["bin_seconds"]),
                            t0=t0, n_bins=n_bins)
    bins, geom = run_stage("vision", do_vision)
    write_artifact(out / "counts.json",
                   dump_json(counts_to_obj(bins, float(cfg["bin_seconds"])), stamp))

    def do_features():
        return stage_features(bins, session3,
                              prune_threshold=float(cfg["prune_threshold"]),
                              target=cfg["target"],
                              bin_seconds=float(cfg["bin_seconds"]))
    rows, kept, corr_report, dropped_bins = run_stage("features", do_features)
    write_artifact(out / "table.json", ingest.serialize_feature_rows(rows))
    write_artifact(out / "features.json",
                   dump_json(features_doc(kept, corr_report, dropped_bins), stamp))
    write_artifact(out / "corr.csv", corr_csv(corr_report, stamp))

    split_spec = evaluation.SplitSpec(
        kind=cfg["split"].get("kind", "stratified"),
        train_fraction=float(cfg["split"].get("train_fraction", 0.75)),
        window_length=float(cfg["split"].get("window_length", 900)),
        k=int(cfg["split"].get("k", 5)),
        strata_bins=int(cfg["split"].get("strata_bins", 10)),
        seed=seed)

    def do_evaluate():
        return stage_evaluate(rows, split_spec, kind=cfg["model"]["kind"],
                              params=cfg["model"].get("params", {}),
                              feature_list=kept, target=cfg["target"],
                              trim=session3.get("trim"), seed=seed)
    report, fitted = run_stage("evaluate", do_evaluate)
    write_artifact(out / "report.json", dump_json(report, stamp))
    model_obj = model_mod.model_to_obj(fitted)
    write_artifact(out / "model.json", dump_json(model_obj, stamp))

    def do_explain():
        return stage_explain(fitted, rows, kept, target=cfg["target"],
                             row_limit=int(cfg["explain"]["rows"]),
                             background_limit=int(cfg["explain"]["background"]),
                             seed=seed)
    shap_doc, reports, ranking = run_stage("explain", do_explain)
    write_artifact(out / "shap.json", dump_json(shap_doc, stamp))
    write_artifact(out / "shap.csv", shap_csv(reports, rows, kept, stamp))

    def do_report():
        return report_tables(report, stamp)
    csv_text, svg = run_stage("report", do_report)
    write_artifact(out / "metrics.csv", csv_text)
    write_artifact(out / "overlay.svg", svg)

    return report
