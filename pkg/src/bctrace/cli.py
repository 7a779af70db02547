"""Command line entry point.

Subcommands mirror the pipeline stages (ingest, preprocess, align, vision,
features, train, tune, evaluate, explain, simulate, report) plus ``run``,
which chains them over one configuration document. Exit codes: 0 success,
2 input error, 3 invariant violation, 4 internal error. The BCTRACE_SEED
environment variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import evaluation, ingest, model as model_mod, synth as synth_mod
from . import vision as vision_mod
from .bc_signal import TrimConfig, trim_outliers
from .errors import BctraceError, InputError
from .pipeline import (
    activity_series,
    config_hash,
    corr_csv,
    counts_from_obj,
    counts_to_obj,
    detect_geometry,
    dump_json,
    features_doc,
    load_json,
    merge_config,
    read_input,
    report_tables,
    run_pipeline,
    session_from_obj,
    session_to_obj,
    shap_csv,
    stage_align,
    stage_evaluate,
    stage_explain,
    stage_features,
    stage_ingest,
    stage_preprocess,
    stage_train,
    stage_vision,
    write_artifact,
)


def _seed(args_seed):
    env = os.environ.get("BCTRACE_SEED")
    if env is not None:
        return int(env)
    return args_seed


def _load_session(path):
    return session_from_obj(load_json(path))


def _load_table(path):
    return ingest.parse_feature_rows(read_input(path))


def _feature_list(args):
    if getattr(args, "features", None):
        return load_json(args.features)["selected"]
    return None


def cmd_ingest(args):
    session = stage_ingest(ae51=args.ae51, events=args.events,
                           weather=args.weather, traffic=args.traffic,
                           source=args.source, grid_step=args.step)
    write_artifact(args.out, dump_json(session_to_obj(session)))
    n = 0 if session["bc_raw"] is None else len(session["bc_raw"])
    print(f"ingested {n} BC cells, {len(session['events'])} events, "
          f"{len(session['weather'])} weather rows -> {args.out}")


def cmd_preprocess(args):
    session = _load_session(args.input)
    session, audit = stage_preprocess(session, ona_delta=args.ona_delta,
                                      trim_mode=args.trim,
                                      trim_level=args.trim_level)
    write_artifact(args.out, dump_json(session_to_obj(session)))
    if args.removed:
        lines = ["source,value,reason"] + [f"{s},{v},{r}" for s, v, r in audit]
        write_artifact(args.removed, "\n".join(lines) + "\n")
    pts = session["bc_post"].ona_pts
    mean_window = float(np.nanmean(pts)) if pts is not None and len(pts) else 0.0
    print(f"noise-reduced {len(session['bc_post'])} cells "
          f"(mean window {mean_window:.2f} pts), trim audit {len(audit)} rows "
          f"-> {args.out}")


def cmd_align(args):
    session = _load_session(args.input)
    session, result = stage_align(session, max_shift=args.max_shift,
                                  resample_step=args.resample_step,
                                  bin_seconds=args.bin_seconds)
    write_artifact(args.out, dump_json(session_to_obj(session)))
    if args.curve:
        lines = ["lag_seconds,cosine_similarity"]
        lines += [f"{int(l)},{s:.9f}" for l, s in
                  zip(result.lags, result.similarities)]
        write_artifact(args.curve, "\n".join(lines) + "\n")
    print(f"optimal shift {result.optimal_shift:+.0f} s "
          f"(cosine similarity {result.max_similarity:.4f}) -> {args.out}")


def cmd_vision(args):
    detections = None
    events = None
    geometry = None
    frames = None
    if args.detections:
        text = read_input(args.detections)
        head = text[:200].lstrip()
        if head.startswith(b"{"):
            detections = vision_mod.parse_detections(text)
        else:
            events = ingest.parse_event_log(text)
    if args.lanes and args.lanes != "auto":
        geometry = vision_mod.geometry_from_obj(load_json(args.lanes))
    if args.frames:
        frames = sorted(Path(args.frames).glob("*.pgm"))
    bins, geom = stage_vision(detections=detections, events=events,
                              frames=frames if args.lanes == "auto" else None,
                              geometry=geometry, bin_seconds=args.bin_seconds,
                              speed_eps=args.speed_eps, min_stop=args.min_stop)
    write_artifact(args.out, dump_json(counts_to_obj(bins, args.bin_seconds)))
    if args.geometry_out and geom is not None:
        write_artifact(args.geometry_out, dump_json(vision_mod.geometry_to_obj(geom)))
    total = sum(b.total_vehicle for b in bins)
    print(f"{len(bins)} bins, {total} vehicles counted -> {args.out}")


def cmd_features(args):
    session = _load_session(args.session)
    bins, bin_seconds = counts_from_obj(load_json(args.counts))
    rows, kept, report, dropped = stage_features(
        bins, session, prune_threshold=args.prune_threshold, target=args.target,
        bin_seconds=bin_seconds)
    write_artifact(args.out, ingest.serialize_feature_rows(rows))
    if args.corr:
        write_artifact(args.corr, corr_csv(report))
    if args.features_out:
        write_artifact(args.features_out,
                       dump_json(features_doc(kept, report, dropped)))
    print(f"{len(rows)} feature rows ({len(dropped)} bins without target), "
          f"{len(kept)} features kept -> {args.out}")


def cmd_train(args):
    rows = _load_table(args.table)
    params = {"n_estimators": args.trees, "learning_rate": args.lr,
              "max_depth": args.depth}
    if args.model == "rf":
        params = {"n_estimators": args.trees, "max_depth": args.depth,
                  "min_samples_split": args.min_samples_split}
    model = stage_train(rows, kind=args.model, params=params,
                        feature_list=_feature_list(args), target=args.target,
                        seed=_seed(args.seed))
    write_artifact(args.out, dump_json(model_mod.model_to_obj(model)))
    print(f"trained {args.model} on {len(rows)} rows -> {args.out}")


def cmd_tune(args):
    rows = _load_table(args.table)
    from .features import to_matrix
    X, y, names = to_matrix(rows, _feature_list(args), args.target)
    ok = ~np.isnan(y)
    grid = load_json(args.grid) if args.grid else model_mod.DEFAULT_GRIDS[args.model]
    result = model_mod.grid_search(X[ok], y[ok], args.model, grid,
                                   k=args.k, seed=_seed(args.seed),
                                   feature_names=names)
    doc = {"format": "bctrace-tuning", "version": 1,
           "model": args.model, "grid": grid,
           "best_params": result.best_params,
           "cv_table": result.cv_table}
    write_artifact(args.out, dump_json(doc))
    if args.model_out:
        write_artifact(args.model_out,
                       dump_json(model_mod.model_to_obj(result.model)))
    best = result.best_params
    print(f"searched {len(result.cv_table)} configs (k={args.k}); "
          f"best {best} -> {args.out}")


def cmd_evaluate(args):
    rows = _load_table(args.table)
    model_doc = load_json(args.model)
    kind = model_doc.get("kind", "gbt")
    params = model_doc.get("params", {})
    if kind == "gbt" and "params" in model_doc:
        params = {k: v for k, v in model_doc["params"].items()
                  if k in ("n_estimators", "learning_rate", "max_depth", "lam",
                           "min_split_gain", "min_samples_split")}
    spec = evaluation.SplitSpec(kind=args.split,
                                train_fraction=args.train_fraction,
                                window_length=args.window,
                                k=args.k, strata_bins=args.strata,
                                seed=_seed(args.seed))
    trim = None
    if args.trim != "none":
        trim = {"mode": args.trim, "level": args.trim_level}
    report, fitted = stage_evaluate(rows, spec, kind=kind, params=params,
                                    feature_list=_feature_list(args),
                                    target=args.target, trim=trim,
                                    seed=_seed(args.seed))
    write_artifact(args.report, dump_json(report))
    te = report["test"]
    r2 = "n/a" if te["r2"] is None else f"{te['r2']:.3f}"
    print(f"test rmse {te['rmse']:.2f}  mae {te['mae']:.2f}  r2 {r2} "
          f"-> {args.report}")


def cmd_explain(args):
    rows = _load_table(args.table)
    model = model_mod.model_from_obj(load_json(args.model))
    if args.rows != "all":
        limit = int(args.rows)
    else:
        limit = len(rows)
    doc, reports, ranking = stage_explain(model, rows, model.feature_names,
                                          target=args.target, row_limit=limit,
                                          background_limit=args.background,
                                          seed=_seed(args.seed))
    write_artifact(args.out, dump_json(doc))
    if args.beeswarm:
        write_artifact(args.beeswarm,
                       shap_csv(reports, rows, model.feature_names))
    top = ", ".join(f"{f} ({v:.1f})" for f, v in ranking[:3])
    print(f"explained {len(reports)} rows; top features: {top} -> {args.out}")


def cmd_simulate(args):
    obj = load_json(args.config) if args.config else {}
    if args.seed is not None or os.environ.get("BCTRACE_SEED"):
        obj["seed"] = _seed(args.seed if args.seed is not None else 0)
    cfg = synth_mod.scenario_config_from_obj(obj)
    session = synth_mod.generate_scenario(cfg)
    paths = synth_mod.write_scenario(session, args.out_dir)
    print(f"wrote {len(paths)} artifacts "
          f"({session.manifest['n_vehicles']} vehicles, "
          f"lag {cfg.planted_lag:+.0f} s) -> {args.out_dir}")


def cmd_report(args):
    report = load_json(args.report)
    csv_text, svg = report_tables(report)
    out = Path(args.out_dir)
    write_artifact(out / "metrics.csv", csv_text)
    write_artifact(out / "metrics.json", dump_json({
        k: report[k] for k in ("train", "test", "baseline_test",
                               "p_value_vs_linear", "cv", "model", "split")
        if k in report}))
    write_artifact(out / "overlay.svg", svg)
    print(f"report tables and overlay chart -> {args.out_dir}")


def cmd_run(args):
    cfg = load_json(args.config) if args.config else {}
    if os.environ.get("BCTRACE_SEED"):
        cfg["seed"] = int(os.environ["BCTRACE_SEED"])
    elif args.seed is not None:
        cfg["seed"] = args.seed
    if args.scenario_default and not cfg.get("scenario") and not cfg.get("inputs"):
        cfg["scenario"] = {}
    report = run_pipeline(cfg, args.out_dir)
    te = report["test"]
    r2 = "n/a" if te["r2"] is None else f"{te['r2']:.3f}"
    print(f"pipeline complete: test rmse {te['rmse']:.2f}  r2 {r2} "
          f"-> {args.out_dir}")


def build_parser():
    p = argparse.ArgumentParser(prog="bctrace",
                                description="street-level BC estimation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="parse session inputs onto a time grid")
    sp.add_argument("--ae51", help="microaethalometer CSV")
    sp.add_argument("--events", help="detection event log")
    sp.add_argument("--weather", help="weather feed (CSV or JSON)")
    sp.add_argument("--traffic", help="traffic density feed")
    sp.add_argument("--source", default="", help="dataset label")
    sp.add_argument("--step", type=float, default=30.0, help="BC grid step (s)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ingest)

    sp = sub.add_parser("preprocess", help="noise-reduce the BC series")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--ona-delta", type=float, default=0.05)
    sp.add_argument("--trim", choices=["local", "global", "none"], default="local")
    sp.add_argument("--trim-level", type=float, default=0.95)
    sp.add_argument("--removed", help="audit CSV of would-be removals")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_preprocess)

    sp = sub.add_parser("align", help="estimate and apply the activity lag")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--max-shift", type=int, default=600)
    sp.add_argument("--resample-step", type=float, default=1.0)
    sp.add_argument("--bin-seconds", type=float, default=30.0)
    sp.add_argument("--curve", help="similarity curve CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_align)

    sp = sub.add_parser("vision", help="lane geometry and per-bin counts")
    sp.add_argument("--frames", help="directory of PGM frames")
    sp.add_argument("--detections", help="event log or detections JSON")
    sp.add_argument("--lanes", default="auto",
                    help="'auto' (from frames) or a geometry JSON path")
    sp.add_argument("--bin-seconds", type=float, default=30.0)
    sp.add_argument("--speed-eps", type=float, default=5.0)
    sp.add_argument("--min-stop", type=float, default=4.0)
    sp.add_argument("--geometry-out", help="write the geometry used")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_vision)

    sp = sub.add_parser("features", help="join counts, feeds, and BC targets")
    sp.add_argument("--counts", required=True)
    sp.add_argument("--session", required=True)
    sp.add_argument("--prune-threshold", type=float, default=0.70)
    sp.add_argument("--target", default="bc_post")
    sp.add_argument("--corr", help="correlation matrix CSV")
    sp.add_argument("--features-out", help="selected-features JSON")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_features)

    sp = sub.add_parser("train", help="fit a regressor on a feature table")
    sp.add_argument("--table", required=True)
    sp.add_argument("--model", choices=["gbt", "gb", "rf", "linear"],
                    default="gbt")
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--depth", type=int, default=5)
    sp.add_argument("--trees", type=int, default=50)
    sp.add_argument("--min-samples-split", type=int, default=2)
    sp.add_argument("--target", default="bc_post")
    sp.add_argument("--features", help="selected-features JSON")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("tune", help="cross-validated grid search")
    sp.add_argument("--table", required=True)
    sp.add_argument("--model", choices=["gbt", "gb", "rf"], default="gbt")
    sp.add_argument("--grid", help="grid JSON; defaults to the stock grid")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--target", default="bc_post")
    sp.add_argument("--features", help="selected-features JSON")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--model-out", help="refit best model JSON")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_tune)

    sp = sub.add_parser("evaluate", help="split, trim train side, fit, score")
    sp.add_argument("--table", required=True)
    sp.add_argument("--model", required=True, help="model JSON (hyperparameters)")
    sp.add_argument("--split", choices=["stratified", "windowed"],
                    default="stratified")
    sp.add_argument("--train-fraction", type=float, default=0.75)
    sp.add_argument("--window", type=float, default=900.0)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--strata", type=int, default=10)
    sp.add_argument("--trim", choices=["local", "global", "none"],
                    default="local")
    sp.add_argument("--trim-level", type=float, default=0.95)
    sp.add_argument("--target", default="bc_post")
    sp.add_argument("--features", help="selected-features JSON")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--report", required=True)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("explain", help="exact Shapley attributions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--table", required=True)
    sp.add_argument("--rows", default="10", help="row count or 'all'")
    sp.add_argument("--background", type=int, default=40)
    sp.add_argument("--target", default="bc_post")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--beeswarm", help="per-(row, feature) CSV export")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_explain)

    sp = sub.add_parser("simulate", help="generate a synthetic session")
    sp.add_argument("--config", help="scenario JSON; defaults when omitted")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("report", help="metrics tables and overlay chart")
    sp.add_argument("--report", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("run", help="full pipeline from a config document")
    sp.add_argument("--config", help="pipeline JSON; defaults when omitted")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--scenario-default", action="store_true",
                    help="synthesize the default scenario when no inputs given")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_run)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except BctraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        traceback.print_exc()
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
