import json

import numpy as np
import pytest

from bctrace import ingest
from bctrace.align import ShiftSearchConfig, find_optimal_shift
from bctrace.errors import BadConfig
from bctrace.ingest import BcSeries, parse_event_log, resample_to_grid
from bctrace.synth import (
    BASE_EPOCH,
    TRACKER_GATE,
    TRACKER_MAX_AGE,
    ScenarioConfig,
    generate_scenario,
    scenario_config_from_obj,
    scenario_config_to_obj,
    write_scenario,
)
from bctrace.vision import TrackerConfig, TrackerState, bin_counts, classify_stop, update_tracks


def quick_config(**overrides):
    base = dict(duration=1200.0, lane_count=1, arrival_rate=6.0,
                hdv_fraction=0.1, planted_lag=60.0, noise_sigma=10.0,
                pedestrian_rate=0.0, emit_detections=False, seed=5)
    base.update(overrides)
    return ScenarioConfig(**base)


def activity_series(session):
    return session.total_vehicle_series()


def bc_series(session):
    return resample_to_grid(session.bc_samples, step=session.config.bc_step)


class TestGenerateScenario:
    def test_zero_arrivals_noise_around_zero(self):
        cfg = quick_config(arrival_rate=0.0, emission_intercept=0.0,
                           noise_sigma=5.0, planted_lag=0.0)
        session = generate_scenario(cfg)
        assert session.manifest["n_vehicles"] == 0
        for b in session.manifest["bins"]:
            assert b["ldpv"] == [0] and b["hdv"] == [0]
        vals = np.array([s.bc_raw for s in session.bc_samples[1:]])
        assert abs(float(vals.mean())) < 2.0
        assert 3.0 < float(vals.std()) < 8.0

    def test_zero_lag_no_noise_alignment_returns_zero(self):
        cfg = quick_config(planted_lag=0.0, noise_sigma=0.0)
        session = generate_scenario(cfg)
        res = find_optimal_shift(bc_series(session), activity_series(session),
                                 ShiftSearchConfig(max_shift=300))
        assert res.optimal_shift == 0.0

    def test_planted_lag_recovered(self):
        cfg = quick_config(planted_lag=160.0, snr_db=15.0,
                           emission_weights={"total_vehicle": 40.0})
        session = generate_scenario(cfg)
        res = find_optimal_shift(bc_series(session), activity_series(session),
                                 ShiftSearchConfig(max_shift=300))
        assert res.optimal_shift == 160.0

    def test_negative_lag_recovered(self):
        cfg = quick_config(planted_lag=-90.0, snr_db=15.0, seed=11,
                           emission_weights={"total_vehicle": 40.0})
        session = generate_scenario(cfg)
        res = find_optimal_shift(bc_series(session), activity_series(session),
                                 ShiftSearchConfig(max_shift=300))
        assert res.optimal_shift == -90.0

    def test_red_light_produces_stops(self):
        session = generate_scenario(quick_config(arrival_rate=10.0))
        stop_total = sum(sum(b["stop_ldpv"]) + sum(b["stop_hdv"])
                         for b in session.manifest["bins"])
        assert stop_total > 0

    def test_inline_stop_runs_match_position_scan_oracle(self):
        import bctrace.synth as synth
        cfg = quick_config(arrival_rate=12.0, lane_count=2, seed=21)
        rng = np.random.default_rng(cfg.seed)
        vehicles = synth._simulate_traffic(cfg, rng)
        assert any(v.stops for v in vehicles)
        for v in vehicles:
            assert v.stops == synth._true_stop_intervals(v)

    def test_manifest_counts_match_event_log_replay(self):
        session = generate_scenario(quick_config(arrival_rate=10.0, lane_count=2,
                                                 pedestrian_rate=0.5))
        from bctrace.ingest import serialize_event_log
        events = parse_event_log(serialize_event_log(session.events))
        bins = bin_counts(events, lane_count=2, bin_seconds=30.0,
                          t0=BASE_EPOCH, n_bins=len(session.manifest["bins"]))
        for got, expect in zip(bins, session.manifest["bins"]):
            assert list(got.ldpv) == expect["ldpv"]
            assert list(got.hdv) == expect["hdv"]

    def test_tracked_detections_reproduce_manifest(self):
        cfg = quick_config(duration=900.0, arrival_rate=8.0, lane_count=2,
                           emit_detections=True, seed=3)
        session = generate_scenario(cfg)
        state = TrackerState()
        tracker_cfg = TrackerConfig(max_distance=TRACKER_GATE, max_age=TRACKER_MAX_AGE)
        for t, dets in session.frame_detections:
            update_tracks(dets, state, t, tracker_cfg)
        tracks = state.all_tracks()
        for track in tracks:
            classify_stop(track, speed_eps=5.0)
            lane = round((460.0 - track.history[0][1][1]) / 80.0 + 0.5)
            track.lane = int(lane)
        vehicle_tracks = [t for t in tracks
                          if t.object_class in ("car", "motorcycle", "truck", "bus")]
        assert len(vehicle_tracks) == session.manifest["n_vehicles"]
        bins = bin_counts(tracks, lane_count=2, bin_seconds=30.0,
                          t0=BASE_EPOCH, n_bins=len(session.manifest["bins"]))
        for got, expect in zip(bins, session.manifest["bins"]):
            assert list(got.ldpv) == expect["ldpv"]
            assert list(got.hdv) == expect["hdv"]
            assert list(got.stop_ldpv) == expect["stop_ldpv"]
            assert list(got.stop_hdv) == expect["stop_hdv"]

    def test_wind_dilution_changes_emission(self):
        base = generate_scenario(quick_config())
        diluted = generate_scenario(quick_config(wind_dilution=0.05))
        e0 = np.array([b["emission"] for b in base.manifest["bins"]])
        e1 = np.array([b["emission"] for b in diluted.manifest["bins"]])
        assert (e1 <= e0 + 1e-9).all()
        assert (e1 < e0 - 1e-9).any()

    def test_bad_config(self):
        with pytest.raises(BadConfig):
            ScenarioConfig(duration=-5)
        with pytest.raises(BadConfig):
            ScenarioConfig(duration=100.0, planted_lag=60.0)

    def test_ae51_output_parses(self):
        session = generate_scenario(quick_config())
        from bctrace.ingest import parse_ae51_csv, serialize_ae51_csv
        samples = parse_ae51_csv(serialize_ae51_csv(session.bc_samples))
        assert len(samples) == len(session.bc_samples)
        assert samples[0].bc_raw is None
        atn = [s.atn for s in samples]
        assert atn == sorted(atn)


class TestWriteScenario:
    def test_byte_identical_regeneration(self, tmp_path):
        cfg = quick_config(emit_detections=True, make_frames=True, seed=9)
        a = tmp_path / "a"
        b = tmp_path / "b"
        write_scenario(generate_scenario(cfg), a)
        write_scenario(generate_scenario(cfg), b)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_different_seeds_differ(self, tmp_path):
        a = generate_scenario(quick_config(seed=1))
        b = generate_scenario(quick_config(seed=2))
        assert [s.bc_raw for s in a.bc_samples] != [s.bc_raw for s in b.bc_samples]

    def test_config_round_trip(self):
        cfg = quick_config(wind_dilution=0.04)
        again = scenario_config_from_obj(scenario_config_to_obj(cfg))
        assert again == cfg

    def test_scenario_dir_contents(self, tmp_path):
        cfg = quick_config(emit_detections=True)
        paths = write_scenario(generate_scenario(cfg), tmp_path / "s")
        for name in ("ae51.csv", "events.log", "weather.csv", "traffic.csv",
                     "geometry.json", "manifest.json", "scenario.json",
                     "detections.json"):
            assert name in paths
            assert paths[name].stat().st_size > 0
        manifest = json.loads(paths["manifest.json"].read_text())
        assert manifest["planted_lag"] == cfg.planted_lag
