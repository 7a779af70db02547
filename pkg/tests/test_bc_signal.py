import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bctrace import ingest
from bctrace.bc_signal import OnaConfig, TrimConfig, TrimStats, ona_filter, ona_windows, trim_outliers
from bctrace.errors import DegenerateVariance, MissingAtn
from bctrace.ingest import BcSeries, FeatureRow


def series_from(values, atn):
    return BcSeries(start=0.0, step=30.0, values=np.asarray(values, float),
                    atn=np.asarray(atn, float))


def brute_force_windows(atn, values, delta):
    """Independent oracle: linear scan accumulating attenuation."""
    windows, current = [], []
    for i, (a, v) in enumerate(zip(atn, values)):
        if np.isnan(v) or np.isnan(a):
            continue
        if current and a < atn[current[-1]]:
            windows.append(current)
            current = []
        current.append(i)
        if a - atn[current[0]] >= delta:
            windows.append(current)
            current = []
    if current:
        windows.append(current)
    return windows


class TestOnaFilter:
    def test_zero_delta_is_identity(self):
        vals = [100.0, 200.0, 300.0, 250.0]
        s = series_from(vals, [0.0, 0.01, 0.02, 0.03])
        out = ona_filter(s, OnaConfig(delta_atn=0.0))
        np.testing.assert_allclose(out.values, vals)
        np.testing.assert_allclose(out.ona_pts, [1, 1, 1, 1])

    def test_constant_series_unchanged(self):
        s = series_from([500.0] * 8, np.linspace(0, 0.2, 8))
        for delta in (0.0, 0.05, 0.5):
            out = ona_filter(s, OnaConfig(delta))
            np.testing.assert_allclose(out.values, 500.0)

    def test_instrument_excerpt_window_sizes(self, data_dir):
        # gated at 0.01 attenuation, the instrument's own per-sample
        # averaging counts are reproduced exactly
        samples = ingest.parse_ae51_csv((data_dir / "ae51_excerpt.csv").read_bytes())
        series = ingest.resample_to_grid(samples, step=30)
        out = ona_filter(series, OnaConfig(delta_atn=0.01))
        expected = [np.nan if s.ona_pts is None else s.ona_pts for s in samples]
        np.testing.assert_array_equal(np.isnan(out.ona_pts), np.isnan(expected))
        got = out.ona_pts[~np.isnan(out.ona_pts)]
        np.testing.assert_allclose(got, [p for p in expected if not np.isnan(p)])

    def test_excerpt_against_brute_force_oracle(self, data_dir):
        samples = ingest.parse_ae51_csv((data_dir / "ae51_excerpt.csv").read_bytes())
        series = ingest.resample_to_grid(samples, step=30)
        valid = ~np.isnan(series.values)
        expected = brute_force_windows(series.atn, series.values, 0.01)
        got = ona_windows(series.atn, valid, 0.01)
        assert got == expected
        assert [len(w) for w in got] == [3, 2]

    def test_missing_cells_stay_missing(self):
        vals = [100.0, np.nan, 300.0, 250.0]
        s = series_from(vals, [0.0, 0.01, 0.02, 0.03])
        out = ona_filter(s, OnaConfig(0.05))
        assert np.isnan(out.values[1])
        assert np.isnan(out.ona_pts[1])
        assert len(out) == len(s)

    def test_atn_reset_closes_window(self):
        vals = [100.0, 200.0, 900.0, 1000.0]
        atn = [0.0, 0.001, -5.0, -4.999]     # filter change between 1 and 2
        out = ona_filter(series_from(vals, atn), OnaConfig(0.05))
        np.testing.assert_allclose(out.values, [150.0, 150.0, 950.0, 950.0])

    def test_requires_atn(self):
        s = BcSeries(start=0, step=30, values=np.array([1.0, 2.0]))
        with pytest.raises(MissingAtn):
            ona_filter(s)

    @given(
        st.lists(st.floats(-500, 3000, allow_nan=False), min_size=2, max_size=60),
        st.floats(0.001, 0.2, allow_nan=False),
        st.integers(0, 2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_windows_partition_and_exact_means(self, values, delta, seed):
        rng = np.random.default_rng(seed)
        atn = np.cumsum(rng.uniform(0, 0.03, size=len(values)))
        s = series_from(values, atn)
        out = ona_filter(s, OnaConfig(delta))

        windows = ona_windows(atn, ~np.isnan(s.values), delta)
        # partition: window sizes sum to the number of valid samples
        assert sum(len(w) for w in windows) == len(values)
        covered = sorted(i for w in windows for i in w)
        assert covered == list(range(len(values)))
        # each output equals its window mean to 1e-12
        for w in windows:
            mean = np.mean([values[i] for i in w])
            for i in w:
                assert out.values[i] == pytest.approx(mean, abs=1e-12)
        # averaging within a partition never raises variance
        assert np.var(out.values) <= np.var(s.values) + 1e-12


SET_B_MU, SET_B_SIGMA = 729.82, 260.0


class TestTrimOutliers:
    def rows(self, values, source="set_b"):
        return [
            FeatureRow(timestamp=30.0 * i, ldpv=(0,), hdv=(0,), stop_ldpv=(0,),
                       stop_hdv=(0,), his_temp=10.0, his_wind=5.0, his_humid=50.0,
                       bc_post=float(v), source=source)
            for i, v in enumerate(values)
        ]

    def test_recorded_minimum_removed_with_published_stats(self):
        # the dataset's recorded extremes against its published moments
        stats = {"set_b": TrimStats(SET_B_MU, SET_B_SIGMA)}
        rows = self.rows([-242.0, 700.0, 1623.0])
        res = trim_outliers(rows, TrimConfig(mode="local"), stats_by_source=stats)
        removed_values = [v for (_, _, v, _) in res.removed]
        assert -242.0 in removed_values
        lo, hi = res.stats["set_b"].interval(res.z)
        assert lo == pytest.approx(SET_B_MU - 1.96 * SET_B_SIGMA, abs=1e-9)
        assert hi == pytest.approx(SET_B_MU + 1.96 * SET_B_SIGMA, abs=1e-9)
        assert lo == pytest.approx(220.22, abs=1e-9)

    def test_identical_values_nothing_removed(self):
        res = trim_outliers(self.rows([700.0] * 10))
        assert res.removed == []
        assert len(res.kept) == 10

    def test_local_vs_global_on_two_sources(self):
        rng = np.random.default_rng(11)
        a = rng.normal(200, 10, 200)
        b = rng.normal(2000, 10, 200)
        a[0] = 260.0    # extreme within set a, unremarkable pooled
        rows = self.rows(a, "a") + self.rows(b, "b")

        local = trim_outliers(rows, TrimConfig(mode="local"))
        global_ = trim_outliers(rows, TrimConfig(mode="global"))
        local_removed = {id(it) for (it, _, _, _) in local.removed}
        assert id(rows[0]) in local_removed
        global_removed = {id(it) for (it, _, _, _) in global_.removed}
        assert id(rows[0]) not in global_removed

        # brute-force per-set filter oracle
        for src, vals in (("a", a), ("b", b)):
            mu, sigma = np.mean(vals), np.std(vals)
            expected = {float(v) for v in vals if abs(v - mu) > 1.96 * sigma}
            got = {v for (_, s, v, _) in local.removed if s == src}
            assert got == expected

    def test_global_equals_local_on_single_source(self):
        rng = np.random.default_rng(5)
        rows = self.rows(rng.normal(700, 100, 300))
        g = trim_outliers(rows, TrimConfig(mode="global"))
        l = trim_outliers(rows, TrimConfig(mode="local"))
        assert [id(r) for r in g.kept] == [id(r) for r in l.kept]

    def test_idempotent_at_fixed_bounds(self):
        rng = np.random.default_rng(9)
        rows = self.rows(rng.normal(700, 100, 300))
        first = trim_outliers(rows, TrimConfig(mode="local"))
        again = trim_outliers(first.kept, TrimConfig(mode="local"),
                              stats_by_source=first.stats)
        assert again.removed == []

    def test_degenerate_variance(self):
        rows = self.rows([5.0, 5.0, 5.0])
        stats = {"set_b": TrimStats(4.0, 0.0)}
        with pytest.raises(DegenerateVariance):
            trim_outliers(rows, TrimConfig(mode="local"), stats_by_source=stats)

    def test_plain_numbers_accepted(self):
        res = trim_outliers([1.0] * 100 + [100.0], TrimConfig(mode="global"))
        assert [v for (_, _, v, _) in res.removed] == [100.0]
