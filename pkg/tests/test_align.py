import math

import numpy as np
import pytest

from bctrace.align import (
    AlignmentResult,
    ShiftSearchConfig,
    Spectrum,
    apply_shift,
    dft,
    find_optimal_shift,
    phase_cosine_similarity,
    shift_cells,
)
from bctrace.errors import EmptyInput, InsufficientOverlap, ShiftTooLarge, ZeroNorm
from bctrace.ingest import BcSeries


def naive_dft(x):
    """O(N^2) summation oracle."""
    x = np.asarray(x, float)
    n = len(x)
    cos = np.zeros(n)
    sin = np.zeros(n)
    for k in range(n):
        ang = 2 * math.pi * k * np.arange(n) / n
        cos[k] = float(np.sum(x * np.cos(ang)))
        sin[k] = -float(np.sum(x * np.sin(ang)))
    return cos, sin


def series(values, start=0.0, step=1.0):
    return BcSeries(start=start, step=step, values=np.asarray(values, float))


class TestDft:
    def test_constant_signal_dc_only(self):
        n = 32
        spec = dft(np.full(n, 3.0))
        assert spec.cos_part[0] == pytest.approx(3.0 * n, abs=1e-9)
        assert np.allclose(spec.cos_part[1:], 0.0, atol=1e-9)
        assert np.allclose(spec.sin_part, 0.0, atol=1e-9)

    def test_pure_cosine_hits_its_bin(self):
        n = 64
        x = np.cos(2 * math.pi * np.arange(n) / n)
        spec = dft(x)
        mag = np.hypot(spec.cos_part, spec.sin_part)
        hot = np.flatnonzero(mag > 1e-6)
        assert set(hot.tolist()) == {1, n - 1}

    def test_matches_naive_summation(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=64)
        spec = dft(x)
        cos, sin = naive_dft(x)
        np.testing.assert_allclose(spec.cos_part, cos, atol=1e-9)
        np.testing.assert_allclose(spec.sin_part, sin, atol=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            dft([])


class TestPhaseCosineSimilarity:
    def test_self_similarity_is_one(self):
        spec = dft(np.random.default_rng(0).normal(size=40))
        assert phase_cosine_similarity(spec, spec) == pytest.approx(1.0, abs=1e-12)

    def test_antipodal_is_minus_one(self):
        x = np.random.default_rng(1).normal(size=40)
        assert phase_cosine_similarity(dft(x), dft(-x)) == pytest.approx(-1.0, abs=1e-12)

    def test_zero_norm_rejected(self):
        spec = dft(np.ones(8))
        zero = Spectrum(np.zeros(8), np.zeros(8))
        with pytest.raises(ZeroNorm):
            phase_cosine_similarity(spec, zero)

    def test_equals_time_domain_inner_product(self):
        # Parseval bridge at a handful of lags
        rng = np.random.default_rng(2)
        x = rng.normal(size=128)
        y = rng.normal(size=128)
        for lag in (-37, -1, 0, 1, 5, 64):
            rolled = np.roll(y, lag)
            freq = phase_cosine_similarity(dft(x), dft(rolled))
            time = float(np.dot(x, rolled) / (np.linalg.norm(x) * np.linalg.norm(y)))
            assert freq == pytest.approx(time, abs=1e-9)


def brute_force_argmax(x, y, shifts):
    """Time-domain circular cross-correlation oracle."""
    best, best_val = None, -np.inf
    for s in shifts:
        val = float(np.dot(x, np.roll(y, s)))
        if val > best_val + 1e-12:
            best, best_val = s, val
    return best


class TestFindOptimalShift:
    def make_pair(self, lag, n=3000, noise=0.0, seed=0):
        """Activity y and a BC-like x that trails it by ``lag`` seconds."""
        rng = np.random.default_rng(seed)
        y = rng.poisson(3.0, size=n).astype(float)
        x = np.roll(y, lag)                      # x[t] = y[t - lag]
        if noise:
            x = x + rng.normal(0, noise, size=n)
        return series(x), series(y)

    def test_identity(self):
        x, y = self.make_pair(0)
        res = find_optimal_shift(x, y, ShiftSearchConfig(max_shift=300))
        assert res.optimal_shift == 0

    def test_reference_160_second_case(self):
        x, y = self.make_pair(160)
        res = find_optimal_shift(x, y, ShiftSearchConfig(max_shift=600))
        assert res.optimal_shift == 160
        assert res.max_similarity == pytest.approx(1.0, abs=1e-9)

    def test_result_invariants(self):
        x, y = self.make_pair(42, noise=0.5)
        res = find_optimal_shift(x, y, ShiftSearchConfig(max_shift=300))
        assert res.optimal_shift in set(res.lags.tolist())
        assert res.max_similarity == pytest.approx(res.similarities.max())
        assert -1.0 - 1e-12 <= res.max_similarity <= 1.0 + 1e-12

    def test_noisy_recovery_matches_cross_correlation_oracle(self):
        rng = np.random.default_rng(99)
        hits = 0
        trials = 40
        for _ in range(trials):
            lag = int(rng.integers(-300, 301))
            seed = int(rng.integers(0, 2**31))
            x, y = self.make_pair(lag, noise=0.55, seed=seed)  # ~10 dB for poisson(3)
            res = find_optimal_shift(x, y, ShiftSearchConfig(max_shift=300))
            xs = (x.values - x.values.mean()) / x.values.std()
            ys = (y.values - y.values.mean()) / y.values.std()
            oracle = brute_force_argmax(xs, ys, range(-300, 301))
            assert res.optimal_shift == oracle
            hits += res.optimal_shift == lag
        assert hits == trials

    def test_scale_invariance(self):
        x, y = self.make_pair(30, noise=0.3)
        r1 = find_optimal_shift(x, y, ShiftSearchConfig(max_shift=120))
        x5 = series(x.values * 5.0)
        r2 = find_optimal_shift(x5, y, ShiftSearchConfig(max_shift=120))
        np.testing.assert_allclose(r1.similarities, r2.similarities, atol=1e-9)

    def test_shift_equivariance(self):
        x, y = self.make_pair(50)
        base = find_optimal_shift(x, y, ShiftSearchConfig(max_shift=200))
        # advancing the activity by d makes x trail it by d more
        d = 40
        y_adv = series(np.roll(y.values, -d))
        moved = find_optimal_shift(x, y_adv, ShiftSearchConfig(max_shift=200))
        assert moved.optimal_shift == base.optimal_shift + d

    def test_insufficient_overlap(self):
        x, y = self.make_pair(0, n=100)
        with pytest.raises(InsufficientOverlap):
            find_optimal_shift(x, y, ShiftSearchConfig(max_shift=300))

    def test_coarse_grids_are_held_to_one_second(self):
        # 30 s BC grid against 30 s activity bins whose clocks are offset:
        # the hold preserves the sub-bin phase and the search finds it
        rng = np.random.default_rng(4)
        bins = rng.poisson(5.0, size=120).astype(float)
        y = BcSeries(start=0.0, step=30.0, values=bins)
        lag = 160
        held = np.repeat(bins, 30)                     # activity at 1 s
        x_fine = np.roll(held, lag)
        x = BcSeries(start=10.0, step=30.0, values=x_fine[10::30].copy())
        res = find_optimal_shift(x, y, ShiftSearchConfig(max_shift=300))
        assert res.optimal_shift == lag


class TestApplyShift:
    def test_zero_is_identity(self):
        s = series(np.arange(10.0), step=30.0)
        out = apply_shift(s, 0.0)
        np.testing.assert_array_equal(out.values, s.values)

    def test_round_trip_inverse_on_overlap(self):
        s = series(np.arange(20.0), step=30.0)
        out = apply_shift(apply_shift(s, 150.0), -150.0)
        assert np.isnan(out.values[:5]).all()
        np.testing.assert_array_equal(out.values[5:], s.values[5:])

    def test_tail_missing_no_wraparound(self):
        s = series(np.arange(10.0), step=1.0)
        out = apply_shift(s, 3.0)
        np.testing.assert_array_equal(out.values[:7], s.values[3:])
        assert np.isnan(out.values[7:]).all()

    def test_negative_shift(self):
        s = series(np.arange(10.0), step=1.0)
        out = apply_shift(s, -2.0)
        assert np.isnan(out.values[:2]).all()
        np.testing.assert_array_equal(out.values[2:], s.values[:8])

    def test_too_large(self):
        s = series(np.arange(10.0), step=1.0)
        with pytest.raises(ShiftTooLarge):
            apply_shift(s, 10.0)

    def test_cells_and_seconds_agree(self):
        s = series(np.arange(40.0), step=30.0)
        np.testing.assert_array_equal(
            apply_shift(s, 160.0).values,        # rounds to 5 cells
            shift_cells(s, 5).values)
