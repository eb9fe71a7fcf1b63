"""Preprocessing tests: filter spectra, resampling oracles, epoching,
patching, and the normalization/statistics helpers."""

import numpy as np
import pytest

from tsfm_workbench.errors import ConfigError, DataError, ShapeError
from tsfm_workbench.signal import (PatchGrid, epoch_segment, first_difference,
                                   instance_standardize, lowpass_filter,
                                   partition_patches, patch_stats, resample,
                                   resize_to_length)


def _rms(x):
    return np.sqrt(np.mean(np.square(x)))


def _tone(freq, fs, seconds):
    t = np.arange(int(seconds * fs)) / fs
    return np.sin(2.0 * np.pi * freq * t)


class TestLowpass:
    def test_dc_unchanged(self):
        x = np.full(2000, 3.7)
        y = lowpass_filter(x, 100.0, 30.0)
        np.testing.assert_allclose(y, x, atol=1e-6)

    def test_45hz_attenuated_at_least_20db(self):
        x = _tone(45.0, 100.0, 20.0)
        y = lowpass_filter(x, 100.0, 30.0)
        interior = slice(200, -200)
        ratio = _rms(y[interior]) / _rms(x[interior])
        assert 20.0 * np.log10(ratio) <= -20.0

    def test_10hz_within_1db(self):
        x = _tone(10.0, 100.0, 20.0)
        y = lowpass_filter(x, 100.0, 30.0)
        interior = slice(200, -200)
        db = 20.0 * np.log10(_rms(y[interior]) / _rms(x[interior]))
        assert abs(db) < 1.0

    def test_passband_ripple_and_stopband_sweep(self):
        # < 1 dB ripple through 25 Hz; >= 20 dB down above 45 Hz, at 100 Hz rate
        interior = slice(200, -200)
        for f in (2.0, 8.0, 15.0, 20.0, 25.0):
            x = _tone(f, 100.0, 20.0)
            db = 20.0 * np.log10(_rms(lowpass_filter(x, 100.0)[interior]) / _rms(x[interior]))
            assert abs(db) < 1.0, f"{f} Hz: {db}"
        for f in (45.0, 47.0, 49.0):
            x = _tone(f, 100.0, 20.0)
            db = 20.0 * np.log10(_rms(lowpass_filter(x, 100.0)[interior]) / _rms(x[interior]))
            assert db <= -20.0, f"{f} Hz: {db}"

    def test_cutoff_at_nyquist_rejected(self):
        with pytest.raises(ConfigError):
            lowpass_filter(np.zeros(100), 100.0, 50.0)

    def test_length_preserved(self):
        x = np.random.default_rng(0).normal(size=777)
        assert lowpass_filter(x, 100.0).shape == x.shape


class TestResample:
    def test_same_rate_is_identity(self):
        x = np.random.default_rng(1).normal(size=50)
        np.testing.assert_array_equal(resample(x, 100.0, 100.0), x)

    def test_constant_stays_constant(self):
        for to_hz in (20.0, 100.0, 333.0):
            y = resample(np.full(400, 2.5), 100.0, to_hz)
            np.testing.assert_allclose(y, 2.5, atol=1e-9)
            assert len(y) == round(400 * to_hz / 100.0)

    def test_ramp_closed_form(self):
        # ramp over 1 s at 10 Hz, upsampled to 20 Hz: interpolation of a line is
        # the line, except the final grid point clamps to the last sample
        x = np.arange(10) / 10.0
        y = resample(x, 10.0, 20.0)
        expected = np.minimum(np.arange(20) / 20.0, 0.9)
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_round_trip_band_limited(self):
        # <= 10 Hz mixtures survive 500 -> 250 -> 500 within 1% RMS
        rng = np.random.default_rng(2)
        t = np.arange(int(5 * 500)) / 500.0
        for _ in range(5):
            freqs = rng.uniform(0.5, 10.0, 4)
            amps = rng.uniform(0.5, 1.5, 4)
            phases = rng.uniform(0, 2 * np.pi, 4)
            x = sum(a * np.sin(2 * np.pi * f * t + p) for f, a, p in zip(freqs, amps, phases))
            y = resample(resample(x, 500.0, 250.0), 250.0, 500.0)
            n = min(len(x), len(y))
            assert _rms(x[:n] - y[:n]) / _rms(x[:n]) < 0.01

    def test_bad_rates(self):
        with pytest.raises(ConfigError):
            resample(np.zeros(10), 0.0, 10.0)


class TestEpochSegment:
    def test_90s_record_at_100hz(self):
        record = np.random.default_rng(3).normal(size=(2, 9000))
        samples = epoch_segment(record, [0, 1, 2], 100.0, subject_id="s0")
        assert len(samples) == 3
        assert all(s.data.shape == (2, 3000) for s in samples)
        assert [s.label for s in samples] == [0, 1, 2]
        np.testing.assert_array_equal(samples[1].data, record[:, 3000:6000])

    def test_sub_epoch_record_gives_empty_list(self):
        assert epoch_segment(np.zeros((1, 2900)), [], 100.0) == []

    def test_label_count_mismatch(self):
        with pytest.raises(DataError):
            epoch_segment(np.zeros((1, 9000)), [0, 1], 100.0)

    def test_trailing_remainder_dropped(self):
        samples = epoch_segment(np.zeros((1, 3599)), [4], 1.0, epoch_s=3000.0)
        assert len(samples) == 1 and samples[0].data.shape == (1, 3000)


class TestPartitionPatches:
    def test_exact_reshape(self):
        x = np.arange(800, dtype=float).reshape(2, 400)
        grid = partition_patches(x, 200)
        assert isinstance(grid, PatchGrid)
        assert grid.data.shape == (2, 2, 200)
        np.testing.assert_array_equal(grid.data[1, 0], x[1, :200])

    def test_floor_semantics(self):
        grid = partition_patches(np.zeros((1, 399)), 200)
        assert grid.data.shape == (1, 1, 200)

    def test_too_short_rejected(self):
        with pytest.raises(ShapeError):
            partition_patches(np.zeros((1, 199)), 200)

    def test_flatten_recovers_retained_prefix(self):
        x = np.random.default_rng(4).normal(size=(3, 450))
        grid = partition_patches(x, 200)
        np.testing.assert_array_equal(grid.data.reshape(3, -1), x[:, :400])


class TestResize:
    def test_same_length_identity(self):
        x = np.random.default_rng(5).normal(size=512)
        np.testing.assert_allclose(resize_to_length(x, 512), x, atol=1e-6)

    def test_constant_any_length(self):
        y = resize_to_length(np.full(77, 4.2), 512)
        np.testing.assert_allclose(y, 4.2, atol=1e-12)
        assert y.shape == (512,)

    def test_short_ramp_endpoints_preserved(self):
        y = resize_to_length(np.array([0.0, 1.0, 2.0, 3.0]), 512)
        assert y[0] == 0.0 and y[-1] == 3.0
        np.testing.assert_allclose(np.diff(y), np.diff(y)[0], atol=1e-12)  # still a line

    def test_length_must_be_multiple_of_32(self):
        with pytest.raises(ConfigError):
            resize_to_length(np.zeros(100), 100)


class TestInstanceStandardize:
    def test_constant_channel_maps_to_zeros(self):
        out = instance_standardize(np.full((2, 50), 9.0))
        np.testing.assert_array_equal(out, np.zeros((2, 50)))

    def test_two_point_closed_form(self):
        np.testing.assert_allclose(instance_standardize(np.array([[1.0, 3.0]])),
                                   [[-1.0, 1.0]], atol=1e-9)

    def test_moments_on_random_input(self):
        x = np.random.default_rng(6).normal(3.0, 5.0, size=(4, 200))
        out = instance_standardize(x)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_idempotent(self):
        x = np.random.default_rng(7).normal(size=(2, 128))
        once = instance_standardize(x)
        np.testing.assert_allclose(instance_standardize(once), once, atol=1e-5)

    def test_exact_scale_equivariance_power_of_two(self):
        x = np.random.default_rng(8).normal(size=(2, 64))
        np.testing.assert_array_equal(instance_standardize(2.0 * x), instance_standardize(x))


class TestFirstDifference:
    def test_constant_gives_zeros(self):
        np.testing.assert_array_equal(first_difference(np.full(10, 3.0)), np.zeros(10))

    def test_hand_example(self):
        np.testing.assert_array_equal(first_difference(np.array([0.0, 1.0, 3.0])),
                                      [0.0, 1.0, 2.0])

    def test_linearity(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=30), rng.normal(size=30)
        np.testing.assert_allclose(first_difference(a + b),
                                   first_difference(a) + first_difference(b), atol=1e-12)

    def test_length_preserved(self):
        assert first_difference(np.zeros(512)).shape == (512,)


class TestPatchStats:
    def test_constant(self):
        stats = patch_stats(np.full(512, 5.0), 32)
        np.testing.assert_array_equal(stats.mu, np.full(32, 5.0))
        np.testing.assert_array_equal(stats.sigma, np.zeros(32))

    def test_alternating_pattern_hand_oracle(self):
        # window [1,3,1,3,...]: mean 2, population std 1
        x = np.tile([1.0, 3.0], 256)
        stats = patch_stats(x, 32)
        np.testing.assert_allclose(stats.mu, 2.0, atol=1e-12)
        np.testing.assert_allclose(stats.sigma, 1.0, atol=1e-12)

    def test_scale_equivariance(self):
        x = np.random.default_rng(10).normal(size=512)
        base = patch_stats(x, 32)
        scaled = patch_stats(3.5 * x, 32)
        np.testing.assert_allclose(scaled.mu, 3.5 * base.mu, atol=1e-12)
        np.testing.assert_allclose(scaled.sigma, 3.5 * base.sigma, atol=1e-12)

    def test_indivisible_length_rejected(self):
        with pytest.raises(ShapeError):
            patch_stats(np.zeros(500), 32)
