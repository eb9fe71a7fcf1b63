"""Deterministic preprocessing from raw multichannel records to model inputs.

All functions are pure and operate on plain numpy arrays shaped
(channels, time) or (time,).  Filtering is zero-phase (forward-backward FIR),
resampling is band-limit-then-linear-interpolate, and the patch utilities
produce the exact layouts the two encoders consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import filtfilt, firwin

from .errors import ConfigError, DataError, ShapeError

FIR_TAPS = 101
STANDARDIZE_EPS = 1e-8


@dataclass
class TimeSeriesSample:
    """One labeled multichannel signal with subject identity."""

    data: np.ndarray          # (C, T) float
    sample_rate_hz: float
    label: int
    subject_id: str

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data))
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DataError(f"sample must be (C, T) with C,T >= 1, got {self.data.shape}")
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")


@dataclass
class PatchGrid:
    """Non-overlapping (C, p, t) re-layout of a sample's leading p*t columns."""

    data: np.ndarray
    patch_len: int

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_patches(self):
        return self.data.shape[1]


@dataclass
class PatchStats:
    """Per-window mean and population standard deviation of the raw series."""

    mu: np.ndarray
    sigma: np.ndarray


def _lowpass_taps(sample_rate_hz: float, cutoff_hz: float) -> np.ndarray:
    # Hamming-windowed sinc, unit DC gain.
    return firwin(FIR_TAPS, cutoff_hz, window="hamming", fs=sample_rate_hz)


def lowpass_filter(x: np.ndarray, sample_rate_hz: float, cutoff_hz: float = 30.0) -> np.ndarray:
    """Zero-phase FIR low-pass; output length equals input length."""
    if cutoff_hz >= sample_rate_hz / 2.0:
        raise ConfigError(
            f"cutoff {cutoff_hz} Hz must be below the Nyquist rate {sample_rate_hz / 2.0} Hz")
    x = np.asarray(x, dtype=np.float64)
    taps = _lowpass_taps(sample_rate_hz, cutoff_hz)
    padlen = min(3 * FIR_TAPS, x.shape[-1] - 1)
    return filtfilt(taps, [1.0], x, axis=-1, padlen=padlen)


def resample(x: np.ndarray, from_hz: float, to_hz: float) -> np.ndarray:
    """Band-limit (when downsampling) then linearly interpolate onto a new grid."""
    if from_hz <= 0 or to_hz <= 0:
        raise ConfigError(f"sample rates must be positive, got {from_hz} and {to_hz}")
    x = np.asarray(x, dtype=np.float64)
    if from_hz == to_hz:
        return x.copy()
    n_in = x.shape[-1]
    n_out = int(round(n_in * to_hz / from_hz))
    if to_hz < from_hz:
        cutoff = 0.45 * to_hz
        if cutoff < from_hz / 2.0:
            x = lowpass_filter(x, from_hz, cutoff)
    t_old = np.arange(n_in) / from_hz
    t_new = np.arange(n_out) / to_hz
    if x.ndim == 1:
        return np.interp(t_new, t_old, x)
    return np.stack([np.interp(t_new, t_old, row) for row in x])


def epoch_segment(record: np.ndarray, labels, sample_rate_hz: float,
                  subject_id: str = "", epoch_s: float = 30.0) -> list[TimeSeriesSample]:
    """Cut a long record into fixed-length labeled samples; trailing remainder dropped."""
    record = np.atleast_2d(np.asarray(record))
    labels = list(labels)
    samples_per_epoch = int(round(epoch_s * sample_rate_hz))
    n_epochs = record.shape[-1] // samples_per_epoch
    if len(labels) != n_epochs:
        raise DataError(f"{len(labels)} labels for {n_epochs} epochs")
    out = []
    for i in range(n_epochs):
        chunk = record[:, i * samples_per_epoch:(i + 1) * samples_per_epoch]
        out.append(TimeSeriesSample(chunk.copy(), sample_rate_hz, int(labels[i]), subject_id))
    return out


def partition_patches(x, patch_len: int = 200) -> PatchGrid:
    """Reshape the first p*t columns into (C, p, t) windows, p = floor(T/t)."""
    data = x.data if isinstance(x, TimeSeriesSample) else np.atleast_2d(np.asarray(x))
    n_channels, length = data.shape
    if length < patch_len:
        raise ShapeError(f"series length {length} is shorter than one patch of {patch_len}")
    p = length // patch_len
    grid = data[:, :p * patch_len].reshape(n_channels, p, patch_len).copy()
    return PatchGrid(grid, patch_len)


def resize_to_length(x: np.ndarray, target_len: int = 512) -> np.ndarray:
    """Linear interpolation onto ``target_len`` uniform points over the same support."""
    if target_len % 32 != 0:
        raise ConfigError(f"target length must be divisible by 32, got {target_len}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"need at least 2 samples to resize, got {n}")
    old = np.linspace(0.0, 1.0, n)
    new = np.linspace(0.0, 1.0, target_len)
    if x.ndim == 1:
        return np.interp(new, old, x)
    return np.stack([np.interp(new, old, row) for row in x])


def instance_standardize(x: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Per-channel zero mean / unit variance over time.

    Divides by max(std, eps) rather than sqrt(var + eps) so the result is
    exactly scale-equivariant: standardize(a*x) == standardize(x) whenever the
    channel deviations stay above the guard.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ShapeError(f"need at least 2 time points, got shape {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    sigma = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.maximum(sigma, eps)


def first_difference(x: np.ndarray) -> np.ndarray:
    """Length-preserving first difference, zero-padded at the head."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ShapeError(f"need at least 2 time points, got shape {x.shape}")
    out = np.zeros_like(x)
    out[..., 1:] = x[..., 1:] - x[..., :-1]
    return out


def patch_stats(raw: np.ndarray, n_windows: int = 32) -> PatchStats:
    """Mean and population std over contiguous equal windows of the raw series."""
    raw = np.asarray(raw, dtype=np.float64)
    length = raw.shape[-1]
    if length % n_windows != 0:
        raise ShapeError(f"length {length} is not divisible by {n_windows} windows")
    folded = raw.reshape(*raw.shape[:-1], n_windows, length // n_windows)
    return PatchStats(folded.mean(axis=-1), folded.std(axis=-1))
