"""Dataset file format, synthetic data generation, and subject-wise splits.

A dataset directory holds three files: ``manifest.json`` (shape, rates, label
names, per-sample subject ids), ``data.bin`` (row-major little-endian float32,
n_samples x channels x length), and ``labels.bin`` (little-endian uint32).
Byte lengths are validated on open, so a truncated or mis-described directory
is rejected before anything trains on it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MANIFEST_NAME = "manifest.json"
DATA_NAME = "data.bin"
LABELS_NAME = "labels.bin"


@dataclass
class DatasetManifest:
    n_samples: int
    n_channels: int
    series_length: int
    sample_rate_hz: float
    label_names: list
    subject_ids: list
    dtype: str = "f32le"
    format_version: int = 1

    def __post_init__(self):
        if not self.label_names:
            raise DataError("label_names must be nonempty")
        if len(self.subject_ids) != self.n_samples:
            raise DataError(f"{len(self.subject_ids)} subject ids for {self.n_samples} samples")
        if self.dtype != "f32le":
            raise DataError(f"unsupported dtype tag {self.dtype!r}")

    @property
    def n_classes(self):
        return len(self.label_names)


class Dataset:
    """In-memory dataset: (n, C, T) float32 data, uint32 labels, subject ids."""

    def __init__(self, manifest: DatasetManifest, data: np.ndarray, labels: np.ndarray):
        expected = (manifest.n_samples, manifest.n_channels, manifest.series_length)
        if data.shape != expected:
            raise DataError(f"data shape {data.shape} does not match manifest {expected}")
        if labels.shape != (manifest.n_samples,):
            raise DataError(f"labels shape {labels.shape} does not match manifest")
        if labels.size and labels.max() >= manifest.n_classes:
            raise DataError(f"label {labels.max()} out of range for {manifest.n_classes} classes")
        self.manifest = manifest
        self.data = data
        self.labels = labels
        self.subjects = np.asarray(manifest.subject_ids)

    def __len__(self):
        return self.manifest.n_samples

    @property
    def n_classes(self):
        return self.manifest.n_classes


def save_dataset(out_dir, dataset: Dataset):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = asdict(dataset.manifest)
    (out_dir / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True))
    dataset.data.astype("<f4").tofile(out_dir / DATA_NAME)
    dataset.labels.astype("<u4").tofile(out_dir / LABELS_NAME)


def load_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    manifest_path = in_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {in_dir}")
    manifest = DatasetManifest(**json.loads(manifest_path.read_text()))
    data_path = in_dir / DATA_NAME
    labels_path = in_dir / LABELS_NAME
    expected_bytes = manifest.n_samples * manifest.n_channels * manifest.series_length * 4
    if data_path.stat().st_size != expected_bytes:
        raise DataError(f"{DATA_NAME} holds {data_path.stat().st_size} bytes, "
                        f"manifest requires {expected_bytes}")
    if labels_path.stat().st_size != manifest.n_samples * 4:
        raise DataError(f"{LABELS_NAME} holds {labels_path.stat().st_size} bytes, "
                        f"manifest requires {manifest.n_samples * 4}")
    data = np.fromfile(data_path, dtype="<f4").reshape(
        manifest.n_samples, manifest.n_channels, manifest.series_length)
    labels = np.fromfile(labels_path, dtype="<u4")
    return Dataset(manifest, data, labels)


# -- synthetic generation --------------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for a fully deterministic synthetic classification dataset.

    Every sample is a sum of per-class band sinusoids (random frequency within
    each band, random phase per channel), scaled by a per-subject gain, offset
    by a per-subject baseline, plus Gaussian noise.  Each value is a pure
    function of (seed, subject index, sample index).
    """

    n_subjects: int
    samples_per_subject: int
    n_channels: int
    series_length: int
    sample_rate_hz: float
    class_bands: list                  # per class: list of (low_hz, high_hz, amplitude)
    subject_gain_std: float = 0.1
    subject_shift_std: float = 0.1
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "samples_per_subject", "n_channels",
                     "series_length", "sample_rate_hz"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.class_bands:
            raise ConfigError("need at least one class signature")
        signatures = [tuple(map(tuple, bands)) for bands in self.class_bands]
        if len(set(signatures)) != len(signatures):
            raise ConfigError("class signatures must be pairwise distinct")
        for bands in self.class_bands:
            for low, high, amp in bands:
                if not 0 < low <= high or amp <= 0:
                    raise ConfigError(f"bad band (low={low}, high={high}, amp={amp})")
                if high >= self.sample_rate_hz / 2:
                    raise ConfigError(f"band edge {high} Hz is at or above Nyquist")

    @property
    def n_classes(self):
        return len(self.class_bands)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw)


def gen_synthetic(spec: SynthSpec, out_dir=None) -> Dataset:
    """Materialize the spec; optionally write the dataset directory."""
    n = spec.n_subjects * spec.samples_per_subject
    t = np.arange(spec.series_length) / spec.sample_rate_hz
    data = np.zeros((n, spec.n_channels, spec.series_length), dtype=np.float64)
    labels = np.zeros(n, dtype=np.uint32)
    subject_ids = []
    row = 0
    for subj in range(spec.n_subjects):
        subj_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 10, subj]))
        gain = float(np.exp(spec.subject_gain_std * subj_rng.normal()))
        shift = float(spec.subject_shift_std * subj_rng.normal())
        for m in range(spec.samples_per_subject):
            label = m % spec.n_classes
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 11, subj, m]))
            wave = np.zeros((spec.n_channels, spec.series_length))
            for low, high, amp in spec.class_bands[label]:
                freq = rng.uniform(low, high)
                phases = rng.uniform(0.0, 2.0 * np.pi, size=(spec.n_channels, 1))
                wave += amp * np.sin(2.0 * np.pi * freq * t[None, :] + phases)
            noise = rng.normal(0.0, spec.noise_std, size=wave.shape) if spec.noise_std > 0 else 0.0
            data[row] = wave * gain + shift + noise
            labels[row] = label
            subject_ids.append(f"s{subj:03d}")
            row += 1
    manifest = DatasetManifest(
        n_samples=n,
        n_channels=spec.n_channels,
        series_length=spec.series_length,
        sample_rate_hz=spec.sample_rate_hz,
        label_names=[f"class{k}" for k in range(spec.n_classes)],
        subject_ids=subject_ids,
    )
    dataset = Dataset(manifest, data.astype(np.float32), labels)
    if out_dir is not None:
        save_dataset(out_dir, dataset)
    return dataset


# -- subject-wise splitting ----------------------------------------------------------------


def _unique_subjects(subject_ids) -> list:
    seen = {}
    for s in subject_ids:
        seen.setdefault(s, None)
    return list(seen)


def split_by_subject(subject_ids, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffle subjects, partition by cumulative fraction, return index triples.

    Per-split counts are floors of fraction * subject count (at least one
    subject each); leftover subjects go to train first, then val, then test.
    Every sample of a subject lands in exactly one split.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three positive values summing to 1, got {fractions}")
    subject_ids = np.asarray(subject_ids)
    subjects = _unique_subjects(subject_ids)
    if len(subjects) < 3:
        raise DataError(f"need at least 3 subjects to split, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    counts = [max(int(f * len(subjects)), 1) for f in fractions]
    if sum(counts) > len(subjects):
        counts[0] -= sum(counts) - len(subjects)
    for i in range(len(subjects) - sum(counts)):
        counts[i % 3] += 1
    bounds = np.cumsum(counts)
    groups = (set(shuffled[:bounds[0]]),
              set(shuffled[bounds[0]:bounds[1]]),
              set(shuffled[bounds[1]:bounds[2]]))
    return tuple(np.flatnonzero(np.isin(subject_ids, sorted(g))) for g in groups)


def split_by_subject_ranges(subject_ids, ranges):
    """Assign explicit inclusive subject-id ranges to train/val/test.

    ``ranges`` is three (first_id, last_id) pairs resolved against the sorted
    unique subject ids.  Missing endpoints and overlapping ranges are data
    errors.
    """
    if len(ranges) != 3:
        raise DataError(f"expected three ranges, got {len(ranges)}")
    subject_ids = np.asarray(subject_ids)
    subjects = sorted(_unique_subjects(subject_ids))
    position = {s: i for i, s in enumerate(subjects)}
    groups = []
    for first, last in ranges:
        if first not in position or last not in position:
            missing = first if first not in position else last
            raise DataError(f"range endpoint {missing!r} is not a subject of this dataset")
        lo, hi = position[first], position[last]
        if lo > hi:
            raise DataError(f"range ({first!r}, {last!r}) is reversed")
        groups.append(set(subjects[lo:hi + 1]))
    for i in range(3):
        for j in range(i + 1, 3):
            shared = groups[i] & groups[j]
            if shared:
                raise DataError(f"ranges overlap on subjects {sorted(shared)}")
    return tuple(np.flatnonzero(np.isin(subject_ids, sorted(g))) for g in groups)


def check_split_leakage(subject_ids, index_triple):
    """Raise DataError when any subject contributes samples to two splits."""
    subject_ids = np.asarray(subject_ids)
    names = ("train", "val", "test")
    sets = [set(subject_ids[np.asarray(idx, dtype=np.int64)]) for idx in index_triple]
    for i in range(3):
        for j in range(i + 1, 3):
            shared = sets[i] & sets[j]
            if shared:
                raise DataError(f"subjects {sorted(shared)} leak between "
                                f"{names[i]} and {names[j]} splits")


# -- split views with access audit --------------------------------------------------------


class SplitView:
    """Read-audited view of one split; every read bumps a shared order counter."""

    def __init__(self, data, labels, subjects, indices, counter):
        self._data = data
        self._labels = labels
        self.indices = np.asarray(indices, dtype=np.int64)
        self.subjects = np.unique(subjects[self.indices]) if len(self.indices) else np.array([])
        self.reads = 0
        self.first_read_order = None
        self._counter = counter

    def __len__(self):
        return len(self.indices)

    def _bump(self):
        self._counter[0] += 1
        self.reads += 1
        if self.first_read_order is None:
            self.first_read_order = self._counter[0]
        return self._counter[0]

    def take(self, local_idx):
        self._bump()
        rows = self.indices[np.asarray(local_idx, dtype=np.int64)]
        return self._data[rows], self._labels[rows].astype(np.int64)

    def take_all(self):
        return self.take(np.arange(len(self)))

    @property
    def labels(self):
        self._bump()
        return self._labels[self.indices].astype(np.int64)


class Splits:
    """Train/val/test views over one dataset with a shared read-order counter."""

    def __init__(self, dataset: Dataset, index_triple):
        check_split_leakage(dataset.subjects, index_triple)
        self._counter = [0]
        self.n_classes = dataset.n_classes
        self.train = SplitView(dataset.data, dataset.labels, dataset.subjects,
                               index_triple[0], self._counter)
        self.val = SplitView(dataset.data, dataset.labels, dataset.subjects,
                             index_triple[1], self._counter)
        self.test = SplitView(dataset.data, dataset.labels, dataset.subjects,
                              index_triple[2], self._counter)

    def read_counter(self):
        return self._counter[0]
