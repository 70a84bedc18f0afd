"""Radar range-azimuth datasets: on-disk format, synthetic generator,
preprocessing into classifier features, and federated partitions.

On-disk layout of a dataset directory::

    manifest.txt        one line per tensor: ``name dim0 [dim1 ...] dtype``
    train.f32           float32, little-endian, row-major, N x 256 x 63
    test.f32            same for the validation split
    train_labels.u8     uint8 class ids in 0..5, length N
    test_labels.u8

The tensor file name is ``<name>.<dtype>``. A converter from the published
``mmwave_data_train`` / ``mmwave_data_test`` / ``label_train`` /
``label_test`` arrays only needs to cast them to these dtypes, flatten the
labels and write the four files plus the manifest.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import N_CLASSES, N_FEATURES

RANGE_BINS = 256
AZIMUTH_BINS = 63
POOL = (4, 3)
POOLED_SHAPE = (RANGE_BINS // POOL[0], AZIMUTH_BINS // POOL[1])

assert POOLED_SHAPE[0] * POOLED_SHAPE[1] == N_FEATURES

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_TENSORS = ("train", "train_labels", "test", "test_labels")

# 2 distances x 3 directions of arrival, as (range bin, azimuth bin).
# Bins map 0.5..11 m and -75..+75 deg; roughly 2.5 m / 5.5 m and -30/0/+30 deg.
SYNTHETIC_CENTERS = (
    (49, 19), (49, 31), (49, 43),
    (122, 19), (122, 31), (122, 43),
)


class DatasetError(ValueError):
    """Raised when a dataset directory is missing, truncated or inconsistent."""


@dataclass
class RadarDataset:
    train_maps: np.ndarray
    train_labels: np.ndarray
    test_maps: np.ndarray
    test_labels: np.ndarray

    def __post_init__(self):
        for split in ("train", "test"):
            maps = getattr(self, f"{split}_maps")
            labels = np.asarray(getattr(self, f"{split}_labels")).astype(np.int64).ravel()
            setattr(self, f"{split}_labels", labels)
            if maps.ndim != 3 or maps.shape[1:] != (RANGE_BINS, AZIMUTH_BINS):
                raise DatasetError(f"{split} maps have shape {maps.shape}, expected N x 256 x 63")
            if maps.shape[0] != labels.shape[0]:
                raise DatasetError(f"{split}: {maps.shape[0]} maps but {labels.shape[0]} labels")
            if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
                raise DatasetError(f"{split} labels outside 0..{N_CLASSES - 1}")
            if not np.isfinite(maps).all():
                raise DatasetError(f"{split} maps contain NaN or Inf")


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    scale: float

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class FederatedPartition:
    indices: list[np.ndarray]
    allowed_classes: list[frozenset[int]]
    mode: str
    excluded: list[int | None] = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return len(self.indices)


# -- file format ---------------------------------------------------------------

def save_radar(d: RadarDataset, path: str | os.PathLike) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "train": (d.train_maps, "f32"),
        "train_labels": (d.train_labels, "u8"),
        "test": (d.test_maps, "f32"),
        "test_labels": (d.test_labels, "u8"),
    }
    lines = []
    for name in _TENSORS:
        arr, dt = arrays[name]
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[dt])
        arr.tofile(out / f"{name}.{dt}")
        lines.append(" ".join([name, *map(str, arr.shape), dt]))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def _read_manifest(path: Path) -> dict[str, tuple[tuple[int, ...], str]]:
    manifest = path / "manifest.txt"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    entries = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) < 3 or tokens[-1] not in _DTYPES:
            raise DatasetError(f"{manifest}:{lineno}: expected 'name dims... dtype', got {line!r}")
        try:
            shape = tuple(int(t) for t in tokens[1:-1])
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: bad shape in {line!r}") from None
        entries[tokens[0]] = (shape, tokens[-1])
    missing = [n for n in _TENSORS if n not in entries]
    if missing:
        raise DatasetError(f"{manifest}: no entry for {', '.join(missing)}")
    return entries


def _read_tensor(path: Path, name: str, shape: tuple[int, ...], dt: str) -> np.ndarray:
    f = path / f"{name}.{dt}"
    if not f.is_file():
        raise DatasetError(f"missing tensor file: {f}")
    dtype = _DTYPES[dt]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = f.stat().st_size
    if actual != expected:
        raise DatasetError(f"{f}: size {actual} B does not match manifest shape {shape} ({expected} B)")
    return np.fromfile(f, dtype=dtype).reshape(shape)


def load_radar(path: str | os.PathLike) -> RadarDataset:
    """Read a dataset directory, validating it against its manifest."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"dataset directory not found: {path}")
    entries = _read_manifest(path)
    arrays = {n: _read_tensor(path, n, *entries[n]) for n in _TENSORS}
    for split in ("train", "test"):
        if arrays[split].ndim != 3:
            raise DatasetError(f"{split}: manifest shape {arrays[split].shape} is not N x 256 x 63")
    return RadarDataset(
        arrays["train"], arrays["train_labels"], arrays["test"], arrays["test_labels"]
    )


# -- synthetic data ------------------------------------------------------------

def _blob(cr, ca, std):
    r = np.arange(RANGE_BINS, dtype=np.float64)[:, None]
    a = np.arange(AZIMUTH_BINS, dtype=np.float64)[None, :]
    return np.exp(-((r - cr) ** 2 + (a - ca) ** 2) / (2.0 * std**2))


def _synthetic_split(per_class, rng, blob_std, noise_std, jitter, clutter, clutter_amplitude):
    maps = np.empty((per_class * N_CLASSES, RANGE_BINS, AZIMUTH_BINS), dtype=np.float32)
    labels = np.repeat(np.arange(N_CLASSES), per_class)
    for i, c in enumerate(labels):
        cr, ca = SYNTHETIC_CENTERS[c]
        m = _blob(cr + jitter[0] * rng.standard_normal(), ca + jitter[1] * rng.standard_normal(), blob_std)
        for _ in range(clutter):
            amp = rng.uniform(*clutter_amplitude)
            m += amp * _blob(rng.uniform(0, RANGE_BINS), rng.uniform(0, AZIMUTH_BINS), blob_std)
        m += noise_std * rng.standard_normal((RANGE_BINS, AZIMUTH_BINS))
        maps[i] = np.abs(m)
    return maps, labels


def gen_synthetic(
    per_class: int,
    seed: int,
    *,
    blob_std: float = 8.0,
    noise_std: float = 0.1,
    jitter: tuple[float, float] = (3.0, 2.0),
    clutter: int = 4,
    clutter_amplitude: tuple[float, float] = (0.5, 1.0),
) -> RadarDataset:
    """Gaussian-blob range-azimuth maps, one blob position per class.

    Each map holds a unit-amplitude isotropic blob at its class center
    (:data:`SYNTHETIC_CENTERS`), displaced per sample by a zero-mean Gaussian
    jitter of ``jitter`` = (range, azimuth) bins. ``clutter`` weaker
    reflectors of the same width, with amplitudes uniform in
    ``clutter_amplitude``, land at uniformly random positions independent of
    the class, and white noise of std ``noise_std`` is added. The magnitude
    is taken so every value is non-negative.

    Clutter is what makes small shards overfit: a 72-sample shard can latch
    onto chance clutter positions, while the full split still separates the
    classes. It averages out of the class means, so their peaks stay at the
    centers. Train and test splits
    are drawn from independent streams spawned from ``seed``.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    args = (blob_std, noise_std, jitter, clutter, clutter_amplitude)
    train = _synthetic_split(per_class, train_rng, *args)
    test = _synthetic_split(per_class, test_rng, *args)
    return RadarDataset(train[0], train[1], test[0], test[1])


# -- preprocessing -------------------------------------------------------------

def pool_maps(maps: np.ndarray) -> np.ndarray:
    """4x3 average pooling of N x 256 x 63 maps, flattened to N x 1344."""
    n = maps.shape[0]
    pr, pa = POOL
    blocks = np.asarray(maps, dtype=np.float64).reshape(n, POOLED_SHAPE[0], pr, POOLED_SHAPE[1], pa)
    return blocks.mean(axis=(2, 4)).reshape(n, N_FEATURES)


def apply_stats(maps: np.ndarray, labels: np.ndarray, mean: np.ndarray, scale: float) -> FeatureSet:
    feats = (pool_maps(maps) - mean) / scale
    return FeatureSet(feats, np.asarray(labels, dtype=np.int64), mean, scale)


def fit_stats(train_maps: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-feature training mean and the global max-abs scale after removing it."""
    pooled = pool_maps(train_maps)
    mean = pooled.mean(axis=0)
    peak = float(np.abs(pooled - mean).max())
    return mean, (peak if peak > 0 else 1.0)


def preprocess(d: RadarDataset) -> tuple[FeatureSet, FeatureSet]:
    """Pool, remove the training-mean background and rescale both splits.

    Normalisation statistics come from the training split only.
    """
    mean, scale = fit_stats(d.train_maps)
    return (
        apply_stats(d.train_maps, d.train_labels, mean, scale),
        apply_stats(d.test_maps, d.test_labels, mean, scale),
    )


# -- federated partitions ------------------------------------------------------

IID = "iid"
NON_IID = "non-iid"
DEFAULT_FRACTION = {IID: 0.08, NON_IID: 0.03}


def normalize_mode(mode: str) -> str:
    m = mode.strip().lower().replace("_", "-")
    if m in ("iid",):
        return IID
    if m in ("non-iid", "noniid"):
        return NON_IID
    raise ValueError(f"unknown partition mode {mode!r} (expected 'iid' or 'non-iid')")


def partition(
    labels: np.ndarray,
    n_agents: int = 15,
    fraction: float | None = None,
    mode: str = IID,
    seed: int = 0,
) -> FederatedPartition:
    """Draw each agent's local training indices.

    IID agents sample ``round(fraction * N)`` indices uniformly without
    replacement. Non-IID agents first drop one class at random and sample the
    same number of indices from the remaining five classes. Agents sample
    independently, so shards may overlap.
    """
    mode = normalize_mode(mode)
    labels = np.asarray(labels, dtype=np.int64)
    if fraction is None:
        fraction = DEFAULT_FRACTION[mode]
    size = int(round(fraction * labels.shape[0]))
    if size < 1:
        raise ValueError(f"fraction {fraction} of {labels.shape[0]} samples is empty")
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    rng = np.random.default_rng(seed)
    all_classes = frozenset(range(N_CLASSES))
    indices, allowed, excluded = [], [], []
    for _ in range(n_agents):
        if mode == IID:
            if size > labels.shape[0]:
                raise ValueError(f"cannot draw {size} of {labels.shape[0]} samples")
            idx = rng.choice(labels.shape[0], size=size, replace=False)
            allowed.append(all_classes)
            excluded.append(None)
        else:
            drop = int(rng.integers(N_CLASSES))
            pool = np.flatnonzero(labels != drop)
            if pool.shape[0] < size:
                raise ValueError(
                    f"only {pool.shape[0]} samples outside class {drop}, need {size}"
                )
            idx = rng.choice(pool, size=size, replace=False)
            allowed.append(all_classes - {drop})
            excluded.append(drop)
        indices.append(np.sort(idx))
    return FederatedPartition(indices, allowed, mode, excluded)
