"""Patch datasets: binary container, band statistics and a synthetic generator.

Container layout (little-endian)::

    "LCZP"  version:u16=1  count:u32  h:u32=32  w:u32=32  c:u32=10
    count x ( h*w*c float32 in H, W, C row-major order, label:u8 in 1..17 )
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

PATCH_H = 32
PATCH_W = 32
NUM_BANDS = 10
NUM_CLASSES = 17

CONTAINER_MAGIC = b"LCZP"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")

# Sentinel-2 bands in container channel order: (name, central wavelength nm, native GSD m, description)
SENTINEL2_BANDS = (
    ("B2", 490, 10, "Blue"),
    ("B3", 560, 10, "Green"),
    ("B4", 665, 10, "Red"),
    ("B5", 705, 20, "VNIR"),
    ("B6", 740, 20, "VNIR"),
    ("B7", 783, 20, "VNIR"),
    ("B8", 842, 10, "VNIR"),
    ("B8a", 865, 20, "VNIR"),
    ("B11", 1610, 20, "SWIR"),
    ("B12", 2190, 20, "SWIR"),
)

LCZ_NAMES = (
    "1 compact high-rise", "2 compact mid-rise", "3 compact low-rise", "4 open high-rise",
    "5 open mid-rise", "6 open low-rise", "7 lightweight low-rise", "8 large low-rise",
    "9 sparsely built", "10 heavy industry", "A dense trees", "B scattered trees",
    "C bush, scrub", "D low plants", "E bare rock or paved", "F bare soil or sand", "G water",
)


class DataFormatError(ValueError):
    """Malformed container, raster or sidecar file."""


@dataclass
class PatchDataset:
    patches: np.ndarray  # (count, 32, 32, 10) float32
    labels: np.ndarray  # (count,) uint8 in 1..17
    bands: tuple = field(default=SENTINEL2_BANDS, repr=False)

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.patches.ndim != 4 or self.patches.shape[1:] != (PATCH_H, PATCH_W, NUM_BANDS):
            raise DataFormatError(f"patches must be (count, 32, 32, 10), got {self.patches.shape}")
        if self.labels.shape != (self.patches.shape[0],):
            raise DataFormatError("one label per patch required")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > NUM_CLASSES):
            raise DataFormatError("labels must lie in 1..17")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "PatchDataset":
        return PatchDataset(self.patches[idx], self.labels[idx])

    def as_nchw(self) -> np.ndarray:
        """Model input layout (count, 10, 32, 32)."""
        return np.ascontiguousarray(self.patches.transpose(0, 3, 1, 2))


_RECORD = np.dtype([("patch", "<f4", (PATCH_H, PATCH_W, NUM_BANDS)), ("label", "u1")])


def write_container(ds: PatchDataset, path: Union[str, Path]) -> None:
    if len(ds) > 0xFFFFFFFF:
        raise DataFormatError("too many patches for a u32 count")
    rec = np.empty(len(ds), dtype=_RECORD)
    rec["patch"] = ds.patches
    rec["label"] = ds.labels
    with open(path, "wb") as fh:
        fh.write(pack_container_header(len(ds)))
        fh.write(rec.tobytes())


def pack_container_header(count: int) -> bytes:
    return _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, count, PATCH_H, PATCH_W, NUM_BANDS)


def read_container(path: Union[str, Path]) -> PatchDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DataFormatError(f"{path}: file too short for a container header")
    magic, version, count, h, w, c = _HEADER.unpack_from(buf)
    if magic != CONTAINER_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    if (h, w, c) != (PATCH_H, PATCH_W, NUM_BANDS):
        raise DataFormatError(f"{path}: patch geometry {h}x{w}x{c} is not 32x32x10")
    expected = _HEADER.size + count * _RECORD.itemsize
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "has trailing bytes"
        raise DataFormatError(f"{path}: file {kind} ({len(buf)} bytes, expected {expected})")
    rec = np.frombuffer(buf, dtype=_RECORD, count=count, offset=_HEADER.size)
    labels = rec["label"].copy()
    if count and (labels.min() < 1 or labels.max() > NUM_CLASSES):
        raise DataFormatError(f"{path}: label out of range 1..17")
    return PatchDataset(rec["patch"].copy(), labels)


def class_distribution(ds: PatchDataset) -> np.ndarray:
    """Label histogram; index k holds the count of LCZ k+1."""
    return np.bincount(ds.labels.astype(np.int64) - 1, minlength=NUM_CLASSES)[:NUM_CLASSES]


# -- band statistics ----------------------------------------------------------


@dataclass
class BandStats:
    mean: np.ndarray  # (10,) float64
    std: np.ndarray  # (10,) float64

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise DataFormatError("band mean and std must have equal length")
        if np.any(self.std <= 0):
            raise DataFormatError("band standard deviations must be positive")

    @classmethod
    def identity(cls, bands: int = NUM_BANDS) -> "BandStats":
        return cls(np.zeros(bands), np.ones(bands))


def fit_band_stats(train: PatchDataset) -> BandStats:
    """Per-band mean and (population) standard deviation, accumulated in float64."""
    if len(train) == 0:
        raise DataFormatError("cannot fit band statistics on an empty dataset")
    flat = train.patches.reshape(-1, NUM_BANDS).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std == 0):
        bad = [SENTINEL2_BANDS[i][0] for i in np.flatnonzero(std == 0)]
        raise DataFormatError(f"zero-variance band(s): {', '.join(bad)}")
    return BandStats(mean, std)


def standardize_array(x: np.ndarray, stats: BandStats, channel_axis: int = -1) -> np.ndarray:
    shape = [1] * x.ndim
    shape[channel_axis] = -1
    m = stats.mean.reshape(shape)
    s = stats.std.reshape(shape)
    return ((x.astype(np.float64) - m) / s).astype(np.float32)


def standardize(ds: PatchDataset, stats: BandStats) -> PatchDataset:
    return PatchDataset(standardize_array(ds.patches, stats), ds.labels.copy())


def destandardize(ds: PatchDataset, stats: BandStats) -> PatchDataset:
    x = ds.patches.astype(np.float64) * stats.std + stats.mean
    return PatchDataset(x.astype(np.float32), ds.labels.copy())


def write_band_stats(stats: BandStats, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["band", "mean", "std"])
        for (name, *_), m, s in zip(SENTINEL2_BANDS, stats.mean, stats.std):
            wr.writerow([name, repr(float(m)), repr(float(s))])


def read_band_stats(path: Union[str, Path]) -> BandStats:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return BandStats([float(r["mean"]) for r in rows], [float(r["std"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed band statistics ({exc})") from exc


# -- synthetic data -----------------------------------------------------------

_PATTERN_SEED = 0x5EED


def class_prototypes(separation: float, n_classes: int = NUM_CLASSES,
                     pattern_seed: int = _PATTERN_SEED) -> tuple[np.ndarray, np.ndarray]:
    """Per-class band means and zero-mean spatial patterns shared by every sample seed.

    Band-mean vectors are scaled so the closest pair of classes is exactly
    ``separation`` apart.  Patterns are sums of two sinusoids whose periods
    divide 32, so any 32-pixel-aligned crop of a larger tile sees the same
    pattern.  Both scale with ``separation``: at 0 the classes coincide.
    Returns ``(means (K, 10), patterns (K, 32, 32, 10))``.
    """
    rng = np.random.default_rng(pattern_seed)
    dirs = rng.normal(size=(n_classes, NUM_BANDS))
    d = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=-1)
    dmin = d[np.triu_indices(n_classes, 1)].min()
    means = dirs / dmin * separation

    yy, xx = np.mgrid[0:PATCH_H, 0:PATCH_W].astype(np.float64)
    patterns = np.empty((n_classes, PATCH_H, PATCH_W, NUM_BANDS))
    for k in range(n_classes):
        fy, fx = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=(2, NUM_BANDS))
        amp = rng.uniform(0.5, 1.0, size=(2, NUM_BANDS))
        wave_y = np.sin(2 * np.pi * fy * yy[..., None] / PATCH_H + phase[0])
        wave_x = np.sin(2 * np.pi * fx * xx[..., None] / PATCH_W + phase[1])
        patterns[k] = amp[0] * wave_y + amp[1] * wave_x
    patterns *= 0.5 * separation
    return means, patterns


def synth_generate(seed: int, per_class: int, separation: float) -> PatchDataset:
    """``per_class`` patches per LCZ: class mean + class pattern + unit Gaussian noise."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    means, patterns = class_prototypes(separation)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(1, NUM_CLASSES + 1), per_class)
    rng.shuffle(labels)
    base = means[labels - 1][:, None, None, :] + patterns[labels - 1]
    noise = rng.standard_normal(base.shape)
    return PatchDataset((base + noise).astype(np.float32), labels.astype(np.uint8))


def synth_tile(label: int, height: int, width: int, separation: float,
               rng: np.random.Generator) -> np.ndarray:
    """A (10, height, width) tile of one class, periodic pattern tiled with fresh noise."""
    means, patterns = class_prototypes(separation)
    reps = (-(-height // PATCH_H), -(-width // PATCH_W), 1)
    pat = np.tile(patterns[label - 1], reps)[:height, :width]
    tile = means[label - 1] + pat + rng.standard_normal((height, width, NUM_BANDS))
    return tile.transpose(2, 0, 1).astype(np.float32)


def nearest_centroid_accuracy(train: PatchDataset, test: PatchDataset) -> float:
    """Accuracy of classifying per-patch band means by the closest class centroid."""
    ftr = train.patches.mean(axis=(1, 2), dtype=np.float64)
    fte = test.patches.mean(axis=(1, 2), dtype=np.float64)
    classes = np.unique(train.labels)
    cents = np.stack([ftr[train.labels == k].mean(axis=0) for k in classes])
    d = ((fte[:, None, :] - cents[None]) ** 2).sum(-1)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == test.labels))


# -- import from the So2Sat LCZ42 HDF5 layout ---------------------------------


def import_so2sat_h5(h5_path: Union[str, Path], out_path: Union[str, Path],
                     chunk: int = 4096, limit: Optional[int] = None) -> int:
    """Convert an So2Sat LCZ42 HDF5 split (``sen2`` N x 32 x 32 x 10, ``label`` one-hot N x 17).

    Values pass through unchanged.  Returns the number of patches written.
    """
    import h5py

    with h5py.File(h5_path, "r") as h5:
        if "sen2" not in h5 or "label" not in h5:
            raise DataFormatError(f"{h5_path}: expected datasets 'sen2' and 'label'")
        sen2, onehot = h5["sen2"], h5["label"]
        if sen2.shape[1:] != (PATCH_H, PATCH_W, NUM_BANDS) or onehot.shape[1:] != (NUM_CLASSES,):
            raise DataFormatError(f"{h5_path}: unexpected shapes {sen2.shape} / {onehot.shape}")
        n = sen2.shape[0] if limit is None else min(limit, sen2.shape[0])
        with open(out_path, "wb") as fh:
            fh.write(pack_container_header(n))
            for s in range(0, n, chunk):
                e = min(n, s + chunk)
                rec = np.empty(e - s, dtype=_RECORD)
                rec["patch"] = np.asarray(sen2[s:e], dtype=np.float32)
                lab = np.asarray(onehot[s:e])
                rec["label"] = np.argmax(lab, axis=1) + 1
                fh.write(rec.tobytes())
    return n
