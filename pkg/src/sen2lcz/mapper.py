"""Sliding-window LCZ mapping of full scenes and palette rendering.

Grid cell ``(r, c)`` is classified from the 32 x 32 window whose top-left
pixel is ``(r * step, c * step)``; the label belongs to the window centre,
``origin + (r, c) * step`` with ``origin = 16``.  Only windows lying fully
inside the scene are evaluated, which yields
``rows = (H - 32) // step + 1`` (and likewise for columns).
"""

from __future__ import annotations

import csv
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataio import NUM_BANDS, PATCH_H, PATCH_W, BandStats, DataFormatError, standardize_array
from .model import Sen2LCZNet
from .tensor import no_grad

RASTER_MAGIC = b"LCZR"
RASTER_VERSION = 1
_RASTER_HEADER = struct.Struct("<4sHIII")
WINDOW = PATCH_H
ORIGIN = WINDOW // 2

# Conventional LCZ legend colours (label 0 = not classified, transparent).
DEFAULT_PALETTE = {
    0: (0, 0, 0, 0),
    1: (140, 0, 0, 255), 2: (209, 0, 0, 255), 3: (255, 0, 0, 255), 4: (191, 77, 0, 255),
    5: (255, 102, 0, 255), 6: (255, 153, 85, 255), 7: (250, 238, 5, 255), 8: (188, 188, 188, 255),
    9: (255, 204, 170, 255), 10: (85, 85, 85, 255), 11: (0, 106, 0, 255), 12: (0, 170, 0, 255),
    13: (100, 133, 37, 255), 14: (185, 219, 121, 255), 15: (0, 0, 0, 255), 16: (251, 247, 174, 255),
    17: (106, 106, 255, 255),
}


@dataclass
class SceneRaster:
    bands: np.ndarray  # (10, H, W) float32
    gsd_m: float = 10.0

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float32)
        if self.bands.ndim != 3 or self.bands.shape[0] != NUM_BANDS:
            raise DataFormatError(f"scene must have shape (10, H, W), got {self.bands.shape}")

    @property
    def height(self) -> int:
        return self.bands.shape[1]

    @property
    def width(self) -> int:
        return self.bands.shape[2]


@dataclass
class LabelRaster:
    labels: np.ndarray  # (rows, cols) uint8, 0 = not classified
    step: int
    origin: int = ORIGIN
    gsd_m: float = 10.0

    @property
    def cell_size_m(self) -> float:
        return self.step * self.gsd_m

    def metadata(self) -> dict:
        rows, cols = self.labels.shape
        return {"rows": rows, "cols": cols, "step_px": self.step, "origin_px": self.origin,
                "window_px": WINDOW, "gsd_m": self.gsd_m, "cell_size_m": self.cell_size_m}


def grid_shape(height: int, width: int, step: int) -> tuple[int, int]:
    if step < 1:
        raise ValueError("step must be >= 1")
    if height < WINDOW or width < WINDOW:
        raise ValueError(f"scene {height}x{width} is smaller than the {WINDOW}x{WINDOW} window")
    return (height - WINDOW) // step + 1, (width - WINDOW) // step + 1


def slide_map(scene: SceneRaster, model: Sen2LCZNet, stats: BandStats, step: int = 10,
              batch_size: int = 256, workers: int = 1) -> LabelRaster:
    """Classify every grid position of ``scene``; result is independent of batching and workers."""
    if scene.bands.shape[0] != model.config.in_channels:
        raise DataFormatError(f"scene has {scene.bands.shape[0]} bands, model expects {model.config.in_channels}")
    if stats.mean.shape != (scene.bands.shape[0],):
        raise DataFormatError("band statistics do not match the scene band count")
    rows, cols = grid_shape(scene.height, scene.width, step)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    std = standardize_array(scene.bands, stats, channel_axis=0).astype(model.dtype, copy=False)
    windows = sliding_window_view(std, (WINDOW, WINDOW), axis=(1, 2))  # (C, H-31, W-31, 32, 32)
    rr, cc = np.meshgrid(np.arange(rows) * step, np.arange(cols) * step, indexing="ij")
    ys, xs = rr.reshape(-1), cc.reshape(-1)
    n = ys.size

    def run(start: int) -> np.ndarray:
        sel = slice(start, min(n, start + batch_size))
        batch = np.ascontiguousarray(windows[:, ys[sel], xs[sel]].transpose(1, 0, 2, 3))
        with no_grad():
            return model.predict(batch, batch_size=batch.shape[0])

    starts = range(0, n, batch_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    labels = np.concatenate(parts).astype(np.uint8).reshape(rows, cols)
    return LabelRaster(labels, step, ORIGIN, scene.gsd_m)


# -- raster and grid files --------------------------------------------------


def write_raster(scene: SceneRaster, path: Union[str, Path]) -> None:
    c, h, w = scene.bands.shape
    with open(path, "wb") as fh:
        fh.write(_RASTER_HEADER.pack(RASTER_MAGIC, RASTER_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(scene.bands, dtype="<f4").tobytes())


def read_raster(path: Union[str, Path], gsd_m: float = 10.0) -> SceneRaster:
    buf = Path(path).read_bytes()
    if len(buf) < _RASTER_HEADER.size:
        raise DataFormatError(f"{path}: file too short for a raster header")
    magic, version, h, w, c = _RASTER_HEADER.unpack_from(buf)
    if magic != RASTER_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != RASTER_VERSION:
        raise DataFormatError(f"{path}: unsupported raster version {version}")
    if c != NUM_BANDS:
        raise DataFormatError(f"{path}: raster has {c} bands, expected {NUM_BANDS}")
    expected = _RASTER_HEADER.size + 4 * h * w * c
    if len(buf) != expected:
        raise DataFormatError(f"{path}: raster size {len(buf)} bytes, expected {expected}")
    bands = np.frombuffer(buf, dtype="<f4", offset=_RASTER_HEADER.size).reshape(c, h, w)
    return SceneRaster(bands.astype(np.float32), gsd_m)


def write_label_grid(grid: LabelRaster, path: Union[str, Path], metadata_path: Optional[Union[str, Path]] = None) -> None:
    """Text grid: ``rows cols`` on the first line, then one line of labels per row."""
    rows, cols = grid.labels.shape
    lines = [f"{rows} {cols}"] + [" ".join(str(int(v)) for v in row) for row in grid.labels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if metadata_path is not None:
        Path(metadata_path).write_text(json.dumps(grid.metadata(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def read_label_grid(path: Union[str, Path]) -> np.ndarray:
    tokens = Path(path).read_text(encoding="utf-8").split()
    try:
        rows, cols = int(tokens[0]), int(tokens[1])
        vals = np.array([int(t) for t in tokens[2:]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed label grid") from exc
    if vals.size != rows * cols:
        raise DataFormatError(f"{path}: expected {rows * cols} labels, found {vals.size}")
    if vals.size and (vals.min() < 0 or vals.max() > 17):
        raise DataFormatError(f"{path}: labels must lie in 0..17")
    return vals.reshape(rows, cols).astype(np.uint8)


# -- palette and PNG ----------------------------------------------------------


def read_palette(path: Union[str, Path]) -> dict[int, tuple[int, int, int, int]]:
    """CSV ``label,r,g,b[,a]``; a missing alpha means opaque except for label 0."""
    pal = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip() or row[0].strip().lower() == "label":
                continue
            try:
                vals = [int(v) for v in row]
            except ValueError as exc:
                raise DataFormatError(f"{path}: malformed palette row {row}") from exc
            if len(vals) not in (4, 5) or any(not 0 <= v <= 255 for v in vals[1:]):
                raise DataFormatError(f"{path}: malformed palette row {row}")
            label, rgb = vals[0], vals[1:4]
            alpha = vals[4] if len(vals) == 5 else (0 if label == 0 else 255)
            pal[label] = (*rgb, alpha)
    return pal


def write_palette(palette: dict, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["label", "r", "g", "b", "a"])
        for k in sorted(palette):
            wr.writerow([k, *palette[k]])


def _palette_table(palette: dict) -> np.ndarray:
    missing = [k for k in range(18) if k not in palette]
    if missing:
        raise DataFormatError(f"palette lacks entries for labels {missing}")
    return np.array([palette[k] if len(palette[k]) == 4 else (*palette[k], 255) for k in range(18)],
                    dtype=np.uint8)


def render_png(labels, palette: Optional[dict] = None, path: Optional[Union[str, Path]] = None):
    """One RGBA pixel per grid cell; returns the PIL image (and saves it when ``path`` is given)."""
    from PIL import Image

    grid = labels.labels if isinstance(labels, LabelRaster) else np.asarray(labels)
    table = _palette_table(DEFAULT_PALETTE if palette is None else palette)
    img = Image.fromarray(table[grid.astype(np.int64)], mode="RGBA")
    if path is not None:
        img.save(path, format="PNG")
    return img


def decode_png(path: Union[str, Path], palette: Optional[dict] = None) -> np.ndarray:
    """Recover the label grid by inverse palette lookup (colours must be distinct)."""
    from PIL import Image

    table = _palette_table(DEFAULT_PALETTE if palette is None else palette)
    lookup = {tuple(int(v) for v in rgba): k for k, rgba in enumerate(table)}
    if len(lookup) != len(table):
        raise DataFormatError("palette colours are not distinct; PNG cannot be decoded unambiguously")
    rgba = np.asarray(Image.open(path).convert("RGBA"))
    flat = rgba.reshape(-1, 4)
    out = np.empty(flat.shape[0], dtype=np.uint8)
    for i, px in enumerate(map(tuple, flat)):
        try:
            out[i] = lookup[px]
        except KeyError as exc:
            raise DataFormatError(f"pixel colour {px} is not in the palette") from exc
    return out.reshape(rgba.shape[:2])


def synth_mosaic(tile_labels, tile_size: int, separation: float, seed: int) -> tuple[SceneRaster, np.ndarray]:
    """Scene made of square single-class tiles; returns the scene and the per-pixel class map."""
    from .dataio import synth_tile

    tile_labels = np.asarray(tile_labels, dtype=np.int64)
    tr, tc = tile_labels.shape
    rng = np.random.default_rng(seed)
    bands = np.empty((NUM_BANDS, tr * tile_size, tc * tile_size), dtype=np.float32)
    for i in range(tr):
        for j in range(tc):
            bands[:, i * tile_size:(i + 1) * tile_size, j * tile_size:(j + 1) * tile_size] = \
                synth_tile(int(tile_labels[i, j]), tile_size, tile_size, separation, rng)
    truth = np.kron(tile_labels, np.ones((tile_size, tile_size), dtype=np.int64))
    return SceneRaster(bands), truth


def grid_truth(truth: np.ndarray, grid: LabelRaster) -> np.ndarray:
    """Class of the scene pixel at each grid cell's window centre."""
    rows, cols = grid.labels.shape
    ys = grid.origin + np.arange(rows) * grid.step
    xs = grid.origin + np.arange(cols) * grid.step
    return truth[np.ix_(ys, xs)]
