"""Command-line entry point: ``sen2lcz {train,evaluate,map,gradcheck,params,synth,import}``.

Every subcommand reads one flat ``key = value`` config file (``#`` starts a
comment) and accepts ``--key value`` overrides for each :class:`RunConfig`
field.  Exit codes: 0 success, 2 config error, 3 data error, 4 verification
failure, 1 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio, mapper, metrics
from .model import (CheckpointError, ConfigError, ModelConfig, build, count_parameters, load_checkpoint,
                    save_checkpoint)
from .training import TrainConfig, TrainingDiverged, train
from .verify import run_gradcheck_suite

log = logging.getLogger("sen2lcz")

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

MODEL_KEYS = ("f", "N", "fusion", "pooling", "dropout_rate", "fusion_loss")
TRAIN_KEYS = ("batch_size", "lr0", "lr_halving_period", "patience", "max_epochs", "class_weighting",
              "seed", "stop_at_train_acc")
ARCH_KEYS = ("f", "N", "fusion", "pooling")  # must agree between config and checkpoint


class DataError(RuntimeError):
    """Input file missing or unreadable."""


@dataclass
class RunConfig:
    # architecture
    f: int = 16
    N: int = 4
    fusion: bool = True
    pooling: str = "double"
    dropout_rate: float = 0.2
    fusion_loss: str = "mean-prob"
    # training
    batch_size: int = 32
    lr0: float = 2e-2
    lr_halving_period: int = 5
    patience: int = 40
    max_epochs: int = 300
    class_weighting: bool = False
    stop_at_train_acc: Optional[float] = None
    seed: int = 0
    workers: int = 1
    standardize: bool = True
    # data and model files
    train_data: Optional[str] = None
    val_data: Optional[str] = None
    test_data: Optional[str] = None
    checkpoint: str = "model.s2lz"
    history: str = "history.csv"
    band_stats: Optional[str] = None
    # evaluation
    weights: Optional[str] = None
    metrics: str = "metrics.csv"
    confusion: str = "confusion.csv"
    eval_batch_size: int = 256
    # mapping
    raster: Optional[str] = None
    palette: Optional[str] = None
    step: int = 10
    map_batch_size: int = 256
    grid: str = "labels.txt"
    grid_meta: str = "labels.json"
    png: str = "labels.png"
    # synthetic data
    out_dir: str = "synth"
    per_class: int = 40
    val_per_class: int = 20
    test_per_class: int = 20
    separation: float = 6.0
    mosaic_rows: int = 0
    mosaic_cols: int = 0
    tile_size: int = 64
    # gradient check
    gradcheck_model: bool = True
    # HDF5 import
    h5: Optional[str] = None
    import_out: str = "imported.lczp"
    import_limit: Optional[int] = None

    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in TRAIN_KEYS})

    def validate(self) -> None:
        for name in ("workers", "step", "map_batch_size", "eval_batch_size", "per_class", "tile_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("val_per_class", "test_per_class", "mosaic_rows", "mosaic_cols"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.separation < 0:
            raise ConfigError("separation must be non-negative")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.model_config()
        self.train_config()


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "explicit"}
_HINTS = typing.get_type_hints(RunConfig)


def _base_type(name: str):
    hint = _HINTS[name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return (args[0] if args else hint), type(None) in typing.get_args(hint)


def parse_value(name: str, text: str):
    """Convert the string form of a config value to the field's type."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    typ, optional = _base_type(name)
    text = text.strip()
    if optional and text.lower() in ("", "none", "null"):
        return None
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as {typ.__name__}") from exc
    return text


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, val)
    return values


def make_config(file: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the config file, then overrides; records which keys were set explicitly."""
    values = read_config_file(file) if file else {}
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    cfg = RunConfig(**values)
    cfg.explicit = frozenset(values)
    cfg.validate()
    return cfg


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        value = getattr(cfg, key)
        if value is None:
            raise ConfigError(f"config key {key!r} is required for this command")
        if not Path(value).is_file():
            raise DataError(f"{key}: file not found: {value}")


# -- subcommands --------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "train_data", "val_data")
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    train_set = dataio.read_container(cfg.train_data)
    val_set = dataio.read_container(cfg.val_data)
    if train_cfg.batch_size > len(train_set):
        raise ConfigError(f"batch_size {train_cfg.batch_size} exceeds training set size {len(train_set)}")
    stats = dataio.fit_band_stats(train_set) if cfg.standardize else dataio.BandStats.identity()
    if cfg.band_stats:
        dataio.write_band_stats(stats, cfg.band_stats)
    train_set, val_set = dataio.standardize(train_set, stats), dataio.standardize(val_set, stats)

    model = build(model_cfg, np.random.default_rng([cfg.seed, 1]))
    log.info("training %s on %d patches (%d validation)", model_cfg.name, len(train_set), len(val_set))
    try:
        ckpt, history = train(model, train_set, val_set, train_cfg, stats)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_checkpoint(cfg.checkpoint, model, exc.checkpoint.band_mean, exc.checkpoint.band_std,
                            exc.checkpoint.state)
        if exc.history is not None:
            exc.history.write_csv(cfg.history)
        print(f"error: {exc}; last finite checkpoint written to {cfg.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(cfg.checkpoint, model, ckpt.band_mean, ckpt.band_std, ckpt.state)
    history.write_csv(cfg.history)
    best = history.best_epoch
    print(f"epochs={len(history)} best_epoch={best + 1} val_acc={history.val_acc[best]:.4f} "
          f"checkpoint={cfg.checkpoint} history={cfg.history}")
    return EXIT_OK


def _load_model(cfg: RunConfig):
    _require(cfg, "checkpoint")
    ckpt = load_checkpoint(cfg.checkpoint)
    for key in ARCH_KEYS:
        if key in cfg.explicit and getattr(cfg, key) != getattr(ckpt.config, key):
            raise ConfigError(f"config {key}={getattr(cfg, key)!r} disagrees with checkpoint "
                              f"{key}={getattr(ckpt.config, key)!r}")
    return ckpt.to_model(), dataio.BandStats(ckpt.band_mean, ckpt.band_std)


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "test_data")
    if cfg.weights is not None:
        _require(cfg, "weights")
    model, stats = _load_model(cfg)
    try:
        weights = metrics.read_weight_matrix(cfg.weights) if cfg.weights else None
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    test = dataio.standardize(dataio.read_container(cfg.test_data), stats)
    pred = model.predict(test.as_nchw(), batch_size=cfg.eval_batch_size)
    cm = metrics.confusion(test.labels, pred)
    result = metrics.all_metrics(cm, weights)
    metrics.write_metrics_csv(result, cfg.metrics)
    metrics.write_matrix_csv(metrics.normalize_rows(cm), cfg.confusion)
    print(" ".join(f"{k}={result[k]:.4f}" for k in metrics.METRIC_COLUMNS))
    return EXIT_OK


def param_counts(cfg: RunConfig) -> tuple[int, int]:
    """(trainable, total) for the configured architecture; no optimizer state is created."""
    return count_parameters(build(cfg.model_config(), rng=0))


def cmd_params(cfg: RunConfig) -> int:
    trainable, total = param_counts(cfg)
    print(f"{cfg.model_config().name} trainable={trainable} total={total}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_gradcheck_suite(seed=cfg.seed, include_model=cfg.gradcheck_model)
    for r in results:
        print(r.line())
    failed = [r.kind for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_map(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "raster")
    if cfg.palette is not None:
        _require(cfg, "palette")
    model, stats = _load_model(cfg)
    palette = mapper.read_palette(cfg.palette) if cfg.palette else None
    scene = mapper.read_raster(cfg.raster)
    grid = mapper.slide_map(scene, model, stats, step=cfg.step, batch_size=cfg.map_batch_size,
                            workers=cfg.workers)
    mapper.write_label_grid(grid, cfg.grid, cfg.grid_meta)
    mapper.render_png(grid, palette, cfg.png)
    rows, cols = grid.labels.shape
    print(f"grid={rows}x{cols} cell_size_m={grid.cell_size_m:g} grid_file={cfg.grid} png={cfg.png}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = [("train", cfg.per_class), ("val", cfg.val_per_class), ("test", cfg.test_per_class)]
    for i, (name, per_class) in enumerate(splits):
        if per_class == 0:
            continue
        ds = dataio.synth_generate([cfg.seed, i], per_class, cfg.separation)
        dataio.write_container(ds, out / f"{name}.lczp")
        print(f"{name}: {len(ds)} patches -> {out / f'{name}.lczp'}")
    if cfg.mosaic_rows and cfg.mosaic_cols:
        rng = np.random.default_rng([cfg.seed, 10])
        tiles = rng.integers(1, dataio.NUM_CLASSES + 1, size=(cfg.mosaic_rows, cfg.mosaic_cols))
        scene, _ = mapper.synth_mosaic(tiles, cfg.tile_size, cfg.separation, seed=[cfg.seed, 11])
        mapper.write_raster(scene, out / "mosaic.lczr")
        meta = {"tile_size": cfg.tile_size, "tiles": tiles.tolist()}
        (out / "mosaic.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
        print(f"mosaic: {scene.height}x{scene.width} px -> {out / 'mosaic.lczr'}")
    return EXIT_OK


def cmd_import(cfg: RunConfig) -> int:
    _require(cfg, "h5")
    try:
        import h5py  # noqa: F401
    except ImportError as exc:
        raise ConfigError("the import command needs h5py (pip install h5py)") from exc
    n = dataio.import_so2sat_h5(cfg.h5, cfg.import_out, limit=cfg.import_limit)
    print(f"imported {n} patches -> {cfg.import_out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "map": cmd_map,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "synth": cmd_synth,
    "import": cmd_import,
}


HELP = {
    "train": "train a model and write the best checkpoint and history CSV",
    "evaluate": "score a checkpoint on a test container",
    "map": "sliding-window LCZ map of a raster scene",
    "gradcheck": "finite-difference gradient verification suite",
    "params": "print trainable and total parameter counts",
    "synth": "generate synthetic train/val/test containers and an optional mosaic",
    "import": "convert an So2Sat LCZ42 HDF5 split to a patch container",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sen2lcz", description="LCZ classification with Sen2LCZ-Net")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", metavar="PATH", help="key = value config file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for key in _FIELDS:
            flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
            p.add_argument(*flags, dest=f"set_{key}", metavar="VALUE", default=argparse.SUPPRESS)
    return parser


def run(command: str, cfg: RunConfig) -> int:
    """Run one subcommand, mapping failures to exit codes."""
    try:
        return COMMANDS[command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, dataio.DataFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_")}
    try:
        cfg = make_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
