"""Sen2LCZ-Net and its multi-level fusion variant.

Four blocks of ``N`` conv -> batch-norm -> ReLU layers with widths
``f, 2f, 4f, 8f``.  Between blocks a pooling stage halves the spatial size;
in ``double`` mode it concatenates 2x2 average and max pooling (avg first),
doubling the channel count.  Block 4 ends in global average pooling and a
dense softmax head.  With fusion enabled, three extra heads read the pooled
outputs of blocks 1-3 and the four predicted distributions are averaged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from . import layers as L
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, add, concat, no_grad, scale

NUM_CLASSES = 17
INPUT_SHAPE = (10, 32, 32)  # channels, height, width

POOLING_MODES = ("double", "max-only")
FUSION_LOSS_MODES = ("mean-prob", "sum-loss")


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    f: int = 16
    N: int = 4
    fusion: bool = True
    pooling: str = "double"
    dropout_rate: float = 0.2
    fusion_loss: str = "mean-prob"
    in_channels: int = 10
    height: int = 32
    width: int = 32
    classes: int = NUM_CLASSES

    def __post_init__(self):
        if not isinstance(self.f, (int, np.integer)) or self.f < 1:
            raise ConfigError(f"f must be a positive integer, got {self.f!r}")
        if not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N!r}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.fusion_loss not in FUSION_LOSS_MODES:
            raise ConfigError(f"fusion_loss must be one of {FUSION_LOSS_MODES}, got {self.fusion_loss!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ConfigError("input height and width must be positive multiples of 8")
        if self.in_channels < 1 or self.classes < 2:
            raise ConfigError("need at least one input channel and two classes")

    @property
    def depth(self) -> int:
        return 4 * self.N + 1

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return (self.f, 2 * self.f, 4 * self.f, 8 * self.f)

    @property
    def block_in_channels(self) -> tuple[int, int, int, int]:
        """Channels entering each block's first conv layer."""
        w = self.widths
        grow = 2 if self.pooling == "double" else 1
        return (self.in_channels, grow * w[0], grow * w[1], grow * w[2])

    @property
    def head_in_dims(self) -> tuple[int, ...]:
        """Input widths of the active heads, in head order 1..4 (only head 4 without fusion)."""
        bic = self.block_in_channels
        if not self.fusion:
            return (self.widths[3],)
        return (bic[1], bic[2], bic[3], self.widths[3])

    @property
    def name(self) -> str:
        tag = f"f{self.f}D{self.depth}"
        if self.fusion:
            tag += "-MF"
        if self.pooling != "double":
            tag += "-maxonly"
        return tag


@dataclass
class ConvBlock:
    convs: list[L.Conv2dLayer]
    norms: list[L.BatchNormLayer]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        for conv, bn in zip(self.convs, self.norms):
            x = bn(conv(x), mode).relu()
        return x


@dataclass
class Head:
    dense: L.DenseLayer

    def __call__(self, x: Tensor) -> Tensor:
        return L.softmax(self.dense(L.global_avg_pool(x)))


@dataclass
class ForwardResult:
    heads: list[Tensor]  # head order 1..4 (only head 4 without fusion)
    fused: Tensor
    block_outputs: list[Tensor] = field(default_factory=list)


def double_pool(x: Tensor) -> Tensor:
    """Concatenate 2x2 average pooling and 2x2 max pooling along channels (avg first)."""
    return concat([L.pool2x2(x, "avg"), L.pool2x2(x, "max")], axis=1)


class Sen2LCZNet:
    """A built network: blocks, heads and a flat, ordered parameter registry."""

    def __init__(self, config: ModelConfig, blocks: list[ConvBlock], heads: dict[int, Head]):
        self.config = config
        self.blocks = blocks
        self.heads = heads

    # registry ------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in registry order: blocks first, then heads (4, 1, 2, 3)."""
        out = []
        for bi, block in enumerate(self.blocks, start=1):
            for li, (conv, bn) in enumerate(zip(block.convs, block.norms), start=1):
                p = f"block{bi}.conv{li}"
                out += [(f"{p}.weight", conv.weight), (f"{p}.bias", conv.bias)]
                p = f"block{bi}.bn{li}"
                out += [(f"{p}.gamma", bn.gamma), (f"{p}.beta", bn.beta)]
        for hi in self._head_order():
            d = self.heads[hi].dense
            out += [(f"head{hi}.dense.weight", d.weight), (f"head{hi}.dense.bias", d.bias)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bi, block in enumerate(self.blocks, start=1):
            for li, bn in enumerate(block.norms, start=1):
                out += [(f"block{bi}.bn{li}.running_mean", bn.running_mean),
                        (f"block{bi}.bn{li}.running_var", bn.running_var)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def _head_order(self) -> list[int]:
        return [4] + [i for i in (1, 2, 3) if i in self.heads]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Everything persisted in a checkpoint: parameters then batch-norm running stats."""
        return [(n, t.data) for n, t in self.named_parameters()] + self.named_buffers()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.state_arrays()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in self.state_arrays():
            if name not in state:
                raise CheckpointError(f"missing tensor {name}")
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise CheckpointError(f"tensor {name}: shape {src.shape} != expected {arr.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # forward -------------------------------------------------------------

    def _pool(self, x: Tensor) -> Tensor:
        return double_pool(x) if self.config.pooling == "double" else L.pool2x2(x, "max")

    def forward(self, x, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> ForwardResult:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.config
        expected = (cfg.in_channels, cfg.height, cfg.width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model expects input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        rate = cfg.dropout_rate

        heads: dict[int, Tensor] = {}
        block_outputs = []
        h = x
        for bi, block in enumerate(self.blocks, start=1):
            h = block(h, mode)
            block_outputs.append(h)
            if bi == 4:
                break
            h = self._pool(h)
            if bi in (2, 3):
                h = L.dropout(h, rate, mode, rng)
            if bi in self.heads:
                heads[bi] = self.heads[bi](h)
        heads[4] = self.heads[4](h)

        ordered = [heads[i] for i in sorted(heads)]
        if len(ordered) == 1:
            fused = ordered[0]
        else:
            total = ordered[0]
            for p in ordered[1:]:
                total = add(total, p)
            fused = scale(total, 1.0 / len(ordered))
        return ForwardResult(ordered, fused, block_outputs)

    __call__ = forward

    @property
    def dtype(self):
        return self.blocks[0].convs[0].weight.dtype

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Infer-mode labels in 1..17 (argmax of the fused distribution, lowest index wins ties)."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        if x.ndim != 4:
            raise ShapeError(f"predict expects (B, C, H, W) input, got {x.shape}")
        out = np.empty(x.shape[0], dtype=np.int64)
        with no_grad():
            for s in range(0, x.shape[0], batch_size):
                probs = self.forward(Tensor(x[s:s + batch_size]), "infer").fused.data
                out[s:s + batch_size] = labels_from_probs(probs)
        return out

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        chunks = []
        with no_grad():
            for s in range(0, x.shape[0], batch_size):
                chunks.append(self.forward(Tensor(x[s:s + batch_size]), "infer").fused.data)
        return np.concatenate(chunks, axis=0)


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax per row plus one (LCZ numbering); ``np.argmax`` keeps the first maximum."""
    return np.argmax(probs, axis=1).astype(np.int64) + 1


def build(config: ModelConfig, rng: Union[np.random.Generator, int, None] = None,
          dtype=DEFAULT_DTYPE) -> Sen2LCZNet:
    """Instantiate a He-initialized network; heads are created after all blocks."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    blocks = []
    for in_ch, width in zip(config.block_in_channels, config.widths):
        convs, norms = [], []
        c = in_ch
        for _ in range(config.N):
            convs.append(L.Conv2dLayer.create(c, width, rng, dtype))
            norms.append(L.BatchNormLayer.create(width, dtype))
            c = width
        blocks.append(ConvBlock(convs, norms))
    dims = dict(zip((1, 2, 3, 4), config.head_in_dims)) if config.fusion else {4: config.widths[3]}
    heads = {4: Head(L.DenseLayer.create(dims[4], config.classes, rng, dtype))}
    if config.fusion:
        for hi in (1, 2, 3):
            heads[hi] = Head(L.DenseLayer.create(dims[hi], config.classes, rng, dtype))
    return Sen2LCZNet(config, blocks, heads)


def fused_loss(heads: list[Tensor], labels, mode: str = "mean-prob",
               sample_weights: Optional[np.ndarray] = None) -> Tensor:
    """Cross entropy of the averaged head distributions, or the sum of per-head losses."""
    if not heads:
        raise ValueError("fused_loss needs at least one head")
    if mode == "mean-prob":
        if len(heads) == 1:
            mixed = heads[0]
        else:
            total = heads[0]
            for h in heads[1:]:
                total = add(total, h)
            mixed = scale(total, 1.0 / len(heads))
        return L.softmax_cross_entropy(mixed, labels, "probabilities", sample_weights)
    if mode == "sum-loss":
        loss = L.softmax_cross_entropy(heads[0], labels, "probabilities", sample_weights)
        for h in heads[1:]:
            loss = add(loss, L.softmax_cross_entropy(h, labels, "probabilities", sample_weights))
        return loss
    raise ValueError(f"unknown fusion loss mode {mode!r}")


def count_parameters(model: Sen2LCZNet) -> tuple[int, int]:
    """(trainable, total); total adds the batch-norm running statistics."""
    trainable = sum(t.size for t in model.parameters())
    buffers = sum(a.size for _, a in model.named_buffers())
    return trainable, trainable + buffers


def analytic_parameter_count(f: int, N: int, fusion: bool, in_channels: int = 10,
                             classes: int = NUM_CLASSES) -> int:
    """Closed-form trainable count for double pooling (independent of :func:`build`)."""
    total = (in_channels * f * 9 + f) + (N - 1) * (f * f * 9 + f) + 2 * f * N
    for k in (2, 3, 4):
        c = 2 ** (k - 1) * f
        total += N * (c * c * 9 + c) + 2 * c * N
    head_dims = (2 * f, 4 * f, 8 * f, 8 * f) if fusion else (8 * f,)
    total += sum(classes * c + classes for c in head_dims)
    return total


# -- checkpoint file ----------------------------------------------------------

CKPT_MAGIC = b"S2LZ"
CKPT_VERSION = 1
_FIXED_POINT = 1_000_000  # dropout rate stored as round(rate * 1e6)


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    band_mean: np.ndarray  # (10,) float64
    band_std: np.ndarray  # (10,) float64

    def to_model(self) -> Sen2LCZNet:
        model = build(self.config, rng=0)
        model.load_state_dict(self.state)
        return model


def _write_str(fh: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<H", len(b)))
    fh.write(b)


def save_checkpoint(path: Union[str, Path], model: Sen2LCZNet, band_mean, band_std,
                    state: Optional[dict[str, np.ndarray]] = None) -> None:
    """Write the binary checkpoint (little-endian)."""
    cfg = model.config
    band_mean = np.asarray(band_mean, dtype="<f8").reshape(-1)
    band_std = np.asarray(band_std, dtype="<f8").reshape(-1)
    if band_mean.shape != (cfg.in_channels,) or band_std.shape != (cfg.in_channels,):
        raise CheckpointError("band statistics must have one entry per input channel")
    arrays = model.state_arrays() if state is None else [(n, state[n]) for n, _ in model.state_arrays()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<IIBBBI", cfg.f, cfg.N, int(cfg.fusion), POOLING_MODES.index(cfg.pooling),
                             FUSION_LOSS_MODES.index(cfg.fusion_loss),
                             int(round(cfg.dropout_rate * _FIXED_POINT))))
        fh.write(struct.pack("<I", cfg.in_channels))
        for m, s in zip(band_mean, band_std):
            fh.write(struct.pack("<dd", m, s))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            arr = np.asarray(arr)
            _write_str(fh, name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    f, n, fusion, pooling, floss, rate = r.unpack("<IIBBBI")
    (in_ch,) = r.unpack("<I")
    try:
        cfg = ModelConfig(f=f, N=n, fusion=bool(fusion), pooling=POOLING_MODES[pooling],
                          fusion_loss=FUSION_LOSS_MODES[floss], dropout_rate=rate / _FIXED_POINT,
                          in_channels=in_ch)
    except (IndexError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid config block ({exc})") from exc
    stats = np.array(r.unpack(f"<{2 * in_ch}d"), dtype=np.float64).reshape(in_ch, 2)
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(DEFAULT_DTYPE)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(cfg, state, stats[:, 0].copy(), stats[:, 1].copy())
