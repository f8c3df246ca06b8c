"""Layers used by the LCZ networks: conv, batch norm, pooling, dense, dropout and losses.

All spatial tensors use the (batch, channel, height, width) layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, make_node, matmul, record_branch

PROB_SUM_TOL = 1e-5
# lower clip for probabilities fed to a log; same constant Keras uses
PROB_CLIP = 1e-7


def he_init(fan_in: int, shape, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Zero-mean normal samples with standard deviation ``sqrt(2 / fan_in)``."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


# -- layer containers -------------------------------------------------------


@dataclass
class Conv2dLayer:
    weight: Tensor  # (out_ch, in_ch, 3, 3)
    bias: Tensor  # (out_ch,)

    @classmethod
    def create(cls, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        w = he_init(in_ch * 9, (out_ch, in_ch, 3, 3), rng, dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch, dtype), requires_grad=True))

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(self, x)


@dataclass
class BatchNormLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3

    @classmethod
    def create(cls, ch: int, dtype=DEFAULT_DTYPE, momentum: float = 0.99, epsilon: float = 1e-3):
        return cls(Tensor(np.ones(ch, dtype), requires_grad=True),
                   Tensor(np.zeros(ch, dtype), requires_grad=True),
                   np.zeros(ch, dtype), np.ones(ch, dtype), momentum, epsilon)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def num_params(self) -> int:
        return self.gamma.size + self.beta.size

    def __call__(self, x: Tensor, mode: str = "infer") -> Tensor:
        return batchnorm(self, x, mode)


@dataclass
class DenseLayer:
    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor  # (out_dim,)

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        w = he_init(in_dim, (in_dim, out_dim), rng, dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_dim, dtype), requires_grad=True))

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def __call__(self, x: Tensor) -> Tensor:
        return dense(self, x)


# -- convolution ------------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*9) patches of the zero-padded input."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * 9)


def conv2d(layer: Conv2dLayer, x: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, C, H, W) input, got {x.shape}")
    b, c, h, w = x.shape
    if c != layer.in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, layer expects {layer.in_ch}")
    weight, bias = layer.weight, layer.bias
    out_ch = layer.out_ch
    cols = _im2col3(x.data)
    wmat = weight.data.reshape(out_ch, c * 9)
    y = cols @ wmat.T
    y += bias.data
    out = y.reshape(b, h, w, out_ch).transpose(0, 3, 1, 2)

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * h * w, out_ch)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            # full correlation with the spatially flipped, channel-transposed kernel
            wf = weight.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(out_ch * 9, c)
            gcols = _im2col3(g)
            gx = (gcols @ wf).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return make_node(out, (x, weight, bias), _bw, "conv2d")


# -- batch normalization ----------------------------------------------------


def batchnorm(layer: BatchNormLayer, x: Tensor, mode: str = "infer") -> Tensor:
    """Per-channel batch normalization.

    ``train`` normalizes with the batch statistics and updates the running
    averages (``running = momentum * running + (1 - momentum) * batch``, with
    the unbiased batch variance); ``infer`` uses the running statistics.
    """
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise ShapeError(f"batchnorm: expected (B, {layer.channels}, H, W), got {x.shape}")
    gamma, beta = layer.gamma, layer.beta
    dt = x.dtype
    g4 = gamma.data.reshape(1, -1, 1, 1)
    eps = dt.type(layer.epsilon)

    if mode == "train":
        b, c, h, w = x.shape
        m = b * h * w
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least two values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        out = g4 * xhat + beta.data.reshape(1, -1, 1, 1)

        mom = layer.momentum
        layer.running_mean[...] = mom * layer.running_mean + (1 - mom) * mu.reshape(-1)
        layer.running_var[...] = mom * layer.running_var + (1 - mom) * var.reshape(-1) * (m / (m - 1))

        def _bw(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
            return gx, ggamma, gbeta

        return make_node(out, (x, gamma, beta), _bw, "batchnorm_train")

    if mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    rm = layer.running_mean.astype(dt).reshape(1, -1, 1, 1)
    inv_std = (1.0 / np.sqrt(layer.running_var.astype(dt) + eps)).reshape(1, -1, 1, 1)
    xhat = (x.data - rm) * inv_std
    out = g4 * xhat + beta.data.reshape(1, -1, 1, 1)

    def _bw_infer(g):
        return g * g4 * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_node(out, (x, gamma, beta), _bw_infer, "batchnorm_infer")


# -- pooling ----------------------------------------------------------------


def _windows2x2(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C, H/2, W/2, 4), window cells in row-major order."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)


def _unwindows2x2(g: np.ndarray) -> np.ndarray:
    b, c, hh, ww, _ = g.shape
    return np.ascontiguousarray(
        g.reshape(b, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hh * 2, ww * 2))


def pool2x2(x: Tensor, kind: str = "max") -> Tensor:
    """Non-overlapping 2x2 pooling with stride 2.

    Max pooling routes the gradient to the first maximal cell of each window
    in row-major order.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool2x2 expects (B, C, H, W) input, got {x.shape}")
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2x2 needs even spatial extents, got {h}x{w}")
    win = _windows2x2(x.data)
    if kind == "max":
        idx = win.argmax(axis=-1)
        record_branch(idx)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

        def _bw(g):
            gw = np.zeros(g.shape + (4,), dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            return (_unwindows2x2(gw),)

        return make_node(np.ascontiguousarray(out), (x,), _bw, "maxpool")
    if kind == "avg":
        out = win.mean(axis=-1)
        quarter = x.dtype.type(0.25)

        def _bw_avg(g):
            gw = np.repeat((g * quarter)[..., None], 4, axis=-1)
            return (_unwindows2x2(gw),)

        return make_node(out, (x,), _bw_avg, "avgpool")
    raise ValueError(f"unknown pooling kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) mean over spatial positions."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B, C, H, W) input, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = x.dtype.type(1.0 / (h * w))

    def _bw(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (b, c, h, w)).copy(),)

    return make_node(out, (x,), _bw, "global_avg_pool")


# -- dense, dropout, softmax ------------------------------------------------


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along the last axis of a 2-D tensor."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")
    return make_node(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def dense(layer: DenseLayer, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[0]:
        raise ShapeError(f"dense: expected (B, {layer.weight.shape[0]}) input, got {x.shape}")
    return add_bias(matmul(x, layer.weight), layer.bias)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and rescales survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of a (B, K) tensor (max-subtracted for stability)."""
    if x.ndim != 2:
        raise ShapeError(f"softmax expects (B, K) input, got {x.shape}")
    s = _softmax_np(x.data)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (x,), _bw, "softmax")


def _check_onehot(labels: np.ndarray, shape: tuple) -> None:
    if labels.shape != shape:
        raise ShapeError(f"labels shape {labels.shape} does not match predictions {shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")


def check_distributions(p: np.ndarray, tol: float = PROB_SUM_TOL) -> None:
    if p.ndim != 2:
        raise ShapeError(f"probabilities must be (B, K), got {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ValueError("probability rows must be non-negative and sum to 1")


def softmax_cross_entropy(x: Tensor, labels, input_kind: str = "logits",
                          sample_weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean over the batch of ``-w_i * log p_i(true class)``.

    ``input_kind="logits"`` applies a stable softmax first; ``"probabilities"``
    takes rows that already sum to one.  ``sample_weights`` (one per row)
    multiply each sample's loss before averaging over the batch size.
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if x.ndim != 2:
        raise ShapeError(f"cross entropy expects (B, K) input, got {x.shape}")
    _check_onehot(labels, x.shape)
    bsz = x.shape[0]
    dt = x.dtype
    onehot = labels.astype(dt)
    w = np.ones(bsz, dtype=dt) if sample_weights is None else np.asarray(sample_weights, dtype=dt)
    if w.shape != (bsz,):
        raise ShapeError(f"sample_weights must have shape ({bsz},), got {w.shape}")
    wcol = w[:, None]

    if input_kind == "logits":
        z = x.data - x.data.max(axis=1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp_true = (onehot * (z - logz)).sum(axis=1)
        loss = np.asarray(-(w * logp_true).sum() / bsz, dtype=dt)
        s = np.exp(z - logz)

        def _bw(g):
            return (g * wcol * (s - onehot) / bsz,)

        return make_node(loss, (x,), _bw, "softmax_ce_logits")

    if input_kind == "probabilities":
        check_distributions(x.data)
        p_true = (onehot * x.data).sum(axis=1)
        clipped = np.maximum(p_true, PROB_CLIP)
        loss = np.asarray(-(w * np.log(clipped)).sum() / bsz, dtype=dt)
        active = (p_true >= PROB_CLIP).astype(dt)
        record_branch(active)

        def _bw_p(g):
            return (g * onehot * (-(w * active) / (bsz * clipped))[:, None],)

        return make_node(loss, (x,), _bw_p, "ce_probabilities")

    raise ValueError(f"unknown input kind {input_kind!r}")


def one_hot(labels: np.ndarray, num_classes: int = 17, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Labels in 1..num_classes -> one-hot rows."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise ValueError(f"labels must lie in 1..{num_classes}")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels - 1] = 1
    return out
