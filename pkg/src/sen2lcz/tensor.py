"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent.  :func:`backward` walks the resulting graph in reverse topological
order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The autodiff graph cannot be differentiated as requested."""


class NonDeterministicError(RuntimeError):
    """A function under gradient check returned different values for equal inputs."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def record_branch(selector: np.ndarray) -> None:
    """Log which branch a piecewise op took (ReLU mask, max-pool argmax, ...) if capture is on."""
    log = getattr(_state, "branch_log", None)
    if log is not None:
        log.append(hashlib.blake2b(np.ascontiguousarray(selector).tobytes(), digest_size=16).digest())


@contextmanager
def capture_branches() -> Iterator[list]:
    """Collect the branch signature of every piecewise op evaluated inside the block."""
    prev = getattr(_state, "branch_log", None)
    log: list = []
    _state.branch_log = log
    try:
        yield log
    finally:
        _state.branch_log = prev


def _released(grad: np.ndarray):
    raise GraphError("graph was already differentiated and its saved activations released; "
                     "pass retain_graph=True to backward more than once")


class Tensor:
    """N-dimensional real array participating in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self) -> None:
        """Debug assertion: raise if data or grad contains NaN or Inf."""
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or self._op}")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise FloatingPointError(f"non-finite gradient in tensor {self.name or self._op}")

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{rg})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, retain_graph: bool = False) -> None:
        backward(Graph(self), self, retain_graph=retain_graph)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result; records the graph edge only if some parent needs a gradient."""
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out._op = op
    return out


class Graph:
    """Topologically ordered view of the operations leading to ``root``.

    Nodes are ordered so that every node's inputs precede it.  The order is
    produced by an iterative depth-first search that visits parents in
    argument order, so it is identical for identical graph constructions.
    """

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(graph: Graph, loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate additively, across fan-out within one graph and
    across repeated calls.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.root is not loss:
        raise GraphError("graph was not built from this loss")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires a gradient")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise GraphError(f"node {node._op} has no backward function")
        if g is None:
            continue
        parent_grads = node._backward(g)
        if len(parent_grads) != len(node._parents):
            raise GraphError(f"backward of {node._op} returned {len(parent_grads)} grads "
                             f"for {len(node._parents)} inputs")
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GraphError(f"backward of {node._op} produced grad of shape {pg.shape} "
                                 f"for input of shape {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = _released


# -- elementwise ------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                         "(only equal shapes or a scalar operand are supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand: collapse everything
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    _check_binary(a, b, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    _check_binary(a, b, "sub")
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _lift(b, a.dtype)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def _bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(out, (a, b), _bw, "mul")


def scale(a: Tensor, factor: Scalar) -> Tensor:
    c = a.dtype.type(factor)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    record_branch(mask)
    out = np.where(mask, a.data, a.dtype.type(0))
    return make_node(out, (a,), lambda g: (g * mask,), "relu")


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``relu`` or ``scale``."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


# -- reductions and shape ops ----------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return make_node(np.asarray(a.data.sum(), dtype=dt), (a,),
                     lambda g: (np.full(shape, g.reshape(()), dtype=dt),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size
    return make_node(np.asarray(a.data.mean(), dtype=dt), (a,),
                     lambda g: (np.full(shape, g.reshape(()) / n, dtype=dt),), "mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(tensors), _bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data

    def _bw(g):
        return g @ bd.T, ad.T @ g

    return make_node(ad @ bd, (a, b), _bw, "matmul")


# -- gradient checking -------------------------------------------------------


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                            extra: Iterable[Tensor] = (), max_coords: Optional[int] = None,
                            seed: int = 0, skip_kinks: bool = False,
                            info: Optional[dict] = None) -> float:
    """Compare analytic gradients against central differences.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    Coordinates of ``x`` and of every tensor in ``extra`` are perturbed in
    place.  With ``max_coords`` set, at most that many coordinates per tensor
    are sampled (seeded); otherwise every coordinate is checked.

    With ``skip_kinks`` the branch signature of every piecewise op is
    compared at ``x``, ``x + eps`` and ``x - eps``; coordinates whose stencil
    straddles a kink (where central differences are not a valid oracle) are
    skipped.  ``info``, if given, receives ``checked`` and ``skipped`` counts.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    targets = [x, *extra]
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    first = fn(x)
    second = fn(x)
    if first.data.size != 1:
        raise ShapeError(f"function under check must return a scalar, got {first.shape}")
    if not np.array_equal(first.data, second.data):
        raise NonDeterministicError(
            f"function returned {first.item()!r} then {second.item()!r} for identical inputs")
    graph = Graph(first)
    bystanders = [(leaf, leaf.grad) for leaf in graph.leaves() if all(leaf is not t for t in targets)]
    backward(graph, first)
    for leaf, g in bystanders:
        leaf.grad = g
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    with no_grad():
        for t, ga in zip(targets, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            ga_flat = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                if skip_kinks:
                    with capture_branches() as sig0:
                        fn(x)
                flat[i] = orig + eps
                with capture_branches() as sig_p:
                    fp = float(fn(x).data.reshape(()))
                flat[i] = orig - eps
                with capture_branches() as sig_m:
                    fm = float(fn(x).data.reshape(()))
                flat[i] = orig
                if skip_kinks and not (sig_p == sig0 == sig_m):
                    skipped += 1
                    continue
                checked += 1
                numeric = (fp - fm) / (2.0 * eps)
                a = float(ga_flat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
                worst = max(worst, err)
    for t in targets:
        t.grad = None
    if info is not None:
        info.update(checked=checked, skipped=skipped)
    return worst
