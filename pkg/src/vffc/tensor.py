"""Dense float64 tensors with reverse-mode differentiation.

Arrays follow the (N, D, H, W, C) axis convention, channels last, so a
channel split is a contiguous slice of the trailing axis.  Every primitive
records a closure that maps the output gradient to input gradients; calling
:func:`backward` replays those closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12

_grad_enabled = True
_next_id = 0


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation (non-scalar loss, detached graph)."""


def _new_id() -> int:
    global _next_id
    _next_id += 1
    return _next_id


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.id = _new_id()
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap a primitive's output and, when recording, attach its backward rule.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per parent, in order.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor(data, check=False)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise

def _scalar_or_tensor(b):
    if isinstance(b, Tensor):
        return b
    if np.ndim(b) == 0:
        return float(b)
    raise ValueError("second operand must be a Tensor or a scalar")


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and b.ndim != 0 and a.ndim != 0:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting is supported
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _scalar_or_tensor(b)
    if not isinstance(b, Tensor):
        return make(a.data + b, (a,), lambda g: (g,), "add")
    _check_pair(a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b) -> Tensor:
    b = _scalar_or_tensor(b)
    if not isinstance(b, Tensor):
        return make(a.data - b, (a,), lambda g: (g,), "sub")
    _check_pair(a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _scalar_or_tensor(b)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_pair(a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def div(a: Tensor, b) -> Tensor:
    b = _scalar_or_tensor(b)
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / b)
    _check_pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd  # make() reports the non-finite result
    return make(out, (a, b),
                lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)),
                "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    return make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if (ad <= 0).any():
        raise ValueError("log of non-positive value; clamp first")
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "relu": relu, "log": log, "sigmoid": sigmoid,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``clamp`` takes ``b = (lo, hi)``."""
    if kind == "clamp":
        lo, hi = b if b is not None else (LOG_EPS, 1.0 - LOG_EPS)
        return clamp(a, lo, hi)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("relu", "log", "sigmoid"):
        return fn(a)
    return fn(a, b)


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError("repeated axis")
    return tuple(sorted(out))


def reduce(kind: str, a: Tensor, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (None = all axes, giving a scalar)."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        raise ValueError("empty axis set")
    ax = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    out = a.data.sum(axis=ax)
    if kind == "mean":
        out = out / count
    shape = a.shape
    keep = tuple(1 if i in ax else n for i, n in enumerate(shape))

    def backward(g):
        g = np.broadcast_to(np.reshape(g, keep), shape)
        return ((g / count) if kind == "mean" else g.copy(),)

    return make(np.asarray(out), (a,), backward, kind)


def sum_(a: Tensor, axes=None) -> Tensor:
    return reduce("sum", a, axes)


def mean(a: Tensor, axes=None) -> Tensor:
    return reduce("mean", a, axes)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("nothing to concatenate")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ValueError(f"size mismatch in concat: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * nd
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(int(lo), int(hi))
            grads.append(g[tuple(idx)])
        return grads

    return make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def split(a: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax] or any(s < 0 for s in sizes):
        raise ValueError(f"split sizes {list(sizes)} do not sum to axis length {a.shape[ax]}")
    out = []
    lo = 0
    for s in sizes:
        out.append(take(a, ax, lo, lo + s))
        lo += s
    return out


def take(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make(a.data[idx].copy(), (a,), backward, "take")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (g.transpose(inv),), "permute")


# ---------------------------------------------------------------- backward

@dataclass
class ComputationRecord:
    """Recorded primitives in topological order (inputs before consumers)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.id not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def entries(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(op id, input ids, output id) per recorded node."""
        return [(n.op, tuple(p.id for p in n._parents), n.id) for n in self.nodes]


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None,
             retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Accumulate dloss/dleaf into every requires_grad leaf's ``grad``.

    Returns a map from tensor to gradient for the leaves, plus any
    intermediate tensors listed in ``inputs``.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from any differentiable leaf")
    record = ComputationRecord.trace(loss)
    wanted = {t.id for t in inputs} if inputs is not None else set()
    grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(record.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.id in wanted:
            result[node] = g
        if node.op == "leaf":
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node] = g
            continue
        if node._backward is None:
            raise GraphError("graph was already freed by an earlier backward")
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
        if not retain_graph:
            node._backward = None
            node._parents = ()
    return result


# ---------------------------------------------------------------- grad check

def grad_check(fn: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               coords: Sequence[int] | None = None, exclude_kinks: bool = True) -> float:
    """Max relative error between backward and central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates with ``|x_i| < 10*step`` are skipped when ``exclude_kinks``
    (relu is not differentiable at 0).  ``coords`` restricts the check to a
    subset of flat indices.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = fn(leaf)
    y0 = out.item()
    if fn(Tensor(base.copy())).item() != y0:
        raise GraphError("function is not deterministic")
    backward(out)
    analytic = leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(base.size)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            if exclude_kinks and abs(flat[i]) < 10 * step:
                continue
            xp = flat.copy()
            xp[i] += step
            fp = fn(Tensor(xp.reshape(base.shape))).item()
            xp[i] -= 2 * step
            fm = fn(Tensor(xp.reshape(base.shape))).item()
            numeric = (fp - fm) / (2 * step)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- serialization

TENSOR_MAGIC = b"VFFCTNSR"
TENSOR_VERSION = 1


def write_tensor(fh: BinaryIO, arr) -> None:
    """Flat container: magic, u32 version, u32 rank, u64 shape, f64 LE data."""
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", TENSOR_VERSION, a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(8)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    n = int(np.prod(shape)) if rank else 1
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
