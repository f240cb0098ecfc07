"""Dense array kernels with tape-based reverse-mode differentiation.

Only the handful of primitives the encoder and its losses need are provided.
Every primitive checks its input shapes, computes a forward value with numpy
and, when any input requires a gradient, records a node on the active
:class:`Tape` together with a backward rule.

Broadcasting is deliberately restricted to ``matrix + row-vector``; any other
shape mismatch raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
COSINE_EPS = 1e-12

__all__ = [
    "ShapeError",
    "DegenerateVectorError",
    "Tensor",
    "Tape",
    "constant",
    "parameter",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "one_minus",
    "no_tape",
    "sigmoid",
    "tanh",
    "relu",
    "concat",
    "take_rows",
    "reshape",
    "max_over_positions",
    "mean_over_positions",
    "sum_all",
    "cosine_rows",
    "cosine_similarity",
    "numerical_gradient",
]


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "name", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar keeps the encoder readable
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


class Tape:
    """Ordered record of the differentiable operations of one forward pass.

    Use as a context manager; primitives executed inside the block register
    themselves on it. Creation order is a topological order, so the backward
    pass simply walks the record in reverse.
    """

    _active: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, params: dict[str, Tensor] | None = None):
        return backward(self, output, params)


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Run primitives without recording, e.g. for inference."""
    saved = Tape._active
    Tape._active = []
    try:
        yield
    finally:
        Tape._active = saved


def _record(out: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    tape = Tape.current()
    if not needs or tape is None:
        return Tensor(out)
    node = Tensor(out, requires_grad=True, name=op)
    node._parents = parents
    node._backward = rule
    tape.nodes.append(node)
    return node


def backward(tape: Tape, output: Tensor, params: dict[str, Tensor] | None = None):
    """Propagate d(output)/d(.) back through ``tape``.

    Returns a dict of gradients for ``params`` (zeros for parameters that did
    not influence the output). When ``params`` is None, a dict keyed by the
    ids of every reached leaf is returned instead.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    if output._backward is None and output.requires_grad:
        leaves[id(output)] = output
    if params is None:
        return {k: grads[k] for k in leaves}
    return {
        name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
    }


def _shape_err(op: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a, b)
    A, B = a.data, b.data

    def rule(g):
        return g @ B.T, A.T @ g

    # einsum keeps each output row independent of the batch size (BLAS does not)
    return _record(np.einsum("ij,jk->ik", A, B), (a, b), rule, "matmul")


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise _shape_err(op, a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector added to every row of ``a``."""
    bcast = _row_broadcast("add", a, b)

    def rule(g):
        return g, (g.sum(axis=0) if bcast else g)

    return _record(a.data + b.data, (a, b), rule, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    bcast = _row_broadcast("sub", a, b)

    def rule(g):
        return g, -(g.sum(axis=0) if bcast else g)

    return _record(a.data - b.data, (a, b), rule, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("mul", a, b)
    A, B = a.data, b.data

    def rule(g):
        return g * B, g * A

    return _record(A * B, (a, b), rule, "mul")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def one_minus(a: Tensor) -> Tensor:
    return _record(1.0 - a.data, (a,), lambda g: (-g,), "one_minus")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    ndim = parts[0].data.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.data.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise _shape_err("concat", parts[0], p)
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def rule(g):
        index = [slice(None)] * ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _record(out, parts, rule, "concat")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; the backward rule scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected a matrix, got shape {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")
    n_rows = a.shape[0]

    def rule(g):
        flat = g.reshape(-1, g.shape[-1])
        out = np.zeros((n_rows, g.shape[-1]), dtype=g.dtype)
        np.add.at(out, index.reshape(-1), flat)
        return (out,)

    return _record(a.data[index], (a,), rule, "take_rows")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def _check_mask(op: str, a: Tensor, mask, axis: int) -> np.ndarray:
    if a.data.ndim != 3 or axis != 1:
        raise ShapeError(f"{op}: expected (batch, positions, features) input over axis 1, got {a.shape}")
    if mask is None:
        return np.ones(a.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ShapeError(f"{op}: mask shape {mask.shape} does not match {a.shape[:2]}")
    if not mask.any(axis=1).all():
        raise ShapeError(f"{op}: every row needs at least one valid position")
    return mask


def max_over_positions(a: Tensor, mask=None, axis: int = 1) -> Tensor:
    """Max over the position axis of a (batch, positions, features) array.

    Positions where ``mask`` is False are ignored. Ties send the gradient to
    the first maximal position.
    """
    mask = _check_mask("max_over_positions", a, mask, axis)
    x = np.where(mask[:, :, None], a.data, -np.inf)
    arg = x.argmax(axis=1)
    out = np.take_along_axis(a.data, arg[:, None, :], axis=1)[:, 0, :]
    shape = a.shape

    def rule(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(ga, arg[:, None, :], g[:, None, :], axis=1)
        return (ga,)

    return _record(out, (a,), rule, "max_over_positions")


def mean_over_positions(a: Tensor, mask=None, axis: int = 1) -> Tensor:
    mask = _check_mask("mean_over_positions", a, mask, axis)
    w = mask / mask.sum(axis=1, keepdims=True)
    # sequential accumulation: padded positions add exact zeros at the end
    out = np.zeros((a.shape[0], a.shape[2]), dtype=a.data.dtype)
    for p in range(a.shape[1]):
        out += w[:, p, None] * a.data[:, p, :]
    return _record(out, (a,), lambda g: (w[:, :, None] * g[:, None, :],), "mean_over_positions")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def cosine_rows(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Row-wise cosine similarity of two equally shaped matrices (or vectors)."""
    if a.shape != b.shape or a.data.ndim not in (1, 2):
        raise _shape_err("cosine", a, b)
    A, B = np.atleast_2d(a.data), np.atleast_2d(b.data)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    for label, norms in (("first", na), ("second", nb)):
        bad = np.flatnonzero(norms <= eps)
        if bad.size:
            raise DegenerateVectorError(
                f"cosine: {label} argument has near-zero norm at row {int(bad[0])}"
            )
    dots = np.einsum("ij,ij->i", A, B)
    cos = dots / (na * nb)
    vector = a.data.ndim == 1

    def rule(g):
        g = np.atleast_1d(g)[:, None]
        ga = g * (B / (na * nb)[:, None] - cos[:, None] * A / (na**2)[:, None])
        gb = g * (A / (na * nb)[:, None] - cos[:, None] * B / (nb**2)[:, None])
        if vector:
            return ga[0], gb[0]
        return ga, gb

    out = np.asarray(cos[0]) if vector else cos
    return _record(out, (a, b), rule, "cosine")


def cosine_similarity(a, b, eps: float = COSINE_EPS):
    """Cosine of two vectors; returns a scalar Tensor when given Tensors."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return cosine_rows(_wrap(a), _wrap(b), eps)
    return float(cosine_rows(constant(a), constant(b), eps).data)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. the array ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad
