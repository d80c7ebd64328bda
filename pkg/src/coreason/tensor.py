"""Dense-tensor arithmetic with reverse-mode gradients.

Tensors wrap row-major numpy arrays. Each differentiable op records its
parents and a backward closure on the output node; ``backward()`` walks the
recorded graph in reverse topological order. Values are immutable once an
op has produced them — training code mutates only leaf parameters between
steps.

Randomness comes exclusively from :class:`RngState`, which is backed by the
Philox 4x64 counter-based generator, so identical seeds give identical
streams across runs and platforms.

Two float widths are supported: float32 (training default) and float64
(gradient-check builds). ``precision("float64")`` switches the default for
newly created tensors.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(name: str) -> None:
    global _DEFAULT_DTYPE
    if name not in ("float32", "float64"):
        raise ConfigError(f"unsupported dtype {name!r}; use float32 or float64")
    _DEFAULT_DTYPE = np.float32 if name == "float32" else np.float64


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    set_default_dtype(name)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording; ops inside produce constant tensors."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class RngState:
    """Deterministic random stream (Philox 4x64 counter generator).

    The stream is fully determined by ``(seed, stream)``: the pair becomes
    the Philox key, and the generator's counter is the stream position.
    ``derive(seed, index)`` is the documented way to get independent
    per-example or per-purpose substreams.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def derive(cls, seed: int, index: int) -> "RngState":
        return cls(seed, index)

    def spawn(self, index: int) -> "RngState":
        """Independent child stream; does not advance this stream."""
        return RngState(self.seed ^ 0x9E3779B97F4A7C15, (self.stream << 16) ^ index)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(_DEFAULT_DTYPE)

    def normal(self, scale: float, shape=()) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(_DEFAULT_DTYPE)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq: Sequence, size=None, replace=True):
        idx = self._gen.choice(len(seq), size=size, replace=replace)
        if size is None:
            return seq[int(idx)]
        return [seq[int(i)] for i in idx]

    def mask(self, shape, keep_prob: float) -> np.ndarray:
        """Bernoulli keep-mask drawn as uniforms < keep_prob."""
        return self._gen.random(size=shape) < keep_prob

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        st = self._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = int(state["buffer_pos"])
        st["has_uint32"] = int(state["has_uint32"])
        st["uinteger"] = int(state["uinteger"])
        self._gen.bit_generator.state = st

    @property
    def position(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self._gen.bit_generator.state["state"]["counter"])


class Tensor:
    """A dense array plus an optional gradient slot.

    ``data`` is row-major; ``grad`` (same shape) is filled by ``backward()``.
    Non-leaf tensors additionally carry the parents and backward closure
    recorded by the op that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what} (shape {self.shape})")
        return self

    def backward(self) -> None:
        """Reverse-mode pass from this (scalar) tensor through the tape."""
        if self.data.size != 1:
            raise InputError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; the module-level functions are the canonical API
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Wrap an op result, recording the tape edge only when it matters."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # copy on first write: g may be (or alias) another node's grad buffer
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the operand shape it broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes; leading axes follow
    standard broadcasting (a stacked operand against a plain matrix is the
    common case)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from e

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # stacked rows against one weight matrix: single product
                cols_a, cols_g = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, cols_a).T @ g.reshape(-1, cols_g)
                _accum(b, gb)
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g,
                                       b.shape))

    return _node(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-axis bias vector for ``b``."""
    if a.shape == b.shape:
        def backward(g: np.ndarray) -> None:
            _accum(a, g)
            _accum(b, g)
        return _node(a.data + b.data, (a, b), backward)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward(g: np.ndarray) -> None:
            _accum(a, g)
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
        return _node(a.data + b.data, (a, b), backward)
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be a 2-D column (n,1) mask."""
    if a.shape == b.shape:
        def backward(g: np.ndarray) -> None:
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        return _node(a.data * b.data, (a, b), backward)
    if a.ndim == 2 and b.shape == (a.shape[0], 1):
        def backward(g: np.ndarray) -> None:
            _accum(a, g * b.data)
            _accum(b, (g * a.data).sum(axis=1, keepdims=True))
        return _node(a.data * b.data, (a, b), backward)
    raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")


def scale(x: Tensor, s: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accum(x, g * s)

    return _node(x.data * x.data.dtype.type(s), (x,), backward)


def transpose(x: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accum(x, np.swapaxes(g, axis1, axis2))

    return _node(np.swapaxes(x.data, axis1, axis2), (x,), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def backward(g: np.ndarray) -> None:
        _accum(x, g.reshape(old))

    return _node(np.ascontiguousarray(x.data).reshape(shape), (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; operand order is preserved."""
    if not parts:
        raise InputError("concat of zero tensors")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base):
            raise ShapeError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        for ax, (i, j) in enumerate(zip(base, other)):
            if ax != (axis % len(base)) and i != j:
                raise ShapeError(f"concat extent mismatch on axis {ax}: "
                                 f"{parts[0].shape} vs {p.shape}")
    extents = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + extents)

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalar or 1-D tensors into consecutive rows of a new axis-0."""
    if not parts:
        raise InputError("stack of zero tensors")

    def backward(g: np.ndarray) -> None:
        for i, p in enumerate(parts):
            _accum(p, g[i].reshape(p.shape))

    return _node(np.stack([p.data for p in parts], axis=0), tuple(parts), backward)


def tile_leading(x: Tensor, k: int) -> Tensor:
    """Repeat ``x`` ``k`` times along a new leading axis."""
    if k < 1:
        raise InputError(f"tile_leading needs k >= 1, got {k}")

    def backward(g: np.ndarray) -> None:
        _accum(x, g.sum(axis=0))

    out = np.broadcast_to(x.data, (k,) + x.shape)
    return _node(np.ascontiguousarray(out), (x,), backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D source, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise InputError(f"gather_rows index out of range for {x.shape[0]} rows")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)

    return _node(x.data[idx], (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _node(np.where(mask, x.data, x.data.dtype.type(0)), (x,), backward)


def dropout(x: Tensor, rate: float, rng: RngState | None, training: bool) -> Tensor:
    """Inverted dropout: train mode zeroes with prob ``rate`` and rescales
    survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise InputError("training-mode dropout needs an RngState")
    keep = rng.mask(x.shape, 1.0 - rate)
    scale_ = x.data.dtype.type(1.0 / (1.0 - rate))
    factor = keep.astype(x.data.dtype) * scale_

    def backward(g: np.ndarray) -> None:
        _accum(x, g * factor)

    return _node(x.data * factor, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - inner))

    return _node(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature dim {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv_std)

    return _node(out, (x, gamma, beta), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _node(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / n, x.shape).astype(x.data.dtype))

    return _node(np.asarray(x.data.mean()), (x,), backward)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor, giving one row."""
    if x.ndim != 2:
        raise ShapeError(f"mean_rows needs 2-D input, got {x.shape}")
    n = x.shape[0]

    def backward(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / n, x.shape).astype(x.data.dtype))

    return _node(x.data.mean(axis=0), (x,), backward)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of ``label`` over a 1-D logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise InputError(f"label {label} out of range for {n} logits")
    z = logits.data - logits.data.max()
    ex = np.exp(z)
    probs = ex / ex.sum()
    loss = np.asarray(-(z[label] - np.log(ex.sum())))

    def backward(g: np.ndarray) -> None:
        grad = probs.copy()
        grad[label] -= 1.0
        _accum(logits, grad * g)

    return _node(loss, (logits,), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b as one tape node, the workhorse projection.

    ``w`` must be a plain matrix and ``b`` a vector matching its columns;
    ``x`` may carry leading stack axes.
    """
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise ShapeError(f"affine needs 2-D w and matching bias, "
                         f"got w {w.shape}, b {b.shape}")
    if x.ndim < 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine shape mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data + b.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        cols_x, cols_g = x.shape[-1], g.shape[-1]
        if w.requires_grad:
            _accum(w, x.data.reshape(-1, cols_x).T @ g.reshape(-1, cols_g))
        if b.requires_grad:
            _accum(b, g.reshape(-1, cols_g).sum(axis=0))

    return _node(out, (x, w, b), backward)


def xavier_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
