"""Dense float64 tensors with a gradient tape.

Every differentiable operation computes its forward value with numpy and,
when a :class:`Tape` is active and some input requires a gradient, records a
closure that maps the output gradient onto its inputs.  ``Tape.backward``
replays those closures in reverse recording order.  There is no expression
graph; the model is a fixed pipeline and the tape is just a list.

Example::

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = total(matmul(w, w))
    tape.backward(loss)
    w.grad  # -> [[4., 4.], [4., 4.]]
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParseError, ValidationError

DTYPE = np.float64
TENSOR_MAGIC = b"RGT1"
ARCHIVE_MAGIC = b"RGA1"


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE, copy=True, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class Tape:
    """Records backward closures in forward order.

    Tapes nest; operations record on the innermost active one.  Outside any
    tape, operations only compute values.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate gradients from ``root`` to every recorded input.

        Gradients accumulate into ``.grad`` of tensors that require them, so
        calling backward twice on the same parameters sums the results.
        """
        if seed is None:
            seed = np.ones_like(root.data)
        _accumulate(root, np.asarray(seed, dtype=DTYPE))
        for out, backward in reversed(self.records):
            if out.grad is not None:
                backward(out.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def record(value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``value`` as an op output and register ``backward`` on the tape.

    ``backward(grad_out)`` must return one gradient array (or None) per input,
    in the same order as ``inputs``.  Module-specific operations (crop, LRN,
    graph messages, losses) are built on this.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(value, dtype=DTYPE)
    out.grad = None
    out.requires_grad = needs
    out.name = None
    tape = Tape.active()
    if needs and tape is not None:
        def run(grad_out, _inputs=tuple(inputs)):
            grads = backward(grad_out)
            for t, g in zip(_inputs, grads):
                if g is not None and t.requires_grad:
                    _accumulate(t, g)
        tape.records.append((out, run))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Elementwise ``add``, ``sub``, ``mul`` or ``scale``.

    ``b`` is a tensor of the same shape or a Python scalar.  ``scale``
    requires a scalar.
    """
    if op == "scale":
        if isinstance(b, Tensor):
            raise ValidationError("scale takes a scalar factor")
        s = float(b)
        return record(a.data * s, (a,), lambda g: (g * s,))
    if not isinstance(b, Tensor):
        s = float(b)
        if op == "add":
            return record(a.data + s, (a,), lambda g: (g,))
        if op == "sub":
            return record(a.data - s, (a,), lambda g: (g,))
        if op == "mul":
            return record(a.data * s, (a,), lambda g: (g * s,))
        raise ValidationError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data
    if op == "add":
        return record(A + B, (a, b), lambda g: (g, g))
    if op == "sub":
        return record(A - B, (a, b), lambda g: (g, -g))
    if op == "mul":
        return record(A * B, (a, b), lambda g: (g * B, g * A))
    raise ValidationError(f"unknown elementwise op {op!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, s):
    return elementwise("scale", a, s)


def one_minus(x: Tensor) -> Tensor:
    return record(1.0 - x.data, (x,), lambda g: (-g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` applied along the last axis of ``x``.

    Leading axes of ``x`` are treated as a batch.
    """
    W = weight.data
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (W.shape[0],):
        raise DimensionError(
            f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    X = x.data
    y = X @ W.T
    if bias is not None:
        y = y + bias.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        dW = g2.T @ X.reshape(-1, W.shape[1])
        grads = [g @ W, dW]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(y, inputs, backward)


def conv2d_3x3(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Zero same-padded 3×3 cross-correlation.

    ``x`` is C_in×H×W (or N×C_in×H×W), ``kernels`` C_out×C_in×3×3.
    """
    K = kernels.data
    if K.ndim != 4 or K.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d_3x3: kernels must be C_out×C_in×3×3, got {K.shape}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d_3x3: input must be C×H×W or N×C×H×W, got {x.shape}")
    X = x.data if batched else x.data[None]
    n, c_in, h, w = X.shape
    c_out = K.shape[0]
    if K.shape[1] != c_in:
        raise DimensionError(
            f"conv2d_3x3: input has {c_in} channels, kernels {K.shape} expect {K.shape[1]}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d_3x3: bias {bias.shape} does not match {c_out} outputs")

    padded = np.zeros((n, c_in, h + 2, w + 2))
    padded[:, :, 1:-1, 1:-1] = X
    # cols[n, y, x, c, i, j] = padded[n, c, y + i, x + j]
    cols = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c_in * 9)
    Kf = K.reshape(c_out, c_in * 9)
    y = (cols @ Kf.T + bias.data).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g_flat = g.reshape(n, c_out, h, w).transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        dK = (g_flat.T @ cols).reshape(K.shape)
        db = g_flat.sum(axis=0)
        dcols = (g_flat @ Kf).reshape(n, h, w, c_in, 3, 3)
        dpad = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                dpad[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dpad[:, :, 1:-1, 1:-1]
        return (dx if batched else dx[0]), dK, db

    return record(y if batched else y[0], (x, kernels, bias), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        y = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return record(y, tuple(tensors), lambda g: np.split(g, bounds, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    y = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return record(y, tuple(tensors),
                  lambda g: [np.take(g, i, axis=axis) for i in range(n)])


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take one slice along ``axis`` (the axis is dropped)."""
    y = np.take(x.data, index, axis=axis)

    def backward(g):
        dx = np.zeros_like(x.data)
        idx = [slice(None)] * x.data.ndim
        idx[axis] = index
        dx[tuple(idx)] = g
        return (dx,)

    return record(y, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    y = x.data.reshape(tuple(shape))
    return record(y, (x,), lambda g: (g.reshape(x.shape),))


def pad_last(x: Tensor, width: int) -> Tensor:
    """Append ``width`` zeros along the last axis."""
    if width < 0:
        raise DimensionError(f"pad_last: negative width {width}")
    if width == 0:
        return x
    pad = [(0, 0)] * (x.data.ndim - 1) + [(0, width)]
    d = x.shape[-1]
    return record(np.pad(x.data, pad), (x,), lambda g: (g[..., :d],))


def total(x: Tensor) -> Tensor:
    return record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return record(np.array(x.data.sum() / n), (x,),
                  lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# ---------------------------------------------------------------------------
# Parameters and initialization
# ---------------------------------------------------------------------------

class ParamRegistry:
    """Ordered name → Tensor map of learnable parameters."""

    def __init__(self):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ValidationError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def num_params(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self._entries.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._entries.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(state)
        extra = set(state) - set(self._entries)
        if missing or extra:
            raise ValidationError(
                f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in self._entries.items():
            if state[n].shape != t.shape:
                raise DimensionError(f"{n}: stored shape {state[n].shape} != {t.shape}")
            t.data = np.array(state[n], dtype=DTYPE, copy=True)


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int],
                   fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=tuple(shape))


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric):
    """|a - n| / max(1, |a| + |n|), elementwise."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    return np.abs(a - n) / np.maximum(1.0, np.abs(a) + np.abs(n))


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    passed: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def group_max(self, depth: int = 1) -> dict[str, float]:
        """Max error per name prefix (first ``depth`` dot-separated parts)."""
        out: dict[str, float] = {}
        for name, err in self.max_rel_error.items():
            key = ".".join(name.split(".")[:depth])
            out[key] = max(out.get(key, 0.0), err)
        return out


def _scalar(t) -> float:
    v = t.item() if isinstance(t, Tensor) else float(t)
    if not math.isfinite(v):
        raise NumericError(f"objective is not finite: {v}")
    return v


def finite_diff_check(f: Callable[[ParamRegistry], Tensor], params: ParamRegistry,
                      epsilon: float = 1e-4, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f(params)`` must return a scalar Tensor and be deterministic.  Every
    element of every parameter is perturbed in place and restored.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    params.zero_grad()
    with Tape() as tape:
        out = f(params)
    _scalar(out)
    tape.backward(out)
    analytic = params.grads()
    params.zero_grad()

    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = _scalar(f(params))
            flat[i] = orig - epsilon
            fm = _scalar(f(params))
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * epsilon)
        err = relative_error(analytic[name].reshape(-1), numeric)
        worst = float(err.max()) if err.size else 0.0
        report.max_rel_error[name] = worst
        report.passed[name] = worst <= tolerance
    return report


# ---------------------------------------------------------------------------
# Binary tensor format
# ---------------------------------------------------------------------------

def tensor_to_bytes(data) -> bytes:
    arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=DTYPE)
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns the array and the end offset."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise ParseError("bad tensor magic", location=f"byte {offset}")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise ParseError("truncated rank", location=f"byte {pos}")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise ParseError("truncated shape", location=f"byte {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise ParseError(f"expected {count} float64 values", location=f"byte {pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(DTYPE)
    return arr.reshape(shape), end


def save_tensor(path, data) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(data))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ParseError("trailing bytes after tensor", location=f"byte {end}")
    return arr


def archive_to_bytes(named: dict[str, np.ndarray]) -> bytes:
    """Named-tensor archive: magic, u32 count, then (u32 name length, utf-8 name, tensor)."""
    parts = [ARCHIVE_MAGIC, struct.pack("<I", len(named))]
    for name, arr in named.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, tensor_to_bytes(arr)]
    return b"".join(parts)


def archive_from_bytes(buf: bytes) -> OrderedDict[str, np.ndarray]:
    if buf[:4] != ARCHIVE_MAGIC:
        raise ParseError("bad archive magic", location="byte 0")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        if len(buf) < pos + 4:
            raise ParseError("truncated entry header", location=f"byte {pos}")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        out[name], pos = tensor_from_bytes(buf, pos)
    if pos != len(buf):
        raise ParseError("trailing bytes after archive", location=f"byte {pos}")
    return out
