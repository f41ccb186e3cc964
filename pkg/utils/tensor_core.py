"""Dense tensors with a recording tape for reverse-mode differentiation.

Ops run eagerly on numpy arrays. When a `Tape` is active (``with Tape() as tape:``)
and an op has an input that requires gradients, the op is recorded together with
its backward rule; `backward(loss, tape)` replays the tape in reverse. With no
active tape nothing is recorded (inference mode).

Images and feature maps are H x W x C, positional matrices are (M*N) x C.
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .error_handler import ConfigurationError, DimensionError, UsageError

logger = logging.getLogger(__name__)

_DTYPES = {'float64': np.float64, 'float32': np.float32}
_precision = np.float64

# per-thread stacks of active tapes, allocation counters and kink monitors
_local = threading.local()


def _stack(name: str) -> list:
    stack = getattr(_local, name, None)
    if stack is None:
        stack = []
        setattr(_local, name, stack)
    return stack


def set_precision(name: str) -> None:
    """Select the scalar type for new tensors: 'float64' (verification) or 'float32' (speed)"""
    global _precision
    if name not in _DTYPES:
        raise ConfigurationError(f"Unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    _precision = _DTYPES[name]
    logger.debug(f"Tensor precision set to {name}")


def get_dtype():
    return _precision


class Tensor:
    """Dense n-dimensional array with optional gradient tracking"""

    __slots__ = ('data', 'requires_grad', 'grad', 'name')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=_precision)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> 'Tensor':
        # ops hand over freshly computed arrays, no copy needed
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})"


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def from_numpy(array: np.ndarray, requires_grad: bool = False) -> Tensor:
    """Wrap an array as-is, keeping its dtype (used by file readers)"""
    return Tensor._wrap(np.asarray(array), requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def as_tensor(value: Union[Tensor, np.ndarray, float, Sequence]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of the differentiable ops executed while active"""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> 'Tape':
        _stack('tapes').append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _stack('tapes')
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def current_tape() -> Optional[Tape]:
    stack = _stack('tapes')
    return stack[-1] if stack else None


class inference_mode:
    """Suspend recording, even inside an active tape"""

    def __enter__(self):
        _stack('tapes').append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack('tapes').pop()
        return False


class AllocationCounter:
    """Collects the shapes of tensors allocated by ops while active (views are not allocations)"""

    def __init__(self):
        self.shapes: List[Tuple[int, ...]] = []

    def __enter__(self) -> 'AllocationCounter':
        _stack('counters').append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack('counters').remove(self)
        return False

    def count(self, shape: Sequence[int]) -> int:
        shape = tuple(shape)
        return sum(1 for s in self.shapes if s == shape)


class KinkMonitor:
    """Tracks how close the ops of a forward pass came to a non-differentiable point"""

    def __init__(self):
        self.min_distance = np.inf
        self.reports = 0

    def __enter__(self) -> 'KinkMonitor':
        _stack('monitors').append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack('monitors').remove(self)
        return False

    def observe(self, distance: float) -> None:
        self.reports += 1
        if distance < self.min_distance:
            self.min_distance = float(distance)


def monitoring_kinks() -> bool:
    return bool(_stack('monitors'))


def report_kink(distance: float) -> None:
    for monitor in _stack('monitors'):
        monitor.observe(distance)


def _kink_distance(pre: np.ndarray) -> float:
    # exact zeros come from upstream clipping and stay put under small perturbations
    magnitudes = np.abs(pre[pre != 0])
    return float(magnitudes.min()) if magnitudes.size else np.inf


def record_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
              view: bool = False) -> Tensor:
    """Wrap an op result and, when a tape is active, record its backward rule.

    `backward_fn` maps the upstream gradient (same shape as the output) to one
    gradient per input, or None for inputs that need none.
    """
    inputs = tuple(inputs)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=requires_grad)
    if not view:
        for counter in _stack('counters'):
            counter.shapes.append(out.shape)
    tape = current_tape()
    if tape is not None and requires_grad:
        tape.record(TapeEntry(name, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate `.grad` on every leaf tensor that requires gradients"""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward() loss does not depend on any tensor that requires gradients")

    produced = {id(entry.output) for entry in tape.entries}
    leaves = {}
    for entry in tape.entries:
        for t in entry.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    if id(loss) not in produced:
        leaves[id(loss)] = loss

    grads = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, ig in zip(entry.inputs, entry.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig

    for key, g in grads.items():
        leaf = leaves.get(key)
        if leaf is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Linear algebra and pointwise ops
# ---------------------------------------------------------------------------

def _require_rank(t: Tensor, rank: int, op: str) -> None:
    if t.ndim != rank:
        raise DimensionError(f"{op}: expected a rank-{rank} tensor, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_rank(a, 2, 'matmul')
    _require_rank(b, 2, 'matmul')
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def _backward(g):
        return (g @ b_data.T if a.requires_grad else None,
                a_data.T @ g if b.requires_grad else None)

    return record_op('matmul', (a, b), a_data @ b_data, _backward)


def matmul_relu(a: Tensor, b: Tensor) -> Tensor:
    """relu(a @ b) keeping only the output; the backward mask is output > 0"""
    _require_rank(a, 2, 'matmul_relu')
    _require_rank(b, 2, 'matmul_relu')
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul_relu: inner dimensions differ for shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data
    pre = a_data @ b_data
    if monitoring_kinks() and pre.size:
        report_kink(_kink_distance(pre))
    out = np.maximum(pre, 0)
    del pre

    def _backward(g):
        g = g * (out > 0)
        return (g @ b_data.T if a.requires_grad else None,
                a_data.T @ g if b.requires_grad else None)

    return record_op('matmul_relu', (a, b), out, _backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for a B x in batch, (in x out) weight and length-out bias"""
    _require_rank(x, 2, 'affine')
    _require_rank(weight, 2, 'affine')
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: shapes {x.shape}, {weight.shape} and bias {bias.shape} do not fit")
    x_data, w_data = x.data, weight.data

    def _backward(g):
        return (g @ w_data.T if x.requires_grad else None,
                x_data.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return record_op('affine', (x, weight, bias), x_data @ w_data + bias.data, _backward)


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def _check_pointwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        value = b
        return record_op('add_scalar', (a,), a.data + value, lambda g: (g,))
    _check_pointwise(a, b, 'add')
    a_shape, b_shape = a.shape, b.shape
    return record_op('add', (a, b), a.data + b.data,
                     lambda g: (_reduce_to(g, a_shape), _reduce_to(g, b_shape)))


def sub(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        value = b
        return record_op('sub_scalar', (a,), a.data - value, lambda g: (g,))
    _check_pointwise(a, b, 'sub')
    a_shape, b_shape = a.shape, b.shape
    return record_op('sub', (a, b), a.data - b.data,
                     lambda g: (_reduce_to(g, a_shape), _reduce_to(-g, b_shape)))


def hadamard(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_pointwise(a, b, 'hadamard')
    a_data, b_data = a.data, b.data

    def _backward(g):
        return (_reduce_to(g * b_data, a_data.shape) if a.requires_grad else None,
                _reduce_to(g * a_data, b_data.shape) if b.requires_grad else None)

    return record_op('hadamard', (a, b), a_data * b_data, _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    return record_op('scale', (a,), a.data * factor, lambda g: (g * factor,))


_ELEMENTWISE = {'add': add, 'sub': sub, 'hadamard': hadamard, 'scale': scale}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    if kind not in _ELEMENTWISE:
        raise UsageError(f"Unknown elementwise kind '{kind}'")
    return _ELEMENTWISE[kind](a, b)


def relu(a: Tensor) -> Tensor:
    if monitoring_kinks() and a.size:
        report_kink(_kink_distance(a.data))
    out = np.maximum(a.data, 0)
    # subgradient 0 at exactly 0
    return record_op('relu', (a,), out, lambda g: (g * (a.data > 0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record_op('sum', (a,), np.asarray(a.data.sum()),
                     lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record_op('mean', (a,), np.asarray(a.data.sum() / n),
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot reshape {a.shape} ({a.size} elements) into {shape}")
    src_shape = a.shape
    return record_op('reshape', (a,), a.data.reshape(shape),
                     lambda g: (g.reshape(src_shape),), view=True)


def transpose2d(a: Tensor) -> Tensor:
    _require_rank(a, 2, 'transpose2d')
    return record_op('transpose2d', (a,), a.data.T, lambda g: (g.T,), view=True)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Elements [start, stop) along `axis`; backward scatters into zeros"""
    if not 0 <= axis < a.ndim:
        raise DimensionError(f"slice: axis {axis} out of range for shape {a.shape}")
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError(f"slice: range [{start}, {stop}) out of bounds for extent {a.shape[axis]} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src_shape, dtype = a.shape, a.data.dtype

    def _backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record_op('slice', (a,), a.data[index], _backward, view=True)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
                t.shape[k] != first.shape[k] for k in range(first.ndim) if k != axis):
            raise DimensionError(
                f"concat: ragged operands {[t.shape for t in tensors]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        grads = []
        for k in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(bounds[k], bounds[k + 1])
            grads.append(g[tuple(index)])
        return grads

    return record_op('concat', tensors, np.concatenate([t.data for t in tensors], axis=axis), _backward)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a (B x n) matrix"""
    return concat([reshape(v, (1, v.size)) for v in vectors], axis=0)


def view(kind: str, a, **args) -> Tensor:
    if kind == 'reshape':
        return reshape(a, args['shape'])
    if kind == 'transpose2d':
        return transpose2d(a)
    if kind == 'slice':
        return slice_axis(a, args['axis'], args['start'], args['stop'])
    if kind == 'concat':
        return concat(a, args['axis'])
    raise UsageError(f"Unknown view kind '{kind}'")


# ---------------------------------------------------------------------------
# Spatial ops (H x W x C)
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernels_t: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of an H x W x Cin map with kh x kw x Cin x Cout kernels"""
    _require_rank(x, 3, 'conv2d')
    _require_rank(kernels_t, 4, 'conv2d')
    height, width, cin = x.shape
    kh, kw, kcin, cout = kernels_t.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels but kernels {kernels_t.shape} expect {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    span_h, span_w = height + 2 * pad - kh, width + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d: output extent not integral for input {height}x{width}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    out_h, out_w = span_h // stride + 1, span_w // stride + 1

    padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))[::stride, ::stride]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(out_h * out_w, kh * kw * cin)
    kmat = kernels_t.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(out_h, out_w, cout)

    def _backward(g):
        g2 = g.reshape(out_h * out_w, cout)
        dk = (cols.T @ g2).reshape(kernels_t.shape) if kernels_t.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray((g2 @ kmat.T).reshape(out_h, out_w, kh, kw, cin))
            dpad = kernels.col2im(dcols, padded.shape[0], padded.shape[1], stride)
            dx = dpad[pad:pad + height, pad:pad + width]
        return dx, dk

    return record_op('conv2d', (x, kernels_t), out, _backward)


def pool2d(x: Tensor, kind: str, window: int, stride: int) -> Tensor:
    _require_rank(x, 3, 'pool2d')
    if kind not in ('max', 'avg'):
        raise UsageError(f"pool2d: unknown kind '{kind}'")
    if window < 1 or stride < 1:
        raise ConfigurationError(f"pool2d: window and stride must be >= 1, got {window}, {stride}")
    height, width, _ = x.shape
    span_h, span_w = height - window, width - window
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"pool2d: output extent not integral for input {height}x{width}, window {window}, stride {stride}")
    out_h, out_w = span_h // stride + 1, span_w // stride + 1
    data = np.ascontiguousarray(x.data)

    if kind == 'max':
        out, argmax = kernels.max_pool_forward(data, window, stride, out_h, out_w)
        if monitoring_kinks():
            report_kink(kernels.max_pool_margin(data, window, stride, out_h, out_w))
        return record_op('max_pool', (x,), out, lambda g: (
            kernels.max_pool_backward(np.ascontiguousarray(g), argmax, height, width),))

    out = kernels.avg_pool_forward(data, window, stride, out_h, out_w)
    return record_op('avg_pool', (x,), out, lambda g: (
        kernels.avg_pool_backward(np.ascontiguousarray(g), window, stride, height, width),))


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 3, 'global_avg_pool')
    height, width, channels = x.shape
    n = height * width
    out = x.data.reshape(n, channels).sum(axis=0) / n

    def _backward(g):
        return (np.broadcast_to(g / n, (height, width, channels)).copy(),)

    return record_op('global_avg_pool', (x,), out, _backward)


def interpolation_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """(dst x src) align-corners linear interpolation weights: src_pos = dst_pos * (src-1)/(dst-1)"""
    weights = np.zeros((dst, src), dtype=dtype)
    if dst == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_rank(x, 3, 'bilinear_resize')
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"bilinear_resize: output extents must be >= 1, got {out_h}x{out_w}")
    height, width, channels = x.shape
    ry = interpolation_matrix(height, out_h, x.data.dtype)
    rx = interpolation_matrix(width, out_w, x.data.dtype)

    # separable: rows first, then columns
    rows = (ry @ x.data.reshape(height, width * channels)).reshape(out_h, width, channels)
    cols = rx @ rows.transpose(1, 0, 2).reshape(width, out_h * channels)
    out = np.ascontiguousarray(cols.reshape(out_w, out_h, channels).transpose(1, 0, 2))

    def _backward(g):
        g_cols = rx.T @ g.transpose(1, 0, 2).reshape(out_w, out_h * channels)
        g_rows = g_cols.reshape(width, out_h, channels).transpose(1, 0, 2)
        dx = ry.T @ np.ascontiguousarray(g_rows).reshape(out_h, width * channels)
        return (dx.reshape(height, width, channels),)

    return record_op('bilinear_resize', (x,), out, _backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_input: Optional[int] = None
    worst_index: Optional[Tuple[int, ...]] = None
    analytic: float = 0.0
    numeric: float = 0.0
    coords_checked: int = 0
    resamples: int = 0
    notes: List[str] = field(default_factory=list)


def _evaluate(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    return f(*inputs).item()


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
               resample: Optional[Callable[[np.random.Generator], Sequence[Tensor]]] = None,
               rng: Optional[np.random.Generator] = None, max_attempts: int = 20,
               kink_margin: Optional[float] = None, max_coords: Optional[int] = None,
               atol: float = 1e-9) -> GradCheckReport:
    """Compare autodiff gradients with central finite differences.

    Per coordinate: rel = |a - n| / max(1e-8, |a| + |n|). Coordinates whose absolute
    difference is within `atol` count as agreeing, since central differences cannot
    resolve below roundoff. When `resample` is given, probe points whose forward pass
    comes within `kink_margin` (default h) of a ReLU/pool/hinge kink are redrawn.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    margin = h if kink_margin is None else kink_margin
    inputs = list(inputs)
    resamples = 0

    for attempt in range(max_attempts + 1):
        for t in inputs:
            t.grad = None
        with KinkMonitor() as monitor, Tape() as tape:
            out = f(*inputs)
        if resample is not None and monitor.min_distance < margin and attempt < max_attempts:
            inputs = list(resample(rng))
            resamples += 1
            continue
        break
    backward(out, tape)
    tape.clear()

    report = GradCheckReport(max_rel_err=0.0, passed=True, resamples=resamples)
    if monitor.min_distance < margin:
        report.notes.append(f"probe within {monitor.min_distance:.3g} of a kink")

    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat_indices = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            flat_indices = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        for flat in flat_indices:
            index = np.unravel_index(flat, t.shape)
            probe = t.data.copy()
            probe[index] += h
            plus = _evaluate(f, inputs[:k] + [Tensor._wrap(probe)] + inputs[k + 1:])
            probe[index] -= 2 * h
            minus = _evaluate(f, inputs[:k] + [Tensor._wrap(probe)] + inputs[k + 1:])
            numeric = (plus - minus) / (2 * h)
            a = float(analytic[index])
            diff = abs(a - numeric)
            rel = 0.0 if diff <= atol else diff / max(1e-8, abs(a) + abs(numeric))
            report.coords_checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_input = k
                report.worst_index = tuple(int(i) for i in index)
                report.analytic = a
                report.numeric = numeric

    report.passed = report.max_rel_err < tol
    if not report.passed:
        logger.warning(
            f"grad_check failed: input {report.worst_input} at {report.worst_index}: "
            f"analytic {report.analytic:.6g} vs numeric {report.numeric:.6g} (rel {report.max_rel_err:.3g})")
    return report
