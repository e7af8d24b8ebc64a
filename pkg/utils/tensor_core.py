"""Dense float64 tensors with tape-based reverse-mode gradients.

Feature maps are rank-4 (n, c, h, w) arrays; the attention MLP works on
(n, d) matrices and losses are 0-d scalars, so `Tensor` itself accepts any
rank and the convolution/pooling ops check for rank 4.

Ops record themselves on the innermost active `GradTape` of the calling
thread. Without an active tape they only compute the forward value, which
keeps inference free of bookkeeping and lets independent tapes run on
separate threads over shared, read-only parameters.
"""
import logging
import threading
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_tape_state = threading.local()
_branch_state = threading.local()
_finite_checks = True


def set_finite_checks(enabled: bool):
    """Toggle the NaN/Inf check run on every forward output under __debug__"""
    global _finite_checks
    _finite_checks = enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# Feature maps are rank-4 tensors
Tensor4 = Tensor


def tensor4(data, requires_grad: bool = False) -> Tensor:
    """Build a rank-4 tensor, checking rank and that every dimension is >= 1"""
    result = Tensor(data, requires_grad=requires_grad)
    if result.data.ndim != 4 or min(result.shape) < 1:
        raise ShapeError(f"expected a non-empty rank-4 (n, c, h, w) array, got shape {result.shape}")
    return result


class Parameter(Tensor):
    """A named learnable tensor; grad starts at zero and accumulates"""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class GradTape:
    """Ordered record of executed ops, replayed backward by `backward`"""

    def __init__(self):
        self._records: List[Tuple[Tensor, Tuple[Tensor, ...], Callable]] = []
        self._watched: Dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable):
        for tensor in inputs:
            if tensor.requires_grad:
                self._watched[id(tensor)] = tensor
        self._records.append((output, tuple(inputs), backward))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into `.grad` of every leaf that requires it"""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

        for output, inputs, backward in reversed(self._records):
            upstream = grads.pop(id(output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(inputs, backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad

        # what is left belongs to leaves
        for key, grad in grads.items():
            tensor = self._watched.get(key)
            if tensor is None:
                continue
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _tape_stack() -> List[GradTape]:
    if not hasattr(_tape_state, "stack"):
        _tape_state.stack = []
    return _tape_state.stack


def current_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward value as an op output.

    `backward(upstream)` must return one gradient (or None) per input.
    """
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if __debug__ and _finite_checks and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite values in op output of shape {out.shape}")
    if needs_grad:
        tape.record(out, inputs, backward)
    return out


def note_branches(pattern: np.ndarray):
    """Log which side of a kink each element took; a no-op unless `grad_check` is listening"""
    log = getattr(_branch_state, "log", None)
    if log is not None:
        log.append(np.array(pattern, copy=True))


def _require_rank4(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected rank-4 (n, c, h, w), got shape {x.shape}")


def _require_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --- convolution and pooling ---

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    _require_rank4(x, "conv2d input")
    _require_rank4(weight, "conv2d weight")
    n, c_in, h, w = x.shape
    c_out, w_in, k, k2 = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, weight {weight.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for weight {weight.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # (n, c_in, h_out, w_out, k, k)
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        grad_padded = np.zeros_like(padded)
        row_end = stride * (h_out - 1) + 1
        col_end = stride * (w_out - 1) + 1
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i:i + row_end:stride, j:j + col_end:stride] += contrib.transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, pad:pad + h, pad:pad + w] if pad else grad_padded
        return grad_x, grad_w, grad_b

    return record_op(out, (x, weight, bias), backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling; ties go to the first position in row-major order"""
    _require_rank4(x, "maxpool2d input")
    if k != 2 or stride != 2:
        raise ShapeError(f"maxpool2d supports k=2, stride=2 only (got k={k}, stride={stride})")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {x.shape}")

    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    winner = windows.argmax(axis=-1)[..., None]
    note_branches(winner)
    out = np.take_along_axis(windows, winner, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros_like(windows)
        np.put_along_axis(routed, winner, g[..., None], axis=-1)
        grad = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad,)

    return record_op(out, (x,), backward)


def _bin_edges(size: int, bins: int) -> List[int]:
    return [(i * size) // bins for i in range(bins + 1)]


def adaptive_avgpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bin i spans [floor(i*H/out_h), floor((i+1)*H/out_h)), same for W"""
    _require_rank4(x, "adaptive_avgpool2d input")
    n, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"adaptive_avgpool2d: target {out_h}x{out_w} exceeds input {x.shape}")
    rows = _bin_edges(h, out_h)
    cols = _bin_edges(w, out_w)

    out = np.empty((n, c, out_h, out_w), dtype=DTYPE)
    for i in range(out_h):
        for j in range(out_w):
            block = x.data[:, :, rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            # shifted by the bin's first element so constant bins average exactly
            anchor = block[:, :, :1, :1]
            out[:, :, i, j] = anchor[:, :, 0, 0] + (block - anchor).sum(axis=(2, 3)) / block[0, 0].size

    def backward(g):
        grad = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                area = (rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j])
                grad[:, :, rows[i]:rows[i + 1], cols[j]:cols[j + 1]] += g[:, :, i, j][:, :, None, None] / area
        return (grad,)

    return record_op(out, (x,), backward)


def _interp_axis(in_size: int, out_size: int):
    scale = in_size / out_size
    source = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0.0, in_size - 1)
    low = np.floor(source).astype(np.intp)
    high = np.minimum(low + 1, in_size - 1)
    return low, high, source - low


def _interp_matrix(low, high, frac, in_size: int) -> np.ndarray:
    matrix = np.zeros((len(low), in_size), dtype=DTYPE)
    rows = np.arange(len(low))
    np.add.at(matrix, (rows, low), 1.0 - frac)
    np.add.at(matrix, (rows, high), frac)
    return matrix


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with align-corners=false and border clamping"""
    _require_rank4(x, "bilinear_upsample input")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input {x.shape}")
    row_lo, row_hi, row_t = _interp_axis(h, out_h)
    col_lo, col_hi, col_t = _interp_axis(w, out_w)

    # lo + t * (hi - lo) keeps constant maps exactly constant
    rows = x.data[:, :, row_lo, :] + row_t[:, None] * (x.data[:, :, row_hi, :] - x.data[:, :, row_lo, :])
    out = rows[:, :, :, col_lo] + col_t * (rows[:, :, :, col_hi] - rows[:, :, :, col_lo])

    def backward(g):
        along_h = _interp_matrix(row_lo, row_hi, row_t, h)
        along_w = _interp_matrix(col_lo, col_hi, col_t, w)
        return (along_h.T @ g @ along_w,)

    return record_op(out, (x,), backward)


# --- pointwise and reductions ---

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branches(mask)
    return record_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    positive = x.data >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x.data[positive]))
    shifted = np.exp(x.data[~positive])
    out[~positive] = shifted / (1.0 + shifted)
    return record_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return record_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Scale each channel by s, given per channel (c,) or per item and channel (n, c)"""
    _require_rank4(x, "scale_channels input")
    n, c = x.shape[:2]
    if s.shape == (c,):
        factor = s.data[None, :, None, None]
    elif s.shape == (n, c):
        factor = s.data[:, :, None, None]
    else:
        raise ShapeError(f"scale_channels: scale {s.shape} does not fit input {x.shape}")

    def backward(g):
        grad_s = (g * x.data).sum(axis=(2, 3))
        if s.data.ndim == 1:
            grad_s = grad_s.sum(axis=0)
        return g * factor, grad_s

    return record_op(x.data * factor, (x, s), backward)


def scale_pixels(x: Tensor, m: Tensor) -> Tensor:
    """Scale every channel of each pixel by a (n, 1, h, w) map"""
    _require_rank4(x, "scale_pixels input")
    n, _, h, w = x.shape
    if m.shape != (n, 1, h, w):
        raise ShapeError(f"scale_pixels: map {m.shape} does not fit input {x.shape}")
    return record_op(
        x.data * m.data,
        (x, m),
        lambda g: (g * m.data, (g * x.data).sum(axis=1, keepdims=True)),
    )


def scale_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of x by the single value held in s"""
    if s.data.size != 1:
        raise ShapeError(f"scale_scalar: scale must hold one value, got {s.shape}")
    value = s.data.reshape(-1)[0]
    return record_op(
        x.data * value,
        (x, s),
        lambda g: (g * value, np.full(s.shape, (g * x.data).sum())),
    )


def concat_channels(*tensors: Tensor) -> Tensor:
    for t in tensors:
        _require_rank4(t, "concat_channels input")
    first = tensors[0]
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"concat_channels: shape mismatch {first.shape} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return record_op(
        np.concatenate([t.data for t in tensors], axis=1),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=1)),
    )


def sum_all(x: Tensor) -> Tensor:
    return record_op(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0]),))


def global_avg(x: Tensor) -> Tensor:
    """Per-channel spatial mean, (n, c, h, w) -> (n, c)"""
    _require_rank4(x, "global_avg input")
    area = x.shape[2] * x.shape[3]
    return record_op(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),),
    )


def global_max(x: Tensor) -> Tensor:
    """Per-channel spatial max, (n, c, h, w) -> (n, c); ties go to the first index"""
    _require_rank4(x, "global_max input")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    winner = flat.argmax(axis=2)[..., None]
    note_branches(winner)

    def backward(g):
        grad = np.zeros_like(flat)
        np.put_along_axis(grad, winner, g[..., None], axis=2)
        return (grad.reshape(x.shape),)

    return record_op(np.take_along_axis(flat, winner, axis=2)[..., 0], (x,), backward)


def channel_mean(x: Tensor) -> Tensor:
    """Mean across channels, (n, c, h, w) -> (n, 1, h, w)"""
    _require_rank4(x, "channel_mean input")
    c = x.shape[1]
    return record_op(
        x.data.mean(axis=1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / c, x.shape).copy(),),
    )


def channel_max(x: Tensor) -> Tensor:
    """Max across channels, (n, c, h, w) -> (n, 1, h, w); ties go to the first channel"""
    _require_rank4(x, "channel_max input")
    winner = x.data.argmax(axis=1)[:, None]
    note_branches(winner)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, winner, g, axis=1)
        return (grad,)

    return record_op(np.take_along_axis(x.data, winner, axis=1), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (n, d_in) @ weight.T (d_in, d_out) + bias"""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"linear: expected matrix input/weight and vector bias, got {x.shape}, {weight.shape}, {bias.shape}")
    if weight.shape[1] != x.shape[1] or bias.shape[0] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape} / bias {bias.shape}")
    return record_op(
        x.data @ weight.data.T + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
    )


# --- gradient verification ---

def _traced(f: Callable[[], Tensor], name: str) -> Tuple[Tensor, List[np.ndarray]]:
    """Evaluate `f`, returning its output and the branch patterns its ops logged"""
    previous = getattr(_branch_state, "log", None)
    _branch_state.log = []
    try:
        value = f()
        branches = _branch_state.log
    finally:
        _branch_state.log = previous
    if value.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {value.shape}")
    if not np.isfinite(value.item()):
        raise NumericalError(f"non-finite loss while evaluating parameter {name}")
    return value, branches


def _same_branches(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    coords_per_param: int = 6,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    `f` recomputes a scalar from the current `.data` of `params`; up to
    `coords_per_param` coordinates are sampled per parameter. A coordinate
    whose +-eps step flips a relu mask, a max winner or a loss sign is
    skipped, as the difference quotient there straddles a kink. Pairs with
    |analytic| + |numeric| below `atol` count as agreeing. Raises
    NumericalError when every sampled coordinate had to be skipped.
    """
    params = list(params)
    names = [getattr(p, "name", f"tensor[{i}]") for i, p in enumerate(params)]
    first = names[0] if names else "-"
    for p in params:
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)

    with GradTape() as tape:
        try:
            loss, base = _traced(f, first)
        except NumericalError as e:
            raise NumericalError(f"non-finite loss at the base point ({first}): {e}") from e
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    worst, worst_at = 0.0, None
    checked = skipped = 0
    for p, name in zip(params, names):
        analytic = p.grad.copy()
        size = p.data.size
        coords = range(size) if size <= coords_per_param else rng.choice(size, coords_per_param, replace=False)
        for index in coords:
            original = p.data.flat[index]
            try:
                p.data.flat[index] = original + eps
                plus, plus_branches = _traced(f, name)
                p.data.flat[index] = original - eps
                minus, minus_branches = _traced(f, name)
            finally:
                p.data.flat[index] = original
            if not (_same_branches(base, plus_branches) and _same_branches(base, minus_branches)):
                skipped += 1
                continue
            checked += 1
            numeric = (plus.item() - minus.item()) / (2 * eps)
            exact = analytic.flat[index]
            scale = abs(exact) + abs(numeric)
            error = 0.0 if scale < atol else abs(exact - numeric) / scale
            if error > worst:
                worst, worst_at = error, (name, int(index), exact, numeric)

    if skipped and not checked:
        raise NumericalError(f"all {skipped} sampled coordinates sit within eps={eps:g} of a kink")
    if skipped:
        logger.debug("grad_check skipped %d of %d coordinates next to a kink", skipped, skipped + checked)
    if worst_at is not None:
        logger.debug("grad_check worst coordinate %s[%d]: analytic %.12g vs numeric %.12g", *worst_at)
    return worst


class ModelParams:
    """Named parameter collection with stable insertion order"""

    def __init__(self, config=None):
        self._params: Dict[str, Parameter] = {}
        self.config = config

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        param = Parameter(name, value)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        missing = sorted(set(self._params) - set(state))
        extra = sorted(set(state) - set(self._params))
        if missing or extra:
            raise KeyError(f"parameter sets differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, value in state.items():
            param = self._params[name]
            if value.shape != param.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} vs model shape {param.shape}")
            param.data = np.array(value, dtype=DTYPE)

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.config)
        for name, param in self._params.items():
            clone.add(name, param.data.copy())
        return clone


class ParamScope:
    """View of a ModelParams under a dotted name prefix"""

    def __init__(self, params: ModelParams, prefix: str):
        self.params = params
        self.prefix = prefix

    def full_name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Parameter:
        return self.params[self.full_name(name)]

    def __contains__(self, name: str) -> bool:
        return self.full_name(name) in self.params

    def add(self, name: str, value) -> Parameter:
        return self.params.add(self.full_name(name), value)

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self.params, self.full_name(prefix))
