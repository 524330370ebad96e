"""Reverse-mode automatic differentiation over dense float64 tensors.

Every primitive is registered in :data:`OP_REGISTRY` with a forward and a
backward rule. Applying a primitive while a :class:`Tape` is active, and with
at least one input that requires a gradient, records a node on that tape;
:func:`backward` then walks the tape in reverse and accumulates gradients into
the leaf parameters.

Examples:
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(mul(x, x))
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import contextvars
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from functools import partial
from typing import Any, Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from latentprog.exceptions import (
    ConfigurationError,
    FrozenParameterError,
    NumericError,
    ShapeError,
    TapeError,
)

__all__ = [
    "OP_REGISTRY",
    "Node",
    "OpSpec",
    "Tape",
    "Tensor",
    "add",
    "apply_primitive",
    "backward",
    "concat",
    "conv2d",
    "embedding",
    "exp",
    "finite_checks_enabled",
    "log_softmax",
    "matmul",
    "mean",
    "minimum",
    "mul",
    "nll",
    "relu",
    "reshape",
    "scale",
    "set_finite_checks",
    "sigmoid",
    "slice_last",
    "softmax",
    "suspend_tape",
    "tanh",
    "total",
]

_ACTIVE_TAPE: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar(
    "latentprog_active_tape", default=None
)
_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    """Turn NaN/Inf checks at op boundaries on or off (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def finite_checks_enabled() -> bool:
    return _CHECK_FINITE


class Tensor:
    """Dense float64 array with an optional gradient accumulator.

    Args:
        data: Array-like payload, converted to float64.
        requires_grad: Whether gradients flow into this tensor.
        name: Optional parameter name used in error messages.
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.frozen = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(
                f"item() needs a single value, tensor has shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def freeze(self) -> None:
        """Mark as frozen: no gradients are recorded for or written to it."""
        self.frozen = True
        self.requires_grad = False

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        """Add ``grad`` into the accumulator (``+=`` across uses)."""
        if self.frozen:
            raise FrozenParameterError(
                f"Gradient written to frozen parameter '{self.name or '<unnamed>'}'"
            )
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, scale(other, -1.0))

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    """One recorded primitive application."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    backward: Callable[..., tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; the tape is active (per thread / context) inside
    the ``with`` block. A tape supports exactly one :func:`backward` call.

    Args:
        kink_tolerance: Inputs of relu (or operand gaps of minimum) within this
            distance of the non-differentiable point are logged in ``kinks``.
    """

    def __init__(self, kink_tolerance: float = 0.0):
        self.nodes: list[Node] = []
        self.kinks: list[str] = []
        self.kink_tolerance = kink_tolerance
        self.consumed = False
        self._token: contextvars.Token[Optional[Tape]] | None = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise TapeError("Cannot record on a tape that was already consumed")
        self.nodes.append(node)


@contextlib.contextmanager
def suspend_tape() -> Iterator[None]:
    """Temporarily deactivate recording (sampling, metrics, reward values)."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


@dataclass(frozen=True)
class OpSpec:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple[Optional[np.ndarray], ...]]
    kink: Callable[..., bool] | None = None


OP_REGISTRY: dict[str, OpSpec] = {}


def register_op(
    kind: str,
    forward: Callable[..., tuple[np.ndarray, Any]],
    backward: Callable[..., tuple[Optional[np.ndarray], ...]],
    kink: Callable[..., bool] | None = None,
) -> None:
    OP_REGISTRY[kind] = OpSpec(forward, backward, kink)


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Apply a registered primitive and record it on the active tape.

    Raises:
        ConfigurationError: Unknown op kind.
        ShapeError: Input shapes violate the op's shape rule.
        NumericError: Non-finite input or output while checks are enabled.
    """
    spec = OP_REGISTRY.get(kind)
    if spec is None:
        raise ConfigurationError(
            f"Unknown op kind: '{kind}'. Available: {', '.join(sorted(OP_REGISTRY))}"
        )
    arrays = tuple(t.data for t in inputs)
    if _CHECK_FINITE:
        for position, array in enumerate(arrays):
            if not np.all(np.isfinite(array)):
                raise NumericError(f"{kind}: non-finite value in input {position}")
    out, saved = spec.forward(*arrays, **attrs)
    if _CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericError(f"{kind}: non-finite value in output")

    tape = _ACTIVE_TAPE.get()
    record = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=record)
    if record:
        assert tape is not None
        if spec.kink is not None and spec.kink(*arrays, tol=tape.kink_tolerance):
            tape.kinks.append(kind)
        tape.record(
            Node(kind, tuple(inputs), result, saved, partial(spec.backward, **attrs))
        )
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d loss / d parameter into every leaf's ``grad``.

    Raises:
        TapeError: Loss is not scalar, not on the tape, or the tape was consumed.
    """
    if tape.consumed:
        raise TapeError("Tape already consumed; run a new forward pass")
    if loss.data.size != 1:
        raise TapeError(f"Loss must be scalar, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("Loss was not recorded on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        arrays = [t.data for t in node.inputs]
        input_grads = node.backward(upstream, node.saved, *arrays)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(grad)):
                raise NumericError(f"{node.kind}: non-finite gradient")
            key = id(tensor)
            if key in produced:
                grads[key] = grads[key] + grad if key in grads else grad
            else:
                tensor.accumulate_grad(grad)


# ---------------------------------------------------------------------------
# Primitive rules. Forward: (*arrays, **attrs) -> (output, saved).
# Backward: (upstream, saved, *arrays, **attrs) -> one grad (or None) per input.
# ---------------------------------------------------------------------------


def _sum_leading(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _matmul_fwd(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, Any]:
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(
            f"matmul: operands must be 2-D or 3-D, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch mismatch between {a.shape} and {b.shape}")
    return np.matmul(a, b), None


def _matmul_bwd(g: np.ndarray, saved: Any, a: np.ndarray, b: np.ndarray) -> tuple:
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _sum_leading(ga, a.shape), _sum_leading(gb, b.shape)


def _add_fwd(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, Any]:
    short, long_ = (a, b) if a.ndim <= b.ndim else (b, a)
    if short.shape != long_.shape[long_.ndim - short.ndim :]:
        raise ShapeError(
            f"add: shapes {a.shape} and {b.shape} only broadcast over leading axes"
        )
    return a + b, None


def _add_bwd(g: np.ndarray, saved: Any, a: np.ndarray, b: np.ndarray) -> tuple:
    return _sum_leading(g, a.shape), _sum_leading(g, b.shape)


def _same_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} must match")


def _mul_fwd(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, Any]:
    _same_shape("mul", a, b)
    return a * b, None


def _mul_bwd(g: np.ndarray, saved: Any, a: np.ndarray, b: np.ndarray) -> tuple:
    return g * b, g * a


def _scale_fwd(a: np.ndarray, factor: float) -> tuple[np.ndarray, Any]:
    return a * factor, None


def _scale_bwd(g: np.ndarray, saved: Any, a: np.ndarray, factor: float) -> tuple:
    return (g * factor,)


def _sigmoid_fwd(a: np.ndarray) -> tuple[np.ndarray, Any]:
    out = np.exp(-np.logaddexp(0.0, -a))
    return out, out


def _sigmoid_bwd(g: np.ndarray, out: np.ndarray, a: np.ndarray) -> tuple:
    return (g * out * (1.0 - out),)


def _tanh_fwd(a: np.ndarray) -> tuple[np.ndarray, Any]:
    out = np.tanh(a)
    return out, out


def _tanh_bwd(g: np.ndarray, out: np.ndarray, a: np.ndarray) -> tuple:
    return (g * (1.0 - out * out),)


def _relu_fwd(a: np.ndarray) -> tuple[np.ndarray, Any]:
    return np.maximum(a, 0.0), None


def _relu_bwd(g: np.ndarray, saved: Any, a: np.ndarray) -> tuple:
    return (g * (a > 0.0),)


def _relu_kink(a: np.ndarray, tol: float) -> bool:
    return bool(np.any(np.abs(a) <= tol))


def _exp_fwd(a: np.ndarray) -> tuple[np.ndarray, Any]:
    out = np.exp(a)
    return out, out


def _exp_bwd(g: np.ndarray, out: np.ndarray, a: np.ndarray) -> tuple:
    return (g * out,)


def _softmax_fwd(a: np.ndarray) -> tuple[np.ndarray, Any]:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def _softmax_bwd(g: np.ndarray, out: np.ndarray, a: np.ndarray) -> tuple:
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(a: np.ndarray) -> tuple[np.ndarray, Any]:
    peak = a.max(axis=-1, keepdims=True)
    lse = peak + np.log(np.exp(a - peak).sum(axis=-1, keepdims=True))
    out = a - lse
    return out, out


def _log_softmax_bwd(g: np.ndarray, out: np.ndarray, a: np.ndarray) -> tuple:
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _embedding_fwd(table: np.ndarray, ids: np.ndarray) -> tuple[np.ndarray, Any]:
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids outside [0, {table.shape[0]}) for table {table.shape}"
        )
    return table[ids], ids


def _embedding_bwd(
    g: np.ndarray, saved: np.ndarray, table: np.ndarray, **_: Any
) -> tuple:
    grad = np.zeros_like(table)
    np.add.at(grad, saved, g)
    return (grad,)


def _conv2d_geometry(
    x: np.ndarray, kernel: np.ndarray, stride: int
) -> tuple[int, int, int, int, int, int]:
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d: expected input (B,H,W,C) and kernel (kh,kw,C,O), "
            f"got {x.shape} and {kernel.shape}"
        )
    kh, kw, channels, out_channels = kernel.shape
    if x.shape[3] != channels or x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(
            f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}"
        )
    out_h = (x.shape[1] - kh) // stride + 1
    out_w = (x.shape[2] - kw) // stride + 1
    return kh, kw, channels, out_channels, out_h, out_w


def _conv2d_fwd(x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> tuple:
    kh, kw, channels, out_channels, out_h, out_w = _conv2d_geometry(x, kernel, stride)
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    windows = windows[:, :out_h, :out_w]
    # (B, oh, ow, C, kh, kw) -> rows of (kh, kw, C) patches
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(
        -1, kh * kw * channels
    )
    out = cols @ kernel.reshape(-1, out_channels)
    return out.reshape(x.shape[0], out_h, out_w, out_channels), cols


def _conv2d_bwd(
    g: np.ndarray, cols: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1
) -> tuple:
    kh, kw, channels, out_channels, out_h, out_w = _conv2d_geometry(x, kernel, stride)
    flat = g.reshape(-1, out_channels)
    grad_kernel = (cols.T @ flat).reshape(kernel.shape)
    patches = (flat @ kernel.reshape(-1, out_channels).T).reshape(
        x.shape[0], out_h, out_w, kh, kw, channels
    )
    grad_x = np.zeros_like(x)
    for row in range(out_h):
        for col in range(out_w):
            top, left = row * stride, col * stride
            grad_x[:, top : top + kh, left : left + kw, :] += patches[:, row, col]
    return grad_x, grad_kernel


def _minimum_fwd(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, Any]:
    _same_shape("minimum", a, b)
    return np.minimum(a, b), None


def _minimum_bwd(g: np.ndarray, saved: Any, a: np.ndarray, b: np.ndarray) -> tuple:
    first = a <= b
    return g * first, g * ~first


def _minimum_kink(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    return bool(np.any(np.abs(a - b) <= tol))


def _axis_size(a: np.ndarray, axis: int | None) -> int:
    return a.size if axis is None else a.shape[axis]


def _sum_fwd(a: np.ndarray, axis: int | None = None) -> tuple[np.ndarray, Any]:
    return np.asarray(a.sum(axis=axis)), None


def _sum_bwd(
    g: np.ndarray, saved: Any, a: np.ndarray, axis: int | None = None
) -> tuple:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_fwd(a: np.ndarray, axis: int | None = None) -> tuple[np.ndarray, Any]:
    return np.asarray(a.mean(axis=axis)), None


def _mean_bwd(
    g: np.ndarray, saved: Any, a: np.ndarray, axis: int | None = None
) -> tuple:
    (grad,) = _sum_bwd(g, saved, a, axis=axis)
    return (grad / _axis_size(a, axis),)


def _concat_fwd(*arrays: np.ndarray) -> tuple[np.ndarray, Any]:
    leading = {a.shape[:-1] for a in arrays}
    if len(leading) != 1:
        raise ShapeError(
            f"concat: leading shapes differ: {[a.shape for a in arrays]}"
        )
    return np.concatenate(arrays, axis=-1), [a.shape[-1] for a in arrays]


def _concat_bwd(g: np.ndarray, widths: list[int], *arrays: np.ndarray) -> tuple:
    cuts = np.cumsum(widths)[:-1]
    return tuple(np.split(g, cuts, axis=-1))


def _slice_fwd(a: np.ndarray, start: int, stop: int) -> tuple[np.ndarray, Any]:
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {a.shape}")
    return a[..., start:stop], None


def _slice_bwd(
    g: np.ndarray, saved: Any, a: np.ndarray, start: int, stop: int
) -> tuple:
    grad = np.zeros_like(a)
    grad[..., start:stop] = g
    return (grad,)


def _reshape_fwd(a: np.ndarray, shape: tuple[int, ...]) -> tuple[np.ndarray, Any]:
    try:
        return a.reshape(shape), None
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc


def _reshape_bwd(g: np.ndarray, saved: Any, a: np.ndarray, shape: tuple) -> tuple:
    return (g.reshape(a.shape),)


def _nll_fwd(log_probs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, Any]:
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.ndim != 2 or targets.shape != (log_probs.shape[0],):
        raise ShapeError(
            f"nll: expected (B,V) scores and (B,) targets, "
            f"got {log_probs.shape} and {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= log_probs.shape[1]):
        raise ShapeError(f"nll: targets outside [0, {log_probs.shape[1]})")
    rows = np.arange(log_probs.shape[0])
    return -log_probs[rows, targets], targets


def _nll_bwd(
    g: np.ndarray, saved: np.ndarray, log_probs: np.ndarray, **_: Any
) -> tuple:
    grad = np.zeros_like(log_probs)
    grad[np.arange(log_probs.shape[0]), saved] = -g
    return (grad,)


register_op("matmul", _matmul_fwd, _matmul_bwd)
register_op("add", _add_fwd, _add_bwd)
register_op("mul", _mul_fwd, _mul_bwd)
register_op("scale", _scale_fwd, _scale_bwd)
register_op("sigmoid", _sigmoid_fwd, _sigmoid_bwd)
register_op("tanh", _tanh_fwd, _tanh_bwd)
register_op("relu", _relu_fwd, _relu_bwd, kink=_relu_kink)
register_op("exp", _exp_fwd, _exp_bwd)
register_op("softmax", _softmax_fwd, _softmax_bwd)
register_op("log_softmax", _log_softmax_fwd, _log_softmax_bwd)
register_op("embedding", _embedding_fwd, _embedding_bwd)
register_op("conv2d", _conv2d_fwd, _conv2d_bwd)
register_op("minimum", _minimum_fwd, _minimum_bwd, kink=_minimum_kink)
register_op("sum", _sum_fwd, _sum_bwd)
register_op("mean", _mean_fwd, _mean_bwd)
register_op("concat", _concat_fwd, _concat_bwd)
register_op("slice", _slice_fwd, _slice_bwd)
register_op("reshape", _reshape_fwd, _reshape_bwd)
register_op("nll", _nll_fwd, _nll_bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [a], factor=float(factor))


def sigmoid(a: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [a])


def tanh(a: Tensor) -> Tensor:
    return apply_primitive("tanh", [a])


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", [a])


def exp(a: Tensor) -> Tensor:
    return apply_primitive("exp", [a])


def softmax(a: Tensor) -> Tensor:
    return apply_primitive("softmax", [a])


def log_softmax(a: Tensor) -> Tensor:
    return apply_primitive("log_softmax", [a])


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return apply_primitive("embedding", [table], ids=np.asarray(ids, dtype=np.int64))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    return apply_primitive("conv2d", [x, kernel], stride=int(stride))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("minimum", [a, b])


def total(a: Tensor, axis: int | None = None) -> Tensor:
    return apply_primitive("sum", [a], axis=axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return apply_primitive("mean", [a], axis=axis)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return apply_primitive("concat", list(tensors))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    return apply_primitive("slice", [a], start=int(start), stop=int(stop))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply_primitive("reshape", [a], shape=tuple(shape))


def nll(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    return apply_primitive(
        "nll", [log_probs], targets=np.asarray(targets, dtype=np.int64)
    )
