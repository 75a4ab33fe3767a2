"""Dense tensors with a reverse-mode gradient tape.

Only the operators needed by re-parameterizable blocks are provided. Ops
record themselves on the active :class:`GradTape` when at least one input
requires a gradient; outside a tape every op is a plain numpy computation.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, NumericalError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_state = threading.local()


def _active_tape() -> Optional["GradTape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """A dense array plus an optional gradient buffer.

    Activations are NCHW; parameters may have any rank. ``requires_grad``
    marks leaves whose ``grad`` accumulates during :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[GradTape] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


TensorLike = Union[Tensor, np.ndarray, float]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


@dataclass
class GradTape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so insertion order is a topological
    order and backward simply walks the list in reverse.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "GradTape":
        self._outer = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._outer

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        output.requires_grad = True
        output._tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(op, output, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if self.consumed:
            raise RuntimeError("backward already ran on this tape")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward needs an explicit gradient for non-scalar outputs")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): grad}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.tape_id is None:
                    if inp.grad is None:
                        inp.grad = np.array(g, dtype=inp.data.dtype, copy=True).reshape(inp.shape)
                    else:
                        inp.grad += g.reshape(inp.shape)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
        self.nodes.clear()
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    if loss._tape is None:
        raise ValueError("loss is not attached to a gradient tape")
    loss._tape.backward(loss)


def _maybe_record(op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, pad: int, stride: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise DimensionError(f"kernel {axis} extent {k} exceeds padded input {axis} {size + 2 * pad}")
    return span // stride + 1


def _taps(size: int, k: int, stride: int, out: int):
    return [slice(i, i + stride * (out - 1) + 1, stride) for i in range(k)]


_CHUNK_BYTES = 4 << 20  # column blocks this size stay cache-friendly


def _chunks(n: int, row_bytes: int):
    step = max(1, min(n, _CHUNK_BYTES // max(row_bytes, 1)))
    return [(a, min(n, a + step)) for a in range(0, n, step)]


def _im2col(xh: np.ndarray, kh, kw, sh, sw, ho, wo, buf: Optional[np.ndarray] = None) -> np.ndarray:
    """Columns (N*Ho*Wo, kh*kw*C) gathered from a padded NHWC array."""
    n, _, _, c = xh.shape
    if kh == kw == 1 and sh == sw == 1:
        return np.ascontiguousarray(xh).reshape(n * ho * wo, c)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xh.dtype) if buf is None else buf[:n]
    for i, rs in enumerate(_taps(0, kh, sh, ho)):
        for j, cs in enumerate(_taps(0, kw, sw, wo)):
            cols[:, :, :, i, j, :] = xh[:, rs, cs, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(dcols: np.ndarray, dxh: np.ndarray, kh, kw, sh, sw, ho, wo) -> None:
    """Scatter-add column gradients into ``dxh`` (padded NHWC, pre-zeroed)."""
    n, _, _, c = dxh.shape
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    for i, rs in enumerate(_taps(0, kh, sh, ho)):
        for j, cs in enumerate(_taps(0, kw, sw, wo)):
            dxh[:, rs, cs, :] += d[:, :, :, i, j, :]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCHW input with a (C_out, C_in, kh, kw) kernel.

    Implemented as im2col followed by a matrix multiply, in batch chunks so
    the column buffer stays small; columns are gathered channel-last, which
    keeps the copies contiguous. Columns are rebuilt in backward instead of
    being kept alive between passes.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D NCHW, got rank {x.data.ndim}")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got rank {weight.data.ndim}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"channel axis mismatch: input has {c}, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias axis mismatch: expected ({co},), got {bias.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("stride must be positive")
    ho = _conv_out_size(h, kh, ph, sh, "height")
    wo = _conv_out_size(w, kw, pw, sw, "width")

    dtype = np.result_type(x.data, weight.data)
    xh = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=dtype)
    xh[:, ph : ph + h, pw : pw + w, :] = x.data.transpose(0, 2, 3, 1)
    wm = weight.data.transpose(0, 2, 3, 1).reshape(co, -1).astype(dtype, copy=False)
    k = kh * kw * c
    spans = _chunks(n, ho * wo * k * xh.itemsize)
    buf = np.empty((spans[0][1], ho, wo, kh, kw, c), dtype=dtype) if len(spans) > 1 else None

    out = np.empty((n, ho, wo, co), dtype=dtype)
    for a, b in spans:
        np.matmul(_im2col(xh[a:b], kh, kw, sh, sw, ho, wo, buf), wm.T, out=out[a:b].reshape(-1, co))
    if bias is not None:
        out += bias.data
    out = Tensor(out.transpose(0, 3, 1, 2).copy())

    def _backward(g):
        gh = g.transpose(0, 2, 3, 1)
        gx = gw = gb = None
        need_w, need_x = weight.requires_grad, x.requires_grad
        gwm = np.zeros((co, k), dtype=dtype) if need_w else None
        dxh = np.zeros(xh.shape, dtype=dtype) if need_x else None
        for a, b in spans:
            g2 = np.ascontiguousarray(gh[a:b]).reshape(-1, co)
            if need_w:
                gwm += g2.T @ _im2col(xh[a:b], kh, kw, sh, sw, ho, wo, buf)
            if need_x:
                _col2im(g2 @ wm, dxh[a:b], kh, kw, sh, sw, ho, wo)
        if need_w:
            gw = gwm.reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        if need_x:
            gx = dxh[:, ph : ph + h, pw : pw + w, :].transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _maybe_record("conv2d", out, inputs, _backward)


def pad2d(x: Tensor, pad) -> Tensor:
    """Zero-pad the two spatial axes by ``pad`` (int or (ph, pw))."""
    ph, pw = _pair(pad)
    if ph == 0 and pw == 0:
        return x
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))))
    h, w = x.shape[2:]

    def _backward(g):
        return (g[:, :, ph : ph + h, pw : pw + w],)

    return _maybe_record("pad2d", out, (x,), _backward)


def avg_pool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Mean over each k x k window; zero padding counts toward the mean."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, k, padding, stride, "height")
    wo = _conv_out_size(w, k, padding, stride, "width")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    rows = _taps(0, k, stride, ho)
    cols = _taps(0, k, stride, wo)
    acc = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    for rs in rows:
        for cs in cols:
            acc += xp[:, :, rs, cs]
    out = Tensor(acc / (k * k))

    def _backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        share = g / (k * k)
        for rs in rows:
            for cs in cols:
                dxp[:, :, rs, cs] += share
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return _maybe_record("avg_pool2d", out, (x,), _backward)


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BatchNormParams:
    """Per-channel affine (gamma, beta) and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "") -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def running_std(self) -> np.ndarray:
        var = self.running_var.astype(np.float64) + self.eps
        if not np.all(var > 0):
            raise NumericalError("non-positive running variance in batch norm")
        return np.sqrt(var)


def batch_norm(x: Tensor, params: BatchNormParams, mode: str = "eval") -> Tensor:
    """Normalize each channel of an NCHW tensor.

    ``train`` uses batch statistics and updates the running averages by
    momentum; ``calibrate`` does the same without recording gradients;
    ``eval`` applies the frozen running statistics.
    """
    c = x.shape[1]
    if c != params.channels:
        raise DimensionError(f"channel axis mismatch: input has {c}, batch norm has {params.channels}")
    gamma, beta = params.gamma, params.beta
    gshape = (1, c, 1, 1)

    if mode == "eval":
        std = params.running_std.astype(x.dtype)
        scale = gamma.data / std
        shift = beta.data - params.running_mean * scale
        out = Tensor(x.data * scale.reshape(gshape) + shift.reshape(gshape))

        def _eval_backward(g):
            gx = g * scale.reshape(gshape)
            xhat = (x.data - params.running_mean.reshape(gshape)) / std.reshape(gshape)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _maybe_record("batch_norm_eval", out, (x, gamma, beta), _eval_backward)

    if mode not in ("train", "calibrate"):
        raise ValueError(f"unknown batch norm mode {mode!r}")

    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=axes)
    centered = x.data - mean.reshape(gshape)
    var = (centered * centered).mean(axis=axes)
    denom = var + params.eps
    if not np.all(denom > 0):
        raise NumericalError("non-positive batch variance in batch norm (NaN upstream?)")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = centered * inv_std.reshape(gshape)
    out = Tensor(xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape))

    unbiased = var * (m / max(m - 1, 1))
    mom = params.momentum
    params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
    params.running_var[...] = (1 - mom) * params.running_var + mom * unbiased

    if mode == "calibrate":
        return out

    def _backward(g):
        gsum = g.sum(axis=axes)
        gxhat_sum = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            coef = (gamma.data * inv_std / m).reshape(gshape)
            gx = coef * (m * g - gsum.reshape(gshape) - xhat * gxhat_sum.reshape(gshape))
        return gx, gxhat_sum, gsum

    return _maybe_record("batch_norm", out, (x, gamma, beta), _backward)


# ---------------------------------------------------------------------------
# elementwise and reductions


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(x.data * mask)
    return _maybe_record("relu", out, (x,), lambda g: (g * mask,))


def add_n(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"add_n shape mismatch: {shape} vs {t.shape}")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = Tensor(acc)
    return _maybe_record("add_n", out, tensors, lambda g: tuple(g for _ in tensors))


def scale(x: Tensor, s: Union[Tensor, float]) -> Tensor:
    """Multiply by a scalar; a Tensor scalar receives the contraction <g, x>."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise DimensionError(f"scale factor must hold one value, got shape {s.shape}")
        sv = s.data.reshape(())
        out = Tensor(x.data * sv)

        def _backward(g):
            return g * sv, np.array(np.vdot(g, x.data)).reshape(s.shape)

        return _maybe_record("scale", out, (x, s), _backward)
    sv = float(s)
    out = Tensor(x.data * x.data.dtype.type(sv))
    return _maybe_record("scale", out, (x,), lambda g: (g * sv,))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    out = Tensor(y)
    return _maybe_record("sigmoid", out, (x,), lambda g: (g * y * (1 - y),))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    out = np.empty_like(v, dtype=np.result_type(v.dtype, np.float32))
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def crop(x: Tensor, rows: slice, cols: slice) -> Tensor:
    """Spatial window of a 4-D kernel.

    The forward value is a numpy view, so it aliases ``x``. Backward scatters
    into the full extent, so several crops of one kernel accumulate there.
    """
    out = Tensor(x.data[:, :, rows, cols])

    def _backward(g):
        full = np.zeros_like(x.data)
        full[:, :, rows, cols] = g
        return (full,)

    return _maybe_record("crop", out, (x,), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def _backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _maybe_record("global_avg_pool", out, (x,), _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of a (N, features) input by a (out, features) weight."""
    xd = x.data.reshape(x.shape[0], -1)
    if xd.shape[1] != weight.shape[1]:
        raise DimensionError(f"feature axis mismatch: input has {xd.shape[1]}, weight expects {weight.shape[1]}")
    y = xd @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def _backward(g):
        gx = (g @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g.T @ xd
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _maybe_record("linear", out, inputs, _backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, classes) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(np.array(loss, dtype=logits.dtype))

    def _backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _maybe_record("softmax_cross_entropy", out, (logits,), _backward)


@dataclass
class ConvParams:
    """Kernel, optional bias and geometry of one convolution."""

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: Union[int, tuple] = 0

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.stride, self.padding)
