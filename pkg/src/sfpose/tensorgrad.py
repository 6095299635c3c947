"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tensor`` wraps a contiguous float64 numpy array. Differentiable
operations record a backward rule on a thread-local tape; ``backward``
replays the tape in reverse, accumulating gradients into every tensor
with ``requires_grad`` set. Each thread owns an independent tape, so
separate tapes may run on separate threads but a single tape is never
shared.

The primitive set is intentionally small: elementwise arithmetic with
numpy-style broadcasting, matmul (batched), strided conv2d and its
transpose, relu, exp, log, softmax, reductions, argmax selection,
masked selection and shape ops. ``grad_check`` verifies any scalar
function of a tensor against central finite differences.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "ContractViolation",
    "DomainError",
    "Tensor",
    "Tape",
    "no_grad",
    "current_tape",
    "reset_tape",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "transposed_conv2d",
    "relu",
    "exp",
    "log",
    "softmax",
    "sum",
    "mean",
    "max_with_argmax",
    "l2_norm",
    "masked_select",
    "stack",
    "reshape",
    "transpose",
]


class ContractViolation(ValueError):
    """An operation was called outside its contract (shapes, state, config)."""


class DomainError(ValueError):
    """A primitive received input outside its mathematical domain."""


class _Record:
    """One taped op: the output tensor plus the rule pushing grads to inputs."""

    __slots__ = ("output", "backward_fn")

    def __init__(self, output, backward_fn):
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered list of recorded ops, replayed in reverse by ``backward``."""

    def __init__(self):
        self.records = []

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.recording = True


_STATE = _ThreadState()


def current_tape() -> Tape:
    return _STATE.tape


def reset_tape() -> None:
    """Drop any recorded ops on this thread's tape."""
    _STATE.tape.clear()


class no_grad:
    """Context manager that suspends tape recording on this thread."""

    def __enter__(self):
        self._prev = _STATE.recording
        _STATE.recording = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.recording = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # note: ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """View of the same data with gradient tracking off."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _recording() -> bool:
    return _STATE.recording


def _record(out: Tensor, backward_fn) -> None:
    _STATE.tape.records.append(_Record(out, backward_fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _elementwise(name, a, b, out_data, grad_a, grad_b):
    out = Tensor(out_data)
    if _recording() and (a.requires_grad or b.requires_grad):
        out.requires_grad = True
        need_a, need_b = a.requires_grad, b.requires_grad

        def backward_fn(g):
            if need_a:
                _accumulate(a, _unbroadcast(grad_a(g), a.shape))
            if need_b:
                _accumulate(b, _unbroadcast(grad_b(g), b.shape))

        _record(out, backward_fn)
    return out


def _broadcast_op(name, a, b, fn):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = fn(a.data, b.data)
    except ValueError:
        raise ContractViolation(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b, out_data


def add(a, b):
    a, b, out = _broadcast_op("add", a, b, np.add)
    return _elementwise("add", a, b, out, lambda g: g, lambda g: g)


def sub(a, b):
    a, b, out = _broadcast_op("sub", a, b, np.subtract)
    return _elementwise("sub", a, b, out, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b, out = _broadcast_op("mul", a, b, np.multiply)
    ad, bd = a.data, b.data
    return _elementwise("mul", a, b, out, lambda g: g * bd, lambda g: g * ad)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    _, _, out = _broadcast_op("div", a, b, np.divide)
    ad, bd = a.data, b.data
    return _elementwise("div", a, b, out, lambda g: g / bd, lambda g: -g * ad / (bd * bd))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractViolation(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(out_data)
    if _recording() and (a.requires_grad or b.requires_grad):
        out.requires_grad = True
        ad, bd = a.data, b.data
        need_a, need_b = a.requires_grad, b.requires_grad

        def backward_fn(g):
            if need_a:
                _accumulate(a, _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape))
            if need_b:
                _accumulate(b, _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape))

        _record(out, backward_fn)
    return out


def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    if _recording() and a.requires_grad:
        out.requires_grad = True
        mask = a.data > 0.0

        def backward_fn(g):
            _accumulate(a, g * mask)

        _record(out, backward_fn)
    return out


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    out = Tensor(out_data)
    if _recording() and a.requires_grad:
        out.requires_grad = True

        def backward_fn(g):
            _accumulate(a, g * out_data)

        _record(out, backward_fn)
    return out


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input contains non-positive values")
    out = Tensor(np.log(a.data))
    if _recording() and a.requires_grad:
        out.requires_grad = True
        ad = a.data

        def backward_fn(g):
            _accumulate(a, g / ad)

        _record(out, backward_fn)
    return out


def softmax(a, axis=-1):
    """Softmax along ``axis`` with max subtraction for stability."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)
    if _recording() and a.requires_grad:
        out.requires_grad = True

        def backward_fn(g):
            inner = (g * p).sum(axis=axis, keepdims=True)
            _accumulate(a, p * (g - inner))

        _record(out, backward_fn)
    return out


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, axes, keepdims):
    if keepdims:
        return g
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))
    if _recording() and a.requires_grad:
        out.requires_grad = True
        shape = a.shape

        def backward_fn(g):
            _accumulate(a, np.broadcast_to(_expand_reduced(g, axes, keepdims), shape))

        _record(out, backward_fn)
    return out


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise ContractViolation("mean: reduction over zero elements")
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    if _recording() and a.requires_grad:
        out.requires_grad = True
        shape = a.shape

        def backward_fn(g):
            _accumulate(a, np.broadcast_to(_expand_reduced(g, axes, keepdims), shape) / count)

        _record(out, backward_fn)
    return out


def max_with_argmax(a, axis=None):
    """Max values and argmax indices; ties resolve to the lowest index.

    With ``axis=None`` the argmax is a flat row-major index and the value
    is a scalar tensor. Gradient routes to the argmax positions only.
    """
    a = _as_tensor(a)
    if axis is None:
        idx = int(np.argmax(a.data))
        out = Tensor(a.data.reshape(-1)[idx])
        if _recording() and a.requires_grad:
            out.requires_grad = True

            def backward_fn(g):
                z = np.zeros_like(a.data)
                z.reshape(-1)[idx] = g
                _accumulate(a, z)

            _record(out, backward_fn)
        return out, idx
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = Tensor(np.take_along_axis(a.data, np.expand_dims(idx, ax), ax).squeeze(ax))
    if _recording() and a.requires_grad:
        out.requires_grad = True

        def backward_fn(g):
            z = np.zeros_like(a.data)
            np.put_along_axis(z, np.expand_dims(idx, ax), np.expand_dims(g, ax), ax)
            _accumulate(a, z)

        _record(out, backward_fn)
    return out, idx


def l2_norm(a, axis=-1, keepdims=False):
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=keepdims))
    out = Tensor(n)
    if _recording() and a.requires_grad:
        out.requires_grad = True
        ad = a.data

        def backward_fn(g):
            ge = np.broadcast_to(_expand_reduced(g, axes, keepdims), ad.shape)
            ne = np.broadcast_to(_expand_reduced(n, axes, keepdims), ad.shape)
            # undefined at the origin; clamp keeps the zero vector's grad at zero
            _accumulate(a, ge * ad / np.maximum(ne, 1e-300))

        _record(out, backward_fn)
    return out


def masked_select(a, mask):
    """Row-major 1-D selection of elements where ``mask`` is True."""
    a = _as_tensor(a)
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ContractViolation("masked_select: mask must be boolean")
    if mask.shape != a.shape:
        raise ContractViolation(f"masked_select: mask shape {mask.shape} != tensor shape {a.shape}")
    out = Tensor(a.data[mask])
    if _recording() and a.requires_grad:
        out.requires_grad = True

        def backward_fn(g):
            z = np.zeros_like(a.data)
            z[mask] = g
            _accumulate(a, z)

        _record(out, backward_fn)
    return out


def stack(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractViolation("stack: empty input")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ContractViolation(f"stack: mismatched shapes {shape} vs {t.shape}")
    out = Tensor(np.stack([t.data for t in ts], axis=axis))
    if _recording() and any(t.requires_grad for t in ts):
        out.requires_grad = True
        ax = axis % out.ndim

        def backward_fn(g):
            for i, t in enumerate(ts):
                if t.requires_grad:
                    _accumulate(t, np.take(g, i, axis=ax))

        _record(out, backward_fn)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {shape}") from None
    out = Tensor(out_data)
    if _recording() and a.requires_grad:
        out.requires_grad = True
        orig = a.shape

        def backward_fn(g):
            _accumulate(a, g.reshape(orig))

        _record(out, backward_fn)
    return out


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractViolation(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    out = Tensor(a.data.transpose(axes))
    if _recording() and a.requires_grad:
        out.requires_grad = True
        inv = tuple(np.argsort(axes))

        def backward_fn(g):
            _accumulate(a, g.transpose(inv))

        _record(out, backward_fn)
    return out


def _getitem(a, idx):
    a = _as_tensor(a)
    if isinstance(idx, (np.ndarray, list, Tensor)):
        raise ContractViolation("getitem: only basic indexing is supported, use masked_select")
    if isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list, Tensor)) for i in idx):
        raise ContractViolation("getitem: only basic indexing is supported, use masked_select")
    out = Tensor(a.data[idx])
    if _recording() and a.requires_grad:
        out.requires_grad = True

        def backward_fn(g):
            z = np.zeros_like(a.data)
            z[idx] += g
            _accumulate(a, z)

        _record(out, backward_fn)
    return out


def _pair(v):
    if isinstance(v, int):
        return v, v
    return int(v[0]), int(v[1])


def _im2col(xp, kh, kw, sh, sw, oh, ow):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols


def _col2im(cols, xp_shape, kh, kw, sh, sw, oh, ow):
    out = np.zeros(xp_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols[:, :, i, j]
    return out


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, x (B,C,H,W) with w (F,C,kH,kW) -> (B,F,OH,OW)."""
    x, w = _as_tensor(x), _as_tensor(w)
    bt = None if b is None else _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ContractViolation(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d: channel mismatch, input {x.shape} kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    bs, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if bt is not None and bt.shape != (f,):
        raise ContractViolation(f"conv2d: bias shape {bt.shape} != ({f},)")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ContractViolation(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow).reshape(bs, c * kh * kw, oh * ow)
    wf = w.data.reshape(f, c * kh * kw)
    out_data = np.matmul(wf, cols).reshape(bs, f, oh, ow)
    if bt is not None:
        out_data += bt.data.reshape(1, f, 1, 1)
    out = Tensor(out_data)
    inputs_grad = x.requires_grad or w.requires_grad or (bt is not None and bt.requires_grad)
    if _recording() and inputs_grad:
        out.requires_grad = True
        need_x, need_w = x.requires_grad, w.requires_grad
        need_b = bt is not None and bt.requires_grad

        def backward_fn(g):
            gf = g.reshape(bs, f, oh * ow)
            if need_b:
                _accumulate(bt, g.sum(axis=(0, 2, 3)))
            if need_w:
                gw = np.tensordot(gf, cols, axes=([0, 2], [0, 2]))
                _accumulate(w, gw.reshape(w.shape))
            if need_x:
                gcols = np.matmul(wf.T, gf).reshape(bs, c, kh, kw, oh, ow)
                gxp = _col2im(gcols, xp.shape, kh, kw, sh, sw, oh, ow)
                gx = gxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else gxp
                _accumulate(x, gx)

        _record(out, backward_fn)
    return out


def transposed_conv2d(x, w, b=None, stride=1, padding=0):
    """Transposed 2-D convolution, x (B,C,H,W) with w (C,F,kH,kW) -> (B,F,OH,OW).

    Output size is (H-1)*stride + kH - 2*padding, the gradient map of the
    matching forward convolution.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    bt = None if b is None else _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ContractViolation(f"transposed_conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ContractViolation(f"transposed_conv2d: channel mismatch, input {x.shape} kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    bs, c, h, wd = x.shape
    _, f, kh, kw = w.shape
    if bt is not None and bt.shape != (f,):
        raise ContractViolation(f"transposed_conv2d: bias shape {bt.shape} != ({f},)")
    oh = (h - 1) * sh + kh - 2 * ph
    ow = (wd - 1) * sw + kw - 2 * pw
    if oh < 1 or ow < 1:
        raise ContractViolation(f"transposed_conv2d: kernel {w.shape} does not fit input {x.shape}")
    wf = w.data.reshape(c, f * kh * kw)
    xf = x.data.reshape(bs, c, h * wd)
    cols = np.matmul(wf.T, xf).reshape(bs, f, kh, kw, h, wd)
    padded_shape = (bs, f, oh + 2 * ph, ow + 2 * pw)
    outp = _col2im(cols, padded_shape, kh, kw, sh, sw, h, wd)
    out_data = outp[:, :, ph : ph + oh, pw : pw + ow] if (ph or pw) else outp
    out_data = np.ascontiguousarray(out_data)
    if bt is not None:
        out_data += bt.data.reshape(1, f, 1, 1)
    out = Tensor(out_data)
    inputs_grad = x.requires_grad or w.requires_grad or (bt is not None and bt.requires_grad)
    if _recording() and inputs_grad:
        out.requires_grad = True
        need_x, need_w = x.requires_grad, w.requires_grad
        need_b = bt is not None and bt.requires_grad

        def backward_fn(g):
            if need_b:
                _accumulate(bt, g.sum(axis=(0, 2, 3)))
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else g
            gcols = _im2col(gp, kh, kw, sh, sw, h, wd).reshape(bs, f * kh * kw, h * wd)
            if need_x:
                gx = np.matmul(wf, gcols).reshape(bs, c, h, wd)
                _accumulate(x, gx)
            if need_w:
                gw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2]))
                _accumulate(w, gw.reshape(w.shape))

        _record(out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Replay this thread's tape in reverse from a scalar loss, then clear it."""
    if not isinstance(loss, Tensor):
        raise ContractViolation("backward: loss must be a Tensor")
    if loss.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("backward: loss does not depend on any tracked tensor")
    tape = _STATE.tape
    if not tape.records:
        raise ContractViolation("backward: tape is empty")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is not None:
            rec.backward_fn(g)
    tape.clear()


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and
    central finite differences.

    ``f`` must be a scalar-valued function that re-reads ``x`` on each call
    and must be differentiable at ``x`` (perturb inputs off relu kinks and
    argmax ties). Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if not isinstance(x, Tensor):
        raise ContractViolation("grad_check: x must be a Tensor")
    prev_flag = x.requires_grad
    x.requires_grad = True
    x.grad = None
    reset_tape()
    try:
        out = f(x)
        backward(out)
        analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad = prev_flag
        x.grad = None
    flat = x.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic_flat[i] - numeric) / max(1e-8, abs(analytic_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
