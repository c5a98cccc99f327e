"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every op here takes :class:`Tensor` (or plain array/scalar) operands, computes
its forward value eagerly with numpy and, when a :class:`Tape` is active and
some operand requires a gradient, records a backward closure on that tape.
Running ops outside any tape is the inference path: nothing is recorded.

    >>> x = Parameter(np.ones((1, 1, 2, 2)), "x")
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> _ = tape.backward(loss)
    >>> x.grad[0, 0, 0, 0]
    2.0
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NonFiniteError, ShapeError

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus a flag saying whether gradients should flow to it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name, gradient buffer and optimizer slots."""

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.opt_state: dict = {}

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order and :meth:`backward` replays them in exact
    reverse order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence, backward: Callable, op: str) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward, op))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(.) to every grad-tracked leaf reachable from ``loss``.

        Parameters accumulate into ``.grad`` (so several losses can be summed
        before an optimizer step); other grad-tracked leaves get ``.grad``
        overwritten. Returns ``{id(leaf): gradient}`` for the leaves reached.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._outputs:
                    leaves[key] = inp
        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != leaf.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match leaf shape {leaf.shape}")
            if isinstance(leaf, Parameter):
                leaf.grad += g
            else:
                leaf.grad = np.array(g)
            result[key] = g
        return result


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _tracks(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _emit(out_data: np.ndarray, inputs: Sequence, backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(_tracks(i) for i in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def _bw(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return _emit(out, (a, b), _bw, "add")


def neg(a) -> Tensor:
    return _emit(-_data(a), (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def _bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if _tracks(a) else None
        gb = _unbroadcast(g * ad, bd.shape) if _tracks(b) else None
        return ga, gb

    return _emit(ad * bd, (a, b), _bw, "mul")


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def _bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if _tracks(a) else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if _tracks(b) else None
        return ga, gb

    return _emit(ad / bd, (a, b), _bw, "div")


def square(a) -> Tensor:
    ad = _data(a)
    return _emit(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first."""
    ad = _data(a)
    if floor is None:
        out = np.log(ad)

        def _bw(g):
            return (g / ad,)
    else:
        live = ad > floor
        out = np.log(np.maximum(ad, floor))

        def _bw(g):
            return (np.where(live, g / np.where(live, ad, 1.0), 0.0),)

    return _emit(out, (a,), _bw, "log")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    out = ad.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return _emit(np.asarray(out), (a,), _bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    ad = _data(a)
    n = ad.size if axis is None else int(np.prod([ad.shape[i] for i in np.atleast_1d(axis)]))
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    return _emit(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),), "reshape")


def getitem(a, index) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not differentiable here."""
    ad = _data(a)

    def _bw(g):
        full = np.zeros_like(ad)
        full[index] += g
        return (full,)

    return _emit(np.array(ad[index]), (a,), _bw, "getitem")


# ----------------------------------------------------------------- layers

def _check_rank4(x: np.ndarray, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 batch x channels x height x width input, got shape {x.shape}")


def _resolve_padding(padding, kh: int, kw: int):
    """Return ((top, bottom, left, right), numpy pad mode)."""
    if padding == "same" or padding == "reflect":
        th, tw = kh - 1, kw - 1
        pads = (th // 2, th - th // 2, tw // 2, tw - tw // 2)
        return pads, ("reflect" if padding == "reflect" else "constant")
    if padding == "valid":
        return (0, 0, 0, 0), "constant"
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        p = int(padding)
        return (p, p, p, p), "constant"
    raise ValueError(f"unknown padding {padding!r}; use 'same', 'reflect', 'valid' or an int")


def _pad(x: np.ndarray, pads, mode: str) -> np.ndarray:
    if not any(pads):
        return x
    t, b, l, r = pads
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)), mode=mode)


def _pad_adjoint(gp: np.ndarray, pads, mode: str, h: int, w: int) -> np.ndarray:
    t, b, l, r = pads
    if not any(pads):
        return gp
    if mode == "constant":
        return np.ascontiguousarray(gp[:, :, t:t + h, l:l + w])
    ih = np.pad(np.arange(h), (t, b), mode=mode)
    iw = np.pad(np.arange(w), (l, r), mode=mode)
    gh = np.zeros(gp.shape[:2] + (h, gp.shape[3]))
    np.add.at(gh, (slice(None), slice(None), ih), gp)
    gx = np.zeros(gp.shape[:2] + (h, w))
    np.add.at(gx, (slice(None), slice(None), slice(None), iw), gh)
    return gx


def conv2d(x, kernel, bias=None, stride: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW input.

    ``kernel`` has shape (out_channels, in_channels, kh, kw). ``padding`` is
    ``"same"`` (zero border, default), ``"reflect"`` (mirror border, same
    extents), ``"valid"`` or a non-negative int.
    """
    xd, kd = _data(x), _data(kernel)
    _check_rank4(xd, "conv2d")
    if kd.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got shape {kd.shape}")
    n, c, h, w = xd.shape
    f, ck, kh, kw = kd.shape
    if ck != c:
        raise ShapeError(
            f"conv2d kernel shape {kd.shape} expects {ck} input channels but input shape {xd.shape} has {c}"
        )
    if int(stride) != stride or stride < 1:
        raise ValueError(f"conv2d stride must be an integer >= 1, got {stride}")
    bd = None
    if bias is not None:
        bd = _data(bias)
        if bd.shape != (f,):
            raise ShapeError(f"conv2d bias shape {bd.shape} does not match kernel shape {kd.shape}")
    pads, mode = _resolve_padding(padding, kh, kw)
    xp = _pad(xd, pads, mode)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel shape {kd.shape} larger than padded input shape {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kd.reshape(f, -1)
    out = cols @ kmat.T
    if bd is not None:
        out += bd
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gk = gb = None
        if _tracks(kernel):
            gk = (g2.T @ cols).reshape(kd.shape)
        if bias is not None and _tracks(bias):
            gb = g2.sum(axis=0)
        if _tracks(x):
            # (n, c*kh*kw, ho*wo) keeps each kernel tap's slab contiguous
            dcols = np.matmul(kmat.T, g.reshape(n, f, ho * wo)).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros((n, c, hp, wp))
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, i, j]
            gx = _pad_adjoint(gxp, pads, mode, h, w)
        return gx, gk, gb

    return _emit(out, (x, kernel, bias), _bw, "conv2d")


def max_pool2d(x, window: int = 2, stride: int | None = None) -> Tensor:
    """Per-window maximum; ties resolve to the first position in row-major order."""
    stride = window if stride is None else stride
    xd = _data(x)
    _check_rank4(xd, "max_pool2d")
    n, c, h, w = xd.shape
    if window < 1 or stride < 1:
        raise ValueError("max_pool2d window and stride must be >= 1")
    if h < window or w < window or (h - window) % stride or (w - window) % stride:
        raise ShapeError(
            f"max_pool2d: spatial extents {(h, w)} are not divisible under window {window} / stride {stride}"
        )
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        di, dj = np.divmod(idx, window)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        gx = np.zeros_like(xd)
        if window <= stride:
            gx[ni, ci, rows, cols] = g
        else:
            np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    return _emit(np.ascontiguousarray(out), (x,), _bw, "max_pool2d")


def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    m = n * factor
    src = (np.arange(m) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    a = np.zeros((m, n))
    rows = np.arange(m)
    np.add.at(a, (rows, i0), 1.0 - lam)
    np.add.at(a, (rows, i1), lam)
    return a


def upsample(x, factor: int, mode: str = "nearest") -> Tensor:
    """Integer spatial upsampling; bilinear uses the align-corners-false convention."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    xd = _data(x)
    _check_rank4(xd, "upsample")
    n, c, h, w = xd.shape
    if mode == "nearest":
        out = xd.repeat(factor, axis=2).repeat(factor, axis=3)

        def _bw(g):
            return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)
    elif mode == "bilinear":
        ah, aw = _bilinear_matrix(h, factor), _bilinear_matrix(w, factor)
        out = ah @ xd @ aw.T

        def _bw(g):
            return (ah.T @ g @ aw,)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return _emit(out, (x,), _bw, "upsample")


def activation(x, kind: str) -> Tensor:
    """Elementwise ``elu`` (alpha=1), ``relu`` or ``sigmoid``."""
    xd = _data(x)
    if kind == "elu":
        out = np.where(xd >= 0, xd, np.expm1(np.minimum(xd, 0.0)))

        def _bw(g):
            return (np.where(xd >= 0, g, g * (out + 1.0)),)
    elif kind == "relu":
        out = np.maximum(xd, 0.0)

        def _bw(g):
            return (g * (xd > 0),)
    elif kind == "sigmoid":
        e = np.exp(-np.abs(xd))
        out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        # keep outputs strictly inside (0, 1) even where float64 saturates
        out = np.clip(out, np.finfo(DTYPE).tiny, 1.0 - np.finfo(DTYPE).epsneg)

        def _bw(g):
            return (g * out * (1.0 - out),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _emit(out, (x,), _bw, kind)


def elu(x) -> Tensor:
    return activation(x, "elu")


def relu(x) -> Tensor:
    return activation(x, "relu")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def softmax_channels(x) -> Tensor:
    """Softmax over axis 1 (channels), stabilised by max-subtraction."""
    xd = _data(x)
    if xd.ndim < 2:
        raise ShapeError(f"softmax_channels needs a channel axis, got shape {xd.shape}")
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit(out, (x,), _bw, "softmax")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, mean=None, var=None):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.mean = None if mean is None else np.asarray(mean, dtype=DTYPE)
        self.var = None if var is None else np.asarray(var, dtype=DTYPE)

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalisation for (N, C) or (N, C, H, W) input.

    Train mode normalises with batch statistics and folds them into
    ``state`` with ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode uses the running statistics and requires them to exist.
    """
    xd, gd, bd = _data(x), _data(gamma), _data(beta)
    if xd.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects rank 2 or 4 input, got shape {xd.shape}")
    c = xd.shape[1]
    if gd.shape != (c,) or bd.shape != (c,):
        raise ShapeError(f"batch_norm gamma {gd.shape} / beta {bd.shape} must have length {c}")
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if xd.ndim == 2 else (1, c, 1, 1)
    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
        out = gd.reshape(bshape) * xhat + bd.reshape(bshape)
        if not state.initialized:
            state.mean = np.zeros(c)
            state.var = np.ones(c)
        state.mean = state.momentum * state.mean + (1.0 - state.momentum) * mu
        state.var = state.momentum * state.var + (1.0 - state.momentum) * var
        m = xd.size // c

        def _bw(g):
            gg = (g * xhat).sum(axis=axes) if _tracks(gamma) else None
            gb = g.sum(axis=axes) if _tracks(beta) else None
            gx = None
            if _tracks(x):
                dxhat = g * gd.reshape(bshape)
                gx = (inv.reshape(bshape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            return gx, gg, gb
    elif mode == "eval":
        if not state.initialized:
            raise ValueError("batch_norm eval mode needs running statistics; run train mode first")
        inv = 1.0 / np.sqrt(state.var + state.eps)
        xhat = (xd - state.mean.reshape(bshape)) * inv.reshape(bshape)
        out = gd.reshape(bshape) * xhat + bd.reshape(bshape)

        def _bw(g):
            gg = (g * xhat).sum(axis=axes) if _tracks(gamma) else None
            gb = g.sum(axis=axes) if _tracks(beta) else None
            gx = g * (gd * inv).reshape(bshape) if _tracks(x) else None
            return gx, gg, gb
    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    return _emit(out, (x, gamma, beta), _bw, "batch_norm")


def global_avg_pool(x) -> Tensor:
    xd = _data(x)
    _check_rank4(xd, "global_avg_pool")
    n, c, h, w = xd.shape

    def _bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), xd.shape).copy(),)

    return _emit(xd.mean(axis=(2, 3)), (x,), _bw, "global_avg_pool")


def fully_connected(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias``; ``weight`` is (out_features, in_features)."""
    xd, wd = _data(x), _data(weight)
    if xd.ndim != 2 or wd.ndim != 2 or wd.shape[1] != xd.shape[1]:
        raise ShapeError(f"fully_connected: weight shape {wd.shape} incompatible with input shape {xd.shape}")
    out = xd @ wd.T
    if bias is not None:
        bd = _data(bias)
        if bd.shape != (wd.shape[0],):
            raise ShapeError(f"fully_connected: bias shape {bd.shape} does not match weight shape {wd.shape}")
        out = out + bd

    def _bw(g):
        gx = g @ wd if _tracks(x) else None
        gw = g.T @ xd if _tracks(weight) else None
        gb = g.sum(axis=0) if bias is not None and _tracks(bias) else None
        return gx, gw, gb

    return _emit(out, (x, weight, bias), _bw, "fully_connected")


def concat_channels(inputs: Sequence) -> Tensor:
    datas = [_data(t) for t in inputs]
    if not datas:
        raise ShapeError("concat_channels needs at least one input")
    ref = datas[0].shape
    for d in datas[1:]:
        if d.ndim != len(ref) or d.shape[0] != ref[0] or d.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: extents {d.shape} do not match {ref}")
    splits = np.cumsum([d.shape[1] for d in datas])[:-1]

    def _bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _emit(np.concatenate(datas, axis=1), tuple(inputs), _bw, "concat")


def scale_by_scalar(x, s) -> Tensor:
    """Multiply ``x`` by a scalar, or per batch item by an ``(N,)`` vector."""
    xd, sd = _data(x), _data(s)
    if sd.size == 1:
        sb = sd.reshape(())
        axes = None
    elif sd.ndim == 1 and sd.shape[0] == xd.shape[0]:
        sb = sd.reshape((-1,) + (1,) * (xd.ndim - 1))
        axes = tuple(range(1, xd.ndim))
    else:
        raise ShapeError(f"scale_by_scalar: scale shape {sd.shape} does not fit input shape {xd.shape}")

    def _bw(g):
        gx = g * sb if _tracks(x) else None
        gs = None
        if _tracks(s):
            gs = (g * xd).sum(axis=axes)
            gs = np.asarray(gs).reshape(sd.shape)
        return gx, gs

    return _emit(xd * sb, (x, s), _bw, "scale")
