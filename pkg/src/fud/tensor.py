"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations applied while a :class:`Tape` is active (and with at least one
input that requires a gradient) are recorded on that tape.  ``backward``
replays the tape in reverse recording order.  A tape in ``"guided"`` mode
changes only the relu backward rule (gradient passes where both the
pre-activation and the upstream gradient are positive).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
BCE_EPS = 1e-7


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Input shapes are incompatible."""


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "_requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self._node = None
        self.name = name
        self._requires_grad = False
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        flag = bool(flag)
        self._requires_grad = flag
        if flag and self._node is None:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
        elif not flag:
            self.grad = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: tuple, out: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded.  Nested tapes record on the innermost one only.
    """

    def __init__(self, mode: str = "standard"):
        if mode not in ("standard", "guided"):
            raise ContractError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        node = _Node(op, tuple(inputs), out, backward)
        out._node = node
        out._requires_grad = True
        tape.nodes.append(node)
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into the ``grad`` buffer of every leaf on ``tape``.

    Gradients accumulate across calls until explicitly zeroed.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("root does not depend on any tensor that requires a gradient")
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if root._node is None:
        root.grad += 1.0
        return
    # leaf gradients are summed per pass, then added once, so repeated passes
    # accumulate exactly the same amount each time
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g, tape.mode)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp._node is None:
                leaves[key] = (inp, leaves[key][1] + gi if key in leaves else gi)
            elif key in pending:
                pending[key] = pending[key] + gi
            else:
                pending[key] = gi
    for leaf, total in leaves.values():
        leaf.grad += total


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "add")

    def bw(g, mode):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")

    def bw(g, mode):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g, mode):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), ad * bd, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "div")
    ad, bd = a.data, b.data

    def bw(g, mode):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", (a, b), ad / bd, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g, mode: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bw(g, mode):
        return (g * exponent * ad ** (exponent - 1),)

    return _record("pow", (a,), ad**exponent, bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g, mode: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g, mode: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g, mode: (g / (2.0 * out),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("abs", (a,), np.abs(ad), lambda g, mode: (g * np.sign(ad),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0

    def bw(g, mode):
        if mode == "guided":
            return (g * (pos & (g > 0)),)
        return (g * pos,)

    return _record("relu", (a,), np.maximum(a.data, 0.0), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", (a,), out, lambda g, mode: (g * out * (1.0 - out),))


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g, mode):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))

    def bw(g, mode):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g, mode: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g, mode: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g, mode):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (a,), np.asarray(a.data[index]), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis mismatch {a.shape[1]} vs {b.shape[0]}")
    ad, bd = a.data, b.data

    def bw(g, mode):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, bw)


# ---------------------------------------------------------------------------
# convolution, pooling, resampling


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kh,kw]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-d [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-d [F,C,kh,kw], got {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: channel axis mismatch, input C={c} but kernel C={kc}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad:
        raise DimensionError(f"conv2d: height axis too small ({h}+2*{pad}) for kernel height {kh}")
    if kw > w + 2 * pad:
        raise DimensionError(f"conv2d: width axis too small ({w}+2*{pad}) for kernel width {kw}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # cols: [N*ho*wo, C*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g, mode):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gm @ kmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk

    return _record("conv2d", (x, kernel), np.ascontiguousarray(out), bw)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"max_pool2d: spatial axes {h}x{w} smaller than window {size}")
    views = [x.data[:, :, i : ho * size : size, j : wo * size : size] for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def bw(g, mode):
        gx = np.zeros(x.shape, dtype=DTYPE)
        taken = np.zeros(out.shape, dtype=bool)
        for k, v in enumerate(views):
            hit = (v == out) & ~taken
            taken |= hit
            i, j = divmod(k, size)
            gx[:, :, i : ho * size : size, j : wo * size : size] = g * hit
        return (gx,)

    return _record("max_pool2d", (x,), out, bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g, mode):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record("upsample_nearest", (x,), out, bw)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    """Join tensors along ``axis``; all other dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: shape {t.shape} does not match {ref} off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, mode):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[N,K]`` against integer ``labels[N]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = labels.shape[0]
    value = -logp[np.arange(n), labels].mean()

    def bw(g, mode):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record("cross_entropy", (logits,), np.asarray(value), bw)


def bce(prob, target) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps]."""
    prob = as_tensor(prob)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if t.shape != prob.shape:
        if t.size != prob.size:
            _shape_fail("bce", prob.shape, t.shape)
        t = t.reshape(prob.shape)
    p = np.clip(prob.data, BCE_EPS, 1.0 - BCE_EPS)
    inside = (prob.data >= BCE_EPS) & (prob.data <= 1.0 - BCE_EPS)
    value = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    count = p.size

    def bw(g, mode):
        d = (p - t) / (p * (1.0 - p)) / count
        return (g * d * inside,)

    return _record("bce", (prob,), np.asarray(value), bw)


def l1(pred, target) -> Tensor:
    """Mean absolute difference over all elements."""
    pred = as_tensor(pred)
    if isinstance(target, Tensor) and target.requires_grad:
        if target.shape != pred.shape:
            _shape_fail("l1", pred.shape, target.shape)
        return mean(absolute(sub(pred, target)))
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if t.shape != pred.shape:
        _shape_fail("l1", pred.shape, t.shape)
    diff = pred.data - t
    count = diff.size
    value = np.abs(diff).mean()

    def bw(g, mode):
        return (g * np.sign(diff) / count,)

    return _record("l1", (pred,), np.asarray(value), bw)


def _shape_fail(op, a, b):
    raise DimensionError(f"{op}: prediction shape {a} vs target shape {b}")


def loss(pred, target, kind: str) -> Tensor:
    if kind == "bce":
        return bce(pred, target)
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "l1":
        return l1(pred, target)
    raise ContractError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# optimisation and checking


class SGD:
    """Plain SGD, optional fixed momentum."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        if self._velocity is None:
            sgd_step(self.params, self.lr)
            return
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                raise ContractError("sgd_step: parameter has no gradient buffer")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no gradient buffer")
        p.data -= lr * p.grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, skip_kinks: bool = True) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    Coordinates with ``|x_i| <= 10*eps`` are skipped, as are coordinates whose
    one-sided differences disagree (a kink inside the stencil).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if out.data.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    backward(tape, out)
    analytic = leaf.grad.reshape(-1)

    def value(arr: np.ndarray) -> float:
        return float(f(Tensor(arr)).data)

    f0 = value(base) if skip_kinks else 0.0
    worst = 0.0
    checked = kinks = 0
    flat = base.reshape(-1)
    for i in range(flat.size):
        if abs(flat[i]) <= 10 * eps:
            continue
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = value(plus.reshape(base.shape))
        fm = value(minus.reshape(base.shape))
        numeric = (fp - fm) / (2 * eps)
        if skip_kinks:
            right = (fp - f0) / eps
            left = (f0 - fm) / eps
            if abs(right - left) > max(1e-2 * abs(numeric), 1e-6):
                kinks += 1
                continue
        checked += 1
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    if kinks > checked:
        raise ContractError(f"grad_check: {kinks} of {kinks + checked} coordinates look non-smooth; is f deterministic?")
    return worst


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
