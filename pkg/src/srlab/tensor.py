"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tape` records every primitive applied to tensors that require
gradients while it is active::

    with Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
    (gx,) = backward(tape, loss, [x])

Outside an active tape ops run eagerly and record nothing, which is what
evaluation and attack bookkeeping want.

Every op output is checked for NaN/Inf and raises :class:`NonFiniteError`
instead of propagating.
"""
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "forward", "backward", "grad_check",
    "GradCheckReport", "get_default_dtype", "set_default_dtype", "default_dtype",
    "detach", "relu", "conv2d", "maxpool2", "avgpool2", "reshape", "flatten",
    "log_softmax", "softmax", "exp", "log", "sqrt", "abs_", "matmul",
    "sum_", "mean", "max_", "clamp_min", "take", "register_op",
]

_DTYPE = np.float32
_local = threading.local()


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype):
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("element type must be float32 or float64")
    _DTYPE = dtype


@contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DTYPE
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, name or "tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; python scalars go through the scalar ops
    def __add__(self, other):
        if np.isscalar(other):
            return _op("shift", [self], c=float(other))
        return _op("add", [self, _wrap(other)])

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return _op("shift", [self], c=-float(other))
        return _op("sub", [self, _wrap(other)])

    def __rsub__(self, other):
        return _op("shift", [_op("scale", [self], c=-1.0)], c=float(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return _op("scale", [self], c=float(other))
        return _op("mul", [self, _wrap(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return _op("scale", [self], c=1.0 / float(other))
        return _op("div", [self, _wrap(other)])

    def __neg__(self):
        return _op("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return _op("matmul", [self, _wrap(other)])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x):
    """Constant copy of ``x``: gradients never flow through the result."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op, inputs, output, ctx):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored in execution order, so the record is topologically
    sorted by construction and cannot contain a cycle.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = []
        self._leaf_ids = set()
        self._produced = set()

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    @property
    def parameters(self):
        return list(self.leaves)

    def watch(self, t):
        t.requires_grad = True
        if id(t) not in self._leaf_ids and id(t) not in self._produced:
            self._leaf_ids.add(id(t))
            self.leaves.append(t)
        return t

    def forward(self, kind, inputs, **attrs):
        return forward(self, kind, inputs, **attrs)


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


_OPS = {}


def register_op(name):
    """Class decorator adding a primitive to the registry.

    The class provides ``forward(ctx, *arrays, **attrs) -> array`` and
    ``backward(ctx, grad, needs) -> tuple`` where ``needs[i]`` says whether
    input ``i`` wants a gradient (return ``None`` for the others).
    """
    def deco(cls):
        _OPS[name] = cls
        return cls
    return deco


def forward(tape, kind, inputs, **attrs):
    """Apply primitive ``kind`` to ``inputs`` and record it on ``tape``.

    ``tape`` may be ``None`` for untracked evaluation.
    """
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    inputs = [_wrap(t) for t in inputs]
    ctx = {}
    out = op.forward(ctx, *[t.data for t in inputs], **attrs)
    _check_finite(out, kind)
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track, dtype=out.dtype)
    if track:
        for t in inputs:
            if t.requires_grad and id(t) not in tape._produced and id(t) not in tape._leaf_ids:
                tape._leaf_ids.add(id(t))
                tape.leaves.append(t)
        tape._produced.add(id(result))
        tape.nodes.append(_Node(op, inputs, result, ctx))
    return result


def _op(kind, inputs, **attrs):
    return forward(active_tape(), kind, inputs, **attrs)


def backward(tape, loss, wrt=None):
    """Gradients of scalar ``loss`` with respect to ``wrt``.

    ``wrt`` defaults to every differentiable leaf seen by the tape. Leaves the
    loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if wrt is None:
        wrt = tape.leaves
    if id(loss) not in tape._produced and id(loss) not in tape._leaf_ids:
        raise ValueError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = [t.requires_grad for t in node.inputs]
        in_grads = node.op.backward(node.ctx, g, needs)
        for t, gi, need in zip(node.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            _check_finite(gi, "gradient")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


# ---------------------------------------------------------------------------
# primitives

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


@register_op("add")
class _Add:
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "add")
        ctx["shapes"] = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(ctx, g, needs):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@register_op("sub")
class _Sub:
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "sub")
        ctx["shapes"] = a.shape, b.shape
        return a - b

    @staticmethod
    def backward(ctx, g, needs):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@register_op("mul")
class _Mul:
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "mul")
        ctx["ab"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g, needs):
        a, b = ctx["ab"]
        return (
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        )


@register_op("div")
class _Div:
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "div")
        ctx["ab"] = a, b
        return a / b

    @staticmethod
    def backward(ctx, g, needs):
        a, b = ctx["ab"]
        return (
            _unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None,
        )


@register_op("scale")
class _Scale:
    @staticmethod
    def forward(ctx, a, c):
        ctx["c"] = c
        return a * a.dtype.type(c)

    @staticmethod
    def backward(ctx, g, needs):
        return (g * g.dtype.type(ctx["c"]),)


@register_op("shift")
class _Shift:
    @staticmethod
    def forward(ctx, a, c):
        return a + a.dtype.type(c)

    @staticmethod
    def backward(ctx, g, needs):
        return (g,)


@register_op("matmul")
class _MatMul:
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        ctx["ab"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g, needs):
        a, b = ctx["ab"]
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


@register_op("conv2d")
class _Conv2d:
    """Stride-1 cross-correlation with symmetric zero padding, NCHW."""

    @staticmethod
    def forward(ctx, x, w, b, pad=0):
        if x.ndim != 4 or w.ndim != 4 or b.shape != (w.shape[0],) or x.shape[1] != w.shape[1]:
            raise ValueError(f"conv2d: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
        if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
            raise ValueError("conv2d: kernel larger than padded input")
        dt = np.result_type(x, w, b)
        x, w, b = x.astype(dt, copy=False), w.astype(dt, copy=False), b.astype(dt, copy=False)
        ctx["xw"] = x, w
        ctx["pad"] = pad
        return kernels.conv2d_forward(x, w, b, pad)

    @staticmethod
    def backward(ctx, g, needs):
        x, w = ctx["xw"]
        dx, dw, db = kernels.conv2d_backward(x, w, g.astype(x.dtype, copy=False), ctx["pad"],
                                             need_dx=needs[0], need_dw=needs[1])
        return dx, dw, (db if needs[2] else None)


@register_op("relu")
class _ReLU:
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx["mask"] = mask
        return np.where(mask, x, x.dtype.type(0))

    @staticmethod
    def backward(ctx, g, needs):
        return (g * ctx["mask"],)


@register_op("maxpool2")
class _MaxPool2:
    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4:
            raise ValueError("maxpool2 expects NCHW input")
        out, idx = kernels.maxpool2_forward(x)
        ctx["idx"] = idx
        ctx["hw"] = x.shape[2], x.shape[3]
        return out

    @staticmethod
    def backward(ctx, g, needs):
        H, W = ctx["hw"]
        return (kernels.maxpool2_backward(g, ctx["idx"], H, W),)


@register_op("avgpool2")
class _AvgPool2:
    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4:
            raise ValueError("avgpool2 expects NCHW input")
        N, C, H, W = x.shape
        ctx["hw"] = H, W
        Ho, Wo = H // 2, W // 2
        v = x[:, :, :2 * Ho, :2 * Wo].reshape(N, C, Ho, 2, Wo, 2)
        return v.mean(axis=(3, 5))

    @staticmethod
    def backward(ctx, g, needs):
        H, W = ctx["hw"]
        N, C, Ho, Wo = g.shape
        dx = np.zeros((N, C, H, W), dtype=g.dtype)
        q = g * g.dtype.type(0.25)
        dx[:, :, :2 * Ho, :2 * Wo] = np.repeat(np.repeat(q, 2, axis=2), 2, axis=3)
        return (dx,)


@register_op("reshape")
class _Reshape:
    @staticmethod
    def forward(ctx, x, shape):
        ctx["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g, needs):
        return (g.reshape(ctx["shape"]),)


@register_op("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(ctx, x, axis=-1):
        m = x.max(axis=axis, keepdims=True)
        z = x - m
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        ctx["out"] = out
        ctx["axis"] = axis
        return out

    @staticmethod
    def backward(ctx, g, needs):
        out, axis = ctx["out"], ctx["axis"]
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


@register_op("sum")
class _Sum:
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx["shape"] = x.shape
        ctx["axis"] = axis
        ctx["keepdims"] = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g, needs):
        shape, axis = ctx["shape"], ctx["axis"]
        if axis is not None and not ctx["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


@register_op("mean")
class _Mean:
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx["shape"] = x.shape
        ctx["axis"] = axis
        ctx["keepdims"] = keepdims
        n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        ctx["n"] = int(n)
        return np.asarray(x.mean(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g, needs):
        shape, axis = ctx["shape"], ctx["axis"]
        if axis is not None and not ctx["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / g.dtype.type(ctx["n"]), shape).copy(),)


@register_op("max")
class _Max:
    """Max along one axis; ties send the gradient to the first index."""

    @staticmethod
    def forward(ctx, x, axis=-1):
        idx = x.argmax(axis=axis)
        ctx["idx"] = idx
        ctx["axis"] = axis
        ctx["shape"] = x.shape
        return np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    @staticmethod
    def backward(ctx, g, needs):
        dx = np.zeros(ctx["shape"], dtype=g.dtype)
        axis = ctx["axis"]
        np.put_along_axis(dx, np.expand_dims(ctx["idx"], axis), np.expand_dims(g, axis), axis=axis)
        return (dx,)


@register_op("abs")
class _Abs:
    @staticmethod
    def forward(ctx, x):
        ctx["sign"] = np.sign(x)
        return np.abs(x)

    @staticmethod
    def backward(ctx, g, needs):
        return (g * ctx["sign"],)


@register_op("exp")
class _Exp:
    @staticmethod
    def forward(ctx, x):
        out = np.exp(x)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g, needs):
        return (g * ctx["out"],)


@register_op("log")
class _Log:
    @staticmethod
    def forward(ctx, x):
        if (x <= 0).any():
            raise NonFiniteError("log of a non-positive value")
        ctx["x"] = x
        return np.log(x)

    @staticmethod
    def backward(ctx, g, needs):
        return (g / ctx["x"],)


@register_op("sqrt")
class _Sqrt:
    """Square root; the gradient at 0 is taken as 0 (subgradient of a norm)."""

    @staticmethod
    def forward(ctx, x):
        if (x < 0).any():
            raise NonFiniteError("sqrt of a negative value")
        out = np.sqrt(x)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g, needs):
        out = ctx["out"]
        pos = out > 0
        safe = np.where(pos, out, out.dtype.type(1))
        return (np.where(pos, g / (2 * safe), g.dtype.type(0)),)


@register_op("clamp_min")
class _ClampMin:
    @staticmethod
    def forward(ctx, x, lo):
        mask = x >= lo
        ctx["mask"] = mask
        return np.where(mask, x, x.dtype.type(lo))

    @staticmethod
    def backward(ctx, g, needs):
        return (g * ctx["mask"],)


@register_op("take")
class _Take:
    """Pick ``x[i, idx[i]]`` from a 2-D array."""

    @staticmethod
    def forward(ctx, x, idx):
        idx = np.asarray(idx, dtype=np.intp)
        if x.ndim != 2 or idx.shape != (x.shape[0],):
            raise ValueError(f"take: need (N, C) values and N indices, got {x.shape}, {idx.shape}")
        if (idx < 0).any() or (idx >= x.shape[1]).any():
            raise IndexError("take: index out of range")
        ctx["idx"] = idx
        ctx["shape"] = x.shape
        return x[np.arange(x.shape[0]), idx]

    @staticmethod
    def backward(ctx, g, needs):
        dx = np.zeros(ctx["shape"], dtype=g.dtype)
        dx[np.arange(len(g)), ctx["idx"]] = g
        return (dx,)


# functional front-ends -------------------------------------------------------

def relu(x):
    return _op("relu", [x])


def conv2d(x, w, b, pad=0):
    return _op("conv2d", [x, w, b], pad=int(pad))


def maxpool2(x):
    return _op("maxpool2", [x])


def avgpool2(x):
    return _op("avgpool2", [x])


def reshape(x, shape):
    return _op("reshape", [x], shape=tuple(shape))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def log_softmax(x, axis=-1):
    return _op("log_softmax", [x], axis=axis)


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis))


def exp(x):
    return _op("exp", [x])


def log(x):
    return _op("log", [x])


def sqrt(x):
    return _op("sqrt", [x])


def abs_(x):
    return _op("abs", [x])


def matmul(a, b):
    return _op("matmul", [a, b])


def sum_(x, axis=None, keepdims=False):
    return _op("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return _op("mean", [x], axis=axis, keepdims=keepdims)


def max_(x, axis=-1):
    return _op("max", [x], axis=axis)


def clamp_min(x, lo):
    return _op("clamp_min", [x], lo=float(lo))


def take(x, idx):
    return _op("take", [x], idx=idx)


# ---------------------------------------------------------------------------
# finite-difference audit

class GradCheckReport:
    """Analytic vs. central-difference comparison, one entry per leaf."""

    def __init__(self, tolerance):
        self.tolerance = tolerance
        self.entries = []

    def add(self, name, error):
        self.entries.append({"leaf": name, "max_rel_error": float(error),
                             "ok": bool(error <= self.tolerance)})

    @property
    def ok(self):
        return all(e["ok"] for e in self.entries)

    @property
    def max_error(self):
        return max((e["max_rel_error"] for e in self.entries), default=0.0)

    def failures(self):
        return [e for e in self.entries if not e["ok"]]

    def to_dict(self):
        return {"tolerance": self.tolerance, "ok": self.ok,
                "max_rel_error": self.max_error, "leaves": list(self.entries)}

    def __repr__(self):
        return f"GradCheckReport(ok={self.ok}, max_rel_error={self.max_error:.3g}, leaves={len(self.entries)})"


def grad_check(loss_fn, leaves, tolerance=1e-6, h=1e-3, names=None):
    """Compare ``backward`` against central differences.

    ``loss_fn(*leaves)`` must build the scalar loss from the given tensors.
    The relative error of a leaf is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-abs (so near-zero entries do not blow it
    up). Run in 64-bit mode; 32-bit lacks the headroom for ``h=1e-3``.
    """
    report = GradCheckReport(tolerance)
    if not leaves:
        return report
    with Tape() as tape:
        for t in leaves:
            tape.watch(t)
        loss = loss_fn(*leaves)
    analytic = backward(tape, loss, leaves)
    names = names or [t.name or f"leaf{i}" for i, t in enumerate(leaves)]
    for name, t, ga in zip(names, leaves, analytic):
        gn = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(*leaves).data)
            flat[i] = orig - h
            fm = float(loss_fn(*leaves).data)
            flat[i] = orig
            gn.reshape(-1)[i] = (fp - fm) / (2 * h)
        scale = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0))
        err = np.abs(ga - gn).max(initial=0.0)
        report.add(name, 0.0 if scale == 0 else err / scale)
    return report
