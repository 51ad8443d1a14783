"""Dense float64 tensors with reverse-mode autodiff on a dynamic tape.

Values live in row-major numpy arrays; the differentiation machinery is a
record-by-execution tape.  Ops record a node onto the innermost active
`GradTape` whenever gradients are enabled and at least one input is tracked.
`backward` walks the tape in exact reverse recording order, which is a valid
topological order by construction.

Broadcasting is deliberately narrow: an elementwise binary op accepts equal
shapes, scalars, a trailing-suffix operand (gain/bias on the last axes), or
same-rank shapes whose mismatched axes have extent 1.  Anything needing
mutual expansion is a shape error; this keeps every backward rule small.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_TAPE_STACK: list = []


class GradTape:
    """Ordered record of operations; reverse iteration drives backward."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class no_grad:
    """Context that disables recording regardless of enclosing tapes."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Node:
    """One recorded operation: output tensor, inputs, and a pullback."""

    __slots__ = ("op", "out", "inputs", "backward_fn", "tape")

    def __init__(self, op, out, inputs, backward_fn, tape):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape


class Tensor:
    """N-dimensional float64 value carrier with optional grad recording."""

    __slots__ = ("values", "grad", "node", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic operators -------------------------------------------------
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

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_tracked(x, tape) -> bool:
    return isinstance(x, Tensor) and (
        x.requires_grad or (x.node is not None and x.node.tape is tape)
    )


def _record(op, out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if not any(_is_tracked(x, tape) for x in inputs):
        return out
    node = Node(op, out, inputs, backward_fn, tape)
    out.node = node
    tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a_shape: tuple, b_shape: tuple, op: str):
    """Permit equal / scalar / trailing-suffix / size-1-axis pairings only.

    Mutual expansion (neither operand already has the result shape) is
    rejected so every backward rule is a plain reduce-to-operand-shape.
    """
    try:
        result = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not alignable") from None
    if result != a_shape and result != b_shape:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} require mutual expansion")


def _binary(op, a, b, fwd, dfa, dfb) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, op)
    out = Tensor(fwd(a.values, b.values))

    def backward_fn(g):
        ga = _unbroadcast(dfa(g, a.values, b.values), a.shape)
        gb = _unbroadcast(dfb(g, a.values, b.values), b.shape)
        return ga, gb

    return _record(op, out, (a, b), backward_fn)


def _unary(op, x, values, dfn) -> Tensor:
    x = as_tensor(x)
    out = Tensor(values)
    return _record(op, out, (x,), lambda g: (dfn(g),))


# elementwise ---------------------------------------------------------------

def add(a, b):
    return _binary("add", a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, av, bv: g / bv, lambda g, av, bv: -g * av / (bv * bv))


def neg(x):
    return _unary("neg", x, -as_tensor(x).values, lambda g: -g)


def texp(x):
    x = as_tensor(x)
    ev = np.exp(x.values)
    return _unary("exp", x, ev, lambda g: g * ev)


def tlog(x):
    x = as_tensor(x)
    return _unary("log", x, np.log(x.values), lambda g: g / x.values)


def tsqrt(x):
    x = as_tensor(x)
    sv = np.sqrt(x.values)
    return _unary("sqrt", x, sv, lambda g: g * 0.5 / sv)


def ttanh(x):
    x = as_tensor(x)
    tv = np.tanh(x.values)
    return _unary("tanh", x, tv, lambda g: g * (1.0 - tv * tv))


def sigmoid(x):
    x = as_tensor(x)
    sv = 1.0 / (1.0 + np.exp(-x.values))
    return _unary("sigmoid", x, sv, lambda g: g * sv * (1.0 - sv))


def tabs(x):
    x = as_tensor(x)
    return _unary("abs", x, np.abs(x.values), lambda g: g * np.sign(x.values))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    """Gaussian error linear unit (tanh approximation)."""
    x = as_tensor(x)
    xv = x.values
    inner = _GELU_C * (xv + 0.044715 * xv * xv * xv)
    th = np.tanh(inner)
    out = 0.5 * xv * (1.0 + th)

    def dfn(g):
        sech2 = 1.0 - th * th
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv * xv)
        return g * (0.5 * (1.0 + th) + 0.5 * xv * sech2 * dinner)

    return _unary("gelu", x, out, dfn)


def clamp01(x):
    """Clip to [0,1]; gradient passes only where the input is interior."""
    x = as_tensor(x)
    xv = x.values
    mask = (xv > 0.0) & (xv < 1.0)
    return _unary("clamp01", x, np.clip(xv, 0.0, 1.0), lambda g: g * mask)


# structural ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; operands of equal rank >= 2 with matching leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: ranks must match and be >= 2, got {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values)

    def backward_fn(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return ga, gb

    return _record("matmul", out, (a, b), backward_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.reshape(shape))
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.values, axes))
    return _record("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values[key])

    def backward_fn(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, key, g)  # unbuffered: repeated fancy indices accumulate
        return (gx,)

    return _record("getitem", out, (x,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.ascontiguousarray(np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis))
            for i in range(len(tensors))
        )

    return _record("concat", out, tuple(tensors), backward_fn)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.values for t in tensors], axis=axis))

    def backward_fn(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.ascontiguousarray(moved[i]) for i in range(len(tensors)))

    return _record("stack", out, tuple(tensors), backward_fn)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.sum(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, x.shape).copy(),)

    return _record("sum", out, (x,), backward_fn)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(x.values.mean(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / n, x.shape).copy(),)

    return _record("mean", out, (x,), backward_fn)


def upsample_nearest(x, kh: int, kw: int) -> Tensor:
    """Replicate each entry of the last two axes into a kh x kw block."""
    x = as_tensor(x)
    v = np.repeat(np.repeat(x.values, kh, axis=-2), kw, axis=-1)
    out = Tensor(v)
    h, w = x.shape[-2], x.shape[-1]

    def backward_fn(g):
        gs = g.reshape(g.shape[:-2] + (h, kh, w, kw))
        return (gs.sum(axis=(-3, -1)),)

    return _record("upsample", out, (x,), backward_fn)


# normalization / attention primitives --------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    x = as_tensor(x)
    if not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    ev = np.exp(shifted)
    sv = ev / ev.sum(axis=axis, keepdims=True)
    out = Tensor(sv)

    def backward_fn(g):
        inner = (g * sv).sum(axis=axis, keepdims=True)
        return (sv * (g - inner),)

    return _record("softmax", out, (x,), backward_fn)


def rms_norm(x, gain, eps: float = 0.0) -> Tensor:
    """gain * x / sqrt(mean(x^2, last axis) + eps).

    eps may be 0; all-zero rows are mapped to zero output (and zero grad)
    instead of dividing by zero, which keeps the exact scale-invariance
    property available to attention QK normalization.
    """
    x, gain = as_tensor(x), as_tensor(gain)
    if eps < 0:
        raise ShapeError("rms_norm: eps must be >= 0")
    _check_broadcast(x.shape, gain.shape, "rms_norm")
    m = (x.values ** 2).mean(axis=-1, keepdims=True) + eps
    safe = np.where(m > 0.0, m, 1.0)
    r = np.where(m > 0.0, 1.0 / np.sqrt(safe), 0.0)
    xn = x.values * r
    out = Tensor(gain.values * xn)
    d = x.shape[-1]

    def backward_fn(g):
        gg = g * gain.values
        inner = (gg * x.values).sum(axis=-1, keepdims=True)
        gx = gg * r - x.values * (r ** 3 / d) * inner
        ggain = _unbroadcast(g * xn, gain.shape)
        return gx, ggain

    return _record("rms_norm", out, (x, gain), backward_fn)


# gradient flow control ------------------------------------------------------

def stop_gradient(x) -> Tensor:
    """Identity on values; the result never records and blocks gradient flow."""
    x = as_tensor(x)
    return Tensor(x.values)


def backward(loss: Tensor):
    """Populate .grad on every recorded ancestor of a scalar recorded loss."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward: loss must be a scalar tensor")
    if loss.node is None:
        raise ContractError("backward: loss is not recorded on any tape")
    tape = loss.node.tape
    pending: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.values)}
    started = False
    for node in reversed(tape.nodes):
        if not started:
            if node is loss.node:
                started = True
            else:
                continue
        g = pending.pop(id(node), None)
        if g is None:
            continue
        out = node.out
        out.grad = g.copy() if out.grad is None else out.grad + g
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not isinstance(inp, Tensor):
                continue
            if inp.node is not None and inp.node.tape is tape:
                key = id(inp.node)
                pending[key] = gi if key not in pending else pending[key] + gi
            elif inp.requires_grad:
                inp.grad = gi.reshape(inp.shape) if inp.grad is None else inp.grad + gi.reshape(inp.shape)


# finite-difference oracle ---------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter comparison of autodiff against central differences."""

    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    ok: bool = True
    notes: list = field(default_factory=list)

    def __str__(self):
        lines = [f"grad_check: max_rel_error={self.max_rel_error:.3e} ok={self.ok}"]
        lines += [f"  {k}: {v:.3e}" for k, v in self.per_param.items()]
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines)


def grad_check(f, params: dict, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients of scalar f(params) to central differences.

    Relative error uses max(|analytic|, |numeric|, 0.01) as denominator so
    near-zero gradients are judged absolutely at the 1e-2 scale.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    report = GradCheckReport(max_rel_error=0.0)

    for p in params.values():
        p.zero_grad()
    with GradTape():
        loss = f(params)
        if loss.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        if not np.isfinite(loss.values).all():
            report.ok = False
            report.notes.append("non-finite loss at base point")
            report.max_rel_error = np.inf
            return report
        backward(loss)

    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }

    with no_grad():
        for name, p in params.items():
            flat = p.values.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(params).values.reshape(()))
                flat[i] = orig - h
                fm = float(f(params).values.reshape(()))
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * h)
            num = num.reshape(p.shape)
            a = analytic[name]
            if not (np.isfinite(a).all() and np.isfinite(num).all()):
                report.ok = False
                report.notes.append(f"non-finite gradient for {name}")
                report.per_param[name] = np.inf
                continue
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-2)
            err = float(np.max(np.abs(a - num) / denom)) if a.size else 0.0
            report.per_param[name] = err

    if report.per_param:
        report.max_rel_error = max(report.per_param.values())
    report.ok = report.ok and report.max_rel_error < tol
    return report
