"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays; the dtype of the inputs is preserved, so a
model built from float32 leaves trains in single precision and one built
from float64 leaves can be checked against finite differences.

Usage::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.relu(x))
    backward(tape, loss)
    x.grad  # -> array([1., 1., 1.])

Broadcasting is deliberately narrow: the second operand of ``add``/``mul``
may have a shape equal to a trailing suffix of the first operand's shape
(bias vectors, positional tables, per-position weight rows). Nothing else
broadcasts.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError


class UnknownPrimitiveError(KeyError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _wrap(other, self)])

    def __add__(self, other):
        if np.isscalar(other):
            return apply_primitive("affine", [self], scale=1.0, shift=float(other))
        return apply_primitive("add", [self, _wrap(other, self)])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("affine", [self], scale=float(other), shift=0.0)
        return apply_primitive("mul", [self, _wrap(other, self)])

    def __neg__(self):
        return apply_primitive("affine", [self], scale=-1.0, shift=0.0)

    def __sub__(self, other):
        if np.isscalar(other):
            return self + (-float(other))
        return self + (-_wrap(other, self))

    def __rsub__(self, other):
        return apply_primitive("affine", [self], scale=-1.0, shift=float(other))

    __radd__ = __add__
    __rmul__ = __mul__


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Node:
    primitive: str
    operands: tuple[Tensor, ...]
    attrs: dict[str, Any]
    saved: Any
    output: Tensor
    index: int = -1


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they execute, so operands always precede their
    consumers. Only applications with at least one grad-requiring operand
    are recorded.
    """

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def replay(self) -> list[np.ndarray]:
        """Re-run every node's forward rule on the recorded operand values."""
        out = []
        for node in self.nodes:
            value, _ = PRIMITIVES[node.primitive].forward(
                *(t.data for t in node.operands), **node.attrs
            )
            out.append(value)
        return out


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


# --------------------------------------------------------------------------
# Primitive registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    shape_rule: Callable[..., None]
    forward: Callable[..., tuple[np.ndarray, Any]]
    # backward(grad_out, saved, *operand_values, **attrs) -> one grad per operand
    backward: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def register(name, shape_rule, forward, backward) -> None:
    PRIMITIVES[name] = Primitive(name, shape_rule, forward, backward)


def apply_primitive(op: str, operands: Sequence[Tensor], **attrs) -> Tensor:
    try:
        prim = PRIMITIVES[op]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {op!r}") from None
    values = [t.data for t in operands]
    prim.shape_rule(*[v.shape for v in values], **attrs)
    out_value, saved = prim.forward(*values, **attrs)
    needs_grad = any(t.requires_grad for t in operands)
    out = Tensor(out_value, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        node = Node(op, tuple(operands), attrs, saved, out)
        tape.record(node)
        out._node = node
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.index < 0 or node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        prim = PRIMITIVES[node.primitive]
        operand_grads = prim.backward(g, node.saved, *(t.data for t in node.operands), **node.attrs)
        for t, og in zip(node.operands, operand_grads):
            if og is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = og.copy() if t.grad is None else t.grad + og
            else:
                key = id(t)
                grads[key] = og if key not in grads else grads[key] + og


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every coordinate of ``x``."""
    if step <= 0:
        raise ValueError("step must be positive")
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    base = x.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x).data)
        flat[i] = orig - step
        lo = float(f(x).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


# --------------------------------------------------------------------------
# Shape rules
# --------------------------------------------------------------------------


def _err(name, *shapes, why=""):
    shown = " and ".join(str(tuple(s)) for s in shapes)
    raise ShapeError(f"{name}: incompatible shapes {shown}" + (f" ({why})" if why else ""))


def _suffix_rule(name):
    def rule(a, b, **_):
        if len(b) > len(a) or tuple(a[len(a) - len(b):]) != tuple(b):
            _err(name, a, b, why="second operand must match a trailing part of the first")

    return rule


def _unary_rule(*_, **__):
    return None


def _matmul_rule(a, b, **_):
    if len(a) < 2 or len(b) < 2:
        _err("matmul", a, b, why="operands need at least 2 dims")
    if a[-1] != b[-2]:
        _err("matmul", a, b, why="inner dimensions differ")
    if len(b) > 2 and tuple(a[:-2]) != tuple(b[:-2]):
        _err("matmul", a, b, why="batch dimensions differ")


def _axis_rule(name):
    def rule(a, axis=None, **_):
        if axis is not None and not -len(a) <= axis < len(a):
            _err(name, a, why=f"axis {axis} out of range")

    return rule


def _reshape_rule(a, shape, **_):
    if int(np.prod(a)) != int(np.prod(shape)) or any(s < 0 for s in shape):
        _err("reshape", a, shape, why="element counts differ")


def _transpose_rule(a, axes, **_):
    if sorted(axes) != list(range(len(a))):
        _err("transpose", a, why=f"axes {axes} are not a permutation")


def _layer_norm_rule(x, gamma, beta, **_):
    if gamma != (x[-1],) or beta != (x[-1],):
        _err("layer_norm", x, gamma, beta, why="scale/offset must match the last axis")


def _take_rule(a, index, axis, **_):
    if not -len(a) <= axis < len(a):
        _err("take", a, why=f"axis {axis} out of range")
    if not 0 <= index < a[axis]:
        _err("take", a, why=f"index {index} out of range")


# --------------------------------------------------------------------------
# Forward / backward rules
# --------------------------------------------------------------------------


def _sum_leading(g, shape):
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _matmul_fwd(a, b):
    return np.matmul(a, b), None


def _matmul_bwd(g, _, a, b):
    ga = np.matmul(g, _swap(b))
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(_swap(a), g)
    return ga, gb


def _add_fwd(a, b):
    return a + b, None


def _add_bwd(g, _, a, b):
    return g, _sum_leading(g, b.shape)


def _mul_fwd(a, b):
    return a * b, None


def _mul_bwd(g, _, a, b):
    return g * b, _sum_leading(g * a, b.shape)


def _affine_fwd(x, scale, shift):
    return x * x.dtype.type(scale) + x.dtype.type(shift), None


def _affine_bwd(g, _, x, scale, shift):
    return (g * g.dtype.type(scale),)


def _relu_fwd(x):
    return np.maximum(x, 0), None


def _relu_bwd(g, _, x):
    # subgradient at exactly 0 is 0
    return (g * (x > 0),)


_SQRT1_2 = 1 / np.sqrt(2.0)
_INV_SQRT_2PI = 1 / np.sqrt(2 * np.pi)


def _gelu_fwd(x):
    cdf = 0.5 * (1 + erf(x * _SQRT1_2))
    return (x * cdf).astype(x.dtype, copy=False), cdf


def _gelu_bwd(g, cdf, x):
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)


def _softmax_fwd(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, s


def _softmax_bwd(g, s, x, axis):
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def _log_fwd(x):
    return np.log(x), None


def _log_bwd(g, _, x):
    return (g / x,)


def _clip_min_fwd(x, lo):
    return np.maximum(x, x.dtype.type(lo)), None


def _clip_min_bwd(g, _, x, lo):
    return (g * (x >= lo),)


def _sum_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.sum(axis=axis, keepdims=keepdims)), None


def _sum_bwd(g, _, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_fwd(x, axis=None, keepdims=False):
    return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None


def _mean_bwd(g, _, x, axis=None, keepdims=False):
    count = x.size if axis is None else x.shape[axis]
    (gx,) = _sum_bwd(g, None, x, axis, keepdims)
    return (gx / x.dtype.type(count),)


def _reshape_fwd(x, shape):
    return x.reshape(shape), None


def _reshape_bwd(g, _, x, shape):
    return (g.reshape(x.shape),)


def _transpose_fwd(x, axes):
    return np.transpose(x, axes), None


def _transpose_bwd(g, _, x, axes):
    return (np.transpose(g, np.argsort(axes)),)


def _take_fwd(x, index, axis):
    return np.take(x, index, axis=axis), None


def _take_bwd(g, _, x, index, axis):
    gx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    gx[tuple(sl)] = g
    return (gx,)


def _layer_norm_fwd(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _layer_norm_bwd(g, saved, x, gamma, beta, eps=1e-6):
    xhat, rstd = saved
    lead = tuple(range(x.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gx_hat = g * gamma
    d = x.shape[-1]
    gx = rstd / d * (
        d * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, ggamma, gbeta


register("matmul", _matmul_rule, _matmul_fwd, _matmul_bwd)
register("add", _suffix_rule("add"), _add_fwd, _add_bwd)
register("mul", _suffix_rule("mul"), _mul_fwd, _mul_bwd)
register("affine", _unary_rule, _affine_fwd, _affine_bwd)
register("relu", _unary_rule, _relu_fwd, _relu_bwd)
register("gelu", _unary_rule, _gelu_fwd, _gelu_bwd)
register("softmax", _axis_rule("softmax"), _softmax_fwd, _softmax_bwd)
register("log", _unary_rule, _log_fwd, _log_bwd)
register("clip_min", _unary_rule, _clip_min_fwd, _clip_min_bwd)
register("sum", _axis_rule("sum"), _sum_fwd, _sum_bwd)
register("mean", _axis_rule("mean"), _mean_fwd, _mean_bwd)
register("reshape", _reshape_rule, _reshape_fwd, _reshape_bwd)
register("transpose", _transpose_rule, _transpose_fwd, _transpose_bwd)
register("take", _take_rule, _take_fwd, _take_bwd)
register("layer_norm", _layer_norm_rule, _layer_norm_fwd, _layer_norm_bwd)


# --------------------------------------------------------------------------
# Functional front end
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def affine(x: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    return apply_primitive("affine", [x], scale=float(scale), shift=float(shift))


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def gelu(x: Tensor) -> Tensor:
    return apply_primitive("gelu", [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], axis=axis)


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", [x])


def clip_min(x: Tensor, lo: float) -> Tensor:
    return apply_primitive("clip_min", [x], lo=float(lo))


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(int(s) for s in shape))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return apply_primitive("transpose", [x], axes=tuple(axes))


def take(x: Tensor, index: int, axis: int = -1) -> Tensor:
    return apply_primitive("take", [x], index=int(index), axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return apply_primitive("layer_norm", [x, gamma, beta], eps=eps)
