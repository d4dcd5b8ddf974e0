"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation checks its shapes strictly (only Python
numbers or 0-d tensors broadcast), refuses to emit non-finite values, and,
when a :class:`Tape` is active and any input needs a gradient, records a
node holding a closure that maps the output gradient to input gradients.

    with Tape() as tape:
        loss = sum_all(elem_mul(x, x))
    backward(loss, tape)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "DimensionError",
    "NumericError",
    "UsageError",
    "Tensor",
    "Tape",
    "no_grad",
    "backward",
    "matmul",
    "add",
    "sub",
    "elem_mul",
    "mul_scalar",
    "add_scalar",
    "scale_lastdim",
    "concat",
    "concat_lastdim",
    "take_rows",
    "reshape",
    "transpose",
    "mean_rows",
    "sum_all",
    "sigmoid",
    "silu",
    "softmax_lastdim",
    "cross_entropy_masked",
    "rmsnorm",
    "rope",
    "gradcheck",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return elem_mul(self, other)

    def __rmul__(self, other):
        return elem_mul(other, self)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class no_grad:
    """Suspend recording on this thread (frozen-branch passes, decoding)."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")
    return out


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = _finite(out, op)
    result.grad = None
    result.name = None
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result.requires_grad = needs
    if needs:
        tape.record(Node(op, inputs, result, bwd))
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[..., m, k]`` and ``b[..., k, n]``.

    Leading (batch) dimensions must match exactly; the one exception is a 2-D
    right operand, which acts as a shared weight for every leading index.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


def _scalar_like(x) -> bool:
    return not isinstance(x, Tensor) or x.data.ndim == 0


def _binary(op: str, a, b, fwd, da, db) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise UsageError(f"{op} needs at least one tensor operand")
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (_scalar_like(a) or _scalar_like(b)):
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = fwd(ad, bd)

    def reduce_to(g, shape):
        return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)

    def bwd(g):
        ga = reduce_to(da(g, ad, bd), ad.shape) if a.requires_grad else None
        gb = reduce_to(db(g, ad, bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(op, out, (a, b), bwd)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def elem_mul(a, b) -> Tensor:
    """Hadamard product."""
    return _binary("elem_mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("mul_scalar", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", x.data + float(c), (x,), lambda g: (g,))


def scale_lastdim(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of ``x[..., d]`` by the vector ``v`` (shape ``(d,)`` or ``(1, d)``)."""
    d = x.shape[-1]
    if v.size != d or v.data.ndim > 2 or (v.data.ndim == 2 and v.shape[0] != 1):
        raise DimensionError(f"scale vector {v.shape} does not match last dim {d}")
    vd, xd = v.data.reshape(d), x.data

    def bwd(g):
        gx = g * vd if x.requires_grad else None
        gv = (g * xd).reshape(-1, d).sum(axis=0).reshape(v.shape) if v.requires_grad else None
        return gx, gv

    return _emit("scale_lastdim", xd * vd, (x, v), bwd)


# ---------------------------------------------------------------- shape ops


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise UsageError("concat needs at least one part")
    parts = tuple(_as_tensor(p) for p in parts)
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or p.shape[:ax] + p.shape[ax + 1:] != parts[0].shape[:ax] + parts[0].shape[ax + 1:]:
            raise DimensionError(f"concat parts disagree off axis {axis}: {[q.shape for q in parts]}")
    if len(parts) == 1:
        return _emit("concat", parts[0].data.copy(), parts, lambda g: (g,))
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=ax), parts, bwd)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    """Juxtapose parts along the feature axis, in argument order."""
    return concat(parts, axis=-1)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather ``x[idx]`` along the first axis (embedding lookup, row selection)."""
    idx = np.asarray(idx, dtype=np.int64)
    xd = x.data

    def bwd(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("take_rows", xd[idx], (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------- reductions


def mean_rows(h: Tensor) -> Tensor:
    """Average over the first axis: ``[T, d] -> [1, d]``."""
    if h.data.ndim != 2:
        raise DimensionError(f"mean_rows expects a 2-d tensor, got {h.shape}")
    n = h.shape[0]
    if n == 0:
        raise UsageError("mean_rows over zero rows")
    return _emit("mean_rows", h.data.mean(axis=0, keepdims=True), (h,),
                 lambda g: (np.repeat(g / n, n, axis=0),))


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return _emit("sum_all", np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),))


# ---------------------------------------------------------------- nonlinearities


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    # clipped so saturated outputs stay strictly inside (0, 1)
    s = np.clip(expit(x.data), _SIG_LO, _SIG_HI)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return _emit("silu", xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def _softmax(z: np.ndarray, where: np.ndarray | None) -> np.ndarray:
    if where is not None:
        z = np.where(where, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim(x: Tensor, where: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last axis.

    ``where`` (broadcastable boolean) restricts support; excluded entries get
    probability exactly zero. Each row needs at least one allowed entry.
    """
    if x.shape[-1] < 1:
        raise UsageError("softmax over an empty axis")
    p = _softmax(x.data, where)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), bwd)


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean of ``-log softmax(logits)[t, targets[t]]`` over positions where mask is true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [T, V], got {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise DimensionError(f"targets/mask must have length {n}")
    count = int(mask.sum())
    if count == 0:
        raise UsageError("cross entropy with every position masked out")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    nll = -logp[rows, np.clip(targets, 0, v - 1)]
    loss = np.asarray(nll[mask].sum() / count)

    def bwd(g):
        d = np.exp(logp)
        d[rows, np.clip(targets, 0, v - 1)] -= 1.0
        d *= (mask[:, None] / count) * float(g)
        return (d,)

    return _emit("cross_entropy", loss, (logits,), bwd)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * weight`` along the last axis."""
    d = x.shape[-1]
    if d < 1:
        raise UsageError("rmsnorm over an empty axis")
    if weight.size != d:
        raise DimensionError(f"rmsnorm weight {weight.shape} vs feature dim {d}")
    xd, w = x.data, weight.data.reshape(d)
    with np.errstate(over="ignore"):   # overflow is reported as NumericError below
        ms = _finite((xd * xd).mean(axis=-1, keepdims=True) + eps, "rmsnorm")
    if eps == 0.0 and (ms == 0).any():
        raise NumericError("rmsnorm of a zero row with eps=0")
    r = 1.0 / np.sqrt(ms)
    xhat = xd * r

    def bwd(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = r * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _emit("rmsnorm", xhat * w, (x, weight), bwd)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs ``(x[..., :h], x[..., h:])`` by per-position angles.

    ``cos``/``sin`` have shape ``[T, h]`` where ``x`` is ``[..., T, 2h]``.
    """
    half = x.shape[-1] // 2
    if x.shape[-1] != 2 * half or cos.shape != (x.shape[-2], half):
        raise DimensionError(f"rope tables {cos.shape} do not fit {x.shape}")
    xd = x.data
    x1, x2 = xd[..., :half], xd[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _emit("rope", out, (x,), bwd)


# ---------------------------------------------------------------- checking


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest norm-wise relative error between tape and central-difference gradients.

    ``fn`` maps the input tensors to a scalar tensor. Inputs are perturbed in
    place and restored.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    backward(out, tape)
    worst = 0.0
    for t in inputs:
        num = np.zeros_like(t.data)
        for i in range(t.data.size):
            orig = t.data.flat[i]
            t.data.flat[i] = orig + eps
            with no_grad():
                fp = fn(*inputs).item()
            t.data.flat[i] = orig - eps
            with no_grad():
                fm = fn(*inputs).item()
            t.data.flat[i] = orig
            num.flat[i] = (fp - fm) / (2 * eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst
