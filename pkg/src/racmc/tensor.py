"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded together with
their backward rules; :func:`backward` replays them in reverse.  Outside a tape
the same functions just compute values, which is what finite-difference checks
and inference use.

Binary elementwise ops never broadcast: operands must have equal shapes, or one
of them must be a Python number.  Ops that need a structured broadcast (bias
rows, pairwise sums, batch norm) are separate primitives.
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Number
from typing import Callable, Sequence

import numpy as np

from racmc.errors import BatchTooSmallError, ContractError, DimensionError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.is_leaf = True
        t.name = None
        t.tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    __array_priority__ = 1000


@dataclass
class Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; tapes nest, and only the innermost one records.
    """

    def __init__(self):
        self.ops: list[Op] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def constant(data) -> Tensor:
    return Tensor(data)


def _record(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.is_leaf = False
        result.tape = tape
        tape.ops.append(Op(name, inputs, result, rule))
    return result


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{what}: shape {a.shape} does not match shape {b.shape}")


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto existing ``.grad`` buffers; callers zero them between
    steps.  Each leaf receives its total gradient in a single addition, so
    running backward twice over one tape doubles every gradient exactly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    if tape is not None:
        for op in reversed(tape.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
                if t.is_leaf:
                    leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return _record("add_scalar", a.data + b, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return _record("sub_scalar", a.data - b, (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return _record("mul_scalar", a.data * b, (a,), lambda g: (g * b,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Number):
        return _record("div_scalar", a.data / b, (a,), lambda g: (g / b,))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at 0 via np.sign
    s = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _record("relu", np.where(m, a.data, 0.0), (a,), lambda g: (g * m,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    m = a.data >= lo
    return _record("clamp_min", np.where(m, a.data, lo), (a,), lambda g: (g * m,))


_UNARY = {"abs": abs_, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch one of add/sub/mul (binary) or abs/sigmoid/relu (unary)."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supports [p,q]@[q,r], batched [h,p,q]@[h,q,r], and [...,q]@[q,r].
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: shape {a.shape} is incompatible with shape {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch shape {a.shape} does not match {b.shape}")
    out = ad @ bd

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            q = ad.shape[-1]
            gb = ad.reshape(-1, q).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", out, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record(
        "transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w + bias`` with the bias added to every row."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    out = xd @ wd
    if bias is None:
        return _record("linear", out, (x, w), lambda g: (
            g @ wd.T, xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])))
    if bias.data.shape != (wd.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {w.shape}")
    out = out + bias.data

    def rule(g):
        g2 = g.reshape(-1, wd.shape[1])
        return g @ wd.T, xd.reshape(-1, wd.shape[0]).T @ g2, g2.sum(axis=0)

    return _record("linear", out, (x, w, bias), rule)


def concat_cols(*tensors: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    lead = tensors[0].data.shape[:-1]
    for t in tensors[1:]:
        if t.data.shape[:-1] != lead:
            raise DimensionError(
                f"concat_cols: shape {tensors[0].shape} does not match shape {t.shape}")
    widths = [t.data.shape[-1] for t in tensors]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _record("concat_cols", out, tuple(tensors), lambda g: np.split(g, cuts, axis=-1))


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.data.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take_rows", a.data[idx], (a,), rule)


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), rule)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor; zero rows get gradient 0."""
    xd = a.data
    n = np.sqrt((xd * xd).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)
    return _record("norm_rows", n, (a,), lambda g: ((g / safe)[:, None] * xd,))


def frobenius(a: Tensor) -> Tensor:
    """Frobenius norm; gradient 0 at the zero matrix."""
    xd = a.data
    n = float(np.sqrt((xd * xd).sum()))
    return _record("frobenius", np.array(n), (a,),
                   lambda g: (g * xd / n if n > 0 else np.zeros_like(xd),))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if a.data.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: empty rows in shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", out, (a,), rule)


# ---------------------------------------------------------------- structured broadcasts


def pairwise_add(a: Tensor, b: Tensor) -> Tensor:
    """out[i, j, :] = a[i, :] + b[j, :]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"pairwise_add: shape {a.shape} does not match shape {b.shape}")
    out = a.data[:, None, :] + b.data[None, :, :]
    return _record("pairwise_add", out, (a, b), lambda g: (g.sum(axis=1), g.sum(axis=0)))


def pairwise_sqdist(x: Tensor, y: Tensor) -> Tensor:
    """out[i, j] = ||x_i - y_j||^2."""
    xd, yd = x.data, y.data
    if xd.ndim != 2 or yd.ndim != 2 or xd.shape[1] != yd.shape[1]:
        raise DimensionError(f"pairwise_sqdist: shape {x.shape} does not match shape {y.shape}")
    diff = xd[:, None, :] - yd[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def rule(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _record("pairwise_sqdist", out, (x, y), rule)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-column normalisation of a [p, q] tensor.

    In train mode batch statistics are used and the running buffers are updated
    in place (unbiased variance, like the usual deep-learning convention).
    """
    xd = x.data
    if xd.ndim != 2 or gamma.data.shape != (xd.shape[1],) or beta.data.shape != (xd.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape}, scale {gamma.shape}, shift {beta.shape}")
    gd = gamma.data
    if train:
        p = xd.shape[0]
        if p < 2:
            raise BatchTooSmallError(f"batch_norm in train mode needs at least 2 rows, got {p}")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * p / (p - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv

        def rule(g):
            gx = g * gd
            dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv

        def rule(g):
            return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = xhat * gd + beta.data
    return _record("batch_norm", out, (x, gamma, beta), rule)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- checking


def grad_check(f: Callable, x, h: float = 1e-5, max_elements: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)``.

    ``x`` is a tensor or a list of tensors; ``f(x)`` must return a scalar
    tensor.  With ``max_elements`` only that many randomly chosen entries of
    each tensor are perturbed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    try:
        with Tape() as tape:
            loss = f(x)
        backward(loss, tape)
        worst = 0.0
        for t in xs:
            flat = t.data.reshape(-1)
            analytic = t.grad.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = f(x).item()
                flat[i] = orig - h
                down = f(x).item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
                worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
