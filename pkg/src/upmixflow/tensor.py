"""Minimal float64 tensor engine with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`Tape`; calling
:func:`backward` walks that record in reverse.  Broadcasting is deliberately
limited: the second operand of ``add``/``sub``/``mul`` may only match a
trailing suffix of the first operand's shape (bias/gain style).  Anything
else needs an explicit ``reshape``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "AdamState",
    "add", "sub", "mul", "scale", "neg", "matmul", "transpose", "reshape",
    "take_rows", "tsum", "mean", "layer_norm", "softmax", "gelu", "mse_loss", "film",
    "token_mul", "backward", "adam_init", "adam_step",
]

CHECK_FINITE = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite values in output of shape {list(out.shape)}")
    needs = any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, needs)
    tape = Tape.current()
    if needs and tape is not None:
        tape.nodes.append(_Node(op, inputs, res, bwd))
    return res


def _suffix_ok(a: tuple, b: tuple) -> bool:
    return len(b) <= len(a) and tuple(a[len(a) - len(b):]) == tuple(b)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} are incompatible")


# --- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    sb = b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)
    sb = b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    ad, bd, sb = a.data, b.data, b.shape
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# --- linear algebra / shape --------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        k, n = bd.shape

        def bwd(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def bwd(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return _record("matmul", ad @ bd, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def take_rows(a: Tensor, stop: int) -> Tensor:
    """First ``stop`` entries along axis 0."""
    if not 0 < stop <= a.shape[0]:
        raise ShapeError(f"take_rows: cannot take {stop} rows from {list(a.shape)}")
    shp = a.shape

    def bwd(g):
        full = np.zeros(shp)
        full[:stop] = g
        return (full,)
    return _record("take_rows", a.data[:stop].copy(), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    shp = a.shape
    return _record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shp, float(g)),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    shp = a.shape
    if axis is None:
        n = a.size
        return _record("mean", np.asarray(a.data.mean()), (a,),
                       lambda g: (np.full(shp, float(g) / n),))
    ax = axis % a.ndim
    n = shp[ax]

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shp).copy(),)
    return _record("mean", a.data.mean(axis=ax), (a,), bwd)


# --- fused nonlinearities ----------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: last axis has size 0")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {list(gain.shape)}/{list(bias.shape)} vs d={d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bwd(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _record("layer_norm", xhat * gd + bias.data, (x, gain, bias), bwd)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _record("softmax", y, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)
    return _record("gelu", y, (x,), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {list(pred.shape)} vs {list(target.shape)}")
    diff = pred.data - target.data
    n = diff.size

    def bwd(g):
        gp = (2.0 * float(g) / n) * diff
        return gp, -gp
    return _record("mse_loss", np.asarray(np.mean(diff * diff)), (pred, target), bwd)


def film(x: Tensor, scale_: Tensor, shift: Tensor) -> Tensor:
    """Feature-wise modulation ``x * (1 + scale) + shift`` applied to every token.

    ``x`` is ``[..., T, H]``; ``scale_``/``shift`` are ``[..., H]`` with the same
    leading axes as ``x``.
    """
    want = x.shape[:-2] + x.shape[-1:]
    if x.ndim < 2 or scale_.shape != want or shift.shape != want:
        raise ShapeError(f"film: x {list(x.shape)}, scale {list(scale_.shape)}, "
                         f"shift {list(shift.shape)}")
    s = scale_.data[..., None, :]
    xd = x.data

    def bwd(g):
        return g * (1.0 + s), (g * xd).sum(axis=-2), g.sum(axis=-2)
    return _record("film", xd * (1.0 + s) + shift.data[..., None, :], (x, scale_, shift), bwd)


def token_mul(x: Tensor, gate: Tensor) -> Tensor:
    """``x[..., T, F] * gate[..., F]`` with the gate shared across tokens."""
    want = x.shape[:-2] + x.shape[-1:]
    if x.ndim < 2 or gate.shape != want:
        raise ShapeError(f"token_mul: x {list(x.shape)}, gate {list(gate.shape)}")
    gd = gate.data[..., None, :]
    xd = x.data
    return _record("token_mul", xd * gd, (x, gate), lambda g: (g * gd, (g * xd).sum(axis=-2)))


# --- reverse pass ------------------------------------------------------------

def backward(loss: Tensor, tape: Tape,
             wrt: Mapping[str, Tensor] | None = None) -> dict:
    """Propagate d(loss) back through ``tape``.

    With ``wrt`` the result is ``{name: gradient Tensor}`` in the same order,
    zero for anything the loss does not reach.  Without it the result is keyed
    by ``id()`` of every ``requires_grad`` leaf seen on the tape.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
    if not any(node.output is loss for node in tape.nodes):
        raise ValueError("backward: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        produced.add(id(node.output))
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves.setdefault(id(inp), inp)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None) if node.output is not loss else grads.get(id(loss))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
    if wrt is not None:
        return {name: Tensor._wrap(grads.get(id(t), np.zeros(t.shape)), False)
                for name, t in wrt.items()}
    return {k: Tensor._wrap(grads.get(k, np.zeros(t.shape)), False) for k, t in leaves.items()}


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Mapping[str, Tensor | np.ndarray]) -> AdamState:
    shapes = {k: np.shape(p.data if isinstance(p, Tensor) else p) for k, p in params.items()}
    return AdamState(0, {k: np.zeros(s) for k, s in shapes.items()},
                     {k: np.zeros(s) for k, s in shapes.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are not modified."""
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p) or state.m[k].shape != g.shape:
            raise ShapeError(f"adam_step: shape mismatch for {k!r}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_p, AdamState(t, new_m, new_v)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                   index: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``arr`` (perturbed in place).

    Entries not listed in ``index`` are left as NaN.
    """
    out = np.full(arr.shape, np.nan)
    idx = list(np.ndindex(arr.shape)) if index is None else list(index)
    for i in idx:
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out
