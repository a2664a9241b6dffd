"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it in
evaluation order (a Wengert list), so the backward pass is a single
reversed sweep. Outside a tape, tensors behave as plain arrays and record
nothing, which is what sampling uses.

    with Tape() as tape:
        y = (x @ w).sum()
    tape.backward(y)
    w.grad
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=float) if not isinstance(data, np.ndarray) else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor({self.name or ''}shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    # arithmetic ---------------------------------------------------------
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
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Tape:
    """Records ``(output, inputs, backward_fn)`` nodes in evaluation order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.nodes.append((out, tuple(inputs), backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None):
        """Accumulate ``d loss / d leaf`` into ``.grad`` of every tracked leaf."""
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if seed is None else seed}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, p in zip(inputs, fn(g)):
                if p is None or not isinstance(inp, Tensor):
                    continue
                key = id(inp)
                grads[key] = grads[key] + p if key in grads else p
                if inp.requires_grad:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes.clear()


def _tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _track(*inputs) -> bool:
    return bool(_ACTIVE) and any(isinstance(i, Tensor) for i in inputs)


def _val(x):
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (int, float)):
        # python scalars stay weakly typed so float32 graphs stay float32
        return float(x)
    return np.asarray(x, dtype=float)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if shape == ():
        return g.sum()
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data, inputs, backward) -> Tensor:
    out = Tensor(data)
    if _track(*inputs):
        _tape().record(out, tuple(i for i in inputs), backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# primitives ---------------------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(av + bv, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(av - bv, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), -_unbroadcast(g, np.shape(bv))))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))),
    )


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av / bv,
        (a, b),
        lambda g: (_unbroadcast(g / bv, np.shape(av)), _unbroadcast(-g * av / (bv * bv), np.shape(bv))),
    )


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if bv.ndim == 2 and av.ndim > 2:
        # fold leading axes so BLAS sees one large product
        k, m = bv.shape
        a2 = av.reshape(-1, k)

        def backward_2d(g):
            g2 = g.reshape(-1, m)
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return _make((a2 @ bv).reshape(av.shape[:-1] + (m,)), (a, b), backward_2d)

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(av.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes) -> Tensor:
    av = _val(a)
    axes = tuple(axes) if axes else tuple(reversed(range(av.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(av.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def square(a) -> Tensor:
    av = _val(a)
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def silu(a) -> Tensor:
    av = _val(a)
    sig = 1.0 / (1.0 + np.exp(-av))
    out = av * sig
    return _make(out, (a,), lambda g: (g * (sig * (1.0 + av * (1.0 - sig))),))


def softmax(a, axis=-1) -> Tensor:
    av = _val(a)
    z = av - av.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    av = _val(a)
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    vals = [_val(t) for t in tensors]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate(vals, axis=axis), tuple(tensors), backward)


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between tape gradients and central differences.

    The relative error of an entry is ``|a - n| / max(|a| + |n|, floor)``
    where ``a`` is the reverse-mode value and ``n`` the numerical one. The
    floor keeps entries whose true derivative is zero (e.g. key biases under
    softmax shift invariance) from reporting pure rounding noise.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    tape.backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), floor))
    return worst


__all__ = [
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "div",
    "gradient_check",
    "layer_norm",
    "matmul",
    "mul",
    "reshape",
    "silu",
    "softmax",
    "square",
    "sub",
    "transpose",
    "tsum",
    "tmean",
]
