"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Usage::

    tape = Tape()
    with tape:
        w = Tensor(w0, requires_grad=True, name="w")
        loss = ad.sum(ad.mul(w, w))
    grads = backward(tape, loss)          # {"w": 2 * w0}

Operations are recorded only while a tape is active on the current thread
and at least one input requires a gradient; otherwise they run as plain
numpy. Every primitive checks its output for NaN/Inf.

Sequence tensors are laid out channels-last: ``(batch, length, channels)``.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tape:
    """Ordered record of primitive applications.

    Recording order is a valid topological order, so the backward pass
    walks the list in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        """Drop the recorded graph. Tensors and the tape reference each other,
        so without this the activations wait for the cyclic collector."""
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


class Tensor:
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    __slots__ = ("data", "requires_grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _make(name: str, out: np.ndarray, parents: Sequence, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    t = Tensor(out)
    tape = active_tape()
    if tape is None:
        return t
    ps = tuple(as_tensor(p) for p in parents)
    if not any(p.requires_grad for p in ps):
        return t
    t.requires_grad = True
    t._tape = tape
    t._index = len(tape.nodes)
    tape.nodes.append(_Node(t, ps, vjp))
    return t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    ad_, bd = _data(a), _data(b)
    sa, sb = ad_.shape, bd.shape
    return _make("add", ad_ + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    ad_, bd = _data(a), _data(b)
    sa, sb = ad_.shape, bd.shape
    return _make("sub", ad_ - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    ad_, bd = _data(a), _data(b)
    return _make(
        "mul",
        ad_ * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad_.shape), _unbroadcast(g * ad_, bd.shape)),
    )


def div(a, b) -> Tensor:
    ad_, bd = _data(a), _data(b)
    out = ad_ / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad_.shape), _unbroadcast(-ga * out, bd.shape)

    return _make("div", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _make("scale", _data(a) * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    ad_, bd = _data(a), _data(b)
    if ad_.ndim != 2 or bd.ndim != 2 or ad_.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad_.shape} @ {bd.shape}")
    return _make("matmul", ad_ @ bd, (a, b), lambda g: (g @ bd.T, ad_.T @ g))


def conv1d(x, w, b=None, dilation: int = 1) -> Tensor:
    """Stride-1 'same' convolution with zero padding.

    x: (B, L, Cin); w: (K, Cin, Cout) with K odd; b: (Cout,) or None.
    """
    xd, wd = _data(x), _data(w)
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[2] != wd.shape[1]:
        raise ValueError(f"conv1d shape mismatch: x {xd.shape}, w {wd.shape}")
    K, cin, cout = wd.shape
    if K % 2 != 1:
        raise ValueError("conv1d kernel size must be odd")
    B, L, _ = xd.shape
    pad = dilation * (K - 1) // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0))) if pad else xd
    cols = np.stack([xp[:, k * dilation : k * dilation + L, :] for k in range(K)], axis=2)
    cols = cols.reshape(B * L, K * cin)
    w2 = wd.reshape(K * cin, cout)
    out = (cols @ w2).reshape(B, L, cout)
    if b is not None:
        out = out + _data(b)

    def vjp(g):
        g2 = g.reshape(B * L, cout)
        gw = (cols.T @ g2).reshape(wd.shape)
        gcols = (g2 @ w2.T).reshape(B, L, K, cin)
        gxp = np.zeros((B, L + 2 * pad, cin), dtype=gcols.dtype)
        for k in range(K):
            gxp[:, k * dilation : k * dilation + L, :] += gcols[:, :, k, :]
        gx = gxp[:, pad : pad + L, :] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv1d", out, parents, vjp)


def relu(x) -> Tensor:
    xd = _data(x)
    mask = xd > 0
    return _make("relu", xd * mask, (x,), lambda g: (g * mask,))


def silu(x) -> Tensor:
    xd = _data(x)
    s = 0.5 + 0.5 * np.tanh(0.5 * xd)  # logistic without exp overflow
    return _make("silu", xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def exp(x) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _make
        out = np.exp(_data(x))
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    xd = _data(x)
    if np.any(xd <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    xd = _data(x)
    mask = (xd > lo) & (xd < hi)
    return _make("clip", np.clip(xd, lo, hi), (x,), lambda g: (g * mask,))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    xd = _data(x)
    shape = xd.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(xd.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    xd = _data(x)
    n = xd.size // np.asarray(xd.sum(axis=axis, keepdims=keepdims)).size
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def broadcast_to(x, shape) -> Tensor:
    xd = _data(x)
    return _make(
        "broadcast",
        np.broadcast_to(xd, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, xd.shape),),
    )


def reshape(x, shape) -> Tensor:
    xd = _data(x)
    return _make("reshape", xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    datas = [_data(x) for x in xs]
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make("concat", np.concatenate(datas, axis=axis), tuple(xs), vjp)


def slice_(x, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    xd = _data(x)

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[idx] = g
        return (gx,)

    return _make("slice", np.array(xd[idx]), (x,), vjp)


# ---------------------------------------------------------------- backward


def backward(
    tape: Tape,
    loss: Tensor,
    wrt: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` recorded on ``tape``.

    Returns a dict keyed by leaf name. With ``wrt`` given, exactly those
    leaves are reported (zeros for the unreachable ones); otherwise every
    named leaf the loss depends on.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if wrt is not None:
        leaves = dict(wrt) if isinstance(wrt, Mapping) else {t.name: t for t in wrt}
    else:
        leaves = None

    if loss._tape is None:
        # a constant (zero gradient everywhere) or a bare leaf
        seed = {id(loss): np.ones_like(loss.data)} if loss.requires_grad else {}
        if leaves is None:
            return {loss.name: seed[id(loss)]} if seed and loss.name else {}
        return {n: seed.get(id(t), np.zeros_like(_data(t))) for n, t in leaves.items()}
    if loss._tape is not tape:
        raise ValueError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaf_refs: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss._index + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgs = node.vjp(g)
        for p, pg in zip(node.parents, pgs):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            target = grads if p._tape is not None else leaf_grads
            if p._tape is None:
                leaf_refs[key] = p
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg
    if leaves is None:
        return {leaf_refs[k].name: g for k, g in leaf_grads.items() if leaf_refs[k].name}
    return {
        n: leaf_grads.get(id(t), np.zeros_like(_data(t))) for n, t in leaves.items()
    }


def value_and_grad(fn: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn`` on leaf tensors built from ``params``; return (loss, grads)."""
    tape = Tape()
    with tape:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        loss = fn(leaves)
    try:
        return float(loss.data), backward(tape, loss, leaves)
    finally:
        tape.clear()


def finite_diff_check(
    fn: Callable[[Mapping], object],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    atol_floor: float = 1e-8,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a dict of parameters (Tensors or arrays) to a scalar and
    must be deterministic; it is evaluated twice at the base point to check.
    Where both gradients are below ``atol_floor`` in magnitude the absolute
    difference is used instead of the relative one. ``max_coords`` caps the
    number of coordinates probed per parameter (chosen with ``rng``).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base = _scalar(fn(params))
    if _scalar(fn(params)) != base:
        raise ValueError("function is not deterministic")
    _, grads = value_and_grad(fn, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        g_ad = grads[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(fn(params))
            flat[i] = orig - step
            fm = _scalar(fn(params))
            flat[i] = orig
            g_fd = (fp - fm) / (2 * step)
            denom = max(abs(g_fd), abs(g_ad[i]))
            err = abs(g_fd - g_ad[i])
            if denom >= atol_floor:
                err /= denom
            worst = max(worst, err)
    return worst


def _scalar(v) -> float:
    return float(_data(v))


# public spelling; defined last so the module body keeps the builtin
sum = sum_  # noqa: A001
