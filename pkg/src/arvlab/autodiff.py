"""Reverse-mode automatic differentiation over dense numpy arrays.

Small by design: only the primitives a tiny causal transformer needs.
Graphs are built eagerly; each Tensor produced under grad mode keeps
references to its parents and a closure that routes the adjoint back.
Everything created inside a `no_grad()` block is a constant leaf, which
is what makes frozen-context training genuinely skip adjoint bookkeeping.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN/Inf, or a graph contains non-finite values."""


_GRAD_ENABLED = True
_FINITE_CHECKS = True
_GRAPH_SCALARS = 0  # gradient-tracked values created since last reset


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; outputs become constant leaves."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_checks(flag: bool) -> bool:
    """Toggle per-primitive NaN/Inf checking. Returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(flag)
    return prev


def reset_graph_counter() -> None:
    global _GRAPH_SCALARS
    _GRAPH_SCALARS = 0


def graph_scalars() -> int:
    """Count of gradient-tracked scalars created since the last reset."""
    return _GRAPH_SCALARS


def _check_finite(data: np.ndarray) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by a primitive operation")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._bwd = None
        if self.requires_grad:
            _check_finite(arr)
            global _GRAPH_SCALARS
            _GRAPH_SCALARS += arr.size

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; accumulates into leaf .grad."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("loss is non-finite")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)
                node._bwd = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(data)
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = req
    if req:
        out._parents = parents
        out._bwd = bwd
        global _GRAPH_SCALARS
        _GRAPH_SCALARS += data.size
    else:
        out._parents = ()
        out._bwd = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise primitives --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _wrap(a)
        c = float(b)
        out_data = a.data * c

        def bwd_s(g):
            _accum(a, g * c)

        return _make(out_data, (a,), bwd_s)
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data**p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bwd)


def square(a) -> Tensor:
    a = _wrap(a)
    out_data = a.data * a.data

    def bwd(g):
        _accum(a, g * 2.0 * a.data)

    return _make(out_data, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out_data = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        grad = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        _accum(a, g * grad)

    return _make(out_data, (a,), bwd)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- shape primitives --------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(out_data, (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    out_data = a.data[idx]
    if out_data.base is not None:
        out_data = out_data.copy()

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make(out_data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), bwd)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(out_data), (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add backward into the table."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= weight.data.shape[0]):
        raise IndexError("embedding index out of range")
    out_data = weight.data[ids]

    def bwd(g):
        if not weight.requires_grad:
            return
        if weight.grad is None:
            weight.grad = np.zeros_like(weight.data)
        np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, weight.data.shape[1]))

    return _make(out_data, (weight,), bwd)


# -- softmax family ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = a.data - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out_data = s - lse

    def bwd(g):
        p = np.exp(out_data)
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), bwd)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _wrap(x)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        gy = g * gain.data
        gx = inv / n * (n * gy - gy.sum(-1, keepdims=True) - xhat * (gy * xhat).sum(-1, keepdims=True))
        _accum(x, gx)
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))

    return _make(out_data, (x, gain, bias), bwd)


def gather_last(a, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    a = _wrap(a)
    idx = np.asarray(idx)
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.put_along_axis(
            a.grad,
            idx[..., None],
            np.take_along_axis(a.grad, idx[..., None], axis=-1) + g[..., None],
            axis=-1,
        )

    return _make(out_data, (a,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over masked-in positions.

    `targets` and `mask` index the leading shape of `logits`; the softmax is
    taken over the last axis. Never exponentiates raw logits.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ValueError("targets shape must match logits leading shape")
    vocab = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("target token out of range")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    denom = float(mask.sum())
    if denom == 0:
        raise ValueError("cross_entropy mask selects no positions")
    lp = log_softmax(logits, axis=-1)
    picked = gather_last(lp, targets)
    m = mask.astype(logits.data.dtype)
    return mul(tsum(mul(picked, Tensor(m))), -1.0 / denom)


# -- verification ------------------------------------------------------------


def grad_check(builder, params, epsilon: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    `builder` rebuilds the loss graph from the current parameter data each
    call; `params` maps names to leaf Tensors. Intended for 64-bit mode.
    """
    if not (0 < epsilon <= 1e-3):
        raise ValueError("epsilon must be in (0, 1e-3]")
    if isinstance(params, dict):
        items = list(params.items())
    else:
        items = [(str(i), p) for i, p in enumerate(params)]
    for _, p in items:
        p.zero_grad()
    loss = builder()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in items}
    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                fp = builder().item()
            flat[i] = orig - epsilon
            with no_grad():
                fm = builder().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            a = aflat[i]
            # resolution floor: the difference of two function evaluations
            # carries roundoff of order |f|*eps_machine, so gradients below
            # that scale divided by the step cannot be resolved
            floor = 1e-9 + abs(fp) * 1e-15 / (2.0 * epsilon)
            if abs(a - numeric) <= floor:
                continue
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
