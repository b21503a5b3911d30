"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the primitives needed by the spectral operator network and the
element-assembled losses are provided: broadcasting arithmetic, a two-operand
einsum, gather/scatter indexing, reductions, GELU, and unitary 2-D Fourier
transforms (mixed-radix via numpy, so 51- and 101-point grids work).

Complex tensors follow the convention that the stored gradient of a complex
intermediate z is ``dL/dRe(z) + 1j * dL/dIm(z)`` for a real-valued loss L.
Leaves are kept real in practice (complex values only appear transiently
between ``to_complex`` and ``real``), so optimizers never see complex grads.

Graphs are built implicitly through parent references; ``backward`` walks the
graph once in reverse topological order.  Everything is single-threaded and
bitwise deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "tensor",
    "as_tensor",
    "backward",
    "grads",
    "add", "sub", "mul", "div", "neg", "scale",
    "exp", "log", "sqrt", "square", "gelu",
    "sum_over", "mean_over",
    "reshape", "transpose", "stack", "concat", "pad",
    "take", "scatter_add", "getitem",
    "einsum", "matmul",
    "to_complex", "make_complex", "real", "imag",
    "fft2", "ifft2",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Dense array node; records parents and a vjp rule when grads are needed."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp")

    # keep numpy from absorbing Tensor operands in mixed expressions
    __array_ufunc__ = None

    def __init__(self, values, requires_grad=False, parents=(), vjp=None):
        v = np.asarray(values)
        if v.dtype.kind in "iub":
            v = v.astype(np.float64)
        self.values = v
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def is_complex(self):
        return self.values.dtype.kind == "c"

    def item(self):
        return self.values.item()

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(values, requires_grad=False) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce(node_values: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Project an incoming cotangent onto the node's dtype."""
    if node_values.dtype.kind != "c" and np.iscomplexobj(g):
        return np.ascontiguousarray(g.real)
    return g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(values, parents, vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(values)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    v = a.values + b.values
    return _make(v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    v = a.values - b.values
    return _make(v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    v = a.values * b.values
    av, bv = a.values, b.values
    return _make(v, (a, b), lambda g: (
        _unbroadcast(g * np.conj(bv), a.shape),
        _unbroadcast(g * np.conj(av), b.shape),
    ))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    v = a.values / b.values
    av, bv = a.values, b.values
    return _make(v, (a, b), lambda g: (
        _unbroadcast(g / np.conj(bv), a.shape),
        _unbroadcast(-g * np.conj(av) / np.conj(bv * bv), b.shape),
    ))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.values * c, (a,), lambda g: (g * np.conj(c),))


def power(a, p) -> Tensor:
    a = as_tensor(a)
    if not np.isscalar(p):
        raise TypeError("only scalar exponents are supported")
    av = a.values
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    v = np.exp(a.values)
    return _make(v, (a,), lambda g: (g * v,))


def log(a):
    if not isinstance(a, Tensor):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.log(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.log(a.values)
    av = a.values
    return _make(v, (a,), lambda g: (g / av,))


def sqrt(a):
    if not isinstance(a, Tensor):
        return np.sqrt(a)
    v = np.sqrt(a.values)
    return _make(v, (a,), lambda g: (g * (0.5 / v),))


def square(a):
    return mul(a, a)


def gelu(a):
    """Exact GELU, x * Phi(x) with the standard normal CDF."""
    x = a.values if isinstance(a, Tensor) else np.asarray(a)
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    v = x * cdf
    if not isinstance(a, Tensor):
        return v
    dens = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _make(v, (a,), lambda g: (g * (cdf + x * dens),))


# ---------------------------------------------------------------------------
# reductions and structure

def sum_over(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    v = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(v, (a,), vjp)


def mean_over(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    return scale(sum_over(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.values.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def stack(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    v = np.stack([p.values for p in parts], axis=axis)

    def vjp(g):
        pieces = np.moveaxis(g, axis, 0)
        return tuple(pieces[i] for i in range(len(parts)))

    return _make(v, tuple(parts), vjp)


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    v = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(v, tuple(parts), vjp)


def pad(a, pad_width) -> Tensor:
    """Constant zero padding; pad_width as in numpy.pad."""
    a = as_tensor(a)
    v = np.pad(a.values, pad_width)

    def vjp(g):
        sl = tuple(slice(p[0], p[0] + s) for p, s in zip(pad_width, a.shape))
        return (g[sl],)

    return _make(v, (a,), vjp)


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    v = a.values[idx]
    fancy = _has_array_index(idx)

    def vjp(g):
        z = np.zeros(a.shape, dtype=a.dtype)
        gg = _coerce(z, g)
        if fancy:
            np.add.at(z, idx, gg)
        else:
            z[idx] = gg
        return (z,)

    return _make(v, (a,), vjp)


def take(a, indices, axis=0) -> Tensor:
    """Gather along an axis with an integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    v = np.take(a.values, indices, axis=axis)

    def vjp(g):
        z = np.zeros(a.shape, dtype=a.dtype)
        if axis == 0:
            np.add.at(z, indices, _coerce(z, g))
        else:
            zm = np.moveaxis(z, axis, 0)
            np.add.at(zm, indices, np.moveaxis(_coerce(z, g), axis, 0))
        return (z,)

    return _make(v, (a,), vjp)


def scatter_add(a, indices, size, axis=0) -> Tensor:
    """Sum entries of ``a`` into a fresh array of length ``size`` along axis 0.

    ``indices`` must be 1-D with one target row per leading entry of ``a``.
    """
    a = as_tensor(a)
    indices = np.asarray(indices)
    if axis != 0:
        raise ValueError("scatter_add supports axis 0 only")
    out_shape = (size,) + a.shape[1:]
    v = np.zeros(out_shape, dtype=a.dtype)
    np.add.at(v, indices, a.values)
    return _make(v, (a,), lambda g: (_coerce(a.values, g[indices]),))


# ---------------------------------------------------------------------------
# contractions

def _parse_two_operand(spec: str):
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    for sub_ in (sa, sb):
        plain = sub_.replace("...", "")
        if len(set(plain)) != len(plain):
            raise ValueError(f"repeated index within one operand: {spec!r}")
    for ch in sa.replace("...", ""):
        if ch not in out and ch not in sb:
            raise ValueError(f"index {ch!r} of first operand summed alone: {spec!r}")
    for ch in sb.replace("...", ""):
        if ch not in out and ch not in sa:
            raise ValueError(f"index {ch!r} of second operand summed alone: {spec!r}")
    if ("..." in sa or "..." in sb) and "..." not in out:
        raise ValueError(f"broadcast axes must appear in the output: {spec!r}")
    return sa, sb, out


def _einsum_back(target: str, other: str, out: str, g, ov, shape):
    """Cotangent for one operand of a two-operand einsum."""
    tgt = target
    if "..." not in target and ("..." in out or "..." in other):
        tgt = "..." + target  # sum the broadcast axes afterwards
    v = np.einsum(f"{out},{other}->{tgt}", g, np.conj(ov))
    return _unbroadcast(v, shape) if v.shape != shape else v


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum with reverse rules built from the same spec."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb, out = _parse_two_operand(spec)
    v = np.einsum(spec, a.values, b.values)
    av, bv = a.values, b.values
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _einsum_back(sa, sb, out, g, bv, a.shape) if need_a else None
        gb = _einsum_back(sb, sa, out, g, av, b.shape) if need_b else None
        return ga, gb

    return _make(v, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        return einsum("ij,jk->ik", a, b)
    if a.ndim == 2 and b.ndim == 1:
        return einsum("ij,j->i", a, b)
    raise ValueError(f"unsupported matmul ranks {a.ndim} x {b.ndim}")


# ---------------------------------------------------------------------------
# complex support and Fourier transforms

def to_complex(a) -> Tensor:
    a = as_tensor(a)
    v = a.values.astype(np.complex128)
    return _make(v, (a,), lambda g: (np.ascontiguousarray(g.real),))


def make_complex(re, im) -> Tensor:
    re, im = as_tensor(re), as_tensor(im)
    v = re.values + 1j * im.values
    return _make(v, (re, im), lambda g: (
        _unbroadcast(np.ascontiguousarray(g.real), re.shape),
        _unbroadcast(np.ascontiguousarray(g.imag), im.shape),
    ))


def real(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.ascontiguousarray(a.values.real), (a,),
                 lambda g: (g.astype(np.complex128),))


def imag(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.ascontiguousarray(a.values.imag), (a,),
                 lambda g: ((1j * g).astype(np.complex128),))


def fft2(a) -> Tensor:
    """Unitary 2-D FFT over the last two axes (any grid size)."""
    a = as_tensor(a)
    if not a.is_complex():
        a = to_complex(a)
    v = np.fft.fft2(a.values, axes=(-2, -1), norm="ortho")
    return _make(v, (a,), lambda g: (np.fft.ifft2(g, axes=(-2, -1), norm="ortho"),))


def ifft2(a) -> Tensor:
    """Unitary inverse 2-D FFT over the last two axes."""
    a = as_tensor(a)
    if not a.is_complex():
        a = to_complex(a)
    v = np.fft.ifft2(a.values, axes=(-2, -1), norm="ortho")
    return _make(v, (a,), lambda g: (np.fft.fft2(g, axes=(-2, -1), norm="ortho"),))


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor with ``requires_grad``.

    Unreachable leaves keep ``grad=None``; treat that as a zero gradient.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tracked tensor")

    order = _topo_order(loss)
    table = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = table.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            pg = _coerce(p.values, pg)
            key = id(p)
            if key in table:
                table[key] = table[key] + pg
            else:
                table[key] = pg


def grads(loss: Tensor, leaves) -> list:
    """Backward pass returning one gradient array per leaf (zeros if detached)."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
        for leaf in leaves
    ]
