"""Dense-tensor kernel with reverse-mode differentiation.

Small fixed op set over 32-bit (training) / 64-bit (verification) numpy
arrays, plus a parameter store with freeze support, decoupled-weight-decay
Adam, a counter-based RNG, and a finite-difference gradient checker.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64
_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class NumericsError(Exception):
    pass


class ShapeError(NumericsError):
    pass


class MissingGradientError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


# ---------------------------------------------------------------------------
# RNG and hashing
# ---------------------------------------------------------------------------


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a over a byte string (optionally chained via h)."""
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(*parts) -> int:
    """Deterministic 64-bit seed from a sequence of ints/strings."""
    h = _FNV_OFFSET
    for p in parts:
        h = fnv1a64(str(p).encode("utf-8"), h)
        h = fnv1a64(b"/", h)
    return h


class Rng:
    """Counter-based (Philox) RNG with named splitting.

    Children derived via `split(tag)` are statistically independent and
    fully determined by (root seed, tag path).
    """

    def __init__(self, seed: int, _path: str = ""):
        self.seed = seed & _MASK64
        self._path = _path
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, tag) -> "Rng":
        path = f"{self._path}/{tag}"
        return Rng(derive_seed(self.seed, path), path)

    def uniform(self, lo: float, hi: float, shape=None, dtype=F32) -> np.ndarray:
        return np.asarray(self._gen.uniform(lo, hi, size=shape)).astype(dtype)

    def normal(self, mean: float, std: float, shape=None, dtype=F32) -> np.ndarray:
        return np.asarray(self._gen.standard_normal(size=shape) * std + mean).astype(dtype)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        return int(self._gen.integers(lo, hi))

    def choice(self, seq: Sequence):
        return seq[self.randint(0, len(seq))]

    def shuffled(self, seq: Sequence) -> list:
        out = list(seq)
        self._gen.shuffle(out)
        return out


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Array node on a reverse-mode tape.

    Data is float32 or float64 (never mixed inside one graph). Tensors are
    immutable once built except for optimizer-owned parameter updates.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (F32, F64):
            arr = arr.astype(F32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse pass from this node (scalar unless grad is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        # iterative topological order over the requires_grad subgraph
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = grad.astype(self.data.dtype, copy=False)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def const(x, dtype=F32) -> Tensor:
    """Non-differentiable tensor (loss targets, fixed maps)."""
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(*ts: Tensor) -> None:
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise ShapeError(f"mixed dtypes on tape: {d} vs {t.data.dtype}")


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    data = a.data / b.data

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _node(-a.data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, g.T)

    return _node(a.data.T, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def back(g):
        _accum(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), back)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_same_dtype(*ts)
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(data, tuple(ts), back)


def index_rows(a: Tensor, idx) -> Tensor:
    """Gather rows: out[i] = a[idx[i]]. Backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _node(data, (a,), back)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    data = a.data[:, lo:hi]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[:, lo:hi] = g
        _accum(a, ga)

    return _node(data, (a,), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape).astype(a.data.dtype, copy=False))

    return _node(np.asarray(data), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), const(1.0 / n, a.dtype))


def reduce_max(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Max over one axis; subgradient routes to the first argmax."""
    data = a.data.max(axis=axis, keepdims=keepdims)
    arg = a.data.argmax(axis=axis)

    def back(g):
        ga = np.zeros_like(a.data)
        ge = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, np.expand_dims(arg, axis), ge, axis)
        _accum(a, ga)

    return _node(data, (a,), back)


def softmax(a: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, s * (g - dot))

    return _node(s, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    _check_same_dtype(x, gain, bias)
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-D input")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    data = y * gain.data + bias.data

    def back(g):
        d = x.data.shape[-1]
        gy = g * gain.data
        # d/dx of (x-mu)*inv with mu, var functions of x
        term = gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True)
        _accum(x, term * inv)
        _accum(gain, (g * y).sum(axis=0))
        _accum(bias, g.sum(axis=0))

    return _node(data, (x, gain, bias), back)


def sigmoid(a: Tensor) -> Tensor:
    # stable in both tails
    d = a.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    s = s.astype(d.dtype, copy=False)

    def back(g):
        _accum(a, g * s * (1.0 - s))

    return _node(s, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _node(a.data * mask, (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        dt = (1.0 - t * t) * dinner
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _node(data.astype(x.dtype, copy=False), (a,), back)


def softplus(a: Tensor) -> Tensor:
    """log(1+exp(x)), computed stably; d/dx = sigmoid(x)."""
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accum(a, g * sig.astype(x.dtype, copy=False))

    return _node(data.astype(x.dtype, copy=False), (a,), back)


def pow_const(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def back(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(data, (a,), back)


class Im2ColPlan:
    """Precomputed gather indices turning a 3x3 (or kxk) convolution into a matmul.

    Input rows are (H*W, C); output rows are (Ho*Wo, k*k*C). Out-of-image
    taps index a zero pad slot.
    """

    def __init__(self, h: int, w: int, k: int, stride: int, pad: int):
        self.h, self.w, self.k, self.stride, self.pad = h, w, k, stride, pad
        self.ho = (h + 2 * pad - k) // stride + 1
        self.wo = (w + 2 * pad - k) // stride + 1
        rows = []
        for oy in range(self.ho):
            for ox in range(self.wo):
                taps = []
                for ky in range(k):
                    for kx in range(k):
                        y = oy * stride + ky - pad
                        x = ox * stride + kx - pad
                        taps.append(y * w + x if 0 <= y < h and 0 <= x < w else h * w)
                rows.append(taps)
        # index h*w is the pad slot appended below
        self.idx = np.asarray(rows, dtype=np.int64)


def im2col(x: Tensor, plan: Im2ColPlan) -> Tensor:
    """x: (H*W, C) -> (Ho*Wo, k*k*C) patch matrix per the plan."""
    c = x.data.shape[1]
    padded = np.concatenate([x.data, np.zeros((1, c), dtype=x.data.dtype)], axis=0)
    gathered = padded[plan.idx]  # (Ho*Wo, k*k, C)
    data = gathered.reshape(plan.idx.shape[0], -1)

    def back(g):
        g3 = g.reshape(plan.idx.shape[0], plan.idx.shape[1], c)
        gp = np.zeros_like(padded)
        np.add.at(gp, plan.idx, g3)
        _accum(x, gp[:-1])

    return _node(data, (x,), back)


# ---------------------------------------------------------------------------
# Composite ops
# ---------------------------------------------------------------------------


def attention(queries: Tensor, keys: Tensor, values: Tensor, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention, heads split over the feature axis.

    Row i of the output is softmax(q_i.K^T / sqrt(d_head)).V per head,
    heads concatenated. No projections here; callers own those.
    """
    _check_same_dtype(queries, keys, values)
    d = queries.data.shape[-1]
    if keys.data.shape[-1] != d or values.data.shape[-1] != d:
        raise ShapeError("attention: query/key/value widths differ")
    if keys.data.shape[0] != values.data.shape[0]:
        raise ShapeError("attention: key/value counts differ")
    if d % n_heads != 0:
        raise ShapeError(f"attention: d={d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(queries, lo, hi) if n_heads > 1 else queries
        kh = slice_cols(keys, lo, hi) if n_heads > 1 else keys
        vh = slice_cols(values, lo, hi) if n_heads > 1 else values
        w = softmax(mul(matmul(qh, transpose(kh)), const(scale, queries.dtype)))
        outs.append(matmul(w, vh))
    return outs[0] if n_heads == 1 else concat(outs, axis=1)


# ---------------------------------------------------------------------------
# Parameter store, layers, optimizer
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with a frozen subset excluded from updates."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise NumericsError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(array), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params.keys())

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            if n not in self.params:
                raise NumericsError(f"cannot freeze unknown parameter {n!r}")
            self.frozen.add(n)
            self.params[n].requires_grad = False

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def trainable_count(self) -> int:
        return sum(self.params[n].data.size for n in self.trainable_names())

    def fingerprint(self, names: Optional[Iterable[str]] = None) -> int:
        """FNV-1a 64 over (sorted name, payload bytes) of the chosen params."""
        chosen = sorted(self.frozen if names is None else names)
        h = _FNV_OFFSET
        for n in chosen:
            h = fnv1a64(n.encode("utf-8"), h)
            h = fnv1a64(np.ascontiguousarray(self.params[n].data).tobytes(), h)
        return h

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n, t in self.params.items():
            out.create(n, t.data.astype(dtype))
        out.freeze(self.frozen)
        return out

    def grads(self) -> dict[str, np.ndarray]:
        """Collected gradients of trainable params after a backward pass."""
        out = {}
        for n in self.trainable_names():
            g = self.params[n].grad
            if g is not None:
                out[n] = g
        return out

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def linear_init(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: Rng) -> None:
    """Uniform +-1/sqrt(fan_in) weight, zero bias."""
    bound = 1.0 / math.sqrt(fan_in)
    store.create(f"{name}.w", rng.uniform(-bound, bound, (fan_in, fan_out)))
    store.create(f"{name}.b", np.zeros(fan_out, dtype=F32))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def layer_norm_init(store: ParamStore, name: str, dim: int) -> None:
    store.create(f"{name}.g", np.ones(dim, dtype=F32))
    store.create(f"{name}.b", np.zeros(dim, dtype=F32))


def layer_norm_apply(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


class AdamW:
    """Decoupled-weight-decay Adam over a store's unfrozen parameters."""

    def __init__(self, store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self.store.trainable_names():
            if name not in grads:
                raise MissingGradientError(f"no gradient for trainable parameter {name!r}")
            g = grads[name].astype(F32, copy=False)
            p = self.store[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - F32(lr) * update - F32(lr * self.weight_decay) * p.data


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_difference_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                            step: float = 1e-5) -> float:
    """Max relative error between central differences and the tape gradient.

    `fn` must map a float64 tensor to a scalar tensor. Relative error is
    |cd - ad| / (|cd| + 1e-8) per coordinate.
    """
    if point.data.dtype != F64:
        raise NumericsError("finite_difference_check requires a float64 point")
    x0 = point.data.copy()
    probe = Tensor(x0.copy(), requires_grad=True, dtype=F64)
    out = fn(probe)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("fn returned a non-finite value")
    out.backward()
    ad = probe.grad.copy() if probe.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        fp = fn(Tensor(xp.reshape(x0.shape), dtype=F64)).item()
        xm = flat.copy()
        xm[i] -= step
        fm = fn(Tensor(xm.reshape(x0.shape), dtype=F64)).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("fn returned a non-finite value at a probe point")
        cd = (fp - fm) / (2.0 * step)
        rel = abs(cd - ad.reshape(-1)[i]) / (abs(cd) + 1e-8)
        worst = max(worst, rel)
    return worst
