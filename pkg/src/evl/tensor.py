"""Dense float arrays with reverse-mode automatic differentiation.

Tensors wrap a read-only numpy array. Every op records a closure mapping the
output gradient to input gradients; `backward` walks the graph in reverse
topological order and returns a `GradientRecord` holding gradients for the
trainable `Parameter` leaves only. Nodes that do not depend on a trainable
parameter are never put on the tape, so frozen weights and backbone
activations cost nothing during the backward pass.

Storage is float32 by default. Reductions (matmul, einsum, sums, softmax,
layer norm) accumulate in float64 and cast back. `precision(np.float64)`
switches newly created tensors to double precision; `grad_check` uses it.
"""

import contextlib
import math

import numpy as np

from .errors import ContractError, NumericalError, ParameterError, RangeError, ShapeError

_state = {"dtype": np.dtype(np.float32), "grad": True, "debug": False}

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


@contextlib.contextmanager
def debug_checks(enabled=True):
    """Check every op output for NaN/Inf while active."""
    old = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = old


def default_dtype():
    return _state["dtype"]


def make_rng(seed):
    """Seeded generator used for all initialization, sampling and dropout."""
    return np.random.default_rng(seed)


def _freeze(arr):
    arr.flags.writeable = False
    return arr


def _as_array(data, dtype=None):
    dtype = default_dtype() if dtype is None else dtype
    arr = np.array(data, dtype=dtype, copy=True)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dimension sizes must be >= 1, got {arr.shape}")
    return _freeze(arr)


class Tensor:
    """Immutable n-dimensional array node in the autodiff graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op or 'leaf'})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
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
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not supported; use mul with a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """Named leaf tensor. Frozen parameters never enter the tape."""

    def __init__(self, data, name, trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = bool(trainable)

    @property
    def value(self):
        return self

    def assign(self, data):
        """Replace the stored values (optimizer updates, checkpoint loads)."""
        if not self.trainable:
            raise ContractError(f"refusing to overwrite frozen parameter {self.name!r}")
        self._set(data)

    def _set(self, data):
        arr = np.asarray(data)
        if arr.shape != self.shape:
            raise ShapeError(f"{self.name}: expected shape {self.shape}, got {arr.shape}")
        self.data = _as_array(arr, dtype=arr.dtype if arr.dtype.kind == "f" else None)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class GradientRecord(dict):
    """Parameter name -> gradient array produced by one backward pass."""


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    if not data.flags.c_contiguous or not data.flags.owndata and data.base is not None:
        data = data.copy()
    out.data = _freeze(data)
    if _state["debug"] and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite values produced by op {op!r}")
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    out.op = op
    return out


def _check_broadcast(a, b, op):
    """Equal shapes, scalar operands, or leading-batch broadcast only."""
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0 and isinstance(a, Tensor):
        s = float(b)

        def backward_scalar(g):
            return (g * s,)

        return _make(a.data * a.data.dtype.type(s), (a,), backward_scalar, "scale")
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def log(x):
    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), backward, "log")


def gelu(x):
    """GELU, tanh approximation."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + _GELU_C * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return _make(out, (x,), backward, "gelu")


def dropout(x, rate, rng=None, train=True):
    """Inverted dropout; identity at eval time or when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """(..., m, k) @ (k, n) or (..., k, n) with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    dt = _result_dtype(a.data, b.data)
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = np.matmul(a64, b64).astype(dt)

    def backward(g):
        g64 = g.astype(np.float64)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g64, np.swapaxes(b64, -1, -2)).astype(a.dtype)
        if b.requires_grad:
            if b.ndim == 2:
                gb = np.matmul(a64.reshape(-1, a.shape[-1]).T, g64.reshape(-1, g.shape[-1]))
            else:
                gb = np.matmul(np.swapaxes(a64, -1, -2), g64)
            gb = gb.astype(b.dtype)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def einsum(subscripts, a, b):
    """Two-operand einsum without repeated or operand-private indices."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ShapeError(f"einsum: repeated index in {s!r}")
        if any(c not in out_sub and c not in other for c in s):
            raise ShapeError(f"einsum: index of {s!r} summed within a single operand")
    dt = _result_dtype(a.data, b.data)
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    try:
        out = np.einsum(subscripts, a64, b64, optimize=True).astype(dt)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts}: {exc} (shapes {a.shape}, {b.shape})") from None

    def backward(g):
        g64 = g.astype(np.float64)
        ga = gb = None
        if a.requires_grad:
            ga = np.einsum(f"{out_sub},{sb}->{sa}", g64, b64, optimize=True).astype(a.dtype)
        if b.requires_grad:
            gb = np.einsum(f"{out_sub},{sa}->{sb}", g64, a64, optimize=True).astype(b.dtype)
        return ga, gb

    return _make(out, (a, b), backward, "einsum")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise RangeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = x.data.astype(np.float64).sum(axis=axes, keepdims=keepdims).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def softmax(x, axis=-1):
    """Max-subtracted softmax with float64 normalisation."""
    (ax,) = _norm_axis(axis, x.ndim)
    x64 = x.data.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=ax, keepdims=True))
    s64 = e / e.sum(axis=ax, keepdims=True)
    out = s64.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((s64 * (g64 - (g64 * s64).sum(axis=ax, keepdims=True))).astype(x.dtype),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    (ax,) = _norm_axis(axis, x.ndim)
    x64 = x.data.astype(np.float64)
    m = x64.max(axis=ax, keepdims=True)
    lse = m + np.log(np.exp(x64 - m).sum(axis=ax, keepdims=True))
    out64 = x64 - lse

    def backward(g):
        g64 = g.astype(np.float64)
        return ((g64 - np.exp(out64) * g64.sum(axis=ax, keepdims=True)).astype(x.dtype),)

    return _make(out64.astype(x.dtype), (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply gain and bias."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    gain, bias = as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last dim {c}")
    dt = _result_dtype(x.data, gain.data, bias.data)
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    g64 = gain.data.astype(np.float64)
    out = (xhat * g64 + bias.data.astype(np.float64)).astype(dt)

    def backward(g):
        gy = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        gx = ggain = gbias = None
        if x.requires_grad:
            gxhat = gy * g64
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(x.dtype)
        if gain.requires_grad:
            ggain = (gy * xhat).sum(axis=lead).astype(gain.dtype)
        if bias.requires_grad:
            gbias = gy.sum(axis=lead).astype(bias.dtype)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood; logits (K,) or (B, K)."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    single = logits.ndim == 1
    z = logits.reshape(1, -1) if single else logits
    if z.ndim != 2 or z.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = z.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise RangeError(f"label out of range [0, {k}): {labels.tolist()}")
    lp = log_softmax(z, axis=-1)
    onehot = np.zeros(z.shape, dtype=z.dtype)
    onehot[np.arange(len(labels)), labels] = -1.0 / len(labels)
    return sum_(mul(lp, Tensor(onehot, dtype=z.dtype)))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    if any(d < 1 for d in out.shape):
        raise ShapeError(f"reshape produced empty dimension {out.shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def permute(x, axes):
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise RangeError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = np.argsort([a % x.ndim for a in axes])

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), backward, "permute")


def expand(x, shape):
    """Explicit broadcast of size-1 (or missing leading) dimensions."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot expand {x.shape} to {shape}") from None

    def backward(g):
        lead = g.ndim - x.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, d in enumerate(x.shape) if d == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.array(out), (x,), backward, "expand")


def getitem(x, index):
    out = x.data[index]
    if out.ndim and any(d < 1 for d in out.shape):
        raise ShapeError(f"indexing {x.shape} with {index!r} gives empty result")

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), backward, "getitem")


def take(x, indices, axis=0):
    """Gather along `axis` with an integer index array."""
    indices = np.asarray(indices, dtype=np.int64)
    (ax,) = _norm_axis(axis, x.ndim)
    n = x.shape[ax]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise RangeError(f"take: index out of range for axis of size {n}")
    out = np.take(x.data, indices, axis=ax)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _make(out, (x,), backward, "take")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    (ax,) = _norm_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: inconsistent shapes {sorted(shapes)}")
    (ax,) = _norm_axis(axis, tensors[0].ndim + 1)
    out = np.stack([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


def shift(x, offset, axis):
    """out[i] = x[i - offset] along `axis`, zero-filled outside the range."""
    (ax,) = _norm_axis(axis, x.ndim)
    n = x.shape[ax]

    def _shift(arr, k):
        res = np.zeros_like(arr)
        if abs(k) >= n:
            return res
        src = [slice(None)] * arr.ndim
        dst = [slice(None)] * arr.ndim
        if k >= 0:
            src[ax], dst[ax] = slice(0, n - k), slice(k, n)
        else:
            src[ax], dst[ax] = slice(-k, n), slice(0, n + k)
        res[tuple(dst)] = arr[tuple(src)]
        return res

    def backward(g):
        return (_shift(g, -offset),)

    return _make(_shift(x.data, offset), (x,), backward, "shift")


# ---------------------------------------------------------------- autodiff

def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Gradients of a scalar loss for every reachable trainable Parameter."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    record = GradientRecord()
    if not loss.requires_grad:
        return record
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if node.trainable:
                prev = record.get(node.name)
                record[node.name] = g if prev is None else prev + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return record


def grad_check(f, params, h=1e-3, samples=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `f` takes no arguments and returns a scalar Tensor built from `params`.
    With `samples` set, that many random coordinates are checked per
    parameter instead of every one. Evaluation runs in float64.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ParameterError(f"finite-difference step must lie in [1e-5, 1e-2], got {h}")
    rng = make_rng(0) if rng is None else rng
    params = [p for p in params if p.trainable]
    originals = [p.data for p in params]
    worst = 0.0
    try:
        with precision(np.float64):
            for p in params:
                p._set(p.data.astype(np.float64))
            loss = f()
            record = backward(loss)
            base = loss.item()
            if f().item() != base:
                raise ContractError("grad_check: f is not deterministic (active dropout?)")
            for p in params:
                analytic = record.get(p.name, np.zeros(p.shape)).reshape(-1)
                flat = p.data.reshape(-1).copy()
                coords = np.arange(flat.size)
                if samples is not None and samples < flat.size:
                    coords = rng.choice(flat.size, size=samples, replace=False)
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + h
                    p._set(flat.reshape(p.shape))
                    fp = f().item()
                    flat[i] = orig - h
                    p._set(flat.reshape(p.shape))
                    fm = f().item()
                    flat[i] = orig
                    p._set(flat.reshape(p.shape))
                    central = (fp - fm) / (2.0 * h)
                    a = float(analytic[i])
                    err = abs(a - central) / (abs(a) + abs(central) + 1e-8)
                    worst = max(worst, err)
    finally:
        for p, orig in zip(params, originals):
            p._set(orig)
    return worst
