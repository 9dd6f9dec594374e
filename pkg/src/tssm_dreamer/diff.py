"""Dense tensors with reverse-mode differentiation, a parameter store, Adam.

The graph is recorded eagerly: every op returns a ``Tensor`` holding its
parents and a closure mapping the output gradient to parent gradients.
``no_grad()`` switches recording off for pure inference (imagination,
acting in the environment).
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_GRAD_ENABLED = [True]
# stop_gradient values recorded/replayed by frozen_stop_gradients()
_SG_TAPE = [None]


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


def grad_enabled():
    return _GRAD_ENABLED[0]


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

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
        return float(self.data)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(_lift(o, self)))

    def __rsub__(self, o):
        return add(_lift(o, self), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise ops


def add(a, b):
    a, b = _lift(a), _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _lift(a), _lift(b, a)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
    )


def reciprocal(a):
    r = 1.0 / a.data
    return _make(r, (a,), lambda g: (-g * r * r,))


def square(a):
    d = a.data
    return _make(d * d, (a,), lambda g: (2.0 * g * d,))


def exp(a):
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a):
    d = a.data
    return _make(np.log(d), (a,), lambda g: (g / d,))


def tanh(a):
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a):
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient is zero where the floor is active."""
    d = a.data
    keep = d >= floor
    return _make(np.where(keep, d, floor), (a,), lambda g: (g * keep,))


def stop_gradient(a):
    tape = _SG_TAPE[0]
    if tape is not None:
        if tape["mode"] == "record":
            tape["values"].append(a.data.copy())
        else:
            i = tape["cursor"]
            tape["cursor"] = i + 1
            return Tensor(tape["values"][i])
    return Tensor(a.data)


@contextlib.contextmanager
def frozen_stop_gradients(values=None):
    """Record stop_gradient outputs, or replay previously recorded ones.

    Finite differences of a loss with stop-gradients only agree with the
    reverse-mode gradient when the stopped values are held constant while
    parameters are perturbed. Call once without ``values`` to record, then
    with the recorded list for each perturbed evaluation.
    """
    prev = _SG_TAPE[0]
    if values is None:
        tape = {"mode": "record", "values": []}
    else:
        tape = {"mode": "replay", "values": values, "cursor": 0}
    _SG_TAPE[0] = tape
    try:
        yield tape["values"]
    finally:
        _SG_TAPE[0] = prev


# ------------------------------------------------------------- shape ops


def matmul(a, b):
    a, b = _lift(a), _lift(b, a)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    flat = bd.ndim == 2 and ad.ndim > 2

    def back(g):
        if bd.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(sa) if ad.ndim > 1 else g @ bd.T
            gb = ad.reshape(-1, sa[-1]).T @ g2
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    out = (ad.reshape(-1, sa[-1]) @ bd).reshape(sa[:-1] + sb[-1:]) if flat else ad @ bd
    return _make(out, (a, b), back)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def getitem(a, idx):
    shape = a.shape
    dtype = a.dtype

    basic = all(
        isinstance(i, (slice, int, type(None), type(Ellipsis)))
        for i in (idx if isinstance(idx, tuple) else (idx,))
    )

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


# ------------------------------------------------------------- fused ops


def linear(x, W, b=None):
    """x @ W + b over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        bshape = None if b is None else b.shape
        raise DimensionError(
            f"linear: x{tuple(x.shape)} incompatible with W{tuple(W.shape)}, b{bshape}"
        )
    out = matmul(x, W)
    return out if b is None else add(out, b)


def softmax(a):
    shape = a.shape
    p = kernels.softmax_rows(np.ascontiguousarray(a.data.reshape(-1, shape[-1]))).reshape(shape)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), back)


def log_softmax(a):
    shape = a.shape
    ls = kernels.log_softmax_rows(np.ascontiguousarray(a.data.reshape(-1, shape[-1]))).reshape(
        shape
    )

    def back(g):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _make(ls, (a,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise normalization over the last axis, biased variance."""
    shape = x.shape
    d = shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def back(g):
        gx, gg, gb = kernels.layer_norm_bwd(
            np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data
        )
        return gx.reshape(shape), gg, gb

    return _make(y.reshape(shape), (x, gamma, beta), back)


def range_attention(q, k, v, lo, hi):
    """Softmax attention where query ``t`` of row ``n`` sees keys [lo, hi).

    q: [N, Tq, H, D]; k, v: [N, Tk, H, D]; lo, hi: int arrays [N, Tq].
    """
    if np.any(hi <= lo):
        raise ContractError("attention: every query needs a nonempty visibility range")
    scale = 1.0 / np.sqrt(q.shape[-1])
    lo = np.ascontiguousarray(lo, dtype=np.int64)
    hi = np.ascontiguousarray(hi, dtype=np.int64)
    qd = np.ascontiguousarray(q.data)
    # cache views may be strided along the batch axis; the kernels accept that
    kd = k.data
    vd = v.data
    out, probs = kernels.range_attention_fwd(qd, kd, vd, lo, hi, scale)

    def back(g):
        return kernels.range_attention_bwd(
            np.ascontiguousarray(g), qd, kd, vd, probs, scale, lo, hi
        )

    return _make(out, (q, k, v), back)


# ------------------------------------------------------------ backward pass


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad_of(loss, wrt):
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    keep = {id(t) for t in wrt}
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        if node._backward is None:
            continue
        g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return [grads.get(id(t)) for t in wrt]


# ---------------------------------------------------------- parameter store


@dataclass
class GradResult:
    loss_value: float
    grads: dict


@dataclass
class ParameterStore:
    entries: dict = field(default_factory=dict)
    frozen_paths: set = field(default_factory=set)
    # Adam state: name -> (m, v, step)
    moments: dict = field(default_factory=dict)

    def add(self, name, value):
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.entries[name] = t
        return t

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def names(self, prefix=""):
        return [n for n in self.entries if _under(n, prefix)]

    def is_frozen(self, name):
        return any(_under(name, p) for p in self.frozen_paths)

    def freeze(self, prefix):
        if not self.names(prefix):
            raise KeyError(f"freeze path {prefix!r} matches no parameter")
        self.frozen_paths.add(prefix)

    def unfreeze(self, prefix):
        self.frozen_paths.discard(prefix)

    @contextlib.contextmanager
    def frozen(self, *prefixes):
        added = [p for p in prefixes if p not in self.frozen_paths]
        for p in added:
            self.freeze(p)
        try:
            yield self
        finally:
            for p in added:
                self.unfreeze(p)

    def snapshot(self, prefix=""):
        return {n: self.entries[n].data.copy() for n in self.names(prefix)}

    def byte_hash(self, prefix=""):
        import hashlib

        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.entries[n].data).tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        out = ParameterStore()
        for n, t in self.entries.items():
            out.add(n, t.data.astype(dtype))
        out.frozen_paths = set(self.frozen_paths)
        return out


def _under(name, prefix):
    return prefix == "" or name == prefix or name.startswith(prefix + ".")


def backward(loss, params, prefix=""):
    """Reverse-mode gradients of ``loss`` for every non-frozen parameter.

    Parameters the loss does not reach are omitted, as are frozen ones.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    names = [n for n in params.names(prefix) if not params.is_frozen(n)]
    gs = grad_of(loss, [params[n] for n in names])
    grads = {n: g for n, g in zip(names, gs) if g is not None}
    return GradResult(float(loss.data), grads)


def clip_by_global_norm(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {n: g * scale for n, g in grads.items()}
    return grads, total


def sgd_adam_step(params, grads, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Adam update of every non-frozen entry present in ``grads``; in place."""
    if isinstance(grads, GradResult):
        grads = grads.grads
    b1, b2 = betas
    for name, g in grads.items():
        if params.is_frozen(name):
            continue
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name!r} has shape {g.shape}, parameter {p.shape}")
        m, v, step = params.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
        step += 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**step)
        vhat = v / (1.0 - b2**step)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        params.moments[name] = (m, v, step)
    return params


def glorot(rng, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def numeric_grad(fn, arr, step=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr`` in place."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return out


def relative_error(analytic, numeric, floor=1e-4):
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
