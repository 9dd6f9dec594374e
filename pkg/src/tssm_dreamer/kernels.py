"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: ``np_<name>`` (vectorized numpy) and
``nb_<name>`` (``@njit`` loops). The public ``<name>`` is bound to one of
them at import time. Set ``TDV3_DISABLE_NUMBA=1`` to force the numpy path;
numba is also skipped when it cannot be imported.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = HAVE_NUMBA and os.environ.get("TDV3_DISABLE_NUMBA", "") in ("", "0")


# ---------------------------------------------------------------- layer norm


def np_layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def np_layer_norm_bwd(gy, xhat, rstd, gamma):
    d = xhat.shape[1]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    gx = (
        rstd[:, None]
        / d
        * (
            d * gxhat
            - gxhat.sum(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
        )
    )
    return gx, ggamma, gbeta


@njit(cache=True)
def nb_layer_norm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            c = x[i, j] - m
            v += c * c
        v /= d
        r = 1.0 / np.sqrt(v + eps)
        rstd[i] = r
        for j in range(d):
            xh = (x[i, j] - m) * r
            xhat[i, j] = xh
            y[i, j] = xh * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def nb_layer_norm_bwd(gy, xhat, rstd, gamma):
    n, d = gy.shape
    gx = np.empty_like(gy)
    ggamma = np.zeros(d, dtype=gy.dtype)
    gbeta = np.zeros(d, dtype=gy.dtype)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = gy[i, j] * gamma[j]
            s1 += g
            s2 += g * xhat[i, j]
            ggamma[j] += gy[i, j] * xhat[i, j]
            gbeta[j] += gy[i, j]
        for j in range(d):
            g = gy[i, j] * gamma[j]
            gx[i, j] = rstd[i] / d * (d * g - s1 - xhat[i, j] * s2)
    return gx, ggamma, gbeta


# ------------------------------------------------------------------- softmax


def np_softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_log_softmax_rows(x):
    s = x - x.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


@njit(cache=True)
def nb_softmax_rows(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            e = np.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(k):
            out[i, j] /= s
    return out


@njit(cache=True)
def nb_log_softmax_rows(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(k):
            s += np.exp(x[i, j] - m)
        ls = np.log(s)
        for j in range(k):
            out[i, j] = x[i, j] - m - ls
    return out


# ----------------------------------------------------------------- attention
# q: [N, Tq, H, D]; k, v: [N, Tk, H, D]; lo, hi: [N, Tq] int64 half-open key
# ranges. probs: [N, H, Tq, Tk], exactly zero outside [lo, hi).


def np_range_attention_fwd(q, k, v, lo, hi, scale):
    tk = k.shape[1]
    scores = np.einsum("nqhd,nkhd->nhqk", q, k) * scale
    pos = np.arange(tk)
    vis = (pos >= lo[:, :, None]) & (pos < hi[:, :, None])
    vis = vis[:, None, :, :]
    m = np.where(vis, scores, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(np.where(vis, scores - m, 0.0)) * vis
    probs = e / e.sum(axis=-1, keepdims=True)
    out = np.einsum("nhqk,nkhd->nqhd", probs, v)
    return out, probs


def np_range_attention_bwd(gout, q, k, v, probs, scale):
    gv = np.einsum("nhqk,nqhd->nkhd", probs, gout)
    gp = np.einsum("nqhd,nkhd->nhqk", gout, v)
    gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale
    gq = np.einsum("nhqk,nkhd->nqhd", gs, k)
    gk = np.einsum("nhqk,nqhd->nkhd", gs, q)
    return gq, gk, gv


@njit(cache=True)
def nb_range_attention_fwd(q, k, v, lo, hi, scale):
    n_, tq, nh, dh = q.shape
    tk = k.shape[1]
    out = np.zeros_like(q)
    probs = np.zeros((n_, nh, tq, tk), dtype=q.dtype)
    for n in range(n_):
        for t in range(tq):
            a = lo[n, t]
            b = hi[n, t]
            for h in range(nh):
                m = -np.inf
                for s in range(a, b):
                    acc = 0.0
                    for d in range(dh):
                        acc += q[n, t, h, d] * k[n, s, h, d]
                    acc *= scale
                    probs[n, h, t, s] = acc
                    if acc > m:
                        m = acc
                z = 0.0
                for s in range(a, b):
                    e = np.exp(probs[n, h, t, s] - m)
                    probs[n, h, t, s] = e
                    z += e
                for s in range(a, b):
                    p = probs[n, h, t, s] / z
                    probs[n, h, t, s] = p
                    for d in range(dh):
                        out[n, t, h, d] += p * v[n, s, h, d]
    return out, probs


@njit(cache=True)
def nb_range_attention_bwd(gout, q, k, v, probs, scale, lo, hi):
    n_, tq, nh, dh = q.shape
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    for n in range(n_):
        for t in range(tq):
            a = lo[n, t]
            b = hi[n, t]
            for h in range(nh):
                dot = 0.0
                for s in range(a, b):
                    gp = 0.0
                    for d in range(dh):
                        gp += gout[n, t, h, d] * v[n, s, h, d]
                    dot += gp * probs[n, h, t, s]
                for s in range(a, b):
                    p = probs[n, h, t, s]
                    gp = 0.0
                    for d in range(dh):
                        gp += gout[n, t, h, d] * v[n, s, h, d]
                        gv[n, s, h, d] += p * gout[n, t, h, d]
                    gs = p * (gp - dot) * scale
                    for d in range(dh):
                        gq[n, t, h, d] += gs * k[n, s, h, d]
                        gk[n, s, h, d] += gs * q[n, t, h, d]
    return gq, gk, gv


# ------------------------------------------------------------------- two-hot


def np_twohot(values, bins):
    nb = bins.shape[0]
    v = np.clip(values, bins[0], bins[-1])
    hi = np.clip(np.searchsorted(bins, v, side="left"), 1, nb - 1)
    lo = hi - 1
    w_hi = (v - bins[lo]) / (bins[hi] - bins[lo])
    out = np.zeros((v.shape[0], nb), dtype=bins.dtype)
    rows = np.arange(v.shape[0])
    out[rows, lo] = 1.0 - w_hi
    out[rows, hi] += w_hi
    return out


@njit(cache=True)
def nb_twohot(values, bins):
    nb = bins.shape[0]
    n = values.shape[0]
    out = np.zeros((n, nb), dtype=bins.dtype)
    for i in range(n):
        v = min(max(values[i], bins[0]), bins[nb - 1])
        hi = 1
        while hi < nb - 1 and bins[hi] < v:
            hi += 1
        lo = hi - 1
        w = (v - bins[lo]) / (bins[hi] - bins[lo])
        out[i, lo] = 1.0 - w
        out[i, hi] += w
    return out


# ------------------------------------------------------------ lambda returns


def np_lambda_returns(rewards, values, conts, gamma, lam):
    n, horizon = rewards.shape
    out = np.empty_like(rewards)
    nxt = values[:, horizon]
    for t in range(horizon - 1, -1, -1):
        nxt = rewards[:, t] + gamma * conts[:, t] * (
            (1.0 - lam) * values[:, t + 1] + lam * nxt
        )
        out[:, t] = nxt
    return out


@njit(cache=True)
def nb_lambda_returns(rewards, values, conts, gamma, lam):
    n, horizon = rewards.shape
    out = np.empty_like(rewards)
    for i in range(n):
        nxt = values[i, horizon]
        for t in range(horizon - 1, -1, -1):
            nxt = rewards[i, t] + gamma * conts[i, t] * (
                (1.0 - lam) * values[i, t + 1] + lam * nxt
            )
            out[i, t] = nxt
    return out


# ------------------------------------------------------ categorical sampling


def np_categorical(probs, uniforms):
    cdf = np.cumsum(probs, axis=1)
    idx = (uniforms[:, None] * cdf[:, -1:] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@njit(cache=True)
def nb_categorical(probs, uniforms):
    n, k = probs.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        total = 0.0
        for j in range(k):
            total += probs[i, j]
        u = uniforms[i] * total
        acc = 0.0
        choice = k - 1
        for j in range(k):
            acc += probs[i, j]
            if u < acc:
                choice = j
                break
        out[i] = choice
    return out


# ------------------------------------------------------------------- binding

NUMPY_KERNELS = {
    "layer_norm_fwd": np_layer_norm_fwd,
    "layer_norm_bwd": np_layer_norm_bwd,
    "softmax_rows": np_softmax_rows,
    "log_softmax_rows": np_log_softmax_rows,
    "range_attention_fwd": np_range_attention_fwd,
    "range_attention_bwd": lambda g, q, k, v, p, scale, lo, hi: np_range_attention_bwd(
        g, q, k, v, p, scale
    ),
    "twohot": np_twohot,
    "lambda_returns": np_lambda_returns,
    "categorical": np_categorical,
}

NUMBA_KERNELS = {
    "layer_norm_fwd": nb_layer_norm_fwd,
    "layer_norm_bwd": nb_layer_norm_bwd,
    "softmax_rows": nb_softmax_rows,
    "log_softmax_rows": nb_log_softmax_rows,
    "range_attention_fwd": nb_range_attention_fwd,
    "range_attention_bwd": nb_range_attention_bwd,
    "twohot": nb_twohot,
    "lambda_returns": nb_lambda_returns,
    "categorical": nb_categorical,
}

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

layer_norm_fwd = _ACTIVE["layer_norm_fwd"]
layer_norm_bwd = _ACTIVE["layer_norm_bwd"]
softmax_rows = _ACTIVE["softmax_rows"]
log_softmax_rows = _ACTIVE["log_softmax_rows"]
range_attention_fwd = _ACTIVE["range_attention_fwd"]
range_attention_bwd = _ACTIVE["range_attention_bwd"]
twohot = _ACTIVE["twohot"]
lambda_returns = _ACTIVE["lambda_returns"]
categorical = _ACTIVE["categorical"]


def backend():
    return "numba" if USE_NUMBA else "numpy"
