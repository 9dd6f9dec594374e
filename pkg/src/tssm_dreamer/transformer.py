"""Post-LN transformer encoder with a configurable causal context.

``window=0`` gives full causal attention (position t sees 1..t).
``window=k`` restricts position t to the last k tokens; ``window=1`` is the
naive single-token variant, computed without any attention arithmetic
since softmax over one key is exactly 1.
No dropout exists anywhere; positional encoding is off unless requested.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diff
from .diff import ContractError, Tensor


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    n_layers: int = 1
    window: int = 0  # 0 = full causal, k >= 1 = last-k window
    positional_encoding: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.d_model, self.n_heads, self.d_ff, self.n_layers) < 1 or self.window < 0:
            raise ValueError(f"invalid encoder config {self}")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


LAYER_SHAPES = {
    "wq": ("d", "d"), "bq": ("d",),
    "wk": ("d", "d"), "bk": ("d",),
    "wv": ("d", "d"), "bv": ("d",),
    "wo": ("d", "d"), "bo": ("d",),
    "w1": ("d", "f"), "b1": ("f",),
    "w2": ("f", "d"), "b2": ("d",),
    "ln1_g": ("d",), "ln1_b": ("d",),
    "ln2_g": ("d",), "ln2_b": ("d",),
}  # fmt: skip


def init_encoder(store, prefix, config, rng, dtype=np.float64):
    d, f = config.d_model, config.d_ff
    dims = {"d": d, "f": f}
    for i in range(config.n_layers):
        for key, shape in LAYER_SHAPES.items():
            name = f"{prefix}.layer{i}.{key}"
            shp = tuple(dims[s] for s in shape)
            if len(shp) == 2:
                value = diff.glorot(rng, *shp, dtype=dtype)
            elif key.endswith("_g"):
                value = np.ones(shp, dtype=dtype)
            else:
                value = np.zeros(shp, dtype=dtype)
            store.add(name, value)


def layer_params(store, prefix, i):
    return {k: store[f"{prefix}.layer{i}.{k}"] for k in LAYER_SHAPES}


def encoder_params(store, prefix, config):
    return [layer_params(store, prefix, i) for i in range(config.n_layers)]


# ------------------------------------------------------------------ attention


def scaled_dot_attention(Q, K, V, visibility):
    """Single-head attention; ``visibility[t]`` lists the keys query t sees.

    Contiguous visibility sets go through the range kernel; arbitrary sets
    take a per-query gather path.
    """
    T, d = Q.shape
    vis = [np.asarray(sorted(set(v)), dtype=np.int64) for v in visibility]
    if len(vis) != T or any(v.size == 0 for v in vis):
        raise ContractError("attention: every query needs a nonempty visibility set")
    if all(v[-1] - v[0] + 1 == v.size for v in vis):
        lo = np.array([[v[0] for v in vis]])
        hi = np.array([[v[-1] + 1 for v in vis]])
        out = diff.range_attention(
            Q.reshape(1, T, 1, d), K.reshape(1, -1, 1, d), V.reshape(1, -1, 1, d), lo, hi
        )
        return out.reshape(T, d)
    rows = []
    scale = 1.0 / np.sqrt(d)
    for t, idx in enumerate(vis):
        scores = (K[idx] @ Q[t].reshape(d, 1)).reshape(1, -1) * scale
        rows.append((diff.softmax(scores) @ V[idx]).reshape(d))
    return diff.stack(rows, axis=0)


def visibility_ranges(T, window):
    """Half-open key ranges [lo_t, hi_t) for each query position."""
    hi = np.arange(1, T + 1)
    lo = np.zeros(T, dtype=np.int64) if window == 0 else np.maximum(hi - window, 0)
    return lo, hi


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads)


def _multi_head(x, p, config, lo, hi):
    B, T, d = x.shape
    v = diff.linear(x, p["wv"], p["bv"])
    if config.window == 1:
        # one visible key per query: attention output is the value itself
        heads = v
    else:
        q = _split_heads(diff.linear(x, p["wq"], p["bq"]), config.n_heads)
        k = _split_heads(diff.linear(x, p["wk"], p["bk"]), config.n_heads)
        lo_b = np.broadcast_to(lo, (B, T))
        hi_b = np.broadcast_to(hi, (B, T))
        heads = diff.range_attention(q, k, _split_heads(v, config.n_heads), lo_b, hi_b)
        heads = heads.reshape(B, T, d)
    return diff.linear(heads, p["wo"], p["bo"])


def _ffn_block(y, p):
    f = diff.linear(diff.silu(diff.linear(y, p["w1"], p["b1"])), p["w2"], p["b2"])
    return diff.layer_norm(y + f, p["ln2_g"], p["ln2_b"])


def encoder_layer_forward(x, params, config, lo=None, hi=None):
    """y = LN(x + MHA(x)); out = LN(y + FFN(y)). ``x`` is [T, d] or [B, T, d]."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if lo is None:
        lo, hi = visibility_ranges(x.shape[1], config.window)
    y = diff.layer_norm(x + _multi_head(x, params, config, lo, hi), params["ln1_g"], params["ln1_b"])
    out = _ffn_block(y, params)
    return out.reshape(out.shape[1:]) if squeeze else out


def sinusoidal(positions, d_model, dtype=np.float64):
    positions = np.asarray(positions, dtype=np.float64)
    i = np.arange(d_model // 2)
    freq = 1.0 / (10000.0 ** (2 * i / d_model))
    ang = positions[..., None] * freq
    pe = np.zeros(positions.shape + (d_model,))
    pe[..., 0::2] = np.sin(ang)
    pe[..., 1::2] = np.cos(ang)[..., : d_model - d_model // 2]
    return pe.astype(dtype)


def encoder_forward(tokens, config, params, return_kv=False):
    """Run the layer stack over ``tokens`` ([T, d] or [B, T, d]).

    With ``return_kv`` also returns each layer's per-token keys and values as
    arrays of shape [B, T, H, dh], the material an incremental cache holds.
    """
    if len(params) != config.n_layers:
        raise ContractError(f"expected {config.n_layers} layer params, got {len(params)}")
    squeeze = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if squeeze else tokens
    B, T, _ = x.shape
    if T == 0:
        raise ContractError("encoder_forward needs at least one token")
    if config.positional_encoding:
        x = x + sinusoidal(np.arange(T), config.d_model, x.dtype)
    lo, hi = visibility_ranges(T, config.window)
    kvs = []
    for p in params:
        if return_kv:
            kvs.append(_layer_kv(x.data, p, config))
        x = encoder_layer_forward(x, p, config, lo, hi)
    out = x.reshape(x.shape[1:]) if squeeze else x
    return (out, kvs) if return_kv else out


def _layer_kv(x, p, config):
    k = x @ p["wk"].data + p["bk"].data
    v = x @ p["wv"].data + p["bv"].data
    B, T, _ = x.shape
    return k.reshape(B, T, config.n_heads, -1), v.reshape(B, T, config.n_heads, -1)


# --------------------------------------------------------------- KV caching


class _Buffer:
    """Growable key/value storage shared by successive caches of one rollout.

    A cache owning the newest filled column may append in place; any other
    append (a branch from an older cache) copies first, so caches handed
    out earlier never change.
    """

    __slots__ = ("k", "v", "filled")

    def __init__(self, k, v, filled):
        self.k, self.v, self.filled = k, v, filled

    @classmethod
    def wrap(cls, k, v, extra=16):
        B, S = k.shape[:2]
        kb = np.empty((B, S + extra) + k.shape[2:], dtype=k.dtype)
        vb = np.empty_like(kb)
        kb[:, :S] = k
        vb[:, :S] = v
        return cls(kb, vb, S)

    def append(self, size, k_new, v_new):
        buf = self
        if buf.filled != size or size >= buf.k.shape[1]:
            buf = _Buffer.wrap(self.k[:, :size], self.v[:, :size], extra=max(16, size))
        buf.k[:, size] = k_new[:, 0]
        buf.v[:, size] = v_new[:, 0]
        buf.filled = size + 1
        return buf, buf.k[:, : size + 1], buf.v[:, : size + 1]


@dataclass
class KVCache:
    """Per-layer key/value rows for a batch of independent sequences.

    Rows are left-padded: sequence ``b`` occupies columns ``[lo[b], S)`` of
    every layer array, ``count[b]`` is its total token count so far.
    """

    keys: list
    values: list
    lo: np.ndarray
    count: np.ndarray
    window: int = 0
    buffers: list = field(default=None, repr=False, compare=False)

    @property
    def size(self):
        return self.keys[0].shape[1] if self.keys else 0

    @property
    def batch(self):
        return self.lo.shape[0]

    def take(self, rows):
        rows = np.asarray(rows)
        return KVCache(
            [k[rows] for k in self.keys],
            [v[rows] for v in self.values],
            self.lo[rows],
            self.count[rows],
            self.window,
        )

    def _extend(self, layer, k_new, v_new, drop):
        """Key/value arrays with the new column appended and ``drop`` oldest removed."""
        kc, vc = self.keys[layer], self.values[layer]
        if self.window:
            ks = np.concatenate([kc, k_new], axis=1)[:, drop:]
            vs = np.concatenate([vc, v_new], axis=1)[:, drop:]
            return None, ks, vs
        buf = self.buffers[layer] if self.buffers else None
        if buf is None:
            buf = _Buffer(kc, vc, -1)
        return buf.append(kc.shape[1], k_new, v_new)


def empty_cache(config, batch, dtype=np.float64):
    shape = (batch, 0, config.n_heads, config.head_dim)
    return KVCache(
        [np.zeros(shape, dtype=dtype) for _ in range(config.n_layers)],
        [np.zeros(shape, dtype=dtype) for _ in range(config.n_layers)],
        np.zeros(batch, dtype=np.int64),
        np.zeros(batch, dtype=np.int64),
        config.window,
    )


def cache_from_kv(kvs, lengths, config):
    """Build a cache holding the first ``lengths[b]`` tokens of row ``b``.

    ``kvs`` are per-layer (k, v) arrays [B, T, H, dh] from a parallel pass.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    B = lengths.shape[0]
    S = int(lengths.max()) if B else 0
    if config.window:
        S = min(S, config.window)
    keys, values = [], []
    for k, v in kvs:
        kc = np.zeros((B, S) + k.shape[2:], dtype=k.dtype)
        vc = np.zeros_like(kc)
        for b in range(B):
            n = min(int(lengths[b]), S)
            if n:
                end = int(lengths[b])
                kc[b, S - n :] = k[b, end - n : end]
                vc[b, S - n :] = v[b, end - n : end]
        keys.append(kc)
        values.append(vc)
    lo = S - np.minimum(lengths, S)
    return KVCache(keys, values, lo, lengths.copy(), config.window)


def encoder_step_cached(cache, new_token, config, params):
    """Consume one token per row; returns (output [B, d], updated cache).

    ``new_token`` is [d] or [B, d]. The cache passed in is not modified.
    """
    if len(cache.keys) != config.n_layers or len(params) != config.n_layers:
        raise ContractError(
            f"cache has {len(cache.keys)} layers, config {config.n_layers}, params {len(params)}"
        )
    squeeze = new_token.ndim == 1
    x = new_token.reshape(1, -1) if squeeze else new_token
    B = x.shape[0]
    if config.positional_encoding:
        x = x + sinusoidal(cache.count, config.d_model, x.dtype)
    x = x.reshape(B, 1, config.d_model)
    S = cache.size + 1
    keep = S if not config.window else min(S, config.window)
    drop = S - keep
    lo = np.maximum(cache.lo - drop, 0)
    hi = np.full((B, 1), keep, dtype=np.int64)
    tracking = diff.grad_enabled()
    new_keys, new_values, buffers = [], [], []
    for layer, p in enumerate(params):
        k_new, v_new = _layer_kv(x.data, p, config)
        buf, ks, vs = cache._extend(layer, k_new, v_new, drop)
        new_keys.append(ks)
        new_values.append(vs)
        buffers.append(buf)
        v_t = diff.linear(x, p["wv"], p["bv"])
        if config.window == 1:
            heads = v_t
        else:
            q = _split_heads(diff.linear(x, p["wq"], p["bq"]), config.n_heads)
            if tracking:
                # the newest key/value rows are recomputed as tensors so
                # gradients reach this token; older rows are cache constants
                k_t = _split_heads(diff.linear(x, p["wk"], p["bk"]), config.n_heads)
                kk = diff.concat([Tensor(ks[:, :-1]), k_t], axis=1)
                vv = diff.concat([Tensor(vs[:, :-1]), _split_heads(v_t, config.n_heads)], axis=1)
            else:
                kk, vv = Tensor(ks), Tensor(vs)
            heads = diff.range_attention(q, kk, vv, lo.reshape(B, 1), hi)
            heads = heads.reshape(B, 1, config.d_model)
        attn = diff.linear(heads, p["wo"], p["bo"])
        y = diff.layer_norm(x + attn, p["ln1_g"], p["ln1_b"])
        x = _ffn_block(y, p)
    out = x.reshape(B, config.d_model)
    new_cache = KVCache(new_keys, new_values, lo, cache.count + 1, config.window, buffers)
    return (out.reshape(config.d_model) if squeeze else out), new_cache
