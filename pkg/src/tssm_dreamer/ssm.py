"""World model: encoder, discrete latents, RSSM/TSSM backbones, heads, loss.

The posterior reads only the current observation, never the deterministic
state, so latents for a whole segment are computed in one batched pass and
the transformer backbone can then process them in parallel.

Shapes use a leading batch axis ``B`` and a time axis ``T``. A latent is
``L`` categorical groups of ``C`` classes, flattened to ``L*C`` when fed to
the backbone or the heads.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diff, kernels
from . import transformer as tr
from .diff import ContractError, Tensor


@dataclass
class WorldModelConfig:
    backbone: str = "tssm"  # "rssm" or "tssm"
    transformer: tr.EncoderConfig = field(default_factory=tr.EncoderConfig)
    latent_groups: int = 8
    latent_classes: int = 8
    d_obs: int = 6
    d_model: int = 64
    d_embed: int = 64
    hidden: int = 64
    n_actions: int = 4
    unimix: float = 0.01
    free_bits: float = 1.0
    kl_dyn: float = 0.5
    kl_rep: float = 0.1
    reward_bins: int = 41
    bin_limit: float = 20.0
    lr: float = 1e-3

    def validate(self):
        if self.backbone not in ("rssm", "tssm"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.latent_groups * self.latent_classes <= 0:
            raise ValueError("latent size must be positive")
        if self.backbone == "tssm" and self.transformer.d_model != self.d_model:
            raise ValueError(
                f"transformer.d_model={self.transformer.d_model} != d_model={self.d_model}"
            )
        if not 0.0 <= self.unimix < 1.0:
            raise ValueError(f"unimix must lie in [0, 1), got {self.unimix}")
        if self.reward_bins < 3 or self.reward_bins % 2 == 0:
            raise ValueError(f"reward_bins must be odd and >= 3, got {self.reward_bins}")
        return self

    @property
    def latent_size(self):
        return self.latent_groups * self.latent_classes

    @property
    def feat_size(self):
        return self.d_model + self.latent_size


# --------------------------------------------------------------- squashing


def symlog(v):
    return np.sign(v) * np.log1p(np.abs(v))


def symexp(v):
    return np.sign(v) * np.expm1(np.abs(v))


def make_bins(n, limit):
    """``n`` bin centers evenly spaced in symlog space over [-symlog(limit), symlog(limit)]."""
    edge = symlog(float(limit))
    bins = np.linspace(-edge, edge, n)
    bins[n // 2] = 0.0
    return bins


def twohot_encode(v, bins):
    """Weights over ``bins`` whose weighted mean is ``v`` clipped to the bin range."""
    v = np.asarray(v, dtype=np.float64)
    bins = np.asarray(bins, dtype=np.float64)
    w = kernels.twohot(np.ascontiguousarray(v.reshape(-1)), bins)
    return w.reshape(v.shape + (bins.shape[0],))


def twohot_decode(weights, bins):
    return np.asarray(weights) @ np.asarray(bins)


# ---------------------------------------------------------- categoricals


def unimix_logits(logits, unimix):
    """log((1 - unimix) * softmax(logits) + unimix / C) along the last axis."""
    if unimix == 0.0:
        return diff.log_softmax(logits)
    C = logits.shape[-1]
    return diff.log(diff.softmax(logits) * (1.0 - unimix) + unimix / C)


def kl_categorical(p_logits, q_logits):
    """Sum over groups of KL(Cat(p) || Cat(q)); reduces the last two axes."""
    p_logits = p_logits if isinstance(p_logits, Tensor) else Tensor(p_logits)
    q_logits = q_logits if isinstance(q_logits, Tensor) else Tensor(q_logits)
    lp = diff.log_softmax(p_logits)
    lq = diff.log_softmax(q_logits)
    return (diff.exp(lp) * (lp - lq)).sum(axis=-1).sum(axis=-1)


def sample_categorical_st(logits, unimix, rng, sample=True):
    """Straight-through one-hot sample per group.

    Forward value is the one-hot sample, gradient is that of the mixed
    probabilities. ``sample=False`` returns the probabilities themselves.
    """
    probs = diff.exp(unimix_logits(logits, unimix))
    if not sample:
        return probs
    C = probs.shape[-1]
    flat = np.ascontiguousarray(probs.data.reshape(-1, C))
    idx = kernels.categorical(flat, rng.random(flat.shape[0]))
    onehot = np.zeros_like(flat)
    onehot[np.arange(flat.shape[0]), idx] = 1.0
    return probs + diff.stop_gradient(Tensor(onehot.reshape(probs.shape)) - probs)


# ------------------------------------------------------------------ layers


def _dense(store, name, fan_in, fan_out, rng, dtype, zero=False):
    w = np.zeros((fan_in, fan_out), dtype=dtype) if zero else diff.glorot(rng, fan_in, fan_out, dtype)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))


def _apply(store, name, x):
    return diff.linear(x, store[f"{name}.w"], store[f"{name}.b"])


def init_mlp(store, name, sizes, rng, dtype, zero_out=False):
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        _dense(store, f"{name}.l{i}", a, b, rng, dtype, zero=zero_out and last)


def mlp(store, name, x, n_layers):
    """Dense layers with SiLU between them, linear output."""
    for i in range(n_layers):
        x = _apply(store, f"{name}.l{i}", x)
        if i < n_layers - 1:
            x = diff.silu(x)
    return x


# --------------------------------------------------------------- backbones


class RSSM:
    """GRU deterministic-state model; sequential by construction."""

    def __init__(self, config, store, prefix):
        self.config = config
        self.store = store
        self.prefix = prefix

    @staticmethod
    def init_params(config, store, prefix, rng, dtype):
        n_in = config.latent_size + config.n_actions + config.d_model
        for gate in ("u", "r", "c"):
            store.add(f"{prefix}.w{gate}", diff.glorot(rng, n_in, config.d_model, dtype))
            store.add(f"{prefix}.b{gate}", np.zeros(config.d_model, dtype=dtype))

    def initial(self, batch, dtype):
        h = Tensor(np.zeros((batch, self.config.d_model), dtype=dtype))
        return h, h

    def step(self, carry, z, a):
        h = rssm_step(carry, z, a, self.store, self.prefix)
        return h, h

    def forward_parallel(self, z_seq, a_seq):
        B, T = z_seq.shape[:2]
        h, _ = self.initial(B, z_seq.dtype)
        hs = [h]
        for t in range(T - 1):
            h = rssm_step(h, z_seq[:, t], a_seq[:, t], self.store, self.prefix)
            hs.append(h)
        return diff.stack(hs, axis=1)

    def start_carries(self, h_seq, aux):
        return Tensor(h_seq.data.reshape(-1, self.config.d_model))

    def take(self, carry, rows):
        return Tensor(carry.data[rows])


def rssm_step(h_prev, z_prev, a_prev, store, prefix):
    """u = σ(Wu[in,h]); r = σ(Wr[in,h]); c = tanh(Wc[in, r⊙h]); h' = u⊙h + (1-u)⊙c."""
    inp = diff.concat([z_prev, _lift_like(a_prev, z_prev)], axis=-1)
    x = diff.concat([inp, h_prev], axis=-1)
    u = diff.sigmoid(diff.linear(x, store[f"{prefix}.wu"], store[f"{prefix}.bu"]))
    r = diff.sigmoid(diff.linear(x, store[f"{prefix}.wr"], store[f"{prefix}.br"]))
    c = diff.tanh(
        diff.linear(diff.concat([inp, r * h_prev], axis=-1), store[f"{prefix}.wc"], store[f"{prefix}.bc"])
    )
    return u * h_prev + (1.0 - u) * c


def _lift_like(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


class TSSM:
    """Transformer deterministic-state model.

    h_1 is a learned vector; h_t for t > 1 is the encoder output at the
    token built from (z_{t-1}, a_{t-1}), which attends to earlier tokens
    according to the encoder's context window.
    """

    def __init__(self, config, store, prefix):
        self.config = config
        self.enc = config.transformer
        self.store = store
        self.prefix = prefix

    @staticmethod
    def init_params(config, store, prefix, rng, dtype):
        _dense(store, f"{prefix}.embed", config.latent_size + config.n_actions, config.d_model, rng, dtype)
        store.add(f"{prefix}.h_init", np.zeros(config.d_model, dtype=dtype))
        tr.init_encoder(store, f"{prefix}.enc", config.transformer, rng, dtype)

    @property
    def layers(self):
        return tr.encoder_params(self.store, f"{self.prefix}.enc", self.enc)

    def _token(self, z, a):
        return _apply(self.store, f"{self.prefix}.embed", diff.concat([z, _lift_like(a, z)], axis=-1))

    def _h_init(self, batch, dtype):
        return Tensor(np.zeros((batch, self.config.d_model), dtype=dtype)) + self.store[
            f"{self.prefix}.h_init"
        ]

    def initial(self, batch, dtype):
        return self._h_init(batch, dtype), tr.empty_cache(self.enc, batch, dtype)

    def step(self, carry, z, a):
        return tr.encoder_step_cached(carry, self._token(z, a), self.enc, self.layers)

    def forward_parallel(self, z_seq, a_seq, return_kv=False):
        if z_seq.shape[:2] != np.shape(a_seq)[:2]:
            raise ContractError(f"z_seq {z_seq.shape[:2]} and a_seq {np.shape(a_seq)[:2]} differ")
        B, T = z_seq.shape[:2]
        first = self._h_init(B, z_seq.dtype).reshape(B, 1, self.config.d_model)
        if T == 1:
            return (first, []) if return_kv else first
        a = _lift_like(a_seq, z_seq)
        tokens = self._token(z_seq[:, : T - 1], a[:, : T - 1])
        out, kvs = tr.encoder_forward(tokens, self.enc, self.layers, return_kv=True)
        h = diff.concat([first, out], axis=1)
        return (h, kvs) if return_kv else h

    def start_carries(self, h_seq, kvs):
        """Caches for starting a rollout at every (b, t): tokens 1..t-1 of row b."""
        B, T = h_seq.shape[:2]
        lengths = np.tile(np.arange(T), B)
        rep = [(np.repeat(k, T, axis=0), np.repeat(v, T, axis=0)) for k, v in kvs]
        if not rep:
            return tr.empty_cache(self.enc, B * T, h_seq.dtype)
        return tr.cache_from_kv(rep, lengths, self.enc)

    def take(self, carry, rows):
        return carry.take(rows)


# -------------------------------------------------------------- world model


@dataclass
class SegmentBatch:
    obs: np.ndarray  # [B, T, d_obs]
    actions: np.ndarray  # [B, T, A] one-hot, action taken at each observation
    rewards: np.ndarray  # [B, T] reward received on arriving at each observation
    continues: np.ndarray  # [B, T]


@dataclass
class LossBreakdown:
    recon: Tensor
    reward: Tensor
    cont: Tensor
    kl_dyn: Tensor
    kl_rep: Tensor
    total: Tensor

    FIELDS = ("recon", "reward", "cont", "kl_dyn", "kl_rep", "total")

    def values(self):
        return {k: float(getattr(self, k).data) for k in self.FIELDS}


@dataclass
class ModelState:
    """Batch of (h, z) pairs plus the backbone carry needed to continue them."""

    h: np.ndarray  # [N, d_model]
    z: np.ndarray  # [N, L*C]
    carry: object
    cont: np.ndarray = None  # [N] continue flag of the state, if known

    def __len__(self):
        return self.h.shape[0]

    def take(self, rows, backbone):
        cont = None if self.cont is None else self.cont[rows]
        return ModelState(self.h[rows], self.z[rows], backbone.take(self.carry, rows), cont)

    def features(self):
        return np.concatenate([self.h, self.z], axis=-1)


class WorldModel:
    def __init__(self, config, store, prefix="wm"):
        self.config = config.validate()
        self.store = store
        self.prefix = prefix
        self.bins = make_bins(config.reward_bins, config.bin_limit)
        cls = TSSM if config.backbone == "tssm" else RSSM
        self.backbone = cls(config, store, f"{prefix}.seq")

    @staticmethod
    def init_params(config, store, rng, prefix="wm", dtype=np.float64):
        c = config.validate()
        init_mlp(store, f"{prefix}.enc", [c.d_obs, c.hidden, c.d_embed], rng, dtype)
        init_mlp(store, f"{prefix}.post", [c.d_embed, c.latent_size], rng, dtype)
        init_mlp(store, f"{prefix}.prior", [c.d_model, c.hidden, c.latent_size], rng, dtype)
        init_mlp(store, f"{prefix}.dec_obs", [c.feat_size, c.hidden, c.d_obs], rng, dtype)
        init_mlp(store, f"{prefix}.dec_rew", [c.feat_size, c.hidden, c.reward_bins], rng, dtype, zero_out=True)
        init_mlp(store, f"{prefix}.dec_cont", [c.feat_size, c.hidden, 1], rng, dtype)
        cls = TSSM if c.backbone == "tssm" else RSSM
        cls.init_params(c, store, f"{prefix}.seq", rng, dtype)

    @property
    def dtype(self):
        return self.store[f"{self.prefix}.enc.l0.w"].dtype

    def _t(self, x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))

    def _group(self, flat):
        c = self.config
        return flat.reshape(flat.shape[:-1] + (c.latent_groups, c.latent_classes))

    def encode_obs(self, obs):
        return mlp(self.store, f"{self.prefix}.enc", self._t(obs), 2)

    def posterior_logits(self, embed):
        return self._group(mlp(self.store, f"{self.prefix}.post", diff.silu(self._t(embed)), 1))

    def prior_logits(self, h):
        return self._group(mlp(self.store, f"{self.prefix}.prior", self._t(h), 2))

    def decode(self, h, z):
        """Returns (obs_mean in symlog space, reward bin logits, continue logit)."""
        feat = diff.concat([self._t(h), self._t(z)], axis=-1)
        p = self.prefix
        obs = mlp(self.store, f"{p}.dec_obs", feat, 2)
        rew = mlp(self.store, f"{p}.dec_rew", feat, 2)
        cont = mlp(self.store, f"{p}.dec_cont", feat, 2)
        return obs, rew, cont.reshape(cont.shape[:-1])

    def decode_reward(self, reward_logits):
        probs = kernels.softmax_rows(
            np.ascontiguousarray(reward_logits.reshape(-1, self.bins.shape[0]))
        ).astype(np.float64)
        return symexp(probs @ self.bins).reshape(reward_logits.shape[:-1])

    # ----------------------------------------------------------------- loss

    def loss(self, batch, rng, sample=True):
        """World-model loss over a segment batch.

        Returns the LossBreakdown and the posterior model states at every
        (b, t), flattened to B*T rows, as imagination starting points.
        """
        c = self.config
        B, T = batch.obs.shape[:2]
        if T < 2:
            raise ContractError(f"segment length must be >= 2, got {T}")
        post = unimix_logits(self.posterior_logits(self.encode_obs(batch.obs)), c.unimix)
        z = sample_categorical_st(post, 0.0, rng, sample).reshape(B, T, c.latent_size)
        actions = np.asarray(batch.actions, dtype=self.dtype)
        if c.backbone == "tssm":
            h, kvs = self.backbone.forward_parallel(z, actions, return_kv=True)
        else:
            h, kvs = self.backbone.forward_parallel(z, actions), None
        prior = unimix_logits(self.prior_logits(h), c.unimix)
        obs_mean, rew_logits, cont_logit = self.decode(h, z)

        target = self._t(symlog(batch.obs))
        err = obs_mean - target
        recon = (err * err).sum(axis=-1).mean()
        rew_target = self._t(twohot_encode(symlog(batch.rewards), self.bins))
        reward = -(rew_target * diff.log_softmax(rew_logits)).sum(axis=-1).mean()
        cont_t = self._t(batch.continues)
        cont = (diff.softplus(cont_logit) - cont_t * cont_logit).mean()
        kl_dyn = diff.clamp_min(kl_categorical(diff.stop_gradient(post), prior), c.free_bits).mean()
        kl_rep = diff.clamp_min(kl_categorical(post, diff.stop_gradient(prior)), c.free_bits).mean()
        total = recon + reward + cont + kl_dyn * c.kl_dyn + kl_rep * c.kl_rep
        losses = LossBreakdown(recon, reward, cont, kl_dyn, kl_rep, total)

        starts = ModelState(
            h.data.reshape(B * T, -1).copy(),
            z.data.reshape(B * T, -1).copy(),
            self.backbone.start_carries(h, kvs),
            np.asarray(batch.continues, dtype=np.float64).reshape(-1),
        )
        return losses, starts

    # ------------------------------------------------------------ stepping

    def initial_state(self, batch):
        h, carry = self.backbone.initial(batch, self.dtype)
        return h, carry

    def observe_step(self, obs, rng, sample=True):
        """Posterior latent for one observation per row: returns z as a one-hot array."""
        post = unimix_logits(self.posterior_logits(self.encode_obs(obs)), self.config.unimix)
        z = sample_categorical_st(post, 0.0, rng, sample)
        return z.data.reshape(z.shape[0], -1)

    def imagine_step(self, carry, z, a, rng):
        """Advance the backbone by (z, a) and sample the prior latent."""
        h, carry = self.backbone.step(carry, self._t(z), self._t(a))
        prior = self.prior_logits(h)
        zn = sample_categorical_st(prior, self.config.unimix, rng, True)
        return h.data, zn.data.reshape(zn.shape[0], -1), carry
