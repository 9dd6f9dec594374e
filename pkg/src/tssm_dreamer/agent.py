"""Actor-critic trained on imagined rollouts.

The critic is a discrete regression head: bin logits over symlog-spaced
centers, trained with cross-entropy against two-hot encoded symlog returns.
The actor is trained with REINFORCE on normalized lambda-return advantages.
World-model parameters are frozen for the duration of every update.

Both heads read model-state features standardized by running per-dimension
moments. A transformer backbone can hold a fact (which cue was shown) in a
direction of h_t that is linearly clean but small next to the rest of the
state; standardizing brings it to a scale the policy gradient can find.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from . import diff, kernels
from .diff import ContractError, Tensor
from .ssm import init_mlp, make_bins, mlp, symexp, symlog, twohot_encode


@dataclass
class ActorCriticConfig:
    gamma: float = 0.997
    lam: float = 0.95
    entropy_scale: float = 3e-4
    critic_bins: int = 41
    bin_limit: float = 20.0
    hidden: int = 64
    lr: float = 3e-4
    return_scale_decay: float = 0.99
    feature_norm: bool = True
    feature_norm_decay: float = 0.99
    freeze_scope: str = "wm"  # "wm" freezes the whole world model, "wm.seq" only the backbone

    def validate(self):
        if not 0.0 < self.gamma < 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"need gamma in (0,1) and lambda in [0,1]: {self.gamma}, {self.lam}")
        if self.entropy_scale < 0:
            raise ValueError("entropy_scale must be >= 0")
        if self.critic_bins < 3 or self.critic_bins % 2 == 0:
            raise ValueError("critic_bins must be odd and >= 3")
        if not 0.0 <= self.feature_norm_decay < 1.0:
            raise ValueError("feature_norm_decay must lie in [0, 1)")
        return self


def lambda_returns(rewards, values, continues, gamma, lam):
    """R_t = r_t + γ c_t ((1-λ) v_t + λ R_{t+1}), R_{H+1} = v_H.

    ``rewards`` and ``continues`` are [..., H]; ``values`` is [..., H+1]
    with ``values[..., 0]`` the value of the start state.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    continues = np.asarray(continues, dtype=np.float64)
    if rewards.shape != continues.shape or values.shape[:-1] != rewards.shape[:-1] or (
        values.shape[-1] != rewards.shape[-1] + 1
    ):
        raise ContractError(
            f"lambda_returns shapes: rewards {rewards.shape}, values {values.shape}, "
            f"continues {continues.shape}"
        )
    H = rewards.shape[-1]
    out = kernels.lambda_returns(
        np.ascontiguousarray(rewards.reshape(-1, H)),
        np.ascontiguousarray(values.reshape(-1, H + 1)),
        np.ascontiguousarray(continues.reshape(-1, H)),
        float(gamma),
        float(lam),
    )
    return out.reshape(rewards.shape)


class ActorCritic:
    def __init__(self, config, store, feat_size, n_actions, prefix=("actor", "critic")):
        self.config = config.validate()
        self.store = store
        self.feat_size = feat_size
        self.n_actions = n_actions
        self.actor_prefix, self.critic_prefix = prefix
        self.bins = make_bins(config.critic_bins, config.bin_limit)
        self.return_scale = None

    @staticmethod
    def init_params(config, store, feat_size, n_actions, rng, dtype=np.float64):
        h = config.hidden
        init_mlp(store, "actor", [feat_size, h, h, n_actions], rng, dtype)
        init_mlp(store, "critic", [feat_size, h, h, config.critic_bins], rng, dtype, zero_out=True)
        # running feature moments; not trained, but checkpointed with everything else
        store.add("norm.mean", np.zeros(feat_size, dtype=dtype))
        store.add("norm.var", np.ones(feat_size, dtype=dtype))
        store.add("norm.count", np.zeros((), dtype=dtype))

    @property
    def dtype(self):
        return self.store["actor.l0.w"].dtype

    def _t(self, x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))

    def normalize(self, feat):
        feat = np.asarray(feat.data if isinstance(feat, Tensor) else feat)
        if not self.config.feature_norm or "norm.mean" not in self.store:
            return feat
        mean, var = self.store["norm.mean"].data, self.store["norm.var"].data
        return ((feat - mean) / np.sqrt(var + 1e-6)).astype(self.dtype)

    def update_feature_moments(self, feats):
        """EMA of per-dimension mean and variance; the first call copies the batch moments."""
        if not self.config.feature_norm or "norm.mean" not in self.store:
            return
        flat = np.asarray(feats, dtype=np.float64).reshape(-1, self.feat_size)
        m, v = flat.mean(axis=0), flat.var(axis=0)
        mean, var, count = self.store["norm.mean"], self.store["norm.var"], self.store["norm.count"]
        d = 0.0 if count.data == 0 else self.config.feature_norm_decay
        mean.data = (d * mean.data + (1 - d) * m).astype(mean.dtype)
        var.data = (d * var.data + (1 - d) * v).astype(var.dtype)
        count.data = count.data + 1

    def actor_logits(self, feat):
        return mlp(self.store, self.actor_prefix, self._t(self.normalize(feat)), 3)

    def critic_logits(self, feat):
        return mlp(self.store, self.critic_prefix, self._t(self.normalize(feat)), 3)

    def value(self, feat):
        with diff.no_grad():
            logits = self.critic_logits(feat).data
        probs = kernels.softmax_rows(np.ascontiguousarray(logits.reshape(-1, logits.shape[-1])))
        return symexp(probs.astype(np.float64) @ self.bins).reshape(logits.shape[:-1])

    def act(self, feat, mode, rng):
        """Action indices for a batch of features; ``mode`` is "sample" or "greedy"."""
        with diff.no_grad():
            logits = self.actor_logits(feat).data
        logits = np.ascontiguousarray(logits.reshape(-1, self.n_actions))
        if mode == "greedy":
            return np.argmax(logits, axis=-1)
        if mode != "sample":
            raise ValueError(f"unknown act mode {mode!r}")
        probs = kernels.softmax_rows(logits.astype(np.float64))
        return kernels.categorical(probs, rng.random(probs.shape[0]))

    def policy(self, mode="sample"):
        """Callable mapping (features, rng) to one-hot actions, for imagination."""

        def fn(feat, rng):
            idx = self.act(feat, mode, rng)
            return np.eye(self.n_actions, dtype=feat.dtype)[idx]

        return fn

    # ------------------------------------------------------------- targets

    def targets(self, batch):
        """Values, lambda returns and per-step weights for an ImaginationBatch.

        values: [N, H+1]; returns: [N, H] where returns[:, t] is the target
        for the state before action t; weights: [N, H] is the predicted
        probability that the episode is still running at that state.
        """
        cfg = self.config
        values = self.value(batch.features())
        returns = lambda_returns(batch.rewards, values, batch.continues, cfg.gamma, cfg.lam)
        alive = np.concatenate([batch.start_continue[:, None], batch.continues[:, :-1]], axis=1)
        weights = np.cumprod(alive, axis=1)
        return values, returns, weights

    def update_return_scale(self, returns):
        lo, hi = np.percentile(returns, [5, 95])
        span = hi - lo
        d = self.config.return_scale_decay
        self.return_scale = span if self.return_scale is None else d * self.return_scale + (1 - d) * span
        return max(1.0, self.return_scale)

    def critic_loss(self, feats, returns, weights):
        """Weighted cross-entropy between bin logits and two-hot symlog targets."""
        target = self._t(twohot_encode(symlog(returns), self.bins))
        logp = diff.log_softmax(self.critic_logits(feats))
        ce = -(target * logp).sum(axis=-1)
        return (ce * self._t(weights)).mean()

    def policy_loss(self, feats, actions, advantages, weights):
        """-E[w A log π(a)] - entropy_scale E[w H(π)]; advantages are constants."""
        logp = diff.log_softmax(self.actor_logits(feats))
        chosen = (logp * self._t(actions)).sum(axis=-1)
        entropy = -(diff.exp(logp) * logp).sum(axis=-1)
        w = self._t(weights)
        pg = -(chosen * self._t(advantages) * w).mean()
        return pg - (entropy * w).mean() * self.config.entropy_scale

    def prepare(self, batch):
        """Constant inputs shared by the critic and actor steps."""
        self.update_feature_moments(batch.features())
        values, returns, weights = self.targets(batch)
        scale = self.update_return_scale(returns)
        return {
            "feats": batch.features()[:, :-1],
            "actions": batch.actions,
            "returns": returns,
            "weights": weights,
            "advantages": (returns - values[:, :-1]) / scale,
        }

    def _step(self, loss, prefix, max_norm):
        g = diff.backward(loss, self.store, prefix)
        grads, _ = diff.clip_by_global_norm(g.grads, max_norm)
        diff.sgd_adam_step(self.store, grads, lr=self.config.lr)
        return g.loss_value

    def _frozen_world_model(self):
        scope = self.config.freeze_scope
        return self.store.frozen(scope) if self.store.names(scope) else contextlib.nullcontext()

    def critic_step(self, prep, max_norm=100.0):
        with self._frozen_world_model():
            loss = self.critic_loss(prep["feats"], prep["returns"], prep["weights"])
            return self._step(loss, self.critic_prefix, max_norm)

    def policy_step(self, prep, max_norm=100.0):
        with self._frozen_world_model():
            loss = self.policy_loss(prep["feats"], prep["actions"], prep["advantages"], prep["weights"])
            return self._step(loss, self.actor_prefix, max_norm)

    def update(self, batch):
        """One critic step then one actor step; returns (policy_loss, critic_loss)."""
        prep = self.prepare(batch)
        closs = self.critic_step(prep)
        ploss = self.policy_step(prep)
        return ploss, closs


def critic_update(batch, ac):
    return ac.critic_step(ac.prepare(batch))


def policy_update(batch, ac):
    return ac.policy_step(ac.prepare(batch))
