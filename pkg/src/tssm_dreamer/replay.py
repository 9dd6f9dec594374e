"""Return-prioritized trajectory replay and capped latent imagination."""

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import diff
from .diff import ContractError
from .ssm import ModelState, SegmentBatch

# hard cap on imagined rollouts launched from one start state
MAX_ROLLOUTS_PER_START = 3


@dataclass
class Trajectory:
    observations: np.ndarray  # [T, d_obs]
    actions: np.ndarray  # [T, n_actions] one-hot
    rewards: np.ndarray  # [T]
    continues: np.ndarray  # [T]

    def __post_init__(self):
        n = len(self.observations)
        if not (len(self.actions) == len(self.rewards) == len(self.continues) == n):
            raise ValueError("trajectory fields must have equal lengths")

    def __len__(self):
        return len(self.observations)

    @property
    def episode_return(self):
        return float(np.sum(self.rewards))

    @property
    def terminated(self):
        return len(self) > 0 and self.continues[-1] == 0

    def segment(self, start, length):
        s = slice(start, start + length)
        return Trajectory(self.observations[s], self.actions[s], self.rewards[s], self.continues[s])


class ReplayBuffer:
    """FIFO store of whole trajectories, sampled in proportion to shifted return."""

    def __init__(self, capacity=500, priority_floor=0.1):
        if capacity < 1 or priority_floor <= 0:
            raise ValueError("capacity must be >= 1 and priority_floor > 0")
        self.capacity = capacity
        self.priority_floor = priority_floor
        self.items = deque(maxlen=capacity)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.items)

    def add(self, trajectory):
        if len(trajectory) == 0:
            raise ValueError("cannot store an empty trajectory")
        with self._lock:
            self.items.append(trajectory)

    def probabilities(self, items=None):
        items = list(self.items) if items is None else items
        returns = np.array([t.episode_return for t in items], dtype=np.float64)
        weights = returns - returns.min() + self.priority_floor
        return weights / weights.sum()

    def sample(self, batch, seg_len, rng):
        with self._lock:
            items = list(self.items)
        if not items:
            raise ContractError("cannot sample from an empty replay buffer")
        eligible = [t for t in items if len(t) >= seg_len]
        if not eligible:
            raise ContractError(f"no stored trajectory has length >= {seg_len}")
        probs = self.probabilities(eligible)
        picks = rng.choice(len(eligible), size=batch, p=probs)
        out = []
        for i in picks:
            traj = eligible[i]
            start = int(rng.integers(0, len(traj) - seg_len + 1))
            out.append(traj.segment(start, seg_len))
        return out


def add_trajectory(buf, trajectory):
    buf.add(trajectory)


def sample_segments(buf, batch, seg_len, rng):
    return buf.sample(batch, seg_len, rng)


def stack_segments(segments):
    return SegmentBatch(
        np.stack([s.observations for s in segments]),
        np.stack([s.actions for s in segments]),
        np.stack([s.rewards for s in segments]),
        np.stack([s.continues for s in segments]),
    )


# ---------------------------------------------------------------- imagination


@dataclass
class ImaginedRollout:
    h: np.ndarray  # [H+1, d_model]
    z: np.ndarray  # [H+1, L*C]
    actions: np.ndarray  # [H, n_actions] one-hot
    predicted_rewards: np.ndarray  # [H]
    predicted_continues: np.ndarray  # [H]
    start_continue: float


@dataclass
class ImaginationBatch:
    """Rollouts stacked along axis 0; row i started from ``start_index[i]``."""

    h: np.ndarray  # [N, H+1, d_model]
    z: np.ndarray  # [N, H+1, L*C]
    actions: np.ndarray  # [N, H, n_actions]
    rewards: np.ndarray  # [N, H]
    continues: np.ndarray  # [N, H]
    start_continue: np.ndarray  # [N]
    start_index: np.ndarray  # [N]

    def __len__(self):
        return self.h.shape[0]

    @property
    def horizon(self):
        return self.rewards.shape[1]

    def features(self):
        return np.concatenate([self.h, self.z], axis=-1)

    def rollouts(self):
        return [
            ImaginedRollout(
                self.h[i], self.z[i], self.actions[i], self.rewards[i],
                self.continues[i], float(self.start_continue[i]),
            )
            for i in range(len(self))
        ]  # fmt: skip


def imagine(starts, horizon, policy, world_model, rng, per_start=MAX_ROLLOUTS_PER_START):
    """Roll the world model forward under ``policy`` from every start state.

    Launches min(3, per_start) rollouts per start, all H steps long. Runs
    without gradient recording and with the world model frozen.
    ``policy(features, rng) -> one-hot actions`` acts on [N, feat] arrays.
    """
    if horizon < 1:
        raise ContractError(f"imagination horizon must be >= 1, got {horizon}")
    n = min(MAX_ROLLOUTS_PER_START, int(per_start))
    if n < 1:
        raise ContractError("need at least one rollout per start state")
    rows = np.repeat(np.arange(len(starts)), n)
    h = starts.h[rows]
    z = starts.z[rows]
    carry = world_model.backbone.take(starts.carry, rows)
    hs, zs, acts, rews, conts = [h], [z], [], [], []
    with diff.no_grad(), world_model.store.frozen(world_model.prefix):
        _, _, c0 = world_model.decode(h, z)
        start_cont = _sigmoid(c0.data)
        for _ in range(horizon):
            a = policy(np.concatenate([h, z], axis=-1), rng)
            h, z, carry = world_model.imagine_step(carry, z, a, rng)
            _, rew_logits, cont_logit = world_model.decode(h, z)
            hs.append(h)
            zs.append(z)
            acts.append(a)
            rews.append(world_model.decode_reward(rew_logits.data))
            conts.append(_sigmoid(cont_logit.data))
    batch = ImaginationBatch(
        np.stack(hs, axis=1),
        np.stack(zs, axis=1),
        np.stack(acts, axis=1),
        np.stack(rews, axis=1).astype(np.float64),
        np.stack(conts, axis=1).astype(np.float64),
        start_cont.astype(np.float64),
        rows,
    )
    assert len(batch) <= MAX_ROLLOUTS_PER_START * len(starts)
    return batch


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ImaginationCounter:
    """Wraps an imagine-compatible callable and tallies rollouts per start."""

    def __init__(self, fn=imagine):
        self.fn = fn
        self.calls = []  # (n_starts, n_rollouts, max rollouts from one start)

    def __call__(self, starts, horizon, policy, world_model, rng, **kw):
        out = self.fn(starts, horizon, policy, world_model, rng, **kw)
        counts = np.bincount(out.start_index, minlength=len(starts))
        self.calls.append((len(starts), len(out), int(counts.max()), int(counts.min())))
        return out

    @property
    def total_rollouts(self):
        return sum(c[1] for c in self.calls)

    @property
    def total_starts(self):
        return sum(c[0] for c in self.calls)
