"""Synthetic memory-diagnostic environments.

Observation layout (length ``n_symbols + 2``): a symbol one-hot, then a
cue-phase flag and a query-phase flag.

DelayedRecall: step 1 shows the cue symbol, steps 2..delay are blank, step
``delay + 1`` raises the query flag. The action taken at the query step
scores 1 if it names the cue. That step ends the episode.

RepeatSequence: steps 1..k show k cue symbols (k = episode_len - delay),
blanks follow, and the k steps from ``delay + 1`` are queries. The last
query pays 1 only if every query action matched its cue in order.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .diff import ContractError

DELAYED_RECALL = "delayed_recall"
REPEAT_SEQUENCE = "repeat_sequence"


@dataclass
class EnvConfig:
    kind: str = DELAYED_RECALL
    delay: int = 16
    n_symbols: int = 4
    episode_len: int = 17
    seed: int = 0

    def validate(self):
        if self.kind not in (DELAYED_RECALL, REPEAT_SEQUENCE):
            raise ValueError(f"unknown env kind {self.kind!r}")
        if self.delay < 1 or self.n_symbols < 2:
            raise ValueError(f"need delay >= 1 and n_symbols >= 2, got {self.delay}, {self.n_symbols}")
        if self.episode_len <= self.delay:
            raise ValueError(f"episode_len={self.episode_len} must exceed delay={self.delay}")
        if self.kind == REPEAT_SEQUENCE and self.sequence_len > self.delay:
            raise ValueError("repeat_sequence needs episode_len - delay <= delay")
        return self

    @property
    def sequence_len(self):
        return 1 if self.kind == DELAYED_RECALL else self.episode_len - self.delay

    @property
    def obs_dim(self):
        return self.n_symbols + 2

    @property
    def n_actions(self):
        return self.n_symbols

    @property
    def steps_per_episode(self):
        return self.delay + self.sequence_len


@dataclass(frozen=True)
class EnvState:
    step_index: int  # 1-based index of the observation just emitted
    hidden_cue: tuple
    done: bool
    matched: int = 0
    config: EnvConfig = None


def _observe(config, state):
    obs = np.zeros(config.obs_dim)
    t = state.step_index
    k = config.sequence_len
    if state.done:
        return obs
    if t <= k:
        obs[state.hidden_cue[t - 1]] = 1.0
        obs[config.n_symbols] = 1.0
    elif t > config.delay:
        obs[config.n_symbols + 1] = 1.0
    return obs


def reset(config, seed):
    config.validate()
    rng = np.random.default_rng(seed)
    cue = tuple(int(c) for c in rng.integers(0, config.n_symbols, size=config.sequence_len))
    state = EnvState(1, cue, False, 0, config)
    return state, _observe(config, state)


def step(state, action):
    if state.done:
        raise ContractError("step called on a finished episode")
    config = state.config
    action = int(action)
    if not 0 <= action < config.n_actions:
        raise ValueError(f"action {action} out of range")
    t = state.step_index
    reward = 0.0
    matched = state.matched
    done = False
    if t > config.delay:
        q = t - config.delay - 1
        matched += int(action == state.hidden_cue[q])
        if q == config.sequence_len - 1:
            done = True
            reward = 1.0 if matched == config.sequence_len else 0.0
    new = dataclasses.replace(state, step_index=t + 1, done=done, matched=matched)
    return new, _observe(config, new), reward, 0 if done else 1


def oracle_returns(config):
    """(optimal expected return, uniform-random-policy expected return)."""
    config.validate()
    return 1.0, float(config.n_symbols) ** (-config.sequence_len)


def run_episode(config, seed, policy):
    """Roll ``policy(obs, t) -> action`` for one episode; returns the total reward."""
    state, obs = reset(config, seed)
    total = 0.0
    while not state.done:
        state, obs, r, _ = step(state, policy(obs, state.step_index))
        total += r
    return total
