"""Collect -> train world model -> imagine -> update actor-critic, with metrics."""

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfgmod, diff, envs
from .agent import ActorCritic
from .replay import ReplayBuffer, Trajectory, imagine, stack_segments
from .ssm import LossBreakdown, WorldModel

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    ("env_step", "episode_return_mean")
    + LossBreakdown.FIELDS
    + ("policy_loss", "critic_loss")
)


@dataclass
class MetricsRow:
    env_step: int
    episode_return_mean: float
    recon: float = float("nan")
    reward: float = float("nan")
    cont: float = float("nan")
    kl_dyn: float = float("nan")
    kl_rep: float = float("nan")
    total: float = float("nan")
    policy_loss: float = float("nan")
    critic_loss: float = float("nan")
    wall_ms: int = 0

    def csv_values(self):
        out = [str(self.env_step)]
        for name in METRIC_FIELDS[1:]:
            out.append(f"{getattr(self, name):.9g}")
        return out


class Agent:
    """World model plus actor-critic sharing one parameter store."""

    def __init__(self, config, store=None, rng=None):
        self.config = config.validate()
        dtype = np.dtype(config.schedule.dtype)
        if store is None:
            store = diff.ParameterStore()
            rng = rng if rng is not None else np.random.default_rng(config.schedule.seed)
            WorldModel.init_params(config.world_model, store, rng, dtype=dtype)
            ActorCritic.init_params(
                config.agent, store, config.world_model.feat_size, config.env.n_actions, rng, dtype
            )
        self.store = store
        self.wm = WorldModel(config.world_model, store)
        self.ac = ActorCritic(config.agent, store, config.world_model.feat_size, config.env.n_actions)

    def run_episode(self, seed, mode, rng):
        """Play one episode; returns the Trajectory and its total reward."""
        env_cfg = self.config.env
        n_act = env_cfg.n_actions
        state, obs = envs.reset(env_cfg, seed)
        h, carry = self.wm.initial_state(1)
        h = h.data
        observations, actions, rewards, conts = [obs], [], [0.0], [1.0]
        with diff.no_grad():
            while True:
                z = self.wm.observe_step(obs[None], rng, sample=True)
                a = int(self.ac.act(np.concatenate([h, z], axis=-1), mode, rng)[0])
                actions.append(a)
                if state.done:
                    break
                state, obs, r, c = envs.step(state, a)
                observations.append(obs)
                rewards.append(r)
                conts.append(float(c))
                a_vec = np.zeros((1, n_act), dtype=h.dtype)
                a_vec[0, a] = 1.0
                h_t, carry = self.wm.backbone.step(carry, diff.Tensor(z), diff.Tensor(a_vec))
                h = h_t.data
        traj = Trajectory(
            np.asarray(observations),
            np.eye(n_act)[np.asarray(actions)],
            np.asarray(rewards),
            np.asarray(conts),
        )
        return traj, float(np.sum(rewards))


def evaluate_agent(agent, episodes, seed):
    """Greedy returns over ``episodes`` episodes: (mean, (ci_low, ci_high))."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(1)[0])
    env_seeds = np.random.default_rng(ss).integers(0, 2**31 - 1, size=episodes)
    returns = np.array([agent.run_episode(int(s), "greedy", rng)[1] for s in env_seeds])
    mean = float(returns.mean())
    half = 1.96 * float(returns.std(ddof=1)) / np.sqrt(episodes) if episodes > 1 else float("inf")
    return mean, (mean - half, mean + half)


def evaluate(checkpoint_path, episodes, seed=0):
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    text, _ = checkpoint.read_checkpoint(checkpoint_path)
    config = cfgmod.from_text(text)
    agent = Agent(config)
    checkpoint.checkpoint_load(checkpoint_path, into=agent.store)
    return evaluate_agent(agent, episodes, seed)


class Trainer:
    def __init__(self, config, out_dir, imagine_fn=None):
        self.config = config.validate()
        self.out = Path(out_dir)
        self.imagine_fn = imagine_fn if imagine_fn is not None else imagine
        seq = np.random.SeedSequence(config.schedule.seed)
        init_ss, collect_ss, train_ss, eval_ss = seq.spawn(4)
        self.agent = Agent(config, rng=np.random.default_rng(init_ss))
        self.collect_rng = np.random.default_rng(collect_ss)
        self.train_rng = np.random.default_rng(train_ss)
        self.eval_seed = int(np.random.default_rng(eval_ss).integers(2**31 - 1))
        rc = config.replay
        self.buffer = ReplayBuffer(rc.capacity, rc.priority_floor)
        self.env_step = 0
        self.train_steps = 0
        self.last = {}

    def train_step(self):
        rc = self.config.replay
        wm, ac, store = self.agent.wm, self.agent.ac, self.agent.store
        segs = self.buffer.sample(rc.batch_size, rc.seg_len, self.train_rng)
        batch = stack_segments(segs)
        losses, starts = wm.loss(batch, self.train_rng)
        g = diff.backward(losses.total, store, "wm")
        grads, _ = diff.clip_by_global_norm(g.grads, 100.0)
        diff.sgd_adam_step(store, grads, lr=self.config.world_model.lr)
        if 0 < rc.imagine_starts < len(starts):
            rows = np.sort(self.train_rng.choice(len(starts), rc.imagine_starts, replace=False))
            starts = starts.take(rows, wm.backbone)
        rollouts = self.imagine_fn(
            starts, rc.horizon, ac.policy("sample"), wm, self.train_rng,
            per_start=rc.rollouts_per_start,
        )  # fmt: skip
        ploss, closs = ac.update(rollouts)
        self.last = dict(losses.values(), policy_loss=ploss, critic_loss=closs)
        self.train_steps += 1

    def _ready(self):
        rc = self.config.replay
        long_enough = sum(len(t) >= rc.seg_len for t in self.buffer.items)
        return long_enough > 0 and self.env_step >= self.config.schedule.prefill_steps

    def run(self):
        sc = self.config.schedule
        self.out.mkdir(parents=True, exist_ok=True)
        metrics_path = self.out / "metrics.csv"
        timing_path = self.out / "timing.csv"
        start = time.perf_counter()
        rows = []
        with open(metrics_path, "w", newline="") as mf, open(timing_path, "w", newline="") as tf:
            mw, tw = csv.writer(mf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
            mw.writerow(METRIC_FIELDS)
            tw.writerow(("env_step", "wall_ms"))
            next_eval = sc.eval_every
            credit = 0.0
            while self.env_step < sc.total_env_steps:
                seed = int(self.collect_rng.integers(2**31 - 1))
                traj, _ = self.agent.run_episode(seed, "sample", self.collect_rng)
                self.buffer.add(traj)
                steps = len(traj) - 1
                self.env_step += steps
                if self._ready():
                    credit += sc.train_ratio * steps
                    while credit >= 1.0:
                        self.train_step()
                        credit -= 1.0
                final = self.env_step >= sc.total_env_steps
                if self.env_step >= next_eval or final:
                    while next_eval <= self.env_step:
                        next_eval += sc.eval_every
                    mean, _ = evaluate_agent(self.agent, sc.eval_episodes, self.eval_seed)
                    row = MetricsRow(self.env_step, mean, **self.last)
                    row.wall_ms = int(1000 * (time.perf_counter() - start))
                    mw.writerow(row.csv_values())
                    tw.writerow((row.env_step, row.wall_ms))
                    mf.flush()
                    tf.flush()
                    rows.append(row)
                    log.info("step %d return %.3f %s", self.env_step, mean, self.last)
        ckpt = self.out / "checkpoint.tdv3"
        checkpoint.checkpoint_save(self.agent.store, ckpt, cfgmod.to_text(self.config))
        return (rows[-1] if rows else None), ckpt, rows


def run_train(config, out_dir, imagine_fn=None):
    """Train from ``config``; returns (final MetricsRow or None, checkpoint path, all rows)."""
    seed = os.environ.get("TDV3_SEED")
    if seed is not None:
        config = dataclasses.replace(
            config, schedule=dataclasses.replace(config.schedule, seed=int(seed))
        )
    return Trainer(config, out_dir, imagine_fn).run()
