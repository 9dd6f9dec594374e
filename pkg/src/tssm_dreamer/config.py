"""Run configuration and its flat ``dotted.key=value`` text format."""

import dataclasses
from dataclasses import dataclass, field

from .agent import ActorCriticConfig
from .envs import EnvConfig
from .ssm import WorldModelConfig


class ConfigKeyError(KeyError):
    pass


@dataclass
class ReplayConfig:
    capacity: int = 500
    seg_len: int = 16
    horizon: int = 15
    batch_size: int = 16
    priority_floor: float = 0.1
    rollouts_per_start: int = 3
    imagine_starts: int = 0  # posterior states used as imagination starts; 0 = all


@dataclass
class ScheduleConfig:
    total_env_steps: int = 50_000
    train_ratio: float = 0.25  # train steps per env step
    eval_every: int = 2_500
    eval_episodes: int = 50
    prefill_steps: int = 1_000
    seed: int = 0
    dtype: str = "float32"


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    agent: ActorCriticConfig = field(default_factory=ActorCriticConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def validate(self):
        self.env.validate()
        self.world_model.validate()
        self.agent.validate()
        wm = self.world_model
        if wm.d_obs != self.env.obs_dim or wm.n_actions != self.env.n_actions:
            raise ValueError(
                f"world_model.d_obs/n_actions ({wm.d_obs}, {wm.n_actions}) do not match the "
                f"environment ({self.env.obs_dim}, {self.env.n_actions})"
            )
        r, s = self.replay, self.schedule
        for name, v in [
            ("replay.capacity", r.capacity), ("replay.seg_len", r.seg_len),
            ("replay.horizon", r.horizon), ("replay.batch_size", r.batch_size),
            ("replay.rollouts_per_start", r.rollouts_per_start),
            ("schedule.eval_every", s.eval_every), ("schedule.eval_episodes", s.eval_episodes),
        ]:  # fmt: skip
            if v < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        if s.total_env_steps < 0 or s.train_ratio < 0:
            raise ValueError("schedule.total_env_steps and schedule.train_ratio must be >= 0")
        if s.dtype not in ("float32", "float64"):
            raise ValueError(f"schedule.dtype must be float32 or float64, got {s.dtype!r}")
        return self


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        else:
            yield key, value


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(config):
    return "".join(f"{k}={_format(v)}\n" for k, v in _flatten(config))


def _coerce(key, old, raw):
    try:
        if isinstance(old, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(old, int):
            return int(raw)
        if isinstance(old, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {type(old).__name__}") from None
    return raw


def set_key(config, key, raw):
    parts = key.split(".")
    obj = config
    for p in parts[:-1]:
        if not (hasattr(obj, p) and dataclasses.is_dataclass(getattr(obj, p))):
            raise ConfigKeyError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    names = {f.name for f in dataclasses.fields(obj)}
    if leaf not in names or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigKeyError(f"unknown config key {key!r}")
    setattr(obj, leaf, _coerce(key, getattr(obj, leaf), raw.strip()))


def from_text(text, base=None):
    config = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        set_key(config, key.strip(), raw)
    # re-run EncoderConfig checks after field-by-field edits
    config.world_model.transformer = dataclasses.replace(config.world_model.transformer)
    return config


def load(path):
    with open(path, encoding="utf-8") as fh:
        return from_text(fh.read())


def save(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(config))


def memory_experiment(backbone, window=0, seed=0, delay=16, total_env_steps=50_000):
    """Preset for the delayed-recall comparison; ``backbone`` is rssm or tssm."""
    cfg = RunConfig()
    cfg.env = EnvConfig(delay=delay, n_symbols=4, episode_len=delay + 1, seed=seed)
    cfg.world_model.backbone = backbone
    cfg.world_model.d_obs = cfg.env.obs_dim
    cfg.world_model.n_actions = cfg.env.n_actions
    cfg.world_model.transformer.window = window
    # more heads make it likelier that the state before the query still attends to the cue
    cfg.world_model.transformer.n_heads = 4
    # whole episodes, so every segment holds both the cue and the query
    cfg.replay.seg_len = cfg.env.steps_per_episode + 1
    # binary returns: a small floor oversamples rewarded episodes and biases the reward head
    cfg.replay.priority_floor = 1.0
    cfg.replay.imagine_starts = 32
    cfg.world_model.lr = 3e-3
    # keep trying every answer until the reward head has seen each (cue, action) pair
    cfg.agent.entropy_scale = 1e-2
    cfg.agent.lr = 1e-3
    cfg.schedule.total_env_steps = total_env_steps
    cfg.schedule.seed = seed
    return cfg
