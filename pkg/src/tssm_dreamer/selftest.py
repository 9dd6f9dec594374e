"""Fast invariant checks runnable without pytest (``tdv3 selftest``).

Also home of the finite-difference gradient checker used by the test
suite, since it needs the same micro-configuration plumbing.
"""

import io
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint, diff, envs, kernels
from . import transformer as tr
from .config import RunConfig
from .replay import imagine, stack_segments
from .ssm import kl_categorical, make_bins, symexp, symlog, twohot_decode, twohot_encode


def micro_config(backbone="tssm", window=0, T=3):
    """d_model=8, 2 groups of 3 classes, segments of length ``T``, float64."""
    cfg = RunConfig()
    cfg.env = envs.EnvConfig(delay=T - 2, n_symbols=2, episode_len=T - 1)
    wm = cfg.world_model
    wm.backbone = backbone
    wm.transformer = tr.EncoderConfig(d_model=8, n_heads=2, d_ff=16, n_layers=1, window=window)
    wm.d_model = wm.d_embed = wm.hidden = 8
    wm.latent_groups, wm.latent_classes = 2, 3
    wm.d_obs, wm.n_actions = cfg.env.obs_dim, cfg.env.n_actions
    wm.free_bits = 0.0
    wm.reward_bins = 7
    cfg.agent.hidden = 8
    cfg.agent.critic_bins = 7
    cfg.replay.seg_len = T
    cfg.replay.horizon = 3
    cfg.replay.batch_size = 2
    cfg.schedule.dtype = "float64"
    return cfg.validate()


def micro_setup(cfg, seed=0):
    """Parameters, a segment batch with a reward, and an imagination batch."""
    from .harness import Agent

    rng = np.random.default_rng(seed)
    agent = Agent(cfg, rng=rng)
    # make the zero-initialised output layers nonzero so every path carries gradient
    for name in agent.store.names():
        t = agent.store[name]
        if not np.any(t.data):
            t.data[...] = 0.3 * rng.standard_normal(t.data.shape)
    trajs = [agent.run_episode(int(rng.integers(1 << 30)), "sample", rng)[0] for _ in range(2)]
    T = cfg.replay.seg_len
    batch = stack_segments([t.segment(len(t) - T, T) for t in trajs])
    batch.rewards[:, -1] = [1.0, 0.0]
    _, starts = agent.wm.loss(batch, rng)
    rollouts = imagine(starts, cfg.replay.horizon, agent.ac.policy("sample"), agent.wm, rng)
    return agent, batch, rollouts


def gradient_check(loss_fn, store, prefix="", step=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn()`` must rebuild the loss from the store each call. Stop-gradient
    values are recorded once and replayed for the perturbed evaluations.
    Returns (worst error, {name: error}).
    """
    with diff.frozen_stop_gradients() as tape:
        loss = loss_fn()
    g = diff.backward(loss, store, prefix)
    errs = {}

    def value():
        with diff.no_grad(), diff.frozen_stop_gradients(tape):
            return float(loss_fn().data)

    for name, analytic in g.grads.items():
        numeric = diff.numeric_grad(value, store[name].data, step)
        errs[name] = diff.relative_error(analytic, numeric)
    return (max(errs.values()) if errs else 0.0), errs


def loss_closures(agent, batch, rollouts, seed=1):
    """The three trained losses as zero-argument closures."""
    ac = agent.ac
    prep = ac.prepare(rollouts)

    def wm_loss():
        return agent.wm.loss(batch, np.random.default_rng(seed))[0].total

    def critic_loss():
        return ac.critic_loss(prep["feats"], prep["returns"], prep["weights"])

    def policy_loss():
        return ac.policy_loss(prep["feats"], prep["actions"], prep["advantages"], prep["weights"])

    return {"wm": wm_loss, "critic": critic_loss, "actor": policy_loss}


# -------------------------------------------------------------- quick checks


def _check_cached_equivalence(rng):
    worst = 0.0
    for window in (0, 1):
        cfg = tr.EncoderConfig(d_model=16, n_heads=2, d_ff=32, n_layers=2, window=window)
        store = diff.ParameterStore()
        tr.init_encoder(store, "e", cfg, rng)
        params = tr.encoder_params(store, "e", cfg)
        x = rng.standard_normal((2, 12, 16))
        full = tr.encoder_forward(diff.Tensor(x), cfg, params).data
        cache = tr.empty_cache(cfg, 2)
        with diff.no_grad():
            for t in range(12):
                out, cache = tr.encoder_step_cached(cache, diff.Tensor(x[:, t]), cfg, params)
                worst = max(worst, diff.relative_error(out.data, full[:, t], floor=1.0))
    return worst < 1e-6, f"max rel err {worst:.2e}"


def _check_identities(rng):
    v = rng.standard_normal(1000) * 50
    bins = make_bins(41, 20.0)
    w = rng.uniform(bins[0], bins[-1], 1000)
    p = rng.standard_normal((4, 3, 5))
    x = rng.standard_normal((8, 7))
    errs = [
        np.max(np.abs(symexp(symlog(v)) - v) / np.maximum(1.0, np.abs(v))),
        np.max(np.abs(twohot_decode(twohot_encode(w, bins), bins) - w)),
        float(np.max(np.abs(kl_categorical(diff.Tensor(p), diff.Tensor(p)).data))),
        np.max(np.abs(kernels.softmax_rows(x) - kernels.softmax_rows(x + 3.7))),
    ]
    ok = errs[0] < 1e-12 and errs[1] < 1e-9 and errs[2] < 1e-10 and errs[3] < 1e-12
    return ok, "errors " + ", ".join(f"{e:.1e}" for e in errs)


def _check_gradients(rng):
    cfg = micro_config()
    agent, batch, rollouts = micro_setup(cfg, int(rng.integers(1 << 30)))
    worst = 0.0
    for name, fn in loss_closures(agent, batch, rollouts).items():
        prefix = "wm" if name == "wm" else name
        err, _ = gradient_check(fn, agent.store, prefix)
        worst = max(worst, err)
    return worst < 1e-4, f"max rel err {worst:.2e}"


def _check_checkpoint(rng):
    store = diff.ParameterStore()
    store.add("a.w", rng.standard_normal((3, 4)).astype(np.float32))
    store.add("b", rng.standard_normal(5).astype(np.float32))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.tdv3"
        checkpoint.checkpoint_save(store, path, "k=v\n")
        _, arrays = checkpoint.read_checkpoint(path)
    ok = all(arrays[n].tobytes() == store[n].data.tobytes() for n in store.names())
    return ok, "bitwise roundtrip"


CHECKS = {
    "cached_equivalence": _check_cached_equivalence,
    "exact_identities": _check_identities,
    "gradients": _check_gradients,
    "checkpoint_roundtrip": _check_checkpoint,
}


def run(seed=0, out=None):
    """Run every check; prints one line each and returns True if all passed."""
    out = out if out is not None else io.StringIO()
    rng = np.random.default_rng(seed)
    all_ok = True
    print(f"kernel backend: {kernels.backend()}", file=out)
    for name, check in CHECKS.items():
        ok, detail = check(rng)
        all_ok &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=out)
    return all_ok


__all__ = [
    "CHECKS",
    "gradient_check",
    "loss_closures",
    "micro_config",
    "micro_setup",
    "run",
]
