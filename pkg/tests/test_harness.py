import dataclasses
import re
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tssm_dreamer import checkpoint, cli, harness, plots, selftest
from tssm_dreamer import config as cfgmod
from tssm_dreamer.checkpoint import CheckpointFormatError
from tssm_dreamer.diff import DimensionError, ParameterStore
from tssm_dreamer.replay import ImaginationCounter


def tiny_config(backbone="tssm", steps=60, seed=0):
    cfg = selftest.micro_config(backbone)
    cfg.schedule.total_env_steps = steps
    cfg.schedule.eval_every = 20
    cfg.schedule.eval_episodes = 4
    cfg.schedule.prefill_steps = 10
    cfg.schedule.seed = seed
    cfg.schedule.dtype = "float32"
    return cfg


# --------------------------------------------------------------- config


def test_config_text_roundtrip_default():
    cfg = cfgmod.RunConfig()
    assert cfgmod.from_text(cfgmod.to_text(cfg)) == cfg


@given(
    st.sampled_from(["rssm", "tssm"]),
    st.integers(0, 4),
    st.floats(1e-6, 1.0, allow_nan=False),
    st.integers(1, 10**6),
    st.booleans(),
)
def test_config_roundtrip_property(backbone, window, lr, steps, pe):
    cfg = cfgmod.RunConfig()
    cfg.world_model.backbone = backbone
    cfg.world_model.transformer.window = window
    cfg.world_model.transformer.positional_encoding = pe
    cfg.agent.lr = lr
    cfg.schedule.total_env_steps = steps
    text = cfgmod.to_text(cfg)
    assert cfgmod.from_text(text) == cfg
    assert cfgmod.to_text(cfgmod.from_text(text)) == text


def test_config_file_roundtrip(tmp_path):
    cfg = cfgmod.memory_experiment("rssm", seed=3)
    cfgmod.save(cfg, tmp_path / "c.cfg")
    assert cfgmod.load(tmp_path / "c.cfg") == cfg


def test_config_errors_name_the_key():
    with pytest.raises(cfgmod.ConfigKeyError, match="world_model.nope"):
        cfgmod.from_text("world_model.nope=1\n")
    with pytest.raises(cfgmod.ConfigKeyError, match="replay"):
        cfgmod.from_text("replay=3\n")
    with pytest.raises(ValueError, match="agent.lr"):
        cfgmod.from_text("agent.lr=fast\n")
    with pytest.raises(ValueError, match="line 2"):
        cfgmod.from_text("# comment\nno equals sign\n")
    with pytest.raises(ValueError):
        cfgmod.from_text("world_model.transformer.n_heads=3\n")


def test_config_validation_cross_checks():
    cfg = cfgmod.RunConfig()
    cfg.world_model.d_obs = 9
    with pytest.raises(ValueError, match="d_obs"):
        cfg.validate()
    cfg = cfgmod.RunConfig()
    cfg.replay.horizon = 0
    with pytest.raises(ValueError, match="replay.horizon"):
        cfg.validate()


# ----------------------------------------------------------- training


def test_zero_steps_gives_header_only_metrics_and_checkpoint(tmp_path):
    last, ckpt, rows = harness.run_train(tiny_config(steps=0), tmp_path)
    assert last is None and rows == []
    assert (tmp_path / "metrics.csv").read_text() == ",".join(harness.METRIC_FIELDS) + "\n"
    assert ckpt.exists()


def test_same_seed_gives_byte_identical_metrics(tmp_path):
    harness.run_train(tiny_config(), tmp_path / "a")
    harness.run_train(tiny_config(), tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.tdv3").read_bytes() == (tmp_path / "b" / "checkpoint.tdv3").read_bytes()
    harness.run_train(tiny_config(seed=1), tmp_path / "c")
    assert a != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_metrics_rows_are_monotone_and_timed_separately(tmp_path):
    _, _, rows = harness.run_train(tiny_config(), tmp_path)
    header, values = plots.read_metrics(tmp_path / "metrics.csv")
    steps = [r[0] for r in values]
    assert steps == sorted(steps) and steps[-1] >= 60
    assert "wall_ms" not in header
    timing = (tmp_path / "timing.csv").read_text().splitlines()
    assert timing[0] == "env_step,wall_ms" and len(timing) == len(rows) + 1


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("TDV3_SEED", "1")
    harness.run_train(tiny_config(seed=0), tmp_path / "env")
    monkeypatch.delenv("TDV3_SEED")
    harness.run_train(tiny_config(seed=1), tmp_path / "direct")
    assert (tmp_path / "env" / "metrics.csv").read_bytes() == (tmp_path / "direct" / "metrics.csv").read_bytes()


@pytest.mark.parametrize("backbone", ["tssm", "rssm"])
def test_training_keeps_imagination_cap(tmp_path, backbone):
    counter = ImaginationCounter()
    harness.run_train(tiny_config(backbone), tmp_path, imagine_fn=counter)
    assert counter.calls
    assert all(mx == mn == 3 for _, _, mx, mn in counter.calls)
    assert counter.total_rollouts == 3 * counter.total_starts


# ------------------------------------------------------------ checkpoint


def random_store(seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("a.w", rng.standard_normal((3, 4)).astype(dtype))
    store.add("a.b", rng.standard_normal(4).astype(dtype))
    store.add("s", np.array(rng.standard_normal(), dtype=dtype))
    return store


def test_checkpoint_roundtrip_bitwise(tmp_path):
    store = random_store()
    checkpoint.checkpoint_save(store, tmp_path / "p.tdv3", "x=1\n")
    loaded = checkpoint.checkpoint_load(tmp_path / "p.tdv3")
    for name in store.names():
        assert loaded[name].data.tobytes() == store[name].data.tobytes()
        assert loaded[name].shape == store[name].shape
    into = random_store(seed=1)
    checkpoint.checkpoint_load(tmp_path / "p.tdv3", into=into)
    assert into.byte_hash() == store.byte_hash()
    assert checkpoint.read_checkpoint(tmp_path / "p.tdv3")[0] == "x=1\n"


def test_checkpoint_header_layout(tmp_path):
    checkpoint.checkpoint_save(random_store(), tmp_path / "p.tdv3", "k=v\n")
    raw = (tmp_path / "p.tdv3").read_bytes()
    assert raw[:4] == b"TDV3"
    assert struct.unpack("<II", raw[4:12]) == (1, 4)
    assert raw[12:16] == b"k=v\n"


def test_truncated_checkpoint_is_a_format_error(tmp_path):
    path = tmp_path / "p.tdv3"
    checkpoint.checkpoint_save(random_store(), path)
    raw = path.read_bytes()
    for cut in (2, 10, len(raw) - 3):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointFormatError):
            checkpoint.read_checkpoint(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "p.tdv3"
    checkpoint.checkpoint_save(random_store(), path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(CheckpointFormatError, match="magic"):
        checkpoint.read_checkpoint(path)
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        harness.evaluate(path, 1)


def test_rssm_checkpoint_into_tssm_names_first_tensor(tmp_path):
    rssm = harness.Agent(tiny_config("rssm"))
    checkpoint.checkpoint_save(rssm.store, tmp_path / "r.tdv3")
    tssm = harness.Agent(tiny_config("tssm"))
    with pytest.raises(DimensionError) as err:
        checkpoint.checkpoint_load(tmp_path / "r.tdv3", into=tssm.store)
    assert re.search(r"'[\w.]+'", str(err.value))


def test_checkpoint_write_failure_names_path(tmp_path):
    bad = tmp_path / "missing" / "p.tdv3"
    with pytest.raises(OSError, match="missing"):
        checkpoint.checkpoint_save(random_store(), bad)


# ------------------------------------------------------------ evaluate


def test_evaluate_rejects_zero_episodes(tmp_path):
    _, ckpt, _ = harness.run_train(tiny_config(steps=0), tmp_path)
    with pytest.raises(ValueError):
        harness.evaluate(ckpt, 0)


def test_evaluate_is_deterministic(tmp_path):
    _, ckpt, _ = harness.run_train(tiny_config(steps=0), tmp_path)
    assert harness.evaluate(ckpt, 10, seed=4) == harness.evaluate(ckpt, 10, seed=4)


def test_random_weights_score_the_random_baseline(tmp_path):
    # one random network is a fixed cue->action map; pooled over inits the
    # greedy return is the uniform-guess baseline
    cfg = cfgmod.memory_experiment("tssm", delay=4, total_env_steps=0)
    cfg.world_model.d_model = cfg.world_model.transformer.d_model = 16
    cfg.world_model.d_embed = cfg.world_model.hidden = cfg.agent.hidden = 16
    cfg.world_model.transformer.d_ff = 32
    returns = []
    for seed in range(12):
        cfg.schedule = dataclasses.replace(cfg.schedule, seed=seed)
        _, ckpt, _ = harness.run_train(cfg, tmp_path / str(seed))
        mean, (lo, hi) = harness.evaluate(ckpt, 50, seed=seed)
        assert lo <= mean <= hi
        returns.append(mean)
    pooled = np.mean(returns)
    assert abs(pooled - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / (12 * 50)) + 3 * np.std(returns) / np.sqrt(12)


# --------------------------------------------------------------- plots


def write_csv(path, rows, header=("env_step", "episode_return_mean")):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


def polylines(svg):
    return re.findall(r'<polyline class="series" data-label="([^"]*)"[^>]*? points="([^"]*)"', svg)


def test_empty_csv_plot_has_axes_and_no_points(tmp_path):
    csv_path = write_csv(tmp_path / "run" / "metrics.csv", [])
    (out,) = plots.emit_plots([csv_path], tmp_path / "plots")
    svg = out.read_text()
    assert '<g class="axes"' in svg
    assert all(points.strip() == "" for _, points in polylines(svg))


def test_two_csvs_give_two_legend_labels(tmp_path):
    a = write_csv(tmp_path / "alpha" / "metrics.csv", [(0, 0.1), (10, 0.2)])
    b = write_csv(tmp_path / "beta" / "metrics.csv", [(0, 0.3), (10, 0.1)])
    (out,) = plots.emit_plots([a, b], tmp_path / "plots")
    svg = out.read_text()
    legend = svg[svg.index('<g class="legend">') :]
    assert "alpha" in legend and "beta" in legend
    assert [label for label, _ in polylines(svg)] == ["alpha", "beta"]
    (out,) = plots.emit_plots([a, b], tmp_path / "p2", labels=["x", "y"])
    assert [label for label, _ in polylines(out.read_text())] == ["x", "y"]


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=30, unique=True))
def test_monotone_series_parses_back_monotone(values):
    import tempfile
    from pathlib import Path

    ys = sorted(values)
    with tempfile.TemporaryDirectory() as d:
        path = write_csv(Path(d) / "run" / "metrics.csv", [(i * 100, y) for i, y in enumerate(ys)])
        (out,) = plots.emit_plots([path], Path(d) / "plots")
        ((_, points),) = polylines(out.read_text())
    coords = [tuple(map(float, p.split(","))) for p in points.split()]
    assert len(coords) == len(ys)
    xs, svg_ys = zip(*coords)
    assert all(b > a for a, b in zip(xs, xs[1:]))
    # svg y grows downwards
    assert all(b <= a for a, b in zip(svg_ys, svg_ys[1:]))


def test_one_svg_per_metric(tmp_path):
    path = write_csv(tmp_path / "r" / "metrics.csv", [(0, 1, 2)], header=("env_step", "a", "b"))
    outs = plots.emit_plots([path], tmp_path / "plots")
    assert sorted(p.name for p in outs) == ["a.svg", "b.svg"]


@pytest.mark.parametrize(
    "text,lineno",
    [("env_step,x\n0,1\n5\n", 3), ("env_step,x\n0,abc\n", 2), ("", 1), ("step,x\n", 1)],
)
def test_malformed_csv_reports_line(tmp_path, text, lineno):
    path = tmp_path / "m.csv"
    path.write_text(text)
    with pytest.raises(plots.MetricsFormatError, match=f"m.csv:{lineno}:"):
        plots.read_metrics(path)


# ----------------------------------------------------------------- cli


def test_cli_train_eval_plot(tmp_path, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfgmod.save(tiny_config(steps=40), cfg_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(out), "--set", "schedule.eval_episodes=2"]) == 0
    assert "checkpoint:" in capsys.readouterr().out
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.tdv3"), "--episodes", "3"]) == 0
    assert "mean return" in capsys.readouterr().out
    assert cli.main(["plot", "--in", str(out / "metrics.csv"), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "episode_return_mean.svg").exists()


def test_cli_errors_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path), "--set", "bogus.key=1"]) == 2
    assert "bogus.key" in capsys.readouterr().err
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.tdv3"), "--episodes", "1"]) == 2


def test_cli_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 4
