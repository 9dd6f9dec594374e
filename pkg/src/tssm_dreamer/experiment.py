"""Delayed-recall comparison of the three backbones over several seeds."""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import harness, plots

VARIANTS = {
    "tssm_causal": ("tssm", 0),
    "tssm_window1": ("tssm", 1),
    "rssm": ("rssm", 0),
}


@dataclass
class ComparisonSummary:
    final_returns: dict = field(default_factory=dict)  # variant -> [return per seed]
    runtime_s: dict = field(default_factory=dict)  # variant -> [seconds per seed]
    plots: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)  # variant -> (env_steps, seed-mean returns)

    def mean(self, variant):
        return float(np.mean(self.final_returns[variant]))

    def peak(self, variant):
        """Best seed-mean eval return reached at any eval point."""
        return float(np.max(self.curves[variant][1]))

    @property
    def total_runtime_s(self):
        return float(sum(sum(v) for v in self.runtime_s.values()))

    def table(self):
        lines = [f"{'variant':<14}{'peak':>7}{'final':>7}  per-seed final return"]
        for name, rets in self.final_returns.items():
            per = " ".join(f"{r:.3f}" for r in rets)
            peak = self.peak(name) if name in self.curves else float("nan")
            lines.append(f"{name:<14}{peak:>7.3f}{self.mean(name):>7.3f}  {per}")
        lines.append(f"total runtime {self.total_runtime_s:.0f} s")
        return "\n".join(lines)


def mean_curve(csv_paths, out_path):
    """Average metrics CSVs row by row; all inputs must share env_step columns."""
    tables = [plots.read_metrics(p) for p in csv_paths]
    header = tables[0][0]
    n = min(len(rows) for _, rows in tables)
    steps = [[r[0] for r in rows[:n]] for _, rows in tables]
    if any(s != steps[0] for s in steps):
        raise ValueError("seed runs disagree on eval env_steps; cannot average")
    data = np.array([rows[:n] for _, rows in tables], dtype=np.float64).reshape(len(tables), n, -1)
    avg = data.mean(axis=0)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in avg:
            w.writerow([str(int(row[0]))] + [f"{v:.9g}" for v in row[1:]])
    return Path(out_path)


def memory_comparison(out_dir, seeds=(0, 1, 2), total_env_steps=50_000, delay=16, variants=None, tweak=None):
    """Train every variant for every seed, then emit overlay plots.

    ``tweak(config)`` may adjust each RunConfig before training. Writes
    ``<out>/<variant>/seed<k>/`` runs, ``<out>/<variant>.csv`` seed means and
    ``<out>/plots/*.svg`` overlaying the variants.
    """
    out = Path(out_dir)
    names = list(variants or VARIANTS)
    summary = ComparisonSummary()
    mean_csvs = []
    for name in names:
        backbone, window = VARIANTS[name]
        csvs = []
        for seed in seeds:
            cfg = cfgmod.memory_experiment(backbone, window, seed, delay, total_env_steps)
            if tweak is not None:
                tweak(cfg)
            run_dir = out / name / f"seed{seed}"
            start = time.perf_counter()
            last, _, _ = harness.Trainer(cfg, run_dir).run()
            summary.runtime_s.setdefault(name, []).append(time.perf_counter() - start)
            ret = last.episode_return_mean if last is not None else float("nan")
            summary.final_returns.setdefault(name, []).append(ret)
            csvs.append(run_dir / "metrics.csv")
        mean_csvs.append(mean_curve(csvs, out / f"{name}.csv"))
        _, rows = plots.read_metrics(mean_csvs[-1])
        summary.curves[name] = ([int(r[0]) for r in rows], [r[1] for r in rows])
    summary.plots = plots.emit_plots(mean_csvs, out / "plots")
    return summary
