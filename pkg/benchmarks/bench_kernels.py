"""Compare the numba kernels against their numpy fallbacks.

Shapes match a default training step (batch 16 x segment 18, imagination
of 192 rollouts). Each kernel is warmed up once so JIT compilation is not
timed, outputs of both paths are checked for agreement, then timed with
timeit.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 50]
"""

import argparse
import timeit

import numpy as np

from tssm_dreamer import kernels


def cases(rng):
    n, t, h, d = 16, 18, 2, 32
    q = rng.standard_normal((n, t, h, d))
    k = rng.standard_normal((n, t, h, d))
    v = rng.standard_normal((n, t, h, d))
    lo = np.zeros((n, t), dtype=np.int64)
    hi = np.tile(np.arange(1, t + 1), (n, 1))
    scale = 1.0 / np.sqrt(d)
    _, probs = kernels.NUMPY_KERNELS["range_attention_fwd"](q, k, v, lo, hi, scale)
    gout = rng.standard_normal(q.shape)
    x = rng.standard_normal((n * t, 64))
    gamma, beta = rng.standard_normal(64), rng.standard_normal(64)
    _, xhat, rstd = kernels.NUMPY_KERNELS["layer_norm_fwd"](x, gamma, beta, 1e-5)
    bins = np.linspace(-3.0, 3.0, 41)
    rew = rng.standard_normal((192, 15))
    val = rng.standard_normal((192, 16))
    cont = (rng.random((192, 15)) > 0.05).astype(np.float64)
    probs2 = kernels.NUMPY_KERNELS["softmax_rows"](rng.standard_normal((192, 4)))
    return {
        "layer_norm_fwd": (x, gamma, beta, 1e-5),
        "layer_norm_bwd": (rng.standard_normal(x.shape), xhat, rstd, gamma),
        "softmax_rows": (rng.standard_normal((n * t, 41)),),
        "log_softmax_rows": (rng.standard_normal((n * t, 41)),),
        "range_attention_fwd": (q, k, v, lo, hi, scale),
        "range_attention_bwd": (gout, q, k, v, probs, scale, lo, hi),
        "twohot": (rng.uniform(-3, 3, n * t), bins),
        "lambda_returns": (rew, val, cont, 0.997, 0.95),
        "categorical": (probs2, rng.random(192)),
    }


def _flatten(out):
    return out if isinstance(out, tuple) else (out,)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=50)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'max diff':>12}")
    for name, inputs in cases(rng).items():
        f_np, f_nb = kernels.NUMPY_KERNELS[name], kernels.NUMBA_KERNELS[name]
        a, b = _flatten(f_np(*inputs)), _flatten(f_nb(*inputs))
        diff = max(float(np.max(np.abs(np.asarray(x, float) - np.asarray(y, float)))) for x, y in zip(a, b))
        t_np = min(timeit.repeat(lambda: f_np(*inputs), repeat=args.repeat, number=args.number))
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), repeat=args.repeat, number=args.number))
        us_np, us_nb = 1e6 * t_np / args.number, 1e6 * t_nb / args.number
        print(f"{name:<22}{us_np:>12.1f}{us_nb:>12.1f}{us_np / us_nb:>9.2f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
