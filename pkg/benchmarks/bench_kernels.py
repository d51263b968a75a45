"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py --points 40 --repeat 200
"""
import argparse
import importlib
import os
import subprocess
import sys
import time

import numpy as np

from ctxmono3d import _kernels_py


def _time(fn, repeat):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat


def cases(k, pts, counts, grads):
    return {
        "neighborhood_counts": lambda: k.neighborhood_counts(pts, 0.2),
        "loss3d": lambda: k.loss3d(pts, counts, 0.3, 20.0, 0.4, 2.0, 0.8, 0.0, 0.0, 0.1),
        "min_norm_hull": lambda: k.min_norm_hull(grads, 100),
    }


FIT_SNIPPET = """
import time
from ctxmono3d._backend import BACKEND
from ctxmono3d.synth_eval import recovery_trial
t = time.perf_counter()
ok = sum(recovery_trial(k).success for k in range({n}))
print(BACKEND, ok, time.perf_counter() - t)
"""


def time_fits(n):
    """End-to-end recovery fits under each backend, in fresh interpreters."""
    for pure in ("0", "1"):
        env = dict(os.environ, CTXMONO3D_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET.format(n=n)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"fit x{n:<4} backend={out[0]:<7} successes={out[1]:<4} seconds={float(out[2]):.2f}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fits", type=int, default=0, help="also time this many recovery fits per backend")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    pts = np.column_stack([rng.uniform(-2, 2, args.points), rng.uniform(18, 22, args.points)])
    counts = _kernels_py.neighborhood_counts(pts, 0.2)
    grads = rng.normal(size=(16, 3))
    try:
        compiled = importlib.import_module("ctxmono3d._kernels")
    except ImportError:
        compiled = None
        print("compiled extension not built; timing the Python fallback only")

    py = cases(_kernels_py, pts, counts, grads)
    cy = cases(compiled, pts, counts, grads) if compiled else {}
    print(f"{'kernel':<22}{'python (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    for name, fn in py.items():
        tp = _time(fn, args.repeat) * 1e6
        if name in cy:
            tc = _time(cy[name], args.repeat) * 1e6
            print(f"{name:<22}{tp:>14.1f}{tc:>14.1f}{tp / tc:>10.1f}")
        else:
            print(f"{name:<22}{tp:>14.1f}{'-':>14}{'-':>10}")
    if args.fits:
        time_fits(args.fits)


if __name__ == "__main__":
    main()
