"""Time the joint log-posterior and gradient under both kernel backends.

Run ``python benchmarks/bench_kernels.py``. The compiled loop kernel is timed
after one warm-up call so JIT compilation is excluded. With
``HETJM_DISABLE_NUMBA=1`` the loop kernel runs as plain Python, which shows
why the vectorised fallback exists.
"""

import argparse
import time

import numpy as np

from hetjm import BACKEND
from hetjm.inference import JointPosterior, initial_point
from hetjm.model import TreatmentParams
from hetjm.simulate import reference_design, simulate_cohort


def time_call(fn, x, min_time=0.5):
    fn(x)
    n, elapsed = 0, 0.0
    start = time.perf_counter()
    while elapsed < min_time:
        fn(x)
        n += 1
        elapsed = time.perf_counter() - start
    return elapsed / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[10, 100, 500])
    ap.add_argument("--min-time", type=float, default=0.5)
    args = ap.parse_args()

    print(f"active backend: {BACKEND}")
    print(f"{'N':>6} {'obs':>7} {'loop (us)':>12} {'numpy (us)':>12} {'speedup':>8} {'max |dgrad|':>12}")
    for n in args.sizes:
        cfg = reference_design(n_subjects=n, seed=1, alpha=TreatmentParams(-2.29, 0.05))
        data = simulate_cohort(cfg)
        loop = JointPosterior(data, backend="numba")
        vec = JointPosterior(data, backend="numpy")
        x = initial_point(data, loop.prior, np.random.default_rng(0))
        diff = np.max(np.abs(loop(x)[1] - vec(x)[1]))
        t_loop = time_call(loop, x, args.min_time)
        t_vec = time_call(vec, x, args.min_time)
        n_obs = sum(s.n_obs for s in data)
        print(f"{len(data):>6} {n_obs:>7} {t_loop * 1e6:>12.1f} {t_vec * 1e6:>12.1f} {t_vec / t_loop:>8.1f} {diff:>12.2e}")


if __name__ == "__main__":
    main()
