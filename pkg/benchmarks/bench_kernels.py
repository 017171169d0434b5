"""Time the numba interval kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--sizes 50,200,1000] [--repeat 5]

The first numba call compiles; it is timed separately and excluded from the
per-call numbers.
"""

import argparse
import time

import numpy as np

from ecvt import _kernels as k


def _intervals(rng, n):
    s = rng.uniform(0, 500, n)
    return np.stack([s, s + rng.uniform(0.5, 20, n)], axis=1)


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def workloads(n, rng):
    pred, gt = _intervals(rng, n), _intervals(rng, max(n // 4, 1))
    labels = rng.integers(1, 6, n)
    order = np.argsort(-rng.uniform(size=n), kind="stable")
    pv, gv = rng.integers(0, 10, n), rng.integers(0, 10, len(gt))
    tp = rng.uniform(size=n) < 0.4
    return {
        "tiou_matrix": (lambda: k.tiou_matrix_np(pred, gt), lambda: k._tiou_matrix_nb_wrapped(pred, gt)),
        "nms": (lambda: k.nms_np(pred, labels, order, 0.5), lambda: k.nms_nb(pred, labels, order, 0.5)),
        "greedy_match": (lambda: k.greedy_match_np(pred, pv, gt, gv, 0.5),
                         lambda: k.greedy_match_nb(pred, pv, gt, gv, 0.5)),
        "interpolated_ap": (lambda: k.interpolated_ap_np(tp, len(gt)), lambda: k.interpolated_ap_nb(tp, len(gt))),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="50,200,1000")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for _, nb in workloads(8, rng).values():
        nb()
    print(f"numba compile (all kernels): {time.perf_counter() - t0:.2f}s\n")

    print(f"{'kernel':<16} {'n':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, (np_fn, nb_fn) in workloads(n, rng).items():
            a, b = _best(np_fn, args.repeat), _best(nb_fn, args.repeat)
            print(f"{name:<16} {n:>6} {a * 1e3:>10.3f} {b * 1e3:>10.3f} {a / b:>7.1f}x")


if __name__ == "__main__":
    main()
