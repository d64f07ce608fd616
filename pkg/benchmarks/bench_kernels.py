"""Timing comparison of the conv2d kernels: numba JIT vs pure numpy.

The active path is chosen at import time from the ``SMARTFREEZE_NUMBA``
environment variable, so each path runs in its own subprocess and the
parent collects and tabulates the results.

Usage::

    python3 benchmarks/bench_kernels.py            # run both paths
    python3 benchmarks/bench_kernels.py --worker   # internal: one path
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

CASES = [
    # (label, batch, c_in, c_out, hw, k, stride, pad)
    ("small   8x8", 32, 8, 16, 8, 3, 1, 1),
    ("medium 16x16", 32, 16, 32, 16, 3, 1, 1),
    ("large  32x32", 16, 32, 64, 32, 3, 1, 1),
]
REPEATS = 5


def bench_one(batch, c_in, c_out, hw, k, stride, pad):
    from smartfreeze import kernels

    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, c_in, hw, hw))
    w = rng.normal(size=(c_out, c_in, k, k))
    b = rng.normal(size=c_out)
    # Warm-up triggers JIT compilation so it is not timed below.
    y, xp = kernels.conv2d_forward(x, w, b, stride, pad)
    kernels.conv2d_backward(xp, w, y, stride, pad)

    fwd = []
    bwd = []
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        y, xp = kernels.conv2d_forward(x, w, b, stride, pad)
        t1 = time.perf_counter()
        kernels.conv2d_backward(xp, w, y, stride, pad)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    return min(fwd), min(bwd)


def worker():
    from smartfreeze import kernels

    out = {"numba": kernels.HAS_NUMBA, "cases": []}
    for label, *shape in CASES:
        f, b = bench_one(*shape)
        out["cases"].append({"label": label, "forward_s": f, "backward_s": b})
    json.dump(out, sys.stdout)


def main():
    results = {}
    for flag, name in (("1", "numba"), ("0", "numpy")):
        env = dict(os.environ, SMARTFREEZE_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, __file__, "--worker"],
            capture_output=True, text=True, env=env, check=True,
        )
        results[name] = json.loads(proc.stdout)

    if not results["numba"]["numba"]:
        print("note: numba unavailable; both columns use the numpy path")

    hdr = f"{'case':<14} {'path':<6} {'forward':>10} {'backward':>10} {'speedup':>9}"
    print(hdr)
    print("-" * len(hdr))
    for i, (label, *_) in enumerate(CASES):
        np_case = results["numpy"]["cases"][i]
        nb_case = results["numba"]["cases"][i]
        for name, case in (("numpy", np_case), ("numba", nb_case)):
            total_np = np_case["forward_s"] + np_case["backward_s"]
            total = case["forward_s"] + case["backward_s"]
            print(f"{label:<14} {name:<6} {case['forward_s']*1e3:9.2f}ms "
                  f"{case['backward_s']*1e3:9.2f}ms {total_np / total:8.2f}x")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    worker() if args.worker else main()
