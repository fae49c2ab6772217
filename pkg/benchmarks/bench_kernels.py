"""Compare the compiled activation kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 256] [--cols 64] [--number 200]

Also times one checkpointed Langevin gradient under each backend by running
this script's ``--gradient`` mode in a subprocess with ``PURIGRAD_PURE_PYTHON``
set or unset, since the backend is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import time


def gradient_timing(repeats: int) -> dict:
    import numpy as np

    from purigrad.autodiff import kernels
    from purigrad.bench import BenchModels, build_bench_purifier
    from purigrad.checkpoint import checkpointed_grad

    models = BenchModels.random(0, batch=256)
    purifier = build_bench_purifier("langevin", 20, models)
    noises = purifier.draw_noise(np.random.default_rng(0), models.inputs.shape)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        checkpointed_grad(models.inputs, purifier, models.classifier, models.labels, noises=noises)
        times.append(time.perf_counter() - t0)
    return {"backend": kernels.BACKEND, "median_ms": float(np.median(times) * 1e3)}


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--number", type=int, default=200)
    p.add_argument("--gradient", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args()
    if args.gradient:
        print(json.dumps(gradient_timing(5)))
        return

    from purigrad.bench import bench_kernels

    print(f"{'kernel':24s} {'numpy (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for row in bench_kernels((args.rows, args.cols), args.number):
        cy = row["cython_us"]
        speed = f"{row['python_us'] / cy:8.2f}" if cy else "     n/a"
        cy_s = f"{cy:12.1f}" if cy else "     not built"
        print(f"{row['kernel']:24s} {row['python_us']:12.1f} {cy_s} {speed}")

    print("\ncheckpointed Langevin gradient (batch 256, K=20):")
    for pure in ("1", ""):
        env = dict(os.environ, PURIGRAD_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, __file__, "--gradient"], env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(out.stderr)
            continue
        res = json.loads(out.stdout)
        print(f"  {res['backend']:8s} {res['median_ms']:8.1f} ms")


if __name__ == "__main__":
    main()
