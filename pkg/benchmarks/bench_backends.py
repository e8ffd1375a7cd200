"""Throughput of the step kernels: numba vs numpy, and numba thread scaling.

Surface-site updates per second = surface sites evaluated per step / step wall time,
measured on a blanket-open (100) wafer after a short warm-up.

    python benchmarks/bench_backends.py --cells 128 --steps 20 --threads 1 4
"""
import argparse
import json
import os
import time

import numpy as np

from etchsim import _accel, engine, rules
from etchsim.lattice import Face

FACES = (Face.PERIODIC,) * 4 + (Face.SOLID, Face.EXPOSED)
RATES = {"100": 1.0, "110": 2.0, "111": 1.0 / 200.0}


def measure(cells, steps, backend, threads=None, warmup=3, seed=0):
    probs, dt = rules.rates_to_probabilities(RATES)
    spec = engine.StepSpec(rules.RuleTable(probabilities=probs), dt)
    st = engine.init((cells, cells, cells), 1.0, seed=seed, faces=FACES, backend=backend)
    with engine.kernel_threads(threads):
        for _ in range(warmup):
            engine.step_once(st, spec)
        updates = 0
        t0 = time.perf_counter()
        for _ in range(steps):
            updates += st.surface.size
            engine.step_once(st, spec)
        wall = time.perf_counter() - t0
    digest = int(np.bitwise_xor.reduce(np.flatnonzero(st.grid.states == 0))) if st.removed_count else 0
    return {"backend": backend, "threads": threads, "cells": cells, "steps": steps, "wall_s": wall,
            "updates": updates, "updates_per_s": updates / wall, "removed": st.removed_count, "digest": digest}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cells", type=int, default=128)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--threads", type=int, nargs="*", default=[1, 4])
    ap.add_argument("--numpy-cells", type=int, default=64, help="domain for the slower numpy backend")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args()

    results = []
    if _accel.HAVE_NUMBA:
        for t in args.threads:
            results.append(measure(args.cells, args.steps, "numba", t))
    results.append(measure(args.numpy_cells, args.steps, "numpy"))
    if _accel.HAVE_NUMBA:
        results.append(measure(args.numpy_cells, args.steps, "numba", 1))

    print(f"cpus available: {os.cpu_count()}")
    print(f"{'backend':8} {'threads':>7} {'cells':>6} {'wall s':>8} {'updates/s':>12} {'removed':>10}")
    for r in results:
        print(f"{r['backend']:8} {str(r['threads']):>7} {r['cells']:>6} {r['wall_s']:8.3f} "
              f"{r['updates_per_s']:12.3e} {r['removed']:>10}")
    nb = [r for r in results if r["backend"] == "numba" and r["cells"] == args.cells]
    if len(nb) > 1:
        base = nb[0]["wall_s"]
        for r in nb[1:]:
            same = r["digest"] == nb[0]["digest"] and r["removed"] == nb[0]["removed"]
            print(f"speedup {r['threads']} threads vs {nb[0]['threads']}: {base / r['wall_s']:.2f}x "
                  f"(identical output: {same})")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
