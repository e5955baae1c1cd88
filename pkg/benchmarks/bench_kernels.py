"""Time the numba and numpy path-integration kernels on the same workload.

    python benchmarks/bench_kernels.py [--shots 4096] [--steps 100] [--repeat 3]

Both backends are called explicitly in one process, so ISOKANN_BACKEND does
not matter here. The first numba call (compilation, or cache load) is
excluded from the timings.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from isokann import _backend, kernels
from isokann.koopman import ShiftScaleParams
from isokann.model import init_model
from isokann.rng import stream_keys
from isokann.sampling import ConstantControl, optimal_control_from_chi
from isokann.sde import catalog_potential


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shots", type=int, default=4096)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--system", default="doublewell1d")
    args = ap.parse_args(argv)
    if not _backend.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    s = catalog_potential(args.system)
    x0s = np.random.default_rng(0).uniform(-1.5, 1.5, size=(args.shots, s.dim))
    keys = stream_keys(0, np.arange(args.shots), 0)
    chi = init_model((s.dim, 16, 16, 1), 0)
    controls = {
        "zero": None,
        "constant": ConstantControl(np.full(s.dim, 0.3)).packed(s.dim),
        "chi": optimal_control_from_chi(chi, ShiftScaleParams(0.7, 0.1, 1.0), s.sigma).packed(s.dim),
    }
    print(f"{args.system}: {args.shots} shots x {args.steps} steps, "
          f"{_backend.get_threads()} numba thread(s), best of {args.repeat}")
    print(f"{'control':<10}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, pc in controls.items():
        def run(backend):
            return kernels.simulate_batch(x0s, keys, 0.01, args.steps, s.sigma, s.kind, pc,
                                          backend=backend)
        fast = run("numba")  # warm-up / compile
        slow = run("numpy")
        diff = float(np.max(np.abs(fast[0] - slow[0])))
        t_nb = best_of(lambda: run("numba"), args.repeat)
        t_np = best_of(lambda: run("numpy"), args.repeat)
        print(f"{name:<10}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>9.1f}x{diff:>14.2e}")


if __name__ == "__main__":
    main()
