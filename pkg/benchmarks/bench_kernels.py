"""Compare the numba and numpy kernel paths.

Kernel timings use the sizes the demos hit: V = 2CQ = 512 bits for SSA,
V = KCQ = 1024 for TSA, 120 auxiliary samples with 32 features.
The end-to-end run solves one SSA problem in a fresh interpreter per
backend, since the backend is fixed at import time.

    python benchmarks/bench_kernels.py [--repeat N] [--skip-solve]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bitflip import _kernels

SOLVE_SNIPPET = """
import time
from bitflip import _kernels
from bitflip.attacks import SsaProblem
from bitflip.datagen import generate_blobs, split_dataset
from bitflip.lpbox import AdmmConfig, admm_solve
from bitflip.netcore import train_model

train, aux, val = split_dataset(generate_blobs())
net = train_model(train)
prob = SsaProblem(net, val.X[-1], int(val.y[-1]), (int(val.y[-1]) + 1) % 4, aux)
cfg = AdmmConfig.ssa_defaults(eta=1e-3, lambda2=1.0)
admm_solve(prob.b, None, cfg, prob.callbacks())  # warm-up (JIT compile / cache load)
t = time.perf_counter()
res = admm_solve(prob.b, None, cfg, prob.callbacks())
print(_kernels.BACKEND, res.iterations, time.perf_counter() - t)
"""


def kernel_cases(rng):
    cases = {}
    for V in (512, 1024):
        bh = rng.uniform(-0.2, 1.2, V)
        b = rng.integers(0, 2, V).astype(np.float64)
        z1, z2 = rng.standard_normal(V), rng.standard_normal(V)
        lg = rng.standard_normal(V)
        u1, u2 = rng.uniform(0, 1, V), rng.uniform(0, 1, V)
        full = (bh, b, u1, u2, 0.5, z1, z2, 0.1, 1.0, 1.0, 0.1, 5.0)
        cases[f"project_sphere V={V}"] = ("project_sphere", (bh,))
        cases[f"aux_update V={V}"] = ("aux_update", (bh, b, z1, z2, 0.1, 1.0, 1.0, 0.1, 5.0))
        cases[f"lagrangian_grad V={V}"] = ("lagrangian_grad", full + (lg,))
        cases[f"dual_update V={V}"] = ("dual_update", full)
    feats = np.abs(rng.standard_normal((120, 32)))
    W = rng.standard_normal((4, 32))
    bias = rng.standard_normal(4)
    labels = rng.integers(0, 4, 120).astype(np.int64)
    cases["ce_rows_grad N=120 rows=2"] = ("ce_rows_grad", (feats, W, bias, labels, np.array([1, 3], dtype=np.int64)))
    cases["ce_rows_grad N=120 rows=4"] = ("ce_rows_grad", (feats, W, bias, labels, np.arange(4, dtype=np.int64)))
    return cases


def bench_kernels(repeat: int) -> None:
    if not _kernels.HAS_NUMBA:
        print("numba is not installed; only the numpy path exists")
        return
    tables = {name: _kernels.kernels(name) for name in ("numba", "numpy")}
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':32s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for label, (name, args) in cases.items():
        per = {}
        for backend, table in tables.items():
            fn = table[name]
            fn(*args)  # compile outside the timed region
            n = 2000
            per[backend] = min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n * 1e6
        print(f"{label:32s} {per['numba']:10.2f} {per['numpy']:10.2f} {per['numpy'] / per['numba']:7.2f}x")


def bench_solve() -> None:
    print("\nend-to-end SSA solve (one admm_solve after warm-up)")
    for flag in ("0", "1"):
        env = dict(os.environ, BITFLIP_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", SOLVE_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, iters, secs = out.stdout.split()
        print(f"  {backend:6s} {int(iters):5d} iterations  {float(secs):7.3f} s  ({float(secs) / int(iters) * 1e3:.3f} ms/iter)")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-solve", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.skip_solve:
        bench_solve()


if __name__ == "__main__":
    main()
