"""Compare the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

vol2col is shared by both backends (numpy's strided copy wins), so it is
not listed.  Kernel timings call both implementations in-process.  The end-to-end row
runs one training step of the toy network in a subprocess per backend, since
the backend is chosen at import time from NUTA_DISABLE_NUMBA.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from nuta import _accel

STEP = """
import time, numpy as np
from nuta.network import NetworkConfig, TwoBranchNet
from nuta.tensor import Tensor
from nuta.nn import cross_entropy
net = TwoBranchNet(NetworkConfig.toy(), np.random.default_rng(0), dtype=np.float32)
x = Tensor(np.random.default_rng(1).random((16, 3, 8, 32, 32)).astype(np.float32))
y = np.arange(16) % 8
best = 1e9
for _ in range({repeat}):
    t = time.perf_counter()
    cross_entropy(net.forward(x, train_mode=True, rng=np.random.default_rng(2)), y).backward()
    best = min(best, time.perf_counter() - t)
print(best)
"""


def best_of(fn, repeat):
    fn()  # warm-up (and numba compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(rng):
    xp = rng.standard_normal((16, 32, 10, 18, 18)).astype(np.float32)
    cols = _accel.vol2col_numpy(xp, (3, 3, 3), (1, 1, 1), (8, 16, 16))
    x = rng.standard_normal((16, 64, 8, 16, 16)).astype(np.float32)
    _, pick = _accel.tmax2_forward_numpy(x)
    grad = rng.standard_normal(pick.shape).astype(np.float32)
    return {
        "col2vol 3x3x3": lambda impl: impl.col2vol(cols, xp.shape, (1, 1, 1)),
        "tmax2 forward": lambda impl: impl.tmax2_forward(x),
        "tmax2 backward": lambda impl: impl.tmax2_backward(grad, pick),
    }


class _Impl:
    def __init__(self, suffix):
        for name in ("vol2col", "col2vol", "tmax2_forward", "tmax2_backward"):
            setattr(self, name, getattr(_accel, f"{name}_{suffix}"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-step", action="store_true", help="kernels only")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    impls = {"numpy": _Impl("numpy"), "numba": _Impl("numba")}
    print(f"{'case':20s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, case in kernel_cases(rng).items():
        t = {k: best_of(lambda: case(v), args.repeat) for k, v in impls.items()}
        print(f"{name:20s} {t['numpy'] * 1e3:10.2f} {t['numba'] * 1e3:10.2f} {t['numpy'] / t['numba']:8.2f}x")
    if not args.skip_step:
        t = {}
        for backend, flag in (("numpy", "1"), ("numba", "0")):
            env = dict(os.environ, NUTA_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", STEP.format(repeat=args.repeat)], env=env,
                                 capture_output=True, text=True, check=True)
            t[backend] = float(out.stdout.split()[-1])
        print(f"{'toy train step b16':20s} {t['numpy'] * 1e3:10.2f} {t['numba'] * 1e3:10.2f} "
              f"{t['numpy'] / t['numba']:8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
