"""Time the hot kernels under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--reps 30] [--batch 64] [--json out.json]

Each row is the median wall time over ``--reps`` calls after a warmup call
(which also absorbs numba compilation). Outputs of the two backends are
compared before timing so a fast wrong kernel cannot win.
"""

import argparse
import json
import statistics
import time

import numpy as np

from branchnet import kernels, ops
from branchnet.core import BranchedModel
from branchnet.layers import build_preact_resnet
from branchnet.tensor import Tensor, reset_graph
from branchnet.transforms import rotation_affine, warp_table


def _median_ms(fn, reps):
    fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(1000.0 * (time.perf_counter() - t0))
    return statistics.median(samples)


def kernel_cases(batch, rng):
    x = rng.standard_normal((batch, 34, 34, 16)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1)
    pool_in = rng.standard_normal((batch, 33, 33, 16)).astype(np.float32)
    _, arg = kernels.maxpool_forward(pool_in, 3, 2)
    pool_grad = rng.standard_normal(arg.shape).astype(np.float32)
    fmap = rng.standard_normal((batch, 16, 16, 32)).astype(np.float32)
    table = warp_table(16, 16, rotation_affine(15.0))
    return {
        "im2col 3x3": lambda: kernels.im2col(x, 3, 3, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, x.shape, 3, 3, 1),
        "maxpool fwd": lambda: kernels.maxpool_forward(pool_in, 3, 2),
        "maxpool bwd": lambda: kernels.maxpool_backward(pool_grad, arg, pool_in.shape, 3, 2),
        "warp fwd": lambda: kernels.warp_forward(fmap, table),
        "warp bwd": lambda: kernels.warp_backward(fmap, table),
    }


def train_step_case(batch, rng):
    blocks, head = build_preact_resnet(3, 10, seed=0)
    model = BranchedModel(blocks, head)
    x = Tensor(rng.standard_normal((batch, 32, 32, 3)).astype(np.float32))

    def step():
        reset_graph()
        model.train()
        out = model.forward(x)
        ops.sum_all(out).backward()

    return step


def _as_tuple(v):
    return v if isinstance(v, tuple) else (v,)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--reps", type=int, default=30)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])
    results = {}
    for backend in backends:
        with kernels.using(backend):
            cases = kernel_cases(args.batch, np.random.default_rng(0))
            cases["ResNet-20 train step"] = train_step_case(args.batch, np.random.default_rng(0))
            results[backend] = {name: _median_ms(fn, args.reps) for name, fn in cases.items()}

    if len(backends) == 2:
        ref = kernel_cases(args.batch, np.random.default_rng(0))
        for name, fn in ref.items():
            with kernels.using("numpy"):
                a = _as_tuple(fn())
            with kernels.using("numba"):
                b = _as_tuple(fn())
            for u, v in zip(a, b):
                if not np.allclose(u, v, atol=1e-5):
                    raise SystemExit(f"backends disagree on {name}")

    names = list(results[backends[0]])
    print(f"{'kernel':24s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name in names:
        row = f"{name:24s}" + "".join(f"{results[b][name]:10.2f}ms" for b in backends)
        if len(backends) == 2:
            row += f"  {results['numpy'][name] / results['numba'][name]:9.2f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"batch": args.batch, "reps": args.reps, "median_ms": results}, fh, indent=2)


if __name__ == "__main__":
    main()
