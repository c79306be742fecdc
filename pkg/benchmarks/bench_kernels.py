"""Time the numba kernels against the numpy fallback.

Inputs are the compiled meta-path operators of the standard synthetic
fixture (plus a larger random pattern), so sizes match real training. Each
kernel is checked for agreement before it is timed. The last block times a
full training epoch in a subprocess per backend, since the dispatch is fixed
at import time by HGEN_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py [--repeats 20] [--n 600] [--no-epoch]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hgen import compile_all, generate_synthetic, standard_fixture_spec
from hgen import kernels

EPOCH_SNIPPET = """
import time
from hgen import ModelConfig, TrainConfig, build_model, generate_synthetic, standard_fixture_spec
from hgen.ensemble import make_optimizer, train_step
from hgen.layers import AlleleConfig
g = generate_synthetic(standard_fixture_spec(seed=0, num_target_nodes={n}))
for bb in ("gcn", "sage", "gat"):
    model = build_model(g, ModelConfig(allele=AlleleConfig(backbone=bb)), seed=0)
    cfg = TrainConfig()
    opt = make_optimizer(model, cfg)
    train_step(model, g, cfg, opt, 0)  # warm-up (jit compile)
    t0 = time.perf_counter()
    for e in range(1, {epochs} + 1):
        train_step(model, g, cfg, opt, e)
    print(bb, (time.perf_counter() - t0) / {epochs})
"""


def random_pattern(rng, n, density):
    mask = rng.random((n, n)) < density
    indptr = np.concatenate([[0], np.cumsum(mask.sum(1))]).astype(np.int64)
    indices = np.nonzero(mask)[1].astype(np.int64)
    return indptr, indices


def cases(rng, mpg, width):
    op = mpg.norm_operator
    indptr, indices, data = op.indptr, op.indices, op.data
    n = op.shape[0]
    dense = rng.standard_normal((n, width))
    left, right = rng.standard_normal((n, width)), rng.standard_normal((n, width))
    values = rng.standard_normal(indices.shape[0])
    alpha = kernels.numpy_kernels.segment_softmax(indptr, values)
    rows = np.repeat(np.arange(n), np.diff(indptr))
    return {
        "bool_spgemm": (indptr, indices, indptr, indices, n),
        "csr_spmm": (indptr, indices, data, dense),
        "csr_transpose": (indptr, indices, data, n),
        "sddmm": (indptr, indices, left, right),
        "segment_softmax": (indptr, values),
        "segment_softmax_backward": (indptr, alpha, values),
        "scatter_add_rows": (rows, rng.standard_normal((indices.shape[0], width)), n),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return a.shape == b.shape and np.allclose(a, b, rtol=1e-12, atol=1e-12)


def bench_operand(label, args_by_kernel, repeats):
    print(f"\n{label}")
    print(f"{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, args in args_by_kernel.items():
        np_fn = getattr(kernels.numpy_kernels, name)
        nb_fn = getattr(kernels.numba_kernels, name)
        if not same(np_fn(*args), nb_fn(*args)):  # also triggers compilation
            raise SystemExit(f"{name}: numba and numpy disagree")
        t_np = min(timeit.repeat(lambda: np_fn(*args), number=1, repeat=repeats)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*args), number=1, repeat=repeats)) * 1e3
        print(f"{name:<26}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


def bench_epoch(n, epochs):
    print(f"\nfull training step, standard fixture n={n} (mean of {epochs})")
    for flag in ("0", "1"):
        env = dict(os.environ, HGEN_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(n=n, epochs=epochs)], env=env,
                             capture_output=True, text=True, check=True).stdout
        label = "numpy" if flag == "1" else "numba"
        for line in out.split("\n"):
            if line:
                bb, secs = line.split()
                print(f"  {label:<6}{bb:<6}{float(secs) * 1e3:10.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--no-epoch", action="store_true")
    args = ap.parse_args()
    if kernels.numba_kernels is None:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    g = generate_synthetic(standard_fixture_spec(seed=0, num_target_nodes=args.n))
    for mpg in compile_all(g):
        bench_operand(f"{mpg.path_name}: n={mpg.n}, nnz={mpg.norm_operator.nnz}", cases(rng, mpg, args.width),
                      args.repeats)

    indptr, indices = random_pattern(rng, 3000, 0.01)
    big = kernels.numpy_kernels.bool_spgemm(indptr, indices, indptr, indices, 3000)
    print(f"\nrandom pattern n=3000, nnz={indices.shape[0]}, squared nnz={big[1].shape[0]}")
    bench_operand("bool_spgemm only", {"bool_spgemm": (indptr, indices, indptr, indices, 3000)}, 5)

    if not args.no_epoch:
        bench_epoch(args.n, args.epochs)


if __name__ == "__main__":
    main()
