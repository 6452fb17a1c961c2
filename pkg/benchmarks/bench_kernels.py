"""Compare the compiled kernels with the numpy fallback.

Times each hot kernel on the desk-scale shapes used in training and serving,
checks that both backends agree, and prints one row per kernel.

    python benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from dpsm import nncore


def cases(rng):
    B, T, D, C, n = 64, 32, 32, 64, 2
    x = rng.standard_normal((B, T, D))
    lengths = rng.integers(1, T + 1, B)
    n_valid = np.maximum(lengths, n) - n + 1
    W = rng.standard_normal((n * D, C)) * 0.1
    b = rng.standard_normal(C) * 0.1
    idx = {}

    def conv_fwd(k):
        return k.conv_pool_forward(x, n_valid, W, b)

    def conv_bwd(k):
        if "arg" not in idx:
            idx["arg"] = nncore.get_backend("numpy").conv_pool_forward(x, n_valid, W, b)[1]
        return k.conv_pool_backward(x, idx["arg"], np.ones((B, C)), W)

    def pool_fwd(k):
        return k.pool_forward(x, lengths)

    V = 1400
    ids = rng.integers(0, V, 4096)
    rows = rng.standard_normal((4096, D))

    def scatter(k):
        target = np.zeros((V, D))
        k.scatter_add_rows(target, ids, rows)
        return target

    vecs = rng.standard_normal((10000, 128)).astype(np.float32)
    norms = nncore.get_backend("numpy").row_norms(vecs)
    q = rng.standard_normal(128).astype(np.float32)

    def cosine(k):
        return k.cosine_scores(vecs, norms, q)

    scores = rng.standard_normal(10000)

    def topk(k):
        return k.topk(scores, 10)

    return {"conv_pool_forward": conv_fwd, "conv_pool_backward": conv_bwd, "pool_forward": pool_fwd,
            "scatter_add_rows": scatter, "cosine_scores_10k": cosine, "topk_10k": topk}


def agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-5, atol=1e-6) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    backends = nncore.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
    mods = {name: nncore.get_backend(name) for name in backends}
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for be, mod in mods.items():
            fn(mod)  # warm up
            times[be] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e6
        ok = agree(fn(mods["numpy"]), fn(mods["cython"])) if len(mods) > 1 else True
        speedup = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        rows.append((name, times.get("cython", float("nan")), times["numpy"], speedup, ok))
    print(f"{'kernel':<22} {'cython_us':>10} {'numpy_us':>10} {'speedup':>8}  agree")
    for name, c, nmp, s, ok in rows:
        print(f"{name:<22} {c:>10.1f} {nmp:>10.1f} {s:>8.2f}  {ok}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kernel", "cython_us", "numpy_us", "speedup", "agree"])
            w.writerows(rows)
    return 0 if all(r[4] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
