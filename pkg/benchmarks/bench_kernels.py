"""Time every kernel in its numba and numpy flavour.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both flavours are imported directly, so the USAT_NO_JIT flag does not matter
here.  The first jit call (compilation or cache load) is excluded.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from usat import kernels as K


def cases(rng: np.random.Generator) -> dict:
    src = rng.standard_normal((640, 640))
    labels = (rng.random(20_000) < 0.2).astype(np.int8)
    draws = rng.integers(0, 2**63, size=300, dtype=np.uint64)
    x = rng.standard_normal((8, 420, 256)).astype(np.float32)
    grid = rng.standard_normal((80, 80, 384))
    scores = rng.standard_normal((8, 4, 420, 420)).astype(np.float32)
    attn = K.softmax_numpy(scores)
    dattn = rng.standard_normal(attn.shape).astype(np.float32)
    return {
        "bilinear 640->32": (lambda f: f(src, 32, 32, 20.0), K.bilinear_jit, K.bilinear_numpy),
        "ap_sorted n=20000": (lambda f: f(labels), K.ap_sorted_jit, K.ap_sorted_numpy),
        "partial_shuffle 400/300": (lambda f: f(400, draws), K.partial_shuffle_jit, K.partial_shuffle_numpy),
        "gelu 8x420x256 f32": (lambda f: f(x), K.gelu_jit, K.gelu_numpy),
        "gelu_grad 8x420x256 f32": (lambda f: f(x), K.gelu_grad_jit, K.gelu_grad_numpy),
        "block_mean 80x80x384 b=4": (lambda f: f(grid, 4), K.block_mean_jit, K.block_mean_numpy),
        "softmax 8x4x420x420 f32": (lambda f: f(scores), K.softmax_jit, K.softmax_numpy),
        "softmax_bwd 8x4x420x420 f32": (lambda f: f(attn, dattn, 0.25), K.softmax_bwd_jit, K.softmax_bwd_numpy),
    }


def main(argv=None) -> list[dict]:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    rows = []
    for name, (call, jit, ref) in cases(np.random.default_rng(0)).items():
        call(jit)  # compile / load from cache
        t_jit = min(timeit.repeat(lambda: call(jit), number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(lambda: call(ref), number=1, repeat=args.repeat))
        rows.append({"kernel": name, "jit_ms": 1e3 * t_jit, "numpy_ms": 1e3 * t_np, "speedup": t_np / t_jit})
    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba ms':>10}  {'numpy ms':>10}  {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<{width}}  {r['jit_ms']:>10.3f}  {r['numpy_ms']:>10.3f}  {r['speedup']:>7.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=1)
    return rows


if __name__ == "__main__":
    main()
