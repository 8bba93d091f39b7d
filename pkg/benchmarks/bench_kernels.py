#!/usr/bin/env python3
"""Benchmark the compiled warp kernels against the pure-NumPy fallback.

The fused warp+score kernel is the optimizer's hot path: it runs once per
CMA-ES candidate, so a 20,000-evaluation budget hits it 20,000 times.

Usage: python benchmarks/bench_kernels.py [--size 512] [--degree 3] [--repeats 30]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from speckle_forge import _kernels_py
from speckle_forge.pipeline import SynthSpec, synth
from speckle_forge.polywarp import PolyWarp

try:
    from speckle_forge import _speckle_kernels as compiled
except ImportError:
    compiled = None


def _bench(fn, repeats: int) -> float:
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1000.0


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=512)
    parser.add_argument("--degree", type=int, default=3)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    instance = synth(
        SynthSpec(width=args.size, height=args.size, features=max(10, args.size // 3), seed=0)
    )
    src = np.ascontiguousarray(instance.clean.as_u8())
    ref = np.ascontiguousarray(instance.distorted.as_u8())
    rng = np.random.default_rng(1)
    warp = PolyWarp.translation(1.5, -2.0, args.degree)
    jitter = rng.normal(0.0, 1e-5, warp.cx.shape)
    warp = PolyWarp(args.degree, warp.cx + jitter, warp.cy + jitter)
    mx, my = warp.coeff_matrices()
    h, w = src.shape

    backends = [("pure", _kernels_py)]
    if compiled is not None:
        backends.append(("compiled", compiled))
    else:
        print("compiled extension not available; benchmarking the fallback only")

    results = {}
    for name, impl in backends:
        score_ms = _bench(lambda impl=impl: impl.warp_score(src, ref, mx, my), args.repeats)
        index_ms = _bench(lambda impl=impl: impl.backward_indices(h, w, mx, my), args.repeats)
        results[name] = (score_ms, index_ms)
        print(
            f"{name:>9}: warp_score {score_ms:8.3f} ms/eval ({1000.0 / score_ms:7.1f} eval/s)   "
            f"backward_indices {index_ms:8.3f} ms"
        )

    if len(results) == 2:
        speedup = results["pure"][0] / results["compiled"][0]
        print(f"fused-score speedup: {speedup:.1f}x")
        a = _kernels_py.warp_score(src, ref, mx, my)
        b = compiled.warp_score(src, ref, mx, my)
        print(f"agreement: pure {a} == compiled {b}: {a == b}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
