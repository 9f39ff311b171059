"""Microbenchmarks: packed XNOR dot against a scalar float dot.

The packed side walks 64-bit words with popcounts; the float side is a
plain elementwise multiply-accumulate over the same logical vector. The
loop over repetitions lives inside the measured kernel, so call
overhead is amortized the same way on both sides. `compare_backends`
runs the pair under every available kernel build.
"""

import time
from dataclasses import dataclass

import numpy as np

from bnnkit import accel, kernels
from bnnkit import binarize as bz


@dataclass
class BenchResult:
    backend: str
    dim: int
    reps: int
    xnor_ns: float          # per dot product
    f32_ns: float
    packed_bytes: int       # one vector, packed
    f32_bytes: int          # one vector, float32

    @property
    def speedup(self):
        return self.f32_ns / self.xnor_ns if self.xnor_ns > 0 else float("inf")

    @property
    def byte_ratio(self):
        return self.f32_bytes / self.packed_bytes

    def format(self):
        return (f"backend={self.backend} dim={self.dim} "
                f"xnor={self.xnor_ns:.1f}ns f32={self.f32_ns:.1f}ns "
                f"speedup={self.speedup:.1f}x "
                f"bytes={self.packed_bytes}/{self.f32_bytes} "
                f"({self.byte_ratio:.0f}x smaller)")


def _best_time(fn, args, rounds=5):
    """Best-of-N wall time; first call is a free warmup (jit, caches)."""
    fn(*args)
    best = float("inf")
    for _ in range(rounds):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_dot(dim=4096, reps=20000, backend=None, seed=0, rounds=5):
    """Time one packed XNOR dot against one scalar f32 dot at `dim`."""
    backend = backend or accel.BACKEND
    rng = np.random.default_rng([seed, dim])
    nrows = 8
    signs = np.where(rng.random((nrows, dim)) < 0.5, -1.0, 1.0).astype(np.float32)
    b_signs = np.where(rng.random(dim) < 0.5, -1.0, 1.0).astype(np.float32)

    a_words = np.stack([bz.pack(signs[i]).words[0] for i in range(nrows)])
    b_words = bz.pack(b_signs).words[0]

    bench_xnor = kernels.get_impl("bench_xnor", backend)
    bench_f32 = kernels.get_impl("bench_f32_dot", backend)

    t_xnor = _best_time(bench_xnor, (a_words, b_words, dim, reps), rounds)
    t_f32 = _best_time(bench_f32, (signs, b_signs, reps), rounds)

    return BenchResult(
        backend=backend,
        dim=dim,
        reps=reps,
        xnor_ns=t_xnor / reps * 1e9,
        f32_ns=t_f32 / reps * 1e9,
        packed_bytes=a_words[0].nbytes,
        f32_bytes=signs[0].nbytes,
    )


def compare_backends(dim=4096, reps=20000, seed=0):
    """One BenchResult per available kernel build."""
    return [bench_dot(dim, reps, backend=b, seed=seed)
            for b in kernels.available_backends()]


def report(dims=(1024, 4096), reps=20000, seed=0):
    lines = []
    for dim in dims:
        for res in compare_backends(dim, reps, seed=seed):
            lines.append(res.format())
    return "\n".join(lines)
