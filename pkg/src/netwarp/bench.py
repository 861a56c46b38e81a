"""Wall-time benchmarking of the warp op (forward and forward+backward)."""

from __future__ import annotations

import os
import time

import numpy as np

from .errors import ValidationError
from .warp import warp_backward, warp_forward


def _threads():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if os.environ.get(var):
            return int(os.environ[var])
    return os.cpu_count() or 1


def _time_many(fn, iters, warmup=3):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1000.0)
    samples = np.array(samples)
    return float(np.median(samples)), float(np.percentile(samples, 95))


def bench_warp(shape, iters=50, eps=1e-4, seed=0):
    """Timing rows for warp forward and forward+backward on one shape."""
    if len(shape) != 4 or any(d < 1 for d in shape):
        raise ValidationError(f"bad bench shape {shape}")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    B, C, H, W = shape
    rng = np.random.default_rng(seed)
    feat = rng.standard_normal(shape).astype(np.float32)
    flow = rng.uniform(-2, 2, (B, 2, H, W)).astype(np.float32)
    up = rng.standard_normal(shape).astype(np.float32)

    case = f"{B}x{C}x{H}x{W}"
    rows = []
    med, p95 = _time_many(lambda: warp_forward(feat, flow, eps), iters)
    rows.append({"case": f"warp_fwd {case}", "median_ms": med, "p95_ms": p95,
                 "iters": iters, "threads": _threads()})
    med, p95 = _time_many(
        lambda: (warp_forward(feat, flow, eps), warp_backward(up, feat, flow, eps)),
        iters)
    rows.append({"case": f"warp_fwd+bwd {case}", "median_ms": med, "p95_ms": p95,
                 "iters": iters, "threads": _threads()})
    return rows
