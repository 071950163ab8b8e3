"""Wall-clock comparison of zero vs partial padding, first vs cached iteration."""

from __future__ import annotations

import time

import numpy as np

from .model import ModelSpec, build, init_params
from .padding import PadMode
from .pconv import RatioCache


def _time(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1e3


def bench(spec: ModelSpec, iters: int = 20, batch: int = 1, seed: int = 0) -> dict:
    """Inference timings in ms.

    The zero-padding model runs first (including one untimed warm-up) so that
    the partial model's first iteration measures only the ratio-map misses.
    """
    if iters < 2:
        raise ValueError("bench needs at least 2 iterations")
    params = init_params(spec, seed)
    x = np.random.default_rng(seed).standard_normal((batch,) + spec.input_shape).astype(np.float32)
    zero = build(spec, params, PadMode.ZERO)
    zero.forward(x)
    zero_ms = [_time(lambda: zero.forward(x)) for _ in range(iters)]
    cache = RatioCache()
    partial = build(spec, params, PadMode.PARTIAL, cache)
    first = _time(lambda: partial.forward(x))
    cached = [_time(lambda: partial.forward(x)) for _ in range(iters - 1)]
    zero_mean = float(np.mean(zero_ms))
    cached_mean = float(np.mean(cached))
    return {
        "zero_iter_mean_ms": zero_mean,
        "first_iter_ms": first,
        "cached_iter_mean_ms": cached_mean,
        "first_ratio": first / zero_mean,
        "ratio": cached_mean / zero_mean,
        "cache_hits": cache.hits,
        "cache_misses": cache.misses,
        "iters": iters,
    }
