"""Randomized finite-difference checks of every layer's backward pass.

The error reported is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
over all entries of the checked gradient, in float64.
"""

from __future__ import annotations

import numpy as np

from .nn import AvgPool2d, Conv2d, Dense, ReLU, softmax_cross_entropy
from .padding import ConvGeometry, PadMode
from .pconv import RatioCache

LAYER_KINDS = ("conv-zero", "conv-reflect", "conv-replicate", "conv-partial",
               "dense", "relu", "avgpool", "softmax-ce")
TOLERANCE = {"dense": 1e-8}
DEFAULT_TOLERANCE = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for v in it:
        old = float(v)
        v[...] = old + h
        fp = f()
        v[...] = old - h
        fm = f()
        v[...] = old
        g[it.multi_index] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(n).max())
    return float(np.abs(a - n).max() / scale) if scale > 0 else 0.0


def _random_conv(rng, mode: PadMode):
    k = int(rng.choice([1, 2, 3, 5]))
    d = int(rng.integers(1, 3))
    e = d * (k - 1) + 1
    p = int(rng.integers(0, e // 2 + 1))
    s = int(rng.integers(1, 3))
    lo = max(e - 2 * p, p + 1, 2)
    H, W = (int(v) for v in rng.integers(lo, lo + 5, size=2))
    geom = ConvGeometry.square(k, s, d, p)
    N, C, O = (int(v) for v in rng.integers(1, 4, size=3))
    x = rng.standard_normal((N, C, H, W))
    layer = Conv2d(rng.standard_normal((O, C, k, k)), rng.standard_normal(O), geom, mode, RatioCache())
    return layer, x


def _case(kind: str, rng: np.random.Generator):
    """A random layer instance and an input for one trial."""
    if kind.startswith("conv-"):
        return _random_conv(rng, PadMode.parse(kind[5:]))
    if kind == "dense":
        n, i, o = (int(v) for v in rng.integers(1, 6, size=3))
        return Dense(rng.standard_normal((o, i)), rng.standard_normal(o)), rng.standard_normal((n, i))
    if kind == "relu":
        x = rng.standard_normal((2, 3, 4, 4))
        x = np.where(x >= 0, x + 1e-3, x - 1e-3)  # keep clear of the kink at 0
        return ReLU(), x
    if kind == "avgpool":
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        H, W = (int(v) for v in rng.integers(k, k + 5, size=2))
        return AvgPool2d(ConvGeometry.square(k, s)), rng.standard_normal((2, 2, H, W))
    raise ValueError(f"unknown layer kind {kind!r}")


def check_layer(kind: str, trials: int = 20, seed: int = 0) -> float:
    """Worst relative error over ``trials`` random cases for one layer kind."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        if kind == "softmax-ce":
            K = int(rng.integers(2, 6))
            logits = rng.standard_normal((4, K))
            labels = rng.integers(0, K, size=4)
            _, g = softmax_cross_entropy(logits, labels)
            n = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
            worst = max(worst, rel_error(g, n))
            continue
        layer, x = _case(kind, rng)
        out = layer.forward(x)
        probe = rng.standard_normal(out.shape)
        gx = layer.backward(probe)

        def loss():
            return float((layer.forward(x) * probe).sum())

        worst = max(worst, rel_error(gx, numeric_grad(loss, x)))
        for key, arr in layer.params.items():
            worst = max(worst, rel_error(layer.grads[key], numeric_grad(loss, arr)))
    return worst


def tolerance(kind: str) -> float:
    return TOLERANCE.get(kind, DEFAULT_TOLERANCE)
