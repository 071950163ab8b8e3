"""2-D cross-correlation with zero/reflect/replicate/partial padding.

Partial padding treats padded cells as holes: the raw zero-padded response of
each output position is multiplied by ``k_h*k_w / (valid cells in window)``
and bias is added afterwards, only where at least one valid cell was seen.
The scale map depends on geometry and input extents only, so it is cached.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .padding import ConvGeometry, GeometryError, PadMode, check_reflect, out_dims, pad
from .tensor import check_finite

ALL_ONES = "all-ones"


@dataclass(frozen=True)
class ConvWeights:
    weight: np.ndarray  # C_out x C_in x k_h x k_w
    bias: Optional[np.ndarray] = None  # C_out

    def check(self, geom: ConvGeometry, c_in: int) -> None:
        w = self.weight
        if w.ndim != 4:
            raise ValueError(f"weight must be 4-D, got {w.ndim}-D")
        if w.shape[1] != c_in:
            raise ValueError(f"weight expects {w.shape[1]} input channels, input has {c_in}")
        if w.shape[2:] != (geom.k_h, geom.k_w):
            raise ValueError(f"weight kernel {w.shape[2:]} != geometry {(geom.k_h, geom.k_w)}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} != ({w.shape[0]},)")


@dataclass(frozen=True)
class RatioMap:
    """Per-output-position scale ``r = window / counts`` and the validity bitmap.

    ``ratio`` holds 0 where no valid cell falls under the window; those
    positions are flagged False in ``valid`` and their ratio is meaningless.
    """

    ratio: np.ndarray  # H_out x W_out float64
    valid: np.ndarray  # H_out x W_out bool
    counts: np.ndarray  # valid cells per window, float64
    window: float  # k_h * k_w

    @classmethod
    def ones(cls, H_out: int, W_out: int) -> "RatioMap":
        """r = 1 everywhere: turns the partial path into plain zero padding."""
        shape = (H_out, W_out)
        return cls(np.ones(shape), np.ones(shape, dtype=bool), np.ones(shape), 1.0)

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Scale ``a`` (``... x H_out x W_out``) by ``r``; invalid positions become 0.

        Computed as ``(a * window) / counts`` so constant inputs stay exact;
        positions with ``r == 1`` are passed through untouched.
        """
        dt = a.dtype.type
        unit = self.counts == self.window
        if unit.all():
            return a
        counts = np.where(self.valid, self.counts, 1.0).astype(a.dtype)
        scaled = np.where(unit, a, (a * dt(self.window)) / counts)
        if not self.valid.all():
            scaled = np.where(self.valid, scaled, dt(0))
        return scaled


class RatioKey(NamedTuple):
    H: int
    W: int
    k_h: int
    k_w: int
    s_h: int
    s_w: int
    d_h: int
    d_w: int
    p_h: int
    p_w: int
    mask: str


def ones_mask(H: int, W: int) -> np.ndarray:
    return np.ones((1, 1, H, W), dtype=np.float64)


def check_mask(mask: np.ndarray, H: int, W: int) -> np.ndarray:
    if mask.shape != (1, 1, H, W):
        raise ValueError(f"mask must be 1x1x{H}x{W}, got {mask.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask values must be 0 or 1")
    return mask


def mask_fingerprint(mask: Optional[np.ndarray]) -> str:
    if mask is None or bool(np.all(mask == 1)):
        return ALL_ONES
    m = np.ascontiguousarray(mask, dtype=np.float64)
    return hashlib.sha256(str(m.shape).encode() + m.tobytes()).hexdigest()


def ratio_key(geom: ConvGeometry, H: int, W: int, mask: Optional[np.ndarray] = None) -> RatioKey:
    return RatioKey(H, W, geom.k_h, geom.k_w, geom.s_h, geom.s_w, geom.d_h, geom.d_w,
                    geom.p_h, geom.p_w, mask_fingerprint(mask))


def _windows(xp: np.ndarray, geom: ConvGeometry, H_out: int, W_out: int) -> np.ndarray:
    """Strided view ``N x C x H_out x W_out x k_h x k_w`` over a padded input."""
    v = sliding_window_view(xp, (geom.e_h, geom.e_w), axis=(2, 3))
    v = v[:, :, ::geom.s_h, ::geom.s_w, ::geom.d_h, ::geom.d_w]
    return v[:, :, :H_out, :W_out]


def im2col(xp: np.ndarray, geom: ConvGeometry, H_out: int, W_out: int) -> np.ndarray:
    """Rows are output positions (n, i, j); columns ordered (c_in, k_h, k_w)."""
    v = _windows(xp, geom, H_out, W_out)
    N, C = xp.shape[:2]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(N * H_out * W_out, C * geom.k_h * geom.k_w)


def window_sums(mask: np.ndarray, geom: ConvGeometry, fill: float = 0.0) -> np.ndarray:
    """Ones-kernel convolution of a single-channel mask padded with ``fill``.

    Counts are small integers, so the float64 sums are exact.
    """
    H, W = mask.shape[2:]
    H_out, W_out = out_dims(geom, H, W)
    mp = pad(mask.astype(np.float64), geom, PadMode.ZERO, fill=fill)
    return _windows(mp, geom, H_out, W_out).sum(axis=(-2, -1))[0, 0]


def compute_ratio_map(geom: ConvGeometry, H: int, W: int,
                      mask: Optional[np.ndarray] = None) -> RatioMap:
    """Scale map ``k_h*k_w / ||M_window||_1`` for every output position.

    ``mask=None`` means the input is entirely valid; only the padding is a hole.
    """
    if mask is None:
        mask = ones_mask(H, W)
    else:
        check_mask(mask, H, W)
    counts = window_sums(mask, geom)
    valid = counts > 0
    ratio = np.zeros_like(counts)
    np.divide(float(geom.window_size), counts, out=ratio, where=valid)
    for a in (ratio, valid, counts):
        a.setflags(write=False)
    return RatioMap(ratio, valid, counts, float(geom.window_size))


@dataclass
class RatioCache:
    """Ratio maps keyed by geometry, input extents and mask fingerprint.

    Readers do not block each other; insertion takes the lock. Two threads
    missing on the same key may both compute; the entries are identical.
    """

    entries: dict = field(default_factory=dict)
    hits: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def get(self, geom: ConvGeometry, H: int, W: int,
            mask: Optional[np.ndarray] = None) -> RatioMap:
        return ratio_cache_get(self, ratio_key(geom, H, W, mask), mask)

    def clear(self) -> None:
        with self._lock:
            self.entries.clear()
            self.hits = self.misses = 0


def ratio_cache_get(cache: RatioCache, key: RatioKey,
                    mask: Optional[np.ndarray] = None) -> RatioMap:
    """Return the cached ratio map for ``key``, computing it on first use.

    ``mask`` must be supplied when ``key`` was built from a non-trivial mask.
    """
    hit = cache.entries.get(key)
    if hit is not None:
        with cache._lock:
            cache.hits += 1
        return hit
    if key.mask != ALL_ONES and mask is None:
        raise ValueError("cache miss on a masked key requires the mask")
    geom = ConvGeometry(key.k_h, key.k_w, key.s_h, key.s_w, key.d_h, key.d_w, key.p_h, key.p_w)
    rmap = compute_ratio_map(geom, key.H, key.W, None if key.mask == ALL_ONES else mask)
    with cache._lock:
        cache.misses += 1
        cache.entries.setdefault(key, rmap)
        return cache.entries[key]


_default_cache = RatioCache()


def default_cache() -> RatioCache:
    return _default_cache


def update_mask(mask: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Output validity: 1 wherever the window covers at least one valid cell."""
    if mask.ndim != 4 or mask.shape[:2] != (1, 1):
        raise ValueError(f"mask must be 1x1xHxW, got {mask.shape}")
    counts = window_sums(mask, geom)
    return (counts > 0).astype(np.float64)[None, None]


@dataclass
class MaskChain:
    input_masks: list  # mask fed to each layer (before that layer's zero pad)
    output_masks: list
    saturated_at: Optional[int]  # 1-based layer whose output is all ones, None if never


def chain_masks(layers: Sequence[ConvGeometry], H: int, W: int,
                mask: Optional[np.ndarray] = None) -> MaskChain:
    """Propagate a validity mask through successive partial convolutions."""
    if not layers:
        raise GeometryError("chain needs at least one layer")
    m = ones_mask(H, W) if mask is None else check_mask(mask, H, W).astype(np.float64)
    inputs, outputs = [], []
    saturated = None
    for i, geom in enumerate(layers, start=1):
        h, w = m.shape[2:]
        try:
            out_dims(geom, h, w)
        except GeometryError as exc:
            raise GeometryError(f"layer {i} does not compose with input {h}x{w}: {exc}") from None
        inputs.append(m)
        m = update_mask(m, geom)
        outputs.append(m)
        if saturated is None and bool(np.all(m == 1)):
            saturated = i
    return MaskChain(inputs, outputs, saturated)


def conv2d_raw(xp: np.ndarray, weight: np.ndarray, geom: ConvGeometry,
               H_out: int, W_out: int) -> np.ndarray:
    """Cross-correlation of an already padded input, no bias."""
    N = xp.shape[0]
    cols = im2col(xp, geom, H_out, W_out)
    out = cols @ weight.reshape(weight.shape[0], -1).T
    return out.reshape(N, H_out, W_out, -1).transpose(0, 3, 1, 2)


def conv2d_forward(x: np.ndarray, w: ConvWeights, geom: ConvGeometry,
                   mode: "PadMode | str" = PadMode.ZERO,
                   mask: Optional[np.ndarray] = None, *,
                   cache: Optional[RatioCache] = None,
                   ratio: Optional[RatioMap] = None) -> tuple[np.ndarray, np.ndarray]:
    """Single convolution layer; returns ``(output, output_mask)``.

    In partial mode ``mask`` (1x1xHxW) marks valid input cells; omitted means
    all valid. ``ratio`` overrides the cached ratio map (e.g. forcing r=1).
    Other modes ignore ``mask`` and return an all-ones output mask.
    """
    mode = PadMode.parse(mode)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D NCHW input, got {x.ndim}-D")
    N, C, H, W = x.shape
    w.check(geom, C)
    H_out, W_out = out_dims(geom, H, W)
    weight = w.weight.astype(x.dtype, copy=False)

    if mode is not PadMode.PARTIAL:
        if mode is PadMode.REFLECT:
            check_reflect(geom, H, W)
        out = conv2d_raw(pad(x, geom, mode), weight, geom, H_out, W_out)
        if w.bias is not None:
            out = out + w.bias.astype(x.dtype, copy=False)[None, :, None, None]
        return check_finite(np.ascontiguousarray(out), "conv2d"), ones_mask(H_out, W_out)

    if mask is not None:
        check_mask(mask, H, W)
        if not np.all(mask == 1):
            x = x * mask.astype(x.dtype)
    if ratio is None:
        ratio = (cache or _default_cache).get(geom, H, W, mask)
    if ratio.ratio.shape != (H_out, W_out):
        raise ValueError(f"ratio map {ratio.ratio.shape} != output {(H_out, W_out)}")
    out = ratio.apply(conv2d_raw(pad(x, geom, PadMode.ZERO), weight, geom, H_out, W_out))
    if w.bias is not None:
        out = out + w.bias.astype(x.dtype, copy=False)[None, :, None, None]
    if not ratio.valid.all():
        out = np.where(ratio.valid, out, np.zeros((), dtype=x.dtype))
    return check_finite(np.ascontiguousarray(out), "conv2d"), ratio.valid.astype(np.float64)[None, None]
