"""Convolution geometry and materialized padding."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


class PadMode(str, enum.Enum):
    ZERO = "zero"
    REFLECT = "reflect"
    REPLICATE = "replicate"
    # zero fill plus per-position re-weighting; never materialized on its own
    PARTIAL = "partial"

    @classmethod
    def parse(cls, value: "str | PadMode") -> "PadMode":
        if isinstance(value, PadMode):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown pad mode {value!r} (expected one of {names})") from None


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel, stride, dilation and symmetric per-side padding of a 2-D window."""

    k_h: int
    k_w: int
    s_h: int = 1
    s_w: int = 1
    d_h: int = 1
    d_w: int = 1
    p_h: int = 0
    p_w: int = 0

    def __post_init__(self):
        for name in ("k_h", "k_w", "s_h", "s_w", "d_h", "d_w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise GeometryError(f"{name} must be an integer >= 1, got {v!r}")
        for name in ("p_h", "p_w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise GeometryError(f"{name} must be an integer >= 0, got {v!r}")

    @classmethod
    def square(cls, k: int, stride: int = 1, dilation: int = 1, pad: int = 0) -> "ConvGeometry":
        return cls(k, k, stride, stride, dilation, dilation, pad, pad)

    @property
    def e_h(self) -> int:
        return self.d_h * (self.k_h - 1) + 1

    @property
    def e_w(self) -> int:
        return self.d_w * (self.k_w - 1) + 1

    @property
    def window_size(self) -> int:
        return self.k_h * self.k_w

    def out_dims(self, H: int, W: int) -> tuple[int, int]:
        return out_dims(self, H, W)

    def as_dict(self) -> dict:
        return {
            "k_h": self.k_h, "k_w": self.k_w, "s_h": self.s_h, "s_w": self.s_w,
            "d_h": self.d_h, "d_w": self.d_w, "p_h": self.p_h, "p_w": self.p_w,
        }


def out_dims(geom: ConvGeometry, H: int, W: int) -> tuple[int, int]:
    """Output extents ``floor((L + 2p - e) / s) + 1`` per axis."""
    if H < 1 or W < 1:
        raise GeometryError(f"input extents must be >= 1, got {H}x{W}")
    span_h = H + 2 * geom.p_h - geom.e_h
    span_w = W + 2 * geom.p_w - geom.e_w
    if span_h < 0 or span_w < 0:
        raise GeometryError(
            f"window {geom.e_h}x{geom.e_w} does not fit padded input "
            f"{H + 2 * geom.p_h}x{W + 2 * geom.p_w}"
        )
    return span_h // geom.s_h + 1, span_w // geom.s_w + 1


def check_reflect(geom: ConvGeometry, H: int, W: int) -> None:
    if geom.p_h > H - 1 or geom.p_w > W - 1:
        raise GeometryError(
            f"reflect padding {geom.p_h}x{geom.p_w} needs input extents > pad, got {H}x{W}"
        )


_NP_MODES = {PadMode.ZERO: "constant", PadMode.REFLECT: "reflect", PadMode.REPLICATE: "edge"}


def pad(x: np.ndarray, geom: ConvGeometry, mode: "PadMode | str" = PadMode.ZERO,
        fill: float = 0.0) -> np.ndarray:
    """Materialize padding of ``p_h``/``p_w`` cells on each side of the H, W axes.

    ``fill`` only applies to ``Zero`` mode (``fill=1`` on a ones mask gives the
    one-padded mask). Reflect mirrors without repeating the edge pixel.
    """
    mode = PadMode.parse(mode)
    if mode is PadMode.PARTIAL:
        raise ValueError("partial padding is not a materialized fill; use pconv.conv2d_forward")
    if x.ndim != 4:
        raise GeometryError(f"pad expects a 4-D NCHW tensor, got {x.ndim}-D")
    H, W = x.shape[2:]
    if mode is PadMode.REFLECT:
        check_reflect(geom, H, W)
    widths = ((0, 0), (0, 0), (geom.p_h, geom.p_h), (geom.p_w, geom.p_w))
    if mode is PadMode.ZERO:
        return np.pad(x, widths, mode="constant", constant_values=fill)
    return np.pad(x, widths, mode=_NP_MODES[mode])


def pad_index(n: int, p: int, mode: PadMode) -> np.ndarray:
    """Source index along one axis for each padded position; -1 marks fill."""
    idx = np.arange(-p, n + p)
    if mode in (PadMode.ZERO, PadMode.PARTIAL):
        return np.where((idx >= 0) & (idx < n), idx, -1)
    if mode is PadMode.REPLICATE:
        return np.clip(idx, 0, n - 1)
    if mode is PadMode.REFLECT:
        idx = np.abs(idx)
        return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    raise ValueError(f"no index map for {mode}")


def pad_adjoint(g: np.ndarray, geom: ConvGeometry, mode: "PadMode | str", H: int, W: int) -> np.ndarray:
    """Transpose of :func:`pad`: scatter-add a padded-shape gradient back to ``H x W``."""
    mode = PadMode.parse(mode)
    if mode in (PadMode.ZERO, PadMode.PARTIAL):
        return g[:, :, geom.p_h:geom.p_h + H, geom.p_w:geom.p_w + W].copy()
    ih = pad_index(H, geom.p_h, mode)
    iw = pad_index(W, geom.p_w, mode)
    rows = np.zeros(g.shape[:2] + (H, g.shape[3]), dtype=g.dtype)
    np.add.at(rows, (slice(None), slice(None), ih), g)
    out = np.zeros(g.shape[:2] + (H, W), dtype=g.dtype)
    np.add.at(out, (slice(None), slice(None), slice(None), iw), rows)
    return out
