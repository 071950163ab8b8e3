"""Tiled inference, stitching and segmentation metrics.

Overlap semantics: a tile plan with tile size ``t`` and overlap fraction
``f`` steps by ``max(1, round(t * (1 - f)))``; the last tile on each axis is
clamped so that it ends exactly at the image edge.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .model import Checkpoint
from .padding import PadMode
from .pconv import RatioCache
from .train import predict

SWEEP_FIELDS = ("fraction_a", "fraction_b", "miou_zero", "miou_partial", "diff")
LEAVEOUT_FRACTIONS = (
    (Fraction(0), Fraction(0)),
    (Fraction(1, 3), Fraction(1, 3)),
    (Fraction(1, 2), Fraction(1, 2)),
    (Fraction(2, 3), Fraction(2, 3)),
    (Fraction(3, 4), Fraction(3, 4)),
    (Fraction(7, 8), Fraction(7, 8)),
)


class EvaluationError(ValueError):
    pass


def as_fraction(v) -> Fraction:
    """Exact fraction for ``v``; strings like ``"1/3"`` and ``0.3333`` both map to 1/3."""
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        v = v.strip()
        return Fraction(v).limit_denominator(1000) if "." in v else Fraction(v)
    return Fraction(v).limit_denominator(1000)


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    tile: int
    overlap: Fraction
    stride: int
    rows: tuple
    cols: tuple

    @property
    def origins(self) -> list:
        return [(r, c) for r in self.rows for c in self.cols]

    def coverage(self) -> np.ndarray:
        count = np.zeros((self.height, self.width), dtype=np.int64)
        for r, c in self.origins:
            count[r:r + self.tile, c:c + self.tile] += 1
        return count


def _axis_origins(n: int, t: int, stride: int) -> tuple:
    out, o = [], 0
    while True:
        if o + t >= n:
            if not out or out[-1] != n - t:
                out.append(n - t)
            return tuple(out)
        out.append(o)
        o += stride


def make_tile_plan(H: int, W: int, t: int, f=0) -> TilePlan:
    f = as_fraction(f)
    if t < 1 or t > min(H, W):
        raise EvaluationError(f"tile {t} does not fit image {H}x{W}")
    if not 0 <= f < 1:
        raise EvaluationError(f"overlap fraction must be in [0, 1), got {f}")
    # round half up, on exact rationals
    stride = max(1, math.floor(t * (1 - f) + Fraction(1, 2)))
    return TilePlan(H, W, t, f, stride, _axis_origins(H, t, stride), _axis_origins(W, t, stride))


def tiled_infer(model: Callable[[np.ndarray], np.ndarray], images: np.ndarray, plan: TilePlan,
                stitch: str = "average") -> np.ndarray:
    """Run ``model`` tile by tile over ``N x C x H x W`` images and stitch the scores.

    ``average`` takes the mean over every tile covering a pixel;
    ``center-priority`` takes the tile in which the pixel sits farthest from
    a tile edge (earliest tile wins ties).
    """
    if stitch not in ("average", "center-priority"):
        raise EvaluationError(f"unknown stitch rule {stitch!r}")
    N, _, H, W = images.shape
    if (H, W) != (plan.height, plan.width):
        raise EvaluationError(f"plan is for {plan.height}x{plan.width}, images are {H}x{W}")
    t = plan.tile
    acc = count = best = None
    ramp = np.minimum(np.arange(t), np.arange(t)[::-1])
    centrality = np.minimum.outer(ramp, ramp)
    for r, c in plan.origins:
        scores = model(images[:, :, r:r + t, c:c + t])
        if scores.shape[0] != N or scores.shape[2:] != (t, t):
            raise EvaluationError(f"model is not shape-preserving: tile {t}x{t} gave {scores.shape}")
        if acc is None:
            acc = np.zeros((N, scores.shape[1], H, W), dtype=np.float64)
            count = np.zeros((H, W))
            best = np.full((H, W), -1)
        win = (slice(None), slice(None), slice(r, r + t), slice(c, c + t))
        if stitch == "average":
            acc[win] += scores
            count[r:r + t, c:c + t] += 1
        else:
            better = centrality > best[r:r + t, c:c + t]
            acc[win] = np.where(better, scores, acc[win])
            best[r:r + t, c:c + t] = np.where(better, centrality, best[r:r + t, c:c + t])
    if stitch == "average":
        acc /= count
    return acc


class ConfusionMatrix:
    """``K x K`` pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore: Optional[np.ndarray] = None):
        if pred.shape != gt.shape:
            raise EvaluationError(f"prediction {pred.shape} and label {gt.shape} extents differ")
        keep = np.ones(gt.shape, dtype=bool) if ignore is None else ~np.broadcast_to(ignore, gt.shape)
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        K = self.num_classes
        if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= K):
            raise EvaluationError(f"label out of range [0, {K})")
        self.counts += np.bincount(g * K + p, minlength=K * K).reshape(K, K)
        self.ignored += int(gt.size - keep.sum())
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and ground truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        out = np.full(self.num_classes, np.nan)
        np.divide(tp, union, out=out, where=union > 0)
        return out

    def mean_iou(self) -> float:
        """Mean IoU over present classes, summed exactly and rounded once."""
        if self.total == 0:
            raise EvaluationError("no evaluated pixels")
        tp = np.diag(self.counts)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        ious = [Fraction(int(a), int(u)) for a, u in zip(tp, union) if u > 0]
        return float(sum(ious) / len(ious))


def miou(pred: np.ndarray, gt: np.ndarray, ignore: Optional[np.ndarray] = None,
         num_classes: Optional[int] = None) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean over classes that occur."""
    K = num_classes if num_classes is not None else int(max(pred.max(), gt.max())) + 1
    cm = ConfusionMatrix(K).update(pred, gt, ignore)
    return cm.iou(), cm.mean_iou()


def center_leaveout_mask(H: int, W: int, fractions=(0, 0)) -> np.ndarray:
    """Boolean ``H x W`` mask, True on the centred rectangle to ignore.

    The rectangle is ``round_half_up(H*a) x round_half_up(W*b)`` and starts at
    ``(H - h) // 2``, ``(W - w) // 2``.
    """
    a, b = (as_fraction(v) for v in fractions)
    if not (0 <= a < 1 and 0 <= b < 1):
        raise EvaluationError(f"leave-out fractions must be in [0, 1), got {a}, {b}")
    h = math.floor(H * a + Fraction(1, 2))
    w = math.floor(W * b + Fraction(1, 2))
    out = np.zeros((H, W), dtype=bool)
    top, left = (H - h) // 2, (W - w) // 2
    out[top:top + h, left:left + w] = True
    return out


def _scores(ckpt: Checkpoint, images: np.ndarray, plan: Optional[TilePlan], stitch: str,
            pad_mode: "PadMode | str | None" = None) -> np.ndarray:
    model = ckpt.model(pad_mode, cache=RatioCache())
    x = images.astype(next(iter(ckpt.params.values())).dtype)
    if plan is None:
        return predict(model, x)
    return tiled_infer(lambda t: predict(model, t), x, plan, stitch)


def border_eval_sweep(model_zero: Checkpoint, model_partial: Checkpoint, images: np.ndarray,
                      labels: np.ndarray, fractions: Sequence = LEAVEOUT_FRACTIONS, *,
                      num_classes: Optional[int] = None, plan: Optional[TilePlan] = None,
                      stitch: str = "average") -> list:
    """mIoU of both models for each centre leave-out fraction, and their difference.

    Each checkpoint is evaluated in the pad mode it was trained with.
    """
    if not model_zero.spec.same_architecture(model_partial.spec):
        raise EvaluationError("checkpoints differ in architecture")
    K = num_classes or model_zero.spec.output_shape()[0]
    pred_z = _scores(model_zero, images, plan, stitch).argmax(axis=1)
    pred_p = _scores(model_partial, images, plan, stitch).argmax(axis=1)
    H, W = labels.shape[-2:]
    rows = []
    for a, b in fractions:
        ignore = center_leaveout_mask(H, W, (a, b))
        mz = ConfusionMatrix(K).update(pred_z, labels, ignore).mean_iou()
        mp = ConfusionMatrix(K).update(pred_p, labels, ignore).mean_iou()
        rows.append({"fraction_a": as_fraction(a), "fraction_b": as_fraction(b),
                     "miou_zero": 100 * mz, "miou_partial": 100 * mp,
                     "diff": 100 * (mp - mz)})
    return rows


def trend(rows: Sequence[dict]) -> float:
    """Spearman rank correlation between leave-out area and mIoU difference."""
    area = [float(r["fraction_a"] * r["fraction_b"]) for r in rows]
    rho = spearmanr(area, [r["diff"] for r in rows]).statistic
    return float(rho)


def format_fraction(v: Fraction) -> str:
    v = as_fraction(v)
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def write_sweep_csv(rows: Iterable[dict], fh, extra: Sequence[str] = ()) -> None:
    fields = tuple(extra) + SWEEP_FIELDS
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        out = []
        for k in fields:
            v = r[k]
            if k.startswith("fraction"):
                out.append(format_fraction(v))
            elif isinstance(v, float):
                out.append(f"{v:.6f}")
            else:
                out.append(str(v))
        w.writerow(out)


def sweep_csv(rows: Iterable[dict], extra: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    write_sweep_csv(rows, buf, extra)
    return buf.getvalue()
