"""Seeded synthetic datasets whose labels hinge on content near the border.

Each sample is a pure function of ``(kind, extents, seed, index)``; the
train split uses indices ``[0, n_train)`` and val ``[n_train, n_train+n_val)``.

``border-classify``
    A strip of random size, 1..margin cells deep, lies flush against a
    random image edge. Label = pattern type: bright solid, dark solid,
    bright checkered, dark checkered. Labels are translation-invariant, so
    the edge position itself carries no class information. Every image
    has a random brightness offset.

``border-segment``
    Per-pixel label is the tertile bin of the local mean brightness, taken
    over the in-image part of the ``(2*margin+1)``-square window around the
    pixel. Near the border that window is clipped, so a correct prediction
    needs a mean over valid pixels only.

``separable``
    Two classes split by a fixed random hyperplane through the origin with a
    gap of ``2*contrast`` between them; a sanity set for the trainer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

KINDS = {"border-classify": 1, "border-segment": 2, "separable": 3}


@dataclass(frozen=True)
class DatasetHandle:
    kind: str
    height: int = 16
    width: int = 16
    num_classes: int = 4
    seed: int = 0
    n_train: int = 1024
    n_val: int = 256
    margin: int = 2
    offset: float = 1.0  # half-range of the per-image brightness offset
    noise: float = 0.2
    contrast: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.height < 1 or self.width < 1 or self.n_train < 1 or self.n_val < 0:
            raise ValueError("dataset extents and split sizes must be positive")
        if self.kind == "border-classify" and self.num_classes != 4:
            raise ValueError("border-classify has exactly 4 classes")
        if self.kind == "separable" and self.num_classes != 2:
            raise ValueError("separable has exactly 2 classes")

    @property
    def segmentation(self) -> bool:
        return self.kind == "border-segment"

    @property
    def input_shape(self) -> tuple:
        return (1, self.height, self.width)

    def to_dict(self) -> dict:
        return asdict(self)

    def sample(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """One ``(image 1xHxW float32, label)`` pair; label is HxW uint8 for segmentation."""
        rng = np.random.default_rng([self.seed, KINDS[self.kind], index])
        if self.kind == "border-classify":
            return _classify_sample(self, rng)
        if self.kind == "separable":
            return _separable_sample(self, rng)
        return _segment_sample(self, rng)

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = zip(*(self.sample(int(i)) for i in indices))
        return np.stack(xs), np.stack(ys)

    @cached_property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.batch(range(self.n_train))

    @cached_property
    def val(self) -> tuple[np.ndarray, np.ndarray]:
        return self.batch(range(self.n_train, self.n_train + self.n_val))

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _classify_sample(d: DatasetHandle, rng: np.random.Generator):
    H, W = d.height, d.width
    img = rng.normal(0.0, d.noise, size=(H, W)) + rng.uniform(-d.offset, d.offset)
    label = int(rng.integers(4))
    sign = 1.0 if label % 2 == 0 else -1.0
    depth = int(rng.integers(1, d.margin + 1))
    length = int(rng.integers(3, max(4, min(H, W) // 2) + 1))
    patch = np.full((depth, length), sign * d.contrast)
    if label >= 2:  # checkered instead of solid
        patch[(np.add.outer(np.arange(depth), np.arange(length)) % 2) == 1] = 0.0
    edge = int(rng.integers(4))
    if edge in (1, 3):
        patch = patch.T
    ph, pw = patch.shape
    if edge == 0:
        r, c = 0, int(rng.integers(0, W - pw + 1))
    elif edge == 1:
        r, c = int(rng.integers(0, H - ph + 1)), W - pw
    elif edge == 2:
        r, c = H - ph, int(rng.integers(0, W - pw + 1))
    else:
        r, c = int(rng.integers(0, H - ph + 1)), 0
    img[r:r + ph, c:c + pw] += patch
    return img[None].astype(np.float32), np.int64(label)


def _separable_sample(d: DatasetHandle, rng: np.random.Generator):
    u = np.random.default_rng([d.seed, KINDS["separable"]]).standard_normal(d.height * d.width)
    u /= np.linalg.norm(u)
    label = int(rng.integers(2))
    z = rng.normal(0.0, d.noise, size=u.size)
    z -= (z @ u) * u
    # the component along u is at least contrast away from the hyperplane
    z += (2 * label - 1) * (d.contrast + abs(rng.normal(0.0, d.noise))) * u
    return z.reshape(1, d.height, d.width).astype(np.float32), np.int64(label)


def local_valid_mean(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the in-image part of each ``(2r+1)``-square neighbourhood."""
    H, W = img.shape
    c = np.zeros((H + 1, W + 1))
    c[1:, 1:] = img.cumsum(0).cumsum(1)
    r0 = np.clip(np.arange(H) - radius, 0, H)
    r1 = np.clip(np.arange(H) + radius + 1, 0, H)
    c0 = np.clip(np.arange(W) - radius, 0, W)
    c1 = np.clip(np.arange(W) + radius + 1, 0, W)
    s = c[r1][:, c1] - c[r0][:, c1] - c[r1][:, c0] + c[r0][:, c0]
    n = np.outer(r1 - r0, c1 - c0)
    return s / n


def _segment_sample(d: DatasetHandle, rng: np.random.Generator):
    H, W = d.height, d.width
    img = rng.normal(0.0, 1.0, size=(H, W)) + rng.uniform(-d.offset, d.offset) / (2 * d.margin + 1)
    m = local_valid_mean(img, d.margin)
    # tertiles of an interior window mean of unit-variance noise
    t = 0.43 / (2 * d.margin + 1)
    label = np.digitize(m, [-t, t]).astype(np.uint8)
    return img[None].astype(np.float32), label
