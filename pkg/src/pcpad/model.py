"""Toy network descriptions, seeded initialization and checkpoints.

A checkpoint is a directory::

    manifest.json      model layers, seed, pad mode, training metadata
    <layer>.<name>.pten  one tensor per parameter
    metrics.csv        per-epoch metrics (optional)

The pad mode recorded in the manifest is metadata only: the same weights
can be rebuilt under any pad mode for cross-testing.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import AvgPool2d, Conv2d, Dense, Flatten, ReLU, Sequential
from .padding import ConvGeometry, PadMode, out_dims
from .pconv import RatioCache
from .tensor import load_tensor, save_tensor

LAYER_KINDS = ("conv", "dense", "relu", "avgpool", "flatten")
MANIFEST = "manifest.json"
METRICS = "metrics.csv"
METRIC_FIELDS = ("epoch", "train_acc", "val_acc", "loss")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    geom: Optional[ConvGeometry] = None
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "avgpool") and self.geom is None:
            raise ValueError(f"{self.kind} layer needs a geometry")
        if self.kind in ("conv", "dense") and (self.fan_in < 1 or self.fan_out < 1):
            raise ValueError(f"{self.kind} layer needs positive fan-in/fan-out")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("conv", "dense"):
            d.update(fan_in=self.fan_in, fan_out=self.fan_out, bias=self.bias)
        if self.geom is not None:
            d["geom"] = self.geom.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        geom = ConvGeometry(**d["geom"]) if "geom" in d else None
        return cls(d["kind"], d.get("fan_in", 0), d.get("fan_out", 0), geom, d.get("bias", True))


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus the input shape ``(C, H, W)`` it was designed for."""

    layers: tuple
    input_shape: tuple
    pad_mode: PadMode = PadMode.ZERO

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "pad_mode", PadMode.parse(self.pad_mode))
        self.output_shape()  # validates composition

    def output_shape(self, input_shape: Optional[tuple] = None) -> tuple:
        shape = tuple(input_shape or self.input_shape)
        for i, spec in enumerate(self.layers):
            shape = _propagate(spec, shape, i)
        return shape

    def with_pad_mode(self, mode: "PadMode | str") -> "ModelSpec":
        return ModelSpec(self.layers, self.input_shape, PadMode.parse(mode))

    def same_architecture(self, other: "ModelSpec") -> bool:
        return self.layers == other.layers and self.input_shape == other.input_shape

    def receptive_radius(self) -> int:
        """Input cells on each side that can influence one output (stride-1 chains)."""
        radius, jump = 0, 1
        for spec in self.layers:
            if spec.geom is None:
                continue
            g = spec.geom
            radius += jump * max(g.e_h - 1 - g.p_h, g.p_h, g.e_w - 1 - g.p_w, g.p_w)
            jump *= max(g.s_h, g.s_w)
        return radius

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "pad_mode": self.pad_mode.value,
            "layers": [s.to_dict() for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(LayerSpec.from_dict(s) for s in d["layers"]), tuple(d["input_shape"]),
                   PadMode.parse(d["pad_mode"]))


def _propagate(spec: LayerSpec, shape: tuple, i: int) -> tuple:
    if spec.kind in ("conv", "avgpool"):
        if len(shape) != 3:
            raise ValueError(f"layer {i} ({spec.kind}) needs C x H x W input, got {shape}")
        C, H, W = shape
        if spec.kind == "conv" and C != spec.fan_in:
            raise ValueError(f"layer {i} expects {spec.fan_in} channels, got {C}")
        H_out, W_out = out_dims(spec.geom, H, W)
        return (spec.fan_out if spec.kind == "conv" else C, H_out, W_out)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if shape != (spec.fan_in,):
            raise ValueError(f"layer {i} (dense) expects ({spec.fan_in},), got {shape}")
        return (spec.fan_out,)
    return shape


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> dict:
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases."""
    rng = np.random.default_rng([seed, 0])
    params = {}
    for i, ls in enumerate(spec.layers):
        if ls.kind == "conv":
            shape = (ls.fan_out, ls.fan_in, ls.geom.k_h, ls.geom.k_w)
        elif ls.kind == "dense":
            shape = (ls.fan_out, ls.fan_in)
        else:
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[f"{i}.weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        if ls.bias:
            params[f"{i}.bias"] = np.zeros(ls.fan_out, dtype=dtype)
    return params


def build(spec: ModelSpec, params: dict, pad_mode: "PadMode | str | None" = None,
          cache: Optional[RatioCache] = None) -> Sequential:
    """Instantiate layers sharing the arrays in ``params`` (updates are visible to both)."""
    mode = PadMode.parse(pad_mode) if pad_mode is not None else spec.pad_mode
    layers = []
    for i, ls in enumerate(spec.layers):
        if ls.kind == "conv":
            layers.append(Conv2d(params[f"{i}.weight"], params.get(f"{i}.bias"), ls.geom, mode, cache))
        elif ls.kind == "dense":
            layers.append(Dense(params[f"{i}.weight"], params.get(f"{i}.bias")))
        elif ls.kind == "relu":
            layers.append(ReLU())
        elif ls.kind == "avgpool":
            layers.append(AvgPool2d(ls.geom))
        else:
            layers.append(Flatten())
    return Sequential(layers)


def param_order(model: Sequential) -> list:
    """``(name, layer, key)`` triples in a fixed order."""
    out = []
    for i, layer in enumerate(model.layers):
        for key in sorted(layer.params):
            out.append((f"{i}.{key}", layer, key))
    return out


def border_cnn(in_channels: int = 1, width: int = 12, num_classes: int = 4, size: int = 16,
               pad_mode: "PadMode | str" = PadMode.ZERO) -> ModelSpec:
    """Four 3x3 conv layers, one 2x2 pool, global average pool, dense head."""
    c3 = ConvGeometry.square(3, pad=1)
    half = size // 2
    layers = [
        LayerSpec("conv", in_channels, width, c3), LayerSpec("relu"),
        LayerSpec("conv", width, width, c3), LayerSpec("relu"),
        LayerSpec("avgpool", geom=ConvGeometry.square(2, stride=2)),
        LayerSpec("conv", width, 2 * width, c3), LayerSpec("relu"),
        LayerSpec("conv", 2 * width, 2 * width, c3), LayerSpec("relu"),
        LayerSpec("avgpool", geom=ConvGeometry.square(half)),
        LayerSpec("flatten"),
        LayerSpec("dense", 2 * width, num_classes),
    ]
    return ModelSpec(tuple(layers), (in_channels, size, size), PadMode.parse(pad_mode))


def border_fcn(in_channels: int = 1, width: int = 8, num_classes: int = 3, size: int = 16,
               depth: int = 2, kernel: int = 5,
               pad_mode: "PadMode | str" = PadMode.ZERO) -> ModelSpec:
    """Shape-preserving net: one ``kernel``-square conv, then 1x1 convs.

    The receptive field is exactly ``kernel x kernel``, so only border
    positions ever see padding.
    """
    layers = [LayerSpec("conv", in_channels, width, ConvGeometry.square(kernel, pad=kernel // 2)),
              LayerSpec("relu")]
    for _ in range(depth - 1):
        layers += [LayerSpec("conv", width, width, ConvGeometry.square(1)), LayerSpec("relu")]
    layers.append(LayerSpec("conv", width, num_classes, ConvGeometry.square(1)))
    return ModelSpec(tuple(layers), (in_channels, size, size), PadMode.parse(pad_mode))


def dense_classifier(input_shape: tuple, num_classes: int) -> ModelSpec:
    """Flatten followed by one dense layer (a linear softmax classifier)."""
    features = int(np.prod(input_shape))
    return ModelSpec((LayerSpec("flatten"), LayerSpec("dense", features, num_classes)),
                     tuple(input_shape))


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict
    seed: int
    train_config: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)

    @property
    def pad_mode(self) -> PadMode:
        return self.spec.pad_mode

    def model(self, pad_mode: "PadMode | str | None" = None,
              cache: Optional[RatioCache] = None) -> Sequential:
        # copies keep cross-testing read-only on the stored weights
        params = {k: v.copy() for k, v in self.params.items()}
        return build(self.spec, params, pad_mode, cache)


def write_metrics(rows: list, path: "str | os.PathLike") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], repr(float(r["train_acc"])), repr(float(r["val_acc"])),
                        repr(float(r["loss"]))])


def read_metrics(path: "str | os.PathLike") -> list:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "train_acc": float(r["train_acc"]),
                 "val_acc": float(r["val_acc"]), "loss": float(r["loss"])}
                for r in csv.DictReader(fh)]


def save_checkpoint(ckpt: Checkpoint, directory: "str | os.PathLike") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(ckpt.params):
        fname = f"{name}.pten"
        save_tensor(ckpt.params[name], d / fname)
        files[name] = fname
    manifest = {
        "format": "pcpad-checkpoint",
        "version": 1,
        "model": ckpt.spec.to_dict(),
        "seed": ckpt.seed,
        "pad_mode": ckpt.spec.pad_mode.value,
        "train_config": ckpt.train_config,
        "params": files,
    }
    if ckpt.metrics:
        write_metrics(ckpt.metrics, d / METRICS)
        manifest["metrics"] = METRICS
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory: "str | os.PathLike") -> Checkpoint:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {d}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {d}: {exc}") from None
    if manifest.get("format") != "pcpad-checkpoint" or manifest.get("version") != 1:
        raise CheckpointError(f"{d} is not a version-1 checkpoint")
    spec = ModelSpec.from_dict(manifest["model"])
    params = {name: load_tensor(d / fname) for name, fname in manifest["params"].items()}
    expected = init_params(spec, 0)
    if set(expected) != set(params):
        raise CheckpointError(f"parameter set {sorted(params)} does not match model")
    for name, arr in expected.items():
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {arr.shape}")
    metrics = read_metrics(d / manifest["metrics"]) if "metrics" in manifest else []
    return Checkpoint(spec, params, int(manifest["seed"]), manifest.get("train_config", {}), metrics)
