"""Deterministic SGD training, evaluation and pad-mode cross-testing."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import DatasetHandle
from .model import Checkpoint, ModelSpec, build, init_params, param_order
from .nn import Sequential, softmax_cross_entropy
from .padding import PadMode
from .pconv import RatioCache
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or not 0 < self.decay_factor <= 1 or not 0 <= self.momentum < 1:
            raise ValueError("lr > 0, decay_factor in (0, 1] and momentum in [0, 1) required")
        d = self.decay_epochs
        if any(e < 1 for e in d) or any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"decay epochs must be positive and strictly increasing, got {d}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch`` (decay applies after each listed epoch)."""
        n = sum(1 for e in self.decay_epochs if epoch > e)
        return self.lr * self.decay_factor ** n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)

    @property
    def best_val(self) -> float:
        return max(m["val_acc"] for m in self.metrics)

    def epochs_to(self, threshold: float) -> Optional[int]:
        for m in self.metrics:
            if m["val_acc"] >= threshold:
                return m["epoch"]
        return None


def predict(model: Sequential, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [model.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs)


def accuracy(model: Sequential, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of correct argmax predictions (per pixel for segmentation)."""
    return float(np.mean(predict(model, x).argmax(axis=1) == y))


def train(spec: ModelSpec, data: DatasetHandle, cfg: TrainConfig, *,
          pad_mode: "PadMode | str | None" = None, dtype=np.float32,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """SGD with momentum and step decay; bit-reproducible for a given seed.

    Raises :class:`TrainingDiverged` as soon as the loss stops being finite.
    """
    if pad_mode is not None:
        spec = spec.with_pad_mode(pad_mode)
    if spec.input_shape != data.input_shape:
        raise ValueError(f"model input {spec.input_shape} != dataset {data.input_shape}")
    x_tr, y_tr = data.train
    x_va, y_va = data.val
    x_tr, x_va = x_tr.astype(dtype), x_va.astype(dtype)
    y_tr = y_tr.astype(np.int64)
    params = init_params(spec, cfg.seed, dtype)
    cache = RatioCache()
    model = build(spec, params, cache=cache)
    plist = param_order(model)
    velocity = {name: np.zeros_like(layer.params[key]) for name, layer, key in plist}
    shuffle = np.random.default_rng([cfg.seed, 1])
    metrics = []
    n = len(x_tr)
    for epoch in range(1, cfg.epochs + 1):
        lr = np.dtype(dtype).type(cfg.lr_at(epoch))
        mom = np.dtype(dtype).type(cfg.momentum)
        order = shuffle.permutation(n)
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            where = f"at epoch {epoch}, batch starting {start} (lr={cfg.lr_at(epoch)})"
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = model.forward(xb)
                    loss, grad = softmax_cross_entropy(logits, yb)
                    if not np.isfinite(loss):
                        raise TrainingDiverged(f"loss became {loss} {where}")
                    model.backward(grad.astype(dtype))
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} {where}") from None
            for name, layer, key in plist:
                v = velocity[name]
                v *= mom
                v += layer.grads[key]
                layer.params[key] -= lr * v
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += yb.size
        try:
            val_acc = accuracy(model, x_va, y_va) if len(x_va) else float("nan")
        except NonFiniteError as exc:
            raise TrainingDiverged(f"{exc} in validation after epoch {epoch}") from None
        row = {"epoch": epoch, "train_acc": correct / seen, "val_acc": val_acc,
               "loss": total_loss / n}
        metrics.append(row)
        log.info("epoch %d loss %.4f train %.4f val %.4f", epoch, row["loss"],
                 row["train_acc"], row["val_acc"])
        if on_epoch is not None:
            on_epoch(row)
    ckpt = Checkpoint(spec, params, cfg.seed, {"train": cfg.to_dict(), "data": data.to_dict()},
                      metrics)
    return TrainResult(ckpt, metrics)


def cross_test(ckpt: Checkpoint, eval_mode: "PadMode | str", data: DatasetHandle,
               split: str = "val") -> float:
    """Accuracy of ``ckpt`` with every conv layer switched to ``eval_mode``."""
    x, y = data.split(split)
    model = ckpt.model(eval_mode, cache=RatioCache())
    dtype = next(iter(ckpt.params.values())).dtype
    return accuracy(model, x.astype(dtype), y)
