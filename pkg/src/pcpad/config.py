"""INI-style run configuration for ``pcpad train``.

Sections and keys are fixed; anything unknown is an error. Relative paths
are resolved against the directory holding the config file. See
``configs/border_classify.ini`` for a commented example.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DatasetHandle
from .model import ModelSpec, border_cnn, border_fcn
from .padding import PadMode
from .train import TrainConfig


class ConfigError(ValueError):
    pass


ARCHS = ("border-cnn", "border-fcn")

_SCHEMA = {
    "data": {f.name: f.type for f in fields(DatasetHandle)},
    "model": {"arch": "str", "width": "int", "depth": "int", "kernel": "int",
              "pad_mode": "str"},
    "train": {f.name: f.type for f in fields(TrainConfig)},
    "output": {"dir": "str"},
}


def _convert(section: str, key: str, raw: str):
    kind = str(_SCHEMA[section][key])
    try:
        if key == "decay_epochs":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None


@dataclass(frozen=True)
class RunConfig:
    data: DatasetHandle
    model: dict
    train: TrainConfig
    output_dir: Path

    def model_spec(self, pad_mode: "PadMode | str | None" = None) -> ModelSpec:
        m = dict(self.model)
        arch = m.pop("arch", "border-cnn")
        mode = PadMode.parse(pad_mode or m.pop("pad_mode", "zero"))
        m.pop("pad_mode", None)
        d = self.data
        if arch == "border-cnn":
            m.pop("depth", None)
            m.pop("kernel", None)
            return border_cnn(1, num_classes=d.num_classes, size=d.height, pad_mode=mode, **m)
        return border_fcn(1, num_classes=d.num_classes, size=d.height, pad_mode=mode, **m)

    @property
    def pad_mode(self) -> PadMode:
        return PadMode.parse(self.model.get("pad_mode", "zero"))


def parse_config(text: str, base: Path = Path(".")) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _convert(section, key, raw)
    if "data" not in values or "kind" not in values["data"]:
        raise ConfigError("[data] kind is required")
    model = values.get("model", {})
    if model.get("arch", "border-cnn") not in ARCHS:
        raise ConfigError(f"[model] arch must be one of {', '.join(ARCHS)}")
    if "pad_mode" in model:
        PadMode.parse(model["pad_mode"])
    try:
        data = DatasetHandle(**values["data"])
        train = TrainConfig(**values.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = Path(values.get("output", {}).get("dir", "run"))
    return RunConfig(data, model, train, out if out.is_absolute() else (base / out).resolve())


def load_config(path: "str | Path") -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)
