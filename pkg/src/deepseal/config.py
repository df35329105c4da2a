"""Experiment configuration: TOML-backed, schema-validated, round-trippable.

The data root env var DEEPSEAL_DATA_ROOT is substituted into relative dataset
and asset paths when set, so configs stay machine-portable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:
    import tomli as tomllib

DATA_ROOT_ENV = "DEEPSEAL_DATA_ROOT"


class ConfigError(ValueError):
    pass


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, dict):  # inline table (per-layer entries)
        inner = ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items())
        return "{" + inner + "}"
    raise ConfigError(f"cannot serialize value of type {type(value).__name__}")


def dumps_toml(doc: dict) -> str:
    """Serialize a {scalars..., section: {scalars...}} document."""
    lines = []
    for key, value in doc.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in doc.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k, v in value.items():
                if v is None:
                    continue
                lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def loads_toml(text: str) -> dict:
    return tomllib.loads(text)


def resolve_path(path: str) -> str:
    """Substitute the data root for relative paths when the env var is set."""
    if os.path.isabs(path):
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    return os.path.join(root, path) if root else path


def _require(table: dict, key: str, types, where: str):
    if key not in table:
        raise ConfigError(f"{where}.{key}: missing required field")
    value = table[key]
    if not isinstance(value, types):
        tn = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{where}.{key}: expected {tn}, got {type(value).__name__}")
    return value


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    model: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    passports: dict = field(default_factory=dict)
    stego: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        doc = loads_toml(text)
        known = {"seed", "out_dir", "model", "dataset", "train", "passports",
                 "stego", "thresholds"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        return cls(
            seed=int(doc.get("seed", 0)),
            out_dir=str(doc.get("out_dir", "runs/exp")),
            model=dict(doc.get("model", {})),
            dataset=dict(doc.get("dataset", {})),
            train=dict(doc.get("train", {})),
            passports=dict(doc.get("passports", {})),
            stego=dict(doc.get("stego", {})),
            thresholds=dict(doc.get("thresholds", {})),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_toml(fh.read())

    def to_toml(self) -> str:
        doc = {"seed": self.seed, "out_dir": self.out_dir}
        for section in ("model", "dataset", "train", "passports", "stego",
                        "thresholds"):
            table = getattr(self, section)
            if table:
                doc[section] = table
        return dumps_toml(doc)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_toml())

    # ----- validation -----------------------------------------------------

    def validate(self, need_passports: bool = False, need_stego: bool = False):
        """Schema and path checks; raises ConfigError naming the field."""
        if self.model:
            _require(self.model, "architecture", str, "model")
            if "num_classes" in self.model and int(self.model["num_classes"]) < 2:
                raise ConfigError("model.num_classes: must be >= 2")
        if self.dataset:
            kind = self.dataset.get("kind", "synthetic")
            if kind not in ("synthetic", "directory", "cifar10"):
                raise ConfigError(f"dataset.kind: unknown kind {kind!r}")
            if kind in ("directory", "cifar10"):
                root = resolve_path(_require(self.dataset, "root", str, "dataset"))
                if not os.path.exists(root):
                    raise ConfigError(f"dataset.root: path does not exist: {root}")
        if self.train:
            for key in ("omega_s", "omega_b"):
                if key in self.train and float(self.train[key]) < 0:
                    raise ConfigError(f"train.{key}: must be non-negative")
            if "epsilon" in self.train and float(self.train["epsilon"]) <= 0:
                raise ConfigError("train.epsilon: must be positive")
            if "epochs" in self.train and int(self.train["epochs"]) <= 0:
                raise ConfigError("train.epochs: must be positive")
        if need_passports:
            gammas = _require(self.passports, "gamma", list, "passports")
            betas = _require(self.passports, "beta", list, "passports")
            if len(gammas) != len(betas):
                raise ConfigError(
                    "passports.gamma/beta: need equally many gamma and beta images")
            for i, p in enumerate(list(gammas) + list(betas)):
                rp = resolve_path(p)
                if not os.path.exists(rp):
                    raise ConfigError(f"passports: file not found: {rp} (entry {i})")
        if need_stego:
            if "key" in self.stego:
                key_path = resolve_path(self.stego["key"])
                if not os.path.exists(key_path):
                    raise ConfigError(f"stego.key: file not found: {key_path}")
            if "data" in self.stego and self.stego["data"] != "synthetic":
                droot = resolve_path(self.stego["data"])
                if not os.path.exists(droot):
                    raise ConfigError(f"stego.data: path does not exist: {droot}")
        return self
