"""Run configuration: one TOML file, flag overrides, full validation.

Defaults mirror the reference training recipe: FGSM training at
epsilon 8/255, purification radius 8/255, batch size 128, SGD momentum
0.9, weight decay 1e-3, lr 0.1 dropped by 10 at epochs 75/90/140 of 150.
The default dataset is synthetic blobs so an empty config file is fully
runnable; real datasets are selected by name plus on-disk paths.

Budgets may be written as floats or as strings like "8/255".
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackSpec
from .data import AugmentSpec, Dataset, load_cifar10_bin, load_mnist_idx, make_synthetic_blobs
from .nn import Model, build_arch
from .purify import PurifierSpec
from .training import TrainSpec


class ConfigError(ValueError):
    """A config file failed to parse or a field failed validation."""


def parse_budget(value, where: str) -> float:
    """Float or 'a/b' fraction string; used for epsilon, alpha and xi."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        parts = value.split("/")
        try:
            if len(parts) == 2:
                return float(parts[0]) / float(parts[1])
            if len(parts) == 1:
                return float(parts[0])
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{where}: expected a number or 'a/b' fraction, got {value!r}")


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "threads": 0,  # 0 = leave BLAS threading alone
    "data": {
        "name": "blobs",
        "dir": "",                # cifar10 batch directory
        "train_images": "",       # mnist idx paths
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
        "augment": "auto",        # auto | on | off
        "blobs_classes": 2,
        "blobs_per_class": 500,
        "blobs_test_per_class": 200,
        "blobs_dims": 16,
        "blobs_separation": 6.0,
        "max_train": 0,           # 0 = all
    },
    "model": {
        "arch": "auto",           # auto | mlp | smallcnn
        "normalize": False,
    },
    "train": {
        "epochs": 150,
        "batch_size": 128,
        "lr0": 0.1,
        "lr_drops": [[75, 10.0], [90, 10.0], [140, 10.0]],
        "momentum": 0.9,
        "weight_decay": 1e-3,
        "eval_every": 1,
        "eval_max": 1000,
        "attack_kind": "fgsm",    # fgsm | pgd | none
        "epsilon": "8/255",
        "pgd_steps": 10,          # for attack_kind = pgd
        "pgd_alpha": "2/255",
    },
    "eval": {
        "attacks": ["clean", "fgsm", "pgd20"],
        "epsilon": "8/255",
        "pgd_alpha": "2/255",
        "max_examples": 2000,
        "batch_size": 256,
    },
    "purifier": {
        "enabled": True,
        "xi": "8/255",
    },
}

# CIFAR-10 channel statistics for the optional fixed normalize layer.
CIFAR10_MEAN = [0.4914, 0.4822, 0.4465]
CIFAR10_STD = [0.2470, 0.2435, 0.2616]


def _merge(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key}: expected a table")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def _apply_overrides(doc: dict, overrides: dict[str, Any]) -> None:
    for dotted, val in overrides.items():
        parts = dotted.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val


@dataclass
class Config:
    raw: dict[str, Any]

    # Typed accessors; each validates its slice of the document.
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> str:
        return str(self.raw["output_dir"])

    @property
    def threads(self) -> int:
        return int(self.raw["threads"])

    def train_attack(self) -> AttackSpec | None:
        t = self.raw["train"]
        kind = t["attack_kind"]
        if kind == "none":
            return None
        eps = parse_budget(t["epsilon"], "train.epsilon")
        try:
            if kind == "fgsm":
                return AttackSpec.fgsm_spec(eps)
            if kind == "pgd":
                return AttackSpec.pgd_spec(eps, steps=int(t["pgd_steps"]),
                                           alpha=parse_budget(t["pgd_alpha"], "train.pgd_alpha"))
        except ValueError as e:
            raise ConfigError(f"train.attack: {e}") from None
        raise ConfigError(f"train.attack_kind: expected fgsm, pgd or none, got {kind!r}")

    def augment_spec(self) -> AugmentSpec | None:
        mode = self.raw["data"]["augment"]
        name = self.raw["data"]["name"]
        if mode not in ("auto", "on", "off"):
            raise ConfigError(f"data.augment: expected auto, on or off, got {mode!r}")
        if mode == "off" or (mode == "auto" and name != "cifar10"):
            return None
        return AugmentSpec(pad_crop=4, hflip=True, seed=self.seed)

    def train_spec(self) -> TrainSpec:
        t = self.raw["train"]
        try:
            drops = tuple((int(e), float(d)) for e, d in t["lr_drops"])
        except (TypeError, ValueError):
            raise ConfigError(f"train.lr_drops: expected [[epoch, divisor], ...], got {t['lr_drops']!r}") from None
        try:
            return TrainSpec(
                epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                lr0=float(t["lr0"]), lr_drops=drops, momentum=float(t["momentum"]),
                weight_decay=float(t["weight_decay"]), attack=self.train_attack(),
                seed=self.seed, eval_every=int(t["eval_every"]),
                eval_max=int(t["eval_max"]), augment_spec=self.augment_spec())
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None

    def purifier_spec(self) -> PurifierSpec | None:
        p = self.raw["purifier"]
        if not p["enabled"]:
            return None
        xi = parse_budget(p["xi"], "purifier.xi")
        try:
            return PurifierSpec(xi=xi)
        except ValueError as e:
            raise ConfigError(f"purifier.xi: {e}") from None

    def eval_attacks(self) -> list[tuple[str, AttackSpec | None]]:
        e = self.raw["eval"]
        eps = parse_budget(e["epsilon"], "eval.epsilon")
        alpha = parse_budget(e["pgd_alpha"], "eval.pgd_alpha")
        out: list[tuple[str, AttackSpec | None]] = []
        for name in e["attacks"]:
            try:
                if name == "clean":
                    out.append((name, None))
                elif name == "fgsm":
                    out.append((name, AttackSpec.fgsm_spec(eps)))
                elif name.startswith("pgd"):
                    steps = int(name[3:] or 20)
                    out.append((name, AttackSpec.pgd_spec(eps, steps=steps, alpha=alpha)))
                else:
                    raise ConfigError(f"eval.attacks: unknown attack {name!r}")
            except ValueError as err:
                raise ConfigError(f"eval.attacks[{name}]: {err}") from None
        return out

    def arch_name(self, dataset_name: str) -> str:
        arch = self.raw["model"]["arch"]
        if arch == "auto":
            return "mlp" if dataset_name == "blobs" else "smallcnn"
        if arch not in ("mlp", "smallcnn"):
            raise ConfigError(f"model.arch: expected auto, mlp or smallcnn, got {arch!r}")
        return arch

    def build_model(self, input_shape, num_classes, dataset_name: str) -> Model:
        normalize = None
        if self.raw["model"]["normalize"]:
            if dataset_name != "cifar10":
                raise ConfigError("model.normalize is only defined for cifar10")
            normalize = (CIFAR10_MEAN, CIFAR10_STD)
        return build_arch(self.arch_name(dataset_name), input_shape, num_classes,
                          seed=self.seed, normalize=normalize)

    def load_datasets(self) -> tuple[Dataset, Dataset]:
        d = self.raw["data"]
        name = d["name"]
        if name == "blobs":
            train = make_synthetic_blobs(int(d["blobs_classes"]), int(d["blobs_per_class"]),
                                         int(d["blobs_dims"]), float(d["blobs_separation"]),
                                         seed=self.seed)
            test = make_synthetic_blobs(int(d["blobs_classes"]), int(d["blobs_test_per_class"]),
                                        int(d["blobs_dims"]), float(d["blobs_separation"]),
                                        seed=self.seed + 1)
        elif name == "cifar10":
            if not d["dir"]:
                raise ConfigError("data.dir: a cifar10 batch directory is required")
            if not os.path.isdir(d["dir"]):
                raise ConfigError(f"data.dir: no such directory: {d['dir']}")
            train = load_cifar10_bin(d["dir"], "train")
            test = load_cifar10_bin(d["dir"], "test")
        elif name == "mnist":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not d[key]:
                    raise ConfigError(f"data.{key}: required for mnist")
                if not os.path.exists(d[key]):
                    raise ConfigError(f"data.{key}: no such file: {d[key]}")
            train = load_mnist_idx(d["train_images"], d["train_labels"])
            test = load_mnist_idx(d["test_images"], d["test_labels"])
        else:
            raise ConfigError(f"data.name: expected blobs, cifar10 or mnist, got {name!r}")
        cap = int(d["max_train"])
        if cap:
            train = train.take(cap, seed=self.seed)
        return train, test

    def validate(self) -> None:
        """Run every section's construction; raises ConfigError on the first defect."""
        self.train_spec()
        self.purifier_spec()
        self.eval_attacks()
        self.arch_name(self.raw["data"]["name"])
        if self.threads < 0:
            raise ConfigError(f"threads must be >= 0, got {self.threads}")


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> Config:
    """Parse TOML (if given), apply defaults then overrides, validate."""
    doc: dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    if overrides:
        _apply_overrides(doc, overrides)
    cfg = Config(raw=_merge(DEFAULTS, doc, ""))
    cfg.validate()
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def dump_toml(doc: dict[str, Any]) -> str:
    """Serialize the effective config; re-loading reproduces the run."""
    lines: list[str] = []
    tables = []
    for key, val in doc.items():
        if isinstance(val, dict):
            tables.append((key, val))
        else:
            lines.append(f"{key} = {_toml_value(val)}")
    for key, val in tables:
        lines.append("")
        lines.append(f"[{key}]")
        for k, v in val.items():
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def write_effective_config(cfg: Config, out_dir: str) -> str:
    path = os.path.join(out_dir, "config-echo.toml")
    with open(path, "w") as f:
        f.write(dump_toml(cfg.raw))
    return path
