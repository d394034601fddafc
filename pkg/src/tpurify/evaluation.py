"""Accuracy and robustness measurement, report assembly and timing.

This module is the single source of truth for accuracy numbers: training
history, overfitting verdicts and report rows all call ``accuracy`` here.
Attacks are crafted white-box against the bare classifier with ground
truth labels; the purifier, when enabled, is applied only at prediction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, craft
from .data import Dataset
from .nn import Model, forward_logits, predict_labels
from .purify import PurifierSpec, tpap_predict
from .rng import derive


@dataclass
class EvalSpec:
    attacks: list[tuple[str, AttackSpec | None]]  # (name, spec); None = clean row
    purifier: PurifierSpec | None = None
    max_examples: int = 2000  # cap; multi-step attacks on full sets are slow
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        names = [name for name, _ in self.attacks]
        if len(set(names)) != len(names):
            raise ValueError(f"attack names must be unique, got {names}")


@dataclass
class ReportRow:
    attack: str
    purified: bool
    n: int
    accuracy_pct: float
    mean_linf: float
    wall_seconds: float


@dataclass
class RunReport:
    model_id: str
    dataset: str
    rows: list[ReportRow] = field(default_factory=list)


def predict(model: Model, images: np.ndarray, purifier: PurifierSpec | None,
            batch_size: int = 256) -> np.ndarray:
    """Labels from exactly one pipeline: purified or plain."""
    out = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        if purifier is not None:
            labels, _ = tpap_predict(model, chunk, purifier)
        else:
            labels = predict_labels(forward_logits(model, chunk))
        out[start:start + len(chunk)] = labels
    return out


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             purifier: PurifierSpec | None = None, batch_size: int = 256) -> float:
    """Percentage of correct predictions."""
    if len(images) == 0:
        raise ValueError("accuracy over an empty set is undefined")
    pred = predict(model, images, purifier, batch_size=batch_size)
    return float((pred == labels).sum()) / len(labels) * 100.0


def craft_attack_set(model: Model, images: np.ndarray, labels: np.ndarray,
                     spec: AttackSpec | None, seed: int = 0,
                     batch_size: int = 256) -> np.ndarray:
    """Adversarial copies of ``images``, crafted batchwise against ``model``."""
    out = np.empty_like(images)
    for bi, start in enumerate(range(0, len(images), batch_size)):
        sl = slice(start, start + batch_size)
        rng = derive(seed, "attack", bi)
        out[sl] = craft(model, images[sl], labels[sl], spec, rng=rng)
    return out


def evaluate(model: Model, dataset: Dataset, spec: EvalSpec) -> RunReport:
    """Accuracy per attack, with and without purification when configured."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    n = min(len(dataset), spec.max_examples) if spec.max_examples else len(dataset)
    images = dataset.images[:n]
    labels = dataset.labels[:n]
    report = RunReport(model_id=model.fingerprint()[:16], dataset=dataset.name)
    for name, atk in spec.attacks:
        t0 = time.perf_counter()
        adv = craft_attack_set(model, images, labels, atk, seed=spec.seed,
                               batch_size=spec.batch_size)
        craft_s = time.perf_counter() - t0
        mean_linf = float(np.abs(adv - images).reshape(n, -1).max(axis=1).mean())
        modes = [False, True] if spec.purifier is not None else [False]
        for purified in modes:
            t0 = time.perf_counter()
            acc = accuracy(model, adv, labels, spec.purifier if purified else None,
                           batch_size=spec.batch_size)
            wall = time.perf_counter() - t0
            # crafting cost is charged to the first row of a pair
            if not purified:
                wall += craft_s
            report.rows.append(ReportRow(attack=name, purified=purified, n=n,
                                         accuracy_pct=acc, mean_linf=mean_linf,
                                         wall_seconds=wall))
    return report


def timing_report(model: Model, dataset: Dataset, spec: EvalSpec,
                  sample: int = 256) -> dict[str, float]:
    """Wall-clock seconds per phase on a fixed sample: forward, attacks, purify."""
    n = min(len(dataset), sample)
    images, labels = dataset.images[:n], dataset.labels[:n]
    out: dict[str, float] = {}
    t0 = time.perf_counter()
    forward_logits(model, images)
    out["forward_seconds"] = time.perf_counter() - t0
    for name, atk in spec.attacks:
        if atk is None:
            continue
        t0 = time.perf_counter()
        craft_attack_set(model, images, labels, atk, seed=spec.seed, batch_size=n)
        out[f"attack_{name}_seconds"] = time.perf_counter() - t0
    if spec.purifier is not None:
        t0 = time.perf_counter()
        tpap_predict(model, images, spec.purifier)
        out["purify_seconds"] = time.perf_counter() - t0
    else:
        out["purify_seconds"] = 0.0
    return out


def ablation_grid(train_fn, dataset: tuple[Dataset, Dataset], epsilons: list[float],
                  batch_sizes: list[int]) -> dict[tuple[float, int], dict]:
    """Train one model per (epsilon, batch size) cell and summarize each.

    ``train_fn(train, test, epsilon, batch_size)`` must return
    (model, history, verdict); this module stays agnostic of the trainer.
    """
    if not epsilons or not batch_sizes:
        raise ValueError("epsilons and batch_sizes must be non-empty")
    train, test = dataset
    grid: dict[tuple[float, int], dict] = {}
    for eps in epsilons:
        for bs in batch_sizes:
            model, history, verdict = train_fn(train, test, eps, bs)
            grid[(eps, bs)] = {"model": model, "history": history, "verdict": verdict}
    return grid
