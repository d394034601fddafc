"""SGD training with a step schedule, adversarial training and the
robust-overfitting check.

The adversarial trainer regenerates the attack batch against the current
weights before every update (ground-truth labels, frozen parameters), then
updates on the adversarial batch only. All accuracy numbers in the history
come from the evaluation module; this file never computes its own.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .attacks import AttackSpec, craft
from .data import AugmentSpec, Dataset, augment, batch_iter
from .nn import Model, cross_entropy
from .rng import derive
from .tensor import Tensor, backward


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; training aborted."""


PAPER_LR_DROPS = ((75, 10.0), (90, 10.0), (140, 10.0))
PAPER_EPOCHS = 150


def scaled_lr_drops(epochs: int) -> tuple[tuple[int, float], ...]:
    """The 75/90/140-of-150 step schedule rescaled to a shorter run."""
    return tuple((max(1, round(e * epochs / PAPER_EPOCHS)), d) for e, d in PAPER_LR_DROPS)


@dataclass
class TrainSpec:
    epochs: int = PAPER_EPOCHS
    batch_size: int = 128
    lr0: float = 0.1
    lr_drops: tuple[tuple[int, float], ...] = PAPER_LR_DROPS
    momentum: float = 0.9
    weight_decay: float = 1e-3
    attack: AttackSpec | None = None  # None = clean training
    seed: int = 0
    eval_every: int = 1
    eval_max: int = 1000      # examples per accuracy measurement in history
    eval_pgd_steps: int = 20
    augment_spec: AugmentSpec | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    wall_seconds: float
    clean_train_acc: float | None = None
    adv_train_acc: float | None = None
    clean_test_acc: float | None = None
    fgsm_test_acc: float | None = None
    pgd_test_acc: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def last_eval(self) -> EpochRecord | None:
        for rec in reversed(self.records):
            if rec.clean_test_acc is not None:
                return rec
        return None


@dataclass
class OverfitThresholds:
    trained_train_min: float = 90.0
    other_train_max: float = 10.0
    clean_test_min: float = 70.0
    trained_test_min: float = 60.0


@dataclass
class OverfitVerdict:
    is_robust_overfit: bool
    trained_attack_train_acc: float
    other_attack_train_acc: float
    clean_test_acc: float
    trained_attack_test_acc: float


def lr_at(epoch: int, spec: TrainSpec) -> float:
    """Learning rate during a 1-indexed epoch: lr0 over the applied divisors."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-indexed, got {epoch}")
    lr = spec.lr0
    for drop_epoch, divisor in spec.lr_drops:
        if drop_epoch <= epoch:
            lr /= divisor
    return lr


def sgd_step(params: dict, grads: dict, state: dict, lr: float,
             momentum: float, weight_decay: float) -> dict:
    """Classic momentum SGD with coupled weight decay, in place.

    v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr * v.
    Iteration order is the parameter dict order, which is fixed by model
    construction, so updates are bit-reproducible.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name!r} {p.data.shape}")
        if weight_decay:
            g = g + np.float32(weight_decay) * p.data
        v = state.get(name)
        if momentum:
            v = g if v is None else np.float32(momentum) * v + g
            state[name] = v
        else:
            v = g
        p.data -= np.float32(lr) * v
    return state


def clone_with_state(model: Model, state: dict[str, np.ndarray]) -> Model:
    clone = Model([dict(l) for l in model.arch],
                  {k: Tensor(p.data.copy()) for k, p in model.params.items()},
                  model.input_shape, model.num_classes)
    clone.load_state(state)
    return clone


def _history_eval(model: Model, train: Dataset, test: Dataset, spec: TrainSpec,
                  rec: EpochRecord) -> None:
    train_sub = train.take(spec.eval_max, seed=spec.seed)
    test_sub = test.take(spec.eval_max, seed=spec.seed)
    eps = spec.attack.epsilon if spec.attack is not None else 8.0 / 255.0
    rec.clean_train_acc = evaluation.accuracy(model, train_sub.images, train_sub.labels)
    rec.clean_test_acc = evaluation.accuracy(model, test_sub.images, test_sub.labels)
    if spec.attack is not None:
        adv_train = evaluation.craft_attack_set(model, train_sub.images, train_sub.labels,
                                                spec.attack, seed=spec.seed)
        rec.adv_train_acc = evaluation.accuracy(model, adv_train, train_sub.labels)
    if eps > 0:
        fgsm_test = evaluation.craft_attack_set(model, test_sub.images, test_sub.labels,
                                                AttackSpec.fgsm_spec(eps), seed=spec.seed)
        rec.fgsm_test_acc = evaluation.accuracy(model, fgsm_test, test_sub.labels)
        pgd_test = evaluation.craft_attack_set(
            model, test_sub.images, test_sub.labels,
            AttackSpec.pgd_spec(eps, steps=spec.eval_pgd_steps), seed=spec.seed)
        rec.pgd_test_acc = evaluation.accuracy(model, pgd_test, test_sub.labels)


def _best_score(rec: EpochRecord, attack: AttackSpec | None) -> float | None:
    if rec.clean_test_acc is None:
        return None
    if attack is None:
        return rec.clean_test_acc
    trained = rec.fgsm_test_acc if attack.kind == "fgsm" else rec.pgd_test_acc
    if trained is None:
        return None
    return (rec.clean_test_acc + trained) / 2.0


def adversarial_train(model: Model, train: Dataset, test: Dataset, spec: TrainSpec,
                      on_epoch=None) -> tuple[TrainHistory, dict[str, np.ndarray]]:
    """Train ``model`` in place; returns the history and the best state.

    With an attack configured this is adversarial training: each batch is
    replaced by its adversarial counterpart crafted against the current
    weights. The best state maximizes the mean of clean and trained-attack
    test accuracy over the eval epochs (final epoch always evaluated).
    """
    if train.num_classes != model.num_classes or test.num_classes != model.num_classes:
        raise ValueError("dataset num_classes does not match the model")
    if train.input_shape != model.input_shape:
        raise ValueError(f"dataset shape {train.input_shape} does not match model {model.input_shape}")
    history = TrainHistory()
    opt_state: dict[str, np.ndarray] = {}
    best_state = model.state()
    best_score = -1.0
    for epoch in range(1, spec.epochs + 1):
        lr = lr_at(epoch, spec)
        t0 = time.perf_counter()
        loss_sum, n_batches = 0.0, 0
        aug_rng = derive(spec.seed, "augment", epoch)
        for bi, (xb, yb) in enumerate(batch_iter(train, spec.batch_size, spec.seed, epoch)):
            if spec.augment_spec is not None:
                xb = augment(xb, spec.augment_spec, aug_rng)
            if spec.attack is not None:
                xb = craft(model, xb, yb, spec.attack,
                           rng=derive(spec.seed, "train-attack", epoch, bi))
            with model.trainable():
                loss = cross_entropy(model.forward(xb), yb)
                model.zero_grad()
                backward(loss)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDiverged(f"non-finite loss {val} at epoch {epoch}, batch {bi}")
            loss_sum += val
            n_batches += 1
            grads = {name: p.grad for name, p in model.params.items()}
            sgd_step(model.params, grads, opt_state, lr, spec.momentum, spec.weight_decay)
        rec = EpochRecord(epoch=epoch, lr=lr, mean_loss=loss_sum / max(n_batches, 1),
                          wall_seconds=time.perf_counter() - t0)
        if epoch % spec.eval_every == 0 or epoch == spec.epochs:
            _history_eval(model, train, test, spec, rec)
            score = _best_score(rec, spec.attack)
            if score is not None and score > best_score:
                best_score = score
                best_state = model.state()
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history, best_state


def robust_overfit_check(model: Model, train: Dataset, test: Dataset,
                         trained_attack: AttackSpec, other_attack: AttackSpec,
                         thresholds: OverfitThresholds = OverfitThresholds(),
                         max_examples: int = 2000, seed: int = 0) -> OverfitVerdict:
    """Gradient-sign robust overfitting verdict.

    True when train accuracy on the trained attack exceeds the high bar
    while other-attack train accuracy sits below the low bar, and the test
    floors (clean and trained-attack) both hold.
    """
    train_sub = train.take(max_examples, seed=seed)
    test_sub = test.take(max_examples, seed=seed)
    adv_trained = evaluation.craft_attack_set(model, train_sub.images, train_sub.labels,
                                              trained_attack, seed=seed)
    trained_train = evaluation.accuracy(model, adv_trained, train_sub.labels)
    adv_other = evaluation.craft_attack_set(model, train_sub.images, train_sub.labels,
                                            other_attack, seed=seed)
    other_train = evaluation.accuracy(model, adv_other, train_sub.labels)
    clean_test = evaluation.accuracy(model, test_sub.images, test_sub.labels)
    adv_test = evaluation.craft_attack_set(model, test_sub.images, test_sub.labels,
                                           trained_attack, seed=seed)
    trained_test = evaluation.accuracy(model, adv_test, test_sub.labels)
    verdict = (trained_train > thresholds.trained_train_min
               and other_train < thresholds.other_train_max
               and clean_test >= thresholds.clean_test_min
               and trained_test >= thresholds.trained_test_min)
    return OverfitVerdict(is_robust_overfit=bool(verdict),
                          trained_attack_train_acc=trained_train,
                          other_attack_train_acc=other_train,
                          clean_test_acc=clean_test,
                          trained_attack_test_acc=trained_test)
