"""L-infinity gradient-sign attacks: single-step FGSM and iterative PGD.

Both craft adversarial pixels from the loss gradient with respect to the
input, never touch model parameters, and keep outputs inside [0, 1] and
inside the epsilon ball around the original batch after every iterate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Model, input_gradient

PGD_DEFAULT_ALPHA = 2.0 / 255.0


@dataclass
class AttackSpec:
    kind: str  # "fgsm" or "pgd"
    epsilon: float
    alpha: float | None = None
    steps: int = 1
    random_init: bool = False
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"attack kind must be fgsm or pgd, got {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.alpha is None:
            self.alpha = self.epsilon if self.kind == "fgsm" else PGD_DEFAULT_ALPHA
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.kind == "fgsm":
            if self.steps != 1:
                raise ValueError(f"fgsm is single-step, got steps={self.steps}")
            if self.alpha != self.epsilon:
                raise ValueError(f"fgsm requires alpha == epsilon, got alpha={self.alpha}")
        if self.epsilon > 0 and self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")

    @staticmethod
    def fgsm_spec(epsilon: float) -> "AttackSpec":
        return AttackSpec(kind="fgsm", epsilon=epsilon)

    @staticmethod
    def pgd_spec(epsilon: float, steps: int = 20, alpha: float = PGD_DEFAULT_ALPHA,
                 random_init: bool = True) -> "AttackSpec":
        return AttackSpec(kind="pgd", epsilon=epsilon, alpha=alpha, steps=steps,
                          random_init=random_init)


def sign(t: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(np.asarray(t, dtype=np.float32))


def fgsm(model: Model, batch: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """One loss-ascending step of size epsilon, clamped to valid pixels."""
    if spec.kind != "fgsm":
        raise ValueError(f"fgsm called with a {spec.kind!r} spec")
    batch = np.asarray(batch, dtype=np.float32)
    if spec.epsilon == 0.0:
        return batch.copy()
    g = input_gradient(model, batch, labels)
    lo, hi = spec.clamp
    return np.clip(batch + np.float32(spec.epsilon) * sign(g), lo, hi)


def pgd(model: Model, batch: np.ndarray, labels: np.ndarray, spec: AttackSpec,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated sign steps, projected into the epsilon ball after each one.

    The projection order per iterate is: ascend, clip into the ball around
    the original batch, clip into the pixel range. Random starts draw
    uniformly from the ball (then clip to pixels) and require an rng.
    """
    if spec.kind != "pgd":
        raise ValueError(f"pgd called with a {spec.kind!r} spec")
    x0 = np.asarray(batch, dtype=np.float32)
    if spec.epsilon == 0.0:
        return x0.copy()
    lo, hi = spec.clamp
    eps = np.float32(spec.epsilon)
    alpha = np.float32(spec.alpha)
    ball_lo, ball_hi = x0 - eps, x0 + eps

    if spec.random_init:
        if rng is None:
            raise ValueError("pgd with random_init needs an rng")
        x = x0 + rng.uniform(-spec.epsilon, spec.epsilon, size=x0.shape).astype(np.float32)
        x = np.clip(x, lo, hi)
    else:
        x = x0.copy()

    for _ in range(spec.steps):
        g = input_gradient(model, x, labels)
        x = x + alpha * sign(g)
        x = np.clip(x, ball_lo, ball_hi)
        x = np.clip(x, lo, hi)
    return x


def craft(model: Model, batch: np.ndarray, labels: np.ndarray,
          spec: AttackSpec | None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch on spec kind; None means clean passthrough (copy)."""
    if spec is None:
        return np.asarray(batch, dtype=np.float32).copy()
    if spec.kind == "fgsm":
        return fgsm(model, batch, labels, spec)
    return pgd(model, batch, labels, spec, rng=rng)
