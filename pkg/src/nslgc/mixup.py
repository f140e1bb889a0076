"""Mixup regularization: convex blending of example pairs.

One mixing coefficient lambda ~ Beta(alpha, alpha) is drawn per batch and
applied to every pair; partners come from a uniform random permutation of
the batch. Targets blend with the same lambda, so they become soft even
when the inputs carry hard labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MixupConfig:
    """alpha is the symmetric Beta concentration; None disables mixup."""

    alpha: float | None = None

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0.0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")

    @property
    def enabled(self) -> bool:
        return self.alpha is not None


@dataclass
class MixupSample:
    lam: float
    x: np.ndarray
    y: np.ndarray


def sample_lambda(config: MixupConfig, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) realized as g1 / (g1 + g2) with gi ~ Gamma(alpha, 1)."""
    if not config.enabled:
        raise ValueError("sample_lambda called with mixup disabled")
    g1 = rng.gamma(config.alpha, 1.0)
    g2 = rng.gamma(config.alpha, 1.0)
    total = g1 + g2
    if total == 0.0:  # numerically possible only for tiny alpha
        return 0.5
    return float(g1 / total)


def mix_pair(x_i: np.ndarray, y_i, x_j: np.ndarray, y_j, lam: float) -> MixupSample:
    """Exact convex combination: x = lam*x_i + (1-lam)*x_j, same for targets."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError(f"mix_pair: shape mismatch {x_i.shape} vs {x_j.shape}")
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if y_i.shape != y_j.shape:
        raise ValueError(f"mix_pair: target shape mismatch {y_i.shape} vs {y_j.shape}")
    return MixupSample(lam=lam, x=lam * x_i + (1.0 - lam) * x_j, y=lam * y_i + (1.0 - lam) * y_j)


def mixup_batch(
    inputs: np.ndarray, targets: np.ndarray, config: MixupConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, float | None, np.ndarray | None]:
    """Blend a batch with a permuted copy of itself; one shared lambda per batch.

    Returns (x_mixed, y_mixed, lam, perm). A disabled config passes the
    batch through unchanged with lam and perm set to None.
    """
    if not config.enabled:
        return inputs, targets, None, None
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError(f"mixup_batch: {inputs.shape[0]} inputs vs {targets.shape[0]} targets")
    if inputs.shape[0] < 2:
        raise ValueError(f"mixup_batch needs at least 2 examples, got {inputs.shape[0]}")
    lam = sample_lambda(config, rng)
    perm = rng.permutation(inputs.shape[0])
    x_mixed = lam * inputs + (1.0 - lam) * inputs[perm]
    y_mixed = lam * targets + (1.0 - lam) * targets[perm]
    return x_mixed, y_mixed, lam, perm
