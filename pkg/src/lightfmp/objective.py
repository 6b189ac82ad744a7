"""Loss assembly: summed binary log-loss on logits, the Lagrangian
sparsity penalty on the mean gate value, and dual-ascent multiplier
updates.

The sparsity target defaults to (1 - tau) retained fields, so tau=0.75
prunes 75% of fields. `compat_target_tau` switches to penalizing
(mean z - tau) directly for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConstraintState:
    tau: float
    lam: float = 0.0
    phi: float = 0.0
    multiplier_lr: float = 0.01
    compat_target_tau: bool = False

    def __post_init__(self):
        if not (0.0 <= self.tau < 1.0):
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")

    @property
    def target_active(self) -> float:
        return self.tau if self.compat_target_tau else 1.0 - self.tau


@dataclass
class LossReport:
    step: int
    task_loss: float
    constraint_loss: float
    total: float
    mean_z: float
    lam: float
    phi: float


def logloss_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy on logits, stable for large |logit|:
    loss_i = softplus(logit_i) - y_i * logit_i; gradient = sigmoid - y."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if logits.shape != labels.shape:
        raise ValueError("logits/labels shape mismatch")
    softplus = np.logaddexp(0.0, logits)
    loss = float(np.sum(softplus - labels * logits))
    grad = _sigmoid(logits) - labels
    return loss, grad


def constraint_loss(z: np.ndarray, state: ConstraintState) -> tuple[float, np.ndarray]:
    m = z.shape[0]
    g = float(np.mean(z)) - state.target_active
    value = state.lam * g + state.phi * g * g
    dz = np.full(m, (state.lam + 2.0 * state.phi * g) / m)
    return value, dz


def total_loss(task: float, constraint: float) -> float:
    return task + constraint


def update_multipliers(state: ConstraintState, mean_z: float) -> ConstraintState:
    """Dual ascent: lambda follows the signed violation, phi accumulates its
    square and stays nonnegative."""
    g = mean_z - state.target_active
    return ConstraintState(
        tau=state.tau,
        lam=state.lam + state.multiplier_lr * g,
        phi=max(0.0, state.phi + state.multiplier_lr * g * g),
        multiplier_lr=state.multiplier_lr,
        compat_target_tau=state.compat_target_tau,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
