"""Evaluation: rank-based AUC with a quadratic brute-force oracle, mean
logloss with probability clipping, and wall-clock phase timing."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

CLIP = 1e-7


class MetricError(Exception):
    pass


@dataclass
class EvalResult:
    auc: float
    logloss: float
    n: int
    positives: int

    def to_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss,
                "n": self.n, "positives": self.positives}


def auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks; ties between a positive and a
    negative count half a win."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both classes")
    ranks = rankdata(scores, method="average")
    u = np.sum(ranks[labels == 1]) - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """Quadratic pairwise oracle: mean of win=1 / tie=0.5 / loss=0 over all
    positive-negative pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC undefined: need both classes")
    diff = pos[:, None] - neg[None, :]
    wins = np.sum(diff > 0) + 0.5 * np.sum(diff == 0)
    return float(wins / (pos.size * neg.size))


def mean_logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), CLIP, 1.0 - CLIP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def evaluate(scores, labels) -> EvalResult:
    labels = np.asarray(labels, dtype=np.float64)
    return EvalResult(auc=auc(scores, labels),
                      logloss=mean_logloss(scores, labels),
                      n=int(labels.size),
                      positives=int(np.sum(labels == 1)))


@dataclass
class PhaseTimings:
    pretrain_s: float = 0.0
    continued_s: float = 0.0
    inference_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.pretrain_s + self.continued_s

    def to_dict(self) -> dict:
        return {"PT": round(self.pretrain_s, 3), "CT": round(self.continued_s, 3),
                "TT": round(self.total_s, 3), "IT": round(self.inference_s, 3)}


class PhaseTimer:
    """Single-level phase timer on the monotonic clock."""

    def __init__(self):
        self._active = None
        self.elapsed: dict[str, float] = {}

    @contextmanager
    def phase(self, label: str):
        if self._active is not None:
            raise MetricError(f"nested phases not allowed: {self._active!r} is open")
        self._active = label
        start = time.perf_counter()
        try:
            yield
        finally:
            self.elapsed[label] = self.elapsed.get(label, 0.0) + time.perf_counter() - start
            self._active = None


def time_phase(label: str, body, timer: PhaseTimer | None = None):
    """Run `body()` inside a timed phase; returns (result, elapsed seconds)."""
    timer = timer or PhaseTimer()
    with timer.phase(label):
        result = body()
    return result, timer.elapsed[label]
