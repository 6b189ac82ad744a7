"""The three-phase pruning procedure: gate pretraining on a small subset,
structural pruning with weight transfer, continued training of the
compact model, and inference through it.

Model handoff: M_S (fresh) -> M_T (pretrained with gate) -> M_P (pruned,
weights transferred) -> M_O (continued-trained final model).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import gate as hc
from .compute import (AdamState, BackboneModel, NumericalError, adam_step,
                      forward, mlp_forward)
from .data import Batch, Dataset, FieldSchema, SplitSet, batch_iter, stratified_split
from .metrics import PhaseTimer, evaluate
from .objective import (ConstraintState, LossReport, constraint_loss,
                        logloss_batch, total_loss, update_multipliers)


class PruneError(Exception):
    pass


@dataclass
class PruneMask:
    keep: np.ndarray        # (m,) bool
    importance: np.ndarray  # (m,) deterministic gate values in [0, 1]
    tau: float

    @property
    def m(self) -> int:
        return self.keep.shape[0]

    @property
    def retained_count(self) -> int:
        return int(np.sum(self.keep))

    @property
    def keep_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    def to_dict(self) -> dict:
        return {"keep": self.keep.astype(int).tolist(),
                "importance": [float(v) for v in self.importance],
                "tau": self.tau, "m": self.m, "m_prime": self.retained_count}

    @classmethod
    def from_dict(cls, d: dict) -> "PruneMask":
        return cls(keep=np.asarray(d["keep"], dtype=bool),
                   importance=np.asarray(d["importance"], dtype=np.float64),
                   tau=float(d["tau"]))


@dataclass
class PhaseConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-4
    gate_learning_rate: float = 0.05
    multiplier_lr: float = 2.0
    tau: float = 0.5
    seed: int = 0
    embed_dim: int = 10
    hidden_sizes: tuple = (400, 400, 200)
    weight_decay: float = 1e-5
    eval_every: int = 0
    early_stop: bool = False
    compat_eq4: bool = False
    f64: bool = False

    @property
    def dtype(self):
        return np.float64 if self.f64 else np.float32

    def __post_init__(self):
        if self.learning_rate <= 0 or self.gate_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.tau < 1.0):
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")


@dataclass
class TrainLog:
    reports: list = field(default_factory=list)
    mean_step_seconds: float = 0.0


def _shuffle_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def pretrain(base: BackboneModel, pretrain_split: Dataset, cfg: PhaseConfig,
             val_split: Optional[Dataset] = None) -> tuple[BackboneModel, hc.GateParams, TrainLog]:
    """Joint training of model weights and hard-concrete gates on the small
    subset: per step, draw one noise vector shared across the batch, mask
    the embeddings, descend the total loss, then dual-ascend the
    multipliers."""
    if len(pretrain_split) == 0:
        raise ValueError("empty pretraining split")
    model = base.astype(cfg.dtype)
    gate = hc.init_gate(model.m, cfg.seed)
    cstate = ConstraintState(tau=cfg.tau, multiplier_lr=cfg.multiplier_lr,
                             compat_target_tau=cfg.compat_eq4)
    opt = AdamState(model.params(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    gate_opt = AdamState({"gate": gate.log_alpha}, cfg.gate_learning_rate, weight_decay=0.0)
    noise_rng = np.random.default_rng([cfg.seed, 0x401e])
    log = TrainLog()
    step = 0
    step_time = 0.0
    val_history: list[float] = []
    for epoch in range(cfg.epochs):
        for batch in batch_iter(pretrain_split, cfg.batch_size,
                                shuffle_seed=_shuffle_seed(cfg.seed, epoch)):
            t0 = time.perf_counter()
            u = np.clip(noise_rng.random(model.m), 1e-12, 1.0 - 1e-12)
            sample = hc.sample_mask(gate, u)
            logits, tape = forward(model, batch, z=sample.z)
            task, dlogits = logloss_batch(logits, batch.y)
            con, dz_con = constraint_loss(sample.z, cstate)
            total = total_loss(task, con)
            if not np.isfinite(total):
                raise NumericalError(f"non-finite loss at pretraining step {step}")
            from .compute import backward
            grads, dz_task, _ = backward(model, tape, dlogits)
            d_log_alpha = hc.mask_grad(sample, dz_task + dz_con, gate)
            new_params = adam_step(model.params(), grads, opt)
            for name, value in new_params.items():
                model.set_param(name, value)
            gate.log_alpha = adam_step({"gate": gate.log_alpha},
                                       {"gate": d_log_alpha}, gate_opt)["gate"]
            mean_z = float(np.mean(sample.z))
            cstate = update_multipliers(cstate, mean_z)
            log.reports.append(LossReport(step=step, task_loss=task,
                                          constraint_loss=con, total=total,
                                          mean_z=mean_z, lam=cstate.lam, phi=cstate.phi))
            step += 1
            step_time += time.perf_counter() - t0
        if cfg.early_stop and val_split is not None and cfg.eval_every \
                and (epoch + 1) % cfg.eval_every == 0:
            z_det = hc.deterministic_mask(gate)
            scores = predict(model, Batch(val_split.x, val_split.y), z=z_det)
            from .metrics import mean_logloss
            val_history.append(mean_logloss(scores, val_split.y))
            feasible = abs(float(np.mean(z_det)) - cstate.target_active) < 0.01
            plateau = len(val_history) >= 5 and \
                min(val_history[-5:]) >= min(val_history[:-4]) - 1e-5
            if feasible and plateau:
                break
    log.mean_step_seconds = step_time / max(step, 1)
    return model, gate, log


def predict(model: BackboneModel, batch: Batch, z: Optional[np.ndarray] = None) -> np.ndarray:
    logits, _ = forward(model, batch, z=z)
    return 1.0 / (1.0 + np.exp(-logits.astype(np.float64).reshape(-1)))


def prune(m_t: BackboneModel, gate: hc.GateParams, tau: float,
          warn=None) -> tuple[BackboneModel, PruneMask]:
    """Threshold the deterministic gate at 0.5, then enforce exactly
    m' = round(m(1-tau)) fields by taking the top-m' gate values (ties go
    to the lower field index); drop pruned embedding tables and the
    matching column blocks of the first affine layer, copying every
    surviving weight bit-exactly."""
    if gate.m != m_t.m:
        raise PruneError(f"gate dimension {gate.m} != model field count {m_t.m}")
    z_det = hc.deterministic_mask(gate)
    m = m_t.m
    m_prime = int(round(m * (1.0 - tau)))
    if m_prime == 0:
        raise PruneError("all fields pruned (m' = 0); lower tau")
    if m_prime == m and tau > 0 and warn:
        warn(f"tau={tau} rounds to zero pruned fields")
    order = np.argsort(-z_det, kind="stable")  # stable: ties keep lower index first
    keep_idx = np.sort(order[:m_prime])
    keep = np.zeros(m, dtype=bool)
    keep[keep_idx] = True
    mask = PruneMask(keep=keep, importance=z_det, tau=tau)

    D = m_t.embed_dim
    schema = FieldSchema(tuple(m_t.schema.fields[j] for j in keep_idx))
    m_p = object.__new__(BackboneModel)
    m_p.schema = schema
    m_p.embed_dim = D
    m_p.hidden_sizes = m_t.hidden_sizes
    m_p.dtype = m_t.dtype
    m_p.embeddings = [m_t.embeddings[j].copy() for j in keep_idx]
    slot_rows = np.concatenate([np.arange(j * D, (j + 1) * D) for j in keep_idx])
    m_p.weights = [m_t.weights[0][slot_rows].copy()] + [w.copy() for w in m_t.weights[1:]]
    m_p.biases = [b.copy() for b in m_t.biases]
    return m_p, mask


def select_fields(batch: Batch, mask: PruneMask) -> Batch:
    """Project a full-schema batch down to the retained fields."""
    return Batch(x=batch.x[:, mask.keep_indices], y=batch.y)


def continue_train(m_p: BackboneModel, mask: PruneMask, remaining: Dataset,
                   cfg: PhaseConfig, from_scratch: bool = False) -> tuple[BackboneModel, TrainLog]:
    """Plain supervised training of the pruned model on the data not seen
    during pretraining; pruned fields are never encoded. Adam state starts
    fresh (only weights transfer across the phase boundary)."""
    if mask.retained_count != m_p.m:
        raise PruneError("mask does not match pruned model width")
    if remaining.schema.m != mask.m:
        raise PruneError("dataset schema does not match mask field count")
    if from_scratch:
        m_p = BackboneModel(m_p.schema, embed_dim=m_p.embed_dim,
                            hidden_sizes=m_p.hidden_sizes,
                            seed=cfg.seed + 1, dtype=m_p.dtype)
    model = m_p.astype(cfg.dtype)
    return _supervised_train(model, remaining, cfg, field_idx=mask.keep_indices)


def _supervised_train(model: BackboneModel, ds: Dataset, cfg: PhaseConfig,
                      field_idx: Optional[np.ndarray] = None) -> tuple[BackboneModel, TrainLog]:
    from .compute import backward
    opt = AdamState(model.params(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    log = TrainLog()
    step = 0
    step_time = 0.0
    for epoch in range(cfg.epochs):
        for batch in batch_iter(ds, cfg.batch_size,
                                shuffle_seed=_shuffle_seed(cfg.seed, epoch)):
            t0 = time.perf_counter()
            if field_idx is not None:
                batch = Batch(x=batch.x[:, field_idx], y=batch.y)
            logits, tape = forward(model, batch)
            task, dlogits = logloss_batch(logits, batch.y)
            if not np.isfinite(task):
                raise NumericalError(f"non-finite loss at training step {step}")
            grads, _, _ = backward(model, tape, dlogits)
            new_params = adam_step(model.params(), grads, opt)
            for name, value in new_params.items():
                model.set_param(name, value)
            log.reports.append(LossReport(step=step, task_loss=task,
                                          constraint_loss=0.0, total=task,
                                          mean_z=1.0, lam=0.0, phi=0.0))
            step += 1
            step_time += time.perf_counter() - t0
    log.mean_step_seconds = step_time / max(step, 1)
    return model, log


def infer(m_o: BackboneModel, mask: PruneMask, batch: Batch) -> np.ndarray:
    """Score full-schema inputs through the compact model: select retained
    fields, embed, forward, sigmoid. No masking multiply happens here."""
    if batch.x.shape[1] != mask.m:
        raise PruneError(f"batch has {batch.x.shape[1]} fields, mask expects {mask.m}")
    return predict(m_o, select_fields(batch, mask))


@dataclass
class RunResult:
    m_s: BackboneModel
    m_t: BackboneModel
    m_p: BackboneModel
    m_o: BackboneModel
    gate: hc.GateParams
    mask: PruneMask
    splits: SplitSet
    report: dict
    pretrain_log: TrainLog
    continue_log: TrainLog
    baseline_model: Optional[BackboneModel] = None


def run_all(ds: Dataset, pre_cfg: PhaseConfig, cont_cfg: PhaseConfig,
            ratios=(0.7, 0.15, 0.15), pretrain_size: int = 2000,
            split_seed: int = 0, with_baseline: bool = False,
            from_scratch: bool = False) -> RunResult:
    """Orchestrate split -> pretrain -> prune -> continue -> evaluate, with
    an optional no-selection baseline trained on the same schedule."""
    splits = stratified_split(ds, ratios, pretrain_size, split_seed)
    timer = PhaseTimer()
    m_s = BackboneModel(ds.schema, embed_dim=pre_cfg.embed_dim,
                        hidden_sizes=pre_cfg.hidden_sizes,
                        seed=pre_cfg.seed, dtype=pre_cfg.dtype)
    with timer.phase("pretrain"):
        m_t, gate_params, pre_log = pretrain(m_s, splits.pretrain, pre_cfg)
    m_p, mask = prune(m_t, gate_params, pre_cfg.tau)
    with timer.phase("continue"):
        m_o, cont_log = continue_train(m_p, mask, splits.train, cont_cfg,
                                       from_scratch=from_scratch)
    with timer.phase("inference"):
        scores = infer(m_o, mask, Batch(splits.test.x, splits.test.y))
    result = evaluate(scores, splits.test.y)

    report = {
        "auc": result.auc,
        "logloss": result.logloss,
        "retained_fields": [ds.schema.names[j] for j in mask.keep_indices],
        "m": mask.m,
        "m_prime": mask.retained_count,
        "tau": pre_cfg.tau,
        "timings": {"PT": timer.elapsed["pretrain"], "CT": timer.elapsed["continue"],
                    "TT": timer.elapsed["pretrain"] + timer.elapsed["continue"],
                    "IT": timer.elapsed["inference"]},
        "per_step_seconds": {"pretrain": pre_log.mean_step_seconds,
                             "continue": cont_log.mean_step_seconds},
    }

    baseline_model = None
    if with_baseline:
        baseline_model = BackboneModel(ds.schema, embed_dim=cont_cfg.embed_dim,
                                       hidden_sizes=cont_cfg.hidden_sizes,
                                       seed=cont_cfg.seed, dtype=cont_cfg.dtype)
        with timer.phase("baseline"):
            baseline_model, base_log = _supervised_train(baseline_model, splits.train, cont_cfg)
        base_scores = predict(baseline_model, Batch(splits.test.x, splits.test.y))
        base_result = evaluate(base_scores, splits.test.y)
        report["baseline"] = {
            "auc": base_result.auc,
            "logloss": base_result.logloss,
            "train_seconds": timer.elapsed["baseline"],
            "per_step_seconds": base_log.mean_step_seconds,
        }
    return RunResult(m_s=m_s, m_t=m_t, m_p=m_p, m_o=m_o, gate=gate_params,
                     mask=mask, splits=splits, report=report,
                     pretrain_log=pre_log, continue_log=cont_log,
                     baseline_model=baseline_model)


def recovery_scores(mask: PruneMask, informative: set[int]) -> dict:
    """Precision/recall of the retained set against the known-informative
    fields of a synthetic dataset."""
    kept = set(int(j) for j in mask.keep_indices)
    tp = len(kept & informative)
    precision = tp / len(kept) if kept else 0.0
    recall = tp / len(informative) if informative else 0.0
    return {"precision": precision, "recall": recall,
            "retained": sorted(kept), "informative": sorted(informative)}
