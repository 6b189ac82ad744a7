"""Command-line surface: synthetic data generation, splitting, the three
training phases (runnable independently or via run-all), evaluation, and
the importance heat-map export.

Exit codes: 0 success, 1 config error, 2 artifact error, 3 numerical
failure.
"""

from __future__ import annotations

import os

if os.environ.get("LFMP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["LFMP_THREADS"])

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .compute import BackboneModel, NumericalError
from .data import (ConfigError, DataError, Dataset, FieldSchema, SyntheticSpec,
                   generate_synthetic, load_dataset, stratified_split)
from .metrics import evaluate
from .pipeline import (PhaseConfig, PruneMask, continue_train, infer, predict,
                       pretrain, prune, run_all)
from .data import Batch


def _parse_field_set(text: str, m: int) -> frozenset[int]:
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            out.update(range(int(lo), int(hi) + 1))
        elif part:
            out.add(int(part))
    if not out or not out < set(range(m)):
        raise ConfigError(f"informative fields {text!r} invalid for {m} fields")
    return frozenset(out)


def _parse_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _phase_config(args, prefix: str, file_cfg: dict[str, str]) -> PhaseConfig:
    cfg = PhaseConfig()

    def pick(key, cast, flag_value):
        if flag_value is not None:
            return cast(flag_value)
        dotted = f"{prefix}.{key}"
        if dotted in file_cfg:
            return cast(file_cfg[dotted])
        if f"model.{key}" in file_cfg:
            return cast(file_cfg[f"model.{key}"])
        return getattr(cfg, key)

    hidden = pick("hidden_sizes", lambda s: tuple(int(x) for x in str(s).split(",")),
                  getattr(args, "hidden_sizes", None))
    return PhaseConfig(
        epochs=pick("epochs", int, getattr(args, "epochs", None)),
        batch_size=pick("batch_size", int, getattr(args, "batch_size", None)),
        learning_rate=pick("learning_rate", float, getattr(args, "learning_rate", None)),
        gate_learning_rate=pick("gate_learning_rate", float,
                                getattr(args, "gate_learning_rate", None)),
        multiplier_lr=pick("multiplier_lr", float, getattr(args, "multiplier_lr", None)),
        tau=pick("tau", float, getattr(args, "tau", None)),
        seed=pick("seed", int, getattr(args, "seed", None)),
        embed_dim=pick("embed_dim", int, getattr(args, "embed_dim", None)),
        hidden_sizes=hidden,
        weight_decay=pick("weight_decay", float, None),
        compat_eq4=bool(getattr(args, "compat_eq4", False)),
        f64=bool(getattr(args, "f64", False)),
    )


def _write_training_log(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task_loss", "constraint_loss", "total",
                    "mean_z", "lambda", "phi"])
        for r in reports:
            w.writerow([r.step, repr(r.task_loss), repr(r.constraint_loss),
                        repr(r.total), repr(r.mean_z), repr(r.lam), repr(r.phi)])


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        m=args.fields,
        informative=_parse_field_set(args.informative, args.fields),
        cardinalities=[args.cardinality] * args.fields,
        n=args.rows, seed=args.seed,
        weight_scale=args.weight_scale, noise_std=args.noise_std)
    ds = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.save_csv(out / "data.csv")
    ds.schema.save(out / "schema.toml")
    print(f"wrote {out / 'data.csv'} ({len(ds)} rows, {spec.m} fields)")
    return 0


def cmd_split(args) -> int:
    schema = FieldSchema.load(args.schema)
    ds = load_dataset(args.data, schema)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    splits = stratified_split(ds, ratios, args.pretrain_size, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in splits.splits().items():
        split.save_csv(out / f"{name}.csv")
        print(f"{name}: {len(split)} rows, pos rate {split.pos_rate:.4f}")
    return 0


def cmd_pretrain(args, file_cfg) -> int:
    schema = FieldSchema.load(args.schema)
    ds = load_dataset(args.data, schema)
    cfg = _phase_config(args, "pretrain", file_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m_s = BackboneModel(schema, embed_dim=cfg.embed_dim,
                        hidden_sizes=cfg.hidden_sizes, seed=cfg.seed, dtype=cfg.dtype)
    m_t, gate_params, log = pretrain(m_s, ds, cfg)
    save_checkpoint(out / "m_t.ckpt", Checkpoint(phase="T", model=m_t, gate=gate_params))
    _write_training_log(out / "training_log.csv", log.reports)
    print(f"wrote {out / 'm_t.ckpt'}")
    return 0


def cmd_prune(args) -> int:
    schema = FieldSchema.load(args.schema)
    ckpt = load_checkpoint(args.checkpoint, schema)
    if ckpt.gate is None:
        raise CheckpointError(f"{args.checkpoint}: no gate section; not a pretrained checkpoint")
    m_p, mask = prune(ckpt.model, ckpt.gate, args.tau,
                      warn=lambda msg: print(f"warning: {msg}", file=sys.stderr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "m_p.ckpt", Checkpoint(phase="P", model=m_p, mask=mask))
    (out / "mask.json").write_text(json.dumps(mask.to_dict(), indent=2) + "\n")
    print(f"retained {mask.retained_count}/{mask.m} fields")
    return 0


def cmd_continue(args, file_cfg) -> int:
    schema = FieldSchema.load(args.schema)
    mask = PruneMask.from_dict(json.loads(Path(args.mask).read_text()))
    ckpt = load_checkpoint(args.checkpoint, schema)
    ds = load_dataset(args.data, schema)
    cfg = _phase_config(args, "continue", file_cfg)
    m_o, log = continue_train(ckpt.model, mask, ds, cfg, from_scratch=args.from_scratch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "m_o.ckpt", Checkpoint(phase="O", model=m_o, mask=mask))
    _write_training_log(out / "continue_log.csv", log.reports)
    print(f"wrote {out / 'm_o.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    schema = FieldSchema.load(args.schema)
    ckpt = load_checkpoint(args.checkpoint, schema)
    ds = load_dataset(args.data, schema)
    batch = Batch(ds.x, ds.y)
    if ckpt.mask is not None and ckpt.model.m < schema.m:
        scores = infer(ckpt.model, ckpt.mask, batch)
    else:
        scores = predict(ckpt.model, batch)
    result = evaluate(scores, ds.y)
    print(json.dumps(result.to_dict(), indent=2))
    return 0


def cmd_run_all(args, file_cfg) -> int:
    schema = FieldSchema.load(args.schema)
    ds = load_dataset(args.data, schema)
    pre_cfg = _phase_config(args, "pretrain", file_cfg)
    cont_cfg = _phase_config(args, "continue", file_cfg)
    if args.continue_epochs is not None:
        from dataclasses import replace
        cont_cfg = replace(cont_cfg, epochs=args.continue_epochs)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_all(ds, pre_cfg, cont_cfg, ratios=ratios,
                     pretrain_size=args.pretrain_size, split_seed=args.split_seed,
                     with_baseline=args.with_baseline, from_scratch=args.from_scratch)
    for name, split in result.splits.splits().items():
        split.save_csv(out / f"{name}.csv")
    save_checkpoint(out / "m_t.ckpt", Checkpoint(phase="T", model=result.m_t, gate=result.gate))
    save_checkpoint(out / "m_p.ckpt", Checkpoint(phase="P", model=result.m_p, mask=result.mask))
    save_checkpoint(out / "m_o.ckpt", Checkpoint(phase="O", model=result.m_o, mask=result.mask))
    (out / "mask.json").write_text(json.dumps(result.mask.to_dict(), indent=2) + "\n")
    (out / "report.json").write_text(json.dumps(result.report, indent=2) + "\n")
    _write_training_log(out / "training_log.csv", result.pretrain_log.reports)
    _write_training_log(out / "continue_log.csv", result.continue_log.reports)
    print(json.dumps({k: result.report[k] for k in ("auc", "logloss", "m_prime")}, indent=2))
    return 0


def cmd_heatmap(args) -> int:
    masks = [PruneMask.from_dict(json.loads(Path(p).read_text())) for p in args.masks]
    m = masks[0].m
    if any(mk.m != m for mk in masks):
        raise ConfigError("masks disagree on field count (schema mismatch)")
    rows = []
    for mk in masks:
        lo, hi = mk.importance.min(), mk.importance.max()
        if hi > lo:
            norm = (mk.importance - lo) / (hi - lo)
        else:
            norm = np.full(m, 0.5)  # min = max leaves min-max undefined
        rows.append((mk.tau, norm, mk.keep))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "kind"] + [f"field_{j}" for j in range(m)])
        for tau, norm, _ in rows:
            w.writerow([tau, "importance"] + [f"{v:.6f}" for v in norm])
        for tau, _, keep in rows:
            w.writerow([tau, "keep"] + [int(k) for k in keep])
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lightfmp",
                                description="feature/model pruning pipeline for CTR models")
    p.add_argument("--config", help="flat key-value config file; flags override")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic CTR dataset")
    g.add_argument("--fields", type=int, required=True)
    g.add_argument("--informative", required=True, help="e.g. 0-7 or 0,3,5")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cardinality", type=int, default=16)
    g.add_argument("--weight-scale", type=float, default=1.5)
    g.add_argument("--noise-std", type=float, default=0.1)
    g.add_argument("--out", required=True)

    s = sub.add_parser("split", help="stratified train/val/test/pretrain split")
    s.add_argument("--data", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--ratios", default="0.7,0.15,0.15")
    s.add_argument("--pretrain-size", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    def phase_flags(sp, with_tau=True):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int, dest="batch_size")
        sp.add_argument("--learning-rate", type=float, dest="learning_rate")
        sp.add_argument("--gate-learning-rate", type=float, dest="gate_learning_rate")
        sp.add_argument("--multiplier-lr", type=float, dest="multiplier_lr")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--embed-dim", type=int, dest="embed_dim")
        sp.add_argument("--hidden-sizes", dest="hidden_sizes")
        sp.add_argument("--f64", action="store_true")
        sp.add_argument("--compat-eq4", action="store_true", dest="compat_eq4")
        if with_tau:
            sp.add_argument("--tau", type=float)

    t = sub.add_parser("pretrain", help="train gate + weights on the pretraining subset")
    t.add_argument("--data", required=True)
    t.add_argument("--schema", required=True)
    t.add_argument("--out", required=True)
    phase_flags(t)

    r = sub.add_parser("prune", help="prune features and model from a pretrained checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--schema", required=True)
    r.add_argument("--tau", type=float, default=0.5)
    r.add_argument("--out", required=True)

    c = sub.add_parser("continue", help="continued training of the pruned model")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--mask", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--schema", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--from-scratch", action="store_true", dest="from_scratch")
    phase_flags(c, with_tau=False)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)

    a = sub.add_parser("run-all", help="split + pretrain + prune + continue + eval")
    a.add_argument("--data", required=True)
    a.add_argument("--schema", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--ratios", default="0.7,0.15,0.15")
    a.add_argument("--pretrain-size", type=int, default=2000)
    a.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    a.add_argument("--continue-epochs", type=int, dest="continue_epochs")
    a.add_argument("--with-baseline", action="store_true", dest="with_baseline")
    a.add_argument("--from-scratch", action="store_true", dest="from_scratch")
    phase_flags(a)

    h = sub.add_parser("heatmap", help="export normalized importance across masks")
    h.add_argument("masks", nargs="+")
    h.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    file_cfg = _parse_config_file(args.config) if args.config else {}
    try:
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args)
        if args.command == "split":
            return cmd_split(args)
        if args.command == "pretrain":
            return cmd_pretrain(args, file_cfg)
        if args.command == "prune":
            return cmd_prune(args)
        if args.command == "continue":
            return cmd_continue(args, file_cfg)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "run-all":
            return cmd_run_all(args, file_cfg)
        if args.command == "heatmap":
            return cmd_heatmap(args)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DataError, OSError) as exc:
        print(f"error: artifact: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
