"""Command line entry point: ``mtss <subcommand> --config PATH [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import default_dtype
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigError, ExperimentConfig, Mode, load_config, serialize_config
from .metrics import MetricsRecord, append_records, read_records
from .trainer import run_training, staleness_report
from .trunk import AlphaMatrix, sparsity_profile

INCOMPLETE = "INCOMPLETE"


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "mode", None) is not None:
        cfg = dataclasses.replace(cfg, mode=Mode(args.mode))
    if os.environ.get("MTSS_PRECISION"):
        # the environment wins over the config file
        try:
            bits = default_dtype().itemsize * 8
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg = dataclasses.replace(cfg, precision=bits)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_files(out: Path) -> list[Path]:
    return sorted(out.glob("ckpt_*.mtss"))


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    marker = out / INCOMPLETE
    marker.write_text("pretrain did not finish\n")
    for old in _checkpoint_files(out):
        old.unlink()
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    (out / "config.ini").write_text(serialize_config(cfg))
    run = run_training(cfg)
    records = []
    ckpts = list(run.checkpoints)
    if ckpts[-1].meta["steps"] != run.final.meta["steps"]:
        ckpts.append(run.final)
    seen = 0
    for i, ck in enumerate(ckpts):
        write_checkpoint(out / f"ckpt_{i:03d}.mtss", ck)
        # mean training loss per task over the packets since the previous checkpoint
        n = sum(ck.meta["packets"][t][0] for t in cfg.task_ids)
        window = run.losses[seen:n]
        seen = n
        payload = {"checkpoint": i, "steps": ck.meta["steps"]}
        for t in cfg.task_ids:
            vals = [v for tid, v in window if tid == t]
            payload[f"loss.{t}"] = float(np.mean(vals)) if vals else None
        records.append(MetricsRecord(ck.cost, cfg.experiment_id, "train", payload))
    rep = staleness_report(run)
    records += [MetricsRecord(run.cost, cfg.experiment_id, "staleness", r) for r in rep.records()]
    alpha = AlphaMatrix.from_params(run.final.params)
    if alpha.task_ids:
        prof = sparsity_profile(alpha)
        records += [MetricsRecord(run.cost, cfg.experiment_id, "sparsity", r) for r in prof.records()]
    append_records(metrics, records)
    marker.unlink()
    print(f"pretrain: {len(ckpts)} checkpoints, {run.steps} steps, cost {run.cost:g} -> {out}")
    return 0


def _eval_job(job):
    path, cfg_text, seed = job
    from .config import parse_config
    from .evaluation import evaluate_checkpoint
    cfg = parse_config(cfg_text)
    ck = read_checkpoint(path)
    res = evaluate_checkpoint(ck, cfg.trunk, cfg.eval, seed, lasso_eval=cfg.lasso_mode.eval,
                              lasso_lambda=cfg.lasso_lambda)
    return ck.cost, res


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    files = _checkpoint_files(out)
    if not files:
        print(f"eval: no checkpoints in {out}", file=sys.stderr)
        return 1
    marker = out / INCOMPLETE
    marker.write_text("eval did not finish\n")
    text = serialize_config(cfg)
    jobs = [(str(f), text, cfg.seed) for f in files]
    if args.parallel_evals > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_evals) as pool:
            results = list(pool.map(_eval_job, jobs))
    else:
        results = [_eval_job(j) for j in jobs]
    records = []
    for f, (cost, res) in zip(files, results):
        for name in cfg.eval.suite:
            payload = {"checkpoint": f.name, "evaluation": name, **res[name]}
            records.append(MetricsRecord(cost, cfg.experiment_id, "eval", payload))
    append_records(out / "metrics.jsonl", records)
    marker.unlink()
    print(f"eval: {len(files)} checkpoints x {len(cfg.eval.suite)} evaluations -> {out / 'metrics.jsonl'}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_all
    seed = args.seed if args.seed is not None else (load_config(args.config).seed if args.config else 0)
    reports = run_all(seed=seed, log=print)
    failed = [k for k, r in reports.items() if not r.passed]
    print(f"grad-check: {len(reports) - len(failed)}/{len(reports)} passed")
    return 1 if failed else 0


def cmd_simulate_schedule(args) -> int:
    cfg = _load(args)
    run = run_training(cfg)
    rep = staleness_report(run)
    records = [MetricsRecord(run.cost, cfg.experiment_id, "staleness", r) for r in rep.records()]
    for r in records:
        print(r.to_line())
    if args.out:
        append_records(_out_dir(args) / "metrics.jsonl", records)
    return 0


def _final_eval(records: list[MetricsRecord]) -> dict[str, dict]:
    """Latest-checkpoint result of every evaluation."""
    best: dict[str, MetricsRecord] = {}
    for r in records:
        if r.kind == "eval":
            k = r.payload["evaluation"]
            if k not in best or r.timestamp >= best[k].timestamp:
                best[k] = r
    return {k: v.payload for k, v in best.items()}


def cmd_report(args) -> int:
    runs = [Path(p) for p in (args.runs or [args.out])]
    rows, curves = [], ["experiment-id,cost,evaluation,value"]
    for d in runs:
        recs = read_records(d / "metrics.jsonl")
        if not recs:
            continue
        eid = recs[0].experiment_id
        fin = _final_eval(recs)
        fl = fin.get("frozen_linear", {})
        ft = fin.get("finetune", {})
        dp = fin.get("depth", {})
        flag = " (incomplete)" if (d / INCOMPLETE).exists() else ""
        rows.append(f"| {eid}{flag} | {_pct(fl.get('accuracy'))} | {_pct(fl.get('recall_at_k'))} | "
                    f"{_pct(ft.get('accuracy'))} | {_num(dp.get('pct_below_1_25'))} |")
        for r in recs:
            if r.kind == "eval":
                key = {"frozen_linear": "accuracy", "finetune": "accuracy", "depth": "pct_below_1_25"}[r.payload["evaluation"]]
                curves.append(f"{eid},{r.timestamp!r},{r.payload['evaluation']},{r.payload[key]!r}")
    table = ["| experiment | frozen top-1 | frozen recall@k | fine-tune top-1 | depth % < 1.25 |",
             "|---|---|---|---|---|", *rows]
    out = _out_dir(args)
    (out / "report.md").write_text("\n".join(table) + "\n")
    (out / "curves.csv").write_text("\n".join(curves) + "\n")
    print("\n".join(table))
    return 0


def _pct(v):
    return "-" if v is None else f"{100 * v:.2f}"


def _num(v):
    return "-" if v is None else f"{v:.2f}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtss", description="Multi-task self-supervised training simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True, out_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--mode", choices=[m.value for m in Mode], default=None, help="override the aggregation mode")
        sp.add_argument("--parallel-evals", type=int, default=1, help="concurrent evaluation jobs")
        return sp

    common(sub.add_parser("pretrain", help="simulate pre-training and write checkpoints")).set_defaults(fn=cmd_pretrain)
    common(sub.add_parser("eval", help="evaluate every checkpoint in --out")).set_defaults(fn=cmd_eval)
    common(sub.add_parser("grad-check", help="finite-difference check of all gradients"),
           config_required=False, out_required=False).set_defaults(fn=cmd_grad_check)
    common(sub.add_parser("simulate-schedule", help="run the schedule and print staleness statistics"),
           out_required=False).set_defaults(fn=cmd_simulate_schedule)
    rp = common(sub.add_parser("report", help="render tables and curves from metrics"), config_required=False)
    rp.add_argument("runs", nargs="*", help="run directories (default: --out)")
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
