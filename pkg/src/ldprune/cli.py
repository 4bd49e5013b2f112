"""Command-line entry point: ``ldprune <command> [options]``.

Artifacts go under ``<output_dir>/<teacher-hash>/{checkpoints,reports,logs,eval}``
and every one is recorded in ``manifest.json`` with its parent, so the chain
teacher -> pruned -> fine-tuned can be reconstructed.

Exit codes: 0 success, 1 usage/config/input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

from . import checkpoint, distill, evaluate, prune
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .data import SyntheticLatents
from .diffusion import generate_many
from .graph import build_unet

log = logging.getLogger("ldprune")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# run directory and manifest
# --------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: ExperimentConfig, force: bool):
        self.cfg = cfg
        self.force = force
        self.root = cfg.run_dir()
        for sub in ("checkpoints", "reports", "logs", "eval"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        dump_config(cfg, self.root / "config.yaml")
        self.manifest_path = self.root / "manifest.json"

    def path(self, sub: str, name: str) -> Path:
        return self.root / sub / name

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"config_hash": self.cfg.config_hash(), "artifacts": {}}

    def record(self, path: Path, kind: str, parent: Path | None = None, stage_hash: str = "") -> None:
        m = self.manifest()
        m["artifacts"][str(path.relative_to(self.root))] = {
            "kind": kind,
            "sha256": checkpoint.file_sha256(path),
            "parent": str(parent) if parent else None,
            "parent_sha256": checkpoint.file_sha256(parent) if parent and Path(parent).exists() else None,
            "stage_hash": stage_hash,
        }
        self.manifest_path.write_text(json.dumps(m, indent=1, sort_keys=True))

    def lineage(self, path: Path) -> list[str]:
        arts = self.manifest()["artifacts"]
        chain, key = [], str(Path(path).resolve())
        by_abs = {str((self.root / k).resolve()): v for k, v in arts.items()}
        while key in by_abs:
            chain.append(key)
            parent = by_abs[key]["parent"]
            key = str(Path(parent).resolve()) if parent else ""
        return chain


def _load_graph(path, expected_hash: str, what: str, force: bool):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} checkpoint not found: {path}")
    graph, desc = checkpoint.load_checkpoint(path)
    stored = desc.get("config_hash", "")
    if expected_hash and stored and stored != expected_hash:
        msg = f"{what} {path} was produced by config {stored}, current config is {expected_hash}"
        if not force:
            raise UsageError(msg + " (use --force to proceed)")
        log.warning("%s; continuing because of --force", msg)
    return graph


def _teacher(args, run: Run):
    path = Path(args.teacher) if args.teacher else run.path("checkpoints", "teacher.ldpr")
    return _load_graph(path, run.cfg.stage_hash("teacher"), "teacher", run.force), path


def _jobs(args, cfg: ExperimentConfig) -> int:
    if cfg.deterministic:
        return 1
    return args.jobs if args.jobs else (os.cpu_count() or 1)


def _cache_dir(run: Run) -> Path:
    env = os.environ.get(prune.CACHE_ENV)
    return Path(env) if env else run.root / "cache"


def _eval_sets(graph, cfg: ExperimentConfig):
    conds = list(range(cfg.unet.num_conditions))
    return generate_many(graph, conds, cfg.eval.n_samples, cfg.scheduler, base_seed=cfg.eval.seed)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train_teacher(args, run: Run) -> int:
    cfg = run.cfg
    out = run.path("checkpoints", "teacher.ldpr")
    stage = cfg.stage_hash("teacher")
    if out.exists() and not run.force:
        _, desc = checkpoint.load_checkpoint(out)
        if desc.get("config_hash") == stage:
            print(f"teacher up to date: {out}")
            return EXIT_OK
    graph = build_unet(cfg.unet, seed=cfg.seed)
    log_path = run.path("logs", "teacher.jsonl")
    log_path.unlink(missing_ok=True)
    graph, state = distill.train_teacher(graph, SyntheticLatents(cfg.dataset), cfg.teacher, cfg.scheduler, log_path)
    checkpoint.save_checkpoint(graph, out, config_hash=stage)
    run.record(out, "teacher", stage_hash=stage)
    last = state.history[-1]["total"] if state.history else float("nan")
    print(f"teacher: {out} ({graph.param_count()} params, {state.step} steps, final loss {last:.5f})")
    return EXIT_OK


def _score(args, run: Run, teacher):
    report = prune.score_all(teacher, run.cfg.prune, run.cfg.scheduler, jobs=_jobs(args, run.cfg),
                             cache_dir=_cache_dir(run))
    report.config["config_hash"] = run.cfg.stage_hash("score")
    return report


def cmd_score(args, run: Run) -> int:
    teacher, tpath = _teacher(args, run)
    report = _score(args, run, teacher)
    out = run.path("reports", "scores.json")
    report.save_json(out)
    report.save_csv(out.with_suffix(".csv"))
    run.record(out, "score-report", parent=tpath, stage_hash=report.config["config_hash"])
    print(f"scored {report.m} operators ({report.forward_calls} forward calls): {out}")
    for rank, op in enumerate(report.ranking[:10], 1):
        print(f"  {rank:3d}  {report.scores[op].total:12.6f}  {op}")
    return EXIT_OK


def cmd_prune(args, run: Run) -> int:
    cfg = run.cfg
    teacher, tpath = _teacher(args, run)
    report = _score(args, run, teacher)
    pruned, report = prune.apply_selection(teacher, report, cfg.prune.k, cfg.prune.adapter_init)
    stage = cfg.stage_hash("score")
    out = run.path("checkpoints", f"pruned_k{cfg.prune.k}.ldpr")
    checkpoint.save_checkpoint(pruned, out, config_hash=stage, parent_hash=checkpoint.file_sha256(tpath))
    rpath = run.path("reports", f"prune_k{cfg.prune.k}.json")
    report.save_json(rpath)
    run.record(out, "pruned", parent=tpath, stage_hash=stage)
    run.record(rpath, "prune-report", parent=tpath, stage_hash=stage)
    print(f"pruned {len(report.chosen)} operators: {teacher.param_count()} -> {pruned.param_count()} params")
    for op in report.chosen:
        print(f"  {op}")
    print(out)
    return EXIT_OK


def cmd_finetune(args, run: Run) -> int:
    cfg = run.cfg
    teacher, tpath = _teacher(args, run)
    ppath = Path(args.pruned) if args.pruned else run.path("checkpoints", f"pruned_k{cfg.prune.k}.ldpr")
    pruned = _load_graph(ppath, cfg.stage_hash("score"), "pruned model", run.force)
    tag = ("scratch" if args.scratch else "finetuned") + f"_{ppath.stem}"
    out = run.path("checkpoints", f"{tag}.ldpr")
    stage = cfg.stage_hash("finetune")
    if out.exists() and not run.force:
        _, desc = checkpoint.load_checkpoint(out)
        if desc.get("config_hash") == stage:
            print(f"up to date: {out}")
            return EXIT_OK
    log_path = run.path("logs", f"{tag}.jsonl")
    log_path.unlink(missing_ok=True)
    ds = SyntheticLatents(cfg.dataset)
    ckpt_dir = run.path("checkpoints", tag) if cfg.kd.checkpoint_every else None
    if args.scratch:
        student, state = distill.train_from_scratch(teacher, pruned, ds, cfg.kd, cfg.scheduler,
                                                    init_seed=cfg.seed + 1, log_path=log_path, ckpt_dir=ckpt_dir)
    else:
        student, state = distill.finetune(teacher, pruned, ds, cfg.kd, cfg.scheduler,
                                          log_path=log_path, ckpt_dir=ckpt_dir)
    checkpoint.save_checkpoint(student, out, config_hash=stage, parent_hash=checkpoint.file_sha256(ppath))
    state.save(run.path("checkpoints", f"{tag}_state.npz"))
    run.record(out, "finetuned", parent=ppath, stage_hash=stage)
    print(f"{tag}: {out} ({state.step} steps)")
    return EXIT_OK


def evaluate_pair(model, baseline, cfg: ExperimentConfig, baseline_sets=None, baseline_latency=None,
                  latency: bool = True) -> dict:
    base_sets = baseline_sets or _eval_sets(baseline, cfg)
    fr = evaluate.latent_frechet(base_sets, _eval_sets(model, cfg), diag=cfg.eval.diag)
    out = {"frechet": fr.distance, "params": evaluate.count_params(model),
           "baseline_params": evaluate.count_params(baseline)}
    if latency:
        base = baseline_latency or evaluate.measure_latency(baseline, cfg.scheduler, n_warmup=cfg.eval.n_warmup,
                                                            n_measured=cfg.eval.n_measured)
        lat = evaluate.measure_latency(model, cfg.scheduler, baseline=base, n_warmup=cfg.eval.n_warmup,
                                       n_measured=cfg.eval.n_measured)
        out.update(latency=lat.to_dict(), baseline_latency=base.to_dict(), speedup_vs_baseline=lat.speedup_pct)
    return out


def cmd_eval(args, run: Run) -> int:
    cfg = run.cfg
    model_path = Path(args.model)
    model = _load_graph(model_path, "", "model", run.force)
    bpath = Path(args.baseline) if args.baseline else run.path("checkpoints", "teacher.ldpr")
    baseline = _load_graph(bpath, "", "baseline", run.force)
    if model.spec != baseline.spec:
        raise UsageError("model and baseline were built from different U-Net specs")
    summary = evaluate_pair(model, baseline, cfg, latency=not args.no_latency)
    summary.update(model=str(model_path), baseline=str(bpath), config_hash=cfg.config_hash())
    out = run.path("eval", f"eval_{model_path.stem}.json")
    out.write_text(json.dumps(summary, indent=1, sort_keys=True))
    run.record(out, "eval", parent=model_path)
    print(json.dumps({k: summary[k] for k in ("frechet", "params", "speedup_vs_baseline") if k in summary}))
    return EXIT_OK


def cmd_sweep(args, run: Run) -> int:
    cfg = run.cfg
    try:
        ks = sorted(int(k) for k in args.k_values.split(","))
    except ValueError:
        raise UsageError(f"--k-values must be comma-separated integers, got {args.k_values!r}") from None
    teacher, tpath = _teacher(args, run)
    report = _score(args, run, teacher)
    ds = SyntheticLatents(cfg.dataset)
    base_sets = _eval_sets(teacher, cfg)
    base_lat = None
    if not args.no_latency:
        base_lat = evaluate.measure_latency(teacher, cfg.scheduler, n_warmup=cfg.eval.n_warmup,
                                            n_measured=cfg.eval.n_measured)
    rows = []
    for k in ks:
        pruned, rep = prune.apply_selection(teacher, report, k, cfg.prune.adapter_init)
        ck = run.path("checkpoints", f"pruned_k{k}.ldpr")
        checkpoint.save_checkpoint(pruned, ck, config_hash=cfg.stage_hash("score"),
                                   parent_hash=checkpoint.file_sha256(tpath))
        run.record(ck, "pruned", parent=tpath, stage_hash=cfg.stage_hash("score"))
        before = evaluate_pair(pruned, teacher, cfg, base_sets, base_lat, latency=not args.no_latency)
        after = float("nan")
        if cfg.kd.iterations > 0:
            student, _ = distill.finetune(teacher, distill.copy_graph(pruned), ds, cfg.kd, cfg.scheduler)
            after = evaluate.latent_frechet(base_sets, _eval_sets(student, cfg), diag=cfg.eval.diag).distance
        rows.append({"k": k, "params": before["params"], "speedup_pct": before.get("speedup_vs_baseline", float("nan")),
                     "frechet_before_ft": before["frechet"], "frechet_after_ft": after})
        print(f"k={k}: params {before['params']}  frechet {before['frechet']:.4f} -> {after:.4f}")
    out = run.path("reports", "sweep.csv")
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    run.record(out, "sweep", parent=tpath)
    print(out)
    return EXIT_OK


def write_report_tables(report: prune.ScoreReport, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    ranks = report.rank_of()
    chosen = set(report.chosen)
    paths = {"ranking": out_dir / "ranking.csv", "by_block": out_dir / "by_block.csv",
             "by_kind": out_dir / "by_kind.csv"}
    with paths["ranking"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["op_id", "total", "rank", "block", "kind", "chosen"])
        for op in report.ranking:
            m = report.meta[op]
            w.writerow([op, repr(report.scores[op].total), ranks[op], m["block"], m["kind"], int(op in chosen)])
    for name, key in (("by_block", lambda m: (m["block"], m["kind"])), ("by_kind", lambda m: (m["kind"],))):
        groups = defaultdict(list)
        for op in report.ranking:
            groups[key(report.meta[op])].append(ranks[op])
        with paths[name].open("w", newline="") as fh:
            w = csv.writer(fh)
            head = ["block", "kind"] if name == "by_block" else ["kind"]
            w.writerow(head + ["count", "mean_rank", "best_rank", "ranks"])
            for g in sorted(groups):
                r = groups[g]
                w.writerow(list(g) + [len(r), sum(r) / len(r), min(r), " ".join(map(str, r))])
    return paths


def cmd_report(args, run: Run) -> int:
    path = Path(args.report) if args.report else run.path("reports", "scores.json")
    if not path.exists():
        raise UsageError(f"report not found: {path}")
    report = prune.ScoreReport.load_json(path)
    out_dir = Path(args.out) if args.out else path.parent / f"{path.stem}_tables"
    paths = write_report_tables(report, out_dir)
    print(f"{report.m} operators, {len(report.chosen)} chosen")
    for p in paths.values():
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "score": cmd_score,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldprune", description="Latent-divergence operator pruning for toy latent diffusion U-Nets.")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--output-dir", help="root for run directories (default: runs)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-process execution, byte-identical artifacts")
    p.add_argument("--jobs", type=int, help="scoring worker processes (default: CPU count)")
    p.add_argument("--force", action="store_true", help="overwrite outputs and accept config-hash mismatches")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train-teacher", help="train the toy teacher U-Net")
    t.add_argument("--iterations", type=int)

    for name, help_ in (("score", "score every candidate operator"), ("prune", "prune the k lowest-scored operators")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--teacher")
        s.add_argument("--k", type=int)
        s.add_argument("--n-gen", type=int)
        s.add_argument("--combinator", choices=["sum", "product", "avg_only", "std_only"])

    f = sub.add_parser("finetune", help="distil the teacher into a pruned student")
    f.add_argument("--teacher")
    f.add_argument("--pruned")
    f.add_argument("--k", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--preset", choices=sorted(distill.PRESETS))
    f.add_argument("--scratch", action="store_true", help="re-initialise the pruned structure first")

    e = sub.add_parser("eval", help="Frechet proxy, parameter count and latency against a baseline")
    e.add_argument("--model", required=True)
    e.add_argument("--baseline")
    e.add_argument("--n-warmup", type=int)
    e.add_argument("--n-measured", type=int)
    e.add_argument("--no-latency", action="store_true")

    w = sub.add_parser("sweep", help="trade-off table over several k from one scoring pass")
    w.add_argument("--teacher")
    w.add_argument("--k-values", required=True, help="comma-separated, e.g. 1,5,10")
    w.add_argument("--iterations", type=int, help="fine-tuning steps per k")
    w.add_argument("--no-latency", action="store_true")

    r = sub.add_parser("report", help="per-block / per-kind rank tables from a score report")
    r.add_argument("--report")
    r.add_argument("--out")
    return p


def _overrides(args) -> dict:
    o = {"seed": args.seed, "deterministic": args.deterministic, "output_dir": args.output_dir}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    o["prune.k"] = get("k")
    o["prune.n_gen"] = get("n_gen")
    o["prune.combinator"] = get("combinator")
    o["eval.n_warmup"] = get("n_warmup")
    o["eval.n_measured"] = get("n_measured")
    if args.command == "train-teacher":
        o["teacher.iterations"] = get("iterations")
    elif args.command in ("finetune", "sweep"):
        o["kd.iterations"] = get("iterations")
    if get("preset"):
        o["kd.preset"] = get("preset")
    return o


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ldprune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs is not None and args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, _overrides(args))
        run = Run(cfg, args.force)
        return COMMANDS[args.command](args, run)
    except (UsageError, ConfigError) as exc:
        print(f"ldprune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"ldprune: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
