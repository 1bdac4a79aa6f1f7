"""Command-line entry point: ``loradrop <command> [flags]``.

Every command accepts the shared flags (``--config``, ``--task``, ``--alpha``,
``--threshold``, ``--rank``, ``--ablation``, ``--seed``, ``--out``). Flags
override values from the JSON config file. Results go under ``--out`` and each
command leaves a ``manifest.json`` there describing what it wrote.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from loradrop.adaptation import AblationKind, RetentionPlan, build_topology, select_retained
from loradrop.data import FAMILIES
from loradrop.harness import (
    ExperimentConfig,
    StageError,
    _atomic_write,
    backbone,
    compute_importance,
    datasets,
    finetune,
    heatmap_rows,
    load_config,
    persist_run,
    pretrain_to,
    run_ablations,
    run_pipeline,
    save_config,
    sweep_alpha,
    sweep_threshold,
    write_csv,
    write_histograms,
)
from loradrop.importance import ImportanceReport
from loradrop.lora import full_topology, load_topology, save_topology

log = logging.getLogger("loradrop")

BUILDABLE = [k.value for k in AblationKind if not k.value.startswith("infer_")]
HEATMAP_HEADER = ["task", "group", "layer", "importance", "g"]


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _seed_list(text: str) -> list[int]:
    """``5`` means seeds 0..4; ``1,4,9`` lists them explicitly."""
    try:
        if "," in text:
            return [int(v) for v in text.split(",") if v.strip()]
        return list(range(int(text)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a count or a comma-separated seed list, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("experiment")
    g.add_argument("--config", type=Path, help="JSON experiment config; flags below override it")
    g.add_argument("--task", choices=FAMILIES, help="task family")
    g.add_argument("--alpha", type=float, help="sampling ratio for importance evaluation")
    g.add_argument("--threshold", type=float, help="cumulative importance threshold T")
    g.add_argument("--rank", type=int, help="LoRA rank")
    g.add_argument("--ablation", choices=BUILDABLE, help="topology variant")
    g.add_argument("--seed", type=int, help="run seed; every component seed is derived from it")
    g.add_argument("--out", type=Path, help="output directory")
    g.add_argument("--checkpoint", help="pretrained backbone checkpoint (skips pretraining)")
    g.add_argument("--epochs", type=int, help="fine-tuning epochs")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="loradrop", description="Importance-guided LoRA pruning and sharing on toy tasks.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the backbone and save a checkpoint")
    p.add_argument("--steps", type=int, help="pretraining steps")

    p = sub.add_parser("importance", parents=[common], help="evaluate layer importance")
    p.add_argument("--bins", type=int, default=20, help="histogram bins for per-example norms")

    p = sub.add_parser("adapt", parents=[common], help="select retained layers and build the topology")
    p.add_argument("--importance", type=Path, help="importance report to use instead of computing one")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a topology on the task")
    p.add_argument("--topology", type=Path, help="topology file from `adapt`; defaults to full LoRA")

    p = sub.add_parser("pipeline", parents=[common], help="importance, selection and fine-tuning in one run")
    p.add_argument("--bins", type=int, default=20, help="histogram bins for per-example norms")

    p = sub.add_parser("sweep-threshold", parents=[common], help="accuracy and retained layers across thresholds")
    p.add_argument("--thresholds", type=_floats, default=[0.7, 0.8, 0.9, 0.95, 1.0])
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2], help="count or comma-separated list")

    p = sub.add_parser("sweep-alpha", parents=[common], help="rank stability of importance across sampling ratios")
    p.add_argument("--ratios", type=_floats, default=[0.1, 0.5, 0.99])
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2], help="count or comma-separated list")
    p.add_argument("--step-budget", type=int, help="shared warm-up step budget")

    p = sub.add_parser("ablate", parents=[common], help="compare topology variants at matched k")
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2, 3, 4], help="count or comma-separated list")
    p.add_argument("--no-inference", action="store_true", help="skip the large/small inference-mask study")

    sub.add_parser("report", parents=[common], help="summarize every run found under --out")
    return parser


def config_from_args(args) -> ExperimentConfig:
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise CliError("config", f"cannot load {args.config}: {exc}") from exc
    changes = {}
    if args.task:
        changes["task"] = replace(config.task, family=args.task)
    for name in ("alpha", "threshold", "rank", "ablation", "checkpoint", "epochs"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "steps", None) is not None:
        changes["pretrain_steps"] = args.steps
    config = replace(config, **changes)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if not 0.0 < config.alpha < 1.0:
        raise CliError("config", f"alpha {config.alpha} outside (0, 1)")
    if not 0.0 < config.threshold <= 1.0:
        raise CliError("config", f"threshold {config.threshold} outside (0, 1]")
    if config.rank < 1:
        raise CliError("config", f"rank must be positive, got {config.rank}")
    return config


def _out(config: ExperimentConfig) -> Path:
    root = Path(config.out_dir or ".")
    root.mkdir(parents=True, exist_ok=True)
    return root


def write_manifest(root: Path, command: str, config: ExperimentConfig, files: list[str], started: float, **extra) -> None:
    doc = {
        "command": command,
        "config": config.to_dict(),
        "files": sorted(files),
        "wall_clock": time.perf_counter() - started,
        **extra,
    }
    _atomic_write(root / "manifest.json", json.dumps(doc, indent=1, sort_keys=True, default=str))


def _importance_outputs(root: Path, config: ExperimentConfig, report, captured, bins: int) -> list[str]:
    report.save(root / "importance.json")
    write_histograms(captured, root / "histograms.csv", bins)
    write_csv(root / "heatmap.csv", HEATMAP_HEADER, heatmap_rows({config.task.family: report}))
    return ["importance.json", "histograms.csv", "heatmap.csv"]


# ---------------------------------------------------------------- commands


def cmd_pretrain(args, config, started):
    root = _out(config)
    model = pretrain_to(config, root / "checkpoint.json")
    save_config(replace(config, checkpoint=str(root / "checkpoint.json")), root / "config.json")
    write_manifest(root, "pretrain", config, ["checkpoint.json", "config.json"], started,
                   base_parameters=sum(t.data.size for _, t in model.base_parameters()))
    print(f"checkpoint written to {root / 'checkpoint.json'}")


def cmd_importance(args, config, started):
    root = _out(config)
    report, captured = compute_importance(config, record_examples=True)
    files = _importance_outputs(root, config, report, captured, args.bins)
    save_config(config, root / "config.json")
    write_manifest(root, "importance", config, files + ["config.json"], started)
    for kind, values in report.I.items():
        print(f"{kind:6s} " + " ".join(f"{v:.4f}" for v in values))


def cmd_adapt(args, config, started):
    root = _out(config)
    if args.importance:
        report = ImportanceReport.load(args.importance)
    else:
        try:
            report = compute_importance(config)
        except Exception as exc:
            raise StageError("importance", exc) from exc
        report.save(root / "importance.json")
    if report.num_layers != config.model.num_layers:
        raise ValueError(f"report covers {report.num_layers} layers, model has {config.model.num_layers}")
    plan = select_retained(report, config.threshold)
    topo = build_topology(plan, config.ablation, config.model, config.rank, config.seeds.adapter_init, config.scale,
                          rng=config.seeds.ablation)
    _atomic_write(root / "plan.json", json.dumps(plan.to_dict(), indent=1))
    save_topology(topo, root / "topology.json")
    save_config(config, root / "config.json")
    files = ["plan.json", "topology.json", "config.json"] + ([] if args.importance else ["importance.json"])
    write_manifest(root, "adapt", config, files, started, counts=plan.counts())
    for kind, g in plan.groups.items():
        print(f"{kind:6s} retained {list(g.retained)} dropped {list(g.dropped)}")


def cmd_finetune(args, config, started):
    root = _out(config)
    base = backbone(config)
    train, dev = datasets(config)
    model = base.copy()
    model.reset_head(config.seeds.head_init)
    model.freeze_base()
    if args.topology:
        topo = load_topology(args.topology, config.model)
    else:
        topo = full_topology(config.model, config.rank, config.seeds.adapter_init, config.scale)
    result = finetune(model, topo, train, dev, config)
    plan_path = args.topology.with_name("plan.json") if args.topology else None
    if plan_path is not None and plan_path.exists():
        result.plan = RetentionPlan.from_dict(json.loads(plan_path.read_text())).to_dict()
    _atomic_write(root / "metrics.json", json.dumps(result.metrics(), indent=1, sort_keys=True))
    write_csv(root / "metrics.csv", ["epoch", "dev_accuracy", "dev_loss"],
              [(i, a, l) for i, (a, l) in enumerate(zip(result.dev_accuracy, result.dev_loss))])
    save_topology(topo, root / "trained_topology.json")
    save_config(config, root / "config.json")
    write_manifest(root, "finetune", config, ["metrics.json", "metrics.csv", "trained_topology.json", "config.json"],
                   started, accuracy=result.accuracy, lora_params=result.lora_params)
    print(f"dev accuracy {result.accuracy:.4f} (epoch {result.best_epoch}), LoRA parameters {result.lora_params}")


def cmd_pipeline(args, config, started):
    root = _out(config)
    try:
        base = backbone(config)
    except Exception as exc:
        raise StageError("pretrain", exc) from exc
    try:
        report, captured = compute_importance(config, base, record_examples=True)
    except Exception as exc:
        raise StageError("importance", exc) from exc
    out = run_pipeline(replace(config, out_dir=None), report)
    persist_run(out, root)
    _importance_outputs(root, config, report, captured, args.bins)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["command"] = "pipeline"
    manifest["files"] = sorted(manifest["files"] + ["histograms.csv", "heatmap.csv"])
    manifest["wall_clock"] = time.perf_counter() - started
    _atomic_write(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    r = out.result
    print(f"retained {out.plan.counts()} of {config.model.num_layers} layers")
    print(f"dev accuracy {r.accuracy:.4f}, LoRA parameters {r.lora_params}, with head {r.lora_head_params}")


def cmd_sweep_threshold(args, config, started):
    root = _out(config)
    rows = sweep_threshold(config, args.thresholds, args.seeds)
    save_config(config, root / "config.json")
    write_manifest(root, "sweep-threshold", config, ["sweep_threshold.csv", "config.json"], started,
                   seeds=args.seeds, rows=rows)
    print(f"{'T':>6} {'query':>6} {'value':>6} {'acc':>7} {'params':>8}")
    for r in rows:
        print(f"{r['threshold']:6.3f} {r['retained_query']:6.2f} {r['retained_value']:6.2f} "
              f"{r['accuracy']:7.4f} {r['lora_params']:8.0f}")


def cmd_sweep_alpha(args, config, started):
    root = _out(config)
    rows = sweep_alpha(config, args.ratios, args.seeds, args.step_budget)
    save_config(config, root / "config.json")
    write_manifest(root, "sweep-alpha", config, ["sweep_alpha.csv", "config.json"], started, seeds=args.seeds, rows=rows)
    for r in rows:
        print(f"{r['group']:6s} {r['ratio_a']:.3f} vs {r['ratio_b']:.3f}: spearman {r['spearman']:.3f}")


def cmd_ablate(args, config, started):
    root = _out(config)
    table = run_ablations(config, args.seeds, with_inference=not args.no_inference)
    files = ["ablations.csv", "config.json"] + ([] if args.no_inference else ["inference_mask.csv"])
    save_config(config, root / "config.json")
    variants = sorted({r["variant"] for r in table.rows})
    summary = {v: table.mean_accuracy(v) for v in variants}
    if table.inference:
        summary.update({f"infer_keep_{k}": table.mean_inference(k) for k in ("large", "small")})
    write_manifest(root, "ablate", config, files, started, seeds=args.seeds, mean_accuracy=summary)
    for name, acc in summary.items():
        print(f"{name:18s} {acc:.4f}")


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args, config, started):
    """Collect every manifest below --out into summary.csv and every importance report into heatmap.csv."""
    root = Path(config.out_dir or ".")
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    summary, heat = [], []
    for mpath in sorted(root.rglob("manifest.json")):
        run_dir = mpath.parent
        doc = json.loads(mpath.read_text())
        cfg = ExperimentConfig.from_dict(doc["config"])
        acc = doc.get("accuracy", doc.get("result", {}).get("accuracy"))
        params = doc.get("lora_params", doc.get("result", {}).get("lora_params"))
        summary.append((str(run_dir.relative_to(root)) or ".", doc.get("command", ""), cfg.task.family, cfg.ablation,
                        cfg.threshold, cfg.alpha, "" if acc is None else acc, "" if params is None else params))
        ipath = run_dir / "importance.json"
        if ipath.exists():
            rep = ImportanceReport.load(ipath)
            label = f"{cfg.task.family}:{run_dir.relative_to(root)}"
            heat.extend(heatmap_rows({label: rep}))
    if not summary:
        raise FileNotFoundError(f"no run manifests under {root}")
    write_csv(root / "summary.csv",
              ["run", "command", "task", "ablation", "threshold", "alpha", "accuracy", "lora_params"], summary)
    files = ["summary.csv"]
    if heat:
        write_csv(root / "importance_heatmap.csv", HEATMAP_HEADER, heat)
        files.append("importance_heatmap.csv")
    for row in summary:
        acc = f"{row[6]:.4f}" if row[6] != "" else "-"
        print(f"{row[0]:30s} {row[1]:16s} {row[2]:18s} {acc}")
    print(f"wrote {', '.join(files)} to {root}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "importance": cmd_importance,
    "adapt": cmd_adapt,
    "finetune": cmd_finetune,
    "pipeline": cmd_pipeline,
    "sweep-threshold": cmd_sweep_threshold,
    "sweep-alpha": cmd_sweep_alpha,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        config = config_from_args(args)
        COMMANDS[args.command](args, config, started)
    except CliError as exc:
        print(f"loradrop: error [{exc.stage}] {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"loradrop: error [{exc.stage}] {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print(f"loradrop: error [{args.command}] interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"loradrop: error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
