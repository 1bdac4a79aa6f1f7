"""Fine-tuning, the importance -> selection -> fine-tune pipeline, and multi-seed studies."""

from __future__ import annotations

import csv
import functools
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from loradrop import tensor as T
from loradrop.adaptation import (
    TRAINED_VARIANTS,
    AblationKind,
    RetentionPlan,
    build_topology,
    inference_mask,
    select_retained,
)
from loradrop.data import Dataset, TaskSpec, check_compatible, generate
from loradrop.importance import (
    ImportanceReport,
    SamplingConfig,
    WarmupConfig,
    evaluate_importance,
    histogram_rows,
    norm_histogram,
    rank_stability,
    spearman,
)
from loradrop.lora import AdapterTopology, head_param_count, save_topology, trainable_param_count
from loradrop.model import MATRIX_KINDS, ModelConfig, TransformerModel, load_checkpoint, pretrain_base, save_checkpoint
from loradrop.optim import Adam, rng_stream

log = logging.getLogger(__name__)

SEED_NAMES = ("sampling", "warmup", "adapter_init", "head_init", "finetune", "ablation")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class TrainingDivergedError(ArithmeticError):
    def __init__(self, step: int, where: str, op: str):
        self.step, self.where, self.op = step, where, op
        super().__init__(f"non-finite values at step {step} ({op} in {where or 'model'})")


@dataclass(frozen=True)
class Seeds:
    pretrain: int = 0
    sampling: int = 0
    warmup: int = 0
    adapter_init: int = 0
    head_init: int = 0
    finetune: int = 0
    ablation: int = 0

    @classmethod
    def derive(cls, seed: int, pretrain: int = 0) -> "Seeds":
        """Per-component seeds drawn from one run seed; the backbone seed stays fixed."""
        return cls(pretrain, **{n: int(rng_stream(seed, "seed", n).integers(2**31)) for n in SEED_NAMES})


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    rank: int = 8
    scale: float = 1.0
    alpha: float = 0.1
    warmup_epochs: int = 3
    warmup_max_steps: int | None = None
    warmup_lr: float = 1e-3
    warmup_optimizer: str = "adam"
    threshold: float = 0.9
    ablation: str = "lora_drop"
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    checkpoint: str | None = None
    seeds: Seeds = field(default_factory=Seeds)
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["task"] = self.task.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "task" in d:
            d["task"] = TaskSpec.from_dict(d["task"])
        if "seeds" in d:
            d["seeds"] = Seeds(**d["seeds"])
        return cls(**d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=Seeds.derive(seed, self.seeds.pretrain))

    def sampling(self, ratio: float | None = None) -> SamplingConfig:
        return SamplingConfig(self.alpha if ratio is None else ratio, self.seeds.sampling)

    def warmup(self, max_steps: int | None = None, epochs: int | None = None) -> WarmupConfig:
        return WarmupConfig(
            epochs=epochs or self.warmup_epochs,
            max_steps=self.warmup_max_steps if max_steps is None else max_steps,
            lr=self.warmup_lr,
            optimizer=self.warmup_optimizer,
            batch_size=self.batch_size,
            rank=self.rank,
            scale=self.scale,
            seed=self.seeds.warmup,
        )


def save_config(config: ExperimentConfig, path) -> None:
    _atomic_write(Path(path), json.dumps(config.to_dict(), indent=1, sort_keys=True))


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


# ---------------------------------------------------------------- data and backbone


@functools.lru_cache(maxsize=16)
def _datasets(task: TaskSpec) -> tuple[Dataset, Dataset]:
    return generate(task)


def datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    train, dev = _datasets(config.task)
    m = config.model
    check_compatible(train, m.vocab_size, m.max_seq_len, m.num_classes)
    return train, dev


@functools.lru_cache(maxsize=8)
def _pretrained(model_cfg: ModelConfig, generic_task: TaskSpec, steps: int, lr: float, seed: int) -> TransformerModel:
    model = TransformerModel(model_cfg, seed)
    pretrain_base(model, generic_task, steps, seed, lr=lr)
    return model


def backbone(config: ExperimentConfig) -> TransformerModel:
    """The frozen pretrained checkpoint for this config (cached per process)."""
    if config.checkpoint:
        model = load_checkpoint(config.checkpoint)
        if model.config != config.model:
            raise ValueError("checkpoint model config differs from the experiment config")
    else:
        generic = replace(config.task, family="token-count", balance=None)
        model = _pretrained(config.model, generic, config.pretrain_steps, config.pretrain_lr, config.seeds.pretrain).copy()
    model.freeze_base()
    return model


# ---------------------------------------------------------------- training


def evaluate(model: TransformerModel, topology, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) without building a tape."""
    correct, loss_sum = 0, 0.0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            tok = dataset.tokens[start : start + batch_size]
            lab = dataset.labels[start : start + batch_size]
            logits = model.forward(tok, topology)
            correct += int((logits.data.argmax(axis=1) == lab).sum())
            loss_sum += T.cross_entropy(logits, lab).item() * len(lab)
    n = max(len(dataset), 1)
    return correct / n, loss_sum / n


@dataclass
class RunResult:
    accuracy: float
    best_epoch: int
    dev_accuracy: list[float]
    dev_loss: list[float]
    train_loss: list[float]
    lora_params: int
    lora_head_params: int
    seeds: dict
    plan: dict | None = None
    importance_ref: str | None = None
    wall_clock: float = 0.0

    def metrics(self) -> dict:
        """Everything except timing, for bitwise reproducibility checks."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


def finetune(
    model: TransformerModel,
    topology: AdapterTopology | None,
    train: Dataset,
    dev: Dataset,
    config: ExperimentConfig,
) -> RunResult:
    """Train adapters and head in place; keep the best dev epoch's metrics.

    The base stays frozen. Raises :class:`TrainingDivergedError` on NaN/Inf.
    """
    start_time = time.perf_counter()
    model.freeze_base()
    params = (topology.parameters() if topology is not None else []) + model.head_parameters()
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = rng_stream(config.seeds.finetune, "finetune-batches")
    try:
        acc0, loss0 = evaluate(model, topology, dev)
    except T.NonFiniteError as exc:
        raise TrainingDivergedError(0, exc.scope, exc.op) from exc
    dev_acc, dev_loss, train_loss = [], [], []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            opt.zero_grad()
            try:
                loss = T.cross_entropy(model.forward(train.tokens[idx], topology), train.labels[idx])
                T.backward(loss)
                opt.step()
                for p in params:
                    if not np.isfinite(p.data).all():
                        raise T.NonFiniteError("adam_step", p.name or "")
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(step, exc.scope, exc.op) from exc
            total += loss.item() * len(idx)
            count += len(idx)
            step += 1
        train_loss.append(total / count)
        try:
            a, l = evaluate(model, topology, dev)
        except T.NonFiniteError as exc:
            raise TrainingDivergedError(step, exc.scope, exc.op) from exc
        dev_acc.append(a)
        dev_loss.append(l)
    if dev_acc:
        best = int(np.argmax(dev_acc))
        accuracy, best_epoch = dev_acc[best], best + 1
    else:
        accuracy, best_epoch = acc0, 0
    lora = trainable_param_count(topology, model.config) if topology is not None else 0
    return RunResult(
        accuracy=accuracy,
        best_epoch=best_epoch,
        dev_accuracy=[acc0] + dev_acc,
        dev_loss=[loss0] + dev_loss,
        train_loss=train_loss,
        lora_params=lora,
        lora_head_params=lora + head_param_count(model.config),
        seeds=asdict(config.seeds),
        wall_clock=time.perf_counter() - start_time,
    )


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineOutput:
    config: ExperimentConfig
    report: ImportanceReport
    plan: RetentionPlan
    topology: AdapterTopology
    model: TransformerModel
    result: RunResult


def compute_importance(config: ExperimentConfig, base: TransformerModel | None = None, ratio: float | None = None,
                       max_steps: int | None = None, epochs: int | None = None, record_examples: bool = False):
    base = base if base is not None else backbone(config)
    train, _ = datasets(config)
    return evaluate_importance(
        base,
        train,
        config.sampling(ratio),
        config.warmup(max_steps, epochs),
        record_examples=record_examples,
        return_capture=record_examples,
    )


def train_variant(config: ExperimentConfig, plan: RetentionPlan, kind: AblationKind | str,
                  base: TransformerModel | None = None):
    """Build the ``kind`` topology from ``plan`` on a fresh head and fine-tune it."""
    base = base if base is not None else backbone(config)
    train, dev = datasets(config)
    model = base.copy()
    model.reset_head(config.seeds.head_init)
    model.freeze_base()
    topo = build_topology(
        plan, kind, config.model, config.rank, config.seeds.adapter_init, config.scale, rng=config.seeds.ablation
    )
    result = finetune(model, topo, train, dev, config)
    result.plan = plan.to_dict()
    return model, topo, result


def run_pipeline(config: ExperimentConfig, report: ImportanceReport | None = None) -> PipelineOutput:
    """Importance evaluation -> threshold selection -> topology -> fine-tune, persisted under ``out_dir``."""
    t0 = time.perf_counter()
    try:
        base = backbone(config)
    except Exception as exc:
        raise StageError("pretrain", exc) from exc
    if report is None:
        try:
            report = compute_importance(config, base)
        except Exception as exc:
            raise StageError("importance", exc) from exc
    try:
        plan = select_retained(report, config.threshold)
    except Exception as exc:
        raise StageError("adapt", exc) from exc
    try:
        model, topo, result = train_variant(config, plan, config.ablation, base)
    except Exception as exc:
        raise StageError("finetune", exc) from exc
    result.importance_ref = "importance.json"
    result.wall_clock = time.perf_counter() - t0
    out = PipelineOutput(config, report, plan, topo, model, result)
    if config.out_dir:
        persist_run(out, Path(config.out_dir))
    return out


def persist_run(out: PipelineOutput, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    save_config(out.config, root / "config.json")
    out.report.save(root / "importance.json")
    save_topology(out.topology, root / "topology.json")
    _atomic_write(root / "metrics.json", json.dumps(out.result.metrics(), indent=1, sort_keys=True))
    write_csv(
        root / "metrics.csv",
        ["epoch", "dev_accuracy", "dev_loss"],
        [(i, a, l) for i, (a, l) in enumerate(zip(out.result.dev_accuracy, out.result.dev_loss))],
    )
    manifest = {
        "config": out.config.to_dict(),
        "plan": out.plan.to_dict(),
        "result": asdict(out.result),
        "files": ["config.json", "importance.json", "topology.json", "metrics.json", "metrics.csv"],
    }
    _atomic_write(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------- studies


def sweep_threshold(config: ExperimentConfig, thresholds, seeds=(0, 1, 2)) -> list[dict]:
    """One fine-tune per (threshold, seed); importance is computed once per seed."""
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise ValueError(f"threshold {t} outside (0, 1]")
    base = backbone(config)
    per = {t: [] for t in thresholds}
    for seed in seeds:
        cfg = config.with_seed(seed)
        report = compute_importance(cfg, base)
        for t in thresholds:
            plan = select_retained(report, t)
            _, _, res = train_variant(cfg, plan, config.ablation, base)
            per[t].append((plan.counts(), res))
            log.info("threshold %.3f seed %d: acc %.4f counts %s", t, seed, res.accuracy, plan.counts())
    rows = []
    for t in thresholds:
        runs = per[t]
        rows.append(
            {
                "threshold": t,
                "retained_query": float(np.mean([c["query"] for c, _ in runs])),
                "retained_value": float(np.mean([c["value"] for c, _ in runs])),
                "accuracy": float(np.mean([r.accuracy for _, r in runs])),
                "lora_params": float(np.mean([r.lora_params for _, r in runs])),
                "per_seed_accuracy": [r.accuracy for _, r in runs],
                "per_seed_counts": [c for c, _ in runs],
            }
        )
    if config.out_dir:
        write_csv(
            Path(config.out_dir) / "sweep_threshold.csv",
            ["threshold", "mean_retained_query", "mean_retained_value", "mean_accuracy", "mean_lora_params"],
            [(r["threshold"], r["retained_query"], r["retained_value"], r["accuracy"], r["lora_params"]) for r in rows],
        )
    return rows


@dataclass
class AblationTable:
    rows: list[dict]  # one per (variant, seed)
    inference: list[dict]  # one per (keep, seed)

    def mean_accuracy(self, variant: str) -> float:
        return float(np.mean([r["accuracy"] for r in self.rows if r["variant"] == variant]))

    def mean_inference(self, keep: str) -> float:
        return float(np.mean([r["accuracy"] for r in self.inference if r["keep"] == keep]))


def inference_study(config: ExperimentConfig, base: TransformerModel | None = None,
                    report: ImportanceReport | None = None) -> list[dict]:
    """Train full LoRA, then evaluate with only the large-I or small-I adapters kept."""
    base = base if base is not None else backbone(config)
    _, dev = datasets(config)
    report = report if report is not None else compute_importance(config, base)
    plan = select_retained(report, config.threshold)
    model, topo, res = train_variant(config, plan, AblationKind.FULL_LORA, base)
    post = compute_importance_on(model, topo, config)
    rows = []
    for keep in ("large", "small"):
        masked = inference_mask(topo, post, keep, plan)
        acc, loss = evaluate(model, masked, dev)
        rows.append({"keep": keep, "accuracy": acc, "loss": loss, "counts": plan.counts(), "full_accuracy": res.accuracy})
    return rows


def compute_importance_on(model: TransformerModel, topology: AdapterTopology, config: ExperimentConfig) -> ImportanceReport:
    """Importance of an already-trained topology, measured on the sampled subset."""
    from loradrop.importance import report_from_capture, stratified_sample
    from loradrop.lora import capture_squared_norms

    train, _ = datasets(config)
    subset = stratified_sample(train, config.sampling())
    return report_from_capture(capture_squared_norms(model, topology, subset), {"alpha": config.alpha, "post_training": True})


def run_ablations(config: ExperimentConfig, seeds=(0, 1, 2, 3, 4), variants=TRAINED_VARIANTS,
                  with_inference: bool = True) -> AblationTable:
    """All trained variants at matched per-group k, plus the large/small-I inference study."""
    base = backbone(config)
    rows, inference = [], []
    for seed in seeds:
        cfg = config.with_seed(seed)
        report = compute_importance(cfg, base)
        plan = select_retained(report, cfg.threshold)
        for kind in variants:
            kind = AblationKind(kind)
            _, topo, res = train_variant(cfg, plan, kind, base)
            rows.append(
                {
                    "variant": kind.value,
                    "seed": seed,
                    "k_query": len(topo.own_sites("query")),
                    "k_value": len(topo.own_sites("value")),
                    "accuracy": res.accuracy,
                    "lora_params": res.lora_params,
                }
            )
            log.info("ablation %s seed %d: acc %.4f", kind.value, seed, res.accuracy)
        if with_inference:
            for r in inference_study(cfg, base, report):
                inference.append({"seed": seed, **r})
    table = AblationTable(rows, inference)
    if config.out_dir:
        root = Path(config.out_dir)
        write_csv(
            root / "ablations.csv",
            ["variant", "seed", "k_query", "k_value", "accuracy", "lora_params"],
            [(r["variant"], r["seed"], r["k_query"], r["k_value"], r["accuracy"], r["lora_params"]) for r in rows],
        )
        if inference:
            write_csv(
                root / "inference_mask.csv",
                ["keep", "seed", "count_query", "count_value", "accuracy", "full_accuracy"],
                [
                    (r["keep"], r["seed"], r["counts"]["query"], r["counts"]["value"], r["accuracy"], r["full_accuracy"])
                    for r in inference
                ],
            )
    return table


def sweep_alpha(config: ExperimentConfig, ratios, seeds=(0, 1, 2), step_budget: int | None = None) -> list[dict]:
    """Importance at several sampling ratios with one shared warm-up step budget.

    The budget defaults to the step count ``warmup_epochs`` full passes take at
    the smallest ratio. Returns one row per (group, ratio pair).
    """
    ratios = list(ratios)
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ValueError(f"ratio {r} outside (0, 1)")
    base = backbone(config)
    train, _ = datasets(config)
    if step_budget is None:
        n_min = min(len(stratified_size(train, r)) for r in ratios)
        step_budget = config.warmup_epochs * -(-n_min // config.batch_size)
    corr = {k: {pair: [] for pair in combinations(range(len(ratios)), 2)} for k in MATRIX_KINDS}
    for seed in seeds:
        cfg = config.with_seed(seed)
        reports = [compute_importance(cfg, base, ratio=r, max_steps=step_budget, epochs=10**6) for r in ratios]
        for kind, m in rank_stability(reports).items():
            for i, j in corr[kind]:
                corr[kind][(i, j)].append(float(m[i, j]))
    rows = [
        {"group": k, "ratio_a": ratios[i], "ratio_b": ratios[j], "spearman": float(np.mean(v)), "per_seed": v}
        for k in MATRIX_KINDS
        for (i, j), v in corr[k].items()
    ]
    if config.out_dir:
        write_csv(
            Path(config.out_dir) / "sweep_alpha.csv",
            ["group", "ratio_a", "ratio_b", "mean_spearman"],
            [(r["group"], r["ratio_a"], r["ratio_b"], r["spearman"]) for r in rows],
        )
    return rows


def stratified_size(train: Dataset, ratio: float) -> Dataset:
    from loradrop.importance import stratified_sample

    return stratified_sample(train, SamplingConfig(ratio, 0))


def task_dependence(config: ExperimentConfig, families=("token-count", "nested-dependency"), seeds=(0, 1, 2)) -> dict:
    """Cross-task vs within-task (cross-seed) Spearman correlation of importance.

    Both means are taken over pairs of different run seeds and over both groups.
    """
    base = backbone(config)
    reports = {
        fam: [compute_importance(replace(config, task=replace(config.task, family=fam)).with_seed(s), base) for s in seeds]
        for fam in families
    }
    a, b = families
    cross, within = [], []
    for kind in MATRIX_KINDS:
        # seed i of one task shares every init stream with seed i of the other,
        # so only pairs with different seeds are compared, as within a task
        for i in range(len(seeds)):
            for j in range(len(seeds)):
                if i != j:
                    cross.append(spearman(reports[a][i].I[kind], reports[b][j].I[kind]))
        for fam in families:
            for i, j in combinations(range(len(seeds)), 2):
                within.append(spearman(reports[fam][i].I[kind], reports[fam][j].I[kind]))
    return {"cross_task": float(np.mean(cross)), "within_task": float(np.mean(within)), "reports": reports}


def heatmap_rows(reports: dict[str, ImportanceReport]) -> list[tuple]:
    """(task, group, layer, I, g) rows for external plotting."""
    rows = []
    for task, rep in reports.items():
        for kind in rep.I:
            for layer, (i_val, g_val) in enumerate(zip(rep.I[kind], rep.g[kind])):
                rows.append((task, kind, layer, float(i_val), float(g_val)))
    return rows


def write_histograms(captured, path, bins: int = 20) -> None:
    write_csv(path, ["site", "bin_low", "bin_high", "count"], histogram_rows(norm_histogram(captured, bins)))


def pretrain_to(config: ExperimentConfig, path) -> TransformerModel:
    model = backbone(replace(config, checkpoint=None))
    save_checkpoint(model, path)
    return model
