"""Output-norm importance: stratified subset, warm-up, capture, normalization."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import stats

from loradrop import tensor as T
from loradrop.data import Dataset
from loradrop.lora import CapturedOutputs, capture_squared_norms, full_topology
from loradrop.model import MATRIX_KINDS, TransformerModel
from loradrop.optim import SGD, Adam, rng_stream

REPORT_FORMAT = "loradrop.importance"
REPORT_VERSION = 1


class DegenerateImportanceError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    ratio: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"sampling ratio must lie in (0, 1), got {self.ratio}")


@dataclass(frozen=True)
class WarmupConfig:
    epochs: int = 3
    max_steps: int | None = None
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 32
    rank: int = 8
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("warm-up needs at least one epoch")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown warm-up optimizer {self.optimizer!r}")


@dataclass
class ImportanceReport:
    g: dict[str, np.ndarray]
    I: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    timestamp: float | None = field(default=None, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImportanceReport):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and self.g.keys() == other.g.keys()
            and all(np.array_equal(self.g[k], other.g[k]) and np.array_equal(self.I[k], other.I[k]) for k in self.g)
        )

    @property
    def num_layers(self) -> int:
        return len(next(iter(self.I.values())))

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "groups": {k: {"g": self.g[k].tolist(), "I": self.I[k].tolist()} for k in self.g},
            "metadata": self.metadata,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ImportanceReport":
        if doc.get("format") != REPORT_FORMAT or doc.get("version") != REPORT_VERSION:
            raise ValueError("not a supported importance report")
        groups = doc["groups"]
        return cls(
            {k: np.array(v["g"], dtype=np.float64) for k, v in groups.items()},
            {k: np.array(v["I"], dtype=np.float64) for k, v in groups.items()},
            doc.get("metadata", {}),
            doc.get("timestamp"),
        )

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ImportanceReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def normalize(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if (g < 0).any():
        raise ValueError("importance accumulators must be non-negative")
    total = g.sum()
    if total == 0:
        raise DegenerateImportanceError("degenerate importance: all-zero group")
    return g / total


def report_from_capture(captured: CapturedOutputs, metadata: dict | None = None) -> ImportanceReport:
    g = {kind: captured.group(kind) for kind in MATRIX_KINDS}
    return ImportanceReport(g, {k: normalize(v) for k, v in g.items()}, dict(metadata or {}), time.time())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_sample(dataset: Dataset, config: SamplingConfig) -> Dataset:
    """Per-class proportional subset, kept in dataset order."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    rng = rng_stream(config.seed, "stratified-sample")
    chosen = []
    for label in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == label)
        n = max(1, _round_half_up(config.ratio * len(members)))
        chosen.append(rng.choice(members, size=min(n, len(members)), replace=False))
    return dataset.subset(np.sort(np.concatenate(chosen)))


def warmup(model: TransformerModel, subset: Dataset, config: WarmupConfig):
    """Train a fresh full topology (and a fresh head) on ``subset``.

    Works on a copy; returns ``(model_copy, topology, steps_taken)``.
    """
    work = model.copy()
    work.freeze_base()
    work.reset_head(rng_stream(config.seed, "head").integers(2**31))
    topo = full_topology(work.config, config.rank, int(rng_stream(config.seed, "adapters").integers(2**31)), config.scale)
    params = topo.parameters() + work.head_parameters()
    if config.optimizer == "adam":
        opt = Adam(params, lr=config.lr)
    else:
        opt = SGD(params, lr=config.lr)
    rng = rng_stream(config.seed, "warmup-batches")
    steps = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(subset))
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                return work, topo, steps
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            loss = T.cross_entropy(work.forward(subset.tokens[idx], topo), subset.labels[idx])
            T.backward(loss)
            opt.step()
            steps += 1
    return work, topo, steps


def evaluate_importance(
    model: TransformerModel,
    dataset: Dataset,
    sampling: SamplingConfig,
    warmup_config: WarmupConfig,
    record_examples: bool = False,
    return_capture: bool = False,
):
    """Sample, warm up, capture and normalize. The caller's model is untouched."""
    subset = stratified_sample(dataset, sampling)
    work, topo, steps = warmup(model, subset, warmup_config)
    captured = capture_squared_norms(work, topo, subset, record_examples=record_examples)
    meta = {
        "alpha": sampling.ratio,
        "sampling_seed": sampling.seed,
        "warmup_epochs": warmup_config.epochs,
        "warmup_max_steps": warmup_config.max_steps,
        "warmup_steps": steps,
        "warmup_lr": warmup_config.lr,
        "warmup_optimizer": warmup_config.optimizer,
        "warmup_seed": warmup_config.seed,
        "rank": warmup_config.rank,
        "subset_size": len(subset),
        "subset_ids": subset.ids.tolist(),
        "dataset_fingerprint": dataset.fingerprint(),
    }
    report = report_from_capture(captured, meta)
    return (report, captured) if return_capture else report


# ---------------------------------------------------------------- distribution reports


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray


def norm_histogram(captured: CapturedOutputs, bins: int) -> dict:
    """Equal-width histogram of per-example squared norms over [0, max] for every site."""
    if bins < 1:
        raise ValueError("bins must be a positive integer")
    if captured.example_norms is None:
        raise ValueError("capture ran without per-example recording")
    out = {}
    for site, norms in captured.example_norms.items():
        values = np.asarray(norms, dtype=np.float64)
        top = float(values.max()) if len(values) else 0.0
        edges = np.linspace(0.0, top, bins + 1)
        if top == 0.0:
            counts = np.zeros(bins, dtype=np.int64)
            counts[0] = len(values)
        else:
            counts, _ = np.histogram(values, bins=edges)
        out[site] = Histogram(edges, counts.astype(np.int64))
    return out


def histogram_rows(hists: dict) -> list[tuple[str, float, float, int]]:
    rows = []
    for site, h in sorted(hists.items()):
        for lo, hi, n in zip(h.edges[:-1], h.edges[1:], h.counts):
            rows.append((site.key, float(lo), float(hi), int(n)))
    return rows


def spearman(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"mismatched group lengths {a.shape} and {b.shape}")
    return float(stats.spearmanr(a, b).statistic)


def rank_stability(reports: list[ImportanceReport]) -> dict[str, np.ndarray]:
    """Pairwise Spearman correlation of I per group, as a (k, k) matrix."""
    if len(reports) < 2:
        raise ValueError("rank_stability needs at least two reports")
    out = {}
    for kind in reports[0].I:
        vecs = [r.I[kind] for r in reports]
        if len({len(v) for v in vecs}) != 1:
            raise ValueError(f"mismatched group lengths in {kind}")
        k = len(vecs)
        m = np.eye(k)
        for i, j in combinations(range(k), 2):
            m[i, j] = m[j, i] = spearman(vecs[i], vecs[j])
        out[kind] = m
    return out
