"""Synthetic sequence-classification tasks and their JSONL persistence.

Three rule families, each label computable from the tokens alone:

* ``token-count``: token ``t`` belongs to class ``t % num_classes``; the label
  is the class with the (strictly) most tokens in the sequence.
* ``pairwise-order``: ``log2(num_classes)`` marker pairs ``(2j, 2j+1)``, each
  marker appearing once; bit ``j`` of the label is set when ``2j+1`` comes
  before ``2j``.
* ``nested-dependency``: tokens 0 and 1 are open/close brackets forming a
  balanced string among filler tokens; the label is the maximum nesting
  depth minus one.

A nonzero ``variant`` relabels the vocabulary with a fixed permutation, so the
same rule runs over different surface tokens. Pretraining uses such a variant.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from loradrop.optim import rng_stream

FAMILIES = ("token-count", "pairwise-order", "nested-dependency")
DATASET_FORMAT = "loradrop.dataset"
DATASET_VERSION = 1


class InfeasibleTaskError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    family: str = "token-count"
    vocab_size: int = 16
    seq_len: int = 16
    num_classes: int = 4
    balance: tuple[float, ...] | None = None
    seed: int = 0
    train_size: int = 2000
    dev_size: int = 500
    variant: int = 0

    def __post_init__(self):
        if self.balance is not None:
            object.__setattr__(self, "balance", tuple(float(b) for b in self.balance))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["balance"] = list(self.balance) if self.balance is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    def class_probs(self) -> np.ndarray:
        if self.balance is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        p = np.asarray(self.balance, dtype=float)
        return p / p.sum()


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int


@dataclass
class Dataset:
    tokens: np.ndarray  # (N, S) int64
    labels: np.ndarray  # (N,) int64
    ids: np.ndarray  # (N,) int64, stable example ids
    spec: TaskSpec | None = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.tokens.ndim != 2 or len(self.tokens) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("tokens, labels and ids must align")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Example]:
        for row, y in zip(self.tokens, self.labels):
            yield Example(tuple(int(t) for t in row), int(y))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ids, other.ids)
        )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.tokens[index], self.labels[index], self.ids[index], self.spec)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.tokens, other.tokens]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.ids, other.ids]),
            self.spec,
        )

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.tokens.tobytes())
        h.update(self.labels.tobytes())
        h.update(self.ids.tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------- rules


def _permutation(spec: TaskSpec) -> np.ndarray:
    if spec.variant == 0:
        return np.arange(spec.vocab_size)
    return rng_stream(0, "vocab-variant", spec.variant).permutation(spec.vocab_size)


def _num_pairs(num_classes: int) -> int:
    k = int(round(np.log2(num_classes))) if num_classes > 0 else 0
    if num_classes < 2 or 2**k != num_classes:
        raise InfeasibleTaskError(f"pairwise-order needs a power-of-two class count, got {num_classes}")
    return k


def check_feasible(spec: TaskSpec) -> None:
    if spec.family not in FAMILIES:
        raise InfeasibleTaskError(f"unknown task family {spec.family!r}; expected one of {FAMILIES}")
    if spec.num_classes < 2 or spec.seq_len < 1 or spec.vocab_size < 2:
        raise InfeasibleTaskError("need at least 2 classes, 2 tokens and length 1")
    if spec.balance is not None and (len(spec.balance) != spec.num_classes or min(spec.balance) < 0):
        raise InfeasibleTaskError("balance must give one non-negative weight per class")
    if spec.family == "token-count":
        if spec.vocab_size < spec.num_classes:
            raise InfeasibleTaskError("token-count needs at least one token per class")
    elif spec.family == "pairwise-order":
        k = _num_pairs(spec.num_classes)
        if 2 * k >= spec.vocab_size or 2 * k > spec.seq_len:
            raise InfeasibleTaskError(f"pairwise-order with {k} marker pairs does not fit vocab/length")
    else:
        if spec.vocab_size < 3 or 2 * spec.num_classes > spec.seq_len:
            raise InfeasibleTaskError(f"nested-dependency depth {spec.num_classes} does not fit length {spec.seq_len}")


def label_of(tokens, spec: TaskSpec) -> int:
    """Apply the family rule to one token sequence."""
    inv = np.argsort(_permutation(spec))
    canon = inv[np.asarray(tokens, dtype=np.int64)]
    c = spec.num_classes
    if spec.family == "token-count":
        counts = np.bincount(canon % c, minlength=c)
        top = np.flatnonzero(counts == counts.max())
        if len(top) != 1:
            raise ValueError("token-count label undefined: tied majority")
        return int(top[0])
    if spec.family == "pairwise-order":
        label = 0
        for j in range(_num_pairs(c)):
            pa = np.flatnonzero(canon == 2 * j)
            pb = np.flatnonzero(canon == 2 * j + 1)
            if len(pa) != 1 or len(pb) != 1:
                raise ValueError(f"pairwise-order label undefined: marker pair {j} missing or repeated")
            label |= int(pb[0] < pa[0]) << j
        return label
    depth = best = 0
    for t in canon:
        if t == 0:
            depth += 1
            best = max(best, depth)
        elif t == 1:
            depth -= 1
            if depth < 0:
                raise ValueError("nested-dependency label undefined: unbalanced brackets")
    if depth != 0 or best == 0:
        raise ValueError("nested-dependency label undefined: unbalanced brackets")
    return best - 1


def _token_count_seq(label: int, spec: TaskSpec, rng) -> np.ndarray:
    c, s = spec.num_classes, spec.seq_len
    members = [np.arange(k, spec.vocab_size, c) for k in range(c)]
    while True:
        counts = rng.multinomial(s, np.full(c, 1.0 / c))
        top = np.flatnonzero(counts == counts.max())
        if len(top) == 1 and top[0] == label:
            break
        # swap the winning count into the requested class
        if len(top) == 1:
            counts[[label, top[0]]] = counts[[top[0], label]]
            break
    seq = np.concatenate([rng.choice(members[k], size=n) for k, n in enumerate(counts)])
    return rng.permutation(seq)


def _pairwise_seq(label: int, spec: TaskSpec, rng) -> np.ndarray:
    k = _num_pairs(spec.num_classes)
    filler = np.arange(2 * k, spec.vocab_size)
    seq = rng.choice(filler, size=spec.seq_len)
    pos = rng.choice(spec.seq_len, size=2 * k, replace=False)
    for j in range(k):
        first, second = sorted(pos[2 * j : 2 * j + 2])
        a, b = (2 * j + 1, 2 * j) if (label >> j) & 1 else (2 * j, 2 * j + 1)
        seq[first], seq[second] = a, b
    return seq


def _dyck(pairs: int, depth: int, rng) -> list[int]:
    while True:
        out, d, best, opens = [], 0, 0, 0
        for _ in range(2 * pairs):
            can_open = opens < pairs and d < depth
            can_close = d > 0
            if can_open and (not can_close or rng.random() < 0.5):
                out.append(0)
                d += 1
                opens += 1
                best = max(best, d)
            else:
                out.append(1)
                d -= 1
        if best == depth:
            return out


def _nested_seq(label: int, spec: TaskSpec, rng) -> np.ndarray:
    depth = label + 1
    max_pairs = max(depth, spec.seq_len // 2 - 1) if spec.seq_len >= 2 * depth + 2 else depth
    pairs = int(rng.integers(depth, max_pairs + 1))
    brackets = _dyck(pairs, depth, rng)
    seq = rng.choice(np.arange(2, spec.vocab_size), size=spec.seq_len)
    pos = np.sort(rng.choice(spec.seq_len, size=2 * pairs, replace=False))
    seq[pos] = brackets
    return seq


_GENERATORS = {
    "token-count": _token_count_seq,
    "pairwise-order": _pairwise_seq,
    "nested-dependency": _nested_seq,
}


def _allocate(n: int, probs: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``n`` examples across classes."""
    raw = probs * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _draw(spec: TaskSpec, n: int, rng, exclude: set, start_id: int) -> Dataset:
    perm = _permutation(spec)
    labels = np.repeat(np.arange(spec.num_classes), _allocate(n, spec.class_probs()))
    labels = rng.permutation(labels)
    gen = _GENERATORS[spec.family]
    rows = []
    for y in labels:
        for _ in range(1000):
            seq = perm[gen(int(y), spec, rng)]
            key = seq.tobytes()
            if key not in exclude:
                break
        else:
            raise InfeasibleTaskError("could not draw enough distinct sequences")
        exclude.add(key)
        rows.append(seq)
    tokens = np.stack(rows) if rows else np.zeros((0, spec.seq_len), dtype=np.int64)
    return Dataset(tokens, labels, np.arange(start_id, start_id + n), spec)


def generate(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    """Deterministic, disjoint (train, dev) datasets for ``spec``."""
    check_feasible(spec)
    rng = rng_stream(spec.seed, "generate", spec.family, spec.variant)
    seen: set = set()
    train = _draw(spec, spec.train_size, rng, seen, 0)
    dev = _draw(spec, spec.dev_size, rng, seen, spec.train_size)
    return train, dev


def generic_specs(spec: TaskSpec, variant: int = 1) -> list[TaskSpec]:
    """One relabeled-vocabulary task per family, used to pretrain the backbone."""
    return [
        replace(spec, family=fam, variant=variant, seed=spec.seed + 7919 * (i + 1), balance=None)
        for i, fam in enumerate(FAMILIES)
    ]


# ---------------------------------------------------------------- persistence


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": dataset.spec.to_dict() if dataset.spec else None,
        "count": len(dataset),
    }
    lines = [json.dumps(header)]
    for i, row, y in zip(dataset.ids, dataset.tokens, dataset.labels):
        lines.append(json.dumps({"id": int(i), "tokens": row.tolist(), "label": int(y)}))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_dataset(path: str | os.PathLike) -> Dataset:
    try:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except (IndexError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"malformed dataset file {path}: {exc}") from None
    if header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{path} is not a dataset file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')}")
    if len(records) != header.get("count"):
        raise DatasetFormatError(f"{path}: expected {header.get('count')} records, found {len(records)}")
    try:
        spec = TaskSpec.from_dict(header["spec"]) if header.get("spec") else None
        tokens = np.array([r["tokens"] for r in records], dtype=np.int64).reshape(len(records), -1)
        labels = np.array([r["label"] for r in records], dtype=np.int64)
        ids = np.array([r["id"] for r in records], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed dataset record in {path}: {exc}") from None
    return Dataset(tokens, labels, ids, spec)


def check_compatible(dataset: Dataset, vocab_size: int, max_seq_len: int, num_classes: int) -> None:
    """Raise ``ValueError`` if the dataset cannot feed a model of the given shape."""
    if dataset.spec is not None and dataset.spec.vocab_size != vocab_size:
        raise ValueError(f"dataset was generated for vocabulary {dataset.spec.vocab_size}, model has {vocab_size}")
    if len(dataset) == 0:
        return
    if dataset.tokens.max() >= vocab_size or dataset.tokens.min() < 0:
        raise ValueError(f"dataset tokens exceed model vocabulary of {vocab_size}")
    if dataset.tokens.shape[1] > max_seq_len:
        raise ValueError(f"dataset sequences of length {dataset.tokens.shape[1]} exceed {max_seq_len}")
    if dataset.labels.max() >= num_classes:
        raise ValueError(f"dataset labels exceed {num_classes} classes")
