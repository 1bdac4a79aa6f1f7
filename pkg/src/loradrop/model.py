"""A small pre-LayerNorm transformer encoder for sequence classification.

Query and value projections of every layer are adapter sites. With a
topology attached, those projections compute ``x @ W + adapter(x)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterator

import numpy as np

from loradrop import tensor as T
from loradrop.optim import Adam, kaiming_init, rng_stream
from loradrop.tensor import Tensor

if TYPE_CHECKING:
    from loradrop.data import TaskSpec
    from loradrop.lora import CapturedOutputs

CHECKPOINT_FORMAT = "loradrop.checkpoint"
CHECKPOINT_VERSION = 1
MATRIX_KINDS = ("query", "value")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    d_model: int = 32
    num_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 16
    max_seq_len: int = 16
    num_classes: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True, order=True)
class AdapterSite:
    layer: int
    kind: str

    def __post_init__(self):
        if self.kind not in MATRIX_KINDS:
            raise ValueError(f"unknown matrix kind {self.kind!r}")

    @property
    def key(self) -> str:
        return f"{self.layer}.{self.kind}"

    @classmethod
    def parse(cls, key: str) -> "AdapterSite":
        layer, _, kind = key.partition(".")
        return cls(int(layer), kind)


def adapter_sites(num_layers: int) -> list[AdapterSite]:
    return [AdapterSite(i, kind) for i in range(num_layers) for kind in MATRIX_KINDS]


class TransformerModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        c = config
        self.params: dict[str, Tensor] = {}
        rng = rng_stream(seed, "model-init")

        def dense(name, fan_in, fan_out):
            self.params[name] = kaiming_init((fan_in, fan_out), fan_in, rng)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, value), requires_grad=True)

        self.params["embed"] = Tensor(rng.normal(0.0, 1.0, (c.vocab_size, c.d_model)), requires_grad=True)
        self.params["pos"] = Tensor(rng.normal(0.0, 0.1, (c.max_seq_len, c.d_model)), requires_grad=True)
        for i in range(c.num_layers):
            p = f"layers.{i}."
            const(p + "ln1.g", (c.d_model,), 1.0)
            const(p + "ln1.b", (c.d_model,), 0.0)
            for m in ("wq", "wk", "wv", "wo"):
                dense(p + m, c.d_model, c.d_model)
            const(p + "ln2.g", (c.d_model,), 1.0)
            const(p + "ln2.b", (c.d_model,), 0.0)
            dense(p + "ff1.w", c.d_model, c.d_ff)
            const(p + "ff1.b", (c.d_ff,), 0.0)
            dense(p + "ff2.w", c.d_ff, c.d_model)
            const(p + "ff2.b", (c.d_model,), 0.0)
        const("ln_f.g", (c.d_model,), 1.0)
        const("ln_f.b", (c.d_model,), 0.0)
        self.reset_head(seed)
        for name, t in self.params.items():
            t.name = name

    # ------------------------------------------------------------ params

    HEAD = ("head.w", "head.b")

    def reset_head(self, seed: int, num_classes: int | None = None) -> None:
        """Fresh classifier head from its own seed stream."""
        c = self.config
        n = num_classes or c.num_classes
        rng = rng_stream(seed, "head-init")
        self.params["head.w"] = kaiming_init((c.d_model, n), c.d_model, rng)
        self.params["head.b"] = Tensor(np.zeros(n), requires_grad=True)
        self.params["head.w"].name, self.params["head.b"].name = self.HEAD
        self.params["head.w"].requires_grad = self.params["head.b"].requires_grad = self._head_trainable()

    def _head_trainable(self) -> bool:
        w = self.params.get("head.w")
        return True if w is None else w.requires_grad

    def base_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.params.items() if n not in self.HEAD)

    def head_parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.HEAD]

    def freeze_base(self, train_head: bool = True) -> None:
        for _, t in self.base_parameters():
            t.requires_grad = False
        for t in self.head_parameters():
            t.requires_grad = train_head

    def unfreeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = True

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def copy(self) -> "TransformerModel":
        new = TransformerModel.__new__(TransformerModel)
        new.config = self.config
        new.params = {}
        for n, t in self.params.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
            new.params[n] = c
        return new

    def state_equal(self, other: "TransformerModel", base_only: bool = False) -> bool:
        names = [n for n, _ in self.base_parameters()] if base_only else list(self.params)
        return all(np.array_equal(self.params[n].data, other.params[n].data) for n in names)

    # ------------------------------------------------------------ forward

    def encode(self, tokens, topology=None, capture: "CapturedOutputs | None" = None) -> Tensor:
        """Final-layer-normalized hidden states, shape (B, S, d_model)."""
        c = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ValueError(f"expected a (batch, seq) token matrix, got shape {tokens.shape}")
        b, s = tokens.shape
        if s > c.max_seq_len:
            raise ValueError(f"sequence length {s} exceeds max_seq_len {c.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise ValueError(f"token id out of range [0, {c.vocab_size})")
        P = self.params
        h = T.add(T.embedding(P["embed"], tokens), T.embedding(P["pos"], np.arange(s)))
        nh, dh = c.num_heads, c.d_model // c.num_heads
        for i in range(c.num_layers):
            p = f"layers.{i}."
            with T.scope(f"layer{i}"):
                a = T.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
                q = self._project(a, P[p + "wq"], AdapterSite(i, "query"), topology, capture)
                k = T.matmul(a, P[p + "wk"])
                v = self._project(a, P[p + "wv"], AdapterSite(i, "value"), topology, capture)
                q, k, v = (T.transpose(T.reshape(x, (b, s, nh, dh)), (0, 2, 1, 3)) for x in (q, k, v))
                scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
                att = T.matmul(T.softmax(scores), v)
                att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, s, c.d_model))
                h = T.add(h, T.matmul(att, P[p + "wo"]))
                f = T.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
                f = T.gelu(T.add(T.matmul(f, P[p + "ff1.w"]), P[p + "ff1.b"]))
                h = T.add(h, T.add(T.matmul(f, P[p + "ff2.w"]), P[p + "ff2.b"]))
        return T.layer_norm(h, P["ln_f.g"], P["ln_f.b"])

    @staticmethod
    def _project(a, w, site, topology, capture):
        out = T.matmul(a, w)
        adapter = topology.adapter_at(site) if topology is not None else None
        if adapter is None:
            return out
        with T.scope(f"layer{site.layer}.{site.kind}"):
            delta = adapter(a)
        if capture is not None:
            capture.record(site, delta.data)
        return T.add(out, delta)

    def pooled(self, tokens, topology=None, capture=None) -> Tensor:
        return T.mean(self.encode(tokens, topology, capture), axis=1)

    def forward(self, tokens, topology=None, capture=None, head: tuple[Tensor, Tensor] | None = None) -> Tensor:
        w, bias = head if head is not None else self.head_parameters()
        return T.add(T.matmul(self.pooled(tokens, topology, capture), w), bias)

    __call__ = forward


def forward(model: TransformerModel, batch, topology=None) -> Tensor:
    return model.forward(batch, topology)


def freeze_base(model: TransformerModel) -> None:
    model.freeze_base()


def pretrain_base(
    model: TransformerModel,
    task: "TaskSpec",
    steps: int,
    rng_seed: int,
    lr: float = 3e-3,
    batch_size: int = 32,
) -> list[float]:
    """Multi-task pretraining of every base parameter on relabeled-vocabulary tasks.

    Each family gets a temporary head, discarded afterwards; the model's own
    head is left as it was. Returns the per-step training loss.
    """
    from loradrop.data import generate, generic_specs

    if steps <= 0:
        return []
    if any(not t.requires_grad for _, t in model.base_parameters()):
        raise ValueError("pretrain_base needs an unfrozen model")
    c = model.config
    specs = generic_specs(task)
    sets = [generate(s)[0] for s in specs]
    heads = []
    for j, s in enumerate(specs):
        hrng = rng_stream(rng_seed, "pretrain-head", j)
        heads.append((kaiming_init((c.d_model, s.num_classes), c.d_model, hrng), Tensor(np.zeros(s.num_classes), requires_grad=True)))
    base = [t for _, t in model.base_parameters()]
    opt = Adam(base, lr=lr)
    head_opts = [Adam(h, lr=lr) for h in heads]
    rng = rng_stream(rng_seed, "pretrain-batches")
    losses = []
    for step in range(steps):
        j = step % len(sets)
        data = sets[j]
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        opt.zero_grad()
        head_opts[j].zero_grad()
        loss = T.cross_entropy(model.forward(data.tokens[idx], head=heads[j]), data.labels[idx])
        T.backward(loss)
        opt.step()
        head_opts[j].step()
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------- checkpoints


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(model: TransformerModel, path: str | os.PathLike) -> None:
    """JSON container; float64 values round-trip exactly through ``repr``."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {n: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for n, t in model.params.items()},
    }
    _atomic_write(Path(path), json.dumps(doc))


def load_checkpoint(path: str | os.PathLike) -> TransformerModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["config"])
    model = TransformerModel(config)
    for name, entry in doc["params"].items():
        if name not in model.params and name not in TransformerModel.HEAD:
            raise CheckpointError(f"unexpected parameter {name!r}")
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        expected = model.params[name].shape
        if name not in TransformerModel.HEAD and arr.shape != expected:
            raise CheckpointError(f"parameter {name}: shape {arr.shape}, expected {expected}")
        model.params[name] = Tensor(arr, requires_grad=True, name=name)
    return model
