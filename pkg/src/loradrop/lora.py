"""LoRA adapters, per-site topologies, output capture and parameter accounting."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from loradrop import tensor as T
from loradrop.model import MATRIX_KINDS, AdapterSite, ModelConfig, TransformerModel, adapter_sites
from loradrop.optim import kaiming_init, rng_stream, zeros_init
from loradrop.tensor import Tensor

TOPOLOGY_FORMAT = "loradrop.topology"
TOPOLOGY_VERSION = 1


class TopologyError(ValueError):
    pass


class LoRAAdapter:
    """``x -> scale * (x @ A.T) @ B.T`` with A: (rank, d_in), B: (d_out, rank)."""

    def __init__(self, A: Tensor, B: Tensor, scale: float = 1.0, adapter_id: str = ""):
        if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[1]:
            raise ValueError(f"incompatible LoRA factors A{A.shape} and B{B.shape}")
        r = A.shape[0]
        if not 1 <= r <= min(A.shape[1], B.shape[0]):
            raise ValueError(f"rank {r} outside [1, min(d_in, d_out)]")
        self.A = A
        self.B = B
        self.scale = float(scale)
        self.adapter_id = adapter_id
        A.name, B.name = f"{adapter_id}.A", f"{adapter_id}.B"

    @classmethod
    def fresh(cls, d_in: int, d_out: int, rank: int, rng, scale: float = 1.0, adapter_id: str = "") -> "LoRAAdapter":
        return cls(kaiming_init((rank, d_in), d_in, rng), zeros_init((d_out, rank)), scale, adapter_id)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def num_params(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"adapter expects last axis {self.d_in}, got input shape {x.shape}")
        if x.ndim == 1:
            return T.reshape(self(T.reshape(x, (1, self.d_in))), (self.d_out,))
        out = T.matmul(T.matmul(x, T.transpose(self.A)), T.transpose(self.B))
        return out if self.scale == 1.0 else T.mul_scalar(out, self.scale)

    def dense(self) -> np.ndarray:
        """The materialized update ``scale * B @ A``."""
        return self.scale * (self.B.data @ self.A.data)

    def copy(self) -> "LoRAAdapter":
        return LoRAAdapter(
            Tensor(self.A.data.copy(), requires_grad=self.A.requires_grad),
            Tensor(self.B.data.copy(), requires_grad=self.B.requires_grad),
            self.scale,
            self.adapter_id,
        )


def adapter_forward(adapter: LoRAAdapter, x: Tensor) -> Tensor:
    return adapter(x)


# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class Own:
    adapter_id: str


@dataclass(frozen=True)
class Shared:
    group: str


@dataclass(frozen=True)
class Absent:
    pass


Assignment = Union[Own, Shared, Absent]
ABSENT = Absent()


class AdapterTopology:
    """Which adapter (own, shared-per-kind, or none) serves each site."""

    def __init__(
        self,
        num_layers: int,
        assignment: dict[AdapterSite, Assignment],
        adapters: dict[str, LoRAAdapter],
        shared: dict[str, str] | None = None,
        allow_absent: bool = False,
    ):
        self.num_layers = num_layers
        self.assignment = dict(sorted(assignment.items()))
        self.adapters = adapters
        self.shared = dict(shared or {})
        self.allow_absent = allow_absent
        self.validate()

    def validate(self) -> None:
        expected = set(adapter_sites(self.num_layers))
        if set(self.assignment) != expected:
            raise TopologyError("topology must assign every (layer, kind) site exactly once")
        for group, aid in self.shared.items():
            if group not in MATRIX_KINDS:
                raise TopologyError(f"unknown shared group {group!r}")
            if aid not in self.adapters:
                raise TopologyError(f"shared group {group} references missing adapter {aid!r}")
        owners: dict[str, AdapterSite] = {}
        for site, a in self.assignment.items():
            if isinstance(a, Own):
                if a.adapter_id not in self.adapters:
                    raise TopologyError(f"site {site.key} references missing adapter {a.adapter_id!r}")
                if a.adapter_id in owners or a.adapter_id in self.shared.values():
                    raise TopologyError(f"adapter {a.adapter_id!r} owned by more than one site")
                owners[a.adapter_id] = site
            elif isinstance(a, Shared):
                if a.group != site.kind:
                    raise TopologyError(f"site {site.key} cannot use the {a.group} shared adapter")
                if a.group not in self.shared:
                    raise TopologyError(f"site {site.key} references missing shared group {a.group}")
            elif isinstance(a, Absent):
                if not self.allow_absent:
                    raise TopologyError(f"site {site.key} has no adapter; only legal without sharing")
            else:
                raise TopologyError(f"bad assignment {a!r} at {site.key}")

    def adapter_at(self, site: AdapterSite) -> LoRAAdapter | None:
        a = self.assignment[site]
        if isinstance(a, Own):
            return self.adapters[a.adapter_id]
        if isinstance(a, Shared):
            return self.adapters[self.shared[a.group]]
        return None

    def active_adapters(self) -> list[LoRAAdapter]:
        """Distinct adapters referenced by at least one site, in site order."""
        seen: dict[str, LoRAAdapter] = {}
        for site in self.assignment:
            ad = self.adapter_at(site)
            if ad is not None and ad.adapter_id not in seen:
                seen[ad.adapter_id] = ad
        return list(seen.values())

    def parameters(self) -> list[Tensor]:
        return [p for ad in self.active_adapters() for p in ad.parameters()]

    def own_sites(self, kind: str) -> list[int]:
        return [s.layer for s, a in self.assignment.items() if s.kind == kind and isinstance(a, Own)]

    def sites_with(self, cls) -> list[AdapterSite]:
        return [s for s, a in self.assignment.items() if isinstance(a, cls)]

    def copy(self) -> "AdapterTopology":
        return AdapterTopology(
            self.num_layers,
            dict(self.assignment),
            {k: v.copy() for k, v in self.adapters.items()},
            dict(self.shared),
            self.allow_absent,
        )

    def structure(self) -> tuple:
        return (self.num_layers, tuple(self.assignment.items()), tuple(sorted(self.shared.items())), self.allow_absent)

    def equal(self, other: "AdapterTopology") -> bool:
        """Same structure and bitwise-equal adapter tensors."""
        if self.structure() != other.structure() or set(self.adapters) != set(other.adapters):
            return False
        return all(
            a.scale == b.scale and np.array_equal(a.A.data, b.A.data) and np.array_equal(a.B.data, b.B.data)
            for a, b in ((self.adapters[k], other.adapters[k]) for k in self.adapters)
        )


def own_id(site: AdapterSite) -> str:
    return f"own.{site.key}"


def shared_id(kind: str) -> str:
    return f"shared.{kind}"


def full_topology(config: ModelConfig, rank: int = 8, seed: int = 0, scale: float = 1.0) -> AdapterTopology:
    """An Own adapter at every site, each drawn from its own seed stream."""
    adapters, assignment = {}, {}
    for site in adapter_sites(config.num_layers):
        aid = own_id(site)
        adapters[aid] = LoRAAdapter.fresh(config.d_model, config.d_model, rank, rng_stream(seed, "adapter", aid), scale, aid)
        assignment[site] = Own(aid)
    return AdapterTopology(config.num_layers, assignment, adapters)


class MaskedTopology:
    """Forward-only view of a topology where only ``keep`` sites contribute."""

    def __init__(self, base: AdapterTopology, keep: Iterable[AdapterSite]):
        self.base = base
        self.keep = frozenset(keep)
        self.num_layers = base.num_layers

    def adapter_at(self, site: AdapterSite) -> LoRAAdapter | None:
        return self.base.adapter_at(site) if site in self.keep else None


# ---------------------------------------------------------------- parameter accounting


def trainable_param_count(topology: AdapterTopology, model_config: ModelConfig | None = None) -> int:
    """Sum of r * (d_in + d_out) over distinct adapters; shared adapters count once."""
    if model_config is not None and topology.num_layers != model_config.num_layers:
        raise TopologyError("topology and model disagree on the number of layers")
    return sum(ad.num_params() for ad in topology.active_adapters())


def head_param_count(model_config: ModelConfig) -> int:
    return model_config.d_model * model_config.num_classes + model_config.num_classes


# ---------------------------------------------------------------- capture


class _ExactSum:
    """Running float sum kept as non-overlapping partials, so totals are exact
    up to one final rounding and accumulators merge without error."""

    __slots__ = ("partials",)

    def __init__(self, partials=()):
        self.partials = list(partials)

    def add(self, x: float) -> None:
        partials = self.partials
        i = 0
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]

    def value(self) -> float:
        return math.fsum(self.partials)


class CapturedOutputs:
    """Per-site accumulation of squared adapter-output norms."""

    def __init__(self, sites: Iterable[AdapterSite], record_examples: bool = False):
        self.sites = list(sites)
        self._sums = {s: _ExactSum() for s in self.sites}
        self.token_counts = {s: 0 for s in self.sites}
        self.example_norms: dict[AdapterSite, list[float]] | None = (
            {s: [] for s in self.sites} if record_examples else None
        )

    def record(self, site: AdapterSite, delta: np.ndarray) -> None:
        """Add ``||delta||^2`` of every token, in batch-then-sequence order."""
        if site not in self._sums:
            return
        sq = np.einsum("...d,...d->...", delta, delta)
        acc = self._sums[site]
        for row in sq.reshape(sq.shape[0], -1) if sq.ndim > 1 else sq.reshape(1, -1):
            for v in row.tolist():
                acc.add(v)
            if self.example_norms is not None:
                self.example_norms[site].append(math.fsum(row.tolist()))
        self.token_counts[site] += sq.size

    def total(self, site: AdapterSite) -> float:
        return self._sums[site].value()

    def totals(self) -> dict[AdapterSite, float]:
        return {s: self.total(s) for s in self.sites}

    def group(self, kind: str) -> np.ndarray:
        """g as a length-L vector for one matrix kind."""
        layers = sorted(s.layer for s in self.sites if s.kind == kind)
        return np.array([self.total(AdapterSite(i, kind)) for i in layers])

    def __add__(self, other: "CapturedOutputs") -> "CapturedOutputs":
        if self.sites != other.sites:
            raise ValueError("cannot combine captures over different sites")
        record = self.example_norms is not None and other.example_norms is not None
        out = CapturedOutputs(self.sites, record)
        for s in self.sites:
            out._sums[s] = _ExactSum(self._sums[s].partials + other._sums[s].partials)
            out.token_counts[s] = self.token_counts[s] + other.token_counts[s]
            if record:
                out.example_norms[s] = self.example_norms[s] + other.example_norms[s]
        return out


def capture_squared_norms(
    model: TransformerModel,
    topology,
    dataset,
    record_examples: bool = False,
) -> CapturedOutputs:
    """Run ``dataset`` through the model one example at a time (no tape) and
    accumulate per-site squared adapter-output norms.

    Examples run singly so each contribution is independent of batching.
    """
    if len(dataset) == 0:
        raise ValueError("empty importance subset")
    cap = CapturedOutputs(adapter_sites(model.config.num_layers), record_examples)
    with T.no_grad():
        for row in dataset.tokens:
            model.encode(row[None, :], topology, cap)
    return cap


# ---------------------------------------------------------------- persistence


def _tensor_doc(t: Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}


def _tensor_from(doc: dict) -> Tensor:
    return Tensor(np.array(doc["data"], dtype=np.float64).reshape(doc["shape"]), requires_grad=True)


def topology_to_dict(topology: AdapterTopology) -> dict:
    assignments = {}
    for site, a in topology.assignment.items():
        if isinstance(a, Own):
            assignments[site.key] = {"type": "own", "adapter": a.adapter_id}
        elif isinstance(a, Shared):
            assignments[site.key] = {"type": "shared", "group": a.group}
        else:
            assignments[site.key] = {"type": "absent"}
    return {
        "format": TOPOLOGY_FORMAT,
        "version": TOPOLOGY_VERSION,
        "num_layers": topology.num_layers,
        "allow_absent": topology.allow_absent,
        "assignments": assignments,
        "groups": dict(topology.shared),
        "adapters": {
            aid: {"rank": ad.rank, "scale": ad.scale, "A": _tensor_doc(ad.A), "B": _tensor_doc(ad.B)}
            for aid, ad in topology.adapters.items()
        },
    }


def topology_from_dict(doc: dict, model_config: ModelConfig | None = None) -> AdapterTopology:
    if doc.get("format") != TOPOLOGY_FORMAT:
        raise TopologyError("not a topology document")
    if doc.get("version") != TOPOLOGY_VERSION:
        raise TopologyError(f"unsupported topology version {doc.get('version')}")
    try:
        for group in doc["groups"]:
            if group not in MATRIX_KINDS:
                raise TopologyError(f"unknown group_kind {group!r}")
        adapters = {}
        for aid, a in doc["adapters"].items():
            A, B = _tensor_from(a["A"]), _tensor_from(a["B"])
            if A.shape[0] != a["rank"]:
                raise TopologyError(f"adapter {aid}: rank {a['rank']} but A has shape {A.shape}")
            if model_config is not None and (A.shape[1] != model_config.d_model or B.shape[0] != model_config.d_model):
                raise ValueError(
                    f"adapter {aid}: factors A{A.shape}, B{B.shape} do not fit d_model={model_config.d_model}"
                )
            adapters[aid] = LoRAAdapter(A, B, a["scale"], aid)
        assignment = {}
        for key, a in doc["assignments"].items():
            site = AdapterSite.parse(key)
            if a["type"] == "own":
                assignment[site] = Own(a["adapter"])
            elif a["type"] == "shared":
                if a["group"] not in MATRIX_KINDS:
                    raise TopologyError(f"unknown group_kind {a['group']!r}")
                assignment[site] = Shared(a["group"])
            elif a["type"] == "absent":
                assignment[site] = ABSENT
            else:
                raise TopologyError(f"unknown assignment type {a['type']!r}")
        if model_config is not None and doc["num_layers"] != model_config.num_layers:
            raise ValueError(f"topology has {doc['num_layers']} layers, model has {model_config.num_layers}")
        return AdapterTopology(doc["num_layers"], assignment, adapters, doc["groups"], doc["allow_absent"])
    except (KeyError, TypeError) as exc:
        raise TopologyError(f"malformed topology: {exc}") from None


def save_topology(topology: AdapterTopology, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(topology_to_dict(topology)))
    os.replace(tmp, path)


def load_topology(path: str | os.PathLike, model_config: ModelConfig | None = None) -> AdapterTopology:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError(f"malformed topology file {path}: {exc}") from None
    return topology_from_dict(doc, model_config)
