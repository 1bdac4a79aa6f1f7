"""Threshold selection of retained layers and topology construction, including ablations."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from loradrop.importance import ImportanceReport
from loradrop.lora import (
    ABSENT,
    AdapterTopology,
    LoRAAdapter,
    MaskedTopology,
    Own,
    Shared,
    own_id,
    shared_id,
)
from loradrop.model import MATRIX_KINDS, AdapterSite, ModelConfig
from loradrop.optim import rng_stream


class AblationKind(str, enum.Enum):
    LORA_DROP = "lora_drop"
    WITHOUT_SHARE = "without_share"
    INVERSE = "inverse"
    RANDOM_K = "random_k"
    TOP_K = "top_k"
    FULL_LORA = "full_lora"
    INFER_KEEP_LARGE = "infer_keep_large"
    INFER_KEEP_SMALL = "infer_keep_small"


TRAINED_VARIANTS = (
    AblationKind.LORA_DROP,
    AblationKind.WITHOUT_SHARE,
    AblationKind.INVERSE,
    AblationKind.RANDOM_K,
    AblationKind.TOP_K,
)


@dataclass(frozen=True)
class GroupPlan:
    retained: tuple[int, ...]  # most to least important
    dropped: tuple[int, ...]
    threshold: float
    cumulative: float


@dataclass(frozen=True)
class RetentionPlan:
    groups: dict[str, GroupPlan]

    @property
    def num_layers(self) -> int:
        g = next(iter(self.groups.values()))
        return len(g.retained) + len(g.dropped)

    def counts(self) -> dict[str, int]:
        return {k: len(g.retained) for k, g in self.groups.items()}

    def to_dict(self) -> dict:
        return {
            k: {"retained": list(g.retained), "dropped": list(g.dropped), "threshold": g.threshold, "cumulative": g.cumulative}
            for k, g in self.groups.items()
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetentionPlan":
        return cls(
            {
                k: GroupPlan(tuple(v["retained"]), tuple(v["dropped"]), float(v["threshold"]), float(v["cumulative"]))
                for k, v in d.items()
            }
        )


def importance_order(importance) -> list[int]:
    """Layer indices by importance, descending; equal values keep the lower index first."""
    imp = np.asarray(importance, dtype=np.float64)
    return sorted(range(len(imp)), key=lambda i: (-imp[i], i))


def select_group(importance, threshold: float) -> GroupPlan:
    imp = np.asarray(importance, dtype=np.float64)
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if imp.ndim != 1 or len(imp) == 0 or (imp < 0).any() or abs(imp.sum() - 1.0) > 1e-9:
        raise ValueError("importance must be a non-negative vector summing to 1")
    order = importance_order(imp)
    if threshold == 1.0:
        return GroupPlan(tuple(order), (), threshold, float(imp.sum()))
    # exact prefix sums, so the cut does not depend on summation order
    retained: list[int] = []
    cum = 0.0
    for i in order:
        retained.append(i)
        cum = math.fsum(imp[retained])
        if cum >= threshold:
            break
    dropped = tuple(sorted(set(order) - set(retained)))
    return GroupPlan(tuple(retained), dropped, threshold, cum)


def select_retained(importance, threshold: float) -> RetentionPlan:
    """Greedy most-to-least-important prefix reaching ``threshold``, per group.

    ``importance`` is a mapping kind -> I vector, an :class:`ImportanceReport`,
    or a single vector (treated as both groups).
    """
    if isinstance(importance, ImportanceReport):
        importance = importance.I
    if not isinstance(importance, dict):
        importance = {kind: importance for kind in MATRIX_KINDS}
    return RetentionPlan({k: select_group(v, threshold) for k, v in importance.items()})


def _own_and_rest(plan: RetentionPlan, kind: AblationKind, k, rng) -> dict[str, set[int]]:
    L = plan.num_layers
    own: dict[str, set[int]] = {}
    for group, gp in plan.groups.items():
        if kind in (AblationKind.LORA_DROP, AblationKind.WITHOUT_SHARE):
            own[group] = set(gp.retained)
        elif kind is AblationKind.INVERSE:
            own[group] = set(gp.dropped)
        elif kind is AblationKind.FULL_LORA:
            own[group] = set(range(L))
        else:
            kk = len(gp.retained) if k is None else (k[group] if isinstance(k, dict) else int(k))
            if not 0 <= kk <= L:
                raise ValueError(f"k={kk} outside [0, {L}]")
            if kind is AblationKind.TOP_K:
                own[group] = set(range(L - kk, L))
            else:
                if rng is None:
                    raise ValueError("random_k needs a seed")
                own[group] = {int(i) for i in rng_stream(rng, "random-k", group).choice(L, size=kk, replace=False)}
    return own


def build_topology(
    plan: RetentionPlan,
    kind: AblationKind | str,
    config: ModelConfig,
    rank: int = 8,
    init_seed: int = 0,
    scale: float = 1.0,
    k: int | dict[str, int] | None = None,
    rng: int | None = None,
) -> AdapterTopology:
    """Fresh adapters laid out per ``kind``.

    Adapters are drawn from per-adapter seed streams, so a site owned in two
    variants starts from the same values. ``rng`` is the seed for random_k.
    """
    kind = AblationKind(kind)
    if kind in (AblationKind.INFER_KEEP_LARGE, AblationKind.INFER_KEEP_SMALL):
        raise ValueError(f"{kind.value} is an inference-time mask; use inference_mask")
    if plan.num_layers != config.num_layers:
        raise ValueError(f"plan covers {plan.num_layers} layers, model has {config.num_layers}")
    own = _own_and_rest(plan, kind, k, rng)
    share = kind is not AblationKind.WITHOUT_SHARE
    d = config.d_model
    adapters: dict[str, LoRAAdapter] = {}
    assignment = {}
    shared = {}
    for layer in range(config.num_layers):
        for group in MATRIX_KINDS:
            site = AdapterSite(layer, group)
            if layer in own[group]:
                aid = own_id(site)
                adapters[aid] = LoRAAdapter.fresh(d, d, rank, rng_stream(init_seed, "adapter", aid), scale, aid)
                assignment[site] = Own(aid)
            elif share:
                if group not in shared:
                    sid = shared_id(group)
                    adapters[sid] = LoRAAdapter.fresh(d, d, rank, rng_stream(init_seed, "adapter", sid), scale, sid)
                    shared[group] = sid
                assignment[site] = Shared(group)
            else:
                assignment[site] = ABSENT
    return AdapterTopology(config.num_layers, assignment, adapters, shared, allow_absent=not share)


def inference_mask(
    topology_full: AdapterTopology,
    report: ImportanceReport,
    keep: str,
    counts: dict[str, int] | RetentionPlan,
) -> MaskedTopology:
    """Keep only the ``counts[group]`` largest- or smallest-importance adapters of each group."""
    if keep not in ("large", "small"):
        raise ValueError("keep must be 'large' or 'small'")
    if isinstance(counts, RetentionPlan):
        counts = counts.counts()
    if report.num_layers != topology_full.num_layers:
        raise ValueError("importance report and topology disagree on the number of layers")
    kept = []
    for group, imp in report.I.items():
        order = importance_order(imp)
        if keep == "small":
            order = order[::-1]
        n = counts[group]
        if not 0 <= n <= len(order):
            raise ValueError(f"count {n} outside [0, {len(order)}]")
        kept.extend(AdapterSite(i, group) for i in order[:n])
    return MaskedTopology(topology_full, kept)
