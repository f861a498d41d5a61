"""Score tables, rank assignment and non-linear rank aggregation.

Ranks follow the convention that the best architecture receives rank K and
ties share their midrank. Multiple rankings are combined through the sum
of log-ranks (the log of the rank product): a network aggregates high only
if every constituent ranking places it high, and the result depends on the
constituent scores only through their order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import TableError, UndefinedMetricError
from .fim import FimConfig, build_for_scoring, score_network
from .graphs import count_flops, parameter_count, trainable_layer_count
from .space import CanonicalGraph

PROXY_NAMES = ("vkdnw_single", "vkdnw_entropy", "flops", "aleph", "n_params")


@dataclass(frozen=True)
class ScoreTable:
    """(arch_id, proxy_name) -> value, with provenance."""

    rows: tuple[tuple[str, str, float], ...]
    provenance: str = "native"

    def __post_init__(self):
        seen = set()
        for arch_id, proxy, value in self.rows:
            key = (arch_id, proxy)
            if key in seen:
                raise TableError(f"duplicate entry for {key}")
            if not np.isfinite(value):
                raise TableError(f"non-finite value for {key}")
            seen.add(key)

    def proxies(self) -> list[str]:
        return sorted({proxy for _, proxy, _ in self.rows})

    def column(self, proxy: str) -> list[tuple[str, float]]:
        out = [(a, v) for a, p, v in self.rows if p == proxy]
        if not out:
            raise TableError(f"no scores for proxy {proxy!r}")
        return out


@dataclass(frozen=True)
class RankVector:
    """Midranks 1..K aligned with ``arch_ids``; larger rank = better."""

    arch_ids: tuple[str, ...]
    ranks: np.ndarray

    def rank_of(self, arch_id: str) -> float:
        return float(self.ranks[self.arch_ids.index(arch_id)])


def rank_from_scores(scores: Sequence[tuple[str, float]],
                     direction: str = "higher-better") -> RankVector:
    """Assign midranks so the best score gets rank K."""
    if not scores:
        raise UndefinedMetricError("cannot rank an empty score list")
    ids = tuple(a for a, _ in scores)
    vals = np.array([v for _, v in scores], dtype=np.float64)
    if np.isnan(vals).any():
        raise UndefinedMetricError("scores contain NaN")
    if direction == "lower-better":
        vals = -vals
    elif direction != "higher-better":
        raise UndefinedMetricError(f"unknown direction {direction!r}")
    ranks = stats.rankdata(vals, method="average")
    return RankVector(arch_ids=ids, ranks=ranks)


def aggregate_nonlinear(rankings: Sequence[RankVector]) -> RankVector:
    """Combine rankings by summing log-ranks, then re-rank the sums.

    All rankings must cover the same architecture set. With midranks >= 1
    the logarithm is always defined. The output ordering is invariant to
    any strictly increasing transform of a constituent's underlying scores.
    """
    if not rankings:
        raise UndefinedMetricError("need at least one ranking to aggregate")
    base = set(rankings[0].arch_ids)
    for rv in rankings[1:]:
        if set(rv.arch_ids) != base:
            missing = base.symmetric_difference(rv.arch_ids)
            raise UndefinedMetricError(
                f"rankings cover different architectures, e.g. {sorted(missing)[:3]}")
    ids = rankings[0].arch_ids
    total = np.zeros(len(ids))
    for rv in rankings:
        lookup = dict(zip(rv.arch_ids, rv.ranks))
        total += np.log([lookup[a] for a in ids])
    return rank_from_scores(list(zip(ids, total)), direction="higher-better")


def compute_proxy(name: str, canonical: CanonicalGraph, cfg: FimConfig) -> float:
    """Evaluate one native proxy on a canonical graph."""
    if name == "flops":
        return float(count_flops(canonical.graph))
    if name == "aleph":
        return float(trainable_layer_count(canonical.graph))
    if name == "n_params":
        return float(parameter_count(canonical.graph))
    if name in ("vkdnw_single", "vkdnw_entropy"):
        net = build_for_scoring(canonical, cfg)
        breakdown = score_network(canonical, net, cfg)
        return breakdown.vkdnw_single if name == "vkdnw_single" else breakdown.entropy
    raise UndefinedMetricError(
        f"unknown proxy {name!r}; native proxies: {', '.join(PROXY_NAMES)}")
