"""Constraint-respecting evolutionary search over a cell space.

The loop keeps a population of mutually distinct architectures (distinct
canonical hashes), mutates a uniformly chosen member each iteration, and
admits the child only when it satisfies the FLOPs budget and is not a
duplicate; when the population overflows its cap the worst member by
objective is evicted (canonical hash breaks score ties, so eviction is
deterministic). The run is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SearchError
from .fim import FimConfig
from .graphs import count_flops, trainable_layer_count
from .ranking import ScoreTable, compute_proxy
from .space import (ArchEncoding, CanonicalGraph, SpaceSpec, canonicalize,
                    decode, format_encoding, mutate, random_encoding)

_SEED_ATTEMPT_FACTOR = 200


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of one evolutionary run.

    The reference configuration from the large-scale experiments is 100,000
    iterations with a population cap of 1,024 under a ~450M FLOPs budget;
    desk-scale runs shrink all three.
    """

    iterations: int = 100_000
    population_cap: int = 1_024
    flops_budget: int = 450_000_000
    objective: str = "vkdnw_single"
    seed: int = 0
    fim: FimConfig = field(default_factory=FimConfig)
    external_scores: ScoreTable | None = None


@dataclass(frozen=True)
class Candidate:
    encoding: ArchEncoding
    canonical: CanonicalGraph
    score: float
    flops: int
    aleph: int

    @property
    def arch_id(self) -> str:
        return format_encoding(self.encoding)


@dataclass(frozen=True)
class SearchResult:
    population: tuple[Candidate, ...]   # sorted best-first
    trace: np.ndarray                   # best score after each iteration
    evaluations: int                    # number of objective evaluations

    @property
    def best(self) -> Candidate:
        return self.population[0]


def _objective_fn(cfg: SearchConfig) -> Callable[[ArchEncoding, CanonicalGraph], float]:
    name = cfg.objective
    if name.startswith("external:"):
        proxy = name.split(":", 1)[1]
        if cfg.external_scores is None:
            raise SearchError("external objective requires a score table")
        lookup = {a: v for a, p, v in cfg.external_scores.rows if p == proxy}
        if not lookup:
            raise SearchError(f"score table has no rows for proxy {proxy!r}")

        def external(enc: ArchEncoding, canonical: CanonicalGraph) -> float:
            arch_id = format_encoding(enc)
            if arch_id not in lookup:
                raise SearchError(f"no external score for {arch_id}")
            return lookup[arch_id]

        return external

    def native(enc: ArchEncoding, canonical: CanonicalGraph) -> float:
        return compute_proxy(name, canonical, cfg.fim)

    return native


def evolve(space: SpaceSpec, cfg: SearchConfig) -> SearchResult:
    """Run the search; deterministic given ``cfg.seed``."""
    if cfg.population_cap < 1:
        raise SearchError("population_cap must be at least 1")
    objective = _objective_fn(cfg)
    rng = np.random.default_rng(cfg.seed)
    population: dict[str, Candidate] = {}
    evaluations = 0

    def admit(enc: ArchEncoding) -> Candidate | None:
        nonlocal evaluations
        canonical = canonicalize(decode(enc))
        if canonical.canonical_hash in population:
            return None
        flops = count_flops(canonical.graph)
        if flops > cfg.flops_budget:
            return None
        score = objective(enc, canonical)
        evaluations += 1
        cand = Candidate(encoding=enc, canonical=canonical, score=score,
                         flops=flops, aleph=trainable_layer_count(canonical.graph))
        population[canonical.canonical_hash] = cand
        return cand

    max_attempts = _SEED_ATTEMPT_FACTOR * cfg.population_cap
    attempts = 0
    while len(population) < cfg.population_cap and attempts < max_attempts:
        admit(random_encoding(space, rng))
        attempts += 1
    if not population:
        raise SearchError(
            f"no architecture satisfying the {cfg.flops_budget} FLOPs budget "
            f"found in {max_attempts} seeding attempts")

    def worst_key(item: tuple[str, Candidate]):
        h, cand = item
        return (cand.score, h)

    trace = np.empty(cfg.iterations)
    best = max(population.values(), key=lambda c: (c.score, c.canonical.canonical_hash))
    members = list(population.keys())
    for it in range(cfg.iterations):
        parent_hash = members[int(rng.integers(len(members)))]
        parent = population[parent_hash]
        child_enc = mutate(parent.encoding, int(rng.integers(2 ** 63)))
        child = admit(child_enc)
        if child is not None:
            if (child.score, child.canonical.canonical_hash) > (
                    best.score, best.canonical.canonical_hash):
                best = child
            if len(population) > cfg.population_cap:
                evict_hash, _ = min(population.items(), key=worst_key)
                del population[evict_hash]
            members = list(population.keys())
        trace[it] = best.score
    ordered = sorted(population.values(),
                     key=lambda c: (-c.score, c.canonical.canonical_hash))
    return SearchResult(population=tuple(ordered), trace=trace,
                        evaluations=evaluations)
