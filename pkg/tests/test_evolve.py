import numpy as np
import pytest

import fimnas as fn
from fimnas.errors import SearchError
from fimnas.evolve import SearchConfig


def flops_search(iterations, seed=0, budget=10 ** 9, cap=16, space="micro3"):
    cfg = SearchConfig(iterations=iterations, population_cap=cap,
                       flops_budget=budget, objective="flops", seed=seed)
    return fn.evolve(fn.get_space(space), cfg)


class TestEvolve:
    def test_zero_iterations_returns_seed_population(self):
        res = flops_search(0, seed=3)
        assert len(res.population) <= 16
        assert res.trace.size == 0

    def test_deterministic_traces(self):
        a = flops_search(400, seed=9)
        b = flops_search(400, seed=9)
        np.testing.assert_array_equal(a.trace, b.trace)
        assert [c.arch_id for c in a.population] == [c.arch_id for c in b.population]

    def test_different_seeds_differ(self):
        a = flops_search(200, seed=1)
        b = flops_search(200, seed=2)
        assert not np.array_equal(a.trace, b.trace)

    def test_trace_nondecreasing(self):
        res = flops_search(800, seed=5)
        assert np.all(np.diff(res.trace) >= 0)

    def test_budget_respected_at_all_times(self):
        budget = 60_000
        res = flops_search(500, seed=4, budget=budget)
        assert all(c.flops <= budget for c in res.population)

    def test_population_hashes_distinct(self):
        res = flops_search(500, seed=6)
        hashes = [c.canonical.canonical_hash for c in res.population]
        assert len(hashes) == len(set(hashes))

    def test_population_cap_respected(self):
        res = flops_search(500, seed=7, cap=5)
        assert len(res.population) <= 5

    def test_finds_exhaustive_flops_optimum(self):
        spec = fn.get_space("micro3")
        best = max(fn.count_flops(fn.canonicalize(fn.decode(e)).graph)
                   for e in fn.enumerate_space(spec))
        res = flops_search(5000, seed=11)
        assert res.best.score == best

    def test_impossible_budget_errors(self):
        with pytest.raises(SearchError):
            flops_search(10, budget=1)

    def test_reference_configuration_defaults(self):
        # the published search setup: 100k iterations, top-1024 kept,
        # ~450M FLOPs constraint
        cfg = SearchConfig()
        assert cfg.iterations == 100_000
        assert cfg.population_cap == 1_024
        assert cfg.flops_budget == 450_000_000

    def test_external_objective(self):
        spec = fn.get_space("micro3")
        rows = []
        rng = np.random.default_rng(0)
        for enc in fn.enumerate_space(spec):
            rows.append((fn.format_encoding(enc), "zico", float(rng.uniform())))
        table = fn.ScoreTable(rows=tuple(rows), provenance="external-file")
        cfg = SearchConfig(iterations=300, population_cap=8, flops_budget=10 ** 9,
                           objective="external:zico", seed=2, external_scores=table)
        res = fn.evolve(spec, cfg)
        lookup = {a: v for a, p, v in rows}
        assert all(c.score == lookup[c.arch_id] for c in res.population)

    def test_external_objective_requires_table(self):
        cfg = SearchConfig(objective="external:zico", iterations=1)
        with pytest.raises(SearchError):
            fn.evolve(fn.get_space("micro3"), cfg)
