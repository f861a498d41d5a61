"""Rank-quality metrics for accuracy proxies.

All three metrics compare a proxy-assigned rank vector (larger = better)
against ground-truth accuracies in percent. Kendall's tau-b and Spearman's
rho treat every pair of networks alike; nDCG concentrates on whether the
top of the ranking contains the genuinely best networks, which is what an
architecture search actually consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError

# 2**1023 overflows float64; percent accuracies are nowhere near, but the
# gain transform is exponential so the guard is explicit.
MAX_GAIN_ACCURACY = 1023.0


@dataclass(frozen=True)
class EvalPair:
    """Accuracies (percent) and proxy ranks for the same K networks."""

    accuracies: np.ndarray
    ranks: np.ndarray

    def __post_init__(self):
        acc = np.asarray(self.accuracies, dtype=np.float64)
        rk = np.asarray(self.ranks, dtype=np.float64)
        if acc.ndim != 1 or rk.ndim != 1 or acc.shape != rk.shape:
            raise UndefinedMetricError(
                f"accuracies {acc.shape} and ranks {rk.shape} must be equal-length vectors")
        if acc.size < 2:
            raise UndefinedMetricError("need at least 2 networks")
        if not (np.isfinite(acc).all() and np.isfinite(rk).all()):
            raise UndefinedMetricError("non-finite entries in evaluation pair")
        object.__setattr__(self, "accuracies", acc)
        object.__setattr__(self, "ranks", rk)


def kendall_tau_b(pair: EvalPair) -> float:
    """Tie-corrected Kendall correlation.

    tau_b = (n_c - n_d) / sqrt((n_c + n_d + t_acc) (n_c + n_d + t_rank))
    where t_acc / t_rank count pairs tied only in that vector. Undefined
    when either vector is constant.
    """
    if _constant(pair.accuracies) or _constant(pair.ranks):
        raise UndefinedMetricError("tau-b undefined: a vector is all ties")
    tau = stats.kendalltau(pair.accuracies, pair.ranks, variant="b").statistic
    if not np.isfinite(tau):
        raise UndefinedMetricError("tau-b undefined for this input")
    return float(tau)


def spearman_rho(pair: EvalPair) -> float:
    """Pearson correlation of midrank-transformed vectors."""
    if _constant(pair.accuracies) or _constant(pair.ranks):
        raise UndefinedMetricError("rho undefined: zero variance after ranking")
    rho = stats.spearmanr(pair.accuracies, pair.ranks).statistic
    if not np.isfinite(rho):
        raise UndefinedMetricError("rho undefined for this input")
    return float(rho)


def _constant(v: np.ndarray) -> bool:
    return bool(np.all(v == v[0]))


def gain(acc: np.ndarray) -> np.ndarray:
    return np.exp2(acc) - 1.0


def _check_gains(acc: np.ndarray) -> None:
    bad = np.nonzero(acc >= MAX_GAIN_ACCURACY)[0]
    if bad.size:
        raise UndefinedMetricError(
            f"accuracy {acc[bad[0]]} at position {bad[0]} is >= {MAX_GAIN_ACCURACY}; "
            "the exponential gain would overflow")


def ndcg(pair: EvalPair, p: int, tie_seed: int = 0) -> float:
    """Normalized discounted cumulative gain over the top-P ranked networks.

    Networks are visited in decreasing rank order, rank ties broken by a
    uniform random permutation drawn from ``tie_seed``. Position j
    contributes (2**acc - 1) / log2(1 + j); the normalizer is the ideal
    gain with networks sorted by accuracy, for which ties are immaterial.
    P larger than K is clamped to K.
    """
    if p < 1:
        raise UndefinedMetricError(f"P must be positive, got {p}")
    acc = pair.accuracies
    k = acc.size
    p = min(p, k)
    _check_gains(acc)
    g = gain(acc)
    ideal = np.sort(g)[::-1]
    z = float((ideal[:p] / np.log2(2.0 + np.arange(p))).sum())
    if z <= 0.0:
        raise UndefinedMetricError("ideal gain is zero; all accuracies are 0")
    rng = np.random.default_rng(tie_seed)
    shuffle = rng.permutation(k)
    # lexsort: primary key last. Within equal ranks the random key decides,
    # which realizes a uniform random order inside each tie group.
    order = np.lexsort((shuffle, -pair.ranks))
    dcg = float((g[order[:p]] / np.log2(2.0 + np.arange(p))).sum())
    return dcg / z


def ndcg_mean(pair: EvalPair, p: int, tie_seeds: list[int]) -> float:
    """Average nDCG over several tie-break seeds (reported style)."""
    if not tie_seeds:
        raise UndefinedMetricError("need at least one tie seed")
    return float(np.mean([ndcg(pair, p, s) for s in tie_seeds]))


def permutation_pvalue(pair: EvalPair, p: int, n_samples: int = 1000,
                       seed: int = 0) -> float:
    """Fraction of uniformly random rankings whose nDCG meets the observed one.

    A large value means the ranking is not distinguishable from noise for
    the purpose of picking top networks.
    """
    observed = ndcg(pair, p, tie_seed=seed)
    rng = np.random.default_rng(seed)
    k = pair.accuracies.size
    hits = 0
    for _ in range(n_samples):
        random_ranks = rng.permutation(k) + 1.0
        random_pair = EvalPair(pair.accuracies, random_ranks)
        if ndcg(random_pair, p, tie_seed=int(rng.integers(2 ** 32))) >= observed:
            hits += 1
    return (hits + 1) / (n_samples + 1)
