"""End-to-end acceptance criteria.

Each test prints one status line (visible with ``pytest -s`` or in the
captured output of a failing run) and asserts the criterion at its stated
tolerance. The two long statistical experiments are marked ``slow`` but run
in the default suite.
"""

import numpy as np
import pytest
from concurrent.futures import ProcessPoolExecutor
from scipy import stats as sps

import fimnas as fn
from fimnas import statlab

from conftest import finite_difference_jacobian
from test_metrics import brute_force_ndcg, brute_force_spearman, brute_force_tau_b


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def test_01_ndcg_toy_example():
    acc = np.arange(100.0, 0.0, -10.0)
    damaged = fn.EvalPair(accuracies=acc,
                          ranks=np.array([8.0, 7, 10, 9, 6, 5, 4, 3, 2, 1]))
    perfect = fn.EvalPair(accuracies=acc,
                          ranks=np.array([10.0, 9, 8, 7, 6, 1, 2, 3, 4, 5]))
    nd_damaged = fn.ndcg(damaged, 5)
    nd_perfect = fn.ndcg(perfect, 5)
    report(1, abs(nd_damaged - 0.5) <= 1e-3 and nd_perfect == 1.0,
           f"damaged_top nDCG_5={nd_damaged:.6f} (target 0.5 +/- 1e-3), "
           f"perfect_top nDCG_5={nd_perfect} (target exactly 1.0)")


def test_02_space_enumeration_and_dedup():
    spec = fn.get_space("nb201toy")
    total = 0
    hashes = set()
    for enc in fn.enumerate_space(spec):
        total += 1
        hashes.add(fn.canonicalize(fn.decode(enc)).canonical_hash)
    detail = f"encodings={total} (target 15625), canonical classes={len(hashes)} (target 9445)"
    if len(hashes) != 9445:
        detail += " -- DIVERGENCE from the published unique count; escalate"
    report(2, total == 15625 and len(hashes) == 9445, detail)


def test_03_covariance_factorization_residual():
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_checked = 0
    for i in range(10_000):
        if i % 100 == 99:
            c = int(rng.integers(257, 513))
        elif i % 10 == 9:
            c = int(rng.integers(65, 257))
        else:
            c = int(rng.integers(2, 65))
        kind = i % 4
        if kind == 0:
            p = rng.dirichlet(np.ones(c))
        elif kind == 1:
            logits = rng.standard_normal(c) * 40.0
            p = np.exp(logits - logits.max())
            p /= p.sum()
        elif kind == 2:
            # near one-hot with tails down to 1e-300
            p = np.full(c, 1e-300)
            p[int(rng.integers(c))] = 1.0 - (c - 1) * 1e-300
        else:
            p = rng.dirichlet(np.full(c, 0.05))
        m = fn.multinomial_cov_factor(p)
        cov = np.diag(p) - np.outer(p, p)
        worst = max(worst, float(np.abs(m.T @ m - cov).max()))
        n_checked += 1
    report(3, worst <= 1e-12,
           f"{n_checked} simplex vectors, C in [2,512], max residual {worst:.2e} "
           "(target <= 1e-12)")


def test_04_spectrum_gram_free_vs_dense():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 10))
        c = int(rng.integers(2, 8))
        pp = int(rng.integers(2, 65))
        factors = rng.standard_normal((n, c, pp)) * 10.0 ** rng.integers(-3, 3)
        spec = fn.fim_spectrum(factors)
        dense = np.maximum(np.linalg.eigvalsh(fn.assemble_fim(factors))[::-1], 0.0)
        scale = max(dense.max(), 1e-30)
        worst = max(worst, float(np.abs(spec.eigenvalues - dense).max() / scale))
    report(4, worst <= 1e-8,
           f"100 instances p' <= 64, max relative deviation {worst:.2e} (target <= 1e-8)")


def test_05_jacobian_exactness():
    rng = np.random.default_rng(555)
    worst = 0.0
    spec = fn.get_space("nb201toy")
    for _ in range(100):
        ops = tuple(int(o) for o in rng.integers(0, spec.n_ops, size=spec.n_edges))
        can = fn.canonicalize(fn.decode(fn.ArchEncoding(ops=ops)))
        net = fn.build_network(can.graph, fn.InitConfig(), int(rng.integers(2 ** 32)))
        batch = fn.random_input_batch(can.graph.input_shape, 3, int(rng.integers(2 ** 32)))
        sel = fn.select_params(net, fn.SamplingPolicy())
        jac = fn.logit_jacobian(net, batch, sel)
        fd = finite_difference_jacobian(net, batch, sel, step=1e-4)
        scale = max(np.abs(jac).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - jac).max() / scale))
    report(5, worst <= 1e-5,
           f"100 random networks, max relative FD deviation {worst:.2e} (target <= 1e-5)")


def test_06_entropy_properties():
    rng = np.random.default_rng(606)
    ok = True
    notes = []
    # range on random spectra
    for _ in range(500):
        pp = int(rng.integers(2, 65))
        eig = np.sort(np.abs(rng.standard_normal(pp)) ** 3)[::-1]
        h = fn.vkdnw_entropy(fn.FimSpectrum(eigenvalues=eig, n_samples=1, p_prime=pp))
        ok &= 0.0 <= h <= 1.0
    notes.append("range [0,1] on 500 spectra")
    # exact scale invariance: lossless power-of-two scalings bitwise, general
    # scalings to fp roundoff
    for _ in range(200):
        pp = int(rng.integers(2, 65))
        eig = np.sort(rng.uniform(0, 1, pp))[::-1]
        spec0 = fn.FimSpectrum(eigenvalues=eig, n_samples=1, p_prime=pp)
        h0 = fn.vkdnw_entropy(spec0)
        exp = int(rng.integers(-30, 31))
        h2 = fn.vkdnw_entropy(fn.FimSpectrum(eig * 2.0 ** exp, 1, pp))
        ok &= h0 == h2
        c = float(rng.uniform(0.1, 10.0))
        hc = fn.vkdnw_entropy(fn.FimSpectrum(eig * c, 1, pp))
        ok &= abs(hc - h0) <= 1e-12
    notes.append("scale invariance (bitwise for 2^k, <=1e-12 general)")
    # flat spectrum scores exactly 1
    flat = fn.vkdnw_entropy(fn.FimSpectrum(np.full(32, 0.37), 1, 32))
    ok &= abs(flat - 1.0) <= 1e-12
    notes.append(f"equal deciles -> {flat}")
    # grouping property over 1000 random graph pairs drawn from a scored pool
    cfg = fn.FimConfig(seed=13)
    pool = []
    seen = set()
    while len(pool) < 120:
        ops = tuple(int(o) for o in rng.integers(0, 5, size=6))
        if ops in seen:
            continue
        seen.add(ops)
        can = fn.canonicalize(fn.decode(fn.ArchEncoding(ops=ops)))
        net = fn.build_for_scoring(can, cfg)
        bd = fn.score_network(can, net, cfg)
        pool.append(bd)
    violations = 0
    for _ in range(1000):
        a, b = rng.choice(len(pool), 2, replace=False)
        f1, f2 = pool[a], pool[b]
        if f1.aleph < f2.aleph and not f1.vkdnw_single <= f2.vkdnw_single:
            violations += 1
        if f1.aleph < f2.aleph and (f1.entropy < 1 or f2.entropy > 0):
            if not f1.vkdnw_single < f2.vkdnw_single:
                violations += 1
    notes.append(f"grouping violations {violations}/1000 pairs")
    ok &= violations == 0
    report(6, ok, "; ".join(notes))


def test_07_metric_oracles():
    rng = np.random.default_rng(707)
    worst_tau = worst_rho = worst_ndcg = 0.0
    n = 0
    while n < 1000:
        k = int(rng.integers(3, 40))
        acc = rng.uniform(0, 100, k)
        ranks = rng.uniform(0, 100, k)
        if rng.random() < 0.5:  # inject ties
            acc = np.round(acc / 25) * 25
            ranks = np.round(ranks / 25) * 25
        if np.all(acc == acc[0]) or np.all(ranks == ranks[0]):
            continue
        pair = fn.EvalPair(accuracies=acc, ranks=ranks)
        worst_tau = max(worst_tau, abs(fn.kendall_tau_b(pair)
                                       - brute_force_tau_b(acc, ranks)))
        worst_rho = max(worst_rho, abs(fn.spearman_rho(pair)
                                       - brute_force_spearman(acc, ranks)))
        p = int(rng.integers(1, k + 1))
        seed = int(rng.integers(2 ** 32))
        worst_ndcg = max(worst_ndcg, abs(fn.ndcg(pair, p, tie_seed=seed)
                                         - brute_force_ndcg(acc, ranks, p, seed)))
        n += 1
    ok = max(worst_tau, worst_rho, worst_ndcg) <= 1e-12
    report(7, ok, f"1000 instances with ties: |dtau|={worst_tau:.1e}, "
                  f"|drho|={worst_rho:.1e}, |dnDCG|={worst_ndcg:.1e} (target <= 1e-12)")


def test_08_monte_carlo_fim():
    spec = statlab.SoftmaxModelSpec(seed=7)
    curve = statlab.mc_fim_convergence(spec, [50_000], seed=7)
    err = curve.rows[0][1]
    # label independence: the Fisher path takes no labels; recomputation in
    # the presence of shuffled label vectors must be bit-identical
    net = spec.build_net()
    sel = spec.full_selection(net)
    batch = statlab.batch_of(spec.make_pool()[:32])
    rng = np.random.default_rng(0)
    labels = rng.integers(0, spec.num_classes, 32)
    f1 = statlab.empirical_fim_dense(net, batch, sel)
    g1 = statlab.label_fim(net, batch, labels, sel)
    f2 = statlab.empirical_fim_dense(net, batch, sel)
    g2 = statlab.label_fim(net, batch, rng.permutation(labels), sel)
    bitwise = f1.tobytes() == f2.tobytes()
    g_moves = not np.array_equal(g1, g2)
    report(8, err <= 0.05 and bitwise and g_moves,
           f"rel Frobenius error at n=50000: {err:.4f} (target <= 0.05); "
           f"Fisher bit-identical under label shuffle: {bitwise}; "
           f"label matrix G changes: {g_moves}")


@pytest.mark.slow
def test_09_cramer_rao():
    cfg = statlab.MleExperimentConfig(model=statlab.SoftmaxModelSpec(seed=7),
                                      n_grid=(500, 2000, 8000),
                                      replications=200, seed=7)
    rep = statlab.cramer_rao_experiment(cfg)
    by_n = {r.n: r for r in rep.rows}
    min_ratio = by_n[2000].ratios.min()
    near = abs(by_n[8000].mean_ratio - 1.0)
    far = abs(by_n[500].mean_ratio - 1.0)
    ok = min_ratio >= 0.8 and near < far
    report(9, ok,
           f"min variance/bound ratio at n=2000 over 200 replications: "
           f"{min_ratio:.3f} (target >= 0.8); |mean ratio - 1|: "
           f"n=8000 {near:.3f} < n=500 {far:.3f}")


def test_10_kl_quadratic():
    worst_rel = 0.0
    worst_ratio = np.inf
    for t in range(20):
        spec = statlab.SoftmaxModelSpec(seed=t, pin_last_row=False)
        net = spec.build_net()
        sel = spec.full_selection(net)
        rng = np.random.default_rng(7000 + t)
        x = rng.standard_normal((16, spec.n_features))
        direction = rng.standard_normal(len(sel.entries))
        delta = statlab.embed_direction(net, sel, direction)
        scales = statlab.default_kl_scales(net, delta)
        rows = statlab.kl_quadratic_check(net, direction, scales,
                                          statlab.batch_of(x), sel)
        worst_rel = max(worst_rel, rows[-1][3])
        # decay measured below the default base where the third-order term
        # dominates; the halving factor converges to 2 from either side, so
        # a 5% margin is applied (see decisions ledger)
        base = scales[-1]
        deep = statlab.kl_quadratic_check(net, direction,
                                          [base / 2, base / 4, base / 8, base / 16],
                                          statlab.batch_of(x), sel)
        rels = [r[3] for r in deep]
        for a, b in zip(rels, rels[1:]):
            worst_ratio = min(worst_ratio, a / b)
    ok = worst_rel <= 0.05 and worst_ratio >= 1.9
    report(10, ok,
           f"20 networks: rel err at default smallest scale {worst_rel:.2e} "
           f"(target <= 0.05); worst halving decay factor {worst_ratio:.3f} "
           "(target >= 2 within 5% margin)")


def test_11_search_determinism_and_optimality():
    spec = fn.get_space("micro3")
    cfg = fn.SearchConfig(iterations=5000, population_cap=16,
                          flops_budget=10 ** 9, objective="flops", seed=31)
    a = fn.evolve(spec, cfg)
    b = fn.evolve(spec, cfg)
    identical = (np.array_equal(a.trace, b.trace)
                 and [c.arch_id for c in a.population] == [c.arch_id for c in b.population])
    best_exhaustive = max(fn.count_flops(fn.canonicalize(fn.decode(e)).graph)
                          for e in fn.enumerate_space(spec))
    report(11, identical and a.best.score == best_exhaustive,
           f"seeded reruns identical: {identical}; best found {a.best.score:.0f} "
           f"== exhaustive optimum {best_exhaustive} within 5000 iterations")


# ---------------------------------------------------------------------------
# criterion 12: indicative training correlation at desk scale


_C, _SHAPE = 10, (3, 8, 8)


def _blob_means():
    rng = np.random.default_rng(42)
    mu = rng.standard_normal((_C,) + _SHAPE)
    inner = mu[:, :, 1:-1, 1:-1]
    inner -= inner.mean(axis=(2, 3), keepdims=True)
    out = np.zeros((_C,) + _SHAPE)
    # zero-mean patterns confined to the interior: pooled linear readouts
    # carry no class signal, so nonlinear paths have to earn the accuracy
    out[:, :, 1:-1, 1:-1] = inner
    return out * 2.5


def _blob_set(n, seed):
    mu = _blob_means()
    r = np.random.default_rng(seed)
    y = r.permutation(np.arange(n) % _C)
    x = mu[y] + 1.2 * r.standard_normal((n,) + _SHAPE)
    return x, y


def _train_and_eval(ops):
    """Train one architecture with a small deterministic lr grid."""
    xtr, ytr = _blob_set(192, 1)
    xte, yte = _blob_set(512, 2)
    can = fn.canonicalize(fn.decode(fn.ArchEncoding(ops=ops)))
    net = fn.build_for_scoring(can, fn.FimConfig(seed=5))
    best = None
    for lr in (0.1, 0.03):
        try:
            trained = fn.train_steps(net, (xtr, ytr), 500, lr)
        except fn.NonFiniteError:
            continue
        loss = fn.cross_entropy(trained, xtr, ytr)
        if best is None or loss < best[0]:
            best = (loss, trained)
    acc = fn.accuracy(best[1], xte, yte) if best else 1.0 / _C
    return acc


@pytest.mark.slow
def test_12_training_correlation_smoke():
    rng = np.random.default_rng(20260811)
    cfg = fn.FimConfig(seed=5)
    archs = []
    seen = set()
    while len(archs) < 48:
        ops = tuple(int(o) for o in rng.integers(0, 5, size=6))
        if ops in seen:
            continue
        seen.add(ops)
        archs.append(ops)
    scores = []
    for ops in archs:
        can = fn.canonicalize(fn.decode(fn.ArchEncoding(ops=ops)))
        net = fn.build_for_scoring(can, cfg)
        scores.append(fn.score_network(can, net, cfg).vkdnw_single)
    with ProcessPoolExecutor(max_workers=2) as pool:
        accuracies = list(pool.map(_train_and_eval, archs))
    tau = sps.kendalltau(scores, accuracies).statistic
    report(12, tau >= 0.2,
           f"48 architectures trained 500 steps on synthetic blobs: "
           f"Kendall tau(score, accuracy) = {tau:.3f} (target >= 0.2; "
           "indicative, desk-scale substitute for benchmark correlations)")
