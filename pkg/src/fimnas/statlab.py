"""Executable checks of the statistical theory behind the score.

Four experiment families, all on softmax-regression toy models where exact
answers exist:

* the closed-form Fisher matrix of a linear softmax model, used as an
  oracle for the factorized production path;
* Monte-Carlo convergence of the empirical Fisher matrix to its population
  value (inputs drawn from a finite pool so the population matrix is exact);
* the label-substituted matrix G, which is a genuinely different object at
  initialization even though it looks superficially like the Fisher matrix;
* a Cramér-Rao experiment: the variance of gradient-descent maximum
  likelihood across replicated datasets against the inverse-Fisher bound;
* the quadratic KL expansion: mean KL divergence under a small weight
  perturbation against one half of the Fisher quadratic form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .errors import SelectionError, ShapeError
from .fim import assemble_fim, sample_factors
from .graphs import linear_softmax_graph
from .netcore import (InitConfig, InputBatch, NetworkInstance, ParamSelection,
                      build_network, ce_gradient, forward, forward_values,
                      logit_jacobian, train_steps)


@dataclass(frozen=True)
class SoftmaxModelSpec:
    """A linear softmax toy model with inputs drawn from a finite pool.

    Using a finite input pool makes the population Fisher matrix an exact
    finite average, so Monte-Carlo error and the Cramér-Rao bound can be
    evaluated against a closed form at any weight vector.
    """

    n_features: int = 4
    num_classes: int = 3
    pool_size: int = 64
    weight_scale: float = 0.8
    pin_last_row: bool = True
    seed: int = 0

    @property
    def free_rows(self) -> int:
        return self.num_classes - 1 if self.pin_last_row else self.num_classes

    @property
    def n_params(self) -> int:
        return self.free_rows * self.n_features

    def make_pool(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0,)))
        return rng.standard_normal((self.pool_size, self.n_features))

    def make_theta(self) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1,)))
        return self.weight_scale * rng.standard_normal(self.n_params)

    def build_net(self, theta: np.ndarray | None = None) -> NetworkInstance:
        graph = linear_softmax_graph(self.n_features, self.num_classes,
                                     pin_last_row=self.pin_last_row)
        net = build_network(graph, InitConfig(), self.seed)
        return net.replace_weights(self.make_theta() if theta is None else theta)

    def full_selection(self, net: NetworkInstance) -> ParamSelection:
        (node_id, sl), = [(nid, sl) for nid, sl in net.layer_slices]
        return ParamSelection(
            entries=tuple((node_id, i) for i in range(sl.stop - sl.start)),
            policy="full")


def _as_rows(inputs) -> np.ndarray:
    """Accept (N, d) arrays or (N, d, 1, 1) input batches."""
    x = inputs.data if isinstance(inputs, InputBatch) else np.asarray(inputs)
    if x.ndim == 4:
        if x.shape[2] != 1 or x.shape[3] != 1:
            raise ShapeError("linear softmax inputs must be (N, d, 1, 1)")
        x = x[:, :, 0, 0]
    if x.ndim != 2:
        raise ShapeError(f"expected (N, d) inputs, got shape {x.shape}")
    return np.asarray(x, dtype=np.float64)


def batch_of(x_rows: np.ndarray) -> InputBatch:
    return InputBatch(data=np.ascontiguousarray(x_rows)[:, :, None, None],
                      source="pool", seed=0)


def softmax_probs(theta: np.ndarray, x: np.ndarray, spec: SoftmaxModelSpec) -> np.ndarray:
    w = theta.reshape(spec.free_rows, spec.n_features)
    logits = x @ w.T
    if spec.pin_last_row:
        logits = np.concatenate([logits, np.zeros((x.shape[0], 1))], axis=1)
    return np.exp(log_softmax(logits, axis=1))


def analytic_fim_softmax(theta: np.ndarray, inputs, spec: SoftmaxModelSpec) -> np.ndarray:
    """Exact empirical Fisher matrix of a linear softmax model.

    For logits W x the matrix is the average over inputs of
    Sigma(s_n) kron x_n x_n^T with Sigma the multinomial covariance of the
    prediction, restricted to the free class rows. Parameter order matches
    the row-major layout of the weight segment, so this is directly
    comparable with the factorized production path.
    """
    x = _as_rows(inputs)
    if x.shape[1] != spec.n_features:
        raise ShapeError(f"inputs have {x.shape[1]} features, model has {spec.n_features}")
    probs = softmax_probs(np.asarray(theta, dtype=np.float64), x, spec)
    sigma = np.einsum("ni,nj->nij", probs, -probs)
    idx = np.arange(spec.num_classes)
    sigma[:, idx, idx] += probs
    r = spec.free_rows
    sigma = sigma[:, :r, :r]
    f = np.einsum("nij,na,nb->iajb", sigma, x, x, optimize=True) / x.shape[0]
    p = r * spec.n_features
    f = f.reshape(p, p)
    return (f + f.T) / 2.0


def empirical_fim_dense(net: NetworkInstance, batch: InputBatch,
                        sel: ParamSelection) -> np.ndarray:
    """Production-path empirical Fisher matrix, assembled densely."""
    jac = logit_jacobian(net, batch, sel)
    logits = forward(net, batch)
    probs = np.exp(log_softmax(logits, axis=1))
    return assemble_fim(sample_factors(jac, probs))


@dataclass(frozen=True)
class ErrorCurve:
    """Relative Frobenius error of the empirical vs population Fisher matrix."""

    rows: tuple[tuple[int, float], ...]

    def errors(self) -> np.ndarray:
        return np.array([e for _, e in self.rows])


def mc_fim_convergence(spec: SoftmaxModelSpec, n_grid: list[int], seed: int) -> ErrorCurve:
    """Empirical-Fisher error against the exact population matrix, per n.

    The population matrix is the exact average over the input pool; each
    grid point draws n inputs i.i.d. from the pool and runs the production
    factorized pipeline on them.
    """
    pool = spec.make_pool()
    theta = spec.make_theta()
    f_pop = analytic_fim_softmax(theta, pool, spec)
    f_pop_norm = np.linalg.norm(f_pop)
    net = spec.build_net(theta)
    sel = spec.full_selection(net)
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_grid:
        idx = rng.integers(spec.pool_size, size=n)
        f_hat = empirical_fim_dense(net, batch_of(pool[idx]), sel)
        err = float(np.linalg.norm(f_hat - f_pop) / f_pop_norm)
        rows.append((int(n), err))
    return ErrorCurve(rows=tuple(rows))


def label_fim(net: NetworkInstance, batch: InputBatch, labels: np.ndarray,
              sel: ParamSelection) -> np.ndarray:
    """The label-substituted matrix G over the selected parameters.

    G averages outer products of per-sample log-likelihood gradients taken
    at the observed labels instead of under the model's own prediction; it
    is positive semidefinite but is not a Monte-Carlo estimate of the
    Fisher matrix, and at initialization it differs from it substantially.
    """
    labels = np.asarray(labels)
    c = net.graph.num_classes
    if labels.min() < 0 or labels.max() >= c:
        raise SelectionError(f"labels outside [0, {c})")
    jac = logit_jacobian(net, batch, sel)
    logits = forward(net, batch)
    probs = np.exp(log_softmax(logits, axis=1))
    residual = -probs
    residual[np.arange(labels.size), labels] += 1.0
    g_vecs = np.einsum("ncp,nc->np", jac, residual)
    g = g_vecs.T @ g_vecs / labels.size
    return (g + g.T) / 2.0


def kl_divergence_mean(net: NetworkInstance, perturbed: NetworkInstance,
                       batch: InputBatch) -> float:
    """Mean over the batch of KL(perturbed prediction || base prediction)."""
    logp_base = log_softmax(forward_values(net, batch.data)[-1], axis=1)
    logp_new = log_softmax(forward_values(perturbed, batch.data)[-1], axis=1)
    kl = (np.exp(logp_new) * (logp_new - logp_base)).sum(axis=1)
    if not np.isfinite(kl).all():
        raise ShapeError("non-finite KL divergence")
    return float(kl.mean())


def embed_direction(net: NetworkInstance, sel: ParamSelection,
                    direction: np.ndarray) -> np.ndarray:
    """Lift a selected-subspace direction into the full weight vector."""
    direction = np.asarray(direction, dtype=np.float64)
    if direction.size != len(sel.entries):
        raise ShapeError(
            f"direction has {direction.size} entries, selection has {len(sel.entries)}")
    slices = dict(net.layer_slices)
    delta = np.zeros_like(net.weights)
    for d, (nid, idx) in zip(direction, sel.entries):
        delta[slices[nid].start + idx] += d
    return delta


def default_kl_scales(net: NetworkInstance, delta: np.ndarray,
                      n_scales: int = 4) -> list[float]:
    """Halving ladder ending at 1e-3 * |theta| / |direction|."""
    base = 1e-3 * np.linalg.norm(net.weights) / np.linalg.norm(delta)
    return [base * 2.0 ** k for k in range(n_scales - 1, -1, -1)]


def kl_quadratic_check(net: NetworkInstance, direction: np.ndarray,
                       scales: list[float], batch: InputBatch,
                       sel: ParamSelection) -> list[tuple[float, float, float, float]]:
    """Rows of (scale, mean KL, Fisher quadratic form, relative error).

    The quadratic form is 0.5 * s^2 * d^T F d with F the empirical Fisher
    matrix over the selection; the KL is evaluated exactly on the perturbed
    network. The relative error decays linearly in the scale because the
    expansion remainder is third order.
    """
    if any(s <= 0 for s in scales) or any(b >= a for a, b in zip(scales, scales[1:])):
        raise ShapeError("scales must be positive and decreasing")
    delta = embed_direction(net, sel, direction)
    f_hat = empirical_fim_dense(net, batch, sel)
    quad_coef = 0.5 * float(np.asarray(direction) @ f_hat @ np.asarray(direction))
    rows = []
    for s in scales:
        perturbed = net.replace_weights(net.weights + s * delta)
        kl = kl_divergence_mean(net, perturbed, batch)
        quad = quad_coef * s * s
        rel = abs(kl - quad) / max(kl, 1e-300)
        rows.append((float(s), kl, quad, rel))
    return rows


# ---------------------------------------------------------------------------
# Cramér-Rao experiment


@dataclass(frozen=True)
class MleExperimentConfig:
    model: SoftmaxModelSpec = field(default_factory=SoftmaxModelSpec)
    n_grid: tuple[int, ...] = (500, 2000, 8000)
    replications: int = 200
    seed: int = 7
    lr: float = 1.2
    max_steps: int = 4000
    grad_tol: float = 1e-9

    def __post_init__(self):
        if any(n <= 0 for n in self.n_grid):
            raise ShapeError("sample sizes must be positive")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ShapeError("n_grid must be increasing")
        if self.replications < 30:
            raise ShapeError("need at least 30 replications")


@dataclass(frozen=True)
class CrRow:
    n: int
    bound_diag: np.ndarray       # diag(F^-1) / n
    empirical_var: np.ndarray    # per-parameter MLE variance across replications
    converged: int

    @property
    def ratios(self) -> np.ndarray:
        return self.empirical_var / self.bound_diag

    @property
    def mean_ratio(self) -> float:
        return float(self.ratios.mean())


@dataclass(frozen=True)
class CrReport:
    rows: tuple[CrRow, ...]
    replications: int


def _fit_mle(net: NetworkInstance, x: np.ndarray, labels: np.ndarray,
             cfg: MleExperimentConfig) -> tuple[np.ndarray, bool]:
    """Gradient-descent maximum likelihood; returns (theta_hat, converged)."""
    data = (np.ascontiguousarray(x)[:, :, None, None], labels)
    current = net
    steps_done = 0
    chunk = 200
    while steps_done < cfg.max_steps:
        step = min(chunk, cfg.max_steps - steps_done)
        current = train_steps(current, data, step, cfg.lr)
        steps_done += step
        _, grad = ce_gradient(current, data[0], labels)
        if np.abs(grad).max() < cfg.grad_tol:
            return np.array(current.weights), True
    return np.array(current.weights), False


def cramer_rao_experiment(cfg: MleExperimentConfig) -> CrReport:
    """Empirical MLE variance against the inverse-Fisher lower bound.

    For each sample size n, ``replications`` independent datasets are drawn
    at the true weights (inputs from the pool, labels from the model),
    fitted by full-batch gradient descent, and the per-parameter variance
    of the estimates is compared with diag(F^-1(theta*)) / n. Replications
    whose gradient never meets the tolerance are flagged and excluded.
    """
    spec = cfg.model
    if not spec.pin_last_row:
        raise ShapeError("the Cramér-Rao experiment needs the identifiable "
                         "(pinned last row) model")
    pool = spec.make_pool()
    theta_star = spec.make_theta()
    f_pop = analytic_fim_softmax(theta_star, pool, spec)
    f_inv_diag = np.diag(np.linalg.inv(f_pop))
    base_net = spec.build_net(theta_star)
    rows = []
    for gi, n in enumerate(cfg.n_grid):
        estimates = []
        converged = 0
        for rep in range(cfg.replications):
            rng = np.random.default_rng(
                np.random.SeedSequence(cfg.seed, spawn_key=(gi, rep)))
            idx = rng.integers(spec.pool_size, size=n)
            x = pool[idx]
            probs = softmax_probs(theta_star, x, spec)
            labels = _draw_labels(probs, rng)
            theta_hat, ok = _fit_mle(base_net, x, labels, cfg)
            if ok:
                estimates.append(theta_hat)
                converged += 1
        est = np.array(estimates)
        var = est.var(axis=0, ddof=1)
        rows.append(CrRow(n=int(n), bound_diag=f_inv_diag / n,
                          empirical_var=var, converged=converged))
    return CrReport(rows=tuple(rows), replications=cfg.replications)


def _draw_labels(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    return (u[:, None] > cum).sum(axis=1)
