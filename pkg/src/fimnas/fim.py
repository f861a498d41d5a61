"""Empirical Fisher information spectrum and the VKDNW entropy score.

The empirical Fisher matrix of a classifier over inputs x_1..x_N is

    F = (1/N) sum_n  J_n^T (diag(s_n) - s_n s_n^T) J_n,

with J_n the logit Jacobian and s_n the softmax output at x_n. Networks at
initialization put most probability mass on a few classes, so the inner
covariance is assembled through its closed-form Cholesky factor rather
than explicitly: with M_n^T M_n = diag(s_n) - s_n s_n^T the per-sample
factor A_n = M_n J_n gives F = (1/N) sum A_n^T A_n exactly, and the
eigenvalues of F are the squared singular values of the stacked factor
matrix, computed without ever forming the Gram matrix.

The VKDNW score is the normalized entropy of the deciles of that spectrum;
``vkdnw_single`` adds the trainable-layer count so that architectures are
grouped by size first and ordered by spectrum entropy within each group.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_softmax

from .errors import ProbabilityError, ShapeError
from .graphs import ComputationGraph, trainable_layer_count
from .netcore import (InitConfig, InputBatch, NetworkInstance, ParamSelection,
                      SamplingPolicy, build_network, forward, logit_jacobian,
                      random_input_batch, select_params)
from .space import CanonicalGraph

_DEGENERATE_FLOOR = 1e-30


@dataclass(frozen=True)
class ProbVector:
    """A predictive distribution with log-probabilities kept alongside."""

    probs: np.ndarray
    log_probs: np.ndarray

    @staticmethod
    def from_logits(logits: np.ndarray) -> "ProbVector":
        logp = log_softmax(np.asarray(logits, dtype=np.float64))
        return ProbVector(probs=np.exp(logp), log_probs=logp)


def _check_simplex(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ProbabilityError(f"probability vector must be 1-d, got shape {p.shape}")
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ProbabilityError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-8:
        raise ProbabilityError(f"probabilities sum to {p.sum():.3e}, not 1")
    return p


def multinomial_cov_factor(p: np.ndarray | ProbVector) -> np.ndarray:
    """Upper-triangular M with M^T M = diag(p) - p p^T, built in closed form.

    Uses the exact Cholesky factors of the multinomial covariance written in
    terms of suffix probability sums, so no covariance matrix is ever formed
    or factorized numerically. Entries as small as 1e-300 are safe: every
    term is a product/ratio of non-negative quantities with no cancellation.
    For strictly positive p the factor has numerical rank C - 1.
    """
    if isinstance(p, ProbVector):
        p = p.probs
    p = _check_simplex(p)
    return _cov_factors(p[None, :])[0].transpose(1, 0)


def _cov_factors(probs: np.ndarray) -> np.ndarray:
    """Batched lower-triangular factors L with L L^T = diag(p) - p p^T.

    probs: (N, C) rows on the simplex. Returns (N, C, C).
    """
    n, c = probs.shape
    # Suffix sums q[j] = p[j+1] + ... + p[C-1]; q_prev[j] = p[j] + q[j].
    # Computed by cumulative summation from the tail so that tiny trailing
    # probabilities never cancel against a prefix near 1.
    rev = probs[:, ::-1]
    q_prev = np.cumsum(rev, axis=1)[:, ::-1]        # q_{j-1} in textbook terms
    q = q_prev - probs                              # q_j
    q = np.maximum(q, 0.0)                          # clip roundoff at the tail
    with np.errstate(divide="ignore", invalid="ignore"):
        diag = np.sqrt(np.where(q_prev > 0.0, probs * q / np.where(q_prev > 0, q_prev, 1.0), 0.0))
        denom = q * q_prev
        col = np.sqrt(np.where(denom > 0.0, probs / np.where(denom > 0, denom, 1.0), 0.0))
    # L[i, j] = -p_i * sqrt(p_j / (q_j q_{j-1})) for i > j, L[j, j] = diag[j].
    l = -probs[:, :, None] * col[:, None, :]
    tri = np.tril(np.ones((c, c)), k=-1)
    l = l * tri[None, :, :]
    idx = np.arange(c)
    l[:, idx, idx] = diag
    return l


@dataclass(frozen=True)
class SampleFactor:
    """Per-sample factor A with A^T A = J^T (diag(p) - p p^T) J."""

    a_n: np.ndarray

    def __post_init__(self):
        if self.a_n.ndim != 2:
            raise ShapeError(f"factor must be a matrix, got shape {self.a_n.shape}")
        if not np.isfinite(self.a_n).all():
            raise ShapeError("factor contains non-finite entries")


def sample_factor(jac: np.ndarray, p: np.ndarray | ProbVector) -> SampleFactor:
    """Factor for one sample: A = M @ jac, jac of shape (C, p')."""
    if isinstance(p, ProbVector):
        p = p.probs
    p = _check_simplex(p)
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2 or jac.shape[0] != p.size:
        raise ShapeError(
            f"jacobian shape {jac.shape} does not match {p.size} classes")
    m = multinomial_cov_factor(p)
    return SampleFactor(a_n=m @ jac)


def sample_factors(jacs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Batched factors: jacs (N, C, p'), probs (N, C) -> (N, C, p')."""
    jacs = np.asarray(jacs, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if jacs.ndim != 3 or probs.ndim != 2 or jacs.shape[:2] != probs.shape:
        raise ShapeError(
            f"jacobian stack {jacs.shape} does not match probabilities {probs.shape}")
    ls = _cov_factors(probs)                       # (N, C, C)
    return np.einsum("ncd,ndp->ncp", ls.transpose(0, 2, 1), jacs)


def _stack(factors) -> np.ndarray:
    if isinstance(factors, np.ndarray):
        if factors.ndim != 3:
            raise ShapeError(f"factor stack must be (N, C, p'), got {factors.shape}")
        if factors.shape[0] == 0:
            raise ShapeError("empty factor list")
        return factors
    mats = [f.a_n if isinstance(f, SampleFactor) else np.asarray(f) for f in factors]
    if not mats:
        raise ShapeError("empty factor list")
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ShapeError(f"inconsistent factor shapes {shape} vs {m.shape}")
    return np.stack(mats)


@dataclass(frozen=True)
class FimSpectrum:
    """Eigenvalues of the empirical Fisher matrix, largest first."""

    eigenvalues: np.ndarray
    n_samples: int
    p_prime: int


def fim_spectrum(factors) -> FimSpectrum:
    """Spectrum of (1/N) sum A_n^T A_n via singular values of the stack.

    The eigenvalues are obtained as squared singular values of the
    (N*C, p') stacked factor matrix scaled by 1/sqrt(N); the Gram matrix is
    never assembled, which keeps tiny eigenvalues accurate despite the
    typically huge condition number.
    """
    stack = _stack(factors)
    n, c, p = stack.shape
    flat = stack.reshape(n * c, p) / np.sqrt(n)
    sv = np.linalg.svd(flat, compute_uv=False)
    eig = np.zeros(p)
    eig[: sv.size] = sv ** 2
    eig = np.sort(eig)[::-1]
    return FimSpectrum(eigenvalues=eig, n_samples=n, p_prime=p)


def assemble_fim(factors) -> np.ndarray:
    """Explicit (p' x p') empirical Fisher matrix; intended as a test path."""
    stack = _stack(factors)
    n, c, p = stack.shape
    flat = stack.reshape(n * c, p)
    f = flat.T @ flat / n
    return (f + f.T) / 2.0


@dataclass(frozen=True)
class DecileVector:
    """Interior deciles of a spectrum and their normalization."""

    deciles: np.ndarray          # 10th..90th percentiles, ascending
    normalized: np.ndarray
    degenerate: bool


def spectrum_deciles(spec: FimSpectrum) -> DecileVector:
    """The nine interior deciles (linear interpolation between ranks).

    The extreme order statistics are excluded on purpose: the smallest
    eigenvalue of an over-parametrized model is usually an uninformative
    zero of high multiplicity. When the deciles carry (numerically) no mass
    the vector is flagged degenerate.
    """
    if spec.p_prime < 2:
        raise ShapeError("need at least 2 eigenvalues to take deciles")
    dec = np.percentile(spec.eigenvalues, np.arange(10, 100, 10), method="linear")
    dec = np.sort(dec)
    top = float(spec.eigenvalues[0])
    total = float(dec.sum())
    if total <= _DEGENERATE_FLOOR * max(top, 1.0) or total <= 0.0:
        return DecileVector(deciles=dec, normalized=np.zeros(9), degenerate=True)
    return DecileVector(deciles=dec, normalized=dec / total, degenerate=False)


def vkdnw_entropy(spec: FimSpectrum, normalize: bool = True) -> float:
    """Entropy of the normalized spectrum deciles.

    With ``normalize`` the value is divided by log 9, mapping it to [0, 1]
    with 1 attained exactly when all deciles are equal. Scale-invariant:
    multiplying every eigenvalue by c > 0 leaves the result unchanged.
    Degenerate (all-zero) spectra score 0 so dead architectures sort last.
    """
    dv = spectrum_deciles(spec)
    if dv.degenerate:
        return 0.0
    lam = dv.normalized
    nz = lam[lam > 0.0]
    h = float(-(nz * np.log(nz)).sum())
    if normalize:
        h /= np.log(9.0)
    return h


@dataclass(frozen=True)
class FimConfig:
    """Everything needed to score an architecture deterministically.

    Defaults: 64 white-noise inputs, first 128 eligible layers, one weight
    per layer at relative index 0, normalized entropy. ``seed`` drives the
    weight and input streams through independent substreams.
    """

    batch_size: int = 64
    input_source: str = "random-gaussian"
    input_path: str | None = None
    max_layers: int = 128
    policy: SamplingPolicy = field(default_factory=SamplingPolicy)
    normalize_entropy: bool = True
    init: InitConfig = field(default_factory=InitConfig)
    seed: int = 0

    def substream(self, key: int) -> int:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(key,))
        return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_batch(cfg: FimConfig, input_shape: tuple[int, int, int]) -> InputBatch:
    if cfg.input_source == "random-gaussian":
        return random_input_batch(input_shape, cfg.batch_size, cfg.substream(1))
    if cfg.input_source == "file":
        if not cfg.input_path:
            raise ShapeError("input_source='file' requires input_path")
        data = np.load(cfg.input_path).astype(np.float64)
        return InputBatch(data=data, source="file", seed=0)
    raise ShapeError(f"unknown input source {cfg.input_source!r}")


def empirical_spectrum(net: NetworkInstance, batch: InputBatch,
                       sel: ParamSelection) -> FimSpectrum:
    """Spectrum of the empirical Fisher matrix over the selected parameters."""
    jac = logit_jacobian(net, batch, sel)
    logits = forward(net, batch)
    probs = np.exp(log_softmax(logits, axis=1))
    factors = sample_factors(jac, probs)
    return fim_spectrum(factors)


@dataclass(frozen=True)
class ScoreBreakdown:
    """The score with its ingredients, for reporting and debugging."""

    vkdnw_single: float
    entropy: float
    aleph: int
    degenerate: bool
    eigenvalues: np.ndarray


def policy_with_limits(cfg: FimConfig) -> SamplingPolicy:
    """The configured sampling policy with the layer cap applied.

    Random policies whose seed is left at 0 draw it from the master seed's
    substream so one config seed pins the whole pipeline.
    """
    policy = replace(cfg.policy, max_layers=cfg.max_layers)
    if policy.kind != "relative_index" and policy.seed == 0:
        policy = replace(policy, seed=cfg.substream(2))
    return policy


def score_network(canonical: CanonicalGraph, net: NetworkInstance,
                  cfg: FimConfig) -> ScoreBreakdown:
    aleph = trainable_layer_count(canonical.graph)
    batch = make_batch(cfg, canonical.graph.input_shape)
    sel = select_params(net, policy_with_limits(cfg))
    spec = empirical_spectrum(net, batch, sel)
    dv = spectrum_deciles(spec)
    entropy = vkdnw_entropy(spec, normalize=cfg.normalize_entropy)
    return ScoreBreakdown(vkdnw_single=aleph + entropy, entropy=entropy,
                          aleph=aleph, degenerate=dv.degenerate,
                          eigenvalues=spec.eigenvalues)


def vkdnw_single(canonical: CanonicalGraph, net: NetworkInstance,
                 cfg: FimConfig) -> float:
    """Trainable-layer count plus spectrum-decile entropy.

    The integer part groups architectures by size; the fractional entropy
    orders them within each group. Deterministic given ``cfg.seed``.
    """
    return score_network(canonical, net, cfg).vkdnw_single


def build_for_scoring(canonical: CanonicalGraph, cfg: FimConfig) -> NetworkInstance:
    return build_network(canonical.graph, cfg.init, cfg.substream(0))
