"""Network instantiation, forward evaluation, exact Jacobians and training.

Everything runs in float64 numpy. A ``NetworkInstance`` is immutable after
construction: forward passes, Jacobians and gradient computations are pure
functions of (weights, inputs), so instances can be shared freely across
threads.

Derivatives come in two flavours built on the same per-node primitives:

* forward-mode tangent propagation, used to get exact logit derivatives for
  a handful of selected parameters (one pass per parameter);
* reverse-mode cotangent propagation, used by ``train_steps`` to get the
  full cross-entropy gradient in a single backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax

from .errors import NonFiniteError, SelectionError, ShapeError
from .graphs import ComputationGraph, GraphNode, weighted_nodes

_BN_EPS = 1e-5
# Batch norm runs against fixed reference statistics (mean 0, variance 1),
# never batch statistics: outputs stay per-sample and bit-deterministic.
_BN_SCALE = 1.0 / np.sqrt(1.0 + _BN_EPS)


@dataclass(frozen=True)
class InitConfig:
    """Weight initialization: zero-mean Gaussian scaled by fan-in.

    ``std = sqrt(gain / fan_in)`` for conv and linear weights; biases start
    at zero, batch-norm affine at (1, 0).
    """

    scheme: str = "fan_in_gaussian"
    gain: float = 2.0


@dataclass(frozen=True)
class SamplingPolicy:
    """How to pick representative parameters from the trainable layers.

    kind:
      * ``relative_index``: per layer, the weight at relative position
        ``value`` in [0, 1] of its flat segment (0 = first, 1 = last).
      * ``random``: one uniformly random index per layer, from ``seed``.
      * ``k_per_layer``: ``k`` distinct uniform indices per layer.

    Layers are the first ``max_layers`` weighted non-batchnorm nodes in
    topological order.
    """

    kind: str = "relative_index"
    value: float = 0.0
    k: int = 1
    seed: int = 0
    max_layers: int = 128


@dataclass(frozen=True)
class ParamSelection:
    entries: tuple[tuple[int, int], ...]  # (node_id, flat index within segment)
    policy: str = ""

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class InputBatch:
    """A batch of network inputs, (N, channels, height, width) float64."""

    data: np.ndarray
    source: str = "random-gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ShapeError(f"input batch must be (N, c, h, w), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("input batch contains non-finite entries")


def random_input_batch(input_shape: tuple[int, int, int], n: int, seed: int) -> InputBatch:
    """White-noise inputs: i.i.d. standard normal pixels."""
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n,) + tuple(input_shape))
    return InputBatch(data=data, source="random-gaussian", seed=seed)


@dataclass(frozen=True)
class NetworkInstance:
    """An instantiated network: graph plus a flat float64 weight vector."""

    graph: ComputationGraph
    weights: np.ndarray
    seed: int
    layer_slices: tuple[tuple[int, slice], ...] = field(default_factory=tuple)

    @property
    def n_params(self) -> int:
        return self.weights.size

    def segment(self, node_id: int) -> np.ndarray:
        for nid, sl in self.layer_slices:
            if nid == node_id:
                return self.weights[sl]
        raise SelectionError(f"node {node_id} owns no weights")

    def replace_weights(self, weights: np.ndarray) -> "NetworkInstance":
        w = np.array(weights, dtype=np.float64)
        w.setflags(write=False)
        return NetworkInstance(self.graph, w, self.seed, self.layer_slices)


def build_network(graph: ComputationGraph, init: InitConfig, seed: int) -> NetworkInstance:
    """Deterministically initialize weights for ``graph``.

    The same (graph, init, seed) always reproduces the weight vector bit for
    bit; layers are drawn in topological order from a single PCG64 stream.
    """
    rng = np.random.default_rng(seed)
    segments: list[np.ndarray] = []
    slices: list[tuple[int, slice]] = []
    offset = 0
    for node_id in weighted_nodes(graph, include_bn=True):
        node = graph.nodes[node_id]
        seg = _init_segment(node, init, rng)
        slices.append((node_id, slice(offset, offset + seg.size)))
        segments.append(seg)
        offset += seg.size
    weights = np.concatenate(segments) if segments else np.zeros(0)
    weights = weights.astype(np.float64)
    weights.setflags(write=False)
    return NetworkInstance(graph=graph, weights=weights, seed=seed,
                           layer_slices=tuple(slices))


def _init_segment(node: GraphNode, init: InitConfig, rng: np.random.Generator) -> np.ndarray:
    if init.scheme != "fan_in_gaussian":
        raise ValueError(f"unknown init scheme {init.scheme!r}")
    if node.kind == "conv":
        fan_in = node.channels_in * node.kernel * node.kernel
        std = np.sqrt(init.gain / fan_in)
        return rng.normal(0.0, std, node.weight_count())
    if node.kind == "linear":
        rows = node.channels_out - 1 if node.pin_last_row else node.channels_out
        std = np.sqrt(init.gain / node.channels_in)
        w = rng.normal(0.0, std, rows * node.channels_in)
        if node.with_bias:
            return np.concatenate([w, np.zeros(rows)])
        return w
    if node.kind == "bn":
        c = node.channels_out
        return np.concatenate([np.ones(c), np.zeros(c)])
    raise SelectionError(f"node kind {node.kind!r} has no weights")


# ---------------------------------------------------------------------------
# per-node primitives


def _conv2d(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Stride-1 cross-correlation; x (N,cin,H,W), w (cout,cin,k,k)."""
    k = w.shape[2]
    if k == 1:
        # 1x1 conv is a channel matmul; skip the windowing machinery.
        return np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # (N,cin,Ho,Wo,k,k)
    return np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)


def _conv2d_grad_w(x: np.ndarray, dy: np.ndarray, kernel: int, padding: int) -> np.ndarray:
    """Gradient of a stride-1 conv w.r.t. its kernel."""
    if kernel == 1:
        return np.einsum("nchw,nohw->oc", x, dy, optimize=True)[:, :, None, None]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return np.einsum("nchwij,nohw->ocij", windows, dy, optimize=True)


def _conv2d_grad_x(dy: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Adjoint of a stride-1 conv w.r.t. its input: full correlation."""
    k = w.shape[2]
    w_hat = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (cin, cout, k, k)
    return _conv2d(dy, np.ascontiguousarray(w_hat), k - 1 - padding)


def _avgpool(x: np.ndarray, kernel: int, padding: int) -> np.ndarray:
    """Mean filter with zero padding; the divisor is always kernel**2."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return windows.mean(axis=(4, 5))


def _linear(x: np.ndarray, seg: np.ndarray, node: GraphNode) -> np.ndarray:
    rows = node.channels_out - 1 if node.pin_last_row else node.channels_out
    w = seg[: rows * node.channels_in].reshape(rows, node.channels_in)
    out = x @ w.T
    if node.with_bias:
        out = out + seg[rows * node.channels_in:]
    if node.pin_last_row:
        out = np.concatenate([out, np.zeros((x.shape[0], 1))], axis=1)
    return out


def _linear_grad(x: np.ndarray, dy: np.ndarray, node: GraphNode) -> tuple[np.ndarray, np.ndarray]:
    """Returns (d_segment, d_x) for the linear node."""
    rows = node.channels_out - 1 if node.pin_last_row else node.channels_out
    if node.pin_last_row:
        dy = dy[:, :rows]
    dw = dy.T @ x
    parts = [dw.ravel()]
    if node.with_bias:
        parts.append(dy.sum(axis=0))
    return np.concatenate(parts), dy


def _bn_apply(x: np.ndarray, seg: np.ndarray) -> np.ndarray:
    c = seg.size // 2
    gamma = seg[:c].reshape(1, c, 1, 1)
    beta = seg[c:].reshape(1, c, 1, 1)
    return gamma * (x * _BN_SCALE) + beta


# ---------------------------------------------------------------------------
# forward / forward-mode / reverse-mode over the whole graph


def _node_weights(net: NetworkInstance) -> dict[int, np.ndarray]:
    return {nid: net.weights[sl] for nid, sl in net.layer_slices}


def forward_values(net: NetworkInstance, x: np.ndarray) -> list[np.ndarray]:
    """Evaluate every node; raises NonFiniteError naming the first bad node."""
    segs = _node_weights(net)
    values: list[np.ndarray] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for node_id, node in enumerate(net.graph.nodes):
            v = _eval_node(net.graph, node, node_id, values, segs, x)
            if not np.isfinite(v).all():
                label = node.tag or node.kind
                raise NonFiniteError(
                    f"non-finite intermediate at node {node_id} ({label})",
                    node_id=node_id)
            values.append(v)
    return values


def _eval_node(graph, node, node_id, values, segs, x) -> np.ndarray:
    if node.kind == "input":
        return x
    ins = [values[i] for i in node.inputs]
    if node.kind == "conv":
        w = segs[node_id].reshape(node.channels_out, node.channels_in, node.kernel, node.kernel)
        return _conv2d(ins[0], w, node.padding)
    if node.kind == "bn":
        return _bn_apply(ins[0], segs[node_id])
    if node.kind == "relu":
        return np.maximum(ins[0], 0.0)
    if node.kind == "avgpool":
        return _avgpool(ins[0], node.kernel, node.padding)
    if node.kind == "add":
        if not ins:
            return np.zeros((x.shape[0], node.channels_out,
                             graph.input_shape[1], graph.input_shape[2]))
        out = ins[0]
        for other in ins[1:]:
            out = out + other
        return out
    if node.kind == "gap":
        return ins[0].mean(axis=(2, 3))
    if node.kind == "linear":
        return _linear(ins[0], segs[node_id], node)
    raise ShapeError(f"unknown node kind {node.kind!r}")


def forward(net: NetworkInstance, batch: InputBatch) -> np.ndarray:
    """Logits (N, C) for a batch; deterministic for fixed weights/inputs."""
    expected = tuple(net.graph.input_shape)
    if tuple(batch.data.shape[1:]) != expected:
        raise ShapeError(
            f"batch shape {batch.data.shape[1:]} does not match graph input {expected}")
    return forward_values(net, batch.data)[-1]


def _jvp(net: NetworkInstance, values: list[np.ndarray],
         tangent_node: int, tangent_seg: np.ndarray) -> np.ndarray:
    """Propagate a single-layer weight tangent to the logits."""
    segs = _node_weights(net)
    dvals: list[np.ndarray | None] = []
    for node_id, node in enumerate(net.graph.nodes):
        if node.kind == "input":
            dvals.append(None)
            continue
        din = [dvals[i] for i in node.inputs]
        has_din = any(d is not None for d in din)
        own = node_id == tangent_node
        if not has_din and not own:
            dvals.append(None)
            continue
        dvals.append(_jvp_node(net.graph, node, node_id, values, segs, din,
                               tangent_seg if own else None))
    d_logits = dvals[-1]
    n, c = values[-1].shape
    return np.zeros((n, c)) if d_logits is None else d_logits


def _jvp_node(graph, node, node_id, values, segs, din, dseg) -> np.ndarray:
    x_in = values[node.inputs[0]] if node.inputs else None
    dx = din[0] if din else None
    if node.kind == "conv":
        out = None
        if dx is not None:
            w = segs[node_id].reshape(node.channels_out, node.channels_in,
                                      node.kernel, node.kernel)
            out = _conv2d(dx, w, node.padding)
        if dseg is not None:
            dw = dseg.reshape(node.channels_out, node.channels_in, node.kernel, node.kernel)
            term = _conv2d(x_in, dw, node.padding)
            out = term if out is None else out + term
        return out
    if node.kind == "bn":
        seg = segs[node_id]
        c = seg.size // 2
        gamma = seg[:c].reshape(1, c, 1, 1)
        out = None
        if dx is not None:
            out = gamma * (dx * _BN_SCALE)
        if dseg is not None:
            dgamma = dseg[:c].reshape(1, c, 1, 1)
            dbeta = dseg[c:].reshape(1, c, 1, 1)
            term = dgamma * (x_in * _BN_SCALE) + dbeta
            out = term if out is None else out + term
        return out
    if node.kind == "relu":
        return np.where(x_in > 0.0, dx, 0.0)
    if node.kind == "avgpool":
        return _avgpool(dx, node.kernel, node.padding)
    if node.kind == "add":
        present = [d for d in din if d is not None]
        out = present[0]
        for other in present[1:]:
            out = out + other
        return out
    if node.kind == "gap":
        return dx.mean(axis=(2, 3))
    if node.kind == "linear":
        rows = node.channels_out - 1 if node.pin_last_row else node.channels_out
        seg = segs[node_id]
        out = None
        if dx is not None:
            w = seg[: rows * node.channels_in].reshape(rows, node.channels_in)
            out = dx @ w.T
        if dseg is not None:
            dw = dseg[: rows * node.channels_in].reshape(rows, node.channels_in)
            term = x_in @ dw.T
            if node.with_bias:
                term = term + dseg[rows * node.channels_in:]
            out = term if out is None else out + term
        if node.pin_last_row:
            out = np.concatenate([out, np.zeros((out.shape[0], 1))], axis=1)
        return out
    raise ShapeError(f"unknown node kind {node.kind!r}")


def logit_gradient(net: NetworkInstance, values: list[np.ndarray],
                   d_logits: np.ndarray) -> np.ndarray:
    """Reverse-mode: full weight gradient of ``sum(logits * d_logits)``."""
    graph = net.graph
    segs = _node_weights(net)
    cotan: list[np.ndarray | None] = [None] * len(graph.nodes)
    cotan[-1] = d_logits
    grad = np.zeros_like(net.weights)
    grad_slices = dict(net.layer_slices)
    for node_id in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[node_id]
        dy = cotan[node_id]
        if dy is None or node.kind == "input":
            continue
        dins, dseg = _vjp_node(graph, node, node_id, values, segs, dy)
        if dseg is not None:
            grad[grad_slices[node_id]] += dseg
        for i, d in zip(node.inputs, dins):
            if d is None:
                continue
            cotan[i] = d if cotan[i] is None else cotan[i] + d
    return grad


def _vjp_node(graph, node, node_id, values, segs, dy):
    """Returns (list of input cotangents, weight-segment cotangent or None)."""
    x_in = values[node.inputs[0]] if node.inputs else None
    if node.kind == "conv":
        w = segs[node_id].reshape(node.channels_out, node.channels_in,
                                  node.kernel, node.kernel)
        dx = _conv2d_grad_x(dy, w, node.padding)
        dw = _conv2d_grad_w(x_in, dy, node.kernel, node.padding)
        return [dx], dw.ravel()
    if node.kind == "bn":
        seg = segs[node_id]
        c = seg.size // 2
        gamma = seg[:c].reshape(1, c, 1, 1)
        dx = dy * gamma * _BN_SCALE
        dgamma = (dy * (x_in * _BN_SCALE)).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        return [dx], np.concatenate([dgamma, dbeta])
    if node.kind == "relu":
        return [np.where(x_in > 0.0, dy, 0.0)], None
    if node.kind == "avgpool":
        # Uniform kernel with zero padding is self-adjoint.
        return [_avgpool(dy, node.kernel, node.padding)], None
    if node.kind == "add":
        return [dy for _ in node.inputs], None
    if node.kind == "gap":
        n, c = dy.shape
        _, _, h, w = values[node.inputs[0]].shape
        dx = np.broadcast_to(dy.reshape(n, c, 1, 1) / (h * w), (n, c, h, w))
        return [dx], None
    if node.kind == "linear":
        rows = node.channels_out - 1 if node.pin_last_row else node.channels_out
        seg = segs[node_id]
        dseg, dy_used = _linear_grad(x_in, dy, node)
        w = seg[: rows * node.channels_in].reshape(rows, node.channels_in)
        dx = dy_used @ w
        return [dx], dseg
    raise ShapeError(f"unknown node kind {node.kind!r}")


# ---------------------------------------------------------------------------
# parameter selection and Jacobians


def select_params(net: NetworkInstance, policy: SamplingPolicy) -> ParamSelection:
    """Pick representative weights from the first eligible layers.

    Eligible layers are weighted non-batchnorm nodes in topological order,
    truncated at ``policy.max_layers``. Deterministic: the random policies
    derive their draws from ``policy.seed`` alone.
    """
    eligible = weighted_nodes(net.graph, include_bn=False)[: policy.max_layers]
    if not eligible:
        raise SelectionError("network has no eligible (weighted, non-bn) layers")
    sizes = {nid: net.graph.nodes[nid].weight_count() for nid in eligible}
    entries: list[tuple[int, int]] = []
    if policy.kind == "relative_index":
        if not 0.0 <= policy.value <= 1.0:
            raise SelectionError(f"relative index {policy.value} outside [0, 1]")
        for nid in eligible:
            entries.append((nid, int(round(policy.value * (sizes[nid] - 1)))))
    elif policy.kind == "random":
        rng = np.random.default_rng(policy.seed)
        for nid in eligible:
            entries.append((nid, int(rng.integers(sizes[nid]))))
    elif policy.kind == "k_per_layer":
        if policy.k < 1:
            raise SelectionError("k must be at least 1")
        rng = np.random.default_rng(policy.seed)
        for nid in eligible:
            k = min(policy.k, sizes[nid])
            idx = rng.choice(sizes[nid], size=k, replace=False)
            entries.extend((nid, int(i)) for i in sorted(idx))
    else:
        raise SelectionError(f"unknown sampling policy {policy.kind!r}")
    label = f"{policy.kind}({policy.value if policy.kind == 'relative_index' else policy.k})"
    return ParamSelection(entries=tuple(entries), policy=label)


def validate_selection(net: NetworkInstance, sel: ParamSelection) -> None:
    slices = dict(net.layer_slices)
    for nid, idx in sel.entries:
        if nid not in slices:
            raise SelectionError(f"selection references node {nid} which owns no weights")
        if net.graph.nodes[nid].kind == "bn":
            raise SelectionError(f"selection may not reference batch-norm node {nid}")
        size = slices[nid].stop - slices[nid].start
        if not 0 <= idx < size:
            raise SelectionError(f"index {idx} out of bounds for node {nid} ({size} weights)")


def logit_jacobian(net: NetworkInstance, batch: InputBatch,
                   sel: ParamSelection) -> np.ndarray:
    """Exact derivatives of every logit w.r.t. each selected parameter.

    Returns (N, C, len(sel)); column order follows ``sel.entries``. One
    forward-mode pass per selected parameter, reusing a single primal pass.
    """
    validate_selection(net, sel)
    expected = tuple(net.graph.input_shape)
    if tuple(batch.data.shape[1:]) != expected:
        raise ShapeError(
            f"batch shape {batch.data.shape[1:]} does not match graph input {expected}")
    values = forward_values(net, batch.data)
    n, c = values[-1].shape
    jac = np.zeros((n, c, len(sel.entries)))
    slices = dict(net.layer_slices)
    for col, (nid, idx) in enumerate(sel.entries):
        seg_size = slices[nid].stop - slices[nid].start
        tangent = np.zeros(seg_size)
        tangent[idx] = 1.0
        jac[:, :, col] = _jvp(net, values, nid, tangent)
    return jac


# ---------------------------------------------------------------------------
# training


def cross_entropy(net: NetworkInstance, x: np.ndarray, labels: np.ndarray) -> float:
    logits = forward_values(net, x)[-1]
    logp = log_softmax(logits, axis=1)
    return float(-logp[np.arange(x.shape[0]), labels].mean())


def accuracy(net: NetworkInstance, x: np.ndarray, labels: np.ndarray) -> float:
    logits = forward_values(net, x)[-1]
    return float((logits.argmax(axis=1) == labels).mean())


def ce_gradient(net: NetworkInstance, x: np.ndarray,
                labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient over the full weight vector."""
    values = forward_values(net, x)
    logits = values[-1]
    n = x.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = float(-logp[np.arange(n), labels].mean())
    d_logits = softmax(logits, axis=1)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    return loss, logit_gradient(net, values, d_logits)


def train_steps(net: NetworkInstance, data, steps: int, lr: float) -> NetworkInstance:
    """Plain full-batch gradient descent on cross-entropy.

    ``data`` is a ``(inputs, labels)`` pair reused every step, or a sequence
    of such pairs cycled by step index. ``steps == 0`` returns ``net``
    unchanged. Divergence (non-finite loss) raises with the step index.
    """
    if steps == 0:
        return net
    batches = [data] if isinstance(data, tuple) else list(data)
    for x, labels in batches:
        if labels.min() < 0 or labels.max() >= net.graph.num_classes:
            raise ShapeError("labels outside [0, num_classes)")
    weights = np.array(net.weights)
    current = net.replace_weights(weights)
    for step in range(steps):
        x, labels = batches[step % len(batches)]
        try:
            loss, grad = ce_gradient(current, x, labels)
        except NonFiniteError as exc:
            raise NonFiniteError(f"training diverged at step {step}: {exc}",
                                 step=step) from exc
        if not np.isfinite(loss):
            raise NonFiniteError(f"training diverged at step {step}: loss={loss}",
                                 step=step)
        weights = weights - lr * grad
        current = current.replace_weights(weights)
    return current
