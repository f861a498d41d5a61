"""Computation graphs for tiny classification networks.

A graph is a topologically ordered tuple of nodes. Node 0 is the input;
the last node is a ``linear`` classifier producing the logits. Feature
nodes carry ``(channels, height, width)`` maps, ``gap`` collapses them to a
vector, and ``linear`` maps the vector to class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import GraphValidationError

# Node kinds that own trainable weights. Batch normalization is trainable
# but deliberately kept out of WEIGHTED_NON_BN: it never contributes to the
# trainable-layer count nor to parameter sampling.
WEIGHTED_KINDS = ("conv", "linear", "bn")
WEIGHTED_NON_BN = ("conv", "linear")

_KINDS = ("input", "conv", "bn", "relu", "avgpool", "add", "gap", "linear")


@dataclass(frozen=True)
class GraphNode:
    """One operation in a computation graph.

    ``inputs`` are indices of earlier nodes. Attribute fields are only
    meaningful for the kinds that use them (``kernel`` for conv/avgpool,
    ``pin_last_row`` for linear, ...).
    """

    kind: str
    inputs: tuple[int, ...] = ()
    channels_in: int = 0
    channels_out: int = 0
    kernel: int = 0
    padding: int = 0
    with_bias: bool = False
    pin_last_row: bool = False
    tag: str = ""

    def weight_count(self) -> int:
        """Number of trainable parameters owned by this node."""
        if self.kind == "conv":
            return self.channels_out * self.channels_in * self.kernel * self.kernel
        if self.kind == "linear":
            rows = self.channels_out - 1 if self.pin_last_row else self.channels_out
            return rows * self.channels_in + (rows if self.with_bias else 0)
        if self.kind == "bn":
            return 2 * self.channels_out
        return 0


@dataclass(frozen=True)
class ComputationGraph:
    """A validated DAG of operations ending in a classifier.

    ``cell_nodes`` marks the node indices that belong to the searchable cell
    and are therefore eligible for pruning during canonicalization; scaffold
    nodes (stem, cell output join, pooling, classifier) are never pruned.
    """

    nodes: tuple[GraphNode, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    cell_nodes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        validate_graph(self)


def _shape_of(graph: ComputationGraph, shapes: list[tuple], node_id: int, node: GraphNode) -> tuple:
    """Infer the output shape of one node; raises on inconsistency."""
    ins = [shapes[i] for i in node.inputs]
    if node.kind == "input":
        if node.inputs:
            raise GraphValidationError("input node cannot have inputs", node_id)
        return ("map",) + graph.input_shape
    if node.kind == "conv":
        (tag, c, h, w) = _expect_map(ins, node_id, arity=1)
        if c != node.channels_in:
            raise GraphValidationError(
                f"conv expects {node.channels_in} input channels, got {c}", node_id)
        if node.kernel < 1 or node.channels_out < 1:
            raise GraphValidationError("conv kernel and channels_out must be positive", node_id)
        ho = h + 2 * node.padding - node.kernel + 1
        wo = w + 2 * node.padding - node.kernel + 1
        if ho < 1 or wo < 1:
            raise GraphValidationError("conv output has non-positive spatial size", node_id)
        return ("map", node.channels_out, ho, wo)
    if node.kind in ("bn", "relu"):
        (tag, c, h, w) = _expect_map(ins, node_id, arity=1)
        if node.kind == "bn" and node.channels_out != c:
            raise GraphValidationError(
                f"bn declared for {node.channels_out} channels, input has {c}", node_id)
        return ("map", c, h, w)
    if node.kind == "avgpool":
        (tag, c, h, w) = _expect_map(ins, node_id, arity=1)
        ho = h + 2 * node.padding - node.kernel + 1
        wo = w + 2 * node.padding - node.kernel + 1
        if ho < 1 or wo < 1:
            raise GraphValidationError("avgpool output has non-positive spatial size", node_id)
        return ("map", c, ho, wo)
    if node.kind == "add":
        if not ins:
            # A join with no surviving inputs produces an all-zero map; its
            # shape comes from the declared channel count and the graph input.
            if node.channels_out < 1:
                raise GraphValidationError("empty add needs a declared channel count", node_id)
            return ("map", node.channels_out, graph.input_shape[1], graph.input_shape[2])
        first = ins[0]
        for s in ins[1:]:
            if s != first:
                raise GraphValidationError(f"add inputs disagree: {first} vs {s}", node_id)
        if first[0] != "map":
            raise GraphValidationError("add operates on feature maps", node_id)
        return first
    if node.kind == "gap":
        (tag, c, h, w) = _expect_map(ins, node_id, arity=1)
        return ("vec", c)
    if node.kind == "linear":
        if len(ins) != 1 or ins[0][0] != "vec":
            raise GraphValidationError("linear expects a single vector input", node_id)
        if ins[0][1] != node.channels_in:
            raise GraphValidationError(
                f"linear expects {node.channels_in} features, got {ins[0][1]}", node_id)
        if node.pin_last_row and node.channels_out < 2:
            raise GraphValidationError("pinned linear needs at least two classes", node_id)
        return ("logits", node.channels_out)
    raise GraphValidationError(f"unknown node kind {node.kind!r}", node_id)


def _expect_map(ins: list[tuple], node_id: int, arity: int) -> tuple:
    if len(ins) != arity:
        raise GraphValidationError(f"expected {arity} input(s), got {len(ins)}", node_id)
    if ins[0][0] != "map":
        raise GraphValidationError("expected a feature-map input", node_id)
    return ins[0]


def infer_shapes(graph: ComputationGraph) -> list[tuple]:
    """Output shape per node: ('map', c, h, w), ('vec', d) or ('logits', C)."""
    shapes: list[tuple] = []
    for node_id, node in enumerate(graph.nodes):
        for i in node.inputs:
            if not 0 <= i < node_id:
                raise GraphValidationError(
                    f"input {i} is not an earlier node", node_id)
        shapes.append(_shape_of(graph, shapes, node_id, node))
    return shapes


def validate_graph(graph: ComputationGraph) -> None:
    """Raise GraphValidationError unless the graph meets every invariant."""
    if not graph.nodes:
        raise GraphValidationError("graph has no nodes")
    if graph.nodes[0].kind != "input":
        raise GraphValidationError("node 0 must be the input", 0)
    if graph.nodes[-1].kind != "linear":
        raise GraphValidationError("last node must be the linear classifier")
    if any(n.kind == "input" for n in graph.nodes[1:]):
        raise GraphValidationError("only node 0 may be an input")
    if any(n.kind == "linear" for n in graph.nodes[:-1]):
        raise GraphValidationError("only the last node may be linear")
    if len(graph.input_shape) != 3 or min(graph.input_shape) < 1:
        raise GraphValidationError(f"bad input shape {graph.input_shape}")
    if graph.num_classes < 1:
        raise GraphValidationError("num_classes must be positive")
    shapes = infer_shapes(graph)
    if shapes[-1] != ("logits", graph.num_classes):
        raise GraphValidationError(
            f"classifier produces {shapes[-1]}, expected {graph.num_classes} logits")
    for i in graph.cell_nodes:
        if not 0 < i < len(graph.nodes) - 1:
            raise GraphValidationError(f"cell node index {i} out of range")


def weighted_nodes(graph: ComputationGraph, include_bn: bool = True) -> list[int]:
    """Indices of weight-bearing nodes in topological order."""
    kinds = WEIGHTED_KINDS if include_bn else WEIGHTED_NON_BN
    return [i for i, n in enumerate(graph.nodes) if n.kind in kinds]


def trainable_layer_count(graph: ComputationGraph) -> int:
    """Number of weighted layers, batch normalization excluded.

    This is the size proxy used for grouping architectures; call it on the
    canonical (pruned) graph so dead layers do not inflate the count.
    """
    return len(weighted_nodes(graph, include_bn=False))


def parameter_count(graph: ComputationGraph) -> int:
    """Total number of trainable parameters, batch-norm affine included."""
    return sum(n.weight_count() for n in graph.nodes)


def count_flops(graph: ComputationGraph) -> int:
    """FLOPs of one forward pass, counting one multiply-accumulate as 2.

    Only MAC-bearing nodes (conv, linear) contribute; batch normalization,
    activations, pooling and joins are dominated terms and count as zero.
    """
    shapes = infer_shapes(graph)
    total = 0
    for node_id, node in enumerate(graph.nodes):
        total += node_flops(node, shapes[node_id])
    return total


def node_flops(node: GraphNode, out_shape: tuple) -> int:
    if node.kind == "conv":
        _, _, h, w = out_shape
        return 2 * node.kernel * node.kernel * node.channels_in * node.channels_out * h * w
    if node.kind == "linear":
        rows = node.channels_out - 1 if node.pin_last_row else node.channels_out
        return 2 * node.channels_in * rows + (rows if node.with_bias else 0)
    return 0


def linear_softmax_graph(n_features: int, num_classes: int,
                         pin_last_row: bool = False,
                         with_bias: bool = False) -> ComputationGraph:
    """A bare softmax-regression model as a computation graph.

    The input is carried as an ``(n_features, 1, 1)`` map so the same forward
    engine applies; ``gap`` is then the identity on channels. With
    ``pin_last_row`` the last class row of the weight matrix is fixed at zero,
    which removes the softmax gauge freedom and makes the model identifiable.
    """
    nodes = (
        GraphNode(kind="input", channels_out=n_features, tag="input"),
        GraphNode(kind="gap", inputs=(0,), tag="flatten"),
        GraphNode(kind="linear", inputs=(1,), channels_in=n_features,
                  channels_out=num_classes, with_bias=with_bias,
                  pin_last_row=pin_last_row, tag="softmax-weights"),
    )
    return ComputationGraph(nodes=nodes, input_shape=(n_features, 1, 1),
                            num_classes=num_classes)


def with_nodes(graph: ComputationGraph, nodes: tuple[GraphNode, ...],
               cell_nodes: frozenset[int]) -> ComputationGraph:
    return replace(graph, nodes=nodes, cell_nodes=cell_nodes)
