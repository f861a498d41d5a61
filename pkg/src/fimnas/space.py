"""Cell-based search spaces: encoding, decoding, canonicalization, mutation.

A space is a small DAG of cell nodes whose edges each carry one operation
from a fixed menu. Encodings are the per-edge operation ids; decoding
materializes a full computation graph (stem, cell, pooled classifier).

Because ``none`` edges erase connectivity, distinct encodings can produce
identical computation graphs. ``canonicalize`` prunes every cell node that
is not on a live input-to-output path and hashes the result, which is the
unit of architecture deduplication.
"""

from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import EncodingError, SpaceError
from .graphs import ComputationGraph, GraphNode

DEFAULT_OPS = ("none", "skip_connect", "conv1x1", "conv3x3", "avgpool3x3")
NONE_OP = 0


@dataclass(frozen=True)
class SpaceSpec:
    """Geometry and menu of one cell search space."""

    space_id: str
    num_cell_nodes: int
    edges: tuple[tuple[int, int], ...]
    ops: tuple[str, ...] = DEFAULT_OPS
    width: int = 4
    input_shape: tuple[int, int, int] = (3, 8, 8)
    num_classes: int = 10

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_ops(self) -> int:
        return len(self.ops)

    def size(self) -> int:
        return self.n_ops ** self.n_edges


# The default desk-scale space mirrors the common 4-node, 6-edge cell layout
# at reduced width and resolution; "micro3" is a 3-node variant used for
# exhaustive toy experiments.
NB201_TOY = SpaceSpec(
    space_id="nb201toy",
    num_cell_nodes=4,
    edges=((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)),
)
MICRO3 = SpaceSpec(
    space_id="micro3",
    num_cell_nodes=3,
    edges=((0, 1), (0, 2), (1, 2)),
)

_REGISTRY: dict[str, SpaceSpec] = {s.space_id: s for s in (NB201_TOY, MICRO3)}


def get_space(space_id: str) -> SpaceSpec:
    try:
        return _REGISTRY[space_id]
    except KeyError:
        raise SpaceError(f"unknown space {space_id!r}; known: {sorted(_REGISTRY)}") from None


def register_space(spec: SpaceSpec) -> None:
    _REGISTRY[spec.space_id] = spec


@dataclass(frozen=True)
class ArchEncoding:
    """Operation ids for each cell edge, in the space's edge order."""

    ops: tuple[int, ...]
    space_id: str = "nb201toy"

    def __post_init__(self):
        spec = get_space(self.space_id)
        if len(self.ops) != spec.n_edges:
            raise EncodingError(
                f"encoding has {len(self.ops)} ops, space {self.space_id} has "
                f"{spec.n_edges} edges")
        for pos, op in enumerate(self.ops):
            if not 0 <= op < spec.n_ops:
                raise EncodingError(
                    f"op id {op} at edge {pos} outside [0, {spec.n_ops})")


@dataclass(frozen=True)
class CanonicalGraph:
    """A pruned computation graph plus a 128-bit structural digest."""

    graph: ComputationGraph
    canonical_hash: str


def format_encoding(enc: ArchEncoding) -> str:
    return f"{enc.space_id}:" + "-".join(str(o) for o in enc.ops)


_ENC_RE = re.compile(r"^([A-Za-z0-9_]+):((?:\d+-)*\d+)$")


def parse_encoding(text: str) -> ArchEncoding:
    """Inverse of ``format_encoding``; errors carry a character position."""
    m = _ENC_RE.match(text)
    if not m:
        colon = text.find(":")
        pos = len(text) if colon < 0 else colon
        for i, ch in enumerate(text):
            if not (ch.isalnum() or ch in "_:-"):
                pos = i
                break
        raise EncodingError(f"malformed encoding {text!r}", position=pos)
    space_id, ops_text = m.groups()
    spec = get_space(space_id)
    tokens = ops_text.split("-")
    offset = len(space_id) + 1
    for pos, tok in enumerate(tokens):
        if pos >= spec.n_edges:
            raise EncodingError(
                f"too many ops for space {space_id} ({spec.n_edges} edges)",
                position=offset)
        if not 0 <= int(tok) < spec.n_ops:
            raise EncodingError(
                f"op id {tok} outside [0, {spec.n_ops})", position=offset)
        offset += len(tok) + 1
    if len(tokens) < spec.n_edges:
        raise EncodingError(
            f"too few ops for space {space_id} ({spec.n_edges} edges)",
            position=len(text))
    return ArchEncoding(ops=tuple(int(t) for t in tokens), space_id=space_id)


def decode(enc: ArchEncoding) -> ComputationGraph:
    """Materialize the computation graph for an encoding.

    ``none`` edges are absent connections: they produce no nodes. A cell
    node whose incoming edges are all ``none`` carries an all-zero feature
    map, so a fully dead cell feeds zero features to the classifier.
    """
    spec = get_space(enc.space_id)
    w = spec.width
    cin = spec.input_shape[0]
    nodes: list[GraphNode] = [
        GraphNode(kind="input", channels_out=cin, tag="input"),
        GraphNode(kind="conv", inputs=(0,), channels_in=cin, channels_out=w,
                  kernel=3, padding=1, tag="stem-conv"),
        GraphNode(kind="bn", inputs=(1,), channels_out=w, tag="stem-bn"),
    ]
    cell_ids: set[int] = set()
    feature: dict[int, int] = {0: 2}  # cell node -> graph node holding its features

    def push(node: GraphNode, in_cell: bool = True) -> int:
        nodes.append(node)
        nid = len(nodes) - 1
        if in_cell:
            cell_ids.add(nid)
        return nid

    for j in range(1, spec.num_cell_nodes):
        incoming: list[int] = []
        for (a, b), op in zip(spec.edges, enc.ops):
            if b != j:
                continue
            name = spec.ops[op]
            src = feature[a]
            if name == "none":
                continue
            if name == "skip_connect":
                incoming.append(src)
            elif name in ("conv1x1", "conv3x3"):
                k = 1 if name == "conv1x1" else 3
                tag = f"edge{a}-{b}:{name}"
                r = push(GraphNode(kind="relu", inputs=(src,), tag=tag + ":relu"))
                c = push(GraphNode(kind="conv", inputs=(r,), channels_in=w,
                                   channels_out=w, kernel=k, padding=k // 2, tag=tag))
                bn = push(GraphNode(kind="bn", inputs=(c,), channels_out=w,
                                    tag=tag + ":bn"))
                incoming.append(bn)
            elif name == "avgpool3x3":
                p = push(GraphNode(kind="avgpool", inputs=(src,), kernel=3,
                                   padding=1, tag=f"edge{a}-{b}:avgpool3x3"))
                incoming.append(p)
            else:
                raise SpaceError(f"space {spec.space_id} has unknown op {name!r}")
        is_output = j == spec.num_cell_nodes - 1
        join = push(GraphNode(kind="add", inputs=tuple(incoming), channels_out=w,
                              tag=f"cell-node{j}"), in_cell=not is_output)
        feature[j] = join

    out = feature[spec.num_cell_nodes - 1]
    gap = push(GraphNode(kind="gap", inputs=(out,), tag="gap"), in_cell=False)
    push(GraphNode(kind="linear", inputs=(gap,), channels_in=w,
                   channels_out=spec.num_classes, with_bias=True, tag="classifier"),
         in_cell=False)
    return ComputationGraph(nodes=tuple(nodes), input_shape=spec.input_shape,
                            num_classes=spec.num_classes,
                            cell_nodes=frozenset(cell_ids))


def _serialize(graph: ComputationGraph) -> str:
    # The tag carries the node's structural position in the cell (which DAG
    # node, which edge). Including it keeps positional identity: two pruned
    # graphs hash equal only when they use the same cell positions, matching
    # the usual dedup convention for cell spaces (no node-permutation merge).
    parts = [f"in={graph.input_shape},C={graph.num_classes}"]
    for node in graph.nodes:
        attrs = (node.kind, node.tag, node.inputs, node.channels_in,
                 node.channels_out, node.kernel, node.padding, node.with_bias,
                 node.pin_last_row)
        parts.append(repr(attrs))
    return ";".join(parts)


def canonicalize(graph: ComputationGraph) -> CanonicalGraph:
    """Prune dead cell nodes and hash the surviving structure.

    A cell node survives only if it is reachable from the input and can
    reach the logits. Scaffold nodes (everything outside ``cell_nodes``)
    always survive; join nodes drop references to pruned inputs. The result
    is idempotent and two graphs get equal hashes exactly when their pruned
    node tuples are identical under the fixed topological ordering.
    """
    n = len(graph.nodes)
    reach_fwd = [False] * n
    for nid, node in enumerate(graph.nodes):
        reach_fwd[nid] = node.kind == "input" or any(
            reach_fwd[i] for i in node.inputs)
    reach_bwd = [False] * n
    reach_bwd[n - 1] = True
    for nid in range(n - 1, -1, -1):
        if reach_bwd[nid]:
            for i in graph.nodes[nid].inputs:
                reach_bwd[i] = True
    keep = [nid not in graph.cell_nodes or (reach_fwd[nid] and reach_bwd[nid])
            for nid in range(n)]
    remap: dict[int, int] = {}
    new_nodes: list[GraphNode] = []
    new_cell: set[int] = set()
    for nid, node in enumerate(graph.nodes):
        if not keep[nid]:
            continue
        inputs = tuple(remap[i] for i in node.inputs if keep[i])
        remap[nid] = len(new_nodes)
        if nid in graph.cell_nodes:
            new_cell.add(remap[nid])
        new_nodes.append(GraphNode(kind=node.kind, inputs=inputs,
                                   channels_in=node.channels_in,
                                   channels_out=node.channels_out,
                                   kernel=node.kernel, padding=node.padding,
                                   with_bias=node.with_bias,
                                   pin_last_row=node.pin_last_row, tag=node.tag))
    pruned = ComputationGraph(nodes=tuple(new_nodes), input_shape=graph.input_shape,
                              num_classes=graph.num_classes,
                              cell_nodes=frozenset(new_cell))
    digest = hashlib.blake2b(_serialize(pruned).encode(), digest_size=16).hexdigest()
    return CanonicalGraph(graph=pruned, canonical_hash=digest)


def enumerate_space(spec: SpaceSpec, cap: int = 1_000_000) -> Iterator[ArchEncoding]:
    """All encodings in lexicographic order (first edge most significant)."""
    total = spec.size()
    if total > cap:
        raise SpaceError(
            f"space {spec.space_id} has {total} encodings, above the cap of {cap}; "
            "use random sampling instead of exhaustive enumeration")

    def gen() -> Iterator[ArchEncoding]:
        for combo in itertools.product(range(spec.n_ops), repeat=spec.n_edges):
            yield ArchEncoding(ops=combo, space_id=spec.space_id)

    return gen()


def random_encoding(spec: SpaceSpec, rng: np.random.Generator) -> ArchEncoding:
    ops = tuple(int(o) for o in rng.integers(0, spec.n_ops, size=spec.n_edges))
    return ArchEncoding(ops=ops, space_id=spec.space_id)


def mutate(enc: ArchEncoding, rng_seed: int) -> ArchEncoding:
    """Resample one uniformly chosen edge to a uniformly chosen different op."""
    spec = get_space(enc.space_id)
    if spec.n_ops < 2:
        raise SpaceError(f"space {spec.space_id} has a single op; no legal mutation")
    rng = np.random.default_rng(rng_seed)
    edge = int(rng.integers(spec.n_edges))
    delta = int(rng.integers(1, spec.n_ops))
    ops = list(enc.ops)
    ops[edge] = (ops[edge] + delta) % spec.n_ops
    return ArchEncoding(ops=tuple(ops), space_id=enc.space_id)
