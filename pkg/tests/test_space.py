import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import fimnas as fn
from fimnas.errors import EncodingError, SpaceError

from conftest import random_cell_encoding


def enc(text):
    return fn.parse_encoding(text)


class TestEncodingFormat:
    @given(st.lists(st.integers(0, 4), min_size=6, max_size=6))
    def test_round_trip(self, ops):
        e = fn.ArchEncoding(ops=tuple(ops), space_id="nb201toy")
        assert fn.parse_encoding(fn.format_encoding(e)) == e

    def test_all_none_encoding(self):
        assert enc("nb201toy:0-0-0-0-0-0").ops == (0,) * 6

    def test_out_of_range_op_id(self):
        with pytest.raises(EncodingError) as exc:
            enc("nb201toy:5-0-0-0-0-0")
        assert exc.value.position == len("nb201toy:")

    def test_malformed_text_has_position(self):
        with pytest.raises(EncodingError) as exc:
            enc("nb201toy:0-0-x-0-0-0")
        assert exc.value.position is not None

    def test_wrong_length(self):
        with pytest.raises(EncodingError):
            enc("nb201toy:0-0-0")
        with pytest.raises(EncodingError):
            enc("nb201toy:0-0-0-0-0-0-0")

    def test_unknown_space(self):
        with pytest.raises(SpaceError):
            enc("nope:0-0-0")


class TestDecode:
    def test_all_skip_cell_scales_stem_features(self):
        # every edge an identity: node3 = 4 * stem output, so the logits
        # equal the classifier applied to the scaled stem features
        can = fn.canonicalize(fn.decode(enc("nb201toy:1-1-1-1-1-1")))
        net = fn.build_network(can.graph, fn.InitConfig(), 3)
        batch = fn.random_input_batch(can.graph.input_shape, 4, 5)
        logits = fn.forward(net, batch)

        stem_only = fn.canonicalize(fn.decode(enc("nb201toy:0-0-0-1-0-0")))
        net2 = fn.build_network(stem_only.graph, fn.InitConfig(), 3)
        # identical stem and classifier weights by construction (same draw order)
        logits_direct = fn.forward(net2, batch)
        classifier = stem_only.graph.nodes[-1]
        w_count = classifier.channels_out * classifier.channels_in
        w = net2.segment(len(stem_only.graph.nodes) - 1)[:w_count].reshape(
            classifier.channels_out, classifier.channels_in)
        bias = net2.segment(len(stem_only.graph.nodes) - 1)[w_count:]
        np.testing.assert_allclose(logits, (logits_direct - bias) * 4.0 + bias,
                                   rtol=1e-12, atol=1e-12)

    def test_all_none_classifier_sees_zero_features(self):
        # no residual path around the cell: a fully dead cell leaves only the
        # classifier bias
        can = fn.canonicalize(fn.decode(enc("nb201toy:0-0-0-0-0-0")))
        net = fn.build_network(can.graph, fn.InitConfig(), 3)
        batch = fn.random_input_batch(can.graph.input_shape, 4, 5)
        logits = fn.forward(net, batch)
        assert np.allclose(logits, logits[0])  # identical rows: bias only

    def test_all_conv_has_six_weighted_cell_nodes(self):
        g = fn.decode(enc("nb201toy:3-3-3-3-3-3"))
        cell_convs = [n for n in g.nodes if n.kind == "conv" and n.tag.startswith("edge")]
        assert len(cell_convs) == 6


class TestCanonicalize:
    def test_idempotent(self, rng):
        for _ in range(50):
            e = random_cell_encoding(rng)
            c1 = fn.canonicalize(fn.decode(e))
            c2 = fn.canonicalize(c1.graph)
            assert c1.canonical_hash == c2.canonical_hash
            assert c1.graph.nodes == c2.graph.nodes

    def test_dead_op_pruned_to_match_none(self):
        # conv on edge 0->1 whose only consumers are 'none' edges: the graph
        # must collapse to the encoding with 'none' there directly
        with_dead = fn.canonicalize(fn.decode(enc("nb201toy:3-2-0-2-0-3")))
        without = fn.canonicalize(fn.decode(enc("nb201toy:0-2-0-2-0-3")))
        assert with_dead.canonical_hash == without.canonical_hash

    def test_positional_identity_not_merged(self):
        # same chain through different interior nodes stays distinct
        via_node1 = fn.canonicalize(fn.decode(enc("nb201toy:1-0-0-0-1-0")))
        via_node2 = fn.canonicalize(fn.decode(enc("nb201toy:0-1-0-0-0-1")))
        assert via_node1.canonical_hash != via_node2.canonical_hash

    def test_pruning_preserves_logits(self, rng):
        # shared layers keep identical weights because build order is the
        # canonical node order; pruned-away layers never affect the output
        for _ in range(30):
            e = random_cell_encoding(rng)
            raw = fn.decode(e)
            can = fn.canonicalize(raw)
            if len(can.graph.nodes) == len(raw.nodes):
                continue
            batch = fn.random_input_batch(raw.input_shape, 3, int(rng.integers(2**32)))
            net_canon = fn.build_network(can.graph, fn.InitConfig(), 11)
            net_raw = fn.build_network(raw, fn.InitConfig(), 11)
            # align shared weights: copy canonical segments into the raw net
            raw_by_tag = {n.tag: i for i, n in enumerate(raw.nodes)}
            w = np.array(net_raw.weights)
            raw_slices = dict(net_raw.layer_slices)
            for nid, sl in net_canon.layer_slices:
                tag = can.graph.nodes[nid].tag
                w[raw_slices[raw_by_tag[tag]]] = net_canon.weights[sl]
            net_raw = net_raw.replace_weights(w)
            np.testing.assert_array_equal(fn.forward(net_canon, batch),
                                          fn.forward(net_raw, batch))

    def test_hash_equality_is_structural_equality(self, rng):
        from fimnas.space import _serialize
        buckets = {}
        for _ in range(400):
            e = random_cell_encoding(rng)
            can = fn.canonicalize(fn.decode(e))
            ser = _serialize(can.graph)
            if can.canonical_hash in buckets:
                assert buckets[can.canonical_hash] == ser
            buckets[can.canonical_hash] = ser


class TestEnumerate:
    def test_micro3_cardinality(self):
        encs = list(fn.enumerate_space(fn.get_space("micro3")))
        assert len(encs) == 5 ** 3 == 125
        assert len(set(e.ops for e in encs)) == 125

    def test_lexicographic_order(self):
        encs = list(fn.enumerate_space(fn.get_space("micro3")))
        assert [e.ops for e in encs] == sorted(e.ops for e in encs)

    def test_single_op_space(self):
        tiny = fn.SpaceSpec(space_id="single", num_cell_nodes=3,
                            edges=((0, 1), (0, 2), (1, 2)), ops=("none",))
        fn.register_space(tiny)
        assert len(list(fn.enumerate_space(tiny))) == 1

    def test_cap_overflow_error(self):
        with pytest.raises(SpaceError, match="sampling"):
            list(fn.enumerate_space(fn.get_space("nb201toy"), cap=100))


class TestMutate:
    @given(st.lists(st.integers(0, 4), min_size=6, max_size=6),
           st.integers(0, 2 ** 32))
    @settings(max_examples=200)
    def test_hamming_distance_one(self, ops, seed):
        e = fn.ArchEncoding(ops=tuple(ops), space_id="nb201toy")
        m = fn.mutate(e, seed)
        diffs = [i for i in range(6) if m.ops[i] != e.ops[i]]
        assert len(diffs) == 1

    def test_deterministic(self):
        e = enc("nb201toy:0-1-2-3-4-0")
        assert fn.mutate(e, 99) == fn.mutate(e, 99)

    def test_position_distribution_uniform(self):
        e = enc("nb201toy:0-0-0-0-0-0")
        n = 100_000
        rng = np.random.default_rng(5)
        counts = np.zeros(6)
        for _ in range(n):
            m = fn.mutate(e, int(rng.integers(2 ** 63)))
            pos = next(i for i in range(6) if m.ops[i] != 0)
            counts[pos] += 1
        expected = n / 6
        sigma = np.sqrt(n * (1 / 6) * (5 / 6))
        assert np.all(np.abs(counts - expected) <= 3 * sigma)

    def test_single_op_space_has_no_mutation(self):
        tiny = fn.SpaceSpec(space_id="single1", num_cell_nodes=3,
                            edges=((0, 1), (0, 2), (1, 2)), ops=("none",))
        fn.register_space(tiny)
        with pytest.raises(SpaceError):
            fn.mutate(fn.ArchEncoding(ops=(0, 0, 0), space_id="single1"), 0)
