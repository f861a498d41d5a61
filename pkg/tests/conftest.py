import numpy as np
import pytest

import fimnas as fn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cell_encoding(rng, space_id="nb201toy"):
    spec = fn.get_space(space_id)
    ops = tuple(int(o) for o in rng.integers(0, spec.n_ops, size=spec.n_edges))
    return fn.ArchEncoding(ops=ops, space_id=space_id)


def random_canonical(rng, space_id="nb201toy"):
    return fn.canonicalize(fn.decode(random_cell_encoding(rng, space_id)))


def finite_difference_jacobian(net, batch, sel, step=1e-4):
    """Central differences on each selected parameter; the test oracle."""
    slices = dict(net.layer_slices)
    logits = fn.forward(net, batch)
    fd = np.zeros(logits.shape + (len(sel.entries),))
    for col, (nid, idx) in enumerate(sel.entries):
        flat = slices[nid].start + idx
        wp = np.array(net.weights)
        wp[flat] += step
        wm = np.array(net.weights)
        wm[flat] -= step
        lp = fn.forward(net.replace_weights(wp), batch)
        lm = fn.forward(net.replace_weights(wm), batch)
        fd[:, :, col] = (lp - lm) / (2 * step)
    return fd
