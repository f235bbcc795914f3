import numpy as np
import pytest

from ppsgcn import graph, synth


@pytest.fixture
def sbm_factory():
    """Factory for desk-scale SBM graphs with sensible defaults."""
    def make(n=32, blocks=4, p_in=0.4, p_out=0.08, dim=8, sigma=0.3, seed=3,
             split=(0.5, 0.25, 0.25)):
        spec = synth.SynthSpec(n=n, blocks=blocks, p_in=p_in, p_out=p_out,
                               dim=dim, sigma=sigma, seed=seed)
        return synth.sbm_graph(spec, split=split)
    return make


@pytest.fixture
def path3():
    """The 3-node path graph 0-1-2 with every node in the train split."""
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    labels = np.array([0, 1, 0])
    edges = np.array([[0, 1], [1, 2]])
    tr = np.array([True, True, True])
    no = np.zeros(3, dtype=bool)
    return graph.from_arrays(feats, labels, edges, tr, no, no)


def assemble_dense_L(blocks, partition, n):
    """Reassemble the global propagation operator from per-client blocks."""
    Ld = np.zeros((n, n))
    for b in blocks:
        rows = partition.owned[b.client_id]
        Ld[np.ix_(rows, rows)] = b.L_jj.toarray()
    for b in blocks:
        for dest, lt in b.ltilde.items():
            rows = partition.owned[dest]
            cols = partition.owned[b.client_id]
            Ld[np.ix_(rows, cols)] = blocks[dest].scaler[:, None] * lt.toarray()
    return Ld
