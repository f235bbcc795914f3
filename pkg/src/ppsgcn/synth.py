"""Synthetic stochastic-block-model graphs for desk-scale experiments.

Labels are the block ids, features are Gaussian around a per-block mean,
so class separability is tunable through ``sigma`` (sigma=0 makes every
node carry its block mean exactly).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import graph


@dataclass(frozen=True)
class SynthSpec:
    n: int
    blocks: int
    p_in: float
    p_out: float
    dim: int = 16
    sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ValueError(f"need 0 <= p_out <= p_in <= 1, got "
                             f"p_in={self.p_in} p_out={self.p_out}")
        if self.blocks < 1 or self.n < self.blocks:
            raise ValueError("need 1 <= blocks <= n")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def sbm_arrays(spec: SynthSpec):
    """Draw (features, labels, edges) for the spec. Deterministic given seed.

    Block sizes are as equal as possible, nodes 0..n-1 ordered by block.
    Each unordered pair {u, v} gets an independent Bernoulli edge with
    probability p_in (same block) or p_out (different blocks).
    """
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.blocks),
                       np.diff(np.linspace(0, spec.n, spec.blocks + 1).astype(int)))
    means = rng.normal(0.0, 1.0, size=(spec.blocks, spec.dim))
    features = means[labels] + spec.sigma * rng.normal(0.0, 1.0,
                                                       size=(spec.n, spec.dim))
    iu, ju = np.triu_indices(spec.n, k=1)
    prob = np.where(labels[iu] == labels[ju], spec.p_in, spec.p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    return features, labels, edges


def sbm_graph(spec: SynthSpec, split=(0.6, 0.2, 0.2), split_seed: int | None = None):
    """Build an in-memory GlobalGraph straight from the spec."""
    features, labels, edges = sbm_arrays(spec)
    seed = spec.seed if split_seed is None else split_seed
    tr, va, te = graph.split_masks(spec.n, split, seed)
    return graph.from_arrays(features, labels, edges, tr, va, te,
                             n_classes=spec.blocks)


def gen_synth(spec: SynthSpec, out_dir) -> dict:
    """Write node/edge files (plus a fractional-split mask JSON) for the spec.

    Returns the paths written.  Output is byte-identical for identical
    specs: floats are formatted with repr-faithful %.17g.
    """
    features, labels, edges = sbm_arrays(spec)
    os.makedirs(out_dir, exist_ok=True)
    node_path = os.path.join(out_dir, "nodes.txt")
    edge_path = os.path.join(out_dir, "edges.txt")
    with open(node_path, "w") as fh:
        for i in range(spec.n):
            feats = " ".join("%.17g" % x for x in features[i])
            fh.write(f"{i} {feats} {labels[i]}\n")
    with open(edge_path, "w") as fh:
        for u, v in edges:
            fh.write(f"{u} {v}\n")
    return {"nodes": node_path, "edges": edge_path}
