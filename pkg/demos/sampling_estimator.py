"""The 1/p normalization is what makes subgraph estimates unbiased.

Runs the column-sampled estimator of the pre-activation matrix many
times with and without inclusion-probability normalization and compares
the Monte-Carlo means against the full-batch value.  The normalized
estimator's error shrinks with the round count; the unnormalized one
converges to the wrong matrix.
"""

import numpy as np

from ppsgcn import graph, oracle, sampling, synth


def mc_error(blocks, O, plan, target, part, n_rounds, normalize):
    means, _ = sampling.mc_estimator_moments(blocks, O, plan, n_rounds,
                                             seed=3, normalize=normalize)
    return max(np.abs(means[i] - target[part.owned[i]]).max()
               for i in range(len(means)))


def main():
    spec = synth.SynthSpec(n=24, blocks=3, p_in=0.5, p_out=0.1, dim=6, seed=2)
    g = synth.sbm_graph(spec, split=(1.0, 0.0, 0.0))
    part = graph.partition_random(g, 2, seed=0)
    shards = graph.shard(g, part)
    blocks = graph.build_laplacian_blocks(shards)

    W = np.random.default_rng(7).normal(size=(6, 4)) * 0.5
    O = [sh.X @ W for sh in shards]
    H = oracle.dense_propagation(g) @ g.features @ W

    plan = sampling.make_plan(shards, batch_size=12, restrict_to_train=False)
    print("round budget 12 of 24 nodes, uniform draws\n")
    print(f"{'rounds':>8}  {'normalized':>12}  {'unnormalized':>12}")
    for n_rounds in (100, 1000, 10000, 100000):
        e_norm = mc_error(blocks, O, plan, H, part, n_rounds, True)
        e_raw = mc_error(blocks, O, plan, H, part, n_rounds, False)
        print(f"{n_rounds:>8}  {e_norm:>12.4f}  {e_raw:>12.4f}")

    print("\nnormalized error keeps falling; unnormalized stalls at the bias")


if __name__ == "__main__":
    main()
