"""Per-client node sampling and the 1/p(v) normalization of the estimator.

Each client draws s_i nodes with replacement from its probability vector
Q_i and deduplicates, so a node's chance of appearing in the round is
exactly p(v) = 1 - (1 - Q_i(v))^{s_i}.  Dividing every sampled column of
the propagation operator by p(v) makes the pre-activation estimator
unbiased (checked by enumeration and Monte Carlo in the test suite), and
a closed-form bound on its variance is evaluated by
:func:`variance_bound_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import LaplacianBlocks, build_laplacian_blocks


@dataclass(frozen=True)
class SamplePlan:
    """Per-client sampling distributions.

    ``eligible[i]`` lists the local ids client i may sample (ascending);
    ``Q[i]`` is the strictly positive distribution over exactly those
    ids, summing to 1.  ``s`` holds the per-client with-replacement draw
    counts.  ``n_local`` records each client's total node count so
    full-length probability vectors can be materialized.
    """

    eligible: list
    Q: list
    s: np.ndarray
    n_local: np.ndarray

    def __post_init__(self):
        for i, (el, q) in enumerate(zip(self.eligible, self.Q)):
            if len(el) == 0:
                raise ValueError(f"client {i} has no eligible nodes to sample")
            if len(el) != len(q):
                raise ValueError(f"client {i}: eligible/Q length mismatch")
            if not (q > 0).all():
                raise ValueError(f"client {i}: Q must be strictly positive")
            if abs(float(q.sum()) - 1.0) > 1e-12:
                raise ValueError(f"client {i}: Q sums to {q.sum()}, not 1")
        if (self.s < 1).any():
            raise ValueError("every draw count s_i must be >= 1")

    @property
    def m(self) -> int:
        return len(self.Q)

    def inclusion_prob(self, i: int) -> np.ndarray:
        """p(v) over ALL of client i's local nodes (0 for ineligible ones)."""
        p = np.zeros(self.n_local[i])
        p[self.eligible[i]] = 1.0 - (1.0 - self.Q[i]) ** self.s[i]
        return p


@dataclass(frozen=True)
class SampleRound:
    """One iteration's deduplicated sampled sets with inclusion probabilities.

    ``sampled[i]`` holds sorted local ids, ``p[i]`` the aligned p(v);
    both refer to client i's local numbering.
    """

    sampled: list
    p: list

    @property
    def n_S(self) -> int:
        return int(sum(len(s) for s in self.sampled))

    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.sampled], dtype=np.int64)


def _allocate_draws(batch_size: int, counts: np.ndarray) -> np.ndarray:
    """Largest-remainder split of the round budget, every client >= 1 draw."""
    m = len(counts)
    if batch_size < m:
        raise ValueError(f"batch size {batch_size} cannot cover {m} clients")
    quota = batch_size * counts / counts.sum()
    s = np.floor(quota).astype(np.int64)
    rem = batch_size - int(s.sum())
    order = np.argsort(-(quota - s), kind="stable")
    s[order[:rem]] += 1
    while (s == 0).any():
        s[np.argmax(s)] -= 1
        s[np.argmin(s)] += 1
    return s


def make_plan(shards: list, batch_size: int, distribution: str = "uniform",
              restrict_to_train: bool = True) -> SamplePlan:
    """Build a SamplePlan over the shards.

    ``distribution`` is ``uniform`` or ``degree`` (proportional to the
    global degree plus one).  With ``restrict_to_train`` only train-mask
    nodes are eligible, which is how training rounds run; theorem-style
    full-support plans pass False.
    """
    eligible, Q = [], []
    for sh in shards:
        el = np.flatnonzero(sh.train_mask) if restrict_to_train \
            else np.arange(sh.n_i)
        if len(el) == 0:
            raise ValueError(f"client {sh.client_id} has no eligible nodes "
                             "(empty train split on this shard)")
        if distribution == "uniform":
            w = np.ones(len(el))
        elif distribution == "degree":
            w = sh.D[el].astype(np.float64) + 1.0
        else:
            raise ValueError(f"unknown sampling distribution {distribution!r}")
        eligible.append(el)
        Q.append(w / w.sum())
    counts = np.array([len(e) for e in eligible], dtype=np.int64)
    s = _allocate_draws(batch_size, counts)
    return SamplePlan(eligible=eligible, Q=Q, s=s,
                      n_local=np.array([sh.n_i for sh in shards], dtype=np.int64))


def full_round(sizes) -> SampleRound:
    """The degenerate round containing every node with p = 1 (no sampling)."""
    sampled = [np.arange(int(n)) for n in sizes]
    p = [np.ones(int(n)) for n in sizes]
    return SampleRound(sampled=sampled, p=p)


def _flatten_seed(seed) -> list:
    if isinstance(seed, (tuple, list)):
        out = []
        for part in seed:
            out.extend(_flatten_seed(part))
        return out
    return [int(seed)]


def _client_rng(seed, client: int):
    return np.random.default_rng(
        np.random.SeedSequence(_flatten_seed(seed) + [client]))


def sample_round(plan: SamplePlan, seed) -> SampleRound:
    """Draw one round: s_i independent draws from Q_i, deduplicated.

    Each client draws from its own seed-derived substream, so the result
    does not depend on client execution order.  ``seed`` may be an int or
    a tuple (e.g. (run_seed, iteration)).
    """
    sampled, probs = [], []
    for i in range(plan.m):
        rng = _client_rng(seed, i)
        pos = rng.choice(len(plan.Q[i]), size=int(plan.s[i]), replace=True,
                         p=plan.Q[i])
        pos = np.unique(pos)
        sampled.append(plan.eligible[i][pos])
        probs.append(1.0 - (1.0 - plan.Q[i][pos]) ** plan.s[i])
    return SampleRound(sampled=sampled, p=probs)


def sample_membership(plan: SamplePlan, n_rounds: int, seed, client: int):
    """Vectorized draws for Monte-Carlo studies.

    Returns a boolean (n_rounds, n_local) membership matrix for one
    client, using the same draw semantics as :func:`sample_round`.
    """
    rng = _client_rng(seed, client)
    pos = rng.choice(len(plan.Q[client]), size=(n_rounds, int(plan.s[client])),
                     replace=True, p=plan.Q[client])
    mem = np.zeros((n_rounds, int(plan.n_local[client])), dtype=bool)
    rows = np.repeat(np.arange(n_rounds), int(plan.s[client]))
    mem[rows, plan.eligible[client][pos.ravel()]] = True
    return mem


# ---------------------------------------------------------------------------
# operator restriction


@dataclass(frozen=True)
class RestrictedBlocks:
    """One client's propagation blocks cut down to a sample round.

    ``L_local`` and ``send[dest]`` carry the forward operator with the
    1/p(u) column normalization already folded in; ``L_local_raw`` and
    ``send_raw[dest]`` are the plain restrictions, which is what the
    backward pass applies (the adjoint of column scaling is row scaling
    at the destination, see ``inv_p``).  With normalization disabled the
    scaled and raw matrices coincide and ``inv_p`` is all ones.
    """

    client_id: int
    L_local: sp.csr_matrix
    L_local_raw: sp.csr_matrix
    send: dict
    send_raw: dict
    scaler: np.ndarray
    inv_p: np.ndarray
    normalize: bool


def restrict_blocks(blocks: LaplacianBlocks, round: SampleRound,
                    normalize: bool = True) -> RestrictedBlocks:
    """Restrict one client's blocks to the round's rows and columns.

    Rows of ``send[dest]`` are the destination's sampled nodes, columns
    are this client's own; columns are divided by this client's p(u)
    when normalizing (the estimator's Horvitz-Thompson scaling).
    """
    j = blocks.client_id
    own = round.sampled[j]
    inv_p = 1.0 / round.p[j] if normalize else np.ones(len(own))
    raw_local = blocks.L_jj[np.ix_(own, own)].tocsr()
    L_local = raw_local.multiply(inv_p[None, :]).tocsr() if normalize else raw_local
    send, send_raw = {}, {}
    for dest, lt in blocks.ltilde.items():
        raw = lt[np.ix_(round.sampled[dest], own)].tocsr()
        send_raw[dest] = raw
        send[dest] = raw.multiply(inv_p[None, :]).tocsr() if normalize else raw
    return RestrictedBlocks(client_id=j, L_local=L_local, L_local_raw=raw_local,
                            send=send, send_raw=send_raw,
                            scaler=blocks.scaler[own], inv_p=inv_p,
                            normalize=normalize)


# ---------------------------------------------------------------------------
# estimator evaluation (used by the theorem checks and their tests)


def estimate_preactivation(blocks_list: list, round: SampleRound, O_list: list,
                           normalize: bool = True) -> list:
    """Row-free estimator of the pre-activation H for every client.

    For client i this evaluates, over ALL of its n_i rows,

        Hhat_i = L_ii[:, S_i] diag(1/p_i) O_i[S_i]
                 + scaler_i * sum_j Ltilde_ij[:, S_j] diag(1/p_j) O_j[S_j]

    which is the quantity whose expectation the unbiasedness theorem
    speaks about (only the column membership is random).  ``O_list``
    holds each client's full O = Z W matrix.
    """
    m = len(blocks_list)
    weights = []
    for i in range(m):
        w = 1.0 / round.p[i] if normalize else np.ones(len(round.sampled[i]))
        weights.append(w)
    out = []
    for i in range(m):
        bi = blocks_list[i]
        cols = round.sampled[i]
        acc = bi.L_jj[:, cols] @ (weights[i][:, None] * O_list[i][cols])
        remote = 0.0
        for j in range(m):
            if j == i:
                continue
            lt = blocks_list[j].ltilde[i]        # n_i x n_j, lives on client j
            cj = round.sampled[j]
            remote = remote + lt[:, cj] @ (weights[j][:, None] * O_list[j][cj])
        if isinstance(remote, np.ndarray):
            acc = acc + bi.scaler[:, None] * remote
        out.append(np.asarray(acc))
    return out


def mc_estimator_moments(blocks_list: list, O_list: list, plan: SamplePlan,
                         n_rounds: int, seed, normalize: bool = True,
                         chunk: int = 2000):
    """Elementwise Monte-Carlo mean and variance of the row-free estimator.

    Draws ``n_rounds`` independent rounds (vectorized in chunks) and
    accumulates first and second moments of Hhat_i for every client.
    Returns (means, variances) as lists of n_i x d arrays.
    """
    m = len(blocks_list)
    dims = O_list[0].shape[1]
    dense_own = [b.L_jj.toarray() for b in blocks_list]
    dense_cross = [{i: lt.toarray() for i, lt in b.ltilde.items()}
                   for b in blocks_list]
    inv_p = [None] * m
    for j in range(m):
        full = plan.inclusion_prob(j)
        inv_p[j] = np.divide(1.0, full, out=np.zeros_like(full), where=full > 0)
    s1 = [np.zeros((int(plan.n_local[i]), dims)) for i in range(m)]
    s2 = [np.zeros_like(x) for x in s1]
    # accumulate around a per-client reference round so a deterministic
    # estimator yields an exactly zero variance instead of fp noise
    ref = [None] * m
    done = 0
    block_id = 0
    while done < n_rounds:
        take = min(chunk, n_rounds - done)
        # per-client membership weights for this chunk of rounds
        W_chunk = []
        for j in range(m):
            mem = sample_membership(plan, take, (seed, block_id), j)
            if normalize:
                W_chunk.append(mem * inv_p[j][None, :])
            else:
                W_chunk.append(mem.astype(np.float64))
        for i in range(m):
            contrib = np.einsum("vu,tu,uk->tvk", dense_own[i], W_chunk[i],
                                O_list[i], optimize=True)
            remote = 0.0
            for j in range(m):
                if j == i:
                    continue
                remote = remote + np.einsum("vu,tu,uk->tvk", dense_cross[j][i],
                                            W_chunk[j], O_list[j], optimize=True)
            if isinstance(remote, np.ndarray):
                contrib = contrib + blocks_list[i].scaler[None, :, None] * remote
            if ref[i] is None:
                ref[i] = contrib[0].copy()
            shifted = contrib - ref[i][None]
            s1[i] += shifted.sum(axis=0)
            s2[i] += (shifted ** 2).sum(axis=0)
        done += take
        block_id += 1
    means = [r + a / n_rounds for r, a in zip(ref, s1)]
    variances = [b / n_rounds - (a / n_rounds) ** 2 for b, a in zip(s2, s1)]
    return means, variances


# ---------------------------------------------------------------------------
# variance bound (closed form vs Monte Carlo)


def variance_bound_check(plan: SamplePlan, shards: list, weights: list,
                         layer_dims=None, n_rounds: int = 10000, seed=0,
                         per_layer_inputs=None) -> dict:
    """Empirically check the closed-form variance bound of the estimator.

    For every layer l the bound is

        w * z * n_i * d_l * ||L||_inf^2 * sum_j sum_u (1/Q_j(u) - 1)

    with w the largest squared column norm over all weight matrices, z
    the largest squared activation row norm over all layers (features
    included), and the Q-sum running over eligible nodes.  The Monte
    Carlo side re-estimates Hhat over ``n_rounds`` rounds per layer with
    the layer input O fixed at its full-batch value.

    Returns per (client, layer) entries {empirical_var, bound, ok} plus
    an overall ``ok``.
    """
    blocks_list = build_laplacian_blocks(shards)
    if layer_dims is not None:
        expect = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        if list(layer_dims) != expect:
            raise ValueError(f"layer_dims {layer_dims} do not match weights {expect}")
    m = len(shards)
    sizes = [sh.n_i for sh in shards]

    # full-batch activations, computed blockwise from the clients' own pieces
    Z = [[sh.X for sh in shards]]
    for l, W in enumerate(weights):
        O = [Z[-1][i] @ W for i in range(m)]
        H = []
        for i in range(m):
            acc = blocks_list[i].L_jj @ O[i]
            remote = 0.0
            for j in range(m):
                if j != i:
                    remote = remote + blocks_list[j].ltilde[i] @ O[j]
            if isinstance(remote, np.ndarray):
                acc = acc + blocks_list[i].scaler[:, None] * remote
            H.append(acc)
        if l < len(weights) - 1:
            Z.append([np.maximum(h, 0.0) for h in H])
        else:
            e = [np.exp(h - h.max(axis=1, keepdims=True)) for h in H]
            Z.append([x / x.sum(axis=1, keepdims=True) for x in e])

    w_sup = max(float((W ** 2).sum(axis=0).max()) for W in weights)
    z_sup = max(float((z ** 2).sum(axis=1).max()) for layer in Z for z in layer)
    # ||L||_inf as the induced infinity norm; it dominates the elementwise
    # |L[v,u]| bound the derivation uses, so the bound stays valid
    L_inf = 0.0
    for i in range(m):
        rowsum = np.asarray(abs(blocks_list[i].L_jj).sum(axis=1)).ravel()
        for j in range(m):
            if j != i:
                cross = abs(blocks_list[j].ltilde[i]).sum(axis=1)
                rowsum = rowsum + blocks_list[i].scaler * np.asarray(cross).ravel()
        L_inf = max(L_inf, float(rowsum.max()))
    q_term = sum(float((1.0 / q - 1.0).sum()) for q in plan.Q)

    results = {}
    ok_all = True
    for l, W in enumerate(weights):
        O = [Z[l][i] @ W for i in range(m)]
        d_l = W.shape[1]
        _, variances = mc_estimator_moments(blocks_list, O, plan, n_rounds,
                                            (seed, l))
        for i in range(m):
            empirical = float(variances[i].sum())
            bound = w_sup * z_sup * sizes[i] * d_l * L_inf ** 2 * q_term
            ok = empirical <= bound
            ok_all = ok_all and ok
            results[(i, l + 1)] = {"empirical_var": empirical, "bound": bound,
                                   "ok": ok}
    results["ok"] = ok_all
    return results
