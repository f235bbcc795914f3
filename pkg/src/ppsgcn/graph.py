"""Global graph representation, client partitioning, and propagation blocks.

The propagation operator throughout the package is

    L = (D + I)^{-1/2} (A + I) (D + I)^{-1/2}

built blockwise so that every piece is computable from data a single
client legitimately holds: client j stores its intra-block ``L_jj``, the
column-scaled cross blocks ``Ltilde_ij = A_ij (D_j + I)^{-1/2}`` for every
destination i != j, and the row scaler ``(D_j + 1)^{-1/2}``.  Degrees are
global (intra plus cross edges), so the blocks assemble exactly to the
centralized operator.  Self-loops are never stored; the ``+ I`` terms are
applied analytically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GraphFormatError(ValueError):
    """Malformed input file; carries the offending path and line number."""

    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = str(path)
        self.line_no = line_no


class MaskError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class GlobalGraph:
    """Immutable global graph: undirected, unweighted, no stored self-loops.

    Attributes
    ----------
    n : int
        Node count; node ids are 0..n-1.
    edges : ndarray of shape (E, 2)
        Deduplicated undirected edges with u < v.
    features : ndarray of shape (n, d)
    labels : ndarray of shape (n,)
        Class id in [0, n_classes); -1 marks an unlabeled node.
    n_classes : int
    train_mask, val_mask, test_mask : bool ndarrays of shape (n,)
        Pairwise disjoint.
    adjacency : csr_matrix
        Symmetric 0/1 matrix materialized at construction.
    degrees : ndarray of shape (n,)
        Global degree of every node (row sums of ``adjacency``).
    """

    n: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    adjacency: sp.csr_matrix = field(repr=False)
    degrees: np.ndarray = field(repr=False)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Partition:
    """Assignment of every node to one of m clients.

    ``owned[i]`` lists client i's global ids in ascending order; a node's
    local id is its position in that list, so the global-to-local map
    preserves ascending global-id order.
    """

    m: int
    assignment: np.ndarray
    owned: list = field(repr=False)
    local_index: np.ndarray = field(repr=False)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(o) for o in self.owned], dtype=np.int64)


@dataclass(frozen=True)
class ClientShard:
    """One client's share of the graph.

    ``A_cross[j]`` is the n_i x n_j block of the global adjacency whose
    rows are this client's nodes and whose columns are client j's nodes;
    the same physical edges appear transposed on client j.  ``D`` holds
    GLOBAL degrees (intra plus cross), which is what the normalization
    of the propagation operator requires.
    """

    client_id: int
    n_i: int
    global_ids: np.ndarray
    A_ii: sp.csr_matrix = field(repr=False)
    A_cross: dict = field(repr=False)
    D: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    train_mask: np.ndarray = field(repr=False)
    val_mask: np.ndarray = field(repr=False)
    test_mask: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class LaplacianBlocks:
    """The locally computable pieces of L held by one client.

    For owner client j:

    * ``L_jj``     -- n_j x n_j intra block (D_j+I)^{-1/2}(A_jj+I)(D_j+I)^{-1/2}
    * ``ltilde[i]``-- n_i x n_j cross block A_ij (D_j+I)^{-1/2} for each i != j,
                      the matrix this client multiplies into its own activations
                      when producing the term destined for client i
    * ``scaler``   -- length n_j vector (D_j[v]+1)^{-1/2}, applied by this
                      client to the aggregate of INCOMING cross terms

    Only the owner's degree vector ever enters these blocks; no client
    receives another client's degrees in the clear.
    """

    client_id: int
    L_jj: sp.csr_matrix = field(repr=False)
    ltilde: dict = field(repr=False)
    scaler: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# construction


def from_arrays(features, labels, edges, train_mask, val_mask, test_mask,
                n_classes: int | None = None) -> GlobalGraph:
    """Build a GlobalGraph from in-memory arrays, validating invariants."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match n={n}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if edges.min() < 0 or edges.max() >= n:
            raise ValueError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loop in edge list")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
    else:
        edges = edges.reshape(0, 2)

    masks = []
    for name, mk in (("train", train_mask), ("val", val_mask), ("test", test_mask)):
        mk = np.asarray(mk, dtype=bool)
        if mk.shape != (n,):
            raise MaskError(f"{name} mask has shape {mk.shape}, expected ({n},)")
        masks.append(mk)
    if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
        raise MaskError("train/val/test masks overlap")

    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    if labels.size and labels.max() >= n_classes:
        raise ValueError(f"label {labels.max()} outside [0, {n_classes})")
    if labels.size and labels.min() < -1:
        raise ValueError("labels must be >= -1 (-1 marks unlabeled)")

    if edges.size:
        data = np.ones(2 * len(edges), dtype=np.float64)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    else:
        adj = sp.csr_matrix((n, n), dtype=np.float64)
    degrees = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)

    return GlobalGraph(n=n, edges=edges, features=features, labels=labels,
                       n_classes=n_classes, train_mask=masks[0], val_mask=masks[1],
                       test_mask=masks[2], adjacency=adj, degrees=degrees)


def load_node_file(path):
    """Parse a node file: one line per node, ``<id> <feat_0> ... <feat_{d-1}> <label>``.

    Returns (features, labels) with rows ordered by node id.  Ids must form
    exactly the set {0..n-1}.
    """
    path = Path(path)
    ids, feats, labels = [], [], []
    dim = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise GraphFormatError(path, line_no,
                                       "expected <id> <features...> <label>")
            try:
                nid = int(parts[0])
                lab = int(parts[-1])
                row = [float(t) for t in parts[1:-1]]
            except ValueError as exc:
                raise GraphFormatError(path, line_no, f"bad token: {exc}") from None
            if dim is None:
                dim = len(row)
            elif len(row) != dim:
                raise GraphFormatError(
                    path, line_no,
                    f"feature dimension {len(row)} differs from first row's {dim}")
            ids.append(nid)
            feats.append(row)
            labels.append(lab)
    n = len(ids)
    if n == 0:
        raise GraphFormatError(path, 0, "empty node file")
    order = np.argsort(ids)
    ids_sorted = np.asarray(ids, dtype=np.int64)[order]
    if not np.array_equal(ids_sorted, np.arange(n)):
        raise GraphFormatError(path, 0, f"node ids must be exactly 0..{n - 1}")
    features = np.asarray(feats, dtype=np.float64)[order]
    labels_arr = np.asarray(labels, dtype=np.int64)[order]
    return features, labels_arr


def load_edge_file(path, n: int) -> np.ndarray:
    """Parse an edge file: one line per undirected edge, ``<u> <v>``."""
    path = Path(path)
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise GraphFormatError(path, line_no, "expected <u> <v>")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(path, line_no, f"bad token: {exc}") from None
            if u == v:
                raise GraphFormatError(path, line_no, f"self-loop ({u},{v}) not allowed")
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(path, line_no,
                                       f"edge ({u},{v}) references node id >= n={n}")
            out.append((u, v))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def split_masks(n: int, fractions, seed: int):
    """Random disjoint train/val/test masks from fractions summing to <= 1."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or sum(fr) > 1 + 1e-9:
        raise MaskError(f"bad split fractions {fractions}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_tr = int(round(fr[0] * n))
    n_va = int(round(fr[1] * n))
    n_te = min(int(round(fr[2] * n)), n - n_tr - n_va)
    masks = []
    start = 0
    for count in (n_tr, n_va, n_te):
        mk = np.zeros(n, dtype=bool)
        mk[perm[start:start + count]] = True
        masks.append(mk)
        start += count
    return tuple(masks)


def load_mask_spec(mask_spec, n: int, seed: int = 0):
    """Resolve a mask spec into three boolean vectors.

    Accepts a path to a JSON file {"train": [...], "val": [...], "test": [...]},
    a dict of the same shape, or a fraction string like "0.7/0.1/0.2"
    (split deterministically with ``seed``).
    """
    if isinstance(mask_spec, dict):
        obj = mask_spec
    elif isinstance(mask_spec, (str, Path)) and "/" in str(mask_spec) and not Path(str(mask_spec)).exists():
        return split_masks(n, str(mask_spec).split("/"), seed)
    else:
        with open(mask_spec) as fh:
            obj = json.load(fh)
    masks = []
    for name in ("train", "val", "test"):
        idx = np.asarray(obj.get(name, []), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise MaskError(f"{name} mask references node id outside [0, {n})")
        mk = np.zeros(n, dtype=bool)
        mk[idx] = True
        masks.append(mk)
    return tuple(masks)


def build_global(node_file, edge_file, mask_spec, split_seed: int = 0) -> GlobalGraph:
    """Load a GlobalGraph from the on-disk formats.

    ``mask_spec`` is forwarded to :func:`load_mask_spec`; duplicate edges
    are deduplicated, self-loops rejected with a line number.
    """
    features, labels = load_node_file(node_file)
    n = features.shape[0]
    edges = load_edge_file(edge_file, n)
    train_mask, val_mask, test_mask = load_mask_spec(mask_spec, n, split_seed)
    return from_arrays(features, labels, edges, train_mask, val_mask, test_mask)


# ---------------------------------------------------------------------------
# partitioning


def _make_partition(assignment: np.ndarray, m: int) -> Partition:
    owned = [np.flatnonzero(assignment == i) for i in range(m)]
    for i, o in enumerate(owned):
        if len(o) == 0:
            raise PartitionError(f"client {i} owns no nodes")
    local_index = np.empty(len(assignment), dtype=np.int64)
    for o in owned:
        local_index[o] = np.arange(len(o))
    return Partition(m=m, assignment=assignment, owned=owned, local_index=local_index)


def partition_random(g: GlobalGraph, m: int, seed: int) -> Partition:
    """Uniform random assignment of nodes to m clients, every client nonempty."""
    if m < 1:
        raise PartitionError("m must be >= 1")
    if m > g.n:
        raise PartitionError(f"cannot split {g.n} nodes across {m} clients")
    rng = np.random.default_rng(seed)
    assignment = rng.integers(0, m, size=g.n)
    # guarantee nonemptiness by planting one distinct node per client
    planted = rng.permutation(g.n)[:m]
    assignment[planted] = np.arange(m)
    return _make_partition(assignment.astype(np.int64), m)


def load_partition_file(path, n: int) -> Partition:
    """Parse a partition file: one line per node, ``<id> <client>``."""
    path = Path(path)
    assignment = np.full(n, -1, dtype=np.int64)
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise GraphFormatError(path, line_no, "expected <id> <client>")
            try:
                nid, cid = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(path, line_no, f"bad token: {exc}") from None
            if not 0 <= nid < n:
                raise GraphFormatError(path, line_no, f"node id {nid} outside [0, {n})")
            if assignment[nid] != -1:
                raise GraphFormatError(path, line_no, f"node {nid} assigned twice")
            assignment[nid] = cid
    if np.any(assignment < 0):
        missing = int(np.flatnonzero(assignment < 0)[0])
        raise PartitionError(f"node {missing} missing from partition file")
    m = int(assignment.max()) + 1
    return _make_partition(assignment, m)


# ---------------------------------------------------------------------------
# sharding


def shard(g: GlobalGraph, p: Partition) -> list:
    """Cut the graph into per-client shards along the partition.

    Shards are lossless: the blocks jointly contain every edge (cross
    edges twice, once per endpoint owner) and D is the global degree.
    """
    adj = g.adjacency.tocsr()
    shards = []
    for i in range(p.m):
        rows = p.owned[i]
        block_row = adj[rows]
        A_ii = block_row[:, rows].tocsr()
        A_cross = {}
        for j in range(p.m):
            if j == i:
                continue
            A_cross[j] = block_row[:, p.owned[j]].tocsr()
        shards.append(ClientShard(
            client_id=i,
            n_i=len(rows),
            global_ids=rows,
            A_ii=A_ii,
            A_cross=A_cross,
            D=g.degrees[rows],
            X=g.features[rows],
            Y=g.labels[rows],
            train_mask=g.train_mask[rows],
            val_mask=g.val_mask[rows],
            test_mask=g.test_mask[rows],
        ))
    return shards


def build_laplacian_blocks(shards: list) -> list:
    """Compute each client's propagation blocks from its own shard only.

    Client j derives Ltilde_ij = A_ij (D_j+I)^{-1/2} as the transpose of its
    locally held A_ji with rows scaled by its own degree vector, so no
    foreign degrees are ever consumed.
    """
    blocks = []
    for sh in shards:
        j = sh.client_id
        inv_sqrt = 1.0 / np.sqrt(sh.D.astype(np.float64) + 1.0)
        # (D+I)^{-1/2} (A_jj + I) (D+I)^{-1/2}, self-loop applied analytically
        L_jj = sh.A_ii.multiply(inv_sqrt[:, None]).multiply(inv_sqrt[None, :])
        L_jj = (L_jj + sp.diags(inv_sqrt * inv_sqrt)).tocsr()
        ltilde = {}
        for i, A_ji in sh.A_cross.items():
            # A_ij = A_ji^T; column scaling by (D_j+I)^{-1/2} equals row
            # scaling of A_ji before the transpose
            ltilde[i] = A_ji.multiply(inv_sqrt[:, None]).T.tocsr()
        blocks.append(LaplacianBlocks(client_id=j, L_jj=L_jj, ltilde=ltilde,
                                      scaler=inv_sqrt))
    return blocks
