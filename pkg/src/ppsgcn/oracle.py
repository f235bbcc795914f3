"""Centralized dense reference implementation used to verify the distributed path.

Everything here recomputes the model from first principles on one machine:
the propagation operator is assembled densely from the raw adjacency, the
forward/backward passes are textbook matrix calculus, and gradients can be
cross-checked by central finite differences.  This module deliberately
shares no sampling, sharding, or aggregation code with the rest of the
package; equality of results is therefore evidence, not tautology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import GlobalGraph

DENSE_NODE_CAP = 4096
LOG_CLAMP = 1e-12


@dataclass
class OracleModel:
    """Dense single-machine GCN with the same activation and loss choices."""
    dims: list
    W: list

    @classmethod
    def from_weights(cls, W):
        dims = [W[0].shape[0]] + [w.shape[1] for w in W]
        return cls(dims=dims, W=[np.array(w, dtype=np.float64) for w in W])


def dense_propagation(g: GlobalGraph) -> np.ndarray:
    """(D+I)^{-1/2} (A+I) (D+I)^{-1/2} as a dense array."""
    if g.n > DENSE_NODE_CAP:
        raise MemoryError(f"dense oracle capped at {DENSE_NODE_CAP} nodes, got {g.n}")
    A = g.adjacency.toarray() + np.eye(g.n)
    inv_sqrt = 1.0 / np.sqrt(g.degrees.astype(np.float64) + 1.0)
    return inv_sqrt[:, None] * A * inv_sqrt[None, :]


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _one_hot(labels, n_classes, rows_mask):
    Y = np.zeros((len(labels), n_classes))
    sel = rows_mask & (labels >= 0)
    Y[np.flatnonzero(sel), labels[sel]] = 1.0
    return Y


def forward(L: np.ndarray, X: np.ndarray, W: list):
    """Dense GCN forward: returns (H list, Z list) with Z[0] = X.

    Hidden activations are ReLU, the last layer is a row softmax.
    """
    H, Z = [], [X]
    for l, Wl in enumerate(W):
        Hl = L @ Z[-1] @ Wl
        H.append(Hl)
        Z.append(_softmax_rows(Hl) if l == len(W) - 1 else _relu(Hl))
    return H, Z


def nll_loss(probs: np.ndarray, Y: np.ndarray, divisor: float) -> float:
    logp = np.log(np.clip(probs, LOG_CLAMP, None))
    return float(-(Y * logp).sum() / divisor)


def forward_backward(g: GlobalGraph, W: list, label_rows=None):
    """Full-batch dense forward and backward.

    Loss is the label-weighted NLL divided by n (i.e. client weights
    n_i/n with per-client divisor n_i, collapsed to one machine); rows
    outside ``label_rows`` (default: the train mask) carry zero targets.

    Returns dict with H, Z, loss, grad_W, grad_X.
    """
    L = dense_propagation(g)
    if label_rows is None:
        label_rows = g.train_mask
    Y = _one_hot(g.labels, g.n_classes, label_rows)
    H, Z = forward(L, g.features, W)
    probs = Z[-1]
    loss = nll_loss(probs, Y, divisor=g.n)
    # fused softmax + NLL seed; zero-target rows contribute nothing
    M = (probs * Y.sum(axis=1, keepdims=True) - Y) / g.n
    grad_W = [None] * len(W)
    for l in range(len(W) - 1, -1, -1):
        G = L.T @ M                      # d loss / d (Z W) pulled through L
        grad_W[l] = Z[l].T @ G
        grad_Z = G @ W[l].T
        if l > 0:
            M = grad_Z * (H[l - 1] > 0)
    return {"H": H, "Z": Z, "loss": loss, "grad_W": grad_W, "grad_X": grad_Z}


def sampled_loss(g: GlobalGraph, W: list, sampled_ids: np.ndarray,
                 incl_prob: np.ndarray, normalize: bool = True,
                 label_rows=None, X_override=None) -> float:
    """Sampled-round loss evaluated densely: the ground truth for FD checks.

    ``sampled_ids`` are global node ids (sorted ascending), ``incl_prob``
    their inclusion probabilities.  The sampled operator restricts L to
    those rows/columns and divides each column u by p(u) when normalizing.
    The loss divides by n_S and targets rows in ``label_rows``.
    """
    L = dense_propagation(g)
    ids = np.asarray(sampled_ids)
    Ls = L[np.ix_(ids, ids)]
    if normalize:
        Ls = Ls / incl_prob[None, :]
    X = g.features if X_override is None else X_override
    if label_rows is None:
        label_rows = g.train_mask
    Y = _one_hot(g.labels[ids], g.n_classes, label_rows[ids])
    _, Z = forward(Ls, X[ids], W)
    return nll_loss(Z[-1], Y, divisor=len(ids))


def fd_grad(loss_fn, arrays: list, h: float = 1e-5):
    """Central finite differences of ``loss_fn`` w.r.t. every entry of every array.

    ``loss_fn`` takes the list of arrays and returns a scalar.  Arrays are
    perturbed in place and restored; returns gradients of matching shapes.
    """
    grads = []
    for a in arrays:
        ga = np.zeros_like(a)
        flat = a.ravel()
        gflat = ga.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn(arrays)
            flat[k] = orig - h
            down = loss_fn(arrays)
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * h)
        grads.append(ga)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| normalized by the reference magnitude of b."""
    scale = max(float(np.abs(b).max()), 1e-30)
    return float(np.abs(a - b).max() / scale)


def fd_rel_err(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> float:
    """Max per-entry |a-fd| / max(|a|+|fd|, floor), the usual gradcheck metric."""
    denom = np.maximum(np.abs(analytic) + np.abs(fd), floor)
    return float((np.abs(analytic - fd) / denom).max())


def train_sgd(g: GlobalGraph, W0: list, lr: float, steps: int):
    """Reference full-batch SGD loop; returns (W, losses per step)."""
    W = [w.copy() for w in W0]
    losses = []
    for _ in range(steps):
        out = forward_backward(g, W)
        losses.append(out["loss"])
        for l in range(len(W)):
            W[l] -= lr * out["grad_W"][l]
    return W, losses
