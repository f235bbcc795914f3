"""Per-client GCN computation: exactly the matrix terms that cross the wire.

Forward, per layer: every client j multiplies its current activations into
its own cross blocks and ships one dense term per destination; the
destination adds the server-aggregated remote sum, scaled by its degree
scaler, to its local term.  Backward runs the adjoint of the same
operator: senders apply the UNSCALED restricted blocks to the incoming
gradient M, and the destination folds its 1/p(v) row scaling into the
aggregate.  That aggregate N serves double duty: multiplied by W^T it
continues the chain rule to the previous layer, and Z^T N is the client's
summand of the global weight gradient, so one communication round per
layer covers both.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .graph import ClientShard, LaplacianBlocks
from .sampling import SampleRound, restrict_blocks

LOG_CLAMP = 1e-12


class ComputeNumericsError(RuntimeError):
    """Non-finite values appeared in a forward or backward pass."""


@dataclass
class ModelParams:
    """Layer dimensions and weights; every client holds an identical replica."""

    dims: list
    W: list

    @classmethod
    def glorot(cls, dims, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        W = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            W.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        return cls(dims=list(dims), W=W)

    def copy(self) -> "ModelParams":
        return ModelParams(dims=list(self.dims), W=[w.copy() for w in self.W])

    @property
    def n_layers(self) -> int:
        return len(self.W)

    def scalar_count(self) -> int:
        return int(sum(w.size for w in self.W))

    def digest(self) -> str:
        h = hashlib.sha256()
        for w in self.W:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


@dataclass
class LossSpec:
    """How per-client losses combine into the global objective."""

    mode: str
    weights: np.ndarray

    def __post_init__(self):
        if self.mode not in ("full", "sampled"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError("client weights must be nonnegative and sum to 1")
        self.weights = w


@dataclass
class LayerCache:
    """Per-round cached matrices for one client.

    ``Z[l]`` is the (dropout-adjusted) input to layer l+1, so Z[0] is the
    restricted feature block; ``probs`` the softmax output; ``M`` the
    gradient w.r.t. the current layer's pre-activation while backward is
    in flight; ``N`` the latest aggregated layer-input gradient.
    """

    Z: list = field(default_factory=list)
    probs: np.ndarray = None
    M: np.ndarray = None
    N: np.ndarray = None
    local_term: np.ndarray = None

    def activation_scalars(self) -> int:
        return int(sum(z.size for z in self.Z))


def relu(x):
    return np.maximum(x, 0.0)


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class ClientCompute:
    """One client's propagation state across an iteration.

    Holds the shard, the propagation blocks, a full parameter replica,
    and the per-round restriction; exposes the send/combine operations
    the trainer drives through the message bus.
    """

    def __init__(self, shard: ClientShard, blocks: LaplacianBlocks,
                 params: ModelParams, n_classes: int, dropout: float = 0.0):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.shard = shard
        self.blocks = blocks
        self.params = params.copy()
        self.n_classes = n_classes
        self.dropout = dropout
        self.client_id = shard.client_id
        # one-hot targets over local nodes; only labeled train rows count
        Y = np.zeros((shard.n_i, n_classes))
        sel = shard.train_mask & (shard.Y >= 0)
        Y[np.flatnonzero(sel), shard.Y[sel]] = 1.0
        self.Y_full = Y
        self.cache = None
        self.restricted = None
        self.rows = None
        self.normalizations_applied = 0

    # -- round setup --------------------------------------------------------

    def begin_round(self, rnd: SampleRound, normalize: bool = True,
                    training: bool = False, dropout_rng=None):
        """Fix this iteration's restriction and reset the cache."""
        self.restricted = restrict_blocks(self.blocks, rnd, normalize)
        self.rows = rnd.sampled[self.client_id]
        self.cache = LayerCache(Z=[self.shard.X[self.rows]])
        self.training = training
        self._dropout_rng = dropout_rng
        if normalize:
            self.normalizations_applied += 1

    # -- forward ------------------------------------------------------------

    def local_send_terms_forward(self, layer: int) -> dict:
        """Dense term per destination: send[dest] @ (Z W), rows = dest's sample."""
        O = self.cache.Z[layer] @ self.params.W[layer]
        self.cache.local_term = self.restricted.L_local @ O
        return {dest: blk @ O for dest, blk in self.restricted.send.items()}

    def combine_forward(self, layer: int, remote_sum) -> np.ndarray:
        """H = local + scaler * aggregate; activation and dropout as configured."""
        H = self.cache.local_term
        if remote_sum is not None:
            H = H + self.restricted.scaler[:, None] * remote_sum
        if not np.isfinite(H).all():
            raise ComputeNumericsError(
                f"client {self.client_id}: non-finite forward activation "
                f"at layer {layer}")
        if layer == self.params.n_layers - 1:
            self.cache.probs = softmax_rows(H)
        else:
            Z = relu(H)
            if self.training and self.dropout > 0.0:
                keep = self._dropout_rng.random(Z.shape) >= self.dropout
                Z = Z * keep / (1.0 - self.dropout)
            self.cache.Z.append(Z)
        return H

    # -- loss and backward --------------------------------------------------

    def local_loss(self, mode: str) -> float:
        """Mean NLL over this round's rows; divisor |V_S_i| or n_i by mode."""
        Y = self.Y_full[self.rows]
        logp = np.log(np.clip(self.cache.probs, LOG_CLAMP, None))
        divisor = len(self.rows) if mode == "sampled" else self.shard.n_i
        return float(-(Y * logp).sum() / divisor)

    def backward_seed(self, coeff: float):
        """M^L = coeff (softmax - Y) on labeled rows, zero elsewhere.

        ``coeff`` is the client's loss weight divided by its divisor; no
        cross-client term exists because foreign losses do not depend on
        this client's output block.
        """
        Y = self.Y_full[self.rows]
        labeled = Y.sum(axis=1, keepdims=True)
        self.cache.M = coeff * (self.cache.probs * labeled - Y)

    def local_send_terms_backward(self, layer: int) -> dict:
        """Adjoint send terms: UNSCALED restricted blocks applied to M."""
        M = self.cache.M
        self.cache.local_term = self.restricted.L_local_raw @ M
        return {dest: blk @ M for dest, blk in self.restricted.send_raw.items()}

    def combine_backward(self, layer: int, remote_sum) -> None:
        """Aggregate to N = diag(1/p)(local + scaler * remote); step M back."""
        N = self.cache.local_term
        if remote_sum is not None:
            N = N + self.restricted.scaler[:, None] * remote_sum
        N = self.restricted.inv_p[:, None] * N
        if not np.isfinite(N).all():
            raise ComputeNumericsError(
                f"client {self.client_id}: non-finite backward aggregate "
                f"at layer {layer}")
        self.cache.N = N
        if layer > 0:
            grad_Z = N @ self.params.W[layer].T
            Zin = self.cache.Z[layer]
            # relu mask and dropout chain in one step: an entry survived both
            # iff the cached input is strictly positive
            if self.training and self.dropout > 0.0:
                self.cache.M = grad_Z * (Zin > 0) / (1.0 - self.dropout)
            else:
                self.cache.M = grad_Z * (Zin > 0)

    def weight_gradient(self, layer: int) -> np.ndarray:
        """This client's summand of the global gradient: Z^T N."""
        return self.cache.Z[layer].T @ self.cache.N

    def gradient_wrt_input(self) -> np.ndarray:
        """After the layer-0 backward round: d loss / d X on sampled rows."""
        return self.cache.N @ self.params.W[0].T

    def apply_update(self, layer: int, grad: np.ndarray, lr: float):
        self.params.W[layer] -= lr * grad

    def predictions(self) -> np.ndarray:
        return np.argmax(self.cache.probs, axis=1)
