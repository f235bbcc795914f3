"""End-to-end training orchestration over the message bus.

One iteration = one sample round shared by forward and backward, L
aggregated forward rounds, the sampled loss, L pairs of backward rounds
(activation adjoints, then the gradient all-reduce), and a synchronized
parameter update.  Model parameters and optimizer moments are replicated
on every client and must stay bit-identical; the trainer hashes replicas
after each update and aborts on drift.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import crypto
from .compute import ClientCompute, ComputeNumericsError, ModelParams
from .sampling import SamplePlan, SampleRound, full_round, make_plan, sample_round
from .transport import (SERVER, CommLedger, MemoryLedger, Message, Phase,
                        transport_backend)

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or activation."""


class ReplicaDriftError(RuntimeError):
    """Parameter replicas stopped being identical across clients."""


class UndefinedMetricError(ValueError):
    """A requested split contains no nodes."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100
    lr: float = 0.1
    optimizer: str = "sgd"
    batch_size: int = 64
    hidden_dims: tuple = (16,)
    dropout: float = 0.0
    normalize: bool = True
    sampling: bool = True
    distribution: str = "uniform"
    encrypt: bool = False
    seed: int = 0
    eval_every: int = 0
    early_stop_patience: int = 0
    backend: str = "inproc"
    modulus_bits: int = 512
    frac_bits: int = 40

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        # lr = 0 is allowed: the zero-step run is a useful control
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.early_stop_patience and not self.eval_every:
            raise ValueError("early stopping requires an eval cadence")


@dataclass
class TrainState:
    params: ModelParams
    moments: list
    iteration: int
    dims: list
    n_classes: int
    normalizations: int = 0
    comm_ledger: CommLedger = None
    mem_ledger: MemoryLedger = None


@dataclass(frozen=True)
class EpochRecord:
    iteration: int
    time_s: float
    loss: float
    grad_norm: float
    val_f1: float
    comm_scalars: int
    mem_scalars: int


def _derive_classes(shards) -> int:
    top = max(int(sh.Y.max()) for sh in shards)
    if top < 0:
        raise ValueError("no labeled nodes anywhere")
    return top + 1


def _new_moments(dims) -> list:
    return [(np.zeros((dims[l], dims[l + 1])), np.zeros((dims[l], dims[l + 1])))
            for l in range(len(dims) - 1)]


def _optim_step(cfg: TrainConfig, moments, layer: int, g: np.ndarray,
                step_count: int) -> np.ndarray:
    if cfg.optimizer == "sgd":
        return cfg.lr * g
    m1, m2 = moments[layer]
    m1 *= ADAM_B1
    m1 += (1 - ADAM_B1) * g
    m2 *= ADAM_B2
    m2 += (1 - ADAM_B2) * g * g
    mh = m1 / (1 - ADAM_B1 ** step_count)
    vh = m2 / (1 - ADAM_B2 ** step_count)
    return cfg.lr * mh / (np.sqrt(vh) + ADAM_EPS)


class _CryptoBox:
    """Per-run key material. Client keypairs and the shared gradient
    keypair live here, on the client side of the fence; the bus only
    ever sees the public halves."""

    def __init__(self, cfg: TrainConfig, m: int):
        self.codec = crypto.FixedPointCodec(frac_bits=cfg.frac_bits,
                                            max_terms=max(m, 2))
        self.client_kp = {i: crypto.keygen(cfg.modulus_bits, seed=cfg.seed * 131 + i)
                          for i in range(m)}
        self.grad_kp = crypto.keygen(cfg.modulus_bits, seed=cfg.seed * 131 + m + 17)
        self.pubkeys = {i: kp.public for i, kp in self.client_kp.items()}
        self.pubkeys["grad"] = self.grad_kp.public

    def seal(self, term: np.ndarray, dest) -> crypto.CipherMatrix:
        pk = self.pubkeys[dest]
        return crypto.encrypt_matrix(term, pk, self.codec, key_id=dest)

    def open_for(self, client: int, payload, shape) -> np.ndarray:
        kp = self.grad_kp if payload.key_id == "grad" else self.client_kp[client]
        return crypto.decrypt_matrix(payload, kp, self.codec).reshape(shape)


def _receive(payload, shape, client: int, box) -> np.ndarray:
    if isinstance(payload, crypto.CipherMatrix):
        return box.open_for(client, payload, shape)
    return np.asarray(payload, dtype=np.float64).reshape(shape)


def train(config: TrainConfig, shards: list, blocks: list,
          n_classes: int = None):
    """Run the training loop; returns (TrainState, list of EpochRecord)."""
    m = len(shards)
    if n_classes is None:
        n_classes = _derive_classes(shards)
    dims = [shards[0].X.shape[1], *config.hidden_dims, n_classes]
    params = ModelParams.glorot(dims, config.seed)
    clients = [ClientCompute(sh, bl, params, n_classes, config.dropout)
               for sh, bl in zip(shards, blocks)]
    state = TrainState(params=params.copy(), moments=_new_moments(dims),
                       iteration=0, dims=dims, n_classes=n_classes)
    client_moments = [_new_moments(dims) for _ in range(m)]

    box = _CryptoBox(config, m) if config.encrypt else None
    bus_kw = {"m": m, "encrypt": config.encrypt}
    if config.backend != "inproc":
        bus_kw["pubkeys"] = box.pubkeys if box else {}
    bus = transport_backend(config.backend, **bus_kw)
    mem = MemoryLedger()
    for c in clients:
        mem.note_params(c.client_id, c.params.scalar_count())

    plan = make_plan(shards, config.batch_size, config.distribution) \
        if config.sampling else None
    full_sizes = [sh.n_i for sh in shards]
    n_total = sum(full_sizes)
    mode = "sampled" if config.sampling else "full"

    records = []
    best_f1, stale_evals = -1.0, 0
    t_start = time.perf_counter()
    try:
        for t in range(config.iterations):
            try:
                loss, grad_norm = _iteration(config, clients, bus, mem, box,
                                             plan, full_sizes, n_total, mode,
                                             dims, t, state, client_moments)
            except ComputeNumericsError as exc:
                raise DivergenceError(f"iteration {t}: {exc}") from exc
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"iteration {t}: loss is {loss}; lower the learning rate")
            digests = {state.params.digest()} | \
                {c.params.digest() for c in clients}
            if len(digests) != 1:
                raise ReplicaDriftError(
                    f"iteration {t}: {len(digests)} distinct parameter replicas")
            state.iteration = t + 1

            val_f1 = float("nan")
            if config.eval_every and (t + 1) % config.eval_every == 0:
                val_f1 = evaluate(state, shards, blocks)["val"]
            comm = bus.ledger.totals(t)
            records.append(EpochRecord(
                iteration=t,
                time_s=time.perf_counter() - t_start,
                loss=loss,
                grad_norm=grad_norm,
                val_f1=val_f1,
                comm_scalars=comm["scalars"] + comm["ciphertexts"],
                mem_scalars=mem.activation_total() + mem.param_total()))
            if config.early_stop_patience and np.isfinite(val_f1):
                if val_f1 > best_f1:
                    best_f1, stale_evals = val_f1, 0
                else:
                    stale_evals += 1
                    if stale_evals > config.early_stop_patience:
                        break
    finally:
        bus.close()
    state.comm_ledger = bus.ledger
    state.mem_ledger = mem
    state.normalizations = sum(c.normalizations_applied for c in clients)
    return state, records


def _iteration(cfg, clients, bus, mem, box, plan, full_sizes, n_total, mode,
               dims, t, state, client_moments):
    m = len(clients)
    n_layers = len(dims) - 1
    if cfg.sampling:
        rnd = sample_round(plan, seed=(cfg.seed, 11, t))
    else:
        rnd = full_round(full_sizes)

    if cfg.sampling and m > 1:
        # every client announces its sampled ids; afterwards each client
        # holds the same round composition the trainer already has in rnd
        for c in clients:
            bus.post(Message(src=c.client_id, dest=SERVER,
                             phase=Phase.SAMPLE_BCAST, iteration=t, layer=0,
                             payload=np.asarray(rnd.sampled[c.client_id],
                                                dtype=np.int64)))
        bus.complete_round(Phase.SAMPLE_BCAST, t, 0)

    for c in clients:
        drng = None
        if cfg.dropout > 0:
            drng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 13, t, c.client_id]))
        c.begin_round(rnd, normalize=cfg.normalize, training=True,
                      dropout_rng=drng)
    sizes = rnd.sizes()

    # forward
    for l in range(n_layers):
        sends = [c.local_send_terms_forward(l) for c in clients]
        agg = {}
        if m > 1:
            for j, terms in enumerate(sends):
                for dest, term in terms.items():
                    payload = box.seal(term, dest) if box else term
                    bus.post(Message(src=j, dest=dest, phase=Phase.FWD,
                                     iteration=t, layer=l, payload=payload))
            agg = bus.complete_round(Phase.FWD, t, l)
        for i, c in enumerate(clients):
            remote = None
            if i in agg:
                remote = _receive(agg[i], (sizes[i], dims[l + 1]), i, box)
            c.combine_forward(l, remote)
    for c in clients:
        mem.note_activations(c.client_id, c.cache.activation_scalars())

    # loss
    if mode == "sampled":
        weights = sizes / sizes.sum()
        divisors = sizes
    else:
        weights = np.asarray(full_sizes, dtype=np.float64) / n_total
        divisors = np.asarray(full_sizes)
    contribs = [c.local_loss(mode) for c in clients]
    loss = float(np.dot(weights, contribs))
    for c, w, div in zip(clients, weights, divisors):
        c.backward_seed(w / float(div))

    # backward: adjoint rounds then gradient all-reduce, layer by layer
    grad_sq = 0.0
    for l in range(n_layers - 1, -1, -1):
        sends = [c.local_send_terms_backward(l) for c in clients]
        agg = {}
        if m > 1:
            for j, terms in enumerate(sends):
                for dest, term in terms.items():
                    payload = box.seal(term, dest) if box else term
                    bus.post(Message(src=j, dest=dest, phase=Phase.BWD_Z,
                                     iteration=t, layer=l, payload=payload))
            agg = bus.complete_round(Phase.BWD_Z, t, l)
        for i, c in enumerate(clients):
            remote = None
            if i in agg:
                remote = _receive(agg[i], (sizes[i], dims[l + 1]), i, box)
            c.combine_backward(l, remote)

        shape = (dims[l], dims[l + 1])
        if m > 1:
            for c in clients:
                g = c.weight_gradient(l)
                payload = box.seal(g, "grad") if box else g
                bus.post(Message(src=c.client_id, dest=SERVER,
                                 phase=Phase.BWD_W, iteration=t, layer=l,
                                 payload=payload))
            agg = bus.complete_round(Phase.BWD_W, t, l)
            totals = [_receive(agg[i], shape, i, box) for i in range(m)]
        else:
            totals = [clients[0].weight_gradient(l)]
        # each replica steps with its own decoded copy of the aggregate;
        # the post-update digest check proves they were identical
        for i, c in enumerate(clients):
            step = _optim_step(cfg, client_moments[i], l, totals[i], t + 1)
            c.params.W[l] -= step
        state.params.W[l] -= _optim_step(cfg, state.moments, l, totals[0], t + 1)
        grad_sq += float((totals[0] ** 2).sum())
    return loss, float(np.sqrt(grad_sq))


# ---------------------------------------------------------------------------
# evaluation


def micro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Pooled TP / (TP + (FP + FN)/2); equals accuracy for single-label
    multi-class, where every miss is one FP and one FN."""
    if len(y_true) == 0:
        raise UndefinedMetricError("empty split")
    tp = int((y_true == y_pred).sum())
    fp = fn = int((y_true != y_pred).sum())
    return tp / (tp + 0.5 * (fp + fn))


def evaluate(state: TrainState, shards: list, blocks: list = None) -> dict:
    """Full-batch distributed forward, micro-F1 per split."""
    from .graph import build_laplacian_blocks
    if blocks is None:
        blocks = build_laplacian_blocks(shards)
    m = len(shards)
    clients = [ClientCompute(sh, bl, state.params, state.n_classes)
               for sh, bl in zip(shards, blocks)]
    rnd = full_round([sh.n_i for sh in shards])
    for c in clients:
        c.begin_round(rnd)
    for l in range(len(state.dims) - 1):
        sends = [c.local_send_terms_forward(l) for c in clients]
        for i, c in enumerate(clients):
            remote = None
            for j in range(m):
                if j == i:
                    continue
                term = sends[j][i]
                remote = term if remote is None else remote + term
            c.combine_forward(l, remote)
    preds = [c.predictions() for c in clients]
    out = {}
    for split in ("train", "val", "test"):
        y_true, y_pred = [], []
        for sh, p in zip(shards, preds):
            mask = getattr(sh, f"{split}_mask") & (sh.Y >= 0)
            y_true.append(sh.Y[mask])
            y_pred.append(p[mask])
        y_true = np.concatenate(y_true)
        y_pred = np.concatenate(y_pred)
        if len(y_true) == 0:
            raise UndefinedMetricError(f"split {split!r} has no labeled nodes")
        out[split] = micro_f1(y_true, y_pred)
    return out


# ---------------------------------------------------------------------------
# experiment drivers


def run_ablation(config: TrainConfig, shards: list, blocks: list) -> dict:
    """Three shared-seed variants: the method, normalization off, and
    sampling off (full batch)."""
    variants = {
        "ppsgcn": config,
        "ppsgcn-star": replace(config, normalize=False),
        "ppsgcn-full": replace(config, sampling=False),
    }
    table = {}
    for name, cfg in variants.items():
        state, records = train(cfg, shards, blocks)
        scores = evaluate(state, shards, blocks)
        table[name] = {
            "val_f1": scores["val"],
            "test_f1": scores["test"],
            "final_loss": records[-1].loss if records else float("nan"),
            "iterations": len(records),
            "normalizations": state.normalizations,
        }
    return table


def convergence_probe(records: list, horizon: int = 100, factor: int = 4) -> dict:
    """Running-average gradient norms over two horizons.

    The variance-bounded stochastic gradient argument implies the running
    mean of the sampled-gradient norm shrinks with the horizon; compare
    the first ``horizon`` iterations with the first ``factor * horizon``.
    """
    need = horizon * factor
    if len(records) < need:
        raise ValueError(f"need at least {need} records, have {len(records)}")
    norms = np.array([r.grad_norm for r in records])
    short = float(norms[:horizon].mean())
    long = float(norms[:need].mean())
    return {"avg_grad_norm_short": short, "avg_grad_norm_long": long,
            "horizons": (horizon, need),
            "decreasing": long <= short}
