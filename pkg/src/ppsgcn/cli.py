"""Command-line front end.

Subcommands: train, eval, ablate, ledger-check, oracle-compare,
gen-synth, keygen.  Everything run-shaped reads the TOML config and
accepts ``--set section.key=value`` overrides.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import crypto, oracle, report, synth, trainer, transport
from .compute import ModelParams
from .sampling import full_round
from .trainer import TrainState


def _load(args):
    cfg = cfgmod.load_config(args.config)
    return cfgmod.apply_overrides(cfg, args.set or [])


def _save_state(state: TrainState, path):
    arrays = {f"W{l}": w for l, w in enumerate(state.params.W)}
    np.savez(path, dims=np.array(state.dims), n_classes=state.n_classes,
             iteration=state.iteration, **arrays)


def _load_state(path) -> TrainState:
    with np.load(path) as z:
        dims = [int(d) for d in z["dims"]]
        W = [np.array(z[f"W{l}"]) for l in range(len(dims) - 1)]
        params = ModelParams(dims=dims, W=W)
        return TrainState(params=params, moments=None,
                          iteration=int(z["iteration"]), dims=dims,
                          n_classes=int(z["n_classes"]))


def cmd_train(args) -> int:
    cfg = _load(args)
    tc = cfgmod.to_train_config(cfg)
    _, _, shards, blocks = cfgmod.load_partitioned(cfg)
    state, records = trainer.train(tc, shards, blocks)
    scores = trainer.evaluate(state, shards, blocks)
    os.makedirs(args.out, exist_ok=True)
    report.write_metrics_csv(records, os.path.join(args.out, "metrics.csv"))
    report.write_ledger_csv(state, os.path.join(args.out, "ledger.csv"))
    text = report.summary(state, records, scores)
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(text)
    _save_state(state, os.path.join(args.out, "state.npz"))
    print(text, end="")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    _, _, shards, blocks = cfgmod.load_partitioned(cfg)
    state = _load_state(args.state)
    scores = trainer.evaluate(state, shards, blocks)
    for split in ("train", "val", "test"):
        print(f"{split} micro-F1: {scores[split]:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    tc = cfgmod.to_train_config(cfg)
    _, _, shards, blocks = cfgmod.load_partitioned(cfg)
    table = trainer.run_ablation(tc, shards, blocks)
    print(f"{'variant':<14}{'val F1':>8}{'test F1':>9}{'loss':>10}")
    for name, row in table.items():
        print(f"{name:<14}{row['val_f1']:>8.4f}{row['test_f1']:>9.4f}"
              f"{row['final_loss']:>10.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(table, fh, indent=2)
    return 0


def cmd_ledger_check(args) -> int:
    cfg = _load(args)
    cfg["train"]["iterations"] = 1
    tc = cfgmod.to_train_config(cfg)
    _, _, shards, blocks = cfgmod.load_partitioned(cfg)
    state, _ = trainer.train(tc, shards, blocks)
    if tc.sampling:
        # reconstruct the sizes the single logged round actually used
        from .sampling import make_plan, sample_round
        plan = make_plan(shards, tc.batch_size, tc.distribution)
        n_s = sample_round(plan, seed=(tc.seed, 11, 0)).n_S
    else:
        n_s = sum(sh.n_i for sh in shards)
    res = transport.ledger_check(state.comm_ledger, state.mem_ledger,
                                 len(shards), state.dims, n_s)
    for name in ("comm", "activation_memory", "param_memory"):
        row = res[name]
        flag = "ok" if row["ok"] else "MISMATCH"
        print(f"{name:<18} measured={row['measured']:<12} "
              f"formula={row['formula']:<12} {flag}")
    return 0 if res["ok"] else 1


def cmd_oracle_compare(args) -> int:
    cfg = _load(args)
    tc = cfgmod.to_train_config(cfg)
    g, part, shards, blocks = cfgmod.load_partitioned(cfg)
    from .compute import ClientCompute
    n_classes = g.n_classes
    dims = [g.feature_dim, *tc.hidden_dims, n_classes]
    params = ModelParams.glorot(dims, tc.seed)
    clients = [ClientCompute(sh, bl, params, n_classes)
               for sh, bl in zip(shards, blocks)]
    rnd = full_round([sh.n_i for sh in shards])
    for c in clients:
        c.begin_round(rnd)
    m = len(clients)
    n_layers = len(dims) - 1
    H_dist = [[] for _ in range(m)]
    for l in range(n_layers):
        sends = [c.local_send_terms_forward(l) for c in clients]
        for i, c in enumerate(clients):
            remote = None
            for j in range(m):
                if j != i:
                    t = sends[j][i]
                    remote = t if remote is None else remote + t
            H_dist[i].append(c.combine_forward(l, remote))
    weights = np.array([sh.n_i for sh in shards], float) / g.n
    loss = float(np.dot(weights, [c.local_loss("full") for c in clients]))
    for c, w in zip(clients, weights):
        c.backward_seed(w / c.shard.n_i)
    grads = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        sends = [c.local_send_terms_backward(l) for c in clients]
        for i, c in enumerate(clients):
            remote = None
            for j in range(m):
                if j != i:
                    t = sends[j][i]
                    remote = t if remote is None else remote + t
            c.combine_backward(l, remote)
        grads[l] = sum(c.weight_gradient(l) for c in clients)
    ref = oracle.forward_backward(g, params.W)
    worst = 0.0
    for i in range(m):
        rows = part.owned[i]
        for l in range(n_layers):
            worst = max(worst, oracle.rel_err(H_dist[i][l], ref["H"][l][rows]))
    worst = max(worst, abs(loss - ref["loss"]) / max(abs(ref["loss"]), 1e-30))
    for l in range(n_layers):
        worst = max(worst, oracle.rel_err(grads[l], ref["grad_W"][l]))
    print(f"max relative error vs dense single-machine run: {worst:.3e} "
          f"(tolerance {args.tol:g})")
    return 0 if worst <= args.tol else 1


def cmd_gen_synth(args) -> int:
    if args.model != "sbm":
        print(f"unknown synthetic model {args.model!r}", file=sys.stderr)
        return 2
    spec = synth.SynthSpec(n=args.nodes, blocks=args.blocks, p_in=args.p_in,
                           p_out=args.p_out, dim=args.dim, sigma=args.sigma,
                           seed=args.seed)
    paths = synth.gen_synth(spec, args.out)
    for kind, p in paths.items():
        print(f"{kind}: {p}")
    return 0


def cmd_keygen(args) -> int:
    t0 = time.perf_counter()
    kp = crypto.keygen(args.bits, seed=args.seed)
    dt = time.perf_counter() - t0
    n_hex = f"{kp.public.n:x}"
    ok = kp.decrypt(kp.public.encrypt(12345)) == 12345
    print(f"modulus bits: {kp.public.n.bit_length()}")
    print(f"n: {n_hex[:32]}...{n_hex[-8:]}")
    print(f"self-test: {'ok' if ok else 'FAILED'} ({dt:.2f} s)")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ppsgcn",
        description="privacy-preserving sampled distributed GCN simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def runlike(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="TOML config path (defaults apply if omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        return p

    p = runlike("train", "run the training loop and write run artifacts")
    p.add_argument("--out", default="run_out", help="output directory")
    p.set_defaults(fn=cmd_train)

    p = runlike("eval", "evaluate a saved state full-batch")
    p.add_argument("--state", required=True, help="state.npz from train")
    p.set_defaults(fn=cmd_eval)

    p = runlike("ablate", "train the sampling/normalization variants")
    p.add_argument("--out", default=None, help="optional JSON table path")
    p.set_defaults(fn=cmd_ablate)

    p = runlike("ledger-check", "compare measured traffic to the closed forms")
    p.set_defaults(fn=cmd_ledger_check)

    p = runlike("oracle-compare", "full-batch distributed vs dense reference")
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(fn=cmd_oracle_compare)

    p = sub.add_parser("gen-synth", help="write a synthetic SBM dataset")
    p.add_argument("--model", default="sbm")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--blocks", type=int, required=True)
    p.add_argument("--p-in", type=float, dest="p_in", required=True)
    p.add_argument("--p-out", type=float, dest="p_out", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth_out")
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("keygen", help="generate and self-test a keypair")
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_keygen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
