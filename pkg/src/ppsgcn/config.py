"""TOML run configuration with dotted-key overrides.

Every knob has a default, so an empty file (or no file) is a valid
config.  ``--set section.key=value`` strings override anything, with the
value parsed according to the default's type.
"""

import copy

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import graph, synth
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "graph": {
        "nodes": "",
        "edges": "",
        "masks": "0.5/0.25/0.25",
        "split_seed": 0,
        "clients": 2,
        "partition": "",      # file path; empty = random assignment
        "partition_seed": 0,
        "synth": False,       # ignore file paths, generate an SBM instead
        "synth_nodes": 64,
        "synth_blocks": 4,
        "synth_p_in": 0.5,
        "synth_p_out": 0.05,
        "synth_dim": 16,
        "synth_sigma": 0.5,
        "synth_seed": 0,
    },
    "sampler": {
        "batch_size": 64,
        "distribution": "uniform",
    },
    "model": {
        "hidden_dims": [16],
        "dropout": 0.0,
    },
    "train": {
        "iterations": 100,
        "lr": 0.1,
        "optimizer": "sgd",
        "normalize": True,
        "sampling": True,
        "seed": 0,
        "eval_every": 0,
        "early_stop_patience": 0,
    },
    "crypto": {
        "modulus_bits": 512,
        "frac_bits": 40,
    },
    "transport": {
        "encrypt": False,
        "backend": "inproc",
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Read TOML at ``path`` (or just the defaults when None)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return _merge(DEFAULTS, data)


def _coerce(text: str, like) -> object:
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, list):
        inner = like[0] if like else 16
        return [_coerce(part, inner) for part in text.split(",") if part.strip()]
    return text


def apply_overrides(cfg: dict, pairs: list) -> dict:
    """Apply ``section.key=value`` strings on top of a loaded config."""
    out = copy.deepcopy(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        dotted, _, text = pair.partition("=")
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        out[section][key] = _coerce(text, DEFAULTS[section][key])
    return out


def to_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        iterations=cfg["train"]["iterations"],
        lr=cfg["train"]["lr"],
        optimizer=cfg["train"]["optimizer"],
        batch_size=cfg["sampler"]["batch_size"],
        hidden_dims=tuple(cfg["model"]["hidden_dims"]),
        dropout=cfg["model"]["dropout"],
        normalize=cfg["train"]["normalize"],
        sampling=cfg["train"]["sampling"],
        distribution=cfg["sampler"]["distribution"],
        encrypt=cfg["transport"]["encrypt"],
        seed=cfg["train"]["seed"],
        eval_every=cfg["train"]["eval_every"],
        early_stop_patience=cfg["train"]["early_stop_patience"],
        backend=cfg["transport"]["backend"],
        modulus_bits=cfg["crypto"]["modulus_bits"],
        frac_bits=cfg["crypto"]["frac_bits"],
    )


def load_graph(cfg: dict) -> graph.GlobalGraph:
    gc = cfg["graph"]
    if gc["synth"]:
        spec = synth.SynthSpec(n=gc["synth_nodes"], blocks=gc["synth_blocks"],
                               p_in=gc["synth_p_in"], p_out=gc["synth_p_out"],
                               dim=gc["synth_dim"], sigma=gc["synth_sigma"],
                               seed=gc["synth_seed"])
        split = tuple(float(x) for x in gc["masks"].split("/"))
        return synth.sbm_graph(spec, split=split, split_seed=gc["split_seed"])
    if not gc["nodes"] or not gc["edges"]:
        raise ConfigError("graph.nodes and graph.edges are required "
                          "(or set graph.synth = true)")
    return graph.build_global(gc["nodes"], gc["edges"], gc["masks"],
                              split_seed=gc["split_seed"])


def load_partitioned(cfg: dict):
    """Graph, partition, shards, and propagation blocks in one call."""
    g = load_graph(cfg)
    gc = cfg["graph"]
    if gc["partition"]:
        part = graph.load_partition_file(gc["partition"], g.n)
    else:
        part = graph.partition_random(g, gc["clients"], seed=gc["partition_seed"])
    shards = graph.shard(g, part)
    blocks = graph.build_laplacian_blocks(shards)
    return g, part, shards, blocks
