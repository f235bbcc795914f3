"""Privacy-preserving distributed GCN training over partitioned graphs.

A star-topology simulator: m clients each hold a shard of one global
graph and jointly train a GCN by exchanging propagation terms through a
central server, optionally under additively homomorphic encryption, with
subgraph sampling and exact communication/memory accounting.
"""

__version__ = "0.1.0"

from .graph import (
    GlobalGraph,
    Partition,
    ClientShard,
    LaplacianBlocks,
    build_global,
    from_arrays,
    partition_random,
    load_partition_file,
    shard,
    build_laplacian_blocks,
)
from .synth import SynthSpec, sbm_graph, gen_synth
from .sampling import SamplePlan, SampleRound, make_plan, sample_round, full_round
from .compute import ModelParams, LossSpec, ClientCompute, ComputeNumericsError
from .crypto import (
    PaillierKeypair,
    PaillierPublicKey,
    FixedPointCodec,
    CipherMatrix,
    keygen,
    he_add,
    encrypt_matrix,
    decrypt_matrix,
    cm_add,
    aggregate_ciphertexts,
    secure_aggregate,
)
from .transport import (
    SERVER,
    Phase,
    Message,
    CommLedger,
    MemoryLedger,
    InprocBus,
    TcpBus,
    transport_backend,
    ledger_check,
)
from .trainer import (
    TrainConfig,
    TrainState,
    EpochRecord,
    train,
    evaluate,
    micro_f1,
    run_ablation,
    convergence_probe,
)
from .config import load_config, apply_overrides, to_train_config, load_partitioned

__all__ = [
    "GlobalGraph",
    "Partition",
    "ClientShard",
    "LaplacianBlocks",
    "build_global",
    "from_arrays",
    "partition_random",
    "load_partition_file",
    "shard",
    "build_laplacian_blocks",
    "SynthSpec",
    "sbm_graph",
    "gen_synth",
    "SamplePlan",
    "SampleRound",
    "make_plan",
    "sample_round",
    "full_round",
    "ModelParams",
    "LossSpec",
    "ClientCompute",
    "ComputeNumericsError",
    "PaillierKeypair",
    "PaillierPublicKey",
    "FixedPointCodec",
    "CipherMatrix",
    "keygen",
    "he_add",
    "encrypt_matrix",
    "decrypt_matrix",
    "cm_add",
    "aggregate_ciphertexts",
    "secure_aggregate",
    "SERVER",
    "Phase",
    "Message",
    "CommLedger",
    "MemoryLedger",
    "InprocBus",
    "TcpBus",
    "transport_backend",
    "ledger_check",
    "TrainConfig",
    "TrainState",
    "EpochRecord",
    "train",
    "evaluate",
    "micro_f1",
    "run_ablation",
    "convergence_probe",
    "load_config",
    "apply_overrides",
    "to_train_config",
    "load_partitioned",
    "__version__",
]
