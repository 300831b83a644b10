"""Federated learning simulator comparing classifier-head and prototype-based inference."""

from .config import ExperimentConfig, parse_config
from .data import ClientShard, Dataset, PartitionSpec, dirichlet_partition, load_idx, subsample
from .metrics import (
    RoundRecord,
    TrafficLedger,
    bytes_of_params,
    evaluate_classifier,
    evaluate_local_baseline,
    evaluate_prototype,
)
from .nn import ModelArch, ModelParams, embed, forward, init_params, loss_and_grads, sgd_step
from .prototypes import (
    PrototypeSet,
    aggregate_global_prototypes,
    compute_local_prototypes,
    nearest_prototype_predict,
)
from .protocol import ClientState, RoundConfig, ServerState, fedavg_aggregate, local_update, run_round
from .runner import emit_outputs, run_experiment

__version__ = "0.1.0"
