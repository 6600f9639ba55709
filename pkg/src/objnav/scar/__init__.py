"""Target-probability predictor with a sparse and a dense residual branch."""

from .accounting import count_flops, count_memory
from .network import (
    ScarConfig,
    ScarNetwork,
    StageSpec,
    count_params,
    dense_baseline,
    forward,
    forward_pass,
    init_network,
    load_checkpoint,
    save_checkpoint,
    scar_mini,
)
from .search import Candidate, SearchSpace, arch_search, pareto_front
from .train import Adam, Sample, bce_loss, ground_truth, masked_targets, oracle_predictor, train, train_step

__all__ = [
    "Adam", "Candidate", "Sample", "ScarConfig", "ScarNetwork", "SearchSpace", "StageSpec", "arch_search",
    "bce_loss", "count_flops", "count_memory", "count_params", "dense_baseline", "forward", "forward_pass",
    "ground_truth", "init_network", "load_checkpoint", "masked_targets", "oracle_predictor", "pareto_front",
    "save_checkpoint", "scar_mini", "train", "train_step",
]
