"""Fairness-aware graph message passing.

Message-passing layers derived from a joint smoothness + group-discrepancy
objective, a minimal reverse-mode tape to train small node classifiers
through them, fairness metrics, and empirical verification of the
demographic-parity bounds the construction satisfies.
"""

__version__ = "0.1.0"

from fairmp.errors import (DataError, FairmpError, NumericError,
                           TheoryViolation)
from fairmp.graph import (AttributedGraph, GroupPartition, NormalizedOperator,
                          build_normalized_adjacency, homophily_ratio,
                          partition_by_sensitive, sensitive_homophily_ratio)
from fairmp.kernels import (FairnessCoupling, KernelConfig,
                            build_coupling_full, build_coupling_sampled,
                            build_coupling_simplified, inter_group_similarity,
                            mmd, rbf_kernel)
from fairmp.model import (EpochRecord, ModelParams, TrainConfig, predict,
                          train)
from fairmp.propagation import GATParams, PropagationConfig

__all__ = [
    "AttributedGraph", "DataError", "EpochRecord", "FairmpError",
    "FairnessCoupling", "GATParams", "GroupPartition", "KernelConfig",
    "ModelParams", "NormalizedOperator", "NumericError", "PropagationConfig",
    "TheoryViolation", "TrainConfig", "build_coupling_full",
    "build_coupling_sampled", "build_coupling_simplified",
    "build_normalized_adjacency", "homophily_ratio",
    "inter_group_similarity", "mmd", "partition_by_sensitive", "predict",
    "rbf_kernel", "sensitive_homophily_ratio", "train", "__version__",
]
