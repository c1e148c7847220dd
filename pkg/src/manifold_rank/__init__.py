"""Diffusion ranking over mutual-kNN region graphs."""

from .core import (
    CapabilityError,
    DescriptorSet,
    FormatError,
    InputError,
    KernelParams,
    ManifoldRankError,
    NumericalError,
    kernel_similarity,
    load_descriptors,
    save_descriptors,
)
from .graph import KnnLists, NormalizedGraph, SparseAffinity, build_affinity, exact_knn, nn_descent_knn, normalize, truncate
from .solver import SolveOptions, SolveReport, solve, solve_cg, solve_dense_direct, solve_jacobi_iteration, solve_unnormalized
from .diffuse import PoolingSpec, QueryVector, RankingResult, aqe_baseline, build_query_vector, gmp_weights, rank, rerank_truncated
from .compact import GmmSpec, compact_dataset, compact_item
from .evaluation import GroundTruth, average_precision, mean_average_precision, rank_gain_report

__version__ = "0.1.0"
