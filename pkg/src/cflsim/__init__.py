"""Deterministic simulation and verification harness for similarity-driven
clustered federated learning."""

from .cfl import (
    ClusterNode,
    OnlineCFLResult,
    ParameterTree,
    PermutationKey,
    RecursiveCFLResult,
    assign_client,
    mask,
    run_cfl_online,
    run_cfl_recursive,
    tree_from_dict,
    tree_to_dict,
    unmask,
)
from .clustering import (
    Bipartition,
    SimilarityMatrix,
    SplitConfig,
    SplitDecision,
    adjusted_rand_index,
    brute_force_bipartition,
    cross_bound,
    h_bound,
    optimal_bipartition,
    separation_gap,
    similarity_matrix,
    split_decision,
)
from .datagen import (
    ClientRecord,
    PopulationSpec,
    make_heldout_clients,
    make_population,
    quadratic_client,
    true_risk_gradient_oracle,
)
from .flcore import FLConfig, FLResult, RoundRecord, aggregate, client_update, run_fl
from .models import Batch, ModelSpec, accuracy, grad, init_params, loss, sgd_n
from .numerics import DegenerateVectorError, RandomStream, cosine, norm, weighted_mean
from .theoryharness import (
    StationaryConfig,
    compare_update_vs_gradient,
    phase_diagram,
    sample_stationary_config,
    verify_lemma1,
    verify_lemma2,
    verify_lemma3,
    verify_theorem,
)

__version__ = "0.1.0"
