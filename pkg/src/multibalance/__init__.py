"""Gradient balancing for multi-task learning on a small explicit-backprop model."""

from .balancers import (
    BALANCERS,
    BalanceOutcome,
    BalancerState,
    dbmtl_step,
    graddrop_step,
    gradvaccine_step,
    imtlg_step,
    mgda_step,
    moco_step,
    multibalance_step,
    pcgrad_step,
    sum_step,
    uncertainty_reweigh,
)
from .config import ConfigError, ExperimentConfig, load_config
from .harness import (
    DivergenceError,
    RunRecord,
    Trainer,
    emit_records,
    measure_throughput,
    parse_records,
    run_balanced,
    run_sweep,
    run_vanilla,
    train,
)
from .linalg import ConvergenceError, matvec, seeded_rng, spectral_norm, sym_eig_bounds
from .model import (
    Batch,
    SharedBottomModel,
    backward_apply_aggregate,
    backward_per_task,
    backward_representation_tap,
    forward,
    jacobian_repr,
    load_model,
    save_model,
)
from .simplex import brute_force_min_norm, min_norm_weights, project_simplex, regularized_weight_step
from .tasks import QuadraticMOOSpec, SyntheticTaskSpec, evaluate, generate_batches, ne_diff, normalized_entropy
from .theory import check_lemma1, check_theorem1, decrease_rate, estimate_residual, stationarity_gap

__version__ = "0.1.0"
