"""Additively preconditioned trust-region training of small networks.

The package bundles the full trust-region stack (limited-memory SR1
approximations, an exact compact-form subproblem solver, radius policies),
the additive parameter-decomposition step built on top of it, reference
optimizers, and a deterministic experiment harness with a CLI.
"""

from .baselines import BaselineConfig, BaselineState, baseline_step, run_baseline
from .core import (
    AptsConfig,
    AptsStepRecord,
    FdlTrace,
    Partition,
    aggregate,
    apts_step,
    fdl_safeguard,
    local_solve,
    make_partition,
    run_apts,
)
from .data import BatchPlan, Dataset, load_idx, make_batches, make_image_blobs, make_synthetic
from .lsr1 import Lsr1Memory
from .model import (
    Batch,
    MlpSpec,
    ParamVector,
    evaluate,
    full_mask,
    init_params,
    loss_and_grad,
)
from .subproblem import SubproblemSolution, solve_first_order, solve_obs, solve_trs_dense
from .trloop import TrConfig, TrState, rho, tr_minimize, tr_step, update_radius

__version__ = "0.1.0"

__all__ = [
    "AptsConfig",
    "AptsStepRecord",
    "Batch",
    "BatchPlan",
    "BaselineConfig",
    "BaselineState",
    "Dataset",
    "FdlTrace",
    "Lsr1Memory",
    "MlpSpec",
    "ParamVector",
    "Partition",
    "SubproblemSolution",
    "TrConfig",
    "TrState",
    "aggregate",
    "apts_step",
    "baseline_step",
    "evaluate",
    "fdl_safeguard",
    "full_mask",
    "init_params",
    "load_idx",
    "local_solve",
    "loss_and_grad",
    "make_batches",
    "make_image_blobs",
    "make_partition",
    "make_synthetic",
    "rho",
    "run_apts",
    "run_baseline",
    "solve_first_order",
    "solve_obs",
    "solve_trs_dense",
    "tr_minimize",
    "tr_step",
    "update_radius",
]
