"""Learning approximately optimal feedback laws for control-affine problems.

Submodules:

* ``basis``: orthonormal tensor-product polynomial ansatz.
* ``problem``: control problems and the obstacle benchmark.
* ``simulate``: closed-loop rollouts, escape monitoring, perturbation bounds.
* ``adjoint``: exact gradients of the discretized closed-loop cost.
* ``reference``: open-loop reference solutions and cached datasets.
* ``learn``: averaged-cost learning, value-gradient regressions, trainer.
* ``harness``: experiment configuration, sweeps and metrics.
"""
from .basis import Basis, IndexSet, OutOfDomainError, build_basis, index_set, load_model, save_model
from .problem import ControlProblem, ObstacleParams, gamma_smooth_threshold, obstacle_problem
from .simulate import Trajectory, check_stability, rollout
from .adjoint import grad_cost_discrete
from .reference import Dataset, ReferenceSolution, generate_dataset, solve_open_loop
from .learn import Setting, TrainConfig, TrainRun, train

__all__ = [
    "Basis",
    "ControlProblem",
    "Dataset",
    "IndexSet",
    "ObstacleParams",
    "OutOfDomainError",
    "ReferenceSolution",
    "Setting",
    "TrainConfig",
    "TrainRun",
    "Trajectory",
    "build_basis",
    "check_stability",
    "gamma_smooth_threshold",
    "generate_dataset",
    "grad_cost_discrete",
    "index_set",
    "load_model",
    "obstacle_problem",
    "rollout",
    "save_model",
    "solve_open_loop",
    "train",
]
