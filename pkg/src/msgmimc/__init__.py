"""Multiple semi-coarsened multigrid and unbiased multi-index Monte Carlo with sample recycling.

Modules
-------
grid
    Semi-coarsened grids, grid functions and transfer operators.
field
    Matérn covariance and circulant-embedding sampling of lognormal fields.
pde
    Five-point discretisation, direct solves and quantities of interest.
msg
    MSG cycles, the F-cycle and a standard-coarsening baseline.
mimc
    The unbiased estimator, rate fits and the recycling cost factor.
cli
    Experiment driver (``msgmimc`` console script).
"""

from .field import CovarianceSpec, FieldRealization, HyperPrior, realize, stream
from .grid import GridFn, GridLevel
from .mimc import (
    EstimatorConfig,
    IndexPMF,
    PDEProblem,
    SyntheticProblem,
    cost_accounting,
    cost_reduction_factor,
    delta_tensor,
    fit_rates,
    run_estimator,
)
from .msg import CycleConfig, MgHierarchy, MsgHierarchy, SolverError, fmsg_solve, msg_f_cycle, msg_solve
from .pde import QOIS, QoISpec, assemble, direct_solve

__version__ = "0.1.0"

__all__ = [
    "QOIS",
    "CovarianceSpec",
    "CycleConfig",
    "EstimatorConfig",
    "FieldRealization",
    "GridFn",
    "GridLevel",
    "HyperPrior",
    "IndexPMF",
    "MgHierarchy",
    "MsgHierarchy",
    "PDEProblem",
    "QoISpec",
    "SolverError",
    "SyntheticProblem",
    "assemble",
    "cost_accounting",
    "cost_reduction_factor",
    "delta_tensor",
    "direct_solve",
    "fit_rates",
    "fmsg_solve",
    "msg_f_cycle",
    "msg_solve",
    "realize",
    "run_estimator",
    "stream",
]
