"""Tagged particle in a zero-range process: simulation, coupling and exact spectra."""

from .equilibrium import (
    ModelParams,
    critical_density,
    density,
    equilibrium,
    invert_density,
    partition_function,
    sample_configuration,
    sample_marginal,
)
from .errors import *  # noqa: F401,F403
from .model import (
    Configuration,
    JumpKernel,
    LatticeSpec,
    RateFunction,
    move_particle,
    parse_kernel_text,
    shift_frame,
    tagged_jump,
    validate_kernel,
    validate_rate,
)
from .ratexpr import RateExpr, eval_rate, parse_rate_expr
from .simulator import Model, run, run_ensemble

__version__ = "0.1.0"
