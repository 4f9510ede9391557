"""Diffusion models with learnable forward processes.

Library + CLI for training and evaluating diffusion models whose forward
process is itself a learnable invertible transformation, including restricted
variants (straight-trajectory penalty, obstacle avoidance) and bridges
between two data distributions.
"""

import jax

# Oracle tolerances (1e-6 relative) and bit-exact determinism assume float64.
jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    ConfigError,
    FlowDiffError,
    NumericError,
    SingularityError,
    UnsupportedModelError,
)
from .forward import (  # noqa: E402
    ForwardParameterization,
    LatentState,
    VolatilitySchedule,
    backward_sde_drift,
    conditional_drift,
    conditional_score,
    forward_sde_drift,
    inverse,
    log_density,
    make_parameterization,
    make_volatility,
    sample_noise,
    time_derivative,
    transform,
    volatility,
)

__version__ = "0.1.0"
