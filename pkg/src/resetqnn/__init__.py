"""Simulation and surrogate-driven training of measure-and-reset quantum
circuit classifiers."""

from .ansatz import (
    DESK_SPEC,
    FULL_SPEC,
    CircuitSpec,
    forward_exact,
    forward_exact_batch,
    forward_trajectory,
    measure_reset_channel,
    param_count,
    u_module,
)
from .channels import KrausSet, apply_kraus, check_factorization, layer_kraus, nonunitarity_witness
from .gradcheck import finite_diff, full_gradient, parameter_shift
from .pipeline import TrainConfig, evaluate, forward_pipeline, run_training
from .qstate import (
    DensityMatrix,
    GateMatrix,
    PureState,
    apply_gate,
    expect_z,
    new_zero_state,
    partial_trace,
    purity,
    to_density,
)
from .surrogate import SampleBatch, SurrogateNet, TrustRegion, descent_step, run_descent, sample_params

__version__ = "0.1.0"

__all__ = [
    "CircuitSpec",
    "DESK_SPEC",
    "DensityMatrix",
    "FULL_SPEC",
    "GateMatrix",
    "KrausSet",
    "PureState",
    "SampleBatch",
    "SurrogateNet",
    "TrainConfig",
    "TrustRegion",
    "apply_gate",
    "apply_kraus",
    "check_factorization",
    "descent_step",
    "evaluate",
    "expect_z",
    "finite_diff",
    "forward_exact",
    "forward_exact_batch",
    "forward_pipeline",
    "forward_trajectory",
    "full_gradient",
    "layer_kraus",
    "measure_reset_channel",
    "new_zero_state",
    "nonunitarity_witness",
    "param_count",
    "parameter_shift",
    "partial_trace",
    "purity",
    "run_descent",
    "run_training",
    "sample_params",
    "to_density",
    "u_module",
]
