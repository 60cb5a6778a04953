"""Finite dyadic lab for two-weight Tb theorems with well-localized operators."""
from .accretive_system import (
    AccretiveSystem,
    PairedSystem,
    partition,
    random_stopping_system,
    stopping_construction,
    verify_system,
)
from .carleson import CubeSequence, carleson_constant, embedding_ratio, sparsity_check, usf_ratio
from .instances import GenParams, Instance, generate
from .lattice import CubeId, Lattice
from .martingale import AccretiveFunction, check_accretive, decompose
from .measure import Measure, StepFunction
from .operators import (
    OperatorRep,
    check_wl_global,
    check_wl_local,
    doubling_constant,
    make_haar_multiplier,
    make_shift_candidate,
    operator_norm,
    testing_global,
    testing_local,
)
from .tracer import carleson_aQ_global, trace_appendix, trace_global, trace_local

__all__ = [
    "AccretiveFunction", "AccretiveSystem", "CubeId", "CubeSequence", "GenParams", "Instance",
    "Lattice", "Measure", "OperatorRep", "PairedSystem", "StepFunction", "carleson_aQ_global",
    "carleson_constant", "check_accretive", "check_wl_global", "check_wl_local", "decompose",
    "doubling_constant", "embedding_ratio", "generate", "make_haar_multiplier",
    "make_shift_candidate", "operator_norm", "partition", "random_stopping_system",
    "sparsity_check", "stopping_construction", "testing_global", "testing_local",
    "trace_appendix", "trace_global", "trace_local", "usf_ratio", "verify_system",
]
