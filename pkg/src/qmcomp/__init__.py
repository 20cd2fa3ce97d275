"""Exact desk-scale toolkit for one-shot measurement compression and randomness extraction."""

from .compression import CompressionScenario, Povm, run_protocol
from .convex_split import ConvexSplitInstance, verify_lemma
from .entropies import (
    dh_eps,
    dmax,
    dmax_smooth_upper,
    rel_entropy_and_variance,
    second_order_estimate,
    vn_rates,
)
from .extractor import Factorization, build_plan, compress_without_feedback, run_extractor
from .families import PairwiseFamily, embed_alphabet
from .stateio import load_state, save_state, state_from_json, state_to_json
from .states import (
    CLASSICAL,
    QUANTUM,
    CqState,
    DensityOperator,
    Register,
    StateVector,
    apply_isometry,
    basis_vector,
    cq_fidelity,
    cq_trace_distance,
    distance,
    fidelity,
    measure_register,
    purified_distance,
    purify,
    trace_distance,
)

__all__ = [
    "CLASSICAL",
    "QUANTUM",
    "CompressionScenario",
    "ConvexSplitInstance",
    "CqState",
    "DensityOperator",
    "Factorization",
    "PairwiseFamily",
    "Povm",
    "Register",
    "StateVector",
    "apply_isometry",
    "basis_vector",
    "build_plan",
    "compress_without_feedback",
    "cq_fidelity",
    "cq_trace_distance",
    "dh_eps",
    "distance",
    "dmax",
    "dmax_smooth_upper",
    "embed_alphabet",
    "fidelity",
    "load_state",
    "measure_register",
    "purified_distance",
    "purify",
    "rel_entropy_and_variance",
    "run_extractor",
    "run_protocol",
    "save_state",
    "second_order_estimate",
    "state_from_json",
    "state_to_json",
    "trace_distance",
    "verify_lemma",
    "vn_rates",
]

__version__ = "0.1.0"
