"""Banded balanced entropic-OT attention with a stopped-base Sinkhorn solve,
a short differentiable tail and its exact adjoint."""

from .adjoint import CotangentSet, backprop_scores_to_qkv, r2_backward, tail_adjoint_generic
from .certificates import (
    BiasCertificate,
    ContractionCertificate,
    OrbitReport,
    base_solve_vjp,
    bias_certificate,
    hilbert_distance,
    measure_hilbert_contraction,
    orbit_reconstruct,
    projective_coefficient,
    select_tail_depth,
)
from .errors import (
    InfeasibleSupport,
    InvalidTemperature,
    MissingBaseTrace,
    NotApplicable,
    SizeCapExceeded,
    StageMismatch,
    UndefinedRatio,
    UnsupportedDepth,
)
from .losses import LossSpec
from .problem import Problem, load_instance, random_problem, save_instance, surrogate_gradient
from .sinkhorn import DualTrace, EpsSchedule, ScoreField, solve, stopped_base_solve, tail_refine
from .support import (
    SupportMask,
    augment_dustbin,
    build_band_support,
    estimate_memory_ledger,
    explicit_support,
    tile_schedule,
)

__version__ = "0.1.0"
