"""Function-space geometry of lightning and softmax self-attention networks.

Evaluate the networks in their equivalent formulations, generate and verify
parameter-symmetry orbits, classify singular and boundary weight settings,
and estimate the function-space dimension by Jacobian rank against the
closed-form predictions.
"""

from .core import (
    Architecture,
    DEFAULT_REL_TOL,
    DimensionMismatchError,
    GAP_RATIO_WARN,
    InvalidInputError,
    InvalidTransformError,
    LIGHTNING,
    NeurodimError,
    NoUniqueGaugeError,
    RankResult,
    ResourceBudgetError,
    RngStream,
    SOFTMAX,
    ScoreOverflowError,
    UnsupportedArchitectureError,
    ZeroFunctionError,
    matrix_from_json,
    matrix_to_json,
    numerical_rank,
    sample_gaussian_matrix,
)
from .attention import (
    AttnLayer,
    DeepWeights,
    NormalizedScores,
    QKVLayer,
    SoftmaxConfig,
    as_attn_layer,
    deep_forward,
    lightning_forward,
    normalized_scores,
    softmax_deep_forward,
    softmax_forward,
    weights_from_json,
    weights_to_json,
)
from .reparam import (
    IdentifiabilityReport,
    InterlayerGauge,
    LayerScaling,
    QKGauge,
    SkewPerturbation,
    TriadicPlan,
    VirtualWeights,
    apply_interlayer_gauge,
    apply_layer_scaling,
    apply_qk_gauge,
    apply_skew_perturbation,
    check_identifiability_conditions,
    compute_virtual_weights,
    layer_scaling_from_factors,
    recover_interlayer_gauge,
    recover_qk_gauge,
    skew_perturbation_from,
    symmetric_factors,
    triadic_forward,
    triadic_plan,
    virtual_forward,
)
from .geometry import (
    BOUNDARY,
    CoefficientVector,
    PointClass,
    RankOneFactors,
    SINGULAR_INTERIOR,
    SMOOTH,
    ZERO_FUNCTION,
    classify_point,
    coefficient_distance,
    extract_coefficients,
    fiber_partner,
    rank_one_factors,
)
from .dimension import (
    DimensionPrediction,
    DimensionReport,
    PARAM_SPACES,
    assemble_jacobian,
    directional_derivative,
    estimate_dimension,
    parameter_count,
    parameter_layout,
    predict_deep_lightning,
    predict_deep_softmax,
    predict_determinantal,
    predict_dimension,
    predict_single_layer,
    sample_deep_weights,
    sample_inputs,
)
from .verify import VerifyReport, aligned_distance, relative_deviation, run_suite

__version__ = "0.1.0"
