"""Closed-form dimension predictors and the stochastic Jacobian-rank estimator.

The function space realized by an architecture has a dimension that closed
forms predict for single layers and for deep bottleneck networks (the
softmax value exceeds the lightning one by the layer count, since
normalization removes the per-layer scaling symmetry).  The estimator
checks those predictions numerically: it restricts the network to a finite
random input set, differentiates the parametrization there with exact
forward-mode propagation, and takes the numerical rank of the stacked
Jacobian.

Differentiation is exact forward mode (tangents carried through every
evaluator by the product, quotient, and chain rules); finite differences
are kept only as a test oracle because the maps are polynomial of degree
3**l and step choice is fragile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnLayer, DeepWeights, QKVLayer, SoftmaxConfig
from .core import (
    DEFAULT_REL_TOL,
    Architecture,
    DimensionMismatchError,
    InvalidInputError,
    LIGHTNING,
    RankResult,
    RngStream,
    SOFTMAX,
    ScoreOverflowError,
    UnsupportedArchitectureError,
    numerical_rank,
    sample_gaussian_matrix,
    validate_token_matrix,
)
from .reparam import VirtualWeights, compute_virtual_weights

PARAM_SPACES = ("raw_qkv", "attn_v", "virtual")

_MAX_EXP_ARG = float(np.log(np.finfo(np.float64).max))

SINGLE_LAYER_LIGHTNING = "single_layer_lightning"
SINGLE_LAYER_SOFTMAX = "single_layer_softmax"
DEEP_LIGHTNING = "deep_lightning"
DEEP_SOFTMAX = "deep_softmax"
DETERMINANTAL = "determinantal"


@dataclass(frozen=True)
class DimensionPrediction:
    """A closed-form dimension value with its per-term breakdown."""

    value: int
    formula: str
    terms: dict
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.value != sum(self.terms.values()):
            raise InvalidInputError("prediction terms do not sum to the value")

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "formula": self.formula,
            "terms": dict(self.terms),
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class DimensionReport:
    """Estimated rank next to the matching closed-form prediction."""

    arch: Architecture
    param_space: str
    n_inputs: int
    seed: int
    rel_tol: float
    estimate: RankResult
    prediction: DimensionPrediction | None
    agree: bool | None
    warnings: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "arch": self.arch.to_json(),
            "model": self.arch.model,
            "param_space": self.param_space,
            "N": self.n_inputs,
            "seed": self.seed,
            "rel_tol": self.rel_tol,
            "estimated": self.estimate.rank,
            "expected": None if self.prediction is None else self.prediction.value,
            "agree": self.agree,
            "singular_values": [float(s) for s in self.estimate.singular_values],
            "gap_ratio": float(self.estimate.gap_ratio),
            "warnings": list(self.warnings),
        }


def predict_determinantal(d: int, a: int) -> DimensionPrediction:
    """Dimension of the d x d matrices of rank at most a: alpha * (2d - alpha)."""
    if d < 1 or a < 1:
        raise InvalidInputError("dimensions must be >= 1")
    alpha = min(a, d)
    return DimensionPrediction(
        value=alpha * (2 * d - alpha),
        formula=DETERMINANTAL,
        terms={"rank_constrained_matrices": alpha * (2 * d - alpha)},
    )


def predict_single_layer(d: int, d_out: int, a: int, model: str = LIGHTNING) -> DimensionPrediction:
    """Single-layer dimension: 2ad + dd' - a^2 - 1 when a <= d, else d^2 + dd' - 1.

    Both branches are the rank-constrained attention matrices plus the value
    map, minus one global rescaling; the softmax variant keeps no rescaling
    symmetry, so its value is larger by exactly one.
    """
    if d < 1 or d_out < 1 or a < 1:
        raise InvalidInputError("dimensions must be >= 1")
    warnings = []
    if not ((d >= 2 and d_out >= 2) or (d >= 2 and a >= 2)):
        warnings.append("outside the regime d, d' >= 2 or d, a >= 2; the closed form may not apply")
    alpha = min(a, d)
    terms = {
        "attention_matrices": 2 * alpha * d - alpha * alpha,
        "value_map": d * d_out,
    }
    if model == LIGHTNING:
        terms["global_rescaling"] = -1
        formula = SINGLE_LAYER_LIGHTNING
    elif model == SOFTMAX:
        formula = SINGLE_LAYER_SOFTMAX
    else:
        raise InvalidInputError(f"unknown model {model!r}")
    return DimensionPrediction(
        value=sum(terms.values()), formula=formula, terms=terms, warnings=tuple(warnings)
    )


def _deep_prediction(arch: Architecture, formula: str) -> DimensionPrediction:
    if arch.n_layers < 2:
        raise UnsupportedArchitectureError(
            "deep formulas need at least two layers; use predict_single_layer"
        )
    delta = arch.bottleneck_width()
    if delta is None:
        raise UnsupportedArchitectureError(
            "bottleneck hypothesis violated: interior dimensions must share one "
            "width no larger than the outer dimensions"
        )
    warnings = []
    if delta < 2:
        warnings.append("interior width below 2; the closed form may not apply")
    if any(a < 2 for a in arch.attn_dims):
        warnings.append("an attention dimension is below 2; the closed form may not apply")
    if arch.tokens < 3:
        warnings.append("fewer than 3 tokens; the closed form may not apply")
    alphas = arch.alphas
    terms = {
        "first_layer_attention": 2 * alphas[0] * arch.dims[0] - alphas[0] ** 2,
        "value_chain": delta * (arch.dims[0] + arch.dims[-1]) - delta * delta,
        "deeper_attention": sum(2 * a * delta - a * a for a in alphas[1:]),
    }
    if formula == DEEP_LIGHTNING:
        terms["layer_rescalings"] = -arch.n_layers
    return DimensionPrediction(
        value=sum(terms.values()), formula=formula, terms=terms, warnings=tuple(warnings)
    )


def predict_deep_lightning(arch: Architecture) -> DimensionPrediction:
    """Deep lightning dimension for bottleneck architectures."""
    return _deep_prediction(arch, DEEP_LIGHTNING)


def predict_deep_softmax(arch: Architecture) -> DimensionPrediction:
    """Deep softmax dimension: the lightning value plus the layer count."""
    return _deep_prediction(arch, DEEP_SOFTMAX)


def predict_dimension(arch: Architecture, param_space: str = "raw_qkv") -> DimensionPrediction | None:
    """Route to the closed form matching an architecture and parameter space.

    Unconstrained attention matrices behave like full query/key width, so
    the attn_v space predicts with each attention dimension replaced by the
    layer's input dimension; the virtual space has a closed form only for
    single layers (where it coincides with attn_v).  None means no formula
    is claimed for the configuration.
    """
    if param_space not in PARAM_SPACES:
        raise InvalidInputError(f"unknown parameter space {param_space!r}")
    if param_space in ("attn_v", "virtual"):
        if arch.n_layers == 1:
            return predict_single_layer(
                arch.dims[0], arch.dims[1], arch.dims[0], model=arch.model
            )
        if param_space == "virtual":
            return None
        arch = Architecture(
            n_layers=arch.n_layers,
            dims=arch.dims,
            attn_dims=arch.dims[:-1],
            tokens=arch.tokens,
            model=arch.model,
        )
    if arch.n_layers == 1:
        return predict_single_layer(arch.dims[0], arch.dims[1], arch.attn_dims[0], model=arch.model)
    try:
        if arch.model == SOFTMAX:
            return predict_deep_softmax(arch)
        return predict_deep_lightning(arch)
    except UnsupportedArchitectureError:
        return None


def sample_deep_weights(arch: Architecture, seed: int) -> DeepWeights:
    """Standard-normal query/key/value weights from the named weight stream."""
    counter = 0
    layers = []
    for i in range(arch.n_layers):
        d_in, d_out, a = arch.dims[i], arch.dims[i + 1], arch.attn_dims[i]
        q = sample_gaussian_matrix(a, d_in, RngStream(seed, "weights", counter))
        k = sample_gaussian_matrix(a, d_in, RngStream(seed, "weights", counter + 1))
        v = sample_gaussian_matrix(d_out, d_in, RngStream(seed, "weights", counter + 2))
        counter += 3
        layers.append(QKVLayer(Q=q, K=k, V=v))
    return DeepWeights(arch=arch, layers=tuple(layers))


def sample_inputs(arch: Architecture, n_inputs: int, seed: int) -> list[np.ndarray]:
    """Standard-normal token matrices from the named input stream."""
    if n_inputs < 1:
        raise InvalidInputError("need at least one input sample")
    return [
        sample_gaussian_matrix(arch.dims[0], arch.tokens, RngStream(seed, "inputs", j))
        for j in range(n_inputs)
    ]


# ---------------------------------------------------------------------------
# Forward-mode kernels.  All kernels broadcast over leading batch axes, so
# one code path serves both single-input derivatives and stacked Jacobian
# assembly.
# ---------------------------------------------------------------------------


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _lightning_layer_jvp(A, V, X, dA, dV, dX):
    Xt, dXt = _swap(X), _swap(dX)
    G = Xt @ A @ X
    dG = dXt @ A @ X + Xt @ dA @ X + Xt @ A @ dX
    Y = V @ X @ G
    dY = dV @ X @ G + V @ dX @ G + V @ X @ dG
    return Y, dY


def _softmax_layer_jvp(A, V, X, dA, dV, dX, tau):
    Xt, dXt = _swap(X), _swap(dX)
    B = Xt @ A @ X  # entry (i, j) scores token i against token j
    scaled = B / tau
    peak = float(scaled.max())
    if peak > _MAX_EXP_ARG:
        where = np.unravel_index(int(np.argmax(scaled)), scaled.shape)
        raise ScoreOverflowError(
            f"attention score {peak * tau:.6g} at index {tuple(int(w) for w in where)} "
            f"exceeds the exp range at tau={tau:.6g}; increase tau"
        )
    S = np.exp(scaled)
    dB = dXt @ A @ X + Xt @ dA @ X + Xt @ A @ dX
    dS = S * dB / tau
    zeta = S.sum(axis=-1)
    dzeta = dS.sum(axis=-1)
    VX = V @ X
    dVX = dV @ X + V @ dX
    N = VX @ _swap(S)
    dN = dVX @ _swap(S) + VX @ _swap(dS)
    Y = N / zeta[..., None, :]
    dY = dN / zeta[..., None, :] - Y * (dzeta / zeta)[..., None, :]
    return Y, dY


def _deep_chain_jvp(attn_layers, tangents, X, dX, model, tau):
    """Propagate (value, tangent) through the layer chain for either model."""
    Y, dY = X, dX
    for (A, V), (dA, dV) in zip(attn_layers, tangents):
        if model == LIGHTNING:
            Y, dY = _lightning_layer_jvp(A, V, Y, dA, dV, dY)
        else:
            Y, dY = _softmax_layer_jvp(A, V, Y, dA, dV, dY, tau)
    return Y, dY


def _virtual_chain_jvp(vw: VirtualWeights, dforms, dreadout, X, model, tau):
    """Propagate tangents through the path-weight recursion on virtual weights.

    The layer outputs stay of the form readout_i . X . R with a t x t
    path-weight matrix R, so the whole network evaluates from the forms and
    the readout alone, for both the lightning and the normalized model.
    """
    t = X.shape[-1]
    Xt = _swap(X)
    grams = [Xt @ m @ X for m in vw.forms]
    dgrams = [Xt @ dm @ X for dm in dforms]
    shape = X.shape[:-2] + (t, t)
    R = np.zeros(shape)
    R[...] = np.eye(t)
    dR = np.zeros(shape)
    for G, dG in zip(grams, dgrams):
        Rt, dRt = _swap(R), _swap(dR)
        if model == LIGHTNING:
            R, dR = (
                R @ Rt @ G @ R,
                dR @ Rt @ G @ R + R @ dRt @ G @ R + R @ Rt @ dG @ R + R @ Rt @ G @ dR,
            )
        else:
            B = Rt @ G @ R
            dB = dRt @ G @ R + Rt @ dG @ R + Rt @ G @ dR
            scaled = B / tau
            peak = float(scaled.max())
            if peak > _MAX_EXP_ARG:
                raise ScoreOverflowError(
                    f"attention score {peak * tau:.6g} exceeds the exp range at "
                    f"tau={tau:.6g}; increase tau"
                )
            S = np.exp(scaled)
            dS = S * dB / tau
            zeta = S.sum(axis=-1)
            dzeta = dS.sum(axis=-1)
            P = S / zeta[..., None]
            dP = dS / zeta[..., None] - P * (dzeta / zeta)[..., None]
            R, dR = R @ _swap(P), dR @ _swap(P) + R @ _swap(dP)
    Y = vw.readout @ X @ R
    dY = dreadout @ X @ R + vw.readout @ X @ dR
    return Y, dY


# ---------------------------------------------------------------------------
# Parameter flattening: layer-major, then matrix, then row-major entries.
# ---------------------------------------------------------------------------


def parameter_layout(weights) -> list[tuple[str, int, tuple[int, int]]]:
    """Canonical (name, layer, shape) order of the differentiated parameters."""
    if isinstance(weights, DeepWeights):
        layout = []
        for i, layer in enumerate(weights.layers):
            if isinstance(layer, QKVLayer):
                layout += [("Q", i, layer.Q.shape), ("K", i, layer.K.shape), ("V", i, layer.V.shape)]
            else:
                layout += [("A", i, layer.A.shape), ("V", i, layer.V.shape)]
        return layout
    if isinstance(weights, VirtualWeights):
        layout = [("M", i, m.shape) for i, m in enumerate(weights.forms)]
        layout.append(("L", -1, weights.readout.shape))
        return layout
    raise InvalidInputError(f"expected DeepWeights or VirtualWeights, got {type(weights).__name__}")


def parameter_count(weights) -> int:
    return sum(r * c for _, _, (r, c) in parameter_layout(weights))


def _unflatten(direction: np.ndarray, layout) -> list[np.ndarray]:
    pieces = []
    offset = 0
    for _, _, (r, c) in layout:
        pieces.append(direction[offset : offset + r * c].reshape(r, c))
        offset += r * c
    return pieces


def _jvp(weights, direction: np.ndarray, X, dX, model: str, tau: float):
    """Value and directional derivative of the forward map, batch-aware."""
    layout = parameter_layout(weights)
    total = sum(r * c for _, _, (r, c) in layout)
    direction = np.asarray(direction, dtype=np.float64).reshape(-1)
    if direction.size != total:
        raise DimensionMismatchError(
            f"direction has {direction.size} entries but the parameter space has {total}"
        )
    pieces = _unflatten(direction, layout)
    if isinstance(weights, VirtualWeights):
        dforms = pieces[: weights.n_layers]
        dreadout = pieces[-1]
        return _virtual_chain_jvp(weights, dforms, dreadout, X, model, tau)
    attn_layers, tangents = [], []
    cursor = 0
    for layer in weights.layers:
        if isinstance(layer, QKVLayer):
            dQ, dK, dV = pieces[cursor : cursor + 3]
            cursor += 3
            A = layer.K.T @ layer.Q
            dA = dK.T @ layer.Q + layer.K.T @ dQ
            attn_layers.append((A, layer.V))
            tangents.append((dA, dV))
        else:
            dA, dV = pieces[cursor : cursor + 2]
            cursor += 2
            attn_layers.append((layer.A, layer.V))
            tangents.append((dA, dV))
    return _deep_chain_jvp(attn_layers, tangents, X, dX, model, tau)


def directional_derivative(
    weights,
    direction,
    X,
    model: str | None = None,
    cfg: SoftmaxConfig | None = None,
) -> np.ndarray:
    """Exact derivative of the forward map along one parameter direction.

    ``weights`` may be DeepWeights (raw or attention-matrix form) or
    VirtualWeights; the direction indexes the matching canonical parameter
    flattening.  The result is linear in the direction.
    """
    X = validate_token_matrix(X)
    if model is None:
        if isinstance(weights, DeepWeights):
            model = weights.arch.model
        else:
            model = LIGHTNING
    if model not in (LIGHTNING, SOFTMAX):
        raise InvalidInputError(f"unknown model {model!r}")
    tau = (cfg or SoftmaxConfig()).tau
    _, dY = _jvp(weights, direction, X, np.zeros_like(X), model, tau)
    if not np.all(np.isfinite(dY)):
        raise ScoreOverflowError("directional derivative overflowed")
    return dY


def assemble_jacobian(
    weights,
    inputs,
    model: str | None = None,
    cfg: SoftmaxConfig | None = None,
) -> np.ndarray:
    """Stack directional derivatives into the (N * t * d_out) x P Jacobian.

    Column p holds the derivative along the p-th canonical parameter
    direction, flattened row-major per input and stacked over the inputs in
    order; the result is deterministic given weights and inputs.
    """
    if not inputs:
        raise InvalidInputError("need at least one input")
    stacked = np.stack([validate_token_matrix(x) for x in inputs])
    if model is None:
        model = weights.arch.model if isinstance(weights, DeepWeights) else LIGHTNING
    tau = (cfg or SoftmaxConfig()).tau
    total = parameter_count(weights)
    direction = np.zeros(total)
    jac = None
    dX = np.zeros_like(stacked)
    for p in range(total):
        direction[p] = 1.0
        _, dY = _jvp(weights, direction, stacked, dX, model, tau)
        direction[p] = 0.0
        flat = dY.reshape(-1)
        if jac is None:
            jac = np.empty((flat.size, total))
        jac[:, p] = flat
    if not np.all(np.isfinite(jac)):
        raise ScoreOverflowError("Jacobian assembly produced non-finite entries")
    return jac


def estimate_dimension(
    arch: Architecture,
    n_inputs: int = 250,
    seed: int = 0,
    rel_tol: float = DEFAULT_REL_TOL,
    param_space: str = "raw_qkv",
    cfg: SoftmaxConfig | None = None,
) -> DimensionReport:
    """Estimate the function-space dimension as a Jacobian rank.

    Samples standard-normal weights and inputs from named streams, assembles
    the Jacobian of the chosen parametrization on the sampled inputs, and
    reports its numerical rank next to the matching closed-form prediction.
    Random weights give the generic answer with probability one; the report
    carries the spectrum's gap ratio so callers can judge the cutoff.
    """
    if param_space not in PARAM_SPACES:
        raise InvalidInputError(f"unknown parameter space {param_space!r}")
    if n_inputs < 1:
        raise InvalidInputError("need at least one input sample")
    weights = sample_deep_weights(arch, seed)
    if param_space == "attn_v":
        differentiated = weights.to_attention_form()
    elif param_space == "virtual":
        differentiated = compute_virtual_weights(weights)
    else:
        differentiated = weights
    inputs = sample_inputs(arch, n_inputs, seed)
    jac = assemble_jacobian(differentiated, inputs, model=arch.model, cfg=cfg)
    estimate = numerical_rank(jac, rel_tol)
    prediction = predict_dimension(arch, param_space)
    agree = None if prediction is None else (prediction.value == estimate.rank)
    warnings = []
    if not estimate.well_separated:
        warnings.append(
            f"ill-separated spectrum: gap ratio {estimate.gap_ratio:.3g} below 100"
        )
    if prediction is not None:
        warnings.extend(prediction.warnings)
    return DimensionReport(
        arch=arch,
        param_space=param_space,
        n_inputs=n_inputs,
        seed=seed,
        rel_tol=rel_tol,
        estimate=estimate,
        prediction=prediction,
        agree=agree,
        warnings=tuple(warnings),
    )
