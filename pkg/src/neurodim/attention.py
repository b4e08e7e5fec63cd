"""Forward evaluators for lightning and softmax self-attention.

The shared convention: for weights (A, V) and tokens X (columns x_i), the
lightning output token i is sum_j (x_j' A x_i) V x_j, in matrix form
V X X' A X.  The softmax variant scores with x_i' A x_j, maps scores
through S(x) = exp(x / tau), and normalizes each output token's weights
to sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Architecture,
    DimensionMismatchError,
    InvalidInputError,
    ScoreOverflowError,
    as_matrix,
    matrix_from_json,
    matrix_to_json,
    validate_token_matrix,
)

# Largest argument exp can take without overflowing a float64.
_MAX_EXP_ARG = float(np.log(np.finfo(np.float64).max))


@dataclass(frozen=True)
class QKVLayer:
    """One layer in raw form: query, key, and value weights."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", as_matrix(self.Q, "Q"))
        object.__setattr__(self, "K", as_matrix(self.K, "K"))
        object.__setattr__(self, "V", as_matrix(self.V, "V"))
        if self.Q.shape != self.K.shape:
            raise DimensionMismatchError(
                f"Q and K must share shape, got {self.Q.shape} and {self.K.shape}"
            )
        if self.V.shape[1] != self.Q.shape[1]:
            raise DimensionMismatchError(
                f"V acts on dimension {self.V.shape[1]} but Q/K read dimension {self.Q.shape[1]}"
            )

    @property
    def attn_matrix(self) -> np.ndarray:
        """The bilinear attention form K'Q (rank at most the q/k dimension)."""
        return self.K.T @ self.Q


@dataclass(frozen=True)
class AttnLayer:
    """One layer in attention-matrix form: bilinear form A and value map V."""

    A: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", as_matrix(self.A, "A"))
        object.__setattr__(self, "V", as_matrix(self.V, "V"))
        if self.A.shape[0] != self.A.shape[1]:
            raise DimensionMismatchError(f"A must be square, got {self.A.shape}")
        if self.V.shape[1] != self.A.shape[0]:
            raise DimensionMismatchError(
                f"V acts on dimension {self.V.shape[1]} but A has side {self.A.shape[0]}"
            )


Layer = QKVLayer | AttnLayer


def as_attn_layer(layer: Layer) -> AttnLayer:
    if isinstance(layer, AttnLayer):
        return layer
    if isinstance(layer, QKVLayer):
        return AttnLayer(A=layer.attn_matrix, V=layer.V)
    raise InvalidInputError(f"expected a layer, got {type(layer).__name__}")


@dataclass(frozen=True)
class DeepWeights:
    """Per-layer weights of a deep network, in raw or attention-matrix form.

    All layers must use the same form, and shapes must chain: layer i maps
    embedding dimension dims[i-1] to dims[i].
    """

    arch: Architecture
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != self.arch.n_layers:
            raise DimensionMismatchError(
                f"architecture declares {self.arch.n_layers} layers, got {len(self.layers)}"
            )
        kinds = {type(layer) for layer in self.layers}
        if not kinds <= {QKVLayer, AttnLayer}:
            raise InvalidInputError("layers must be QKVLayer or AttnLayer instances")
        if len(kinds) > 1:
            raise InvalidInputError("all layers must share one parametrization")
        for i, layer in enumerate(self.layers):
            d_in, d_out = self.arch.dims[i], self.arch.dims[i + 1]
            if isinstance(layer, QKVLayer):
                expected_qk = (self.arch.attn_dims[i], d_in)
                if layer.Q.shape != expected_qk:
                    raise DimensionMismatchError(
                        f"layer {i + 1}: Q/K shape {layer.Q.shape}, expected {expected_qk}"
                    )
            else:
                if layer.A.shape != (d_in, d_in):
                    raise DimensionMismatchError(
                        f"layer {i + 1}: A shape {layer.A.shape}, expected ({d_in}, {d_in})"
                    )
            if layer.V.shape != (d_out, d_in):
                raise DimensionMismatchError(
                    f"layer {i + 1}: V shape {layer.V.shape}, expected ({d_out}, {d_in})"
                )

    @property
    def parametrization(self) -> str:
        return "qkv" if isinstance(self.layers[0], QKVLayer) else "attn"

    def to_attention_form(self) -> "DeepWeights":
        if self.parametrization == "attn":
            return self
        return DeepWeights(self.arch, tuple(as_attn_layer(layer) for layer in self.layers))


@dataclass(frozen=True)
class SoftmaxConfig:
    """Scalar score map for normalized attention: S(x) = exp(x / tau).

    S is strictly increasing (hence injective) and S(0) = 1, which is what
    the fiber results rely on.
    """

    tau: float = 1.0
    score_map: str = "exp_over_tau"

    def __post_init__(self):
        if self.score_map != "exp_over_tau":
            raise InvalidInputError(f"unsupported score map {self.score_map!r}")
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")


@dataclass(frozen=True)
class NormalizedScores:
    """Raw score table S(x_i' A x_j) and its per-token normalizers."""

    scores: np.ndarray
    normalizers: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        """Row-normalized scores; each row sums to one."""
        return self.scores / self.normalizers[:, None]


def _check_exp_range(scaled_scores: np.ndarray, tau: float) -> None:
    peak = float(scaled_scores.max())
    if peak > _MAX_EXP_ARG:
        i, j = np.unravel_index(int(np.argmax(scaled_scores)), scaled_scores.shape)[-2:]
        raise ScoreOverflowError(
            f"attention score {peak * tau:.6g} at token pair ({i}, {j}) exceeds the "
            f"exp range at tau={tau:.6g}; increase tau"
        )


def normalized_scores(layer: Layer, X, cfg: SoftmaxConfig = SoftmaxConfig()) -> NormalizedScores:
    """Score table for one softmax layer, with overflow reported, never inf."""
    attn = as_attn_layer(layer)
    X = validate_token_matrix(X)
    if X.shape[0] != attn.A.shape[0]:
        raise DimensionMismatchError(
            f"input has {X.shape[0]} rows but A has side {attn.A.shape[0]}"
        )
    scaled = (X.T @ attn.A @ X) / cfg.tau
    _check_exp_range(scaled, cfg.tau)
    scores = np.exp(scaled)
    normalizers = scores.sum(axis=1)
    if not np.all(np.isfinite(normalizers)):
        raise ScoreOverflowError(f"score normalizer overflowed at tau={cfg.tau:.6g}; increase tau")
    return NormalizedScores(scores=scores, normalizers=normalizers)


def lightning_forward(layer: Layer, X) -> np.ndarray:
    """Evaluate one un-normalized layer: V X X' A X."""
    attn = as_attn_layer(layer)
    X = validate_token_matrix(X)
    if X.shape[0] != attn.A.shape[0]:
        raise DimensionMismatchError(
            f"input has {X.shape[0]} rows but A has side {attn.A.shape[0]}"
        )
    return attn.V @ X @ (X.T @ attn.A @ X)


def deep_forward(weights: DeepWeights, X) -> np.ndarray:
    """Compose the per-layer lightning maps; homogeneous of degree 3**l."""
    X = validate_token_matrix(X)
    if X.shape[0] != weights.arch.dims[0]:
        raise DimensionMismatchError(
            f"input has {X.shape[0]} rows but the network expects {weights.arch.dims[0]}"
        )
    out = X
    for layer in weights.layers:
        out = lightning_forward(layer, out)
    return out


def softmax_forward(layer: Layer, X, cfg: SoftmaxConfig = SoftmaxConfig()) -> np.ndarray:
    """Evaluate one normalized layer.

    Output token i is (1/z_i) sum_j S(x_i' A x_j) V x_j with z_i the row
    sum of the score table.
    """
    attn = as_attn_layer(layer)
    table = normalized_scores(attn, X, cfg)
    X = validate_token_matrix(X)
    return (attn.V @ X) @ table.probabilities.T


def softmax_deep_forward(weights: DeepWeights, X, cfg: SoftmaxConfig = SoftmaxConfig()) -> np.ndarray:
    """Compose per-layer softmax maps with a shared score map."""
    X = validate_token_matrix(X)
    if X.shape[0] != weights.arch.dims[0]:
        raise DimensionMismatchError(
            f"input has {X.shape[0]} rows but the network expects {weights.arch.dims[0]}"
        )
    out = X
    for layer in weights.layers:
        out = softmax_forward(layer, out, cfg)
    return out


def weights_to_json(weights: DeepWeights) -> dict:
    """Encode weights using the shared matrix wire format."""
    layers = []
    for layer in weights.layers:
        if isinstance(layer, QKVLayer):
            layers.append(
                {"Q": matrix_to_json(layer.Q), "K": matrix_to_json(layer.K), "V": matrix_to_json(layer.V)}
            )
        else:
            layers.append({"A": matrix_to_json(layer.A), "V": matrix_to_json(layer.V)})
    return {
        "arch": weights.arch.to_json(),
        "parametrization": weights.parametrization,
        "layers": layers,
    }


def weights_from_json(obj: dict) -> DeepWeights:
    try:
        arch = Architecture.from_json(obj["arch"])
        kind = obj["parametrization"]
        raw_layers = obj["layers"]
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed weights object: {exc}") from exc
    layers = []
    for i, entry in enumerate(raw_layers):
        try:
            if kind == "qkv":
                layers.append(
                    QKVLayer(
                        Q=matrix_from_json(entry["Q"], f"layer {i + 1} Q"),
                        K=matrix_from_json(entry["K"], f"layer {i + 1} K"),
                        V=matrix_from_json(entry["V"], f"layer {i + 1} V"),
                    )
                )
            elif kind == "attn":
                layers.append(
                    AttnLayer(
                        A=matrix_from_json(entry["A"], f"layer {i + 1} A"),
                        V=matrix_from_json(entry["V"], f"layer {i + 1} V"),
                    )
                )
            else:
                raise InvalidInputError(f"unknown parametrization {kind!r}")
        except KeyError as exc:
            raise InvalidInputError(f"layer {i + 1} is missing matrix {exc}") from exc
    return DeepWeights(arch=arch, layers=tuple(layers))
