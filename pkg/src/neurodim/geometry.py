"""Single-layer function-space geometry.

One lightning layer is a cubic polynomial map, so it embeds linearly into
the coefficient space of homogeneous degree-3 polynomials over the d*t
input variables.  This module builds that embedding explicitly, enumerates
the non-trivial fiber partner of rank-one layers (swapping the key factor
of the attention form with the input factor of the value map), and
classifies weight settings as smooth, singular, boundary, or zero points
of the function space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttnLayer, Layer, as_attn_layer
from .core import (
    DEFAULT_REL_TOL,
    DimensionMismatchError,
    InvalidInputError,
    ResourceBudgetError,
    ZeroFunctionError,
    numerical_rank,
    validate_token_matrix,
)

# |cos| threshold above which the two rank-one factors count as parallel.
BOUNDARY_ALIGNMENT_TOL = 1e-8

ZERO_FUNCTION = "zero_function"
BOUNDARY = "boundary"
SINGULAR_INTERIOR = "singular_interior"
SMOOTH = "smooth"


@dataclass(frozen=True)
class CoefficientVector:
    """Sparse coefficients of one layer's cubic polynomial map.

    Keys are (output_row, output_token, exponents) where ``exponents`` is a
    tuple over the d*t input variables in row-major (embedding, token)
    order, always summing to 3.  Serialization lists entries sorted by
    output coordinate and then by exponent vector, so encodings are
    comparable across runs.
    """

    d: int
    d_out: int
    tokens: int
    coeffs: dict

    @property
    def total_slots(self) -> int:
        """Dimension of the ambient coefficient space."""
        return self.d_out * self.tokens * math.comb(self.d * self.tokens + 2, 3)

    def evaluate(self, X) -> np.ndarray:
        """Evaluate the polynomial map at a token matrix."""
        X = validate_token_matrix(X)
        if X.shape != (self.d, self.tokens):
            raise DimensionMismatchError(
                f"input has shape {X.shape}, expected ({self.d}, {self.tokens})"
            )
        flat = X.reshape(-1)  # row-major matches the variable order
        out = np.zeros((self.d_out, self.tokens))
        for (n, i, expo), value in self.coeffs.items():
            term = value
            for var, power in enumerate(expo):
                if power:
                    term *= flat[var] ** power
            out[n, i] += term
        return out

    def to_json(self) -> dict:
        entries = [
            {"out": [n, i], "expo": list(expo), "val": float(v)}
            for (n, i, expo), v in sorted(self.coeffs.items())
        ]
        return {
            "arch": [self.d, self.d_out, self.tokens],
            "total_slots": self.total_slots,
            "coeffs": entries,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CoefficientVector":
        try:
            d, d_out, tokens = (int(v) for v in obj["arch"])
            coeffs = {
                (int(e["out"][0]), int(e["out"][1]), tuple(int(p) for p in e["expo"])): float(e["val"])
                for e in obj["coeffs"]
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed coefficient object: {exc}") from exc
        return cls(d=d, d_out=d_out, tokens=tokens, coeffs=coeffs)


@dataclass(frozen=True)
class RankOneFactors:
    """Vectors with A = k q' and V = h v' for a rank-one layer."""

    k: np.ndarray
    q: np.ndarray
    v: np.ndarray
    h: np.ndarray

    @property
    def alignment(self) -> float:
        """|cos| of the angle between the key factor k and the value factor v."""
        return float(
            abs(self.k @ self.v) / (np.linalg.norm(self.k) * np.linalg.norm(self.v))
        )


@dataclass(frozen=True)
class PointClass:
    """Classification of one weight setting within the function space.

    Boundary points (attention form and value map sharing their rank-one
    key factor) are always singular; zero ranks mean the zero function.
    The weight-level criterion is tested; topological boundary membership
    in the closure is not certified.
    """

    klass: str
    rank_a: int
    rank_v: int
    alignment: float | None = None

    def to_json(self) -> dict:
        return {
            "klass": self.klass,
            "rank_A": self.rank_a,
            "rank_V": self.rank_v,
            "alignment": self.alignment,
        }


def extract_coefficients(layer: Layer, tokens: int, slot_budget: int = 10**7) -> CoefficientVector:
    """Expand one layer into its degree-3 polynomial coefficients.

    Output (n, i) accumulates A[p, q] * V[n, r] onto the monomial
    x[p, j] * x[q, i] * x[r, j] for every token index j, merging equal
    monomials.  Evaluating the result reproduces the forward map exactly.
    """
    attn = as_attn_layer(layer)
    if tokens < 1:
        raise InvalidInputError("token count must be >= 1")
    d = attn.A.shape[0]
    d_out = attn.V.shape[0]
    slots = d_out * tokens * math.comb(d * tokens + 2, 3)
    if slots > slot_budget:
        raise ResourceBudgetError(
            f"coefficient space has {slots} slots (budget {slot_budget})"
        )
    n_vars = d * tokens
    coeffs: dict = {}
    for p in range(d):
        for q in range(d):
            a_pq = attn.A[p, q]
            if a_pq == 0.0:
                continue
            for n in range(d_out):
                for r in range(d):
                    value = a_pq * attn.V[n, r]
                    if value == 0.0:
                        continue
                    for i in range(tokens):
                        for j in range(tokens):
                            expo = [0] * n_vars
                            expo[p * tokens + j] += 1
                            expo[q * tokens + i] += 1
                            expo[r * tokens + j] += 1
                            key = (n, i, tuple(expo))
                            coeffs[key] = coeffs.get(key, 0.0) + value
    coeffs = {key: v for key, v in coeffs.items() if v != 0.0}
    return CoefficientVector(d=d, d_out=d_out, tokens=tokens, coeffs=coeffs)


def rank_one_factors(layer: Layer, rel_tol: float = DEFAULT_REL_TOL) -> RankOneFactors:
    """Best rank-one factorization of both weight matrices via SVD truncation."""
    attn = as_attn_layer(layer)
    ranks = (numerical_rank(attn.A, rel_tol).rank, numerical_rank(attn.V, rel_tol).rank)
    if ranks != (1, 1):
        raise InvalidInputError(f"layer has ranks {ranks}, expected (1, 1)")
    ua, sa, vta = np.linalg.svd(attn.A)
    uv, sv, vtv = np.linalg.svd(attn.V)
    return RankOneFactors(
        k=sa[0] * ua[:, 0],
        q=vta[0, :].copy(),
        h=sv[0] * uv[:, 0],
        v=vtv[0, :].copy(),
    )


def fiber_partner(layer: Layer, rel_tol: float = DEFAULT_REL_TOL) -> AttnLayer | None:
    """The other weight setting realizing the same function, when one exists.

    For rank-one pairs A = k q', V = h v' the swap (v q', h k') realizes the
    same map and, unless v is parallel to k, lies outside the rescaling
    orbit of the original.  Higher ranks admit rescalings only (None).
    The construction assumes at least two tokens.
    """
    attn = as_attn_layer(layer)
    rank_a = numerical_rank(attn.A, rel_tol).rank
    rank_v = numerical_rank(attn.V, rel_tol).rank
    if rank_a == 0 or rank_v == 0:
        raise ZeroFunctionError(
            "weights realize the zero function; its fiber is every setting "
            "with a vanishing attention form or value map"
        )
    if rank_a != 1 or rank_v != 1:
        return None
    factors = rank_one_factors(attn, rel_tol)
    return AttnLayer(A=np.outer(factors.v, factors.q), V=np.outer(factors.h, factors.k))


def classify_point(layer: Layer, rel_tol: float = DEFAULT_REL_TOL) -> PointClass:
    """Classify a weight setting as zero, boundary, singular, or smooth.

    Singular points are exactly those with rank(A) * rank(V) <= 1; among
    the rank-one pairs, the boundary ones are those whose value-map input
    factor is parallel to the attention key factor.
    """
    attn = as_attn_layer(layer)
    rank_a = numerical_rank(attn.A, rel_tol).rank
    rank_v = numerical_rank(attn.V, rel_tol).rank
    if rank_a == 0 or rank_v == 0:
        return PointClass(klass=ZERO_FUNCTION, rank_a=rank_a, rank_v=rank_v)
    if rank_a == 1 and rank_v == 1:
        alignment = rank_one_factors(attn, rel_tol).alignment
        klass = BOUNDARY if alignment > 1.0 - BOUNDARY_ALIGNMENT_TOL else SINGULAR_INTERIOR
        return PointClass(klass=klass, rank_a=rank_a, rank_v=rank_v, alignment=alignment)
    return PointClass(klass=SMOOTH, rank_a=rank_a, rank_v=rank_v)


def coefficient_distance(c1: CoefficientVector, c2: CoefficientVector) -> float:
    """Max-norm distance after aligning c2 against c1 by one scalar.

    The scalar is the least-squares optimum, so two settings on the same
    rescaling ray are at distance ~0 and fiber membership up to rescaling
    shows as near-zero distance.
    """
    if (c1.d, c1.d_out, c1.tokens) != (c2.d, c2.d_out, c2.tokens):
        raise DimensionMismatchError("coefficient vectors describe different architectures")
    keys = sorted(set(c1.coeffs) | set(c2.coeffs))
    v1 = np.array([c1.coeffs.get(k, 0.0) for k in keys])
    v2 = np.array([c2.coeffs.get(k, 0.0) for k in keys])
    denom = float(v2 @ v2)
    scale = float(v1 @ v2) / denom if denom > 0.0 else 0.0
    if not keys:
        return 0.0
    return float(np.abs(v1 - scale * v2).max())
