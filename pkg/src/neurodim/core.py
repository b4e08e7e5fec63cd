"""Shared numeric types, seeded sampling, and numerical rank computation.

Matrices are dense float64 numpy arrays throughout.  Every operation is a
pure function of its inputs and all container types are frozen, so values
are safe to share across threads.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

LIGHTNING = "lightning"
SOFTMAX = "softmax"
MODELS = (LIGHTNING, SOFTMAX)

# Relative singular-value cutoff shared by every rank decision.  All
# lightning quantities are polynomial and evaluated in double precision,
# which makes a relative threshold the right default; callers can tighten
# or loosen it per call.
DEFAULT_REL_TOL = 1e-7

# Spectra whose retained-to-discarded ratio falls below this are suspect.
GAP_RATIO_WARN = 100.0


class NeurodimError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(NeurodimError):
    """Malformed, non-finite, or out-of-contract input."""


class DimensionMismatchError(NeurodimError):
    """Matrix shapes do not chain."""


class ScoreOverflowError(NeurodimError):
    """An attention score left the representable range of exp."""


class InvalidTransformError(NeurodimError):
    """A symmetry transform violates its defining constraint."""


class NoUniqueGaugeError(NeurodimError):
    """Gauge recovery attempted outside its uniqueness regime."""


class ResourceBudgetError(NeurodimError):
    """Requested computation exceeds its configured budget."""


class UnsupportedArchitectureError(NeurodimError):
    """No closed-form result exists for this architecture."""


class ZeroFunctionError(NeurodimError):
    """The weights realize the identically-zero function."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-d float64 array or raise InvalidInputError."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-dimensional, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return m


def validate_token_matrix(X, name: str = "token matrix") -> np.ndarray:
    """Validate a d x t token matrix (column i is token i)."""
    m = as_matrix(X, name)
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidInputError(f"{name} must have at least one row and one column")
    return m


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor of a deep self-attention network.

    ``dims`` lists the embedding dimension entering layer 1 through the one
    leaving the last layer (length ``n_layers + 1``); ``attn_dims`` lists
    each layer's query/key dimension.
    """

    n_layers: int
    dims: tuple[int, ...]
    attn_dims: tuple[int, ...]
    tokens: int
    model: str = LIGHTNING

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "attn_dims", tuple(int(a) for a in self.attn_dims))
        if self.n_layers < 1:
            raise InvalidInputError("need at least one layer")
        if len(self.dims) != self.n_layers + 1:
            raise InvalidInputError(
                f"dims must have {self.n_layers + 1} entries, got {len(self.dims)}"
            )
        if len(self.attn_dims) != self.n_layers:
            raise InvalidInputError(
                f"attn_dims must have {self.n_layers} entries, got {len(self.attn_dims)}"
            )
        if min(self.dims) < 1 or min(self.attn_dims) < 1:
            raise InvalidInputError("all dimensions must be >= 1")
        if self.tokens < 1:
            raise InvalidInputError("token count must be >= 1")
        if self.model not in MODELS:
            raise InvalidInputError(f"unknown model {self.model!r}, expected one of {MODELS}")

    @property
    def alphas(self) -> tuple[int, ...]:
        """Effective attention rank per layer: min(attn dim, input dim)."""
        return tuple(min(a, d) for a, d in zip(self.attn_dims, self.dims[:-1]))

    def bottleneck_width(self) -> int | None:
        """Shared interior width, or None when the network is not a bottleneck.

        A bottleneck has every interior dimension equal to some width with
        the outer dimensions at least as large.  Single layers have no
        interior and return None.
        """
        if self.n_layers < 2:
            return None
        interior = set(self.dims[1:-1])
        if len(interior) != 1:
            return None
        delta = interior.pop()
        if self.dims[0] < delta or self.dims[-1] < delta:
            return None
        return delta

    def to_json(self) -> dict:
        return {
            "l": self.n_layers,
            "dims": list(self.dims),
            "attn_dims": list(self.attn_dims),
            "tokens": self.tokens,
            "model": self.model,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Architecture":
        try:
            return cls(
                n_layers=int(obj["l"]),
                dims=tuple(obj["dims"]),
                attn_dims=tuple(obj["attn_dims"]),
                tokens=int(obj["tokens"]),
                model=str(obj.get("model", LIGHTNING)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed architecture object: {exc}") from exc


@dataclass(frozen=True)
class RankResult:
    """Outcome of a numerical rank decision.

    ``gap_ratio`` is the smallest retained singular value over the largest
    discarded one (inf when nothing is discarded, or when everything
    discarded is exactly zero); values below ``GAP_RATIO_WARN`` flag an
    ill-separated spectrum.
    """

    rank: int
    singular_values: np.ndarray
    threshold_used: float
    gap_ratio: float

    @property
    def well_separated(self) -> bool:
        return self.gap_ratio >= GAP_RATIO_WARN


def numerical_rank(matrix, rel_tol: float = DEFAULT_REL_TOL) -> RankResult:
    """Count singular values above ``rel_tol`` times the largest one.

    The ratio test is scale-free: permuting rows or columns, transposing,
    or multiplying the whole matrix by a nonzero scalar leaves the rank
    unchanged.  The zero matrix has rank 0.
    """
    m = as_matrix(matrix)
    if not 0.0 < rel_tol < 1.0:
        raise InvalidInputError(f"rel_tol must lie strictly between 0 and 1, got {rel_tol}")
    s = np.linalg.svd(m, compute_uv=False)
    sigma_max = float(s[0]) if s.size else 0.0
    cutoff = rel_tol * sigma_max
    rank = int(np.count_nonzero(s > cutoff))
    if rank < s.size and s[rank] > 0.0:
        gap = float(s[rank - 1] / s[rank]) if rank > 0 else np.inf
    else:
        gap = np.inf
    return RankResult(rank=rank, singular_values=s, threshold_used=rel_tol, gap_ratio=gap)


@dataclass(frozen=True)
class RngStream:
    """Named, indexed handle into a counter-based random generator.

    Each (seed, name, index) triple keys an independent Philox stream, so a
    draw is a pure function of its handle: identical handles give bitwise
    identical output no matter how calls interleave, and parallel execution
    cannot change results.
    """

    seed: int
    name: str = "default"
    index: int = 0

    def generator(self) -> np.random.Generator:
        key = zlib.crc32(self.name.encode("utf-8"))
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(key, self.index))
        return np.random.Generator(np.random.Philox(ss))


def sample_gaussian_matrix(rows: int, cols: int, stream: RngStream) -> np.ndarray:
    """Draw a rows x cols matrix of i.i.d. standard normals from a stream."""
    if rows < 1 or cols < 1:
        raise InvalidInputError("matrix sample needs rows >= 1 and cols >= 1")
    return stream.generator().standard_normal((rows, cols))


def matrix_to_json(matrix) -> dict:
    """Encode a matrix as the shared wire format (row-major nested lists)."""
    m = as_matrix(matrix)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.tolist()}


def matrix_from_json(obj: dict, name: str = "matrix") -> np.ndarray:
    """Decode the shared wire format, validating shape and finiteness."""
    try:
        rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed {name} object: {exc}") from exc
    m = as_matrix(data, name)
    if m.shape != (rows, cols):
        raise InvalidInputError(
            f"{name} declares shape ({rows}, {cols}) but data has shape {m.shape}"
        )
    return m
