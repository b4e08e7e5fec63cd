"""Virtual-weight reparametrization and the symmetry groups of deep networks.

A deep lightning network with layer weights (A_i, V_i) is determined by its
virtual weights: the running value products L_i = V_i ... V_1 together with
the input-space bilinear forms M_1 = A_1 and M_i = L_{i-1}' A_i L_{i-1}.
This module computes that reparametrization, applies and recovers its three
symmetry groups (layer scalars, query/key gauges, inter-layer gauges), and
provides two alternative closed-form evaluators (recursive and triadic)
used as cross-checking oracles against plain layer composition.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .attention import DeepWeights, QKVLayer
from .core import (
    DimensionMismatchError,
    InvalidInputError,
    InvalidTransformError,
    NoUniqueGaugeError,
    ResourceBudgetError,
    as_matrix,
    numerical_rank,
    validate_token_matrix,
)

# Largest acceptable condition number for a gauge matrix; beyond this the
# transform is treated as numerically singular.
_MAX_GAUGE_COND = 1e12

_SCALING_CONSTRAINT_TOL = 1e-9


@dataclass(frozen=True)
class VirtualWeights:
    """The (forms, readout) reparametrization of a deep lightning network.

    ``forms`` holds one square bilinear form per layer, all on the input
    embedding space; ``readout`` is the end-to-end value map.
    """

    forms: tuple[np.ndarray, ...]
    readout: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "forms", tuple(as_matrix(m, f"form {i + 1}") for i, m in enumerate(self.forms))
        )
        object.__setattr__(self, "readout", as_matrix(self.readout, "readout"))
        if not self.forms:
            raise InvalidInputError("need at least one layer form")
        side = self.forms[0].shape[0]
        for i, m in enumerate(self.forms):
            if m.shape != (side, side):
                raise DimensionMismatchError(
                    f"form {i + 1} has shape {m.shape}, expected ({side}, {side})"
                )
        if self.readout.shape[1] != side:
            raise DimensionMismatchError(
                f"readout acts on dimension {self.readout.shape[1]}, expected {side}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.forms)

    @property
    def input_dim(self) -> int:
        return self.forms[0].shape[0]


@dataclass(frozen=True)
class LayerScaling:
    """Per-layer scalars and a readout scalar.

    The represented function is unchanged exactly when the product of
    layer_factors[i] ** 3**(l-1-i) equals 1 / readout_factor.
    """

    layer_factors: tuple[float, ...]
    readout_factor: float

    def __post_init__(self):
        object.__setattr__(self, "layer_factors", tuple(float(c) for c in self.layer_factors))
        object.__setattr__(self, "readout_factor", float(self.readout_factor))
        if any(c == 0.0 for c in self.layer_factors) or self.readout_factor == 0.0:
            raise InvalidInputError("scaling factors must be nonzero")

    def constraint_residual(self) -> float:
        """|rho * prod(lambda_i ** 3**(l-i)) - 1|, zero for a valid scaling."""
        l = len(self.layer_factors)
        prod = 1.0
        for i, c in enumerate(self.layer_factors, start=1):
            prod *= c ** (3 ** (l - i))
        return abs(self.readout_factor * prod - 1.0)


def layer_scaling_from_factors(layer_factors) -> LayerScaling:
    """Build a valid scaling by solving the readout scalar from the factors."""
    factors = tuple(float(c) for c in layer_factors)
    l = len(factors)
    prod = 1.0
    for i, c in enumerate(factors, start=1):
        prod *= c ** (3 ** (l - i))
    if prod == 0.0 or not np.isfinite(prod):
        raise InvalidInputError("layer factors give a degenerate readout scalar")
    return LayerScaling(layer_factors=factors, readout_factor=1.0 / prod)


@dataclass(frozen=True)
class QKGauge:
    """Invertible change of basis on the query/key space: K' = CK, Q' = C^-T Q."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", as_matrix(self.matrix, "gauge"))
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionMismatchError(f"gauge must be square, got {self.matrix.shape}")


@dataclass(frozen=True)
class InterlayerGauge:
    """Invertible transforms inserted between consecutive layers.

    ``gauges[i]`` acts on the output of layer i+1; the boundary transforms
    (before layer 1 and after the last layer) are implicitly identity.
    """

    gauges: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self,
            "gauges",
            tuple(as_matrix(c, f"gauge {i + 1}") for i, c in enumerate(self.gauges)),
        )
        for i, c in enumerate(self.gauges):
            if c.shape[0] != c.shape[1]:
                raise DimensionMismatchError(f"gauge {i + 1} must be square, got {c.shape}")


@dataclass(frozen=True)
class TriadicPlan:
    """Matrix selector for the triadic expansion of a depth-l network.

    The expansion sums over paths of length (3**l - 1) / 2; step j of a
    path picks the form whose layer index is one plus the 3-adic valuation
    of j, transposed exactly when the first nonzero base-3 digit of j
    (from the right) is 2.
    """

    l_tilde: int
    selector: tuple[tuple[int, bool], ...]


@dataclass(frozen=True)
class SkewPerturbation:
    """A skew-symmetric offset for one layer form with index >= 2."""

    layer_index: int
    skew: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "skew", as_matrix(self.skew, "skew"))
        if self.skew.shape[0] != self.skew.shape[1]:
            raise DimensionMismatchError(f"skew matrix must be square, got {self.skew.shape}")
        if not np.array_equal(self.skew.T, -self.skew):
            raise InvalidInputError("matrix is not exactly skew-symmetric")


def skew_perturbation_from(layer_index: int, matrix, unit_norm: bool = False) -> SkewPerturbation:
    """Antisymmetrize an arbitrary square matrix into a perturbation.

    (B - B') / 2 is exactly skew-symmetric in floating point; optional
    normalization to unit Frobenius norm preserves exact skewness.
    """
    b = as_matrix(matrix, "matrix")
    skew = (b - b.T) / 2.0
    if unit_norm:
        norm = float(np.linalg.norm(skew))
        if norm == 0.0:
            raise InvalidInputError("cannot normalize the zero perturbation")
        skew = skew / norm
    return SkewPerturbation(layer_index=layer_index, skew=skew)


@dataclass(frozen=True)
class IdentifiabilityReport:
    """Per-layer genericity checks behind the deep uniqueness result."""

    layer_ranks: tuple[int, ...]
    rank_ok: tuple[bool, ...]
    non_skew_ok: tuple[bool, ...]  # one entry per layer index >= 2
    tokens_ok: bool
    satisfied: bool
    failures: tuple[str, ...]


def compute_virtual_weights(weights: DeepWeights) -> VirtualWeights:
    """Reparametrize layer weights into (forms, readout).

    Raw query/key layers are first folded into attention-matrix form.
    """
    attn = weights.to_attention_form()
    running = np.eye(attn.arch.dims[0])
    forms = []
    for layer in attn.layers:
        forms.append(running.T @ layer.A @ running)
        running = layer.V @ running
    return VirtualWeights(forms=tuple(forms), readout=running)


def virtual_forward(vw: VirtualWeights, X) -> np.ndarray:
    """Evaluate the network from its virtual weights via the symmetric recursion.

    With G_i = X' M_i X, the recursion D_0 = I,
    D_i = D_{i-1} G_i D_{i-1} G_i' D_{i-1} produces symmetric t x t factors,
    and the output is readout . X . prod_i (D_{l-i} G_{l-i+1}).
    """
    X = validate_token_matrix(X)
    if X.shape[0] != vw.input_dim:
        raise DimensionMismatchError(
            f"input has {X.shape[0]} rows but the virtual weights expect {vw.input_dim}"
        )
    l = vw.n_layers
    grams = [X.T @ m @ X for m in vw.forms]
    t = X.shape[1]
    d_mats = [np.eye(t)]
    for i in range(1, l):
        d_prev = d_mats[-1]
        g = grams[i - 1]
        d_mats.append(d_prev @ g @ d_prev @ g.T @ d_prev)
    product = np.eye(t)
    for i in range(1, l + 1):
        product = product @ d_mats[l - i] @ grams[l - i]
    return vw.readout @ X @ product


def symmetric_factors(vw: VirtualWeights, X) -> list[np.ndarray]:
    """The D_0 .. D_{l-1} factors of the recursive evaluation (all symmetric)."""
    X = validate_token_matrix(X)
    grams = [X.T @ m @ X for m in vw.forms]
    t = X.shape[1]
    d_mats = [np.eye(t)]
    for i in range(1, vw.n_layers):
        d_prev = d_mats[-1]
        g = grams[i - 1]
        d_mats.append(d_prev @ g @ d_prev @ g.T @ d_prev)
    return d_mats


def triadic_plan(n_layers: int) -> TriadicPlan:
    """Selector for the flattened sum-over-paths evaluation."""
    if n_layers < 1:
        raise InvalidInputError("need at least one layer")
    l_tilde = (3**n_layers - 1) // 2
    selector = []
    for j in range(1, l_tilde):
        digits = j
        position = 1
        while digits % 3 == 0:
            digits //= 3
            position += 1
        selector.append((position, digits % 3 == 2))
    return TriadicPlan(l_tilde=l_tilde, selector=tuple(selector))


def triadic_forward(vw: VirtualWeights, X, term_budget: int = 10**6) -> np.ndarray:
    """Evaluate the network as an explicit sum over token multi-indices.

    Output column k sums, over paths (k_1 .. k_m) with m = (3**l - 1) / 2,
    the vector readout . x_{k_1} weighted by the chain of bilinear factors
    selected by the triadic plan and the closing factor x_{k_m}' M_1 x_k.
    Exists as an oracle: cost grows as t**m, so a term budget guards it.
    """
    X = validate_token_matrix(X)
    if X.shape[0] != vw.input_dim:
        raise DimensionMismatchError(
            f"input has {X.shape[0]} rows but the virtual weights expect {vw.input_dim}"
        )
    plan = triadic_plan(vw.n_layers)
    t = X.shape[1]
    n_terms = t**plan.l_tilde
    if n_terms > term_budget:
        raise ResourceBudgetError(
            f"triadic evaluation needs {n_terms} terms (budget {term_budget}); "
            "use virtual_forward instead"
        )
    tables = []
    for layer_index, transposed in plan.selector:
        m = vw.forms[layer_index - 1]
        tables.append(X.T @ (m.T if transposed else m) @ X)
    closing = X.T @ vw.forms[0] @ X
    read = vw.readout @ X
    out = np.zeros((vw.readout.shape[0], t))
    for path in itertools.product(range(t), repeat=plan.l_tilde):
        weight = 1.0
        for j, table in enumerate(tables):
            weight *= table[path[j], path[j + 1]]
        out += np.outer(read[:, path[0]] * weight, closing[path[-1], :])
    return out


def apply_layer_scaling(vw: VirtualWeights, scaling: LayerScaling) -> VirtualWeights:
    """Scale each form and the readout; the represented function is unchanged."""
    if len(scaling.layer_factors) != vw.n_layers:
        raise DimensionMismatchError(
            f"scaling has {len(scaling.layer_factors)} factors for {vw.n_layers} layers"
        )
    if scaling.constraint_residual() > _SCALING_CONSTRAINT_TOL:
        raise InvalidTransformError(
            f"scaling constraint violated by {scaling.constraint_residual():.3e}"
        )
    forms = tuple(c * m for c, m in zip(scaling.layer_factors, vw.forms))
    return VirtualWeights(forms=forms, readout=scaling.readout_factor * vw.readout)


def _checked_inverse(c: np.ndarray, what: str) -> np.ndarray:
    if c.size == 0 or not np.all(np.isfinite(c)):
        raise InvalidTransformError(f"{what} is not a finite matrix")
    cond = np.linalg.cond(c)
    if not np.isfinite(cond) or cond > _MAX_GAUGE_COND:
        raise InvalidTransformError(f"{what} is numerically singular (cond {cond:.3e})")
    return np.linalg.inv(c)


def apply_qk_gauge(Q, K, gauge: QKGauge) -> tuple[np.ndarray, np.ndarray]:
    """Return (C^-T Q, C K); the product K'Q is exactly preserved."""
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    if Q.shape != K.shape:
        raise DimensionMismatchError(f"Q and K must share shape, got {Q.shape} and {K.shape}")
    c = gauge.matrix
    if c.shape[0] != Q.shape[0]:
        raise DimensionMismatchError(
            f"gauge has side {c.shape[0]} but Q/K have {Q.shape[0]} rows"
        )
    c_inv = _checked_inverse(c, "query/key gauge")
    return c_inv.T @ Q, c @ K


def recover_qk_gauge(Q, K, Q_new, K_new, rel_tol: float = 1e-8) -> QKGauge:
    """Recover the unique gauge linking two factorizations of the same form.

    Requires the attention form K'Q to attain full rank a; the gauge is
    solved by least squares from K' = CK and validated on both relations.
    """
    Q, K = as_matrix(Q, "Q"), as_matrix(K, "K")
    Q_new, K_new = as_matrix(Q_new, "Q'"), as_matrix(K_new, "K'")
    if not (Q.shape == K.shape == Q_new.shape == K_new.shape):
        raise DimensionMismatchError("all four factor matrices must share one shape")
    a = K.shape[0]
    if numerical_rank(K.T @ Q).rank != a:
        raise NoUniqueGaugeError(
            f"attention form does not attain rank {a}; the gauge is not unique"
        )
    # C K = K'  <=>  K' C' = K''  solved row-by-row in the least-squares sense
    c_t, *_ = np.linalg.lstsq(K.T, K_new.T, rcond=None)
    c = c_t.T
    c_inv = _checked_inverse(c, "recovered gauge")
    scale_k = max(np.abs(K_new).max(), np.finfo(float).tiny)
    scale_q = max(np.abs(Q_new).max(), np.finfo(float).tiny)
    res_k = np.abs(c @ K - K_new).max() / scale_k
    res_q = np.abs(c_inv.T @ Q - Q_new).max() / scale_q
    if res_k > rel_tol or res_q > rel_tol:
        raise NoUniqueGaugeError(
            f"inputs are not gauge-related: residuals {res_k:.3e} (keys), {res_q:.3e} (queries)"
        )
    return QKGauge(matrix=c)


def apply_interlayer_gauge(weights: DeepWeights, gauge: InterlayerGauge) -> DeepWeights:
    """Insert invertible transforms between layers and cancel them next layer.

    V_i picks up C_i on the left and C_{i-1}^-1 on the right; A_{i+1} is
    conjugated by C_i^-1.  The virtual weights of input and output are the
    same matrices, not merely the same function.
    """
    if weights.parametrization != "attn":
        raise InvalidInputError(
            "inter-layer gauges act on attention-matrix weights; convert first"
        )
    arch = weights.arch
    if len(gauge.gauges) != arch.n_layers - 1:
        raise DimensionMismatchError(
            f"need {arch.n_layers - 1} gauges for {arch.n_layers} layers, got {len(gauge.gauges)}"
        )
    for i, c in enumerate(gauge.gauges):
        if c.shape[0] != arch.dims[i + 1]:
            raise DimensionMismatchError(
                f"gauge {i + 1} has side {c.shape[0]}, expected {arch.dims[i + 1]}"
            )
    inverses = [_checked_inverse(c, f"gauge {i + 1}") for i, c in enumerate(gauge.gauges)]
    new_layers = []
    for i, layer in enumerate(weights.layers):
        a_mat, v_mat = layer.A, layer.V
        if i >= 1:  # conjugate the form by the preceding gauge
            a_mat = inverses[i - 1].T @ a_mat @ inverses[i - 1]
            v_mat = v_mat @ inverses[i - 1]
        if i < arch.n_layers - 1:
            v_mat = gauge.gauges[i] @ v_mat
        new_layers.append(type(layer)(A=a_mat, V=v_mat))
    return DeepWeights(arch=arch, layers=tuple(new_layers))


def recover_interlayer_gauge(w1: DeepWeights, w2: DeepWeights, rel_tol: float = 1e-7) -> InterlayerGauge:
    """Recover the unique inter-layer gauges linking two weight settings.

    Valid for bottleneck architectures whose end-to-end value product has
    full interior rank; the gauges are solved sequentially by least squares
    along the value chain and validated against every relation.
    """
    w1, w2 = w1.to_attention_form(), w2.to_attention_form()
    arch = w1.arch
    if w2.arch.dims != arch.dims or w2.arch.n_layers != arch.n_layers:
        raise DimensionMismatchError("weight sets have different architectures")
    if arch.n_layers < 2:
        raise InvalidInputError("inter-layer gauges need at least two layers")
    delta = arch.bottleneck_width()
    if delta is None:
        raise NoUniqueGaugeError("gauge recovery requires a bottleneck architecture")
    for label, w in (("first", w1), ("second", w2)):
        readout = compute_virtual_weights(w).readout
        if numerical_rank(readout).rank != delta:
            raise NoUniqueGaugeError(
                f"{label} value product has rank below the interior width {delta}; "
                "the gauge is not unique"
            )
    gauges = []
    c_prev = np.eye(arch.dims[0])
    for i in range(arch.n_layers - 1):
        v1, v2 = w1.layers[i].V, w2.layers[i].V
        target = v2 @ c_prev  # C_i V1_i = V2_i C_{i-1}
        c_t, *_ = np.linalg.lstsq(v1.T, target.T, rcond=None)
        c = c_t.T
        _checked_inverse(c, f"recovered gauge {i + 1}")
        gauges.append(c)
        c_prev = c
    recovered = InterlayerGauge(gauges=tuple(gauges))
    transformed = apply_interlayer_gauge(w1, recovered)
    worst = 0.0
    for layer_t, layer_2 in zip(transformed.layers, w2.layers):
        for got, want in ((layer_t.A, layer_2.A), (layer_t.V, layer_2.V)):
            scale = max(np.abs(want).max(), np.finfo(float).tiny)
            worst = max(worst, np.abs(got - want).max() / scale)
    if worst > rel_tol:
        raise NoUniqueGaugeError(
            f"weight sets are not gauge-related: worst relation residual {worst:.3e}"
        )
    return recovered


def apply_skew_perturbation(vw: VirtualWeights, perturbation: SkewPerturbation) -> VirtualWeights:
    """Offset one interior form by a skew matrix.

    Layer 1 is excluded: its form enters the function through terms where a
    skew offset would not cancel, so the uniqueness analysis treats it
    separately.  Generic weights change the represented function under any
    nonzero skew offset, which is what identifiability tests exploit.
    """
    i = perturbation.layer_index
    if i < 2 or i > vw.n_layers:
        raise InvalidInputError(
            f"perturbation layer index must lie in [2, {vw.n_layers}], got {i}"
        )
    if perturbation.skew.shape != vw.forms[i - 1].shape:
        raise DimensionMismatchError(
            f"skew shape {perturbation.skew.shape} does not match form shape {vw.forms[i - 1].shape}"
        )
    forms = list(vw.forms)
    forms[i - 1] = forms[i - 1] + perturbation.skew
    return VirtualWeights(forms=tuple(forms), readout=vw.readout)


def check_identifiability_conditions(
    vw: VirtualWeights, tokens: int, rel_tol: float = 1e-7
) -> IdentifiabilityReport:
    """Report the genericity conditions under which fibers are rescalings only.

    Checks rank >= 2 for every form, non-skewness for forms 2..l, and a
    token count of at least 3.
    """
    failures = []
    ranks = tuple(numerical_rank(m, rel_tol).rank for m in vw.forms)
    rank_ok = tuple(r >= 2 for r in ranks)
    for i, ok in enumerate(rank_ok, start=1):
        if not ok:
            failures.append(f"form {i} has rank {ranks[i - 1]} < 2")
    non_skew = []
    for i, m in enumerate(vw.forms[1:], start=2):
        tol = 1e-8 * max(1.0, float(np.abs(m).max()))
        ok = float(np.abs(m + m.T).max()) > tol
        non_skew.append(ok)
        if not ok:
            failures.append(f"form {i} is skew-symmetric")
    tokens_ok = tokens >= 3
    if not tokens_ok:
        failures.append(f"token count {tokens} < 3")
    return IdentifiabilityReport(
        layer_ranks=ranks,
        rank_ok=rank_ok,
        non_skew_ok=tuple(non_skew),
        tokens_ok=tokens_ok,
        satisfied=not failures,
        failures=tuple(failures),
    )
