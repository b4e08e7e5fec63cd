"""Closed-form predictions and the Jacobian-rank estimator."""

import numpy as np
import pytest

from neurodim import (
    Architecture,
    AttnLayer,
    DeepWeights,
    InvalidInputError,
    QKVLayer,
    SoftmaxConfig,
    UnsupportedArchitectureError,
    assemble_jacobian,
    compute_virtual_weights,
    deep_forward,
    directional_derivative,
    estimate_dimension,
    parameter_count,
    parameter_layout,
    predict_deep_lightning,
    predict_deep_softmax,
    predict_determinantal,
    predict_dimension,
    predict_single_layer,
    relative_deviation,
    sample_deep_weights,
    sample_inputs,
    softmax_deep_forward,
    virtual_forward,
)
from neurodim.dimension import _unflatten


def rebuild_weights(weights, flat):
    """Reassemble a weights object from a flat parameter vector."""
    pieces = _unflatten(np.asarray(flat, dtype=float), parameter_layout(weights))
    if isinstance(weights, DeepWeights):
        layers = []
        cursor = 0
        for layer in weights.layers:
            if isinstance(layer, QKVLayer):
                layers.append(QKVLayer(*pieces[cursor : cursor + 3]))
                cursor += 3
            else:
                layers.append(AttnLayer(*pieces[cursor : cursor + 2]))
                cursor += 2
        return DeepWeights(weights.arch, tuple(layers))
    from neurodim import VirtualWeights

    return VirtualWeights(forms=tuple(pieces[:-1]), readout=pieces[-1])


def flatten_weights(weights) -> np.ndarray:
    if isinstance(weights, DeepWeights):
        mats = []
        for layer in weights.layers:
            mats += [layer.Q, layer.K, layer.V] if isinstance(layer, QKVLayer) else [layer.A, layer.V]
    else:
        mats = list(weights.forms) + [weights.readout]
    return np.concatenate([m.reshape(-1) for m in mats])


def forward_for(weights, X, model, tau=1.0):
    if isinstance(weights, DeepWeights):
        if model == "softmax":
            return softmax_deep_forward(weights, X, SoftmaxConfig(tau=tau))
        return deep_forward(weights, X)
    if model == "softmax":
        from neurodim.dimension import _jvp

        y, _ = _jvp(weights, np.zeros(parameter_count(weights)), X, np.zeros_like(X), "softmax", tau)
        return y
    return virtual_forward(weights, X)


def central_difference(weights, direction, X, model, tau=1.0, h=None):
    """Oracle: symmetric difference quotient along one parameter direction."""
    flat = flatten_weights(weights)
    if h is None:
        h = 1e-5 * (1.0 + float(np.abs(flat).max()))
    plus = forward_for(rebuild_weights(weights, flat + h * direction), X, model, tau)
    minus = forward_for(rebuild_weights(weights, flat - h * direction), X, model, tau)
    return (plus - minus) / (2.0 * h)


class TestSingleLayerPrediction:
    def test_reference_configuration(self):
        assert predict_single_layer(2, 1, 2).value == 5

    def test_wide_attention_branch(self):
        # a > d: the attention matrices are unconstrained
        assert predict_single_layer(3, 2, 5).value == 9 + 6 - 1

    def test_narrow_attention_branch(self):
        assert predict_single_layer(2, 2, 1).value == 2 * 1 * 2 + 4 - 1 - 1

    def test_softmax_is_larger_by_one(self):
        for d, d_out, a in ((2, 1, 2), (3, 2, 5), (2, 2, 1), (4, 3, 2)):
            lightning = predict_single_layer(d, d_out, a).value
            softmax = predict_single_layer(d, d_out, a, model="softmax").value
            assert softmax == lightning + 1

    def test_terms_sum_to_value(self):
        prediction = predict_single_layer(4, 3, 2)
        assert sum(prediction.terms.values()) == prediction.value == 23

    def test_hypothesis_warning(self):
        assert predict_single_layer(1, 1, 1).warnings
        assert not predict_single_layer(2, 1, 2).warnings

    def test_determinantal_dimension(self):
        assert predict_determinantal(4, 2).value == 2 * (2 * 4 - 2)
        assert predict_determinantal(3, 5).value == 9


class TestDeepPredictions:
    def test_rejects_single_layer(self):
        arch = Architecture(1, (3, 3), (2,), 3)
        with pytest.raises(UnsupportedArchitectureError):
            predict_deep_lightning(arch)

    def test_full_width_collapses_to_square_formula(self):
        # every attention dim at the interior width gives (l+1) d^2 - l
        for n_layers, d in ((2, 3), (3, 2), (2, 4)):
            arch = Architecture(n_layers, (d,) * (n_layers + 1), (d,) * n_layers, 3)
            assert predict_deep_lightning(arch).value == d * d * (n_layers + 1) - n_layers

    def test_reference_two_layer_values(self):
        arch = Architecture(2, (3, 3, 3), (2, 2), 3)
        assert predict_deep_lightning(arch).value == 23
        assert predict_deep_softmax(arch).value == 25

    def test_wide_interior_closed_form(self):
        arch = Architecture(2, (10, 10, 10), (2, 2), 3)
        delta = 10
        assert predict_deep_softmax(arch).value == delta * delta + 8 * delta - 8 == 152

    def test_softmax_exceeds_lightning_by_layer_count(self):
        for n_layers in (2, 3, 4):
            arch = Architecture(n_layers, (4,) + (3,) * (n_layers - 1) + (4,), (2,) * n_layers, 3)
            gap = predict_deep_softmax(arch).value - predict_deep_lightning(arch).value
            assert gap == n_layers

    def test_non_bottleneck_rejected(self):
        arch = Architecture(2, (3, 5, 3), (2, 2), 3)
        with pytest.raises(UnsupportedArchitectureError, match="bottleneck"):
            predict_deep_lightning(arch)

    def test_router(self):
        assert predict_dimension(Architecture(1, (2, 1), (2,), 2)).value == 5
        assert predict_dimension(Architecture(2, (3, 3, 3), (2, 2), 3, model="softmax")).value == 25
        assert predict_dimension(Architecture(2, (2, 3, 2), (2, 2), 3)) is None


class TestSampling:
    def test_weights_are_deterministic_per_seed(self):
        arch = Architecture(2, (3, 3, 3), (2, 2), 3)
        w1, w2 = sample_deep_weights(arch, seed=9), sample_deep_weights(arch, seed=9)
        for a, b in zip(w1.layers, w2.layers):
            assert np.array_equal(a.Q, b.Q) and np.array_equal(a.K, b.K) and np.array_equal(a.V, b.V)
        w3 = sample_deep_weights(arch, seed=10)
        assert not np.array_equal(w1.layers[0].Q, w3.layers[0].Q)

    def test_inputs_share_shape_and_differ(self):
        arch = Architecture(1, (3, 2), (2,), 4)
        inputs = sample_inputs(arch, 5, seed=0)
        assert all(x.shape == (3, 4) for x in inputs)
        assert not np.array_equal(inputs[0], inputs[1])


class TestDirectionalDerivative:
    def test_zero_direction(self):
        weights = sample_deep_weights(Architecture(2, (2, 2, 2), (2, 2), 3), seed=0)
        X = sample_inputs(weights.arch, 1, seed=0)[0]
        dY = directional_derivative(weights, np.zeros(parameter_count(weights)), X)
        assert np.array_equal(dY, np.zeros_like(dY))

    def test_value_direction_is_exactly_linear(self):
        """Perturbing only the value map differentiates to dV X X'A X."""
        rng = np.random.default_rng(1)
        arch = Architecture(1, (3, 2), (2,), 3)
        layer = AttnLayer(A=rng.standard_normal((3, 3)), V=rng.standard_normal((2, 3)))
        weights = DeepWeights(arch, (layer,))
        dV = rng.standard_normal((2, 3))
        direction = np.concatenate([np.zeros(9), dV.reshape(-1)])
        X = rng.standard_normal((3, 3))
        got = directional_derivative(weights, direction, X)
        want = dV @ X @ (X.T @ layer.A @ X)
        assert np.array_equal(got, want)

    def test_linearity_in_the_direction(self):
        weights = sample_deep_weights(Architecture(2, (2, 3, 2), (2, 2), 3), seed=2)
        rng = np.random.default_rng(3)
        X = rng.standard_normal((2, 3))
        u = rng.standard_normal(parameter_count(weights))
        v = rng.standard_normal(parameter_count(weights))
        combined = directional_derivative(weights, 1.7 * u - 0.3 * v, X)
        separate = 1.7 * directional_derivative(weights, u, X) - 0.3 * directional_derivative(
            weights, v, X
        )
        assert relative_deviation(combined, separate) < 1e-10

    @pytest.mark.parametrize("model", ["lightning", "softmax"])
    def test_matches_central_differences_raw(self, model):
        rng = np.random.default_rng(4)
        arch = Architecture(2, (2, 3, 2), (2, 2), 3, model=model)
        for trial in range(20):
            weights = sample_deep_weights(arch, seed=trial)
            X = rng.standard_normal((2, 3))
            direction = rng.standard_normal(parameter_count(weights))
            got = directional_derivative(weights, direction, X, model=model)
            want = central_difference(weights, direction, X, model)
            assert relative_deviation(got, want) < 1e-6

    @pytest.mark.parametrize("model", ["lightning", "softmax"])
    def test_matches_central_differences_attn(self, model):
        rng = np.random.default_rng(5)
        arch = Architecture(2, (2, 2, 2), (2, 2), 3, model=model)
        weights = sample_deep_weights(arch, seed=11).to_attention_form()
        X = rng.standard_normal((2, 3))
        direction = rng.standard_normal(parameter_count(weights))
        got = directional_derivative(weights, direction, X, model=model)
        want = central_difference(weights, direction, X, model)
        assert relative_deviation(got, want) < 1e-6

    @pytest.mark.parametrize("model", ["lightning", "softmax"])
    def test_matches_central_differences_virtual(self, model):
        rng = np.random.default_rng(6)
        arch = Architecture(2, (3, 3, 3), (2, 2), 3, model=model)
        vw = compute_virtual_weights(sample_deep_weights(arch, seed=12))
        X = rng.standard_normal((3, 3))
        direction = rng.standard_normal(parameter_count(vw))
        got = directional_derivative(vw, direction, X, model=model)
        want = central_difference(vw, direction, X, model)
        assert relative_deviation(got, want) < 1e-6

    def test_virtual_value_matches_recursive_evaluator(self):
        arch = Architecture(2, (3, 3, 3), (2, 2), 3)
        weights = sample_deep_weights(arch, seed=13)
        vw = compute_virtual_weights(weights)
        X = sample_inputs(arch, 1, seed=13)[0]
        from neurodim.dimension import _jvp

        y, _ = _jvp(vw, np.zeros(parameter_count(vw)), X, np.zeros_like(X), "lightning", 1.0)
        assert relative_deviation(y, virtual_forward(vw, X)) < 1e-12

    def test_softmax_virtual_value_matches_composition(self):
        arch = Architecture(2, (3, 3, 3), (2, 2), 3, model="softmax")
        weights = sample_deep_weights(arch, seed=14)
        vw = compute_virtual_weights(weights)
        X = sample_inputs(arch, 1, seed=14)[0]
        from neurodim.dimension import _jvp

        y, _ = _jvp(vw, np.zeros(parameter_count(vw)), X, np.zeros_like(X), "softmax", 1.0)
        assert relative_deviation(y, softmax_deep_forward(weights, X)) < 1e-12


class TestJacobianAssembly:
    def test_parameter_count_example(self):
        arch = Architecture(2, (10, 10, 10), (2, 2), 3)
        weights = sample_deep_weights(arch, seed=0)
        # per layer: two 2x10 query/key blocks plus a 10x10 value block
        assert parameter_count(weights) == 280

    def test_row_count(self):
        arch = Architecture(1, (3, 2), (2,), 4)
        weights = sample_deep_weights(arch, seed=0)
        jac = assemble_jacobian(weights, sample_inputs(arch, 7, seed=0))
        assert jac.shape == (7 * 4 * 2, parameter_count(weights))

    def test_zero_weights_give_zero_jacobian(self):
        # the map is trilinear per layer, so every derivative term carries a
        # weight factor and the whole Jacobian vanishes at the origin
        arch = Architecture(1, (2, 2), (2,), 3)
        zero = DeepWeights(
            arch, (QKVLayer(Q=np.zeros((2, 2)), K=np.zeros((2, 2)), V=np.zeros((2, 2))),)
        )
        jac = assemble_jacobian(zero, sample_inputs(arch, 3, seed=0))
        assert np.array_equal(jac, np.zeros_like(jac))

    def test_columns_match_directional_derivatives(self):
        arch = Architecture(1, (2, 2), (2,), 2)
        weights = sample_deep_weights(arch, seed=5)
        inputs = sample_inputs(arch, 2, seed=5)
        jac = assemble_jacobian(weights, inputs)
        p = parameter_count(weights)
        direction = np.zeros(p)
        direction[3] = 1.0
        stacked = np.concatenate(
            [directional_derivative(weights, direction, x).reshape(-1) for x in inputs]
        )
        assert np.allclose(jac[:, 3], stacked, atol=1e-14)


class TestEstimateDimension:
    def test_reference_single_layer(self):
        report = estimate_dimension(Architecture(1, (2, 1), (2,), 2), n_inputs=50, seed=0)
        assert report.estimate.rank == 5
        assert report.prediction.value == 5
        assert report.agree is True
        assert report.estimate.gap_ratio > 100

    def test_rank_limited_by_rows(self):
        report = estimate_dimension(Architecture(1, (4, 3), (2,), 2), n_inputs=1, seed=0)
        assert report.estimate.rank <= 1 * 2 * 3
        assert report.agree is False

    def test_determinantal_regime(self):
        report = estimate_dimension(Architecture(1, (4, 3), (2,), 2), n_inputs=40, seed=0)
        assert report.prediction.value == 23
        assert report.estimate.rank == 23
        assert report.agree is True

    def test_param_spaces_agree_when_attention_is_unconstrained(self):
        arch = Architecture(2, (2, 2, 2), (3, 3), 3)
        ranks = {
            space: estimate_dimension(arch, n_inputs=30, seed=1, param_space=space).estimate.rank
            for space in ("raw_qkv", "attn_v", "virtual")
        }
        assert ranks["raw_qkv"] == ranks["attn_v"] == ranks["virtual"] == 2 * 2 * 3 - 2

    def test_constrained_attention_separates_param_spaces(self):
        arch = Architecture(1, (4, 3), (2,), 2)
        raw = estimate_dimension(arch, n_inputs=40, seed=2, param_space="raw_qkv")
        attn = estimate_dimension(arch, n_inputs=40, seed=2, param_space="attn_v")
        assert raw.estimate.rank == 23  # rank-constrained attention matrices
        assert attn.estimate.rank == 4 * 4 + 4 * 3 - 1  # unconstrained

    def test_rank_stable_under_doubling_inputs(self):
        arch = Architecture(2, (3, 3, 3), (2, 2), 3, model="softmax")
        small = estimate_dimension(arch, n_inputs=15, seed=3)
        large = estimate_dimension(arch, n_inputs=30, seed=3)
        assert small.estimate.rank == large.estimate.rank == 25

    def test_non_bottleneck_runs_without_prediction(self):
        report = estimate_dimension(Architecture(2, (2, 3, 2), (2, 2), 3), n_inputs=20, seed=4)
        assert report.prediction is None
        assert report.agree is None
        assert report.estimate.rank > 0

    def test_report_json_schema(self):
        report = estimate_dimension(Architecture(1, (2, 1), (2,), 2), n_inputs=10, seed=0)
        obj = report.to_json()
        for key in (
            "arch",
            "model",
            "param_space",
            "N",
            "seed",
            "rel_tol",
            "estimated",
            "expected",
            "agree",
            "singular_values",
            "gap_ratio",
        ):
            assert key in obj
        assert obj["N"] == 10 and obj["estimated"] == 5

    def test_single_layer_softmax_prediction(self):
        report = estimate_dimension(
            Architecture(1, (2, 2), (2,), 2, model="softmax"), n_inputs=30, seed=5
        )
        assert report.prediction.value == 2 * 2 * 2 + 4 - 4
        assert report.agree is True

    def test_invalid_param_space(self):
        with pytest.raises(InvalidInputError):
            estimate_dimension(Architecture(1, (2, 1), (2,), 2), param_space="bogus")
