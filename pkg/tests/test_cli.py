"""Command-line surface: flags, JSON/CSV output, and the exit-code contract."""

import csv
import json

import numpy as np
import pytest

from neurodim import matrix_to_json
from neurodim.cli import main


def run_cli(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def parse_payload(out):
    payload = json.loads(out)
    payload.pop("meta", None)
    return payload


class TestPredict:
    def test_reference_single_layer(self, capsys):
        code, out, _ = run_cli(
            capsys,
            ["predict", "--model", "lightning", "--layers", "1", "--dims", "2,1",
             "--attn", "2", "--tokens", "2"],
        )
        assert code == 0
        payload = parse_payload(out)
        assert payload["value"] == 5

    def test_deep_softmax(self, capsys):
        code, out, _ = run_cli(
            capsys,
            ["predict", "--model", "softmax", "--layers", "2", "--dims", "3,3,3",
             "--attn", "2,2", "--tokens", "3"],
        )
        assert code == 0
        assert parse_payload(out)["value"] == 25

    def test_non_bottleneck_exits_2_with_diagnostic(self, capsys):
        code, _, err = run_cli(
            capsys,
            ["predict", "--layers", "2", "--dims", "3,5,3", "--attn", "2,2", "--tokens", "3"],
        )
        assert code == 2
        assert "bottleneck" in err

    def test_meta_block_isolated(self, capsys):
        _, out, _ = run_cli(
            capsys,
            ["predict", "--layers", "1", "--dims", "2,1", "--attn", "2", "--tokens", "2"],
        )
        payload = json.loads(out)
        assert "generated_at" in payload["meta"]


class TestEstimate:
    def test_reference_configuration(self, capsys):
        code, out, _ = run_cli(
            capsys,
            ["estimate", "--model", "lightning", "--layers", "1", "--dims", "2,1",
             "--attn", "2", "--tokens", "2", "--inputs", "50", "--seed", "0"],
        )
        assert code == 0
        payload = parse_payload(out)
        assert payload["estimated"] == 5 and payload["agree"] is True

    def test_figure_point_delta_four(self, capsys):
        code, out, _ = run_cli(
            capsys,
            ["estimate", "--model", "softmax", "--layers", "2", "--dims", "4,4,4",
             "--attn", "2,2", "--tokens", "3", "--inputs", "60", "--seed", "0"],
        )
        assert code == 0
        payload = parse_payload(out)
        assert payload["estimated"] == payload["expected"] == 40

    def test_starved_estimate_exits_3(self, capsys):
        code, out, _ = run_cli(
            capsys,
            ["estimate", "--layers", "1", "--dims", "4,3", "--attn", "2",
             "--tokens", "2", "--inputs", "1", "--seed", "0"],
        )
        assert code == 3
        payload = parse_payload(out)
        assert payload["agree"] is False
        assert payload["estimated"] <= 6  # bounded by the sampled rows

    def test_deterministic_output_modulo_meta(self, capsys):
        argv = ["estimate", "--layers", "1", "--dims", "2,1", "--attn", "2",
                "--tokens", "2", "--inputs", "20", "--seed", "3"]
        _, out1, _ = run_cli(capsys, argv)
        _, out2, _ = run_cli(capsys, argv)
        assert parse_payload(out1) == parse_payload(out2)

    def test_env_seed_default(self, capsys, monkeypatch):
        monkeypatch.setenv("NEURODIM_SEED", "17")
        from neurodim.cli import build_parser

        args = build_parser().parse_args(
            ["estimate", "--layers", "1", "--dims", "2,1", "--attn", "2", "--tokens", "2"]
        )
        assert args.seed == 17


class TestSweep:
    def test_single_row_range(self, capsys, tmp_path):
        out_path = tmp_path / "sweep.csv"
        code, _, _ = run_cli(
            capsys,
            ["sweep", "--model", "softmax", "--delta-min", "3", "--delta-max", "3",
             "--inputs", "40", "--seed", "0", "--out", str(out_path)],
        )
        assert code == 0
        rows = list(csv.DictReader(out_path.read_text().splitlines()))
        assert len(rows) == 1
        assert rows[0]["delta"] == "3"
        assert rows[0]["estimated"] == rows[0]["expected"] == "25"
        assert rows[0]["agree"] == "true"

    def test_lightning_expected_is_softmax_minus_layers(self, capsys, tmp_path):
        soft_path, light_path = tmp_path / "soft.csv", tmp_path / "light.csv"
        base = ["--delta-min", "3", "--delta-max", "4", "--inputs", "40", "--seed", "0"]
        assert run_cli(capsys, ["sweep", "--model", "softmax", *base, "--out", str(soft_path)])[0] == 0
        assert run_cli(capsys, ["sweep", "--model", "lightning", *base, "--out", str(light_path)])[0] == 0
        soft = list(csv.DictReader(soft_path.read_text().splitlines()))
        light = list(csv.DictReader(light_path.read_text().splitlines()))
        for s, l in zip(soft, light):
            assert int(l["expected"]) == int(s["expected"]) - 2

    def test_deterministic_modulo_seconds(self, capsys, tmp_path):
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = ["sweep", "--delta-min", "3", "--delta-max", "4", "--inputs", "30", "--seed", "1"]
        run_cli(capsys, [*argv, "--out", str(first)])
        run_cli(capsys, [*argv, "--out", str(second)])

        def strip_seconds(path):
            rows = list(csv.reader(path.read_text().splitlines()))
            return [row[:-1] for row in rows]

        assert strip_seconds(first) == strip_seconds(second)

    def test_line_endings_are_lf(self, capsys, tmp_path):
        out_path = tmp_path / "sweep.csv"
        run_cli(capsys, ["sweep", "--delta-min", "3", "--delta-max", "3",
                         "--inputs", "20", "--seed", "0", "--out", str(out_path)])
        raw = out_path.read_bytes()
        assert b"\r" not in raw

    def test_bad_range_exits_2(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys,
            ["sweep", "--delta-min", "5", "--delta-max", "3", "--out", str(tmp_path / "x.csv")],
        )
        assert code == 2
        assert "delta" in err


class TestVerifyCommand:
    def test_evaluators_suite(self, capsys):
        code, out, _ = run_cli(capsys, ["verify", "--suite", "evaluators", "--trials", "5", "--seed", "0"])
        assert code == 0
        payload = parse_payload(out)
        assert payload["verdict"] == "pass" and payload["passes"] == 5

    def test_unknown_suite_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli(capsys, ["verify", "--suite", "bogus"])
        assert exc.value.code == 2


class TestClassifyCommand:
    def _write_layer(self, tmp_path, a, v):
        path = tmp_path / "layer.json"
        path.write_text(json.dumps({"A": matrix_to_json(a), "V": matrix_to_json(v)}))
        return str(path)

    def test_zero_function(self, capsys, tmp_path):
        rng = np.random.default_rng(0)
        path = self._write_layer(tmp_path, rng.standard_normal((2, 2)), np.zeros((2, 2)))
        code, out, _ = run_cli(capsys, ["classify", "--weights", path])
        assert code == 0
        assert parse_payload(out)["klass"] == "zero_function"

    def test_boundary(self, capsys, tmp_path):
        rng = np.random.default_rng(1)
        k, q = rng.standard_normal(3), rng.standard_normal(3)
        h = rng.standard_normal(2)
        path = self._write_layer(tmp_path, np.outer(k, q), np.outer(h, k))
        code, out, _ = run_cli(capsys, ["classify", "--weights", path])
        assert code == 0
        assert parse_payload(out)["klass"] == "boundary"

    def test_smooth(self, capsys, tmp_path):
        rng = np.random.default_rng(2)
        path = self._write_layer(tmp_path, rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))
        code, out, _ = run_cli(capsys, ["classify", "--weights", path])
        assert code == 0
        assert parse_payload(out)["klass"] == "smooth"

    def test_full_weights_schema_accepted(self, capsys, tmp_path):
        rng = np.random.default_rng(3)
        obj = {
            "arch": {"l": 1, "dims": [2, 2], "attn_dims": [2], "tokens": 2, "model": "lightning"},
            "parametrization": "attn",
            "layers": [
                {"A": matrix_to_json(rng.standard_normal((2, 2))),
                 "V": matrix_to_json(rng.standard_normal((2, 2)))}
            ],
        }
        path = tmp_path / "weights.json"
        path.write_text(json.dumps(obj))
        code, out, _ = run_cli(capsys, ["classify", "--weights", str(path)])
        assert code == 0
        assert parse_payload(out)["klass"] == "smooth"

    def test_parse_failure_exits_2(self, capsys, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        code, _, err = run_cli(capsys, ["classify", "--weights", str(path)])
        assert code == 2
        assert err


class TestCoeffsCommand:
    def test_forty_slots_reported(self, capsys, tmp_path):
        rng = np.random.default_rng(4)
        obj = {
            "A": matrix_to_json(rng.standard_normal((2, 2))),
            "V": matrix_to_json(rng.standard_normal((1, 2))),
        }
        path = tmp_path / "layer.json"
        path.write_text(json.dumps(obj))
        code, out, _ = run_cli(capsys, ["coeffs", "--weights", str(path), "--tokens", "2"])
        assert code == 0
        payload = parse_payload(out)
        assert payload["total_slots"] == 40
        assert payload["coeffs"]

    def test_zero_weights_report_slots_with_empty_list(self, capsys, tmp_path):
        obj = {"A": matrix_to_json(np.zeros((2, 2))), "V": matrix_to_json(np.zeros((1, 2)))}
        path = tmp_path / "layer.json"
        path.write_text(json.dumps(obj))
        code, out, _ = run_cli(capsys, ["coeffs", "--weights", str(path), "--tokens", "2"])
        assert code == 0
        payload = parse_payload(out)
        assert payload["coeffs"] == [] and payload["total_slots"] == 40

    def test_budget_exceeded_exits_4(self, capsys, tmp_path):
        obj = {"A": matrix_to_json(np.eye(3)), "V": matrix_to_json(np.eye(3))}
        path = tmp_path / "layer.json"
        path.write_text(json.dumps(obj))
        code, _, err = run_cli(
            capsys, ["coeffs", "--weights", str(path), "--tokens", "4", "--budget", "10"]
        )
        assert code == 4
        assert "budget" in err

    def test_round_trip_against_forward(self, capsys, tmp_path):
        from neurodim import AttnLayer, CoefficientVector, lightning_forward

        rng = np.random.default_rng(5)
        a, v = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
        path = tmp_path / "layer.json"
        path.write_text(json.dumps({"A": matrix_to_json(a), "V": matrix_to_json(v)}))
        _, out, _ = run_cli(capsys, ["coeffs", "--weights", str(path), "--tokens", "2"])
        cv = CoefficientVector.from_json(parse_payload(out))
        X = rng.standard_normal((2, 2))
        want = lightning_forward(AttnLayer(A=a, V=v), X)
        assert np.abs(cv.evaluate(X) - want).max() < 1e-10 * max(1.0, np.abs(want).max())
