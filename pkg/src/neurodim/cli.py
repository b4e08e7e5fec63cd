"""Command-line surface: predictions, estimates, sweeps, verification.

Exit codes form a stable contract for CI: 0 success or agreement, 2 usage
or parse problems, 3 scientific disagreement (an estimate or a suite
contradicting the closed form), 4 resource limits or aborted computations.
JSON goes to stdout for everything except sweeps, which write CSV for
plotting; timing lives in a ``meta`` block so the primary output is
byte-identical across reruns with the same flags and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from datetime import datetime, timezone

from .attention import AttnLayer, SoftmaxConfig, as_attn_layer, weights_from_json
from .core import (
    Architecture,
    DEFAULT_REL_TOL,
    InvalidInputError,
    NeurodimError,
    ResourceBudgetError,
    ScoreOverflowError,
    UnsupportedArchitectureError,
    matrix_from_json,
)
from .dimension import estimate_dimension, predict_dimension
from .geometry import classify_point, extract_coefficients
from .verify import SUITES, run_suite

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DISAGREE = 3
EXIT_RESOURCE = 4


def _default_seed() -> int:
    try:
        return int(os.environ.get("NEURODIM_SEED", "0"))
    except ValueError:
        return 0


def _emit(payload: dict, started: float) -> None:
    payload = dict(payload)
    payload["meta"] = {
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "elapsed_seconds": round(time.perf_counter() - started, 6),
    }
    print(json.dumps(payload, indent=2))


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_arch_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=("lightning", "softmax"), default="lightning")
    parser.add_argument("--layers", type=int, required=True, help="layer count")
    parser.add_argument("--dims", type=_int_list, required=True, help="embedding dims d_0,...,d_l")
    parser.add_argument("--attn", type=_int_list, required=True, help="query/key dims a_1,...,a_l")
    parser.add_argument("--tokens", type=int, required=True, help="token count")


def _arch_from_args(args) -> Architecture:
    attn = args.attn
    if len(attn) == 1 and args.layers > 1:
        attn = attn * args.layers
    return Architecture(
        n_layers=args.layers,
        dims=args.dims,
        attn_dims=attn,
        tokens=args.tokens,
        model=args.model,
    )


def _load_layer(path: str) -> AttnLayer:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if "layers" in obj:
        weights = weights_from_json(obj)
        if weights.arch.n_layers != 1:
            raise InvalidInputError("expected a single-layer weights file")
        return as_attn_layer(weights.layers[0])
    if "A" in obj and "V" in obj:
        return AttnLayer(A=matrix_from_json(obj["A"], "A"), V=matrix_from_json(obj["V"], "V"))
    raise InvalidInputError("weights file must hold either a layer {A, V} or a weights object")


def _cmd_predict(args) -> int:
    started = time.perf_counter()
    arch = _arch_from_args(args)
    prediction = predict_dimension(arch, param_space="raw_qkv")
    if prediction is None:
        raise UnsupportedArchitectureError("no closed form is claimed for this architecture")
    _emit(prediction.to_json(), started)
    return EXIT_OK


def _cmd_estimate(args) -> int:
    started = time.perf_counter()
    arch = _arch_from_args(args)
    report = estimate_dimension(
        arch,
        n_inputs=args.inputs,
        seed=args.seed,
        rel_tol=args.tol,
        param_space=args.param_space,
        cfg=SoftmaxConfig(tau=args.tau),
    )
    _emit(report.to_json(), started)
    return EXIT_OK if report.agree in (True, None) else EXIT_DISAGREE


def _cmd_sweep(args) -> int:
    if args.delta_min > args.delta_max:
        raise InvalidInputError("delta-min must not exceed delta-max")
    rows = []
    all_agree = True
    # Rows are buffered and written in one pass, so an estimation failure
    # never leaves a partial file behind.
    for delta in range(args.delta_min, args.delta_max + 1):
        row_started = time.perf_counter()
        try:
            arch = Architecture(
                n_layers=args.layers,
                dims=(delta,) * (args.layers + 1),
                attn_dims=(args.attn,) * args.layers,
                tokens=args.tokens,
                model=args.model,
            )
            report = estimate_dimension(
                arch,
                n_inputs=args.inputs,
                seed=args.seed,
                rel_tol=args.tol,
                param_space="raw_qkv",
                cfg=SoftmaxConfig(tau=args.tau),
            )
        except NeurodimError as exc:
            print(f"error at delta={delta}: {exc}", file=sys.stderr)
            return EXIT_RESOURCE
        seconds = time.perf_counter() - row_started
        expected = "" if report.prediction is None else report.prediction.value
        agree = bool(report.agree)
        all_agree = all_agree and agree
        rows.append(
            [
                delta,
                report.estimate.rank,
                expected,
                "true" if agree else "false",
                repr(float(report.estimate.gap_ratio)),
                f"{seconds:.3f}",
            ]
        )
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["delta", "estimated", "expected", "agree", "gap_ratio", "seconds"])
        writer.writerows(rows)
    return EXIT_OK if all_agree else EXIT_DISAGREE


def _cmd_verify(args) -> int:
    started = time.perf_counter()
    report = run_suite(args.suite, trials=args.trials, seed=args.seed)
    _emit(report.to_json(), started)
    return EXIT_OK if report.verdict == "pass" else EXIT_DISAGREE


def _cmd_classify(args) -> int:
    started = time.perf_counter()
    layer = _load_layer(args.weights)
    result = classify_point(layer, rel_tol=args.tol)
    _emit(result.to_json(), started)
    return EXIT_OK


def _cmd_coeffs(args) -> int:
    started = time.perf_counter()
    layer = _load_layer(args.weights)
    coefficients = extract_coefficients(layer, tokens=args.tokens, slot_budget=args.budget)
    _emit(coefficients.to_json(), started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurodim",
        description="Dimension and symmetry analysis of self-attention function spaces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_predict = sub.add_parser("predict", help="closed-form dimension prediction")
    _add_arch_flags(p_predict)
    p_predict.set_defaults(func=_cmd_predict)

    p_estimate = sub.add_parser("estimate", help="Jacobian-rank dimension estimate")
    _add_arch_flags(p_estimate)
    p_estimate.add_argument("--inputs", type=int, default=250, help="number of sampled inputs")
    p_estimate.add_argument("--seed", type=int, default=_default_seed())
    p_estimate.add_argument("--tol", type=float, default=DEFAULT_REL_TOL)
    p_estimate.add_argument(
        "--param-space", choices=("raw_qkv", "attn_v", "virtual"), default="raw_qkv"
    )
    p_estimate.add_argument("--tau", type=float, default=1.0)
    p_estimate.set_defaults(func=_cmd_estimate)

    p_sweep = sub.add_parser("sweep", help="estimate over a range of interior widths")
    p_sweep.add_argument("--model", choices=("lightning", "softmax"), default="softmax")
    p_sweep.add_argument("--layers", type=int, default=2)
    p_sweep.add_argument("--tokens", type=int, default=3)
    p_sweep.add_argument("--attn", type=int, default=2, help="shared per-layer query/key dim")
    p_sweep.add_argument("--delta-min", type=int, required=True)
    p_sweep.add_argument("--delta-max", type=int, required=True)
    p_sweep.add_argument("--inputs", type=int, default=250)
    p_sweep.add_argument("--seed", type=int, default=_default_seed())
    p_sweep.add_argument("--tol", type=float, default=DEFAULT_REL_TOL)
    p_sweep.add_argument("--tau", type=float, default=1.0)
    p_sweep.add_argument("--out", required=True, help="CSV output path")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_verify = sub.add_parser("verify", help="run a randomized invariant suite")
    p_verify.add_argument("--suite", choices=sorted(SUITES), required=True)
    p_verify.add_argument("--trials", type=int, default=50)
    p_verify.add_argument("--seed", type=int, default=_default_seed())
    p_verify.set_defaults(func=_cmd_verify)

    p_classify = sub.add_parser("classify", help="classify a single layer's weights")
    p_classify.add_argument("--weights", required=True, help="JSON weights file")
    p_classify.add_argument("--tol", type=float, default=DEFAULT_REL_TOL)
    p_classify.set_defaults(func=_cmd_classify)

    p_coeffs = sub.add_parser("coeffs", help="polynomial coefficients of a single layer")
    p_coeffs.add_argument("--weights", required=True, help="JSON weights file")
    p_coeffs.add_argument("--tokens", type=int, required=True)
    p_coeffs.add_argument("--budget", type=int, default=10**7)
    p_coeffs.set_defaults(func=_cmd_coeffs)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ResourceBudgetError, ScoreOverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (OSError, json.JSONDecodeError, NeurodimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
