"""Command-line entry point.

Four subcommands cover the pipeline: ``fit`` (mixed-model estimation per
gender), ``select`` (bootstrap-scored model choice), ``decompose`` (pay-gap
components with bias correction and intervals), and ``simulate`` (the full
evaluation grid on generated data). Every run writes its artifacts under
``--out`` together with a ``manifest.json`` that is sufficient to repeat the
run; progress goes to standard error, results to files and standard output.

Exit codes: 0 success, 2 configuration problem, 3 data problem, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import GENDERS, Dataset, VariableSchema, load_dataset
from .decompose import decompose_gpg
from .design import encode_design, load_model_specs
from .errors import ConfigError, DataError, FitError, PaygapError, SparseDataError
from .lmm import fit_reml
from .selection import select_model
from .simulate import default_generator_config, run_experiment


def _fmt(value) -> str:
    """Render a cell; floats via repr so reruns are byte-identical."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _manifest(out: Path, command: str, config: dict, extra: dict | None = None) -> None:
    echo = {k: v for k, v in sorted(config.items())}
    digest = hashlib.sha256(
        json.dumps(echo, sort_keys=True).encode("utf-8")
    ).hexdigest()
    doc = {
        "command": command,
        "config": echo,
        "config_hash": digest,
        "versions": {
            "paygap": __version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        doc.update(extra)
    _write_json(out / "manifest.json", doc)


def _load_inputs(args) -> tuple[Dataset, VariableSchema]:
    schema = VariableSchema.from_file(args.schema)
    ds = load_dataset(args.data, schema)
    return ds, schema


def _load_models(path: str):
    specs = load_model_specs(path)
    if not specs:
        raise ConfigError(f"no models defined in {path}")
    return specs


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_echo(args, keys: list[str]) -> dict:
    return {k: getattr(args, k) for k in keys}


def _cmd_fit(args) -> int:
    ds, _ = _load_inputs(args)
    specs = _load_models(args.models)
    out = _out_dir(args)
    fits = []
    for spec in specs:
        for gender in GENDERS:
            print(f"fitting {spec.label} / {gender}", file=sys.stderr)
            fit = fit_reml(encode_design(ds, spec, gender))
            fits.append(fit.to_json())
    _write_json(out / "fits.json", {"fits": fits})
    _manifest(out, "fit", _config_echo(args, ["data", "schema", "models", "out"]))
    print(f"wrote {len(fits)} fits to {out / 'fits.json'}")
    return 0


def _cmd_select(args) -> int:
    ds, _ = _load_inputs(args)
    specs = _load_models(args.models)
    out = _out_dir(args)
    result = select_model(ds, specs, reps=args.reps, seed=args.seed)
    _write_json(out / "selection.json", result.to_json())
    _manifest(
        out,
        "select",
        _config_echo(args, ["data", "schema", "models", "reps", "seed", "out"]),
        {"failed": list(result.failed)},
    )
    print(f"{'label':<8}{'-2logl':>14}{'gdf':>10}{'score':>14}")
    for cand in sorted(result.candidates, key=lambda c: c.score):
        mark = " *" if cand.label == result.winner else ""
        print(
            f"{cand.label:<8}{-2 * cand.quasi_loglik:>14.4f}"
            f"{cand.gdf:>10.3f}{cand.score:>14.4f}{mark}"
        )
    return 0


def _cmd_decompose(args) -> int:
    ds, _ = _load_inputs(args)
    specs = _load_models(args.models)
    if args.model is not None:
        by_label = {s.label: s for s in specs}
        if args.model not in by_label:
            raise ConfigError(
                f"model {args.model!r} not found in {args.models}; "
                f"available: {', '.join(sorted(by_label))}"
            )
        spec = by_label[args.model]
    elif len(specs) == 1:
        spec = specs[0]
    else:
        raise ConfigError(
            f"{args.models} defines {len(specs)} models; pick one with --model"
        )
    out = _out_dir(args)
    result = decompose_gpg(
        ds,
        spec,
        iterations=args.iterations,
        seed=args.seed,
        alpha=args.alpha,
        keep_trace=args.trace,
    )
    comps = {c.area: c for c in result.components}
    rows = []
    for est in result.estimates:
        comp = comps[est.area]
        rows.append(
            [
                est.area,
                comp.n_m,
                comp.n_w,
                est.gpg,
                est.gpg_q,
                est.ci_q[0],
                est.ci_q[1],
                est.gpg_u,
                est.ci_u[0],
                est.ci_u[1],
                comp.bias,
                str(est.unstable).lower(),
            ]
        )
    _write_csv(
        out / "decomposition.csv",
        [
            "area",
            "n_m",
            "n_w",
            "gpg",
            "gpg_q",
            "gpg_q_lo",
            "gpg_q_hi",
            "gpg_u",
            "gpg_u_lo",
            "gpg_u_hi",
            "bias",
            "unstable",
        ],
        rows,
    )
    doc = {
        "model": spec.label,
        "skipped_areas": list(result.skipped_areas),
        "attempts": result.attempts,
        "estimates": [
            {
                "area": e.area,
                "gpg": e.gpg,
                "gpg_q": e.gpg_q,
                "gpg_u": e.gpg_u,
                "ci_q": list(e.ci_q),
                "ci_u": list(e.ci_u),
                "iterations_used": e.iterations_used,
                "unstable": e.unstable,
            }
            for e in result.estimates
        ],
    }
    if args.trace:
        doc["trace"] = [
            {
                "bias": dict(it.bias),
                "q1": dict(it.q1),
                "delta1": dict(it.delta1),
                "gap1": dict(it.gap1),
            }
            for it in result.trace
        ]
    _write_json(out / "decomposition.json", doc)
    _manifest(
        out,
        "decompose",
        _config_echo(
            args,
            ["data", "schema", "models", "model", "iterations", "alpha", "seed", "trace", "out"],
        ),
        {"skipped_areas": list(result.skipped_areas)},
    )
    n_areas = len(result.estimates) - 1
    print(f"wrote decomposition for {n_areas} areas + global to {out}")
    return 0


def _cmd_simulate(args) -> int:
    out = _out_dir(args)
    cfg = default_generator_config(D=args.areas)
    print(
        f"running {args.replicates} replicates over {args.areas} areas",
        file=sys.stderr,
    )
    result = run_experiment(
        cfg,
        replicates=args.replicates,
        seed=args.seed,
        iterations=args.iterations,
        selection_reps=args.reps,
        alpha=args.alpha,
        drop=args.drop,
        threads=args.threads,
    )
    emse_rows = [
        [lab, result.emse_q[lab], result.emse_u[lab]] for lab in result.estimators
    ]
    cov_rows = [
        [lab, result.coverage_q[lab], result.coverage_u[lab]]
        for lab in result.estimators
    ]
    _write_csv(out / "emse.csv", ["estimator", "gpg_q", "gpg_u"], emse_rows)
    _write_csv(out / "coverage.csv", ["estimator", "gpg_q", "gpg_u"], cov_rows)
    _write_json(out / "results.json", result.to_json())
    _manifest(
        out,
        "simulate",
        _config_echo(
            args,
            [
                "areas",
                "replicates",
                "iterations",
                "reps",
                "alpha",
                "seed",
                "drop",
                "threads",
                "out",
            ],
        ),
        {"failures": result.failures, "selection_counts": dict(result.selection_counts)},
    )
    print(f"wrote emse.csv, coverage.csv, results.json to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paygap",
        description="Small-area gender pay gap decomposition with mixed models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, models_required=True):
        p.add_argument("--data", required=True, help="input CSV")
        p.add_argument("--schema", required=True, help="variable schema JSON")
        p.add_argument("--models", required=models_required, help="model grid JSON")
        p.add_argument("--out", required=True, help="output directory")

    p_fit = sub.add_parser("fit", help="fit every model for both genders")
    add_io(p_fit)
    p_fit.set_defaults(func=_cmd_fit)

    p_sel = sub.add_parser("select", help="score candidates and pick one")
    add_io(p_sel)
    p_sel.add_argument("--reps", type=int, default=200, help="bootstrap replicates")
    p_sel.add_argument("--seed", type=int, required=True)
    p_sel.set_defaults(func=_cmd_select)

    p_dec = sub.add_parser("decompose", help="estimate pay gap components")
    add_io(p_dec)
    p_dec.add_argument("--model", help="label of the model to use")
    p_dec.add_argument("--iterations", type=int, default=200, help="split iterations")
    p_dec.add_argument("--alpha", type=float, default=0.05)
    p_dec.add_argument("--seed", type=int, required=True)
    p_dec.add_argument("--trace", action="store_true", help="keep per-iteration detail")
    p_dec.set_defaults(func=_cmd_decompose)

    p_sim = sub.add_parser("simulate", help="run the evaluation grid")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--areas", type=int, default=30)
    p_sim.add_argument("--replicates", type=int, default=100)
    p_sim.add_argument("--iterations", type=int, default=50, help="split iterations")
    p_sim.add_argument("--reps", type=int, default=50, help="selection bootstrap reps")
    p_sim.add_argument("--alpha", type=float, default=0.05)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument(
        "--drop",
        action="append",
        default=[],
        help="omit this variable from every working model (repeatable)",
    )
    p_sim.add_argument("--threads", type=int, default=1, help="worker processes")
    p_sim.set_defaults(func=_cmd_simulate)
    return parser


def _report_error(kind: str, exc: Exception) -> None:
    doc = {"error": kind, "message": str(exc)}
    problems = getattr(exc, "problems", None)
    if problems:
        doc["problems"] = list(problems)
    print(json.dumps(doc, indent=1), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    start = time.monotonic()
    try:
        status = args.func(args)
    except (ConfigError, ValueError) as exc:
        _report_error("config", exc)
        return 2
    except (DataError, FileNotFoundError) as exc:
        _report_error("data", exc)
        return 3
    except (FitError, SparseDataError, PaygapError, np.linalg.LinAlgError) as exc:
        _report_error("numerical", exc)
        return 4
    print(f"done in {time.monotonic() - start:.1f}s", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
