"""Command-line front end: fit, simulate, riesz-check.

A JSON config file is the source of truth for each subcommand; the --seed,
--threads, and --out flags override the matching keys.  Outputs carry a
provenance header (config hash, seed, package version) and contain nothing
time- or host-dependent, so identical configs produce byte-identical files.

Exit codes: 0 success, 1 computational or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import NUISANCES, Link, NuisanceModel, Scenario, WorkingModelSpec, load_csv
from .errors import IvwaldError
from .estimators import ESTIMATOR_IDS, bootstrap, point_estimate
from .riesz import (
    categorical_law,
    conditional_mean,
    dichotomization_rr,
    gaussian_law,
    roundtrip_max_error,
    rr_categorical,
    uniform_law,
    verify_representation,
    weight_from_rr,
)
from .simulate import run_scenarios

DEFAULT_ESTIMATORS = ("delta1", "delta_b2", "delta3", "delta_b_tr")
DEFAULT_RIESZ_TOL = 1e-5


class UsageError(Exception):
    pass


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _provenance(config: dict) -> dict:
    return {
        "version": __version__,
        "config_sha256": _config_hash(config),
        "seed": config.get("seed"),
    }


def _check_keys(config: dict, allowed: set, what: str) -> None:
    unknown = sorted(set(config) - allowed)
    if unknown:
        raise UsageError(f"{what}: unknown config keys {unknown}; allowed: {sorted(allowed)}")


def _load_config(path: str | None, overrides: dict, required: bool) -> dict:
    if path is None:
        if required:
            raise UsageError("--config is required for this subcommand")
        config = {}
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(config, dict):
            raise UsageError("config root must be a JSON object")
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    return config


def _fnum(v: float) -> str:
    return f"{v:.17g}"


def _write_csv(path: Path, provenance: dict, header: list[str], rows) -> None:
    lines = [
        "# ivwald version={version} config_sha256={config_sha256} seed={seed}".format(
            **provenance
        ),
        ",".join(header),
    ]
    for row in rows:
        lines.append(",".join(
            _fnum(v) if isinstance(v, float) else ("" if v is None else str(v))
            for v in row
        ))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# fit


def _build_spec(table, config) -> WorkingModelSpec:
    columns = None
    if "models" in config:
        columns = {}
        for name, sel in config["models"].items():
            if name not in NUISANCES:
                raise UsageError(f"models: unknown nuisance {name!r}")
            columns[name] = tuple(int(c) for c in sel)
    spec = WorkingModelSpec.default(
        table.p, z_binary=table.z_binary, y_binary=table.y_binary, columns=columns
    )
    if "links" in config:
        fields = {name: spec.model(name) for name in NUISANCES}
        for name, link in config["links"].items():
            if name not in NUISANCES:
                raise UsageError(f"links: unknown nuisance {name!r}")
            try:
                fields[name] = NuisanceModel(Link(link), fields[name].columns)
            except ValueError:
                raise UsageError(f"links: unknown link {link!r}") from None
        spec = WorkingModelSpec(**fields)
    return spec.validate_against(table)


def cmd_fit(config: dict) -> int:
    _check_keys(
        config,
        {"input", "estimators", "models", "links", "bootstrap", "seed", "out",
         "ci_level", "threads"},
        "fit",
    )
    for key in ("input", "seed"):
        if key not in config:
            raise UsageError(f"fit: config key {key!r} is required")
    estimators = config.get("estimators", list(DEFAULT_ESTIMATORS))
    for est in estimators:
        if est not in ESTIMATOR_IDS:
            raise UsageError(f"fit: unknown estimator {est!r}")
    table = load_csv(config["input"])
    needs_spec = any(e not in ("crude_rd", "tsls") for e in estimators)
    spec = _build_spec(table, config) if needs_spec else None
    b = int(config.get("bootstrap", 0))
    seed = int(config["seed"])
    threads = int(config.get("threads", 1))
    level = float(config.get("ci_level", 0.95))
    results = []
    for est in estimators:
        if b >= 2:
            res = bootstrap(table, spec, est, b=b, seed=seed, threads=threads, level=level)
        else:
            res = point_estimate(table, spec, est)
        results.append(res)
    out = Path(config.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    provenance = _provenance(config)
    _write_json(out / "results.json", {
        "provenance": provenance,
        "results": [r.to_json_dict() for r in results],
    })
    _write_csv(
        out / "results.csv", provenance,
        ["estimator", "point", "se", "ci_lo", "ci_hi", "n"],
        [
            (r.estimator, r.point, r.se,
             r.ci[0] if r.ci else None, r.ci[1] if r.ci else None, r.n)
            for r in results
        ],
    )
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(config: dict) -> int:
    _check_keys(
        config,
        {"setting", "scenarios", "estimators", "n", "reps", "seed", "out",
         "dichotomize_q", "threads"},
        "simulate",
    )
    for key in ("setting", "n", "reps", "seed"):
        if key not in config:
            raise UsageError(f"simulate: config key {key!r} is required")
    scenario_names = config.get("scenarios", [s.value for s in Scenario])
    try:
        scenarios = [Scenario(s) for s in scenario_names]
    except ValueError as exc:
        raise UsageError(f"simulate: {exc}") from None
    estimators = config.get("estimators", list(DEFAULT_ESTIMATORS))
    for est in estimators:
        if est not in ESTIMATOR_IDS:
            raise UsageError(f"simulate: unknown estimator {est!r}")
    report = run_scenarios(
        int(config["setting"]), scenarios, estimators,
        n=int(config["n"]), reps=int(config["reps"]), seed=int(config["seed"]),
        dichotomize_q=config.get("dichotomize_q"),
        threads=int(config.get("threads", 1)),
    )
    out = Path(config.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    provenance = _provenance(config)
    table_rows = []
    for metric in ("bias", "mcse", "rmse"):
        for sc in report.scenarios:
            row = [metric, sc.value]
            row.extend(getattr(report.cell(sc, est), metric) for est in report.estimators)
            table_rows.append(row)
    _write_csv(out / "report.csv", provenance,
               ["metric", "scenario", *report.estimators], table_rows)
    _write_csv(
        out / "replicates.csv", provenance,
        ["replicate", "scenario", "estimator", "estimate"],
        ((r, sc, est, v if np.isfinite(v) else None)
         for r, sc, est, v in report.long_rows()),
    )
    cells = {
        f"{sc.value}/{est}": {
            "bias": stats.bias, "mcse": stats.mcse, "rmse": stats.rmse,
            "n_reps": stats.n_reps, "n_failed": stats.n_failed,
        }
        for (sc, est), stats in report.cells.items()
    }
    _write_json(out / "report.json", {
        "provenance": provenance,
        "setting": report.setting,
        "n": report.n,
        "reps": report.reps,
        "dichotomize_q": report.dichotomize_q,
        "true_ate": report.true_value,
        "true_ate_mcse": report.true_mcse,
        "cells": cells,
        "diagnostics": report.diagnostics,
    })
    return 0


# ---------------------------------------------------------------------------
# riesz-check


def _case_stein():
    law = gaussian_law()
    return verify_representation(
        lambda z, x: z, lambda z, x: 1.0, lambda z: z**3, lambda z: 3.0 * z**2, law
    )


def _case_gaussian_shift():
    law = gaussian_law(mean=1.5, sigma=0.8)
    gamma = lambda z, x: (z - 1.5) / 0.8**2
    return verify_representation(
        gamma, lambda z, x: 1.0, lambda z: z**2, lambda z: 2.0 * z, law
    )


def _case_uniform_linear():
    law = uniform_law(0.0, 1.0)
    return verify_representation(
        lambda z, x: z - 0.5, lambda z, x: z * (1.0 - z) / 2.0,
        lambda z: z**2, lambda z: 2.0 * z, law,
    )


def _case_stein_weight():
    law = gaussian_law()
    w = weight_from_rr(lambda z, x: z, law)
    grid = np.linspace(-4.0, 4.0, 33)
    return float(max(abs(w(z) - 1.0) for z in grid))


def _case_roundtrip_gaussian():
    return roundtrip_max_error(lambda z, x: z, gaussian_law())


def _case_roundtrip_uniform():
    return roundtrip_max_error(lambda z, x: z - 0.5, uniform_law(0.0, 1.0))


def _case_dichotomization():
    law = gaussian_law()
    gamma = dichotomization_rr(0.3, law)
    return abs(conditional_mean(gamma.evaluator, law))


def _case_categorical():
    law = categorical_law([1.0 / 3.0] * 3)
    gamma = rr_categorical({(2, 1): 1.0, (1, 0): 1.0, (2, 0): 0.0}, law)
    return abs(conditional_mean(gamma.evaluator, law))


RIESZ_CASES = {
    "stein": _case_stein,
    "gaussian-shift": _case_gaussian_shift,
    "uniform-linear": _case_uniform_linear,
    "stein-weight": _case_stein_weight,
    "roundtrip-gaussian": _case_roundtrip_gaussian,
    "roundtrip-uniform": _case_roundtrip_uniform,
    "dichotomization": _case_dichotomization,
    "categorical-mean-zero": _case_categorical,
}


def cmd_riesz_check(config: dict) -> int:
    _check_keys(config, {"cases", "tolerance", "seed", "out", "threads"}, "riesz-check")
    cases = config.get("cases", sorted(RIESZ_CASES))
    tol = float(config.get("tolerance", DEFAULT_RIESZ_TOL))
    for case in cases:
        if case not in RIESZ_CASES:
            raise UsageError(
                f"riesz-check: unknown case {case!r}; known: {sorted(RIESZ_CASES)}"
            )
    failing = []
    for case in cases:
        residual = RIESZ_CASES[case]()
        status = "PASS" if residual <= tol else "FAIL"
        print(f"{case}: residual={residual:.3e} tolerance={tol:.3e} {status}")
        if residual > tol:
            failing.append(case)
    if failing:
        print(f"failing cases: {', '.join(failing)}")
        return 1
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ivwald",
        description="Instrumental-variable ATE estimation, simulation, and self-checks.",
    )
    parser.add_argument("--version", action="version", version=f"ivwald {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("fit", "estimate treatment effects from a CSV dataset"),
        ("simulate", "run the replicated simulation study"),
        ("riesz-check", "run the representer self-check suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker cap (results unchanged)")
        p.add_argument("--out", help="override the output directory")
        if name == "riesz-check":
            p.add_argument("--case", action="append", dest="cases",
                           help="case id (repeatable; default: all)")
            p.add_argument("--tolerance", type=float, help="residual tolerance")
    args = parser.parse_args(argv)

    overrides = {"seed": args.seed, "threads": args.threads, "out": args.out}
    try:
        if args.command == "riesz-check":
            if args.cases is not None:
                overrides["cases"] = args.cases
            if args.tolerance is not None:
                overrides["tolerance"] = args.tolerance
            config = _load_config(args.config, overrides, required=False)
            return cmd_riesz_check(config)
        config = _load_config(args.config, overrides, required=True)
        if args.command == "fit":
            return cmd_fit(config)
        return cmd_simulate(config)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except IvwaldError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
