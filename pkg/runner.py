#!/usr/bin/env python3
"""
hbtkit command line

Simulate, correlate, fit and correct time-tagged photon data from a single
emitter measured in a Hanbury Brown and Twiss setup.

Usage:
    python runner.py run --config sweep.json          # simulate + analyze + report
    python runner.py simulate --config sweep.json     # .ttg files + manifest.json
    python runner.py correlate --ch0 a.ttg --ch1 b.ttg --tau-max 10us --bin-width 10ns
    python runner.py fit g2 --input power00_g2.csv
    python runner.py budget --reflectivity 0.42 --coupler-transmission 0.83
    python runner.py selftest --list                  # list test modules

Exit codes:
    0  success
    1  a fit did not converge (report, fit)
    2  invalid input, configuration or missing artifact
"""

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from hbtkit import __version__
from hbtkit.config import load_config, parse_duration
from hbtkit.correlate import correlate, normalize, poisson_sigmas, read_histogram_csv, write_histogram_csv
from hbtkit.corrections import (
    background_correct_g2,
    corrected_rate,
    fiber_coupling_efficiency,
    signal_background,
    signal_fraction,
)
from hbtkit.errors import ConfigError, HbtError
from hbtkit.fits import (
    LIFETIME_NAMES,
    LORENTZIAN_NAMES,
    SATURATION_NAMES,
    fit_g2,
    fit_lifetime,
    fit_lorentzian,
    fit_saturation,
)
from hbtkit.pipeline import cmd_analyze, cmd_report, cmd_run, cmd_simulate, format_report
from hbtkit.ttg import read_ttg

TESTS_DIR = Path(__file__).parent / "tests"

TEST_MODULES = [
    ("test_01_core_model", "Core Model", "Time tags, streams, energy conversions"),
    ("test_02_ttg_format", "Time-Tag Files", ".ttg reader and writer"),
    ("test_03_emitter_sim", "Emitter Simulation", "Two-level emitter, background, detectors"),
    ("test_04_correlator", "Correlator", "Coincidence histogram against brute force"),
    ("test_05_lm_engine", "Fit Engine", "Levenberg-Marquardt core"),
    ("test_06_model_fits", "Model Fits", "Saturation, g2, lifetime, Lorentzian"),
    ("test_07_corrections", "Corrections", "Background g2, brightness, efficiency"),
    ("test_08_pipeline_cli", "Pipeline", "Config, simulate, analyze, report"),
    ("test_09_acceptance", "Closed Loop", "Desk-scale recovery studies (slow)"),
]


def banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def clean(value) -> float | None:
    value = float(value)
    return value if np.isfinite(value) else None


def emit_json(document: dict, output: str | None) -> None:
    text = json.dumps(document, indent=2, ensure_ascii=False)
    if output:
        Path(output).write_text(text + "\n", encoding="utf-8")
        print(f"Saved to: {output}")
    else:
        print(text)


def read_points(path: str) -> np.ndarray:
    """First two or three numeric columns of a CSV: x, y[, sigma]."""
    frame = pd.read_csv(path, comment="#").select_dtypes("number")
    if frame.shape[1] < 2:
        raise ConfigError(f"{path}: need at least two numeric columns")
    return frame.iloc[:, :3].to_numpy(dtype=float)


# -- subcommands --------------------------------------------------------------


def cmd_correlate(args) -> int:
    ch0, ch1 = read_ttg(args.ch0), read_ttg(args.ch1)
    tau_max = parse_duration(args.tau_max, "--tau-max")
    width = parse_duration(args.bin_width, "--bin-width")
    hist = correlate(ch0, ch1, tau_max, width, n_jobs=args.n_jobs, engine=args.engine)
    if not args.raw:
        hist = normalize(hist)
    write_histogram_csv(args.output, hist)

    banner("CORRELATION")
    print(f"Start tags:    {hist.n_start}")
    print(f"Stop tags:     {hist.n_stop}")
    print(f"Window:        +/-{tau_max} ps in {hist.n_bins} bins of {width} ps")
    print(f"Coincidences:  {hist.total}")
    print(f"Saved to: {args.output}")
    return 0


def _fit_output(summary: dict, args) -> int:
    emit_json(summary, args.output)
    return 0 if summary["converged"] else 1


def cmd_fit(args) -> int:
    if args.model == "g2":
        hist = read_histogram_csv(args.input)
        if not hist.normalized:
            hist = normalize(hist)
        params, result = fit_g2(hist)
        summary = result.to_dict(("g2_zero", "gamma_c_per_us"))
        summary["stderr"] = {
            "g2_zero": clean(params.g2_zero_err),
            "gamma_c_per_us": clean(params.gamma_c_err_per_us),
        }
        return _fit_output(summary, args)

    points = read_points(args.input)
    if args.model == "saturation":
        _, result = fit_saturation(points)
        return _fit_output(result.to_dict(SATURATION_NAMES), args)
    if args.model == "lifetime":
        params, result = fit_lifetime(points, weighted=not args.unweighted)
        summary = result.to_dict(LIFETIME_NAMES)
        summary["derived"] = {
            "tau_rad_us": params.tau_rad_us,
            "tau_rad_err_us": clean(params.tau_rad_err_us),
            "beta_per_uW": params.beta_per_uW,
            "beta_err_per_uW": clean(params.beta_err_per_uW),
        }
        return _fit_output(summary, args)

    sigmas = points[:, 2] if points.shape[1] == 3 else None
    params, result = fit_lorentzian(points[:, :2], sigmas)
    summary = result.to_dict(LORENTZIAN_NAMES)
    summary["derived"] = {"center_meV": params.center_meV, "fwhm_ueV": params.fwhm_ueV}
    return _fit_output(summary, args)


def _rho(args) -> float:
    if args.rho is not None:
        return args.rho
    if args.signal is None or args.background is None:
        raise ConfigError("give --rho or both --detected and --background", "--rho")
    return signal_fraction(signal_background(args.signal, args.background))


def cmd_correct(args) -> int:
    if args.kind == "rate":
        rate = corrected_rate(args.detected, args.background, args.g2_zero)
        emit_json({"corrected_cps": rate.cps}, args.output)
        return 0

    hist = read_histogram_csv(args.input)
    if not hist.normalized:
        hist = normalize(hist)
    rho = _rho(args)
    frame = pd.DataFrame({
        "tau_ps": hist.centers_ps,
        "g2": background_correct_g2(hist.values, rho),
        "sigma": poisson_sigmas(hist) / rho**2,
    })
    frame.to_csv(args.output, index=False, float_format="%.17g")
    print(f"rho = {rho:.4f}; corrected g2 saved to: {args.output}")
    return 0


def cmd_budget(args) -> int:
    budget = fiber_coupling_efficiency(args.reflectivity, args.coupler_transmission)
    emit_json(budget.to_dict(), args.output)
    return 0


def _report_exit(report, args) -> int:
    banner("HBT REPORT")
    print(format_report(report))
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, ensure_ascii=False))
    if report.all_converged:
        print("\n  *** ALL FITS CONVERGED ***")
        return 0
    print(f"\n  !!! UNCONVERGED FITS at powers {report.flagged} - see table above !!!")
    return 1


def cmd_pipeline(args) -> int:
    config = load_config(args.config)
    progress = args.verbose > 0
    if args.command == "simulate":
        path = cmd_simulate(config, progress=progress)
        print(f"Manifest saved to: {path}")
        return 0
    if args.command == "analyze":
        documents = cmd_analyze(config, progress=progress)
        print(f"Analyzed {len(documents)} powers in {config.outputs}")
        return 0
    if args.command == "report":
        return _report_exit(cmd_report(config), args)
    return _report_exit(cmd_run(config, progress=progress), args)


def run_tests(test_filter: str | None = None, marker: str | None = None, verbose: bool = False) -> int:
    """Run the pytest suite and return its exit code."""
    cmd = [sys.executable, "-m", "pytest", str(TESTS_DIR), "-v" if verbose else "-q", "--tb=short"]
    if test_filter:
        cmd.extend(["-k", test_filter])
    if marker:
        cmd.extend(["-m", marker])
    return subprocess.run(cmd).returncode


def cmd_selftest(args) -> int:
    if args.list:
        print("Available test modules:")
        print("-" * 60)
        for module, name, description in TEST_MODULES:
            print(f"  {module}: {name}")
            print(f"           {description}")
        return 0
    return run_tests(args.test, args.marker, args.verbose > 0)


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="hbtkit: single-emitter HBT simulation and analysis",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python runner.py run --config fixtures/valid_config.json
  python runner.py correlate --ch0 out/power00_ch0.ttg --ch1 out/power00_ch1.ttg \\
      --tau-max 10us --bin-width 10ns --output g2.csv
  python runner.py fit lifetime --input gamma_vs_power.csv --unweighted
  python runner.py correct rate --detected 1500 --background 100 --g2-zero 0.19
  python runner.py selftest -m "not slow"

Durations accept ps, ns, us, ms and s suffixes; bare integers are picoseconds.
        """,
    )
    parser.add_argument("--version", action="version", version=f"hbtkit {__version__}")
    parser.add_argument("--verbose", "-v", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("simulate", "Simulate .ttg files for every power in the sweep"),
        ("analyze", "Correlate and fit every simulated power"),
        ("report", "Assemble report.json from the per-power fits"),
        ("run", "simulate + analyze + report"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", required=True, help="Pipeline JSON config")
        if name in ("report", "run"):
            p.add_argument("--json", action="store_true", help="Also print the report JSON")
        p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("correlate", help="Coincidence histogram of two .ttg files")
    p.add_argument("--ch0", required=True, help="Start channel .ttg")
    p.add_argument("--ch1", required=True, help="Stop channel .ttg")
    p.add_argument("--tau-max", required=True, help="Half window, e.g. 10us")
    p.add_argument("--bin-width", required=True, help="Bin width, e.g. 10ns")
    p.add_argument("--output", "-o", default="g2.csv", help="Histogram CSV (default: g2.csv)")
    p.add_argument("--raw", action="store_true", help="Write raw counts without normalization")
    p.add_argument("--n-jobs", type=int, default=1, help="Worker threads for the sweep")
    p.add_argument("--engine", choices=("auto", "numba", "numpy"), default="auto")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("fit", help="Fit one of the four models to a CSV")
    p.add_argument("model", choices=("saturation", "g2", "lifetime", "lorentzian"))
    p.add_argument("--input", "-i", required=True, help="Histogram CSV (g2) or x,y[,sigma] CSV")
    p.add_argument("--output", "-o", help="JSON output file (default: stdout)")
    p.add_argument("--unweighted", action="store_true", help="Lifetime: ignore the sigma column")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("correct", help="Background-corrected g2 or corrected brightness")
    p.add_argument("kind", choices=("g2", "rate"))
    p.add_argument("--input", "-i", help="g2: histogram CSV")
    p.add_argument("--output", "-o", help="g2: corrected CSV; rate: JSON file (default: stdout)")
    p.add_argument("--rho", type=float, help="g2: signal fraction S/(S+B)")
    p.add_argument("--signal", "--detected", dest="signal", type=float, help="Detected rate I_det (cps)")
    p.add_argument("--background", type=float, help="Background rate B (cps)")
    p.add_argument("--g2-zero", type=float, help="rate: g2(0) used in the correction")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("budget", help="Lensed-fiber coupling efficiency from the round trip")
    p.add_argument("--reflectivity", "-R", type=float, required=True)
    p.add_argument("--coupler-transmission", "-T", type=float, required=True)
    p.add_argument("--output", "-o", help="JSON output file (default: stdout)")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("selftest", help="Run the test suite")
    p.add_argument("--test", "-t", help="Run a specific test module or filter")
    p.add_argument("--marker", "-m", help='pytest marker expression, e.g. "not slow"')
    p.add_argument("--list", "-l", action="store_true", help="List all test modules")
    p.set_defaults(func=cmd_selftest)
    return parser


def _check_correct_args(args) -> None:
    if args.command != "correct":
        return
    if args.kind == "rate":
        missing = [f for f in ("signal", "background", "g2_zero") if getattr(args, f) is None]
        if missing:
            raise ConfigError(f"correct rate needs {', '.join(missing)}", "--" + missing[0].replace("_", "-"))
        args.detected = args.signal
    elif args.input is None or args.output is None:
        raise ConfigError("correct g2 needs --input and --output", "--input")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        _check_correct_args(args)
        return args.func(args)
    except (HbtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
