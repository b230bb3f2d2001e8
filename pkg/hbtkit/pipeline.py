"""
Pipeline stages behind the command line.

    simulate  powerNN_ch0.ttg, powerNN_ch1.ttg per power + manifest.json
    analyze   powerNN_g2.csv, powerNN_fit.json per power
    report    report.json, assembled from the per-power fits

Every stage is a pure function of the config and the files of the previous
stage; per-power work runs through joblib and gives the same bytes for any
n_jobs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from joblib import Parallel, delayed
from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match
from tqdm import tqdm

from .config import PipelineConfig
from .core import PS_PER_SECOND
from .correlate import (
    correlate,
    normalize,
    poisson_sigmas,
    read_histogram_csv,
    write_histogram_csv,
)
from .corrections import (
    background_correct_g2,
    corrected_rate,
    fiber_coupling_efficiency,
    signal_background,
    signal_fraction,
)
from .errors import CorrectionRangeWarning, DomainError, FitError, ManifestError, NormalizationError
from .fits import G2_NAMES, fit_g2, fit_g2_curve, fit_lifetime, fit_saturation
from .simulate import simulate_background_acquisition, simulate_hbt
from .ttg import read_ttg, write_ttg

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
REPORT = "report.json"
MANIFEST_VERSION = 1


def ttg_name(index: int, channel: int) -> str:
    return f"power{index:02d}_ch{channel}.ttg"


def g2_name(index: int) -> str:
    return f"power{index:02d}_g2.csv"


def fit_name(index: int) -> str:
    return f"power{index:02d}_fit.json"


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _dump_json(path: Path, document: Any) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def _load_json(path: Path) -> Any:
    if not path.exists():
        raise ManifestError("missing pipeline artifact", str(path))
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"not valid JSON: {exc.msg}", str(path)) from exc


def _prepare_outputs(outputs: Path) -> Path:
    try:
        outputs.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {outputs}: {exc.strerror}") from exc
    return outputs


def _per_power(config: PipelineConfig, func, *args, progress: bool = False) -> list:
    indices = range(len(config.powers_uW))
    jobs = (delayed(func)(config, index, *args) for index in indices)
    jobs = tqdm(jobs, total=len(indices), disable=not progress, desc=func.__name__, unit="power")
    return Parallel(n_jobs=config.n_jobs, prefer="threads")(jobs)


# -- simulate ----------------------------------------------------------------


def _simulate_power(config: PipelineConfig, index: int) -> dict:
    scenario = config.scenario_for(index)
    outputs = config.outputs
    files = {}
    for channel, stream in enumerate(simulate_hbt(scenario)):
        path = write_ttg(outputs / ttg_name(index, channel), stream)
        files[f"ch{channel}"] = {"name": path.name, "sha256": sha256_file(path), "count": len(stream)}

    # background-only acquisition with the filter off the emission line
    bg0, bg1 = simulate_background_acquisition(scenario)
    background_cps = (len(bg0) + len(bg1)) / (scenario.duration_ps / PS_PER_SECOND)
    logger.info(
        "power %d (%.3f uW): %d + %d tags, background %.1f cps",
        index, scenario.pump_uW, files["ch0"]["count"], files["ch1"]["count"], background_cps,
    )
    return {
        "index": index,
        "pump_uW": scenario.pump_uW,
        "seed": scenario.seed,
        "files": files,
        "background_cps": background_cps,
    }


def cmd_simulate(config: PipelineConfig, *, progress: bool = False) -> Path:
    """Write two .ttg files per power and the manifest describing them."""
    _prepare_outputs(config.outputs)
    entries = _per_power(config, _simulate_power, progress=progress)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": config.seed,
        "duration_ps": config.scenario.duration_ps,
        "powers": entries,
    }
    return _dump_json(config.outputs / MANIFEST, manifest)


def load_manifest(config: PipelineConfig) -> dict:
    manifest = _load_json(config.outputs / MANIFEST)
    powers = manifest.get("powers", [])
    if len(powers) != len(config.powers_uW):
        raise ManifestError(
            f"lists {len(powers)} powers, config has {len(config.powers_uW)}",
            str(config.outputs / MANIFEST),
        )
    return manifest


def _read_checked(outputs: Path, entry: dict) -> Any:
    path = outputs / entry["name"]
    if not path.exists():
        raise ManifestError("missing time-tag file", str(path))
    if sha256_file(path) != entry["sha256"]:
        raise ManifestError("SHA-256 digest does not match the manifest", str(path))
    return read_ttg(path)


# -- analyze -----------------------------------------------------------------


def _g2_summary(params, result) -> dict:
    summary = result.to_dict(G2_NAMES)
    summary["params"] = {"g2_zero": params.g2_zero, "gamma_c_per_us": params.gamma_c_per_us}
    summary["stderr"] = {
        "g2_zero": _finite(params.g2_zero_err),
        "gamma_c_per_us": _finite(params.gamma_c_err_per_us),
    }
    return summary


def _failed_fit(exc: Exception) -> dict:
    return {
        "params": None,
        "stderr": None,
        "chi2_reduced": None,
        "converged": False,
        "iterations": 0,
        "message": str(exc),
    }


def _finite(value) -> float | None:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _corrected_cps(index: int, corrected: dict, detected_cps: float, background_cps: float) -> float | None:
    if corrected["params"] is None or not corrected["converged"]:
        return None
    g2_zero = corrected["params"]["g2_zero"]
    if g2_zero < 0.0:
        warnings.warn(
            f"power {index}: corrected g2(0) = {g2_zero:.4f} < 0, using 0 for the brightness",
            CorrectionRangeWarning,
            stacklevel=3,
        )
        g2_zero = 0.0
    if g2_zero > 1.0:
        return None
    return corrected_rate(detected_cps, background_cps, g2_zero).cps


def _analyze_power(config: PipelineConfig, index: int, manifest: dict) -> dict:
    entry = manifest["powers"][index]
    outputs = config.outputs
    ch0 = _read_checked(outputs, entry["files"]["ch0"])
    ch1 = _read_checked(outputs, entry["files"]["ch1"])

    detected_cps = (len(ch0) + len(ch1)) / ch0.duration_s
    background_cps = float(entry["background_cps"])
    document = {
        "index": index,
        "pump_uW": entry["pump_uW"],
        "detected_cps": detected_cps,
        "background_cps": background_cps,
        "rho": None,
        "raw": None,
        "corrected": None,
        "corrected_cps": None,
    }

    counts = correlate(ch0, ch1, config.tau_max_ps, config.bin_width_ps)
    try:
        hist = normalize(counts)
    except NormalizationError as exc:
        logger.warning("power %d: %s", index, exc)
        write_histogram_csv(outputs / g2_name(index), counts)
        document["raw"] = document["corrected"] = _failed_fit(exc)
        _dump_json(outputs / fit_name(index), document)
        return document
    write_histogram_csv(outputs / g2_name(index), hist)

    try:
        document["raw"] = _g2_summary(*fit_g2(hist))
    except FitError as exc:
        document["raw"] = _failed_fit(exc)

    try:
        rho = signal_fraction(signal_background(detected_cps, background_cps))
        # noisy bins near the dip fall below zero after correction
        corrected_values = background_correct_g2(hist.values, rho, warn=False)
    except DomainError as exc:
        logger.warning("power %d: no background correction: %s", index, exc)
        document["corrected"] = _failed_fit(exc)
    else:
        document["rho"] = rho
        sigmas = poisson_sigmas(hist) / rho**2
        try:
            document["corrected"] = _g2_summary(*fit_g2_curve(hist.centers_ps, corrected_values, sigmas))
        except FitError as exc:
            document["corrected"] = _failed_fit(exc)

    document["corrected_cps"] = _corrected_cps(index, document["corrected"], detected_cps, background_cps)
    _dump_json(outputs / fit_name(index), document)
    return document


def cmd_analyze(config: PipelineConfig, *, progress: bool = False) -> list[dict]:
    manifest = load_manifest(config)
    return _per_power(config, _analyze_power, manifest, progress=progress)


def load_histogram(config: PipelineConfig, index: int):
    path = config.outputs / g2_name(index)
    if not path.exists():
        raise ManifestError("missing correlation histogram", str(path))
    return read_histogram_csv(path)


# -- report ------------------------------------------------------------------

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["powers", "summary"],
    "properties": {
        "powers": {"type": "array", "items": {"type": "object", "required": ["index", "converged"]}},
        "summary": {"type": "object"},
    },
}


@dataclass(frozen=True)
class PowerSummary:
    index: int
    pump_uW: float
    detected_cps: float
    background_cps: float
    rho: float | None
    raw_g2_zero: float | None
    g2_zero: float | None
    g2_zero_err: float | None
    gamma_c_per_us: float | None
    gamma_c_err_per_us: float | None
    corrected_cps: float | None
    converged: bool
    message: str = ""


@dataclass(frozen=True)
class GlobalSummary:
    tau_rad_us: float | None = None
    tau_rad_err_us: float | None = None
    beta_per_uW: float | None = None
    beta_err_per_uW: float | None = None
    I_sat_cps: float | None = None
    P_sat_uW: float | None = None
    alpha_cps_per_uW: float | None = None
    eta: float | None = None
    lifetime_message: str = ""
    saturation_message: str = ""


@dataclass(frozen=True)
class Report:
    powers: tuple[PowerSummary, ...]
    summary: GlobalSummary

    @property
    def flagged(self) -> list[int]:
        return [p.index for p in self.powers if not p.converged]

    @property
    def all_converged(self) -> bool:
        return not self.flagged and self.summary.tau_rad_us is not None

    def to_dict(self) -> dict:
        return {
            "powers": [asdict(p) for p in self.powers],
            "summary": asdict(self.summary),
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, document: dict) -> "Report":
        error = best_match(Draft202012Validator(REPORT_SCHEMA).iter_errors(document))
        if error is not None:
            raise ManifestError(f"{error.json_path}: {error.message}", REPORT)
        power_keys = {f.name for f in fields(PowerSummary)}
        summary_keys = {f.name for f in fields(GlobalSummary)}
        return cls(
            powers=tuple(
                PowerSummary(**{k: v for k, v in p.items() if k in power_keys})
                for p in document["powers"]
            ),
            summary=GlobalSummary(**{k: v for k, v in document["summary"].items() if k in summary_keys}),
        )


def _power_summary(document: dict) -> PowerSummary:
    raw, corrected = document["raw"], document["corrected"]
    params = corrected["params"] or {}
    stderr = corrected["stderr"] or {}
    converged = bool(raw["converged"] and corrected["converged"])
    message = "" if converged else (corrected["message"] if not corrected["converged"] else raw["message"])
    return PowerSummary(
        index=int(document["index"]),
        pump_uW=float(document["pump_uW"]),
        detected_cps=float(document["detected_cps"]),
        background_cps=float(document["background_cps"]),
        rho=_finite(document["rho"]),
        raw_g2_zero=(raw["params"] or {}).get("g2_zero"),
        g2_zero=params.get("g2_zero"),
        g2_zero_err=stderr.get("g2_zero"),
        gamma_c_per_us=params.get("gamma_c_per_us"),
        gamma_c_err_per_us=stderr.get("gamma_c_per_us"),
        corrected_cps=_finite(document["corrected_cps"]),
        converged=converged,
        message=message,
    )


def _lifetime(powers: list[PowerSummary]) -> dict:
    usable = [p for p in powers if p.converged and p.gamma_c_per_us is not None]
    if len(usable) < 2:
        return {"lifetime_message": f"lifetime fit needs 2 converged powers, have {len(usable)}"}
    weighted = all(p.gamma_c_err_per_us for p in usable)
    points = [
        (p.pump_uW, p.gamma_c_per_us, p.gamma_c_err_per_us if weighted else 1.0) for p in usable
    ]
    try:
        params, result = fit_lifetime(points, weighted=weighted)
    except FitError as exc:
        return {"lifetime_message": str(exc)}
    if not result.converged:
        return {"lifetime_message": result.message}
    return {
        "tau_rad_us": params.tau_rad_us,
        "tau_rad_err_us": _finite(params.tau_rad_err_us),
        "beta_per_uW": params.beta_per_uW,
        "beta_err_per_uW": _finite(params.beta_err_per_uW),
    }


def _saturation(powers: list[PowerSummary], duration_s: float) -> dict:
    if len(powers) < 4:
        return {"saturation_message": "saturation fit needs at least 4 powers"}
    points = [
        (p.pump_uW, p.detected_cps, math.sqrt(max(p.detected_cps * duration_s, 1.0)) / duration_s)
        for p in powers
    ]
    try:
        params, result = fit_saturation(points)
    except FitError as exc:
        return {"saturation_message": str(exc)}
    return {
        "I_sat_cps": params.I_sat.cps,
        "P_sat_uW": params.P_sat,
        "alpha_cps_per_uW": params.alpha,
        "saturation_message": "" if result.converged else result.message,
    }


def build_report(config: PipelineConfig) -> Report:
    manifest = load_manifest(config)
    documents = [_load_json(config.outputs / fit_name(i)) for i in range(len(config.powers_uW))]
    powers = [_power_summary(d) for d in documents]

    summary: dict[str, Any] = {}
    summary.update(_lifetime(powers))
    summary.update(_saturation(powers, manifest["duration_ps"] / PS_PER_SECOND))
    if config.budget is not None:
        try:
            summary["eta"] = fiber_coupling_efficiency(*config.budget).eta
        except DomainError as exc:
            summary["eta"] = None
            logger.warning("efficiency budget skipped: %s", exc)
    return Report(powers=tuple(powers), summary=GlobalSummary(**summary))


def cmd_report(config: PipelineConfig) -> Report:
    report = build_report(config)
    _dump_json(config.outputs / REPORT, report.to_dict())
    for index in report.flagged:
        logger.warning("power %d: fit did not converge", index)
    return report


def load_report(path: str | Path) -> Report:
    return Report.from_dict(_load_json(Path(path)))


def cmd_run(config: PipelineConfig, *, progress: bool = False) -> Report:
    cmd_simulate(config, progress=progress)
    cmd_analyze(config, progress=progress)
    return cmd_report(config)


def _fmt(value, spec: str, err=None) -> str:
    if value is None:
        return "-"
    text = format(value, spec)
    if err is not None:
        text += " +/- " + format(err, spec)
    return text


def format_report(report: Report) -> str:
    """Human-readable table for stdout."""
    lines = [
        f"{'#':>3} {'P (uW)':>8} {'I_det':>9} {'rho':>6} {'g2(0) raw':>10} "
        f"{'g2(0)':>16} {'gamma_c (/us)':>18} {'I_corr':>9}  status",
        "-" * 96,
    ]
    for p in report.powers:
        lines.append(
            f"{p.index:>3} {p.pump_uW:>8.3f} {p.detected_cps:>9.1f} {_fmt(p.rho, '.3f'):>6} "
            f"{_fmt(p.raw_g2_zero, '.3f'):>10} {_fmt(p.g2_zero, '.3f', p.g2_zero_err):>16} "
            f"{_fmt(p.gamma_c_per_us, '.3f', p.gamma_c_err_per_us):>18} "
            f"{_fmt(p.corrected_cps, '.1f'):>9}  {'ok' if p.converged else 'FLAGGED: ' + p.message}"
        )
    s = report.summary
    lines += [
        "-" * 96,
        f"tau_rad = {_fmt(s.tau_rad_us, '.4f', s.tau_rad_err_us)} us   "
        f"beta = {_fmt(s.beta_per_uW, '.4f', s.beta_err_per_uW)} /uW",
        f"I_sat = {_fmt(s.I_sat_cps, '.1f')} cps   P_sat = {_fmt(s.P_sat_uW, '.3f')} uW   "
        f"alpha = {_fmt(s.alpha_cps_per_uW, '.2f')} cps/uW",
        f"eta = {_fmt(s.eta, '.4f')}",
    ]
    for message in (s.lifetime_message, s.saturation_message):
        if message:
            lines.append(f"note: {message}")
    return "\n".join(lines)


__all__ = [
    "GlobalSummary",
    "PowerSummary",
    "Report",
    "build_report",
    "cmd_analyze",
    "cmd_report",
    "cmd_run",
    "cmd_simulate",
    "format_report",
    "load_histogram",
    "load_manifest",
    "load_report",
]
