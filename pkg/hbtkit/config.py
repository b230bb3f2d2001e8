"""
Pipeline configuration: one JSON document, validated against
PIPELINE_SCHEMA before any scenario object is built.

Durations may be integers (picoseconds) or strings with a unit suffix,
e.g. "600s", "10us", "10ns".
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from .errors import ConfigError, DomainError
from .simulate import DetectorModel, EmitterScenario, derive_seed

logger = logging.getLogger(__name__)

UNITS_PS = {"ps": 1, "ns": 10**3, "us": 10**6, "ms": 10**9, "s": 10**12}
_DURATION = re.compile(r"^\s*(\d+)\s*(ps|ns|us|ms|s)?\s*$")

_duration_schema = {
    "oneOf": [
        {"type": "integer", "minimum": 0},
        {"type": "string", "pattern": r"^\s*\d+\s*(ps|ns|us|ms|s)?\s*$"},
    ]
}
_fraction = {"type": "number", "minimum": 0, "maximum": 1}
_non_negative = {"type": "number", "minimum": 0}

PIPELINE_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["scenario", "powers_uW", "correlation", "outputs", "seed"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "powers_uW": {"type": "array", "minItems": 1, "items": _non_negative},
        "outputs": {"type": "string", "minLength": 1},
        "n_jobs": {"type": "integer", "not": {"const": 0}},
        "scenario": {
            "type": "object",
            "required": ["tau_rad_ps", "beta_per_uW", "collection_efficiency", "duration_ps"],
            "additionalProperties": False,
            "properties": {
                "tau_rad_ps": {"type": "number", "exclusiveMinimum": 0},
                "beta_per_uW": {"type": "number", "exclusiveMinimum": 0},
                "pump_uW": _non_negative,
                "collection_efficiency": _fraction,
                "background_cps": _non_negative,
                "duration_ps": _duration_schema,
                "seed": {"type": "integer", "minimum": 0},
                "detector": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "jitter_sigma_ps": _non_negative,
                        "dead_time_ps": _duration_schema,
                        "dark_cps": _non_negative,
                        "efficiency": _fraction,
                    },
                },
            },
        },
        "correlation": {
            "type": "object",
            "required": ["tau_max_ps", "bin_width_ps"],
            "additionalProperties": False,
            "properties": {
                "tau_max_ps": _duration_schema,
                "bin_width_ps": _duration_schema,
            },
        },
        "budget": {
            "type": "object",
            "required": ["reflectivity", "coupler_transmission"],
            "additionalProperties": False,
            "properties": {
                "reflectivity": _fraction,
                "coupler_transmission": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
    },
}

_validator = Draft202012Validator(PIPELINE_SCHEMA)


def parse_duration(value: int | str, path: str = "$") -> int:
    """'10us' -> 10_000_000; bare integers are picoseconds."""
    if isinstance(value, bool):
        raise ConfigError(f"not a duration: {value!r}", path)
    if isinstance(value, int):
        if value < 0:
            raise ConfigError(f"duration must be non-negative, got {value}", path)
        return value
    match = _DURATION.match(str(value))
    if not match:
        raise ConfigError(f"not a duration: {value!r} (use e.g. 600s, 10us, 10ns)", path)
    number, unit = match.groups()
    return int(number) * UNITS_PS[unit or "ps"]


@dataclass(frozen=True)
class PipelineConfig:
    scenario: EmitterScenario
    powers_uW: tuple[float, ...]
    tau_max_ps: int
    bin_width_ps: int
    outputs: Path
    seed: int
    budget: tuple[float, float] | None = None
    n_jobs: int = 1
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def power_seed(self, index: int) -> int:
        """Per-power sub-seed, hashed from (seed, power index)."""
        return derive_seed(self.seed, index)

    def scenario_for(self, index: int) -> EmitterScenario:
        return self.scenario.at_power(self.powers_uW[index], seed=self.power_seed(index))


def validate(document: Any) -> None:
    error = best_match(_validator.iter_errors(document))
    if error is not None:
        raise ConfigError(error.message, error.json_path)


def config_from_dict(document: dict, base_dir: str | os.PathLike | None = None) -> PipelineConfig:
    validate(document)
    scenario_doc = dict(document["scenario"])
    detector_doc = dict(scenario_doc.pop("detector", {}))
    if "dead_time_ps" in detector_doc:
        detector_doc["dead_time_ps"] = parse_duration(
            detector_doc["dead_time_ps"], "$.scenario.detector.dead_time_ps"
        )
    scenario_doc["duration_ps"] = parse_duration(scenario_doc["duration_ps"], "$.scenario.duration_ps")
    scenario_doc.setdefault("pump_uW", 0.0)
    scenario_doc.setdefault("seed", document["seed"])

    correlation = document["correlation"]
    tau_max = parse_duration(correlation["tau_max_ps"], "$.correlation.tau_max_ps")
    width = parse_duration(correlation["bin_width_ps"], "$.correlation.bin_width_ps")
    if width < 1:
        raise ConfigError("bin width must be at least 1 ps", "$.correlation.bin_width_ps")
    if tau_max < width:
        raise ConfigError(
            f"tau_max ({tau_max} ps) is smaller than the bin width ({width} ps)",
            "$.correlation.tau_max_ps",
        )

    try:
        scenario = EmitterScenario(detector=DetectorModel(**detector_doc), **scenario_doc)
    except DomainError as exc:
        raise ConfigError(str(exc), "$.scenario") from exc

    outputs = Path(document["outputs"])
    if base_dir is not None and not outputs.is_absolute():
        outputs = Path(base_dir) / outputs

    budget = document.get("budget")
    return PipelineConfig(
        scenario=scenario,
        powers_uW=tuple(float(p) for p in document["powers_uW"]),
        tau_max_ps=tau_max,
        bin_width_ps=width,
        outputs=outputs,
        seed=int(document["seed"]),
        budget=(budget["reflectivity"], budget["coupler_transmission"]) if budget else None,
        n_jobs=int(document.get("n_jobs", 1)),
        raw=document,
    )


def load_config(path: str | os.PathLike) -> PipelineConfig:
    """Read and validate a JSON config; relative outputs resolve against its folder."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    config = config_from_dict(document, base_dir=path.parent)
    logger.info("loaded config %s: %d powers, seed %d", path, len(config.powers_uW), config.seed)
    return config
