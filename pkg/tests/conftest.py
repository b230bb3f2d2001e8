"""
Pytest configuration and shared fixtures for the hbtkit test suite.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from hbtkit.config import PipelineConfig, config_from_dict
from hbtkit.core import PS_PER_SECOND, TimeTagStream, sort_tags
from hbtkit.fits import lorentzian, saturation_model
from hbtkit.simulate import DetectorModel, EmitterScenario, poisson_stream

# Base paths
FIXTURES_DIR = Path(__file__).parent.parent / "fixtures"

# Paper-scale emitter
TAU_RAD_PS = 1_610_000
BETA_PER_UW = 1.075


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale closed-loop runs (minutes)")
    config.addinivalue_line("markers", "perf: throughput guard, needs HBTKIT_PERF_SECONDS")


def load_fixture(name: str) -> dict[str, Any]:
    """Load a JSON fixture file."""
    with open(FIXTURES_DIR / name, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def valid_config() -> dict[str, Any]:
    """Load the four-power sweep config."""
    return load_fixture("valid_config.json")


@pytest.fixture
def scenario_doc() -> dict[str, Any]:
    """Load the single-power scenario fixture."""
    return load_fixture("scenario.json")


@pytest.fixture
def tmp_outputs(tmp_path) -> Path:
    """Empty output directory for pipeline runs."""
    path = tmp_path / "out"
    path.mkdir()
    return path


@pytest.fixture
def perf_budget() -> float:
    """Seconds allowed for the correlator throughput guard."""
    value = os.environ.get("HBTKIT_PERF_SECONDS")
    if not value:
        pytest.skip("HBTKIT_PERF_SECONDS not set")
    return float(value)


def make_stream(
    timestamps=(),
    channels=None,
    duration_ps: int | None = None,
) -> TimeTagStream:
    """Helper to build a stream from unordered timestamps (channel 0 by default)."""
    ts = np.asarray(timestamps, dtype=np.uint64)
    ch = np.zeros(ts.size, np.uint8) if channels is None else np.asarray(channels, np.uint8)
    if duration_ps is None:
        duration_ps = int(ts.max()) + 1 if ts.size else 1000
    return sort_tags(ts, ch, duration_ps)


def make_poisson_stream(
    rate_cps: float = 1e5,
    duration_ps: int = PS_PER_SECOND // 10,
    seed: int = 0,
    channel: int = 0,
) -> TimeTagStream:
    """Helper to create an uncorrelated Poisson stream."""
    return poisson_stream(rate_cps, duration_ps, seed, channel=channel)


def make_scenario(
    tau_rad_ps: float = TAU_RAD_PS,
    beta_per_uW: float = BETA_PER_UW,
    pump_uW: float = 0.5,
    collection_efficiency: float = 0.05,
    background_cps: float = 0.0,
    duration_ps: int = PS_PER_SECOND,
    seed: int = 1,
    **detector: Any,
) -> EmitterScenario:
    """Helper to create an emitter scenario; extra keywords go to DetectorModel."""
    return EmitterScenario(
        tau_rad_ps=tau_rad_ps,
        beta_per_uW=beta_per_uW,
        pump_uW=pump_uW,
        collection_efficiency=collection_efficiency,
        background_cps=background_cps,
        duration_ps=duration_ps,
        seed=seed,
        detector=DetectorModel(**detector),
    )


def make_config(
    outputs: Path,
    powers_uW: list[float] | None = None,
    seed: int | None = None,
    **scenario: Any,
) -> PipelineConfig:
    """Helper to build a PipelineConfig from the fixture with overrides."""
    document = copy.deepcopy(load_fixture("valid_config.json"))
    document["outputs"] = str(outputs)
    if powers_uW is not None:
        document["powers_uW"] = powers_uW
    if seed is not None:
        document["seed"] = seed
    document["scenario"].update(scenario)
    return config_from_dict(document)


def make_spectrum(
    center_meV: float = 935.4,
    fwhm_ueV: float = 41.0,
    amplitude: float = 1000.0,
    offset: float = 20.0,
    n: int = 81,
    span_ueV: float = 400.0,
    noise: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Helper to create (energy meV, intensity) rows around a Lorentzian peak."""
    energy = center_meV + np.linspace(-span_ueV / 2, span_ueV / 2, n) / 1e3
    intensity = lorentzian(energy, center_meV, fwhm_ueV, amplitude, offset)
    if noise:
        rng = np.random.default_rng(seed)
        intensity = intensity * (1.0 + noise * rng.standard_normal(n))
    return np.column_stack([energy, intensity])


def make_saturation_points(
    I_sat: float = 2423.0,
    P_sat: float = 0.93,
    alpha: float = 50.0,
    powers=(0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0),
    integration_s: float | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Helper to create (P, rate, sigma) rows; Poisson-noised when integration_s is set."""
    power = np.asarray(powers, dtype=float)
    rate = saturation_model(power, (I_sat, P_sat, alpha))
    if integration_s is None:
        return np.column_stack([power, rate, np.ones_like(rate)])
    counts = np.random.default_rng(seed).poisson(rate * integration_s)
    sigma = np.sqrt(np.maximum(counts, 1)) / integration_s
    return np.column_stack([power, counts / integration_s, sigma])
