"""
Monte Carlo time-tag generation for a continuously pumped two-level emitter.

The emitter is an incoherent rate process: from the ground state it waits an
Exponential(gamma_p) time, gamma_p = beta*P/tau_rad, is excited, waits an
Exponential(1/tau_rad) time and emits. Each emission reaches the detectors
with probability collection_efficiency. Background is a homogeneous Poisson
process, the detector model thins, jitters and applies dead time, and the
HBT stage routes each tag to one of two detectors with probability 1/2.

Randomness: every operation takes an integer seed and draws from
numpy.random.default_rng(SeedSequence(seed)), i.e. PCG64. Exponential waits
use the inverse CDF, -log(1 - u)/rate. Child seeds are derived with
SeedSequence(seed, spawn_key=...) (see derive_seed).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import PS_PER_SECOND, CountRate, TimeTagStream, merge_streams
from .errors import ContractError, DomainError

logger = logging.getLogger(__name__)

# Upper bound on emission cycles drawn per block.
MAX_BLOCK = 1 << 22

# Stage keys for derive_seed within simulate_hbt.
STAGE_EMISSION = 0
STAGE_SPLIT = 1
STAGE_BACKGROUND = (2, 3)
STAGE_DETECTOR = (4, 5)
STAGE_BACKGROUND_ONLY = 6


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def derive_seed(seed: int, *spawn_key: int) -> int:
    """Child seed for a sub-stream, hashed from (seed, spawn_key)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    return int(ss.generate_state(1, np.uint64)[0])


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value}")


def _check_non_negative(name: str, value: float) -> None:
    if not value >= 0:
        raise DomainError(f"{name} must be non-negative, got {value}")


@dataclass(frozen=True)
class DetectorModel:
    """SNSPD-like detector: efficiency, Gaussian jitter, dead time, dark counts."""

    jitter_sigma_ps: float = 0.0
    dead_time_ps: int = 0
    dark_cps: float = 0.0
    efficiency: float = 1.0

    def __post_init__(self):
        _check_non_negative("jitter_sigma_ps", self.jitter_sigma_ps)
        _check_non_negative("dead_time_ps", self.dead_time_ps)
        _check_non_negative("dark_cps", self.dark_cps)
        _check_fraction("efficiency", self.efficiency)


@dataclass(frozen=True)
class EmitterScenario:
    """
    Physical parameters of one acquisition.

    background_cps is the total Poissonian background rate summed over both
    detectors, before detector efficiency. collection_efficiency lumps every
    loss between the emitter and the detector click, so DetectorModel
    efficiency normally stays at 1.
    """

    tau_rad_ps: float
    beta_per_uW: float
    pump_uW: float
    collection_efficiency: float
    background_cps: float = 0.0
    duration_ps: int = 10 * PS_PER_SECOND
    seed: int = 0
    detector: DetectorModel = field(default_factory=DetectorModel)

    def __post_init__(self):
        if not self.tau_rad_ps > 0:
            raise DomainError(f"tau_rad_ps must be positive, got {self.tau_rad_ps}")
        if not self.beta_per_uW > 0:
            raise DomainError(f"beta_per_uW must be positive, got {self.beta_per_uW}")
        _check_non_negative("pump_uW", self.pump_uW)
        _check_fraction("collection_efficiency", self.collection_efficiency)
        _check_non_negative("background_cps", self.background_cps)
        _check_non_negative("duration_ps", self.duration_ps)
        if not 0 <= self.seed < 2**64:
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def saturation_power_uW(self) -> float:
        return 1.0 / self.beta_per_uW

    @property
    def gamma_c_per_us(self) -> float:
        """Antibunching recovery rate (1 + beta*P)/tau_rad."""
        return (1.0 + self.beta_per_uW * self.pump_uW) / (self.tau_rad_ps * 1e-6)

    def at_power(self, pump_uW: float, seed: int | None = None) -> "EmitterScenario":
        return replace(self, pump_uW=pump_uW, seed=self.seed if seed is None else seed)


def expected_emission_rate(scenario: EmitterScenario) -> CountRate:
    """Stationary collected rate, eta/tau_rad * beta*P/(1 + beta*P)."""
    bp = scenario.beta_per_uW * scenario.pump_uW
    tau_s = scenario.tau_rad_ps / PS_PER_SECOND
    return CountRate(scenario.collection_efficiency / tau_s * bp / (1.0 + bp))


def expected_signal_fraction(scenario: EmitterScenario) -> float:
    """rho = S/(S + B) expected at the detectors, dead time ignored."""
    signal = expected_emission_rate(scenario).cps
    background = scenario.background_cps + 2 * scenario.detector.dark_cps
    if signal + background == 0:
        raise DomainError("signal and background are both zero")
    return signal / (signal + background)


def simulate_emission(scenario: EmitterScenario) -> TimeTagStream:
    """Collected emission times of one emitter on logical channel 0."""
    duration = scenario.duration_ps
    if scenario.pump_uW == 0 or duration == 0:
        return TimeTagStream.empty(duration)

    rng = make_rng(scenario.seed)
    gamma_r = 1.0 / scenario.tau_rad_ps
    gamma_p = scenario.beta_per_uW * scenario.pump_uW / scenario.tau_rad_ps
    mean_cycle = 1.0 / gamma_p + 1.0 / gamma_r
    block = int(min(MAX_BLOCK, max(64, math.ceil(1.05 * duration / mean_cycle) + 64)))

    kept = []
    t0 = 0.0
    while True:
        u = rng.random((2, block))
        cycle = -np.log1p(-u[0]) / gamma_p - np.log1p(-u[1]) / gamma_r
        emit = t0 + np.cumsum(cycle)
        end = int(np.searchsorted(emit, duration, side="right"))
        keep = rng.random(block) < scenario.collection_efficiency
        kept.append(emit[:end][keep[:end]])
        if end < block:
            break
        t0 = float(emit[-1])

    timestamps = np.floor(np.concatenate(kept)).astype(np.uint64)
    logger.info(
        "simulated %d collected photons over %.3f s at P=%.3g uW",
        timestamps.size, duration / PS_PER_SECOND, scenario.pump_uW,
    )
    return TimeTagStream(timestamps, np.zeros(timestamps.size, np.uint8), duration)


def add_background(
    stream: TimeTagStream,
    background_cps: float,
    dark_cps: float,
    seed: int,
    channel: int | None = None,
) -> TimeTagStream:
    """Superpose a homogeneous Poisson process of rate background + dark."""
    _check_non_negative("background_cps", background_cps)
    _check_non_negative("dark_cps", dark_cps)
    rate = background_cps + dark_cps
    if rate == 0:
        return stream

    if channel is None:
        present = stream.channel_set()
        if len(present) > 1:
            raise ContractError("channel must be given for a multi-channel stream")
        channel = present.pop() if present else 0

    rng = make_rng(seed)
    duration = stream.duration_ps
    n = int(rng.poisson(rate * duration / PS_PER_SECOND))
    times = np.sort(rng.integers(0, duration, size=n, endpoint=True, dtype=np.int64))
    noise = TimeTagStream(times.astype(np.uint64), np.full(n, channel, np.uint8), duration)
    logger.debug("added %d background tags on channel %d", n, channel)
    return merge_streams(stream, noise)


def _dead_time_mask(timestamps: np.ndarray, dead_time_ps: int) -> np.ndarray:
    """Keep mask for one channel: drop tags within dead_time of the last kept tag."""
    keep = np.ones(timestamps.size, dtype=bool)
    if dead_time_ps <= 0 or timestamps.size < 2:
        return keep
    ts = timestamps.tolist()
    # A tag far enough from its predecessor is always kept, so only close
    # followers need the sequential pass.
    candidates = (np.flatnonzero(np.diff(timestamps) < dead_time_ps) + 1).tolist()
    anchor = 0
    previous = -2
    for i in candidates:
        if i - 1 != previous:
            anchor = ts[i - 1]
        if ts[i] - anchor < dead_time_ps:
            keep[i] = False
        else:
            anchor = ts[i]
        previous = i
    return keep


def apply_detector(stream: TimeTagStream, model: DetectorModel, seed: int) -> TimeTagStream:
    """Efficiency thinning, then Gaussian jitter (re-sorted), then dead time per channel."""
    rng = make_rng(seed)
    ts = stream.timestamps.astype(np.int64)
    ch = stream.channels

    if model.efficiency < 1.0:
        keep = rng.random(ts.size) < model.efficiency
        ts, ch = ts[keep], ch[keep]

    if model.jitter_sigma_ps > 0 and ts.size:
        ts = ts + np.rint(rng.normal(0.0, model.jitter_sigma_ps, ts.size)).astype(np.int64)
        np.clip(ts, 0, stream.duration_ps, out=ts)
        order = np.lexsort((ch, ts))
        ts, ch = ts[order], ch[order]

    if model.dead_time_ps > 0 and ts.size:
        keep = np.ones(ts.size, dtype=bool)
        for channel in np.unique(ch).tolist():
            idx = np.flatnonzero(ch == channel)
            keep[idx] = _dead_time_mask(ts[idx], int(model.dead_time_ps))
        ts, ch = ts[keep], ch[keep]

    return TimeTagStream(ts.astype(np.uint64), ch, stream.duration_ps)


def hbt_split(stream: TimeTagStream, seed: int) -> tuple[TimeTagStream, TimeTagStream]:
    """Route each tag of a single-channel stream to detector 0 or 1 with p = 1/2."""
    if len(stream.channel_set()) > 1:
        raise ContractError("hbt_split expects a single-channel stream")
    rng = make_rng(seed)
    to_zero = rng.random(len(stream)) < 0.5
    ts = stream.timestamps
    return (
        TimeTagStream.single_channel(ts[to_zero], 0, stream.duration_ps),
        TimeTagStream.single_channel(ts[~to_zero], 1, stream.duration_ps),
    )


def simulate_hbt(scenario: EmitterScenario) -> tuple[TimeTagStream, TimeTagStream]:
    """Full acquisition: emission, 50:50 split, background, detectors."""
    seed = scenario.seed
    emission = simulate_emission(replace(scenario, seed=derive_seed(seed, STAGE_EMISSION)))
    halves = hbt_split(emission, derive_seed(seed, STAGE_SPLIT))

    detector = scenario.detector
    channels = []
    for channel, half in enumerate(halves):
        noisy = add_background(
            half,
            scenario.background_cps / 2,
            detector.dark_cps,
            derive_seed(seed, STAGE_BACKGROUND[channel]),
            channel=channel,
        )
        channels.append(apply_detector(noisy, detector, derive_seed(seed, STAGE_DETECTOR[channel])))
    return channels[0], channels[1]


def simulate_background_acquisition(scenario: EmitterScenario) -> tuple[TimeTagStream, TimeTagStream]:
    """
    Background-only acquisition, as measured with the filter detuned from the
    zero phonon line: no emitter photons, same background and detectors.
    """
    base = derive_seed(scenario.seed, STAGE_BACKGROUND_ONLY)
    detector = scenario.detector
    channels = []
    for channel in (0, 1):
        noisy = add_background(
            TimeTagStream.empty(scenario.duration_ps),
            scenario.background_cps / 2,
            detector.dark_cps,
            derive_seed(base, channel),
            channel=channel,
        )
        channels.append(apply_detector(noisy, detector, derive_seed(base, 2 + channel)))
    return channels[0], channels[1]


def poisson_stream(rate_cps: float, duration_ps: int, seed: int, channel: int = 0) -> TimeTagStream:
    """Uncorrelated Poisson stream on one channel."""
    return add_background(TimeTagStream.empty(duration_ps), rate_cps, 0.0, seed, channel=channel)


__all__ = [
    "DetectorModel",
    "EmitterScenario",
    "add_background",
    "apply_detector",
    "derive_seed",
    "expected_emission_rate",
    "expected_signal_fraction",
    "hbt_split",
    "make_rng",
    "poisson_stream",
    "simulate_background_acquisition",
    "simulate_emission",
    "simulate_hbt",
]
