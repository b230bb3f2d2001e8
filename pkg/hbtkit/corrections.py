"""
Closed-form corrections applied after the fits:

- signal fraction rho = S/(S + B)
- background-corrected g2, g2 = (C - (1 - rho^2))/rho^2, and its inverse
- g2(0)-corrected brightness, I_corr = (I_det - B)*sqrt(1 - g2(0))
- lensed-fiber coupling efficiency from the round trip, R = eta^2*T_fc
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import CountRate
from .errors import CorrectionRangeWarning, DomainError

logger = logging.getLogger(__name__)

# Corrected g2 outside this range is kept but reported.
G2_RANGE = (0.0, 1.5)


@dataclass(frozen=True)
class SignalBackground:
    signal_cps: CountRate
    background_cps: CountRate

    @property
    def total_cps(self) -> float:
        return self.signal_cps.cps + self.background_cps.cps


@dataclass(frozen=True)
class EfficiencyBudget:
    reflectivity: float
    coupler_transmission: float
    eta: float

    def to_dict(self) -> dict:
        return {
            "reflectivity": self.reflectivity,
            "coupler_transmission": self.coupler_transmission,
            "eta": self.eta,
        }


def _cps(value: CountRate | float) -> float:
    return value.cps if isinstance(value, CountRate) else float(CountRate(float(value)))


def signal_background(detected_cps: CountRate | float, background_cps: CountRate | float) -> SignalBackground:
    """S = I_det - B from a detected rate and a separately measured background."""
    detected, background = _cps(detected_cps), _cps(background_cps)
    if detected < background:
        raise DomainError(f"detected rate {detected} cps is below the background {background} cps")
    return SignalBackground(CountRate(detected - background), CountRate(background))


def signal_fraction(sb: SignalBackground) -> float:
    total = sb.total_cps
    if total <= 0:
        raise DomainError("signal and background are both zero")
    return sb.signal_cps.cps / total


def _check_rho(rho: float) -> float:
    rho = float(rho)
    if not 0.0 < rho <= 1.0:
        raise DomainError(f"signal fraction must lie in (0, 1], got {rho}")
    return rho


def background_correct_g2(c_tau, rho: float, *, warn: bool = True):
    """
    Remove the uncorrelated background floor from a normalized coincidence
    curve. Values outside [0, 1.5] are returned unchanged with a
    CorrectionRangeWarning.
    """
    rho = _check_rho(rho)
    floor = 1.0 - rho * rho
    corrected = (np.asarray(c_tau, dtype=float) - floor) / (rho * rho)
    low, high = G2_RANGE
    outside = np.count_nonzero((corrected < low) | (corrected > high))
    if outside and warn:
        warnings.warn(
            f"{outside} corrected g2 value(s) outside [{low}, {high}] at rho={rho:.4f}",
            CorrectionRangeWarning,
            stacklevel=2,
        )
    if np.ndim(c_tau) == 0:
        return float(corrected)
    return corrected


def mix_g2(g2, rho: float):
    """Inverse of background_correct_g2: C = rho^2*g2 + 1 - rho^2."""
    rho = _check_rho(rho)
    mixed = rho * rho * np.asarray(g2, dtype=float) + (1.0 - rho * rho)
    return float(mixed) if np.ndim(g2) == 0 else mixed


def corrected_rate(detected: CountRate | float, background: CountRate | float, g2_zero: float) -> CountRate:
    detected_cps, background_cps = _cps(detected), _cps(background)
    if detected_cps < background_cps:
        raise DomainError(f"detected rate {detected_cps} cps is below the background {background_cps} cps")
    if g2_zero > 1.0:
        raise DomainError(f"g2(0) = {g2_zero} > 1: corrected brightness is undefined for bunched light")
    if g2_zero < 0.0:
        raise DomainError(f"g2(0) must be non-negative, got {g2_zero}")
    return CountRate((detected_cps - background_cps) * math.sqrt(1.0 - g2_zero))


def fiber_coupling_efficiency(reflectivity: float, coupler_transmission: float) -> EfficiencyBudget:
    """eta = sqrt(R/T_fc), assuming equal coupling in and out of the fiber."""
    if not 0.0 < coupler_transmission <= 1.0:
        raise DomainError(f"coupler transmission must lie in (0, 1], got {coupler_transmission}")
    if reflectivity < 0.0:
        raise DomainError(f"reflectivity must be non-negative, got {reflectivity}")
    if reflectivity > coupler_transmission:
        raise DomainError(
            f"reflectivity {reflectivity} exceeds coupler transmission {coupler_transmission} (eta > 1)"
        )
    eta = math.sqrt(reflectivity / coupler_transmission)
    return EfficiencyBudget(float(reflectivity), float(coupler_transmission), eta)


def collection_efficiency(*stages: float) -> float:
    """Product of per-stage efficiencies between the emitter and the detector click."""
    total = 1.0
    for stage in stages:
        if not 0.0 <= stage <= 1.0:
            raise DomainError(f"stage efficiency must lie in [0, 1], got {stage}")
        total *= stage
    return total


@dataclass(frozen=True)
class BrightnessComparison:
    rate_ratio: float
    collection_improvement: float


def brightness_comparison(
    corrected_cps: CountRate | float,
    reference_cps: CountRate | float,
    zpl_fraction_ratio: float = 1.0,
) -> BrightnessComparison:
    """
    Compare a corrected count rate against a reference device. The
    collection improvement also multiplies in how much dimmer the collected
    band is than the reference's (e.g. zero phonon line only vs sideband).
    """
    reference = _cps(reference_cps)
    if reference <= 0:
        raise DomainError("reference count rate must be positive")
    if not zpl_fraction_ratio > 0:
        raise DomainError(f"band ratio must be positive, got {zpl_fraction_ratio}")
    ratio = _cps(corrected_cps) / reference
    return BrightnessComparison(ratio, ratio * zpl_fraction_ratio)
