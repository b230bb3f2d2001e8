"""
The four model fits of the emitter characterisation, all on the shared
Levenberg-Marquardt engine in lm.py:

    saturation   I(P) = I_sat*P/(P + P_sat) + alpha*P
    antibunching g2(tau) = 1 - (1 - b)*exp(-gamma_c*|tau|)
    lifetime     gamma_c = c0 + c1*P,  tau_rad = 1/c0,  beta = c1/c0
    spectrum     offset + A*(G/2)^2/((E - E0)^2 + (G/2)^2)

The Lorentzian is fitted in micro-eV relative to the brightest sample so the
relative finite-difference step stays small against the linewidth. It is
not deconvolved from the spectrometer resolution.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import CountRate
from .correlate import CorrelationHistogram, poisson_sigmas
from .errors import ContractError, DegenerateFitError, FitError, FitRangeWarning
from .lm import FitResult, lm_fit

logger = logging.getLogger(__name__)

PS_PER_US = 1e6
# A dip shallower than this many standard errors is not antibunching.
MIN_DIP_SIGNIFICANCE = 3.0

SATURATION_NAMES = ("I_sat", "P_sat", "alpha")
G2_NAMES = ("g2_zero", "gamma_c_per_us")
LIFETIME_NAMES = ("c0", "c1")
LORENTZIAN_NAMES = ("center_offset_ueV", "fwhm_ueV", "amplitude", "offset")


@dataclass(frozen=True)
class SaturationParams:
    I_sat: CountRate
    P_sat: float
    alpha: float
    I_sat_err: float = float("nan")
    P_sat_err: float = float("nan")
    alpha_err: float = float("nan")

    def __post_init__(self):
        if not self.P_sat > 0:
            raise DegenerateFitError(f"saturation power must be positive, got {self.P_sat}")


@dataclass(frozen=True)
class G2Params:
    g2_zero: float
    gamma_c_per_us: float
    g2_zero_err: float = float("nan")
    gamma_c_err_per_us: float = float("nan")

    def __post_init__(self):
        if not self.gamma_c_per_us > 0:
            raise DegenerateFitError(
                f"antibunching recovery rate must be positive, got {self.gamma_c_per_us}"
            )
        if not 0.0 <= self.g2_zero <= 1.5:
            warnings.warn(
                f"fitted g2(0) = {self.g2_zero:.4f} lies outside [0, 1.5]",
                FitRangeWarning,
                stacklevel=3,
            )


@dataclass(frozen=True)
class LifetimeParams:
    tau_rad_us: float
    beta_per_uW: float
    tau_rad_err_us: float = float("nan")
    beta_err_per_uW: float = float("nan")

    def __post_init__(self):
        if not (self.tau_rad_us > 0 and self.beta_per_uW > 0):
            raise DegenerateFitError(
                f"nonphysical lifetime fit: tau_rad={self.tau_rad_us} us, beta={self.beta_per_uW} /uW"
            )


@dataclass(frozen=True)
class LorentzianParams:
    center_meV: float
    fwhm_ueV: float
    amplitude: float
    offset: float
    center_err_meV: float = float("nan")
    fwhm_err_ueV: float = float("nan")

    def __post_init__(self):
        if not self.fwhm_ueV > 0:
            raise DegenerateFitError(f"linewidth must be positive, got {self.fwhm_ueV}")


def saturation_model(power, theta):
    i_sat, p_sat, alpha = theta
    return i_sat * power / (power + p_sat) + alpha * power


def g2_model(tau, theta):
    b, gamma_c = theta
    return 1.0 - (1.0 - b) * np.exp(-gamma_c * np.abs(tau))


def lifetime_model(power, theta):
    c0, c1 = theta
    return c0 + c1 * power


def lorentzian_model(x, theta):
    x0, fwhm, amplitude, offset = theta
    half = (fwhm / 2.0) ** 2
    return offset + amplitude * half / ((x - x0) ** 2 + half)


def lorentzian(energy_meV, center_meV, fwhm_ueV, amplitude, offset=0.0):
    """Physical-unit Lorentzian, energies in meV, width in micro-eV."""
    x = (np.asarray(energy_meV, dtype=float) - center_meV) * 1e3
    return lorentzian_model(x, (0.0, fwhm_ueV, amplitude, offset))


def _columns(points, name: str, minimum: int) -> np.ndarray:
    data = np.asarray(points, dtype=float)
    if data.ndim != 2 or data.shape[1] not in (2, 3):
        raise FitError(f"{name} points must be (x, y) or (x, y, sigma) rows")
    if data.shape[0] < minimum:
        raise DegenerateFitError(f"{name} fit needs at least {minimum} points, got {data.shape[0]}")
    if data.shape[1] == 2:
        data = np.column_stack([data, np.ones(data.shape[0])])
    return data


def fit_saturation(points) -> tuple[SaturationParams, FitResult]:
    """Points are (P uW, rate cps, sigma cps) rows; at least 4."""
    data = _columns(points, "saturation", 4)
    power, rate, sigma = data.T
    if np.any(power < 0):
        raise FitError("pump powers must be non-negative")
    positive = power[power > 0]
    p_init = float(np.median(power))
    if p_init <= 0:
        p_init = float(positive.min()) if positive.size else 1.0
    init = [float(rate.max()), p_init, 0.0]

    result = lm_fit(saturation_model, power, rate, sigma, init)
    err = result.stderr
    i_sat, p_sat, alpha = result.params
    if i_sat < 0:
        raise DegenerateFitError(f"negative saturation count rate {i_sat:.4g} cps")
    params = SaturationParams(
        I_sat=CountRate(float(i_sat)),
        P_sat=float(p_sat),
        alpha=float(alpha),
        I_sat_err=float(err[0]),
        P_sat_err=float(err[1]),
        alpha_err=float(err[2]),
    )
    logger.info("saturation fit: I_sat=%.1f cps, P_sat=%.3f uW, alpha=%.2f", i_sat, p_sat, alpha)
    return params, result


def _g2_init(taus: np.ndarray, values: np.ndarray) -> list[float]:
    b0 = float(values.min())
    threshold = 1.0 - (1.0 - b0) / math.e
    distance = np.abs(taus)
    # Fold the two sides, then walk outwards to the 1/e recovery point.
    levels = np.unique(distance)
    folded = np.array([values[distance == d].mean() for d in levels])
    crossed = np.flatnonzero(folded >= threshold)
    if crossed.size:
        tau_e = float(levels[crossed[0]])
    else:
        tau_e = float(levels[-1]) / 2.0
    tau_e = max(tau_e, float(levels[0]))
    return [b0, 1.0 / tau_e]


def fit_g2_curve(
    taus_ps,
    values,
    sigmas,
    *,
    time_unit_ps: float = PS_PER_US,
) -> tuple[G2Params, FitResult]:
    """
    Fit the double-sided antibunching model to (tau, g2) samples.

    Delays are rescaled to time_unit_ps before fitting (microseconds by
    default); the reported rate is always per microsecond.
    """
    taus = np.asarray(taus_ps, dtype=float) / time_unit_ps
    values = np.asarray(values, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if taus.size < 3:
        raise DegenerateFitError("antibunching fit needs at least 3 bins")

    result = lm_fit(g2_model, taus, values, sigmas, _g2_init(taus, values))
    b, gamma = result.params
    err = result.stderr
    per_us = PS_PER_US / time_unit_ps
    depth = 1.0 - b
    if result.converged and not depth >= MIN_DIP_SIGNIFICANCE * err[0]:
        result = replace(
            result,
            converged=False,
            message=f"no significant antibunching dip: 1 - g2(0) = {depth:.3g}, stderr {err[0]:.3g}",
        )
    if not result.converged:
        logger.warning("antibunching fit did not converge: %s", result.message)
    params = G2Params(
        g2_zero=float(b),
        gamma_c_per_us=float(gamma * per_us),
        g2_zero_err=float(err[0]),
        gamma_c_err_per_us=float(err[1] * per_us),
    )
    return params, result


def fit_g2(
    hist: CorrelationHistogram,
    sigmas=None,
    *,
    time_unit_ps: float = PS_PER_US,
) -> tuple[G2Params, FitResult]:
    """Fit a normalized histogram; Poisson weights by default."""
    if not hist.normalized:
        raise ContractError("fit_g2 needs a normalized histogram")
    if sigmas is None:
        sigmas = poisson_sigmas(hist)
    return fit_g2_curve(hist.centers_ps, hist.values, sigmas, time_unit_ps=time_unit_ps)


def _line_through(power: np.ndarray, gamma: np.ndarray, sigma: np.ndarray) -> FitResult:
    """Two points fix the line exactly; errors come from the sigmas alone."""
    design = np.column_stack([np.ones_like(power), power]) / sigma[:, None]
    params = np.linalg.solve(design, gamma / sigma)
    return FitResult(
        params=params,
        covariance=np.linalg.inv(design.T @ design),
        chi2_reduced=float("nan"),
        iterations=0,
        converged=True,
        message="line through two points",
        cost=0.0,
        cost_history=(0.0,),
    )


def fit_lifetime(points, *, weighted: bool = True) -> tuple[LifetimeParams, FitResult]:
    """
    Points are (P uW, gamma_c per us, sigma) rows. The line
    gamma_c = c0 + c1*P gives tau_rad = 1/c0 and beta = c1/c0.
    """
    data = _columns(points, "lifetime", 2)
    power, gamma, sigma = data.T
    if np.any(power < 0):
        raise FitError("pump powers must be non-negative")
    if np.unique(power).size < 2:
        raise DegenerateFitError("lifetime fit needs at least two distinct powers")
    if not weighted:
        sigma = np.ones_like(sigma)

    if power.size == 2:
        result = _line_through(power, gamma, sigma)
    else:
        result = lm_fit(lifetime_model, power, gamma, sigma, [float(gamma.mean()), 0.0])
    c0, c1 = result.params
    if c0 <= 0:
        raise DegenerateFitError(f"intercept {c0:.4g} /us gives a nonphysical lifetime")

    cov = result.covariance
    tau = 1.0 / c0
    beta = c1 / c0
    tau_err = math.sqrt(cov[0, 0]) / c0**2 if cov[0, 0] >= 0 else float("nan")
    # beta = c1/c0: gradient (-c1/c0^2, 1/c0)
    grad = np.array([-c1 / c0**2, 1.0 / c0])
    beta_var = float(grad @ cov @ grad)
    params = LifetimeParams(
        tau_rad_us=float(tau),
        beta_per_uW=float(beta),
        tau_rad_err_us=float(tau_err),
        beta_err_per_uW=math.sqrt(beta_var) if beta_var >= 0 else float("nan"),
    )
    logger.info("lifetime fit: tau_rad=%.4f us, beta=%.4f /uW", tau, beta)
    return params, result


def _half_max_width(x: np.ndarray, y: np.ndarray, peak: int, level: float) -> float:
    def crossing(step: int) -> float:
        i = peak
        while 0 <= i + step < x.size and y[i + step] >= level:
            i += step
        j = i + step
        if not 0 <= j < x.size:
            return float(x[i])
        # linear interpolation between the last point above and first below
        return float(x[i] + (x[j] - x[i]) * (y[i] - level) / (y[i] - y[j]))

    width = crossing(1) - crossing(-1)
    spacing = float(np.min(np.diff(x))) if x.size > 1 else 1.0
    return max(width, spacing)


def fit_lorentzian(spectrum, sigmas=None) -> tuple[LorentzianParams, FitResult]:
    """Spectrum rows are (energy meV, intensity); at least 5 points across the peak."""
    data = np.asarray(spectrum, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise FitError("spectrum must be (energy, intensity) rows")
    if data.shape[0] < 5:
        raise DegenerateFitError(f"Lorentzian fit needs at least 5 points, got {data.shape[0]}")
    order = np.argsort(data[:, 0], kind="stable")
    energy, intensity = data[order].T
    sigmas = np.ones_like(intensity) if sigmas is None else np.asarray(sigmas, float)[order]

    peak = int(np.argmax(intensity))
    reference = float(energy[peak])
    x = (energy - reference) * 1e3
    low, high = float(intensity.min()), float(intensity.max())
    fwhm0 = _half_max_width(x, intensity, peak, low + (high - low) / 2.0)
    init = [0.0, fwhm0, high - low, low]

    result = lm_fit(lorentzian_model, x, intensity, sigmas, init)
    x0, fwhm, amplitude, offset = result.params
    err = result.stderr
    params = LorentzianParams(
        center_meV=reference + x0 / 1e3,
        fwhm_ueV=abs(float(fwhm)),
        amplitude=float(amplitude),
        offset=float(offset),
        center_err_meV=float(err[0]) / 1e3,
        fwhm_err_ueV=float(err[1]),
    )
    logger.info("Lorentzian fit: E0=%.4f meV, FWHM=%.2f ueV", params.center_meV, params.fwhm_ueV)
    return params, result
