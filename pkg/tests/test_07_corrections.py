"""
Test 07: Corrections

Validates the closed-form corrections:
- Background-corrected g2 and its inverse
- g2(0)-corrected brightness (I_det - B)*sqrt(1 - g2(0))
- Coupling efficiency from the fiber round trip and the brightness comparison
"""

import math
import warnings

import numpy as np
import pytest

from hbtkit.core import CountRate
from hbtkit.corrections import (
    background_correct_g2,
    brightness_comparison,
    collection_efficiency,
    corrected_rate,
    fiber_coupling_efficiency,
    mix_g2,
    signal_background,
    signal_fraction,
)
from hbtkit.errors import CorrectionRangeWarning, DomainError


class TestSignalFraction:
    """
    Tests rho = S/(S + B).
    """

    @pytest.mark.parametrize(
        "detected, background, rho",
        [(1000.0, 240.0, 0.76), (1000.0, 130.0, 0.87), (2000.0, 400.0, 0.80)],
    )
    def test_examples(self, detected: float, background: float, rho: float):
        """Detected rate and background give rho."""
        sb = signal_background(detected, background)
        assert signal_fraction(sb) == pytest.approx(rho)
        assert sb.total_cps == pytest.approx(detected)

    def test_background_above_detected(self):
        """A background above the detected rate is a domain error."""
        with pytest.raises(DomainError):
            signal_background(100.0, 150.0)

    def test_both_zero(self):
        """No light at all has no signal fraction."""
        with pytest.raises(DomainError):
            signal_fraction(signal_background(0.0, 0.0))

    def test_accepts_count_rates(self):
        """CountRate and float inputs are interchangeable."""
        assert signal_background(CountRate(500.0), 100.0) == signal_background(500.0, CountRate(100.0))


class TestBackgroundCorrection:
    """
    Tests background_correct_g2 and mix_g2.
    """

    def test_example(self):
        """C = 0.488 at rho = 0.8 corrects to 0.2."""
        assert background_correct_g2(0.488, 0.8) == pytest.approx(0.2)

    def test_identity_at_rho_one(self):
        """Without background nothing changes."""
        values = np.linspace(0.0, 1.4, 15)
        assert background_correct_g2(values, 1.0) == pytest.approx(values)

    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.2])
    def test_invalid_rho(self, rho: float):
        """rho must lie in (0, 1]."""
        with pytest.raises(DomainError):
            background_correct_g2(0.5, rho)
        with pytest.raises(DomainError):
            mix_g2(0.5, rho)

    def test_inverse_of_mixing(self):
        """Correcting a mixed curve returns the pure curve."""
        rng = np.random.default_rng(12)
        for _ in range(100):
            g2 = rng.uniform(0.01, 1.49, 50)
            rho = float(rng.uniform(0.3, 1.0))
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                back = background_correct_g2(mix_g2(g2, rho), rho)
            assert back == pytest.approx(g2, abs=1e-9)

    def test_flat_curve_stays_flat(self):
        """An uncorrelated floor at 1 corrects to 1."""
        assert background_correct_g2(np.ones(10), 0.5) == pytest.approx(np.ones(10))

    def test_out_of_range_warns_not_clamps(self):
        """Corrected values below 0 are reported and kept."""
        with pytest.warns(CorrectionRangeWarning):
            value = background_correct_g2(0.2, 0.8)
        assert value == pytest.approx((0.2 - 0.36) / 0.64)
        assert value < 0

    def test_warning_can_be_silenced(self):
        """warn=False suppresses the range warning."""
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            background_correct_g2(np.array([0.0, 2.0]), 0.9, warn=False)

    def test_scalar_in_scalar_out(self):
        """Scalars come back as floats, arrays as arrays."""
        assert isinstance(background_correct_g2(0.9, 0.9), float)
        assert isinstance(mix_g2(0.5, 0.9), float)
        assert background_correct_g2([0.9, 1.0], 0.9).shape == (2,)


class TestCorrectedRate:
    """
    Tests the g2(0)-corrected single-photon rate.
    """

    def test_example(self):
        """1500 cps detected, 100 cps background, g2(0) = 0.19 gives 1260 cps."""
        assert corrected_rate(1500.0, 100.0, 0.19).cps == pytest.approx(1260.0)

    def test_ideal_source(self):
        """g2(0) = 0 leaves the signal rate; g2(0) = 1 gives zero."""
        assert corrected_rate(1000.0, 200.0, 0.0).cps == pytest.approx(800.0)
        assert corrected_rate(1000.0, 200.0, 1.0).cps == 0.0

    def test_monotone(self):
        """The corrected rate falls with g2(0) and with the background."""
        rng = np.random.default_rng(6)
        for _ in range(200):
            detected = float(rng.uniform(100.0, 1e5))
            background = float(rng.uniform(0.0, detected))
            g_low, g_high = sorted(rng.uniform(0.0, 1.0, 2))
            assert corrected_rate(detected, background, g_low).cps >= corrected_rate(
                detected, background, g_high
            ).cps
            more_bg = float(rng.uniform(background, detected))
            assert corrected_rate(detected, background, g_low).cps >= corrected_rate(
                detected, more_bg, g_low
            ).cps

    @pytest.mark.parametrize(
        "detected, background, g2_zero",
        [(100.0, 200.0, 0.1), (1000.0, 100.0, 1.2), (1000.0, 100.0, -0.1)],
    )
    def test_domain_errors(self, detected: float, background: float, g2_zero: float):
        """Background above signal, bunched light and negative g2(0) are rejected."""
        with pytest.raises(DomainError):
            corrected_rate(detected, background, g2_zero)


class TestEfficiencyBudget:
    """
    Tests the coupling efficiency and brightness comparison.
    """

    def test_round_trip_example(self):
        """R = 0.42 through a T_fc = 0.83 coupler gives eta of about 0.711."""
        budget = fiber_coupling_efficiency(0.42, 0.83)
        assert budget.eta == pytest.approx(0.7114, abs=0.005)
        assert budget.eta == pytest.approx(math.sqrt(0.42 / 0.83))
        assert budget.to_dict() == {"reflectivity": 0.42, "coupler_transmission": 0.83, "eta": budget.eta}

    def test_limits(self):
        """R = T_fc is unit efficiency and R = 0 is zero."""
        assert fiber_coupling_efficiency(0.83, 0.83).eta == pytest.approx(1.0)
        assert fiber_coupling_efficiency(0.0, 0.83).eta == 0.0

    @pytest.mark.parametrize("R, T", [(0.9, 0.83), (-0.1, 0.83), (0.1, 0.0), (0.1, 1.2)])
    def test_invalid(self, R: float, T: float):
        """eta > 1, negative R and T_fc outside (0, 1] are rejected."""
        with pytest.raises(DomainError):
            fiber_coupling_efficiency(R, T)

    def test_collection_chain(self):
        """Stage efficiencies multiply."""
        assert collection_efficiency(0.711, 0.5, 0.8) == pytest.approx(0.711 * 0.4)
        assert collection_efficiency() == 1.0
        with pytest.raises(DomainError):
            collection_efficiency(0.5, 1.1)

    def test_brightness_comparison(self):
        """1090 cps against 325 cps with a 3.4x band penalty is about 11.4x."""
        comparison = brightness_comparison(1090.0, 325.0, zpl_fraction_ratio=3.4)
        assert comparison.rate_ratio == pytest.approx(3.35, abs=0.01)
        assert comparison.collection_improvement == pytest.approx(11.4, abs=0.05)

    def test_brightness_invalid_reference(self):
        """A dark reference cannot be compared against."""
        with pytest.raises(DomainError):
            brightness_comparison(1000.0, 0.0)
        with pytest.raises(DomainError):
            brightness_comparison(1000.0, 100.0, zpl_fraction_ratio=0.0)
