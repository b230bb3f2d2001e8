"""
hbtkit: simulation and analysis of time-tagged photon emission from a single
quantum emitter measured in a Hanbury Brown and Twiss setup.
"""

from .core import (
    CountRate,
    PhotonEnergy,
    TimeTag,
    TimeTagStream,
    bandwidth_nm_to_meV,
    energy_to_wavelength,
    merge_streams,
    wavelength_to_energy,
)
from .correlate import CorrelationHistogram, brute_force_correlate, correlate, normalize
from .corrections import (
    EfficiencyBudget,
    SignalBackground,
    background_correct_g2,
    corrected_rate,
    fiber_coupling_efficiency,
    signal_fraction,
)
from .errors import (
    ConfigError,
    ContractError,
    CorrectionRangeWarning,
    DegenerateFitError,
    DomainError,
    FitError,
    FitRangeWarning,
    HbtError,
    ManifestError,
    NormalizationError,
    TtgFormatError,
)
from .fits import (
    G2Params,
    LifetimeParams,
    LorentzianParams,
    SaturationParams,
    fit_g2,
    fit_lifetime,
    fit_lorentzian,
    fit_saturation,
)
from .lm import FitResult, lm_fit
from .simulate import (
    DetectorModel,
    EmitterScenario,
    add_background,
    apply_detector,
    expected_emission_rate,
    hbt_split,
    simulate_emission,
    simulate_hbt,
)

__version__ = "1.0.0"
