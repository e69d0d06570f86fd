"""Simulation and analysis of a temporal Bell inequality test on a nuclear
spin read out through an NV centre.

Submodules
----------
dynamics      two-level survival probability, Bell functional, critical noise
photophysics  NV charge-state blinking and photon emission
readout       repetitive single-shot readout, thresholds, fidelity
protocol      shot sequence, post-selection, estimates of Q and B
analysis      cosine fits, Poisson-mixture EM, dwell-time extraction
cli           command-line front end
"""

from .dynamics import (
    DensityMatrix,
    RabiParams,
    bell_curve,
    bell_functional,
    critical_noise,
    evolve_master_equation,
    min_bell,
    stationarity_check,
    survival_probability,
)
from .photophysics import (
    ChargeState,
    FluorescenceTrace,
    Illumination,
    IlluminationSetting,
    PhotophysicsConfig,
    charge_measurement,
    charge_rates,
    render_trace,
    simulate_charge_trajectory,
)
from .readout import (
    NuclearState,
    ReadoutConfig,
    ThresholdObjective,
    build_histogram,
    calibrate_photon_rates,
    classify,
    optimal_threshold,
    simulate_readout,
    threshold_fidelity,
)
from .protocol import (
    ExperimentConfig,
    TbiResult,
    estimate_Q,
    rabi_scan,
    required_shots,
    run_shot,
    run_tbi_experiment,
)
from .analysis import bell_from_fit, extract_dwell_times, fit_cosine, fit_poisson_mixture
from .streams import StreamFactory, stream

__version__ = "0.1.0"
