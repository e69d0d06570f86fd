"""NV charge-state blinking as a two-state continuous-time Markov chain.

NV- is ionised to NV0 by a two-photon process and NV0 is recombined back to
NV- by light, so both switching rates scale with the square of the optical
power. Detected fluorescence is Poissonian with a state-dependent rate that
scales linearly with power: ``bright_rate`` in NV- and ``dark_rate`` in NV0
(the latter includes background). Rate coefficients differ between the green
(532 nm) and orange (~600 nm) lasers, so they are stored per illumination
channel.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import poisson

from .errors import DomainError
from .streams import as_generator


class ChargeState(enum.IntEnum):
    NV_ZERO = 0
    NV_MINUS = 1


class Illumination(str, enum.Enum):
    GREEN = "GREEN"
    ORANGE = "ORANGE"


@dataclass(frozen=True)
class IlluminationSetting:
    label: Illumination
    power: float  # W
    wavelength: float = float("nan")  # nm, metadata only

    def __post_init__(self):
        object.__setattr__(self, "label", Illumination(self.label))
        if not self.power > 0:
            raise DomainError(f"optical power must be > 0, got {self.power}")


@dataclass(frozen=True)
class ChargeChannel:
    """Rate constants for one laser.

    ``ionization_coeff`` and ``recombination_coeff`` are in 1/(s W^2);
    ``bright_rate`` and ``dark_rate`` are detected photons/s at
    ``reference_power``.
    """

    ionization_coeff: float
    recombination_coeff: float
    bright_rate: float
    dark_rate: float
    reference_power: float
    wavelength: float = float("nan")

    def __post_init__(self):
        for name in ("ionization_coeff", "recombination_coeff", "bright_rate", "dark_rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and >= 0, got {v}")
        if not self.bright_rate > self.dark_rate:
            raise DomainError("bright_rate must exceed dark_rate")
        if not self.reference_power > 0:
            raise DomainError("reference_power must be > 0")


# Orange (0.4 uW cw): NV- lifetime 600 ms; recombination 5x weaker.
_ORANGE_POWER = 0.4e-6
_ORANGE_ION = (1 / 0.6) / _ORANGE_POWER**2
# Green (200 uW): switching fast enough to equilibrate within a readout;
# NV- steady-state fraction recomb / (recomb + ioniz) = 0.7.
_GREEN_POWER = 200e-6
_GREEN_ION = 3.0e3 / _GREEN_POWER**2
_GREEN_REC = 7.0e3 / _GREEN_POWER**2


@dataclass(frozen=True)
class PhotophysicsConfig:
    orange: ChargeChannel = field(default_factory=lambda: ChargeChannel(
        ionization_coeff=_ORANGE_ION,
        recombination_coeff=_ORANGE_ION / 5,
        bright_rate=2500.0,
        dark_rate=250.0,
        reference_power=_ORANGE_POWER,
        wavelength=600.0,
    ))
    green: ChargeChannel = field(default_factory=lambda: ChargeChannel(
        ionization_coeff=_GREEN_ION,
        recombination_coeff=_GREEN_REC,
        bright_rate=1.0e5,
        dark_rate=3.0e4,
        reference_power=_GREEN_POWER,
        wavelength=532.0,
    ))

    def channel(self, label) -> ChargeChannel:
        return self.green if Illumination(label) is Illumination.GREEN else self.orange

    def with_channel(self, label, **changes) -> "PhotophysicsConfig":
        key = "green" if Illumination(label) is Illumination.GREEN else "orange"
        return replace(self, **{key: replace(getattr(self, key), **changes)})

    def default_setting(self, label) -> IlluminationSetting:
        ch = self.channel(label)
        return IlluminationSetting(Illumination(label), ch.reference_power, ch.wavelength)


def charge_rates(config: PhotophysicsConfig, setting: IlluminationSetting):
    """``(ionization_rate, recombination_rate)`` in 1/s at the setting's power."""
    ch = config.channel(setting.label)
    p2 = setting.power**2
    return ch.ionization_coeff * p2, ch.recombination_coeff * p2


def photon_rates(config: PhotophysicsConfig, setting: IlluminationSetting):
    """``(bright, dark)`` detected photons/s, linear in power."""
    ch = config.channel(setting.label)
    s = setting.power / ch.reference_power
    return ch.bright_rate * s, ch.dark_rate * s


def steady_state_minus(config: PhotophysicsConfig, setting: IlluminationSetting) -> float:
    """Stationary NV- occupancy ``recomb / (recomb + ioniz)``."""
    ion, rec = charge_rates(config, setting)
    if ion + rec == 0:
        return 1.0
    return rec / (ion + rec)


@dataclass
class ChargeTrajectory:
    """Piecewise-constant charge state: ``states[i]`` holds on
    ``[times[i], times[i+1])``, the last segment running to ``duration``."""

    times: np.ndarray
    states: np.ndarray
    duration: float
    setting: IlluminationSetting

    def __iter__(self):
        return ((float(t), ChargeState(int(s))) for t, s in zip(self.times, self.states))

    def __len__(self):
        return len(self.times)

    @property
    def final_state(self) -> ChargeState:
        return ChargeState(int(self.states[-1]))

    def dwell_times(self, state=ChargeState.NV_MINUS, complete_only=True) -> np.ndarray:
        """Segment lengths in ``state``; censored first/last segments are
        excluded when ``complete_only``."""
        edges = np.append(self.times, self.duration)
        lengths = np.diff(edges)
        mask = self.states == int(state)
        if complete_only:
            mask[0] = False
            mask[-1] = False
        return lengths[mask]

    def occupancy(self, state=ChargeState.NV_MINUS) -> float:
        edges = np.append(self.times, self.duration)
        lengths = np.diff(edges)
        return float(lengths[self.states == int(state)].sum() / self.duration)


def simulate_charge_trajectory(config: PhotophysicsConfig, setting: IlluminationSetting,
                               duration: float, rng=None, initial=None) -> ChargeTrajectory:
    """Exact event-by-event simulation of the charge telegraph process.

    Waiting times are exponential with the exit rate of the current state.
    Without ``initial`` the start state is drawn from the stationary
    distribution of this illumination.
    """
    if not duration > 0:
        raise DomainError("duration must be > 0")
    rng = as_generator(rng)
    ion, rec = charge_rates(config, setting)
    if initial is None:
        state = int(rng.random() < steady_state_minus(config, setting))
    else:
        state = int(ChargeState(initial))

    times, states = [0.0], [state]
    t = 0.0
    while True:
        rate = ion if state == ChargeState.NV_MINUS else rec
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= duration:
            break
        state = 1 - state
        times.append(t)
        states.append(state)
    return ChargeTrajectory(np.array(times), np.array(states, dtype=np.int8), float(duration), setting)


@dataclass
class FluorescenceTrace:
    bin_width: float
    counts: np.ndarray
    true_states: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not self.bin_width > 0:
            raise DomainError("bin_width must be > 0")
        if np.any(self.counts < 0):
            raise DomainError("photon counts must be non-negative")
        if self.true_states is not None:
            self.true_states = np.asarray(self.true_states, dtype=np.int8)
            if self.true_states.shape != self.counts.shape:
                raise DomainError("true_states must align with counts")

    @property
    def duration(self) -> float:
        return self.bin_width * len(self.counts)

    @property
    def bin_starts(self) -> np.ndarray:
        return np.arange(len(self.counts)) * self.bin_width


def _expected_counts(trajectory, config, edges):
    bright, dark = photon_rates(config, trajectory.setting)
    rates = np.where(trajectory.states == ChargeState.NV_MINUS, bright, dark)
    nodes = np.append(trajectory.times, trajectory.duration)
    cum = np.concatenate([[0.0], np.cumsum(rates * np.diff(nodes))])
    return np.diff(np.interp(edges, nodes, cum))


def render_trace(trajectory: ChargeTrajectory, config: PhotophysicsConfig,
                 bin_width: float, rng=None) -> FluorescenceTrace:
    """Bin a charge trajectory into Poisson photon counts.

    Each bin's mean is the exact integral of the state-dependent rate over the
    bin, so bins that straddle a switch mix both rates piecewise. A trailing
    partial bin is dropped. ``true_states`` records the state at bin centres.
    """
    if not bin_width > 0:
        raise DomainError("bin_width must be > 0")
    rng = as_generator(rng)
    n = int(math.floor(trajectory.duration / bin_width + 1e-9))
    if n < 1:
        raise DomainError("trace shorter than one bin")
    edges = np.arange(n + 1) * bin_width
    mean = _expected_counts(trajectory, config, edges)
    counts = rng.poisson(mean)
    mids = edges[:-1] + 0.5 * bin_width
    idx = np.searchsorted(trajectory.times, mids, side="right") - 1
    return FluorescenceTrace(bin_width, counts, trajectory.states[idx])


def charge_measurement(config: PhotophysicsConfig, setting: IlluminationSetting,
                       pulse_duration: float, rng=None, initial=ChargeState.NV_MINUS):
    """One charge readout pulse: returns ``(photon_count, final_state)``.

    The charge state keeps evolving during the pulse, so an NV- that ionises
    mid-pulse yields an intermediate count.
    """
    rng = as_generator(rng)
    traj = simulate_charge_trajectory(config, setting, pulse_duration, rng, initial=initial)
    mean = _expected_counts(traj, config, np.array([0.0, pulse_duration]))[0]
    return int(rng.poisson(mean)), traj.final_state


def charge_measurement_batch(config: PhotophysicsConfig, setting: IlluminationSetting,
                             pulse_duration: float, rng, initial):
    """Vectorised :func:`charge_measurement` over an array of initial states.

    Returns ``(counts, final_states)`` as integer arrays.
    """
    if not pulse_duration > 0:
        raise DomainError("pulse_duration must be > 0")
    rng = as_generator(rng)
    state = np.asarray(initial, dtype=np.int8).copy()
    n = state.size
    ion, rec = charge_rates(config, setting)
    bright, dark = photon_rates(config, setting)
    t = np.zeros(n)
    occ_minus = np.zeros(n)
    active = np.arange(n)
    while active.size:
        s = state[active]
        rate = np.where(s == ChargeState.NV_MINUS, ion, rec)
        with np.errstate(divide="ignore"):
            wait = np.where(rate > 0, rng.exponential(1.0, active.size) / np.where(rate > 0, rate, 1.0), np.inf)
        t_next = t[active] + wait
        end = np.minimum(t_next, pulse_duration)
        occ_minus[active] += (end - t[active]) * (s == ChargeState.NV_MINUS)
        t[active] = end
        switched = t_next < pulse_duration
        state[active[switched]] = 1 - s[switched]
        active = active[switched]
    mean = bright * occ_minus + dark * (pulse_duration - occ_minus)
    return rng.poisson(mean), state


def charge_outcome_probabilities(config: PhotophysicsConfig, setting: IlluminationSetting,
                                 pulse_duration: float, threshold: int,
                                 n_steps: int = 2000) -> np.ndarray:
    """Joint law ``P[initial, accepted, final]`` of a thresholded charge pulse.

    ``accepted`` means count > threshold. The pulse is cut into ``n_steps``
    slices; within a slice the state switches with the exact two-state
    propagator and photons are emitted at the slice's starting state, so the
    result carries an O(1/n_steps) discretisation error.
    """
    ion, rec = charge_rates(config, setting)
    bright, dark = photon_rates(config, setting)
    dt = pulse_duration / n_steps
    tot = ion + rec
    if tot > 0:
        e = math.exp(-tot * dt)
        p_ion = ion / tot * (1 - e)
        p_rec = rec / tot * (1 - e)
    else:
        p_ion = p_rec = 0.0
    # index 0 = NV0, 1 = NV-
    trans = np.array([[1 - p_rec, p_rec], [p_ion, 1 - p_ion]])
    lam_max = bright * pulse_duration
    kmax = int(math.ceil(lam_max + 12 * math.sqrt(lam_max) + 30))
    kernels = []
    for rate in (dark, bright):
        k = np.arange(0, 60)
        pk = poisson.pmf(k, rate * dt) if rate > 0 else (k == 0).astype(float)
        kernels.append(pk[: int(np.nonzero(pk > 1e-18)[0].max()) + 1])
    out = np.zeros((2, 2, 2))
    for c0 in (0, 1):
        pmf = np.zeros((2, kmax))
        pmf[c0, 0] = 1.0
        for _ in range(n_steps):
            pmf = np.stack([np.convolve(pmf[s], kernels[s])[:kmax] for s in (0, 1)])
            pmf = trans.T @ pmf
        out[c0, 0] = pmf[:, : threshold + 1].sum(axis=1)
        out[c0, 1] = pmf[:, threshold + 1:].sum(axis=1)
    return out
