"""Shot-level simulation of the four-step temporal Bell protocol.

One shot:

1. initialise the nuclear spin by reading it out (the assigned class is the
   initial state from then on);
2. green light leaves the NV in NV- with its steady-state probability, then an
   orange pulse measures the charge; only shots above a one-sided high
   threshold are kept;
3. an RF pulse of length ``tau`` rotates the nuclear spin. It acts only if
   the NV really is in NV-; with probability ``baseline_shift`` it does
   nothing at all (residual NV0 / m_S != 0 population, T1 decay during the
   charge pulse), which lifts the Rabi curve;
4. a final readout assigns the outcome class. Every shot gives one.

The conditional probability Q(0, tau) is estimated as the fraction of
accepted shots whose final class equals the initial class.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import dynamics, photophysics, readout
from .dynamics import RabiParams
from .errors import CalibrationError, DomainError, InsufficientDataError
from .photophysics import (ChargeState, Illumination, IlluminationSetting,
                           PhotophysicsConfig)
from .readout import NuclearState, ReadoutConfig, ThresholdObjective
from .streams import BLOCK_SIZE, StreamFactory, as_generator

INIT_POLICIES = ("symmetric", "discard")

# Nuclear Rabi frequency is not quoted; 10 kHz is a typical RF drive.
DEFAULT_OMEGA = 2 * math.pi * 10e3


@dataclass(frozen=True)
class ExperimentConfig:
    rabi: RabiParams = field(default_factory=lambda: RabiParams(DEFAULT_OMEGA))
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    photophysics: PhotophysicsConfig = field(default_factory=PhotophysicsConfig)
    charge_pulse: float = 8e-3
    charge_power: float | None = None
    charge_threshold_objective: ThresholdObjective = ThresholdObjective.ONE_SIDED_BRIGHT
    charge_min_acceptance: float = 0.9
    charge_threshold: int | None = None
    baseline_shift: float = 0.0
    batch_size: int = 100
    init_policy: str = "symmetric"
    target_init: NuclearState = NuclearState.M_PLUS1
    prior_plus1: float = 0.5

    def __post_init__(self):
        if not self.charge_pulse > 0:
            raise DomainError("charge_pulse must be > 0")
        if not 0 <= self.baseline_shift <= 0.2:
            raise DomainError("baseline_shift must lie in [0, 0.2]")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.init_policy not in INIT_POLICIES:
            raise DomainError(f"init_policy must be one of {INIT_POLICIES}")
        if not 0 <= self.prior_plus1 <= 1:
            raise DomainError("prior_plus1 must lie in [0, 1]")
        if not 0 < self.charge_min_acceptance <= 1:
            raise DomainError("charge_min_acceptance must lie in (0, 1]")
        object.__setattr__(self, "target_init", NuclearState(self.target_init))
        object.__setattr__(self, "charge_threshold_objective",
                           ThresholdObjective(self.charge_threshold_objective))
        if self.charge_power is None:
            object.__setattr__(self, "charge_power",
                               self.photophysics.orange.reference_power)
        if self.charge_threshold is None:
            bright, dark = photophysics.photon_rates(self.photophysics, self.orange)
            p_dark = 1 - photophysics.steady_state_minus(self.photophysics, self.green)
            thr = readout.optimal_threshold(
                dark * self.charge_pulse, bright * self.charge_pulse, p_dark,
                self.charge_threshold_objective, self.charge_min_acceptance)
            object.__setattr__(self, "charge_threshold", thr)
        elif self.charge_threshold < 0:
            raise DomainError("charge_threshold must be >= 0")

    @property
    def orange(self) -> IlluminationSetting:
        return IlluminationSetting(Illumination.ORANGE, self.charge_power,
                                   self.photophysics.orange.wavelength)

    @property
    def green(self) -> IlluminationSetting:
        return self.photophysics.default_setting(Illumination.GREEN)

    @classmethod
    def ideal(cls, rabi: RabiParams | None = None, **kw) -> "ExperimentConfig":
        """Error-free readout, NV always in NV-, no baseline shift."""
        phys = PhotophysicsConfig()
        phys = phys.with_channel(Illumination.GREEN, ionization_coeff=0.0)
        phys = phys.with_channel(Illumination.ORANGE, ionization_coeff=0.0, dark_rate=0.0,
                                 bright_rate=1.0e5)
        ro = ReadoutConfig(mean_photons_dark=0.0, mean_photons_bright=200.0,
                           flip_prob_per_repeat=0.0, threshold=0)
        kw.setdefault("charge_threshold", 0)
        return cls(rabi=rabi or RabiParams(DEFAULT_OMEGA), readout=ro,
                   photophysics=phys, **kw)

    @classmethod
    def headline(cls, target_min_bell: float = -0.209, target_F_squared: float = 0.91,
              rabi: RabiParams | None = None, **kw) -> "ExperimentConfig":
        """Readout calibrated to ``target_F_squared`` and baseline shift tuned
        so the expected Bell minimum equals ``target_min_bell``."""
        base = cls(rabi=rabi or RabiParams(DEFAULT_OMEGA),
                   readout=ReadoutConfig.calibrated(target_F_squared), **kw)
        return replace(base, baseline_shift=calibrate_baseline_shift(base, target_min_bell))


@dataclass
class ShotRecord:
    tau: float
    init_state: NuclearState
    init_counts: int
    charge_counts: int
    charge_accepted: bool
    final_counts: int
    final_state_classified: NuclearState
    true_final_state: NuclearState
    true_init_state: NuclearState
    true_charge_state: ChargeState
    rf_suppressed: bool

    @property
    def success(self) -> bool:
        return self.final_state_classified == self.init_state


def run_shot(tau: float, config: ExperimentConfig, rng=None) -> ShotRecord:
    """Simulate one shot with the scalar building blocks."""
    if tau < 0:
        raise DomainError("tau must be >= 0")
    rng = as_generator(rng)
    ro = config.readout

    pre = NuclearState.M_PLUS1 if rng.random() < config.prior_plus1 else NuclearState.M_OTHER
    init_counts, nuc = readout.simulate_readout(pre, ro, rng)
    init_class = readout.classify(init_counts, ro.threshold)

    minus = rng.random() < photophysics.steady_state_minus(config.photophysics, config.green)
    charge0 = ChargeState.NV_MINUS if minus else ChargeState.NV_ZERO
    charge_counts, charge = photophysics.charge_measurement(
        config.photophysics, config.orange, config.charge_pulse, rng, initial=charge0)
    accepted = charge_counts > config.charge_threshold

    suppressed = rng.random() < config.baseline_shift
    if charge == ChargeState.NV_MINUS and not suppressed:
        if rng.random() >= dynamics.survival_probability(config.rabi, tau):
            nuc = NuclearState(1 - nuc)

    final_counts, true_final = readout.simulate_readout(nuc, ro, rng)
    return ShotRecord(
        tau=float(tau), init_state=init_class, init_counts=init_counts,
        charge_counts=charge_counts, charge_accepted=bool(accepted),
        final_counts=final_counts,
        final_state_classified=readout.classify(final_counts, ro.threshold),
        true_final_state=true_final, true_init_state=pre,
        true_charge_state=charge, rf_suppressed=bool(suppressed),
    )


@dataclass
class ShotTable:
    """Column-wise record of many shots (same fields as :class:`ShotRecord`)."""

    tau: float
    init_state: np.ndarray
    init_counts: np.ndarray
    charge_counts: np.ndarray
    charge_accepted: np.ndarray
    final_counts: np.ndarray
    final_state_classified: np.ndarray
    true_final_state: np.ndarray
    true_init_state: np.ndarray
    true_charge_state: np.ndarray
    rf_suppressed: np.ndarray

    def __len__(self):
        return len(self.init_state)

    def used_mask(self, config: ExperimentConfig) -> np.ndarray:
        mask = self.charge_accepted.astype(bool)
        if config.init_policy == "discard":
            mask &= self.init_state == config.target_init
        return mask

    def success(self) -> np.ndarray:
        return self.final_state_classified == self.init_state

    @classmethod
    def concat(cls, tables):
        tables = list(tables)
        cols = {name: np.concatenate([getattr(t, name) for t in tables])
                for name in cls.__dataclass_fields__ if name != "tau"}
        return cls(tau=tables[0].tau, **cols)

    def records(self):
        for i in range(len(self)):
            yield ShotRecord(
                tau=self.tau,
                init_state=NuclearState(int(self.init_state[i])),
                init_counts=int(self.init_counts[i]),
                charge_counts=int(self.charge_counts[i]),
                charge_accepted=bool(self.charge_accepted[i]),
                final_counts=int(self.final_counts[i]),
                final_state_classified=NuclearState(int(self.final_state_classified[i])),
                true_final_state=NuclearState(int(self.true_final_state[i])),
                true_init_state=NuclearState(int(self.true_init_state[i])),
                true_charge_state=ChargeState(int(self.true_charge_state[i])),
                rf_suppressed=bool(self.rf_suppressed[i]),
            )


def simulate_shots(tau: float, n: int, config: ExperimentConfig, rng) -> ShotTable:
    """Vectorised equivalent of ``n`` calls to :func:`run_shot`."""
    if tau < 0:
        raise DomainError("tau must be >= 0")
    rng = as_generator(rng)
    ro = config.readout

    pre = (rng.random(n) >= config.prior_plus1).astype(np.int8)
    init_counts, nuc = readout.simulate_readout_batch(pre, ro, rng)
    init_class = (init_counts > ro.threshold).astype(np.int8)

    p_minus = photophysics.steady_state_minus(config.photophysics, config.green)
    charge0 = (rng.random(n) < p_minus).astype(np.int8)
    charge_counts, charge = photophysics.charge_measurement_batch(
        config.photophysics, config.orange, config.charge_pulse, rng, charge0)
    accepted = charge_counts > config.charge_threshold

    suppressed = rng.random(n) < config.baseline_shift
    q = dynamics.survival_probability(config.rabi, tau)
    flip = (charge == ChargeState.NV_MINUS) & ~suppressed & (rng.random(n) >= q)
    nuc = nuc ^ flip.astype(np.int8)

    final_counts, true_final = readout.simulate_readout_batch(nuc, ro, rng)
    return ShotTable(
        tau=float(tau), init_state=init_class, init_counts=init_counts,
        charge_counts=charge_counts, charge_accepted=accepted,
        final_counts=final_counts,
        final_state_classified=(final_counts > ro.threshold).astype(np.int8),
        true_final_state=true_final, true_init_state=pre,
        true_charge_state=charge, rf_suppressed=suppressed,
    )


# -- block-parallel execution ---------------------------------------------------

def _block_sizes(n):
    full, rest = divmod(n, BLOCK_SIZE)
    return [BLOCK_SIZE] * full + ([rest] if rest else [])


def _run_block(args):
    tau, size, config, streams, index, keep_table = args
    table = simulate_shots(tau, size, config, streams.block(index))
    if keep_table:
        return table
    mask = table.used_mask(config)
    return table.success()[mask].astype(np.int8), int(size - mask.sum())


def _map_blocks(tau, n, config, streams, workers, keep_table):
    jobs = [(tau, size, config, streams, i, keep_table)
            for i, size in enumerate(_block_sizes(n))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_block, jobs))
    return [_run_block(j) for j in jobs]


def run_shot_table(tau, n_shots, config, streams: StreamFactory, workers=1) -> ShotTable:
    """All shots for one ``tau`` as a :class:`ShotTable`; identical for any
    ``workers`` because block ``i`` always uses stream ``streams.block(i)``."""
    return ShotTable.concat(_map_blocks(tau, n_shots, config, streams, workers, True))


# -- estimation ---------------------------------------------------------------

@dataclass
class QEstimate:
    tau: float
    q_hat: float
    stderr: float  # standard error of sub-ensemble (batch) means
    stderr_binomial: float
    n_used: int
    n_discarded: int
    n_batches: int
    q_corrected: float

    def as_dict(self):
        return asdict(self)


def readout_contrast(config: ExperimentConfig) -> float:
    """Contrast factor ``(f_dark + f_bright - 1)^2`` by which two imperfect
    readouts shrink ``Q - 1/2``."""
    fid = config.readout.fidelity()
    return (fid.f_assign_dark + fid.f_assign_bright - 1.0) ** 2


def _summarise(tau, success, n_discarded, config):
    n_used = success.size
    bs = config.batch_size
    n_batches = n_used // bs
    if n_batches < 2:
        raise InsufficientDataError(
            f"only {n_used} shots survived post-selection; need 2 batches of {bs}")
    q = float(success.mean()) if n_used else float("nan")
    means = success[: n_batches * bs].reshape(n_batches, bs).mean(axis=1)
    se_batch = float(means.std(ddof=1) / math.sqrt(n_batches))
    se_binom = math.sqrt(q * (1 - q) / n_used)
    c = readout_contrast(config)
    q_corr = float(np.clip(0.5 + (q - 0.5) / c, 0.0, 1.0)) if c > 0 else float("nan")
    return QEstimate(float(tau), q, se_batch, se_binom, int(n_used), int(n_discarded),
                     int(n_batches), q_corr)


def estimate_Q(tau: float, n_shots: int, config: ExperimentConfig,
               streams: StreamFactory, workers: int = 1) -> QEstimate:
    """Estimate Q(0, tau) from ``n_shots`` simulated shots.

    Post-selection renormalises by the number of used shots. ``stderr`` is the
    standard error of the means of consecutive sub-ensembles of
    ``config.batch_size`` used shots; ``stderr_binomial`` is
    ``sqrt(q(1-q)/n_used)``. ``q_corrected`` undoes the readout contrast
    (see :func:`readout_contrast`) and is reported alongside, never instead.
    """
    if n_shots < 10 * config.batch_size:
        raise DomainError(f"n_shots must be >= 10 * batch_size = {10 * config.batch_size}")
    parts = _map_blocks(tau, n_shots, config, streams, workers, False)
    success = np.concatenate([p[0] for p in parts])
    discarded = sum(p[1] for p in parts)
    return _summarise(tau, success, discarded, config)


@dataclass
class TbiResult:
    t: float
    q_t: float
    q_t_stderr: float
    q_2t: float
    q_2t_stderr: float
    B: float
    B_stderr: float
    B_stderr_batch: float
    n_sigma: float
    violated: bool
    k: float
    shots_used: tuple
    shots_discarded: int
    q_t_corrected: float
    q_2t_corrected: float
    B_corrected: float

    def as_dict(self):
        d = asdict(self)
        d["shots_used"] = list(self.shots_used)
        return d


def bell_stderr(q_t, var_t, var_2t):
    """Delta-method standard error of ``q_2t - q_t**2`` for independent
    estimates."""
    return math.sqrt(var_2t + 4.0 * q_t * q_t * var_t)


def run_tbi_experiment(t: float, n_shots_t: int, n_shots_2t: int, config: ExperimentConfig,
                       streams: StreamFactory, workers: int = 1, k: float = 3.0) -> TbiResult:
    """Estimate Q(0,t) and Q(0,2t) on independent shot sets and evaluate the
    Bell functional with its delta-method error.

    ``B_stderr`` propagates binomial variances; ``B_stderr_batch`` propagates
    the sub-ensemble variances as a cross-check. A violation is flagged when
    ``B + k * B_stderr < 0``.
    """
    if n_shots_t <= 0 or n_shots_2t <= 0:
        raise DomainError("shot counts must be positive")
    e1 = estimate_Q(t, n_shots_t, config, streams.child("t"), workers)
    e2 = estimate_Q(2 * t, n_shots_2t, config, streams.child("2t"), workers)
    b = e2.q_hat - e1.q_hat**2
    se = bell_stderr(e1.q_hat, e1.stderr_binomial**2, e2.stderr_binomial**2)
    se_batch = bell_stderr(e1.q_hat, e1.stderr**2, e2.stderr**2)
    n_sigma = abs(b) / se if se > 0 else (math.inf if b != 0 else 0.0)
    return TbiResult(
        t=float(t), q_t=e1.q_hat, q_t_stderr=e1.stderr_binomial,
        q_2t=e2.q_hat, q_2t_stderr=e2.stderr_binomial,
        B=b, B_stderr=se, B_stderr_batch=se_batch, n_sigma=n_sigma,
        violated=bool(b + k * se < 0), k=float(k),
        shots_used=(e1.n_used, e2.n_used),
        shots_discarded=e1.n_discarded + e2.n_discarded,
        q_t_corrected=e1.q_corrected, q_2t_corrected=e2.q_corrected,
        B_corrected=e2.q_corrected - e1.q_corrected**2,
    )


class RabiPoint(NamedTuple):
    tau: float
    q_hat: float
    stderr: float


def rabi_scan(tau_grid, n_shots_per_point: int, config: ExperimentConfig,
              streams: StreamFactory, workers: int = 1) -> list[RabiPoint]:
    taus = [float(x) for x in np.ravel(tau_grid)]
    if not taus:
        raise DomainError("tau grid is empty")
    out = []
    for i, tau in enumerate(taus):
        e = estimate_Q(tau, n_shots_per_point, config, streams.child("tau", i), workers)
        out.append(RabiPoint(tau, e.q_hat, e.stderr))
    return out


def required_shots(q_t: float, q_2t: float, target_stderr: float):
    """Smallest equal shot count ``n`` (per set) whose delta-method standard
    error ``sqrt((q_2t(1-q_2t) + 4 q_t^3 (1-q_t)) / n)`` is at most
    ``target_stderr``."""
    if not (0 < q_t < 1 and 0 < q_2t < 1):
        raise DomainError("probabilities must lie in (0, 1)")
    if not target_stderr > 0:
        raise DomainError("target_stderr must be > 0")
    v = q_2t * (1 - q_2t) + 4 * q_t**3 * (1 - q_t)
    n = math.ceil(v / target_stderr**2)
    while n > 1 and math.sqrt(v / (n - 1)) <= target_stderr:
        n -= 1
    while math.sqrt(v / n) > target_stderr:
        n += 1
    return n, n


# -- exact expectation of the pipeline ------------------------------------------

@functools.lru_cache(maxsize=32)
def _nuclear_channels(ro: ReadoutConfig):
    return readout.readout_outcome_probabilities(ro)


@functools.lru_cache(maxsize=32)
def _charge_channels(phys, orange, pulse, threshold):
    return photophysics.charge_outcome_probabilities(phys, orange, pulse, threshold)


def pipeline_response(config: ExperimentConfig):
    """Exact affine map ``E[q_hat](tau) = offset + slope * Q11(0, tau)``.

    Built from the exact readout and charge-pulse outcome laws (flips during
    readout and switching during the pulse included), so it serves as an
    oracle for the Monte Carlo pipeline and for calibration. Returns
    ``(offset, slope, acceptance)`` where ``acceptance`` is the expected
    fraction of shots passing post-selection.
    """
    ro_p = _nuclear_channels(config.readout)          # [s0, class, s1]
    ch_p = _charge_channels(config.photophysics, config.orange,
                            config.charge_pulse, config.charge_threshold)
    p_minus = photophysics.steady_state_minus(config.photophysics, config.green)
    c0 = np.array([1 - p_minus, p_minus])
    acc_final = c0 @ ch_p[:, 1, :]                   # P(accepted, final charge)
    acceptance = float(acc_final.sum())
    w = acc_final / acceptance
    p_rf = w[ChargeState.NV_MINUS] * (1 - config.baseline_shift)

    prior = np.array([config.prior_plus1, 1 - config.prior_plus1])
    classes = (0, 1) if config.init_policy == "symmetric" else (int(config.target_init),)
    final_class = ro_p.sum(axis=2)                   # [s, class]

    # P(used, success) = sum over pre, init class c, post state s:
    #   prior * ro_p[pre, c, s] * [ keep: F(s -> c) ; flip: F(1-s -> c) ]
    # with flip prob p_rf * (1 - Q)
    used = 0.0
    keep = 0.0
    flip = 0.0
    for pre in (0, 1):
        for c in classes:
            for s in (0, 1):
                w_ = prior[pre] * ro_p[pre, c, s]
                used += w_
                keep += w_ * final_class[s, c]
                flip += w_ * final_class[1 - s, c]
    # E[success] = keep * (1 - p_rf (1-Q)) + flip * p_rf (1-Q)
    offset = (keep - p_rf * (keep - flip)) / used
    slope = p_rf * (keep - flip) / used
    return float(offset), float(slope), acceptance * used


def expected_q(tau, config: ExperimentConfig):
    offset, slope, _ = pipeline_response(config)
    return offset + slope * dynamics.survival_probability(config.rabi, tau)


def expected_bell(tau, config: ExperimentConfig):
    return expected_q(2 * np.asarray(tau), config) - expected_q(tau, config) ** 2


def optimal_tau(config: ExperimentConfig):
    """``(tau, B)`` minimising the expected Bell functional of the pipeline
    over omega * tau in (0, 2 pi]."""
    w = config.rabi.omega
    grid = np.linspace(1e-4, 2 * math.pi, 20001) / w
    b = expected_bell(grid, config)
    i = int(np.argmin(b))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(lambda x: float(expected_bell(x, config)), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-10 / w})
    if res.success and res.fun <= b[i]:
        return float(res.x), float(res.fun)
    return float(grid[i]), float(b[i])


def calibrate_baseline_shift(config: ExperimentConfig, target_min_bell: float = -0.209) -> float:
    """``baseline_shift`` in [0, 0.2] whose expected Bell minimum equals
    ``target_min_bell`` (Brent's method; the minimum rises with the shift)."""
    def g(s):
        return optimal_tau(replace(config, baseline_shift=s))[1] - target_min_bell

    g0, g1 = g(0.0), g(0.2)
    if g0 > 0:
        raise CalibrationError(
            f"unshifted pipeline only reaches B={g0 + target_min_bell:.4f} > {target_min_bell}")
    if g1 < 0:
        raise CalibrationError("target not reached within baseline_shift <= 0.2")
    return float(brentq(g, 0.0, 0.2, xtol=1e-12))
