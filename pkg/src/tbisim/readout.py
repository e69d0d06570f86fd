"""Repetitive QND readout of the nitrogen nuclear spin.

Each of ``n_repeats`` rounds maps the nuclear state onto the electron spin and
reads it optically; the photon counts of all rounds are summed and the total
is compared against an integer threshold. ``m_I = +1`` is the low-fluorescence
class (``M_PLUS1``); ``m_I in {0, -1}`` are merged into ``M_OTHER``.

Counts equal to the threshold belong to the low class.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import find_peaks
from scipy.stats import poisson

from .errors import CalibrationError, ConstraintError, DomainError
from .streams import as_generator


class NuclearState(enum.IntEnum):
    M_PLUS1 = 0  # low fluorescence
    M_OTHER = 1  # high fluorescence


class ThresholdObjective(str, enum.Enum):
    BALANCED = "BALANCED"
    ONE_SIDED_DARK = "ONE_SIDED_DARK"
    ONE_SIDED_BRIGHT = "ONE_SIDED_BRIGHT"


class ReadoutFidelity(NamedTuple):
    f_assign_dark: float
    f_assign_bright: float
    f_squared: float


class Calibration(NamedTuple):
    mean_photons_dark: float
    mean_photons_bright: float
    threshold: int
    f_squared: float
    n_repeats: int

    def as_dict(self):
        return {
            "mean_photons_dark": self.mean_photons_dark,
            "mean_photons_bright": self.mean_photons_bright,
            "mean_photons_dark_per_repeat": self.mean_photons_dark / self.n_repeats,
            "mean_photons_bright_per_repeat": self.mean_photons_bright / self.n_repeats,
            "threshold": self.threshold,
            "f_squared": self.f_squared,
            "n_repeats": self.n_repeats,
        }


def threshold_fidelity(lambda_dark: float, lambda_bright: float, prior_dark: float = 0.5,
                       threshold: int = 0, combine: str = "per_class") -> ReadoutFidelity:
    """Correct-assignment probabilities for two Poisson classes.

    ``f_assign_dark = P(N <= threshold | dark)`` and
    ``f_assign_bright = P(N > threshold | bright)``.

    ``f_squared`` models one initialisation readout followed by one final
    readout. With ``combine="per_class"`` (default) it is the product of the
    two per-class fidelities; with ``combine="weighted"`` it is the square of
    the prior-weighted fidelity ``prior_dark*f_dark + (1-prior_dark)*f_bright``.
    """
    if not (0 <= lambda_dark < lambda_bright or lambda_dark == lambda_bright >= 0):
        raise DomainError("need 0 <= lambda_dark <= lambda_bright")
    f_d = float(poisson.cdf(threshold, lambda_dark)) if lambda_dark > 0 else float(threshold >= 0)
    f_b = float(poisson.sf(threshold, lambda_bright)) if lambda_bright > 0 else float(threshold < 0)
    if combine == "per_class":
        f2 = f_d * f_b
    elif combine == "weighted":
        f2 = (prior_dark * f_d + (1 - prior_dark) * f_b) ** 2
    else:
        raise DomainError(f"unknown combine mode {combine!r}")
    return ReadoutFidelity(f_d, f_b, f2)


def _threshold_grid(lambda_bright):
    return np.arange(0, int(math.ceil(lambda_bright + 10 * math.sqrt(lambda_bright))) + 1)


def _class_fidelities(lambda_dark, lambda_bright, thr):
    f_d = poisson.cdf(thr, lambda_dark) if lambda_dark > 0 else np.ones(thr.shape)
    f_b = poisson.sf(thr, lambda_bright) if lambda_bright > 0 else np.zeros(thr.shape)
    return f_d, f_b


def optimal_threshold(lambda_dark: float, lambda_bright: float, prior_dark: float = 0.5,
                      objective=ThresholdObjective.BALANCED, min_acceptance: float = 0.5) -> int:
    """Integer threshold maximising ``objective`` by exhaustive search over
    ``[0, lambda_bright + 10 sqrt(lambda_bright)]``.

    BALANCED maximises ``f_dark * f_bright``. ONE_SIDED_BRIGHT maximises the
    purity of the accepted high-count class, ``P(bright | N > thr)``, subject to
    accepting at least ``min_acceptance`` of truly bright events (and
    symmetrically for ONE_SIDED_DARK). Ties go to the smallest threshold;
    indistinguishable classes (equal means) return 0.
    """
    objective = ThresholdObjective(objective)
    if not 0 <= lambda_dark <= lambda_bright:
        raise DomainError("need 0 <= lambda_dark <= lambda_bright")
    if lambda_dark == lambda_bright and objective is ThresholdObjective.BALANCED:
        return 0
    thr = _threshold_grid(lambda_bright)
    f_d, f_b = _class_fidelities(lambda_dark, lambda_bright, thr)
    p_d, p_b = prior_dark, 1 - prior_dark

    if objective is ThresholdObjective.BALANCED:
        return int(thr[np.argmax(f_d * f_b)])

    if objective is ThresholdObjective.ONE_SIDED_BRIGHT:
        accept = f_b
        with np.errstate(invalid="ignore", divide="ignore"):
            purity = p_b * f_b / (p_b * f_b + p_d * (1 - f_d))
    else:
        accept = f_d
        with np.errstate(invalid="ignore", divide="ignore"):
            purity = p_d * f_d / (p_d * f_d + p_b * (1 - f_b))
    feasible = (accept >= min_acceptance) & np.isfinite(purity)
    if not feasible.any():
        raise ConstraintError(
            f"no threshold accepts >= {min_acceptance} of the selected class")
    score = np.where(feasible, purity, -np.inf)
    return int(thr[np.argmax(score)])


def classify(count, threshold: int, kind=NuclearState):
    """Map a photon count to the low class if ``count <= threshold``, else the
    high class. ``kind`` may be :class:`NuclearState` or ``ChargeState``.

    Arrays of counts give an int8 array of class values (0 low, 1 high).
    """
    high = np.asarray(count) > threshold
    if high.ndim:
        return high.astype(np.int8)
    return kind(int(high))


def _best_product(lambda_dark, lambda_bright):
    thr = _threshold_grid(lambda_bright)
    f_d, f_b = _class_fidelities(lambda_dark, lambda_bright, thr)
    prod = f_d * f_b
    i = int(np.argmax(prod))
    return float(prod[i]), int(thr[i])


def calibrate_photon_rates(target_F_squared: float = 0.91, n_repeats: int = 2000,
                           ratio: float = 3.0, cap: float = 1e4) -> Calibration:
    """Photon means per readout sequence whose best-threshold ``f_squared``
    equals ``target_F_squared`` at fixed ``ratio = bright / dark``.

    Bisects on the overall scale (log-spaced) in ``[1e-9, cap]``; a target that
    needs a dark mean above ``cap`` raises :class:`CalibrationError`.
    """
    if not 0 < target_F_squared < 1:
        raise DomainError("target must lie in (0, 1)")
    if not ratio > 1:
        raise DomainError("ratio must exceed 1")

    def g(lam):
        return _best_product(lam, ratio * lam)[0] - target_F_squared

    lo, hi = 1e-9, float(cap)
    if g(hi) < 0:
        raise CalibrationError(
            f"F^2={target_F_squared} unreachable with ratio {ratio} below dark mean {cap}")
    if g(lo) > 0:
        raise CalibrationError("target below the achievable minimum")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1 < 1e-12:
            break
    lam = hi
    f2, thr = _best_product(lam, ratio * lam)
    return Calibration(lam, ratio * lam, thr, f2, int(n_repeats))


@functools.lru_cache(maxsize=8)
def _default_calibration(target=0.91, n_repeats=2000, ratio=3.0):
    return calibrate_photon_rates(target, n_repeats, ratio)


@dataclass(frozen=True)
class ReadoutConfig:
    """Repetitive readout parameters.

    Photon means are per full readout sequence (summed over ``n_repeats``).
    Omitted means default to the calibration reaching F^2 = 0.91 at a
    bright/dark ratio of 3; an omitted threshold is the BALANCED optimum.
    """

    n_repeats: int = 2000
    mean_photons_bright: float | None = None
    mean_photons_dark: float | None = None
    flip_prob_per_repeat: float = 5e-6
    threshold: int | None = None

    def __post_init__(self):
        if self.n_repeats < 1:
            raise DomainError("n_repeats must be >= 1")
        if (self.mean_photons_bright is None) != (self.mean_photons_dark is None):
            raise DomainError("give both photon means or neither")
        if self.mean_photons_bright is None:
            cal = _default_calibration()
            object.__setattr__(self, "mean_photons_dark", cal.mean_photons_dark)
            object.__setattr__(self, "mean_photons_bright", cal.mean_photons_bright)
        if not self.mean_photons_bright > self.mean_photons_dark >= 0:
            raise DomainError("need mean_photons_bright > mean_photons_dark >= 0")
        p = self.flip_prob_per_repeat
        if not 0 <= p <= 0.5 or p * self.n_repeats > 10:
            raise DomainError("flip_prob_per_repeat must be in [0, 0.5] and <= 10/n_repeats")
        if self.threshold is None:
            object.__setattr__(self, "threshold", optimal_threshold(
                self.mean_photons_dark, self.mean_photons_bright))
        elif self.threshold < 0:
            raise DomainError("threshold must be >= 0")

    @classmethod
    def calibrated(cls, target_F_squared=0.91, ratio=3.0, n_repeats=2000, **kw):
        cal = calibrate_photon_rates(target_F_squared, n_repeats, ratio)
        return cls(n_repeats=n_repeats, mean_photons_bright=cal.mean_photons_bright,
                   mean_photons_dark=cal.mean_photons_dark, **kw)

    @property
    def per_repeat_means(self):
        """Per-round means indexed by :class:`NuclearState`."""
        return np.array([self.mean_photons_dark, self.mean_photons_bright]) / self.n_repeats

    def fidelity(self, prior_dark=0.5, combine="per_class") -> ReadoutFidelity:
        return threshold_fidelity(self.mean_photons_dark, self.mean_photons_bright,
                                  prior_dark, self.threshold, combine)


def simulate_readout(true_state, config: ReadoutConfig, rng=None):
    """Literal round-by-round simulation of one readout sequence.

    Each round first flips the nuclear state with ``flip_prob_per_repeat`` and
    then emits Poisson photons at the current state's per-round mean. Returns
    ``(photon_count, final_state)``.
    """
    rng = as_generator(rng)
    s0 = int(NuclearState(true_state))
    flips = rng.random(config.n_repeats) < config.flip_prob_per_repeat
    states = s0 ^ (np.cumsum(flips) & 1)
    count = int(rng.poisson(config.per_repeat_means[states]).sum())
    return count, NuclearState(int(states[-1]))


def simulate_readout_batch(states, config: ReadoutConfig, rng):
    """Vectorised :func:`simulate_readout` for an array of initial states.

    Flip rounds form a Bernoulli process, sampled here through geometric gaps;
    given the rounds spent in each state, the summed count is Poisson with the
    summed mean. Returns ``(counts, final_states)``.
    """
    rng = as_generator(rng)
    state = np.asarray(states, dtype=np.int8).copy()
    n, p = config.n_repeats, config.flip_prob_per_repeat
    occ_bright = np.zeros(state.size)
    if p > 0:
        f = np.zeros(state.size, dtype=np.int64)
        active = np.arange(state.size)
        while active.size:
            nf = f[active] + rng.geometric(p, active.size)
            seg = np.minimum(nf, n + 1) - np.maximum(f[active], 1)
            occ_bright[active] += seg * (state[active] == NuclearState.M_OTHER)
            flipped = nf <= n
            idx = active[flipped]
            state[idx] ^= 1
            f[active] = nf
            active = idx
    else:
        occ_bright[:] = n * (state == NuclearState.M_OTHER)
    mu_d, mu_b = config.per_repeat_means
    counts = rng.poisson(mu_b * occ_bright + mu_d * (n - occ_bright))
    return counts, state


def readout_outcome_probabilities(config: ReadoutConfig, threshold: int | None = None) -> np.ndarray:
    """Exact joint law of (assigned class, post-readout state) given the
    pre-readout state, by dynamic programming over rounds.

    Returns ``P[s0, c, s1]`` with all indices ordered as :class:`NuclearState`.
    """
    thr = config.threshold if threshold is None else threshold
    mu = config.per_repeat_means
    p = config.flip_prob_per_repeat
    kmax = int(math.ceil(config.mean_photons_bright + 12 * math.sqrt(config.mean_photons_bright) + 30))
    kernels = []
    for m in mu:
        k = np.arange(0, 40)
        pk = poisson.pmf(k, m) if m > 0 else (k == 0).astype(float)
        kernels.append(pk[: max(1, int(np.nonzero(pk > 1e-18)[0].max()) + 1)])
    out = np.zeros((2, 2, 2))
    for s0 in (0, 1):
        pmf = np.zeros((2, kmax))
        pmf[s0, 0] = 1.0
        for _ in range(config.n_repeats):
            if p > 0:
                pmf = (1 - p) * pmf + p * pmf[::-1]
            pmf = np.stack([np.convolve(pmf[s], kernels[s])[:kmax] for s in (0, 1)])
        low = pmf[:, : thr + 1].sum(axis=1)
        high = pmf[:, thr + 1:].sum(axis=1)
        out[s0, 0] = low
        out[s0, 1] = high
    return out


@dataclass
class HistogramData:
    bin_edges: np.ndarray
    counts: np.ndarray
    n_total: int

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.bin_edges) != len(self.counts) + 1:
            raise DomainError("need one more edge than bins")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise DomainError("bin edges must be strictly increasing")
        if self.counts.sum() != self.n_total:
            raise DomainError("bin counts do not sum to n_total")

    @property
    def bin_lo(self):
        return self.bin_edges[:-1]

    @property
    def bin_hi(self):
        return self.bin_edges[1:]

    def local_maxima(self, smooth: int = 0, prominence: float = 0.05) -> np.ndarray:
        """Indices of local maxima of the (optionally boxcar-smoothed) counts.

        Peaks must stand out by at least ``prominence`` times the tallest bin,
        which discards shot-noise wiggles in sparsely populated tails. Edge
        bins can be peaks.
        """
        c = self.counts.astype(float)
        if smooth > 1:
            c = np.convolve(c, np.ones(smooth) / smooth, mode="same")
        if not c.max() > 0:
            return np.array([], dtype=int)
        peaks, _ = find_peaks(np.concatenate([[0.0], c, [0.0]]), prominence=prominence * c.max())
        return peaks - 1


def build_histogram(counts, bin_width: int = 1) -> HistogramData:
    """Integer-binned histogram; bin ``i`` covers ``[lo_i, lo_i + bin_width)``."""
    data = np.asarray(counts)
    if data.size == 0:
        raise DomainError("cannot histogram an empty sample")
    if bin_width < 1 or int(bin_width) != bin_width:
        raise DomainError("bin_width must be a positive integer")
    data = data.astype(np.int64)
    start = int(data.min())
    idx = (data - start) // int(bin_width)
    hist = np.bincount(idx)
    edges = start + int(bin_width) * np.arange(hist.size + 1)
    return HistogramData(edges, hist, int(data.size))
