"""Fits and trace analysis: cosine fits of Rabi scans, Bell curves from fits,
two-component Poisson mixtures, and dwell-time extraction from blinking
traces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.special import gammaln, logsumexp, xlogy

from .errors import DomainError, FitError, InsufficientDataError
from .photophysics import FluorescenceTrace
from .readout import HistogramData

# 2 * log-likelihood gain below which a second Poisson component is rejected
# (0.999 quantile of chi^2 with 2 degrees of freedom).
MIXTURE_LR_CUTOFF = 13.82


@dataclass
class CosineFit:
    """Model ``offset + amplitude * exp(-decay * tau) * cos(omega * tau + phase)``.

    ``amplitude >= 0`` and ``phase`` in (-pi, pi]. ``covariance`` is ordered as
    ``param_names``; ``decay`` is absent from it when it was held at zero.
    """

    offset: float
    amplitude: float
    omega: float
    phase: float
    decay: float
    covariance: np.ndarray
    param_names: tuple
    residual_norm: float
    chi2: float
    dof: int
    weighted: bool
    nfev: int = 0

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self.offset + self.amplitude * np.exp(-self.decay * tau) * np.cos(self.omega * tau + self.phase)

    def stderr(self, name: str) -> float:
        i = self.param_names.index(name)
        return float(math.sqrt(max(self.covariance[i, i], 0.0)))

    @property
    def contrast(self) -> float:
        """Peak-to-peak height of the undamped curve."""
        return 2.0 * self.amplitude

    def as_dict(self):
        return {
            "model": "offset + amplitude*exp(-decay*tau)*cos(omega*tau + phase)",
            "offset": self.offset,
            "amplitude": self.amplitude,
            "omega": self.omega,
            "phase": self.phase,
            "decay": self.decay,
            "stderr": {n: self.stderr(n) for n in self.param_names},
            "param_names": list(self.param_names),
            "covariance": self.covariance.tolist(),
            "residual_norm": self.residual_norm,
            "chi2": self.chi2,
            "dof": self.dof,
            "weighted": self.weighted,
        }


def _as_points(points):
    arr = np.asarray([tuple(p)[:3] for p in points], dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DomainError("points must be (tau, q, stderr) triples")
    return arr[:, 0], arr[:, 1], arr[:, 2]


def _periodogram_peak(tau, y, w, n_freq=4000):
    """Frequency maximising the weighted least-squares power of
    ``[1, cos, sin]`` fits on a uniform frequency grid; also returns the
    linear coefficients at the peak."""
    span = tau.max() - tau.min()
    dtau = np.diff(np.unique(tau))
    w_lo = math.pi / span
    w_hi = math.pi / np.median(dtau)
    best = (np.inf, None, None)
    sw = np.sqrt(w)
    for om in np.linspace(w_lo, w_hi, n_freq):
        X = np.column_stack([np.ones_like(tau), np.cos(om * tau), np.sin(om * tau)]) * sw[:, None]
        coef, *_ = np.linalg.lstsq(X, y * sw, rcond=None)
        chi2 = float(np.sum((X @ coef - y * sw) ** 2))
        if chi2 < best[0]:
            best = (chi2, om, coef)
    return best[1], best[2]


def fit_cosine(points, free_decay: bool = False, max_nfev: int = 5000) -> CosineFit:
    """Weighted least-squares cosine fit to ``(tau, q, stderr)`` points.

    The starting frequency is the peak of a least-squares periodogram; the
    fit is then refined by Levenberg-Marquardt. With positive ``stderr``
    values the covariance is ``(J^T J)^-1`` of the weighted residuals
    (absolute errors); if any ``stderr`` is zero or missing the fit is
    unweighted and the covariance is scaled by the reduced chi^2.
    """
    tau, y, s = _as_points(points)
    if tau.size < 6 or np.unique(tau).size < 6:
        raise DomainError("need at least 6 distinct tau values")
    weighted = bool(np.all(np.isfinite(s)) and np.all(s > 0))
    sigma = s if weighted else np.ones_like(y)
    w = 1.0 / sigma**2

    om0, (a0, c1, c2) = _periodogram_peak(tau, y, w)
    b0 = math.hypot(c1, c2)
    ph0 = math.atan2(-c2, c1)

    def model(p):
        a, b, om, ph = p[:4]
        g = p[4] if free_decay else 0.0
        return a + b * np.exp(-g * tau) * np.cos(om * tau + ph)

    def resid(p):
        return (model(p) - y) / sigma

    p0 = [a0, b0, om0, ph0] + ([0.0] if free_decay else [])
    res = least_squares(resid, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=max_nfev, x_scale="jac")
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError("cosine fit did not converge",
                       {"status": int(res.status), "message": res.message, "nfev": int(res.nfev),
                        "start": p0})

    p = np.array(res.x, dtype=float)
    names = ("offset", "amplitude", "omega", "phase") + (("decay",) if free_decay else ())
    jac = res.jac
    try:
        cov = np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jac.T @ jac)
    dof = max(tau.size - len(p), 1)
    chi2 = float(np.sum(res.fun**2))
    if not weighted:
        cov = cov * chi2 / dof

    # canonical form: amplitude >= 0, omega > 0, phase in (-pi, pi]
    sign = np.ones(len(p))
    if p[2] < 0:
        p[2], p[3] = -p[2], -p[3]
        sign[2] = sign[3] = -1
    if p[1] < 0:
        p[1] = -p[1]
        p[3] += math.pi
        sign[1] *= -1
    p[3] = math.pi - (math.pi - p[3]) % (2 * math.pi)
    cov = cov * np.outer(sign, sign)

    if (tau.max() - tau.min()) * p[2] < math.pi:
        raise DomainError("tau grid spans less than half a period of the fitted oscillation")

    return CosineFit(
        offset=float(p[0]), amplitude=float(p[1]), omega=float(p[2]), phase=float(p[3]),
        decay=float(p[4]) if free_decay else 0.0, covariance=cov, param_names=names,
        residual_norm=float(math.sqrt(chi2)), chi2=chi2, dof=dof, weighted=weighted,
        nfev=int(res.nfev),
    )


def bell_from_fit(fit: CosineFit, t_grid) -> np.ndarray:
    """``(t, q(2t) - q(t)^2)`` rows with ``q`` the fitted curve."""
    t = np.asarray(t_grid, dtype=float).ravel()
    return np.column_stack([t, fit(2 * t) - fit(t) ** 2])


# -- Poisson mixture -----------------------------------------------------------

@dataclass
class PoissonMixtureFit:
    lambda_low: float
    lambda_high: float
    weight_low: float
    log_likelihood: float
    iterations: int
    degenerate: bool = False
    n_samples: int = 0
    ll_history: list = field(default_factory=list, repr=False)

    @property
    def weight_high(self) -> float:
        return 1.0 - self.weight_low

    def as_dict(self):
        return {
            "lambda_low": self.lambda_low,
            "lambda_high": self.lambda_high,
            "weight_low": self.weight_low,
            "weight_high": self.weight_high,
            "log_likelihood": self.log_likelihood,
            "iterations": self.iterations,
            "degenerate": self.degenerate,
            "n_samples": self.n_samples,
        }


def _values_and_weights(data):
    if isinstance(data, HistogramData):
        width = np.diff(data.bin_edges)
        values = data.bin_lo + (width - 1) / 2.0
        keep = data.counts > 0
        return values[keep].astype(float), data.counts[keep].astype(float)
    arr = np.asarray(data)
    if arr.size == 0:
        raise InsufficientDataError("no samples")
    if np.any(arr < 0):
        raise DomainError("counts must be non-negative")
    v, m = np.unique(arr, return_counts=True)
    return v.astype(float), m.astype(float)


def _log_pois(v, lam):
    return xlogy(v, lam) - lam - gammaln(v + 1)


def _em(v, m, lam_lo, lam_hi, w_lo, tol, max_iter):
    hist = []
    prev = -np.inf
    for it in range(1, max_iter + 1):
        la = np.log(w_lo) + _log_pois(v, lam_lo) if w_lo > 0 else np.full(v.shape, -np.inf)
        lb = np.log1p(-w_lo) + _log_pois(v, lam_hi) if w_lo < 1 else np.full(v.shape, -np.inf)
        norm = np.logaddexp(la, lb)
        ll = float(np.sum(m * norm))
        hist.append(ll)
        r = np.exp(la - norm)
        n_lo = np.sum(m * r)
        n_hi = np.sum(m) - n_lo
        w_lo = float(n_lo / np.sum(m))
        if n_lo > 0:
            lam_lo = float(np.sum(m * r * v) / n_lo)
        if n_hi > 0:
            lam_hi = float(np.sum(m * (1 - r) * v) / n_hi)
        if ll - prev < tol:
            break
        prev = ll
    return lam_lo, lam_hi, w_lo, hist, it


def fit_poisson_mixture(data, tol: float = 1e-9, max_iter: int = 20000,
                        restarts: int = 0, rng=None) -> PoissonMixtureFit:
    """Two-component Poisson mixture by expectation-maximisation.

    ``data`` is a :class:`HistogramData` (bins represented by their centre)
    or raw counts. Initialisation splits the sample at its median; optional
    ``restarts`` add random splits and keep the best likelihood. Iteration
    stops once the log-likelihood gain falls below ``tol``.

    Data better explained by one Poisson (likelihood-ratio statistic below
    ``MIXTURE_LR_CUTOFF``) or a vanishing component yields ``degenerate=True``
    with both means equal to the sample mean and ``weight_low = 1``.
    """
    v, m = _values_and_weights(data)
    n = int(m.sum())
    if n < 100:
        raise InsufficientDataError(f"need >= 100 samples, got {n}")
    mean = float(np.sum(m * v) / n)
    ll_single = float(np.sum(m * _log_pois(v, mean)))

    cum = np.cumsum(m)
    median = v[np.searchsorted(cum, 0.5 * n)]
    starts = []
    lo = v <= median
    if lo.all():
        lo = v < median
    if lo.any() and (~lo).any():
        starts.append(lo)
    if restarts:
        gen = np.random.default_rng(rng)
        for _ in range(restarts):
            cut = gen.choice(v[:-1]) if v.size > 1 else v[0]
            starts.append(v <= cut)

    best = None
    for mask in starts:
        lam_lo = float(np.sum(m[mask] * v[mask]) / m[mask].sum())
        lam_hi = float(np.sum(m[~mask] * v[~mask]) / m[~mask].sum())
        w_lo = float(m[mask].sum() / n)
        out = _em(v, m, lam_lo, lam_hi, w_lo, tol, max_iter)
        if best is None or out[3][-1] > best[3][-1]:
            best = out

    if best is not None:
        lam_lo, lam_hi, w_lo, hist, it = best
        if lam_lo > lam_hi:
            lam_lo, lam_hi, w_lo = lam_hi, lam_lo, 1 - w_lo
        ll = hist[-1]
        if 2 * (ll - ll_single) >= MIXTURE_LR_CUTOFF and 1e-3 < w_lo < 1 - 1e-3:
            return PoissonMixtureFit(lam_lo, lam_hi, w_lo, ll, it, False, n, hist)
        return PoissonMixtureFit(mean, mean, 1.0, ll_single, it, True, n, hist)
    return PoissonMixtureFit(mean, mean, 1.0, ll_single, 0, True, n, [ll_single])


# -- dwell times ----------------------------------------------------------------

@dataclass
class DwellTimes:
    low: np.ndarray
    high: np.ndarray
    degenerate: bool
    labels: np.ndarray = field(repr=False)
    bin_width: float = 1.0

    def mean_high(self) -> float:
        return float(self.high.mean()) if self.high.size else float("nan")

    def mean_low(self) -> float:
        return float(self.low.mean()) if self.low.size else float("nan")


def _runs(labels):
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [labels.size]]))
    return list(zip(labels[starts].tolist(), lengths.tolist()))


def _debounce(runs, min_run):
    out = []
    pending = 0
    for label, length in runs:
        if length < min_run:
            if out:
                out[-1][1] += length
            else:
                pending += length
            continue
        if out and out[-1][0] == label:
            out[-1][1] += length
        else:
            out.append([label, length + pending])
            pending = 0
    if not out:
        label = max(runs, key=lambda r: r[1])[0]
        out = [[label, sum(r[1] for r in runs)]]
    elif pending:
        out[0][1] += pending
    return out


def classify_bins(trace: FluorescenceTrace, threshold: int, min_run: int = 3) -> np.ndarray:
    """Per-bin high (1) / low (0) labels after debouncing.

    Runs shorter than ``min_run`` bins are absorbed into the preceding run
    (a short leading run joins the first long one)."""
    if min_run < 1:
        raise DomainError("min_run must be >= 1")
    labels = (trace.counts > threshold).astype(np.int8)
    if labels.size == 0:
        raise DomainError("empty trace")
    runs = _debounce(_runs(labels), min_run)
    return np.repeat(np.array([r[0] for r in runs], dtype=np.int8), [r[1] for r in runs])


def extract_dwell_times(trace: FluorescenceTrace, threshold: int, min_run: int = 3,
                        drop_edges: bool = False) -> DwellTimes:
    """Dwell durations (seconds) in the low- and high-count levels.

    Bins are thresholded (``count > threshold`` is high), debounced with
    :func:`classify_bins`, and run-length encoded. ``drop_edges`` removes the
    first and last runs, which are censored by the trace boundaries.
    """
    labels = classify_bins(trace, threshold, min_run)
    runs = _runs(labels)
    degenerate = len(runs) < 2
    if drop_edges:
        runs = runs[1:-1]
    low = np.array([n for lab, n in runs if lab == 0], dtype=float) * trace.bin_width
    high = np.array([n for lab, n in runs if lab == 1], dtype=float) * trace.bin_width
    return DwellTimes(low, high, degenerate, labels, trace.bin_width)
