import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbisim.analysis import (
    MIXTURE_LR_CUTOFF,
    CosineFit,
    bell_from_fit,
    classify_bins,
    extract_dwell_times,
    fit_cosine,
    fit_poisson_mixture,
)
from tbisim.dynamics import RabiParams, bell_curve
from tbisim.errors import DomainError, FitError, InsufficientDataError
from tbisim.photophysics import (
    ChargeState,
    FluorescenceTrace,
    Illumination,
    PhotophysicsConfig,
    photon_rates,
    render_trace,
    simulate_charge_trajectory,
)
from tbisim.protocol import ExperimentConfig, rabi_scan
from tbisim.readout import build_histogram, optimal_threshold, threshold_fidelity
from tbisim.streams import StreamFactory, stream

T_23 = 2 * math.acos(math.sqrt(2 / 3))


def _points(tau, y, s):
    return list(zip(tau, y, np.broadcast_to(s, np.shape(tau))))


# -- cosine fit ------------------------------------------------------------------

def test_noiseless_cosine():
    tau = np.linspace(0, 4 * math.pi, 40)
    fit = fit_cosine(_points(tau, 0.5 + 0.5 * np.cos(tau), 0.01))
    assert fit.offset == pytest.approx(0.5, abs=1e-8)
    assert fit.amplitude == pytest.approx(0.5, abs=1e-8)
    assert fit.omega == pytest.approx(1.0, abs=1e-8)
    assert fit.phase == pytest.approx(0.0, abs=1e-8)


def test_cosine_canonical_form():
    tau = np.linspace(0, 3, 30)
    y = 0.4 - 0.3 * np.cos(5.0 * tau + 0.2)
    fit = fit_cosine(_points(tau, y, 0.01))
    assert fit.amplitude > 0 and fit.omega > 0 and -math.pi < fit.phase <= math.pi
    assert fit(tau) == pytest.approx(y, abs=1e-8)
    vals = fit(np.linspace(0, 10, 1000))
    assert vals.min() >= fit.offset - fit.amplitude - 1e-12
    assert vals.max() <= fit.offset + fit.amplitude + 1e-12


def test_cosine_coverage():
    # the fitted frequency lands within 3 reported sigma in >= 95% of trials
    rng = np.random.default_rng(31)
    tau = np.linspace(0, 4 * math.pi, 50)
    hits = 0
    for _ in range(200):
        y = 0.5 + 0.5 * np.cos(tau) + rng.normal(0, 0.01, tau.size)
        fit = fit_cosine(_points(tau, y, 0.01))
        hits += abs(fit.omega - 1.0) <= 3 * fit.stderr("omega")
    assert hits >= 190


def test_cosine_scale_consistency():
    rng = np.random.default_rng(32)
    tau = np.linspace(0, 4 * math.pi, 30)
    y = 0.5 + 0.4 * np.cos(tau) + rng.normal(0, 0.02, tau.size)
    a = fit_cosine(_points(tau, y, 0.02))
    b = fit_cosine(_points(tau, y, 0.06))
    for name in a.param_names:
        # agreement is limited by the optimizer's stopping rule; judge it against the stderr
        assert abs(getattr(a, name) - getattr(b, name)) < 1e-4 * a.stderr(name)
        assert b.stderr(name) == pytest.approx(3 * a.stderr(name), rel=1e-6)


def test_cosine_free_decay():
    tau = np.linspace(0, 6 * math.pi, 60)
    y = 0.5 + 0.5 * np.exp(-0.1 * tau) * np.cos(tau)
    fit = fit_cosine(_points(tau, y, 0.01), free_decay=True)
    assert fit.decay == pytest.approx(0.1, abs=1e-7)
    assert "decay" in fit.param_names


def test_cosine_domain_errors():
    tau = np.linspace(0, 4 * math.pi, 5)
    with pytest.raises(DomainError):
        fit_cosine(_points(tau, np.cos(tau), 0.01))
    short = np.linspace(0, 0.5, 10)
    with pytest.raises(DomainError):
        fit_cosine(_points(short, 0.5 + 0.5 * np.cos(short), 0.01))


def test_cosine_fit_error_reports_diagnostics():
    tau = np.linspace(0, 4 * math.pi, 30)
    with pytest.raises(FitError) as exc:
        fit_cosine(_points(tau, 0.5 + 0.5 * np.cos(tau) + 0.01 * np.sin(7 * tau), 0.01), max_nfev=1)
    assert "nfev" in exc.value.diagnostics


def test_unweighted_fit():
    rng = np.random.default_rng(33)
    tau = np.linspace(0, 4 * math.pi, 40)
    y = 0.5 + 0.5 * np.cos(tau) + rng.normal(0, 0.01, tau.size)
    fit = fit_cosine(_points(tau, y, 0.0))
    assert not fit.weighted
    assert fit.stderr("omega") > 0


def test_headline_scan_offset_shifted_up():
    cfg = ExperimentConfig.headline()
    w = cfg.rabi.omega
    pts = rabi_scan(np.linspace(0, 4 * math.pi, 41) / w, 20_000, cfg, StreamFactory(34))
    fit = fit_cosine(pts)
    assert fit.offset > 0.5 * (1 - fit.contrast)
    tg = np.linspace(1e-4, 2 * math.pi, 4001) / fit.omega
    assert bell_from_fit(fit, tg)[:, 1].min() == pytest.approx(-0.209, abs=0.02)


# -- bell_from_fit -------------------------------------------------------------------

def _ideal_fit(a=0.5, b=0.5):
    return CosineFit(a, b, 1.0, 0.0, 0.0, np.zeros((4, 4)), ("offset", "amplitude", "omega", "phase"),
                     0.0, 0.0, 1, True)


def test_bell_from_ideal_fit():
    assert bell_from_fit(_ideal_fit(), [T_23])[0, 1] == pytest.approx(-1 / 3, abs=1e-12)
    grid = np.linspace(0, 4 * math.pi, 500)
    assert np.max(np.abs(bell_from_fit(_ideal_fit(), grid) - bell_curve(RabiParams(1.0), grid))) < 1e-10


@given(st.floats(0.0, 1.0))
def test_flat_fit_never_violates(a):
    b = bell_from_fit(_ideal_fit(a, 0.0), np.linspace(0, 10, 50))[:, 1]
    assert np.allclose(b, a - a * a)
    assert np.all(b >= -1e-15)


# -- Poisson mixture ------------------------------------------------------------------

def test_mixture_degenerate():
    fit = fit_poisson_mixture(stream(35).poisson(30, 20_000))
    assert fit.degenerate
    assert fit.lambda_low == pytest.approx(30, rel=0.01)
    assert fit.weight_low in (0.0, 1.0)


def test_mixture_recovers_means():
    rng = stream(36)
    x = np.where(rng.random(100_000) < 0.5, rng.poisson(20, 100_000), rng.poisson(60, 100_000))
    fit = fit_poisson_mixture(x)
    assert not fit.degenerate
    assert fit.lambda_low == pytest.approx(20, rel=0.02)
    assert fit.lambda_high == pytest.approx(60, rel=0.02)
    assert fit.weight_low == pytest.approx(0.5, abs=0.01)
    h = fit_poisson_mixture(build_histogram(x))
    assert h.lambda_low == pytest.approx(fit.lambda_low, rel=1e-6)


def test_mixture_em_monotone():
    rng = stream(37)
    x = np.where(rng.random(5000) < 0.3, rng.poisson(5, 5000), rng.poisson(12, 5000))
    fit = fit_poisson_mixture(x)
    assert np.all(np.diff(fit.ll_history) >= -1e-9)


@settings(max_examples=25)
@given(st.floats(1.0, 30.0), st.floats(1.5, 5.0), st.floats(0.1, 0.9), st.integers(0, 10_000))
def test_mixture_invariants(lam, ratio, w, seed):
    rng = np.random.default_rng(seed)
    n = 2000
    x = np.where(rng.random(n) < w, rng.poisson(lam, n), rng.poisson(lam * ratio, n))
    fit = fit_poisson_mixture(x)
    assert 0 <= fit.weight_low <= 1
    assert fit.lambda_low <= fit.lambda_high
    assert fit.degenerate or fit.lambda_low < fit.lambda_high
    assert np.all(np.diff(fit.ll_history) >= -1e-7 * abs(fit.ll_history[0]))


def test_mixture_restarts_and_errors():
    rng = stream(38)
    x = np.where(rng.random(3000) < 0.5, rng.poisson(5, 3000), rng.poisson(25, 3000))
    a = fit_poisson_mixture(x)
    b = fit_poisson_mixture(x, restarts=5, rng=1)
    assert b.log_likelihood >= a.log_likelihood - 1e-6
    with pytest.raises(InsufficientDataError):
        fit_poisson_mixture([1, 2, 3])
    assert MIXTURE_LR_CUTOFF > 0


def test_mixture_charge_histogram_weight():
    cfg = ExperimentConfig()
    from tbisim.photophysics import charge_measurement_batch, steady_state_minus
    rng = stream(39)
    init = (rng.random(100_000) < steady_state_minus(cfg.photophysics, cfg.green)).astype(np.int8)
    counts, _ = charge_measurement_batch(cfg.photophysics, cfg.orange, cfg.charge_pulse, rng, init)
    assert fit_poisson_mixture(build_histogram(counts)).weight_high == pytest.approx(0.70, abs=0.02)


# -- dwell times ----------------------------------------------------------------------

def test_two_segment_trace():
    trace = FluorescenceTrace(0.01, [0] * 40 + [10] * 60)
    d = extract_dwell_times(trace, 4)
    assert d.low == pytest.approx([0.4])
    assert d.high == pytest.approx([0.6])
    assert not d.degenerate


def test_flat_trace_degenerate():
    d = extract_dwell_times(FluorescenceTrace(0.01, [0] * 50), 4)
    assert d.degenerate
    assert d.high.size == 0


def test_debounce_merges_flickers():
    trace = FluorescenceTrace(1.0, [0] * 10 + [9] + [0] * 10 + [9] * 10)
    assert extract_dwell_times(trace, 4, min_run=1).low.size == 2
    d3 = extract_dwell_times(trace, 4, min_run=3)
    assert d3.low == pytest.approx([21.0]) and d3.high == pytest.approx([10.0])
    with pytest.raises(DomainError):
        classify_bins(trace, 4, min_run=0)


@pytest.fixture(scope="module")
def orange_trace():
    cfg = PhotophysicsConfig()
    setting = cfg.default_setting(Illumination.ORANGE)
    traj = simulate_charge_trajectory(cfg, setting, 120.0, stream(40, "traj"))
    trace = render_trace(traj, cfg, 5e-3, stream(40, "photons"))
    b, d = photon_rates(cfg, setting)
    thr = optimal_threshold(d * 5e-3, b * 5e-3)
    return cfg, traj, trace, thr


def test_debounce_stochastic_ordering(orange_trace):
    _, _, trace, thr = orange_trace
    d1 = extract_dwell_times(trace, thr, min_run=1)
    d3 = extract_dwell_times(trace, thr, min_run=3)
    assert d3.high.size + d3.low.size <= d1.high.size + d1.low.size
    assert d3.high.mean() >= d1.high.mean()


def test_dwell_mean_matches_truth(orange_trace):
    _, traj, trace, thr = orange_trace
    d = extract_dwell_times(trace, thr, drop_edges=True)
    truth = traj.dwell_times(ChargeState.NV_MINUS)
    se = d.high.std(ddof=1) / math.sqrt(d.high.size)
    assert abs(d.mean_high() - truth.mean()) < 3 * se
    # against the model mean, use the exponential SE: the sample sd is noisy at n ~ 35
    assert abs(d.mean_high() - 0.6) < 3 * 0.6 / math.sqrt(d.high.size)


def test_bin_classification_accuracy(orange_trace):
    cfg, _, trace, thr = orange_trace
    b, d = photon_rates(cfg, cfg.default_setting(Illumination.ORANGE))
    f = threshold_fidelity(d * 5e-3, b * 5e-3, 0.5, thr)
    p_minus = np.mean(trace.true_states == ChargeState.NV_MINUS)
    predicted = p_minus * f.f_assign_bright + (1 - p_minus) * f.f_assign_dark
    labels = classify_bins(trace, thr)
    acc = np.mean(labels == trace.true_states)
    n = trace.counts.size
    assert acc >= predicted - 3 * math.sqrt(predicted * (1 - predicted) / n)
