import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from tbisim.errors import DomainError
from tbisim.photophysics import (
    ChargeChannel,
    ChargeState,
    ChargeTrajectory,
    FluorescenceTrace,
    Illumination,
    IlluminationSetting,
    PhotophysicsConfig,
    charge_measurement,
    charge_measurement_batch,
    charge_outcome_probabilities,
    charge_rates,
    photon_rates,
    render_trace,
    simulate_charge_trajectory,
    steady_state_minus,
)
from tbisim.streams import stream

CFG = PhotophysicsConfig()
ORANGE = CFG.default_setting(Illumination.ORANGE)
GREEN = CFG.default_setting(Illumination.GREEN)


def test_types_validation():
    with pytest.raises(DomainError):
        IlluminationSetting(Illumination.ORANGE, 0.0)
    with pytest.raises(DomainError):
        ChargeChannel(1.0, 1.0, bright_rate=10.0, dark_rate=20.0, reference_power=1e-6)
    with pytest.raises(DomainError):
        ChargeChannel(-1.0, 1.0, bright_rate=20.0, dark_rate=10.0, reference_power=1e-6)
    assert ChargeState.NV_MINUS != ChargeState.NV_ZERO
    assert set(ChargeState) == {ChargeState.NV_MINUS, ChargeState.NV_ZERO}


def test_orange_lifetime_anchor():
    # the NV- lifetime under 0.4 uW orange light is about 600 ms
    assert ORANGE.power == pytest.approx(0.4e-6)
    ion, rec = charge_rates(CFG, ORANGE)
    assert 1 / ion == pytest.approx(0.6, rel=1e-12)
    assert rec == pytest.approx(ion / 5)


def test_green_steady_state_anchor():
    # 30% of the time in the neutral state
    ion, rec = charge_rates(CFG, GREEN)
    assert rec / (rec + ion) == pytest.approx(0.70, abs=0.02)
    assert steady_state_minus(CFG, GREEN) == pytest.approx(0.70, abs=1e-12)


@given(st.sampled_from([ORANGE, GREEN]), st.floats(0.1, 10.0))
def test_quadratic_power_law(base, factor):
    ion0, rec0 = charge_rates(CFG, base)
    s = IlluminationSetting(base.label, base.power * factor)
    ion1, rec1 = charge_rates(CFG, s)
    assert ion1 == pytest.approx(ion0 * factor**2, rel=1e-12)
    assert rec1 == pytest.approx(rec0 * factor**2, rel=1e-12)
    b0, d0 = photon_rates(CFG, base)
    b1, d1 = photon_rates(CFG, s)
    assert b1 == pytest.approx(b0 * factor, rel=1e-12)
    assert d1 == pytest.approx(d0 * factor, rel=1e-12)


def test_power_doubled_rates_times_four():
    s = IlluminationSetting(Illumination.ORANGE, 2 * ORANGE.power)
    assert np.allclose(np.array(charge_rates(CFG, s)), 4 * np.array(charge_rates(CFG, ORANGE)), rtol=1e-12)


def test_absorbing_minus_state():
    cfg = CFG.with_channel("ORANGE", ionization_coeff=0.0)
    traj = simulate_charge_trajectory(cfg, ORANGE, 10.0, stream(1), initial=ChargeState.NV_MINUS)
    assert len(traj) == 1
    assert list(traj) == [(0.0, ChargeState.NV_MINUS)]
    assert traj.occupancy() == 1.0


def test_orange_dwell_mean_60s():
    traj = simulate_charge_trajectory(CFG, ORANGE, 60.0, stream(3, "dwell60"))
    d = traj.dwell_times(ChargeState.NV_MINUS, complete_only=False)
    # 60 s of orange yields ~17 NV- visits; pool several seeds to reach >=50 dwells
    for k in range(1, 6):
        d = np.concatenate([d, simulate_charge_trajectory(CFG, ORANGE, 60.0, stream(3, "dwell60", k)).dwell_times()])
    assert d.size >= 50
    assert abs(d.mean() - 0.6) < 3 * d.std(ddof=1) / math.sqrt(d.size)


def test_dwell_distribution_ks():
    cfg = CFG.with_channel("ORANGE", recombination_coeff=CFG.orange.ionization_coeff)
    traj = simulate_charge_trajectory(cfg, ORANGE, 2000.0, stream(5, "ks"))
    d = traj.dwell_times()[:1000]
    assert d.size == 1000
    res = stats.kstest(d, "expon", args=(0, 0.6))
    assert res.statistic < 1.63 / math.sqrt(d.size)  # 1% critical value


def test_symmetric_rates_half_occupancy():
    cfg = CFG.with_channel("ORANGE", recombination_coeff=CFG.orange.ionization_coeff)
    occ = [simulate_charge_trajectory(cfg, ORANGE, 1000.0, stream(6, "sym", k)).occupancy() for k in range(20)]
    # telegraph variance of a time average: p(1-p) / (rate * T) with rate = 1/0.6 s
    se = math.sqrt(0.25 * 0.6 / (20 * 1000.0))
    assert abs(np.mean(occ) - 0.5) < 3 * se


def test_steady_state_long_trace():
    traj = simulate_charge_trajectory(CFG, GREEN, 20.0, stream(7, "green"))
    ion, rec = charge_rates(CFG, GREEN)
    tau_c = 1 / (ion + rec)
    n_eff = traj.duration / (2 * tau_c)
    p = rec / (ion + rec)
    assert abs(traj.occupancy() - p) < 3 * math.sqrt(p * (1 - p) / n_eff)


def test_render_dark_zero():
    cfg = CFG.with_channel("ORANGE", dark_rate=0.0)
    traj = ChargeTrajectory(np.array([0.0]), np.array([0], dtype=np.int8), 1.0, ORANGE)
    trace = render_trace(traj, cfg, 1e-3, stream(8))
    assert trace.counts.size == 1000
    assert np.all(trace.counts == 0)
    assert np.all(trace.true_states == ChargeState.NV_ZERO)


def test_render_bright_poisson_mean():
    traj = ChargeTrajectory(np.array([0.0]), np.array([1], dtype=np.int8), 100.0, ORANGE)
    trace = render_trace(traj, CFG, 1e-2, stream(9))
    assert trace.counts.size == 10_000
    mu = CFG.orange.bright_rate * 1e-2
    assert abs(trace.counts.mean() - mu) < 3 * math.sqrt(mu / trace.counts.size)


def test_render_mid_bin_switch():
    from tbisim.photophysics import _expected_counts
    traj = ChargeTrajectory(np.array([0.0, 0.5]), np.array([1, 0], dtype=np.int8), 1.0, ORANGE)
    mean = _expected_counts(traj, CFG, np.array([0.0, 1.0]))
    b, d = photon_rates(CFG, ORANGE)
    assert mean[0] == pytest.approx((b + d) / 2)


def test_photon_counts_are_poisson():
    traj = ChargeTrajectory(np.array([0.0]), np.array([1], dtype=np.int8), 1000.0, ORANGE)
    trace = render_trace(traj, CFG, 1e-2, stream(10))
    assert 0.95 <= trace.counts.var() / trace.counts.mean() <= 1.05


def test_trace_length_matches_duration():
    traj = simulate_charge_trajectory(CFG, ORANGE, 3.0, stream(11))
    trace = render_trace(traj, CFG, 5e-3, stream(12))
    assert len(trace.counts) == round(3.0 / 5e-3)
    assert trace.duration == pytest.approx(3.0)
    with pytest.raises(DomainError):
        FluorescenceTrace(1e-3, [1, -1])


def test_power_scaling_on_simulated_traces():
    half = IlluminationSetting(Illumination.ORANGE, ORANGE.power / 2)
    d_full = simulate_charge_trajectory(CFG, ORANGE, 3000.0, stream(13, "full")).dwell_times()
    d_half = simulate_charge_trajectory(CFG, half, 12000.0, stream(13, "half")).dwell_times()
    ratio = d_half.mean() / d_full.mean()
    se = ratio * math.sqrt(1 / d_full.size + 1 / d_half.size)
    assert abs(ratio - 4.0) < 3 * se
    # bright-level photon rate halves with power
    one = ChargeTrajectory(np.array([0.0]), np.array([1], dtype=np.int8), 100.0, ORANGE)
    two = ChargeTrajectory(np.array([0.0]), np.array([1], dtype=np.int8), 100.0, half)
    c1 = render_trace(one, CFG, 1e-2, stream(14)).counts.mean()
    c2 = render_trace(two, CFG, 1e-2, stream(15)).counts.mean()
    assert c2 / c1 == pytest.approx(0.5, rel=0.03)


def test_charge_measurement_dark_zero():
    cfg = CFG.with_channel("ORANGE", recombination_coeff=0.0, dark_rate=0.0)
    count, final = charge_measurement(cfg, ORANGE, 8e-3, stream(16), initial=ChargeState.NV_ZERO)
    assert count == 0 and final is ChargeState.NV_ZERO


def test_charge_measurement_no_switching():
    cfg = CFG.with_channel("ORANGE", ionization_coeff=0.0)
    rng = stream(17)
    counts = np.array([charge_measurement(cfg, ORANGE, 8e-3, rng)[0] for _ in range(5000)])
    mu = CFG.orange.bright_rate * 8e-3
    assert abs(counts.mean() - mu) < 3 * math.sqrt(mu / counts.size)
    assert 0.9 < counts.var() / counts.mean() < 1.1


def test_batch_matches_scalar_law():
    rng_a, rng_b = stream(18, "a"), stream(18, "b")
    init = np.ones(4000, dtype=np.int8)
    batch, _ = charge_measurement_batch(CFG, ORANGE, 8e-3, rng_a, init)
    scalar = np.array([charge_measurement(CFG, ORANGE, 8e-3, rng_b)[0] for _ in range(4000)])
    assert stats.ks_2samp(batch, scalar).pvalue > 1e-3


def test_charge_histogram_weight():
    rng = stream(19)
    p = steady_state_minus(CFG, GREEN)
    init = (rng.random(100_000) < p).astype(np.int8)
    counts, _ = charge_measurement_batch(CFG, ORANGE, 8e-3, rng, init)
    from tbisim.analysis import fit_poisson_mixture
    fit = fit_poisson_mixture(counts)
    assert fit.weight_high == pytest.approx(0.70, abs=0.01)


def test_outcome_probabilities_normalised():
    P = charge_outcome_probabilities(CFG, ORANGE, 8e-3, 13)
    assert P.shape == (2, 2, 2)
    assert P.sum(axis=(1, 2)) == pytest.approx([1.0, 1.0], abs=1e-9)
    # DP acceptance for an NV- start agrees with Monte Carlo
    counts, _ = charge_measurement_batch(CFG, ORANGE, 8e-3, stream(20), np.ones(200_000, dtype=np.int8))
    acc = np.mean(counts > 13)
    assert P[1, 1].sum() == pytest.approx(acc, abs=4 * math.sqrt(acc * (1 - acc) / counts.size) + 1e-3)
