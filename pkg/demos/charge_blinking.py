"""Charge-state blinking under orange light and the power law of ionization.

Simulates an NV-/NV0 telegraph process, renders it as a photon-count trace,
then recovers dwell times by thresholding.
"""
# %%
import math

import numpy as np

from tbisim import (
    Illumination,
    IlluminationSetting,
    PhotophysicsConfig,
    build_histogram,
    extract_dwell_times,
    fit_poisson_mixture,
    stream,
)
from tbisim import photophysics as ph
from tbisim.readout import optimal_threshold

cfg = PhotophysicsConfig()
orange = cfg.default_setting(Illumination.ORANGE)
green = cfg.default_setting(Illumination.GREEN)

# %% A 5-minute trace in 5 ms bins
bw = 5e-3
traj = ph.simulate_charge_trajectory(cfg, orange, 300.0, stream(0, "traj"))
trace = ph.render_trace(traj, cfg, bw, stream(0, "photons"))
bright, dark = ph.photon_rates(cfg, orange)
thr = optimal_threshold(dark * bw, bright * bw)
d = extract_dwell_times(trace, thr, drop_edges=True)
print(f"threshold {thr} counts/bin; {d.high.size} NV- dwells, mean {d.mean_high() * 1e3:.0f} ms "
      f"(true trajectory: {traj.dwell_times().mean() * 1e3:.0f} ms)")

# %% Halving the power quadruples the dwell time
for scale in (1.0, 0.5, 0.25):
    s = IlluminationSetting(Illumination.ORANGE, orange.power * scale)
    ion, _ = ph.charge_rates(cfg, s)
    print(f"power x{scale:<5} mean NV- dwell {1 / ion:7.3f} s")

# %% Green light sets the initial charge populations
p = ph.steady_state_minus(cfg, green)
rng = stream(0, "hist")
init = (rng.random(50_000) < p).astype(np.int8)
counts, _ = ph.charge_measurement_batch(cfg, orange, 8e-3, rng, init)
mix = fit_poisson_mixture(build_histogram(counts))
print(f"steady-state NV- {p:.2f}; mixture fit weight_high {mix.weight_high:.3f}, "
      f"means {mix.lambda_low:.2f} / {mix.lambda_high:.2f} counts")
