"""A full Monte Carlo run of the two-time measurement with realistic readout.

Readout is calibrated to F^2 = 0.91, the baseline shift is tuned so that the
expected Bell minimum is -0.209, and shot counts are planned for a target
standard error of 0.0039.
"""
# %%
import math
import time

import numpy as np

from tbisim import ExperimentConfig, StreamFactory, bell_from_fit, fit_cosine, rabi_scan
from tbisim.protocol import expected_q, optimal_tau, pipeline_response, required_shots, run_tbi_experiment

cfg = ExperimentConfig.headline()
fid = cfg.readout.fidelity()
print(f"readout: dark {cfg.readout.mean_photons_dark:.3f}, bright {cfg.readout.mean_photons_bright:.3f} "
      f"photons, threshold {cfg.readout.threshold}, F^2 = {fid.f_squared:.4f}")
print(f"baseline shift {cfg.baseline_shift:.6f}, charge threshold {cfg.charge_threshold}")

streams = StreamFactory(0, "demo")

# %% A Rabi scan and its cosine fit
w = cfg.rabi.omega
pts = rabi_scan(np.linspace(0, 4 * math.pi, 41) / w, 20_000, cfg, streams.child("scan"))
fit = fit_cosine(pts)
print(f"fit: offset {fit.offset:.4f}, contrast {fit.contrast:.4f}, omega/2pi {fit.omega / 2 / math.pi:.1f} Hz")
b = bell_from_fit(fit, np.linspace(1e-4, 2 * math.pi, 4001) / fit.omega)
print(f"Bell curve from the fit: min {b[:, 1].min():+.4f}")

# %% The two-time experiment at the optimal delay
t, b_exp = optimal_tau(cfg)
n_used, _ = required_shots(float(expected_q(t, cfg)), float(expected_q(2 * t, cfg)), 0.0039)
planned = math.ceil(n_used / pipeline_response(cfg)[2])
start = time.perf_counter()
res = run_tbi_experiment(t, planned, planned, cfg, streams.child("tbi"))
print(f"omega*t = {t * w:.3f}, expected B = {b_exp:+.4f}, {planned} shots per set "
      f"({time.perf_counter() - start:.1f} s)")
print(f"B = {res.B:+.4f} +- {res.B_stderr:.4f}  ({res.n_sigma:.1f} sigma below zero)")
print(f"contrast-corrected B = {res.B_corrected:+.4f}")
