"""Where does the temporal Bell violation come from, and when does noise kill it?

Walks through the closed-form survival probability, the Bell functional
B(t) = q(2t) - q(t)^2, and the noise level beyond which B never goes negative.
"""
# %%
import math

import numpy as np

from tbisim import RabiParams, bell_curve, critical_noise, min_bell, survival_probability

omega = 1.0
ideal = RabiParams(omega)

# %% The ideal curve dips to -1/3 where q(t) = 2/3
grid = np.linspace(1e-3, 2 * math.pi, 2001)
curve = bell_curve(ideal, grid)
i = np.argmin(curve[:, 1])
print(f"ideal minimum B = {curve[i, 1]:.6f} at omega*t = {curve[i, 0]:.4f}, "
      f"q(t) = {survival_probability(ideal, curve[i, 0]):.4f}")

# %% Dephasing shrinks the dip
for g in (0.1, 0.5, 1.0, 1.3):
    t, b = min_bell(RabiParams(omega, gamma_phi=g))
    print(f"gamma_phi/omega = {g:.1f}: min B = {b:+.5f} at omega*t = {t:.3f}")

# %% ...until it vanishes at the critical rate
res = critical_noise(omega)
print(f"critical gamma/omega = {res.gamma_star / omega:.6f} (sqrt(2) = {math.sqrt(2):.6f})")
for f in (0.9, 1.1):
    print(f"  at {f} x critical: min B = {min_bell(RabiParams(omega, f * res.gamma_star))[1]:+.3e}")
