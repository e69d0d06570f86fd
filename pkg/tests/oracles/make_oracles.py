"""Independent reference values for the test suite.

Nothing here imports ``tbisim``. Every value is obtained by brute force
(dense grids, exhaustive search, direct matrix powers) so that it can be
compared against the library's closed forms, bisections and dynamic
programs. Run this script to regenerate ``values.json``; the test suite
reads the frozen file and also re-derives the cheap entries on the fly.
"""

import json
import math
from pathlib import Path

import numpy as np
from scipy import stats

HERE = Path(__file__).resolve().parent


def ideal_bell_minimum():
    # q(t) = c^2 and q(2t) = (2c^2 - 1)^2, so B = (3x - 1)(x - 1) with x = c^2
    x = np.linspace(0.0, 1.0, 2_000_001)
    b = (3 * x - 1) * (x - 1)
    i = int(np.argmin(b))
    return {"x_min": float(x[i]), "B_min": float(b[i]),
            "omega_t_min": float(2 * math.acos(math.sqrt(x[i])))}


def damped_b(g, t, omega=1.0):
    q1 = 0.5 * (1 + np.exp(-g * t) * np.cos(omega * t))
    q2 = 0.5 * (1 + np.exp(-2 * g * t) * np.cos(2 * omega * t))
    return q2 - q1 ** 2


def critical_noise_grid(omega=1.0):
    """Smallest gamma on a ladder for which B(t) >= 0 on a log+linear t grid.

    B is scaled by (omega t)^2 so that the vanishing small-t violation is
    still resolved in double precision.
    """
    t = np.unique(np.concatenate([np.geomspace(1e-4, 1.0, 4000), np.linspace(1e-3, 4 * math.pi, 20000)])) / omega
    gammas = np.arange(1.30, 1.50, 1e-4) * omega
    worst = np.array([np.min(damped_b(g, t, omega) / (omega * t) ** 2) for g in gammas])
    i = int(np.argmax(worst >= 0))
    return {"gamma_star_over_omega": float(gammas[i] / omega), "ladder_step": 1e-4}


def min_bell_grid(g_over_omega):
    t = np.unique(np.concatenate([np.geomspace(1e-6, 1.0, 20000), np.linspace(1e-3, 4 * math.pi, 40000)]))
    return float(np.min(damped_b(g_over_omega, t)))


def readout_calibration(target=0.91, ratio=3.0):
    """Dense scan of the dark mean; product fidelity at the best threshold."""
    best = None
    for lam_d in np.arange(4.0, 7.0, 1e-4):
        lam_b = ratio * lam_d
        thr = np.arange(0, int(lam_b + 10 * math.sqrt(lam_b)) + 1)
        prod = stats.poisson.cdf(thr, lam_d) * stats.poisson.sf(thr, lam_b)
        j = int(np.argmax(prod))
        if best is None or abs(prod[j] - target) < abs(best[2] - target):
            best = (lam_d, lam_b, float(prod[j]), int(thr[j]))
    lam_d, lam_b, f2, thr = best
    return {"lambda_dark": float(lam_d), "lambda_bright": float(lam_b), "F_squared": f2, "threshold": thr,
            "f_dark": float(stats.poisson.cdf(thr, lam_d)), "f_bright": float(stats.poisson.sf(thr, lam_b))}


def balanced_threshold(lam_d=20.0, lam_b=60.0):
    thr = np.arange(0, int(lam_b + 10 * math.sqrt(lam_b)) + 1)
    prod = stats.poisson.cdf(thr, lam_d) * stats.poisson.sf(thr, lam_b)
    return int(thr[int(np.argmax(prod))])


def flip_chain_final_flip(n=2000, p_total=0.5):
    """P(final state != initial) after n steps of a two-state toggle chain."""
    p = p_total / n
    step = np.array([[1 - p, p], [p, 1 - p]])
    return float(np.linalg.matrix_power(step, n)[0, 1])


def main():
    values = {
        "ideal_bell": ideal_bell_minimum(),
        "critical_noise": critical_noise_grid(),
        "min_bell_ladder": {str(k): min_bell_grid(k * math.sqrt(2)) for k in (0.9, 1.1, 10.0)},
        "readout_calibration_091": readout_calibration(),
        "balanced_threshold_20_60": balanced_threshold(),
        "flip_chain_half": flip_chain_final_flip(),
    }
    (HERE / "values.json").write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    print(json.dumps(values, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
