"""Command-line entry point.

    tbisim [--config FILE] [--seed N] [--workers N] [--out DIR] [--format csv|json] COMMAND

Commands: ``bell-curve``, ``simulate {rabi-scan,tbi-point,trace,histogram,
charge-histogram}``, ``fit {cosine,mixture} --input FILE``, ``critical-noise``,
``dwell-times --input FILE`` and ``calibrate``. Every command writes its
outputs to ``--out`` and prints its summary JSON on stdout. Failures print a
JSON error object on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import enum
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, dynamics, photophysics, protocol, readout
from .config import RunConfig, load_run_config, parse_grid
from .errors import ConfigError, DomainError, InsufficientDataError, TbiError
from .photophysics import FluorescenceTrace, Illumination, IlluminationSetting
from .streams import StreamFactory


class CliError(TbiError):
    def __init__(self, code, message, **details):
        super().__init__(message)
        self.code = code
        self.details = details


# -- output helpers ----------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, enum.Enum):
        return obj.name
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable, allow_nan=True) + "\n"


class Writer:
    """Writes all outputs of one command; tracks what was written."""

    def __init__(self, cfg: RunConfig, command: str, fmt: str):
        self.cfg = cfg
        self.command = command
        self.fmt = fmt
        self.out = Path(cfg.output_dir)
        self.written = []

    def _path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def table(self, stem, header, rows):
        if self.fmt == "json":
            doc = {"meta": self.meta(), "columns": list(header),
                   "rows": [dict(zip(header, map(_cell, r))) for r in rows]}
            path = self._path(stem + ".json")
            path.write_text(dumps(doc), encoding="utf-8")
        else:
            path = self._path(stem + ".csv")
            buf = io.StringIO()
            buf.write(f"# config_sha256={self.cfg.digest()} master_seed={self.cfg.master_seed} "
                      f"command={self.command}\n")
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
            path.write_text(buf.getvalue(), encoding="utf-8")
        self.written.append(str(path))
        return path

    def summary(self, name, obj):
        path = self._path(name)
        path.write_text(dumps(obj), encoding="utf-8")
        self.written.append(str(path))
        return path

    def meta(self):
        return {"config_sha256": self.cfg.digest(), "master_seed": self.cfg.master_seed,
                "command": self.command}


def _cell(v):
    return v.name if isinstance(v, enum.Enum) else v


def _fmt(v):
    if isinstance(v, enum.Enum):
        return v.name
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    """Rows of a '#'-commented CSV with a header, as ``(header, rows)``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError("IO_ERROR", f"cannot read {path}: {exc}")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise CliError("MALFORMED_CSV", "no header row", path=str(path))
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    rows = list(reader)
    return header, rows


def _columns(header, rows, wanted, path):
    missing = [c for c in wanted if c not in header]
    if missing:
        raise CliError("MALFORMED_CSV", f"missing column(s) {missing}", path=str(path), header=header)
    idx = [header.index(c) for c in wanted]
    out = []
    for r_i, row in enumerate(rows, start=1):  # 1-based data row
        if len(row) != len(header):
            raise CliError("MALFORMED_CSV", f"row {r_i} has {len(row)} fields, expected {len(header)}",
                           row=r_i, path=str(path))
        vals = []
        for c, j in zip(wanted, idx):
            try:
                vals.append(float(row[j]))
            except ValueError:
                raise CliError("MALFORMED_CSV", f"row {r_i}, column '{c}': not a number: {row[j]!r}",
                               row=r_i, column=c, path=str(path))
        out.append(vals)
    return np.array(out, dtype=float).reshape(len(out), len(wanted))


# -- commands ----------------------------------------------------------------------

def cmd_bell_curve(cfg: RunConfig, w: Writer):
    omega = cfg.experiment.rabi.omega
    grid = parse_grid(cfg.bell_curve.grid, omega, "bell_curve.grid")
    sets = [("ideal", dynamics.RabiParams(omega))]
    exp_rabi = cfg.experiment.rabi
    if exp_rabi.gamma_eff > 0:
        sets.append(("experiment", exp_rabi))
    for d in cfg.bell_curve.damped:
        g_phi = d.get("gamma_phi_over_omega", 0.0) * omega
        g_1 = d.get("gamma_1_over_omega", 0.0) * omega
        sets.append((f"damped_gphi={g_phi / omega:g}_g1={g_1 / omega:g}",
                     dynamics.RabiParams(omega, g_phi, g_1)))
    rows, summary = [], {"omega": omega, "n_points": int(grid.size), "curves": []}
    for name, params in sets:
        curve = dynamics.bell_curve(params, grid)
        q_t = dynamics.survival_probability(params, grid)
        q_2t = dynamics.survival_probability(params, 2 * grid)
        for (t, b), a, c in zip(curve, np.atleast_1d(q_t), np.atleast_1d(q_2t)):
            rows.append((name, t, omega * t, a, c, b))
        i = int(np.argmin(curve[:, 1]))
        summary["curves"].append({
            "name": name, "gamma_phi": params.gamma_phi, "gamma_1": params.gamma_1,
            "min_B": float(curve[i, 1]), "t_min": float(curve[i, 0]),
            "omega_t_min": float(omega * curve[i, 0]),
            "q_t_at_min": float(np.atleast_1d(q_t)[i]),
            "violates": bool(curve[i, 1] < 0),
        })
    w.table("bell_curve", ("curve", "t", "omega_t", "q_t", "q_2t", "B"), rows)
    w.summary("bell_curve_summary.json", summary)
    return summary


def cmd_critical_noise(cfg: RunConfig, w: Writer):
    omega = cfg.critical_noise.omega or cfg.experiment.rabi.omega
    res = dynamics.critical_noise(omega, cfg.critical_noise.tol)
    t_lo, b_lo = dynamics.min_bell(dynamics.RabiParams(omega, res.gamma_star * 0.9))
    summary = {
        "omega": omega, "tol": cfg.critical_noise.tol,
        "gamma_star": res.gamma_star, "gamma_star_over_omega": res.gamma_star / omega,
        "t_at_min": res.t_at_min, "min_B_at_gamma_star": res.min_bell,
        "bracket": list(res.bracket), "iterations": res.iterations,
        "min_B_at_0.9_gamma_star": b_lo, "t_min_at_0.9_gamma_star": t_lo,
        "gamma_convention": "gamma_eff = gamma_phi + gamma_1/2",
    }
    w.summary("critical_noise.json", summary)
    return summary


def _simulate_rabi_scan(cfg, w, streams):
    exp = cfg.experiment
    sec = cfg.simulate.rabi_scan
    grid = parse_grid(sec.grid, exp.rabi.omega, "simulate.rabi_scan.grid")
    pts = protocol.rabi_scan(grid, sec.shots_per_point, exp, streams, cfg.workers)
    w.table("rabi_scan", ("tau", "q_hat", "stderr"), pts)
    summary = {"points": len(pts), "shots_per_point": sec.shots_per_point,
               "omega": exp.rabi.omega, "baseline_shift": exp.baseline_shift,
               "expected_offset_slope": list(protocol.pipeline_response(exp)[:2])}
    try:
        fit = analysis.fit_cosine(pts)
        summary["cosine_fit"] = fit.as_dict()
        tg = np.linspace(1e-4, 2 * math.pi, 4001) / fit.omega
        b = analysis.bell_from_fit(fit, tg)
        i = int(np.argmin(b[:, 1]))
        summary["bell_from_fit_min"] = {"t": float(b[i, 0]), "B": float(b[i, 1])}
    except (TbiError, ValueError) as exc:
        summary["cosine_fit_error"] = str(exc)
    w.summary("rabi_scan_summary.json", summary)
    return summary


def _simulate_tbi_point(cfg, w, streams):
    exp = cfg.experiment
    sec = cfg.simulate.tbi_point
    if sec.omega_t is None:
        t, b_expected = protocol.optimal_tau(exp)
    else:
        t = sec.omega_t / exp.rabi.omega
        b_expected = float(protocol.expected_bell(t, exp))
    q1 = float(protocol.expected_q(t, exp))
    q2 = float(protocol.expected_q(2 * t, exp))
    acceptance = protocol.pipeline_response(exp)[2]
    if sec.shots_t is None or sec.shots_2t is None:
        n_used, _ = protocol.required_shots(min(max(q1, 1e-6), 1 - 1e-6),
                                            min(max(q2, 1e-6), 1 - 1e-6), sec.target_stderr)
        planned = math.ceil(n_used / acceptance)
    n_t = sec.shots_t if sec.shots_t is not None else planned
    n_2t = sec.shots_2t if sec.shots_2t is not None else planned
    res = protocol.run_tbi_experiment(t, n_t, n_2t, exp, streams, cfg.workers, sec.k)
    if sec.write_shots:
        rows = []
        for label, tau, n, child in (("t", t, n_t, "t"), ("2t", 2 * t, n_2t, "2t")):
            table = protocol.run_shot_table(tau, n, exp, streams.child(child), cfg.workers)
            used = table.used_mask(exp)
            for i, rec in enumerate(table.records()):
                rows.append((label, i, rec.tau, rec.init_state, rec.init_counts, rec.charge_counts,
                             rec.charge_accepted, rec.final_counts, rec.final_state_classified,
                             rec.true_final_state, bool(used[i])))
        w.table("shots", ("set", "shot", "tau", "init_state", "init_counts", "charge_counts",
                          "charge_accepted", "final_counts", "final_state_classified",
                          "true_final_state", "used"), rows)
    summary = res.as_dict()
    summary.update({"omega_t": t * exp.rabi.omega, "expected_B": b_expected,
                    "expected_q_t": q1, "expected_q_2t": q2, "shots_t": n_t, "shots_2t": n_2t,
                    "expected_acceptance": acceptance, "baseline_shift": exp.baseline_shift,
                    "readout_F_squared": exp.readout.fidelity().f_squared,
                    "estimates": "raw post-selected; *_corrected undo readout contrast"})
    w.summary("tbi_summary.json", summary)
    return summary


def _simulate_trace(cfg, w, streams):
    exp = cfg.experiment
    sec = cfg.simulate.trace
    label = Illumination(sec.illumination)
    ch = exp.photophysics.channel(label)
    setting = IlluminationSetting(label, sec.power or ch.reference_power, ch.wavelength)
    rng = streams.generator()
    traj = photophysics.simulate_charge_trajectory(exp.photophysics, setting, sec.duration, rng)
    trace = photophysics.render_trace(traj, exp.photophysics, sec.bin_width, rng)
    rows = zip(trace.bin_starts, trace.counts, trace.true_states)
    w.table("trace", ("bin_start_s", "count", "true_state"), rows)
    ion, rec = photophysics.charge_rates(exp.photophysics, setting)
    dwell = traj.dwell_times()
    summary = {"duration": sec.duration, "bin_width": sec.bin_width, "illumination": label.value,
               "power": setting.power, "ionization_rate": ion, "recombination_rate": rec,
               "switches": len(traj) - 1, "nv_minus_occupancy": traj.occupancy(),
               "true_mean_nv_minus_dwell": float(dwell.mean()) if dwell.size else None,
               "n_complete_nv_minus_dwells": int(dwell.size)}
    w.summary("trace_summary.json", summary)
    return summary


def _histogram_rows(h):
    return zip(h.bin_lo, h.bin_hi, h.counts)


def _simulate_histogram(cfg, w, streams):
    exp = cfg.experiment
    sec = cfg.simulate.histogram
    rng = streams.generator()
    states = (rng.random(sec.shots) >= exp.prior_plus1).astype(np.int8)
    counts, _ = readout.simulate_readout_batch(states, exp.readout, rng)
    h = readout.build_histogram(counts, sec.bin_width)
    w.table("histogram", ("bin_lo", "bin_hi", "count"), _histogram_rows(h))
    fid = exp.readout.fidelity()
    summary = {"shots": sec.shots, "threshold": exp.readout.threshold,
               "mean_photons_dark": exp.readout.mean_photons_dark,
               "mean_photons_bright": exp.readout.mean_photons_bright,
               "f_assign_dark": fid.f_assign_dark, "f_assign_bright": fid.f_assign_bright,
               "f_squared": fid.f_squared, "fraction_above_threshold": float(np.mean(counts > exp.readout.threshold))}
    w.summary("histogram_summary.json", summary)
    return summary


def _simulate_charge_histogram(cfg, w, streams):
    exp = cfg.experiment
    sec = cfg.simulate.charge_histogram
    rng = streams.generator()
    p_minus = photophysics.steady_state_minus(exp.photophysics, exp.green)
    init = (rng.random(sec.shots) < p_minus).astype(np.int8)
    counts, _ = photophysics.charge_measurement_batch(exp.photophysics, exp.orange, exp.charge_pulse, rng, init)
    h = readout.build_histogram(counts, sec.bin_width)
    w.table("charge_histogram", ("bin_lo", "bin_hi", "count"), _histogram_rows(h))
    summary = {"shots": sec.shots, "charge_pulse": exp.charge_pulse, "charge_threshold": exp.charge_threshold,
               "steady_state_nv_minus": p_minus, "true_nv_minus_fraction": float(init.mean()),
               "accepted_fraction": float(np.mean(counts > exp.charge_threshold))}
    w.summary("charge_histogram_summary.json", summary)
    return summary


SIMULATIONS = {
    "rabi-scan": _simulate_rabi_scan,
    "tbi-point": _simulate_tbi_point,
    "trace": _simulate_trace,
    "histogram": _simulate_histogram,
    "charge-histogram": _simulate_charge_histogram,
}


def cmd_simulate(cfg: RunConfig, w: Writer, what: str):
    streams = StreamFactory(cfg.master_seed, "simulate", what)
    return SIMULATIONS[what](cfg, w, streams)


def cmd_fit(cfg: RunConfig, w: Writer, model: str, path: str):
    header, rows = read_csv(path)
    if model == "cosine":
        pts = _columns(header, rows, ("tau", "q_hat", "stderr"), path)
        if len(pts) < 6:
            raise CliError("INSUFFICIENT_DATA", f"cosine fit needs >= 6 rows, got {len(pts)}")
        fit = analysis.fit_cosine(pts)
        out = fit.as_dict()
        out["contrast"] = fit.contrast
    else:
        if "count" in header and "bin_lo" in header:
            arr = _columns(header, rows, ("bin_lo", "bin_hi", "count"), path)
            if len(arr) < 1:
                raise CliError("INSUFFICIENT_DATA", "histogram has no rows")
            edges = np.append(arr[:, 0], arr[-1, 1]).astype(np.int64)
            data = readout.HistogramData(edges, arr[:, 2].astype(np.int64), int(arr[:, 2].sum()))
        elif "count" in header:
            data = _columns(header, rows, ("count",), path)[:, 0].astype(np.int64)
        else:
            raise CliError("MALFORMED_CSV", "need a 'count' column", path=str(path), header=header)
        try:
            out = analysis.fit_poisson_mixture(data).as_dict()
        except InsufficientDataError as exc:
            raise CliError("INSUFFICIENT_DATA", str(exc))
    out["input"] = Path(path).name
    w.summary(f"fit_{model}.json", out)
    return out


def cmd_dwell_times(cfg: RunConfig, w: Writer, path: str):
    header, rows = read_csv(path)
    cols = ("bin_start_s", "count")
    arr = _columns(header, rows, cols, path)
    if len(arr) < 2:
        raise CliError("INSUFFICIENT_DATA", "trace needs at least 2 bins")
    bw = float(arr[1, 0] - arr[0, 0])
    trace = FluorescenceTrace(bw, arr[:, 1].astype(np.int64))
    sec = cfg.dwell_times
    thr = sec.threshold
    if thr is None:
        exp = cfg.experiment
        bright, dark = photophysics.photon_rates(exp.photophysics, exp.orange)
        thr = readout.optimal_threshold(dark * bw, bright * bw)
    d = analysis.extract_dwell_times(trace, thr, sec.min_run, sec.drop_edges)
    rows_out = [("low", x) for x in d.low] + [("high", x) for x in d.high]
    w.table("dwell_times", ("level", "duration_s"), rows_out)
    n_h = d.high.size
    summary = {"threshold": thr, "min_run": sec.min_run, "drop_edges": sec.drop_edges,
               "bin_width": bw, "n_high": int(n_h), "n_low": int(d.low.size),
               "mean_high": d.mean_high() if n_h else None,
               "stderr_mean_high": float(d.high.std(ddof=1) / math.sqrt(n_h)) if n_h > 1 else None,
               "mean_low": d.mean_low() if d.low.size else None, "degenerate": d.degenerate}
    w.summary("dwell_summary.json", summary)
    return summary


def cmd_calibrate(cfg: RunConfig, w: Writer, target: float, ratio: float):
    cal = readout.calibrate_photon_rates(target, cfg.experiment.readout.n_repeats, ratio)
    fid = readout.threshold_fidelity(cal.mean_photons_dark, cal.mean_photons_bright, 0.5, cal.threshold)
    out = cal.as_dict()
    out.update({"target_F_squared": target, "ratio": ratio,
                "f_assign_dark": fid.f_assign_dark, "f_assign_bright": fid.f_assign_bright})
    w.summary("calibration.json", out)
    return out


# -- argument parsing ----------------------------------------------------------------

def _common(suppress: bool) -> argparse.ArgumentParser:
    # Global flags are accepted before or after the command; the copy attached
    # to subcommands must not overwrite values given before it.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="JSON run configuration")
    common.add_argument("--seed", type=int, default=d(None), help="master seed (unsigned 64-bit)")
    common.add_argument("--workers", type=int, default=d(None), help="worker processes")
    common.add_argument("--out", default=d(None), help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default=d("csv"),
                        help="format of tabular outputs")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    p = argparse.ArgumentParser(prog="tbisim", parents=[_common(suppress=False)],
                                description="Temporal Bell inequality simulator for NV nuclear spins.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("bell-curve", parents=[common], help="closed-form Bell curves")
    sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo simulations")
    sim.add_argument("what", choices=sorted(SIMULATIONS))
    fit = sub.add_parser("fit", parents=[common], help="fit a cosine or Poisson mixture to a CSV")
    fit.add_argument("model", choices=("cosine", "mixture"))
    fit.add_argument("--input", required=True)
    sub.add_parser("critical-noise", parents=[common], help="noise rate where violation vanishes")
    dw = sub.add_parser("dwell-times", parents=[common], help="dwell times from a trace CSV")
    dw.add_argument("--input", required=True)
    cal = sub.add_parser("calibrate", parents=[common], help="photon means for a target F^2")
    cal.add_argument("--target", type=float, default=0.91)
    cal.add_argument("--ratio", type=float, default=3.0)
    return p


def _error(code, message, **details):
    payload = {"error": code, "message": message}
    payload.update(details)
    sys.stderr.write(json.dumps(payload, sort_keys=True, default=_jsonable) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            _error("USAGE", "invalid command line")
        return int(exc.code or 0)

    try:
        cfg = load_run_config(args.config, args.seed, args.workers, args.out)
        w = Writer(cfg, args.command + (f" {args.what}" if args.command == "simulate" else
                                        f" {args.model}" if args.command == "fit" else ""), args.format)
        if args.command == "bell-curve":
            out = cmd_bell_curve(cfg, w)
        elif args.command == "simulate":
            out = cmd_simulate(cfg, w, args.what)
        elif args.command == "fit":
            out = cmd_fit(cfg, w, args.model, args.input)
        elif args.command == "critical-noise":
            out = cmd_critical_noise(cfg, w)
        elif args.command == "dwell-times":
            out = cmd_dwell_times(cfg, w, args.input)
        else:
            out = cmd_calibrate(cfg, w, args.target, args.ratio)
    except CliError as exc:
        _error(exc.code, str(exc), **exc.details)
        return 2
    except ConfigError as exc:
        _error(exc.code, str(exc))
        return 2
    except TbiError as exc:
        _error(exc.code, str(exc), **getattr(exc, "diagnostics", {}))
        return 1
    except OSError as exc:
        _error("IO_ERROR", str(exc))
        return 1
    sys.stdout.write(dumps(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
