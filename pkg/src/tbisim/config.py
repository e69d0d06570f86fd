"""Strict JSON run configuration.

Every section is optional; every key that is present must be known, and all
values are validated before any computation starts. Times are in seconds;
grids may be given in seconds (``"t"``) or as dimensionless ``omega * t``
(``"omega_t"``), each either as an explicit list or as
``{"start": .., "stop": .., "num": ..}``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dynamics import RabiParams
from .errors import ConfigError, TbiError
from .photophysics import ChargeChannel, Illumination, PhotophysicsConfig
from .protocol import ExperimentConfig, calibrate_baseline_shift
from .readout import NuclearState, ReadoutConfig, ThresholdObjective


class GridEmptyError(ConfigError):
    code = "GRID_EMPTY"


def _check_keys(data, allowed, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")


def _build(cls, data, path, **fixed):
    """Construct dataclass ``cls`` from ``data`` with strict key checking."""
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(data, names, path)
    try:
        return cls(**{**data, **fixed})
    except TbiError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _number(value, path, *, positive=False, nonneg=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    if integer and int(value) != value:
        raise ConfigError(f"{path}: expected an integer")
    if positive and not value > 0:
        raise ConfigError(f"{path}: must be > 0")
    if nonneg and value < 0:
        raise ConfigError(f"{path}: must be >= 0")
    return int(value) if integer else float(value)


# -- grids -----------------------------------------------------------------------

def parse_grid(grid, omega: float, path: str) -> np.ndarray:
    """Grid in seconds from ``{"t": ...}`` or ``{"omega_t": ...}``."""
    _check_keys(grid, ("t", "omega_t"), path)
    if len(grid) != 1:
        raise ConfigError(f"{path}: give exactly one of 't' or 'omega_t'")
    (kind, value), = grid.items()
    if isinstance(value, dict):
        _check_keys(value, ("start", "stop", "num"), f"{path}.{kind}")
        missing = {"start", "stop", "num"} - set(value)
        if missing:
            raise ConfigError(f"{path}.{kind}: missing {sorted(missing)}")
        num = _number(value["num"], f"{path}.{kind}.num", nonneg=True, integer=True)
        grid = np.linspace(_number(value["start"], f"{path}.{kind}.start"),
                           _number(value["stop"], f"{path}.{kind}.stop"), num)
    elif isinstance(value, list):
        grid = np.array([_number(v, f"{path}.{kind}[{i}]") for i, v in enumerate(value)])
    else:
        raise ConfigError(f"{path}.{kind}: expected list or range object")
    if grid.size == 0:
        raise GridEmptyError(f"{path}: grid is empty")
    if np.any(grid < 0):
        raise ConfigError(f"{path}: grid values must be non-negative")
    if np.any(np.diff(grid) < 0):
        raise ConfigError(f"{path}: grid must be sorted")
    return grid / omega if kind == "omega_t" else grid


# -- experiment ------------------------------------------------------------------

_EXPERIMENT_KEYS = (
    "preset", "rabi", "readout", "photophysics", "charge_pulse", "charge_power",
    "charge_threshold_objective", "charge_min_acceptance", "charge_threshold",
    "baseline_shift", "target_min_bell", "batch_size", "init_policy", "target_init",
    "prior_plus1",
)
_READOUT_KEYS = ("n_repeats", "mean_photons_bright", "mean_photons_dark",
                 "flip_prob_per_repeat", "threshold", "target_F_squared", "ratio")


def _readout(data, path):
    _check_keys(data, _READOUT_KEYS, path)
    data = dict(data)
    target = data.pop("target_F_squared", None)
    ratio = data.pop("ratio", 3.0)
    if target is not None:
        if "mean_photons_bright" in data or "mean_photons_dark" in data:
            raise ConfigError(f"{path}: target_F_squared excludes explicit photon means")
        try:
            return ReadoutConfig.calibrated(target, ratio, data.pop("n_repeats", 2000), **data)
        except TbiError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return _build(ReadoutConfig, data, path)


def _photophysics(data, path, base: PhotophysicsConfig):
    _check_keys(data, ("orange", "green"), path)
    out = base
    for key in ("orange", "green"):
        if key in data:
            names = [f.name for f in dataclasses.fields(ChargeChannel)]
            _check_keys(data[key], names, f"{path}.{key}")
            try:
                out = out.with_channel(Illumination(key.upper()), **data[key])
            except TbiError as exc:
                raise ConfigError(f"{path}.{key}: {exc}") from exc
    return out


def build_experiment(data: dict | None, path="experiment") -> ExperimentConfig:
    data = dict(data or {})
    _check_keys(data, _EXPERIMENT_KEYS, path)
    preset = data.pop("preset", "default")
    if preset not in ("default", "ideal", "headline"):
        raise ConfigError(f"{path}.preset: expected default|ideal|headline, got {preset!r}")
    shift = data.pop("baseline_shift", "auto" if preset == "headline" else None)
    target_b = _number(data.pop("target_min_bell", -0.209), f"{path}.target_min_bell")

    kw: dict[str, Any] = {}
    if "rabi" in data:
        kw["rabi"] = _build(RabiParams, data.pop("rabi"), f"{path}.rabi")
    if "charge_threshold_objective" in data:
        try:
            kw["charge_threshold_objective"] = ThresholdObjective(data.pop("charge_threshold_objective"))
        except ValueError as exc:
            raise ConfigError(f"{path}.charge_threshold_objective: {exc}") from exc
    if "target_init" in data:
        try:
            kw["target_init"] = NuclearState[data.pop("target_init")]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}.target_init: expected M_PLUS1 or M_OTHER") from exc

    try:
        if preset == "ideal":
            template = ExperimentConfig.ideal()
            phys, readout = template.photophysics, template.readout
            kw.setdefault("charge_threshold", data.pop("charge_threshold", 0))
        else:
            phys = PhotophysicsConfig()
            readout = ReadoutConfig.calibrated(0.91) if preset == "headline" else ReadoutConfig()
        if "readout" in data:
            readout = _readout(data.pop("readout"), f"{path}.readout")
        if "photophysics" in data:
            phys = _photophysics(data.pop("photophysics"), f"{path}.photophysics", phys)
        kw.update(data)
        if shift is not None and shift != "auto":
            kw["baseline_shift"] = _number(shift, f"{path}.baseline_shift")
        cfg = ExperimentConfig(readout=readout, photophysics=phys, **kw)
        if shift == "auto":
            cfg = dataclasses.replace(cfg, baseline_shift=calibrate_baseline_shift(cfg, target_b))
    except ConfigError:
        raise
    except (TbiError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


# -- command sections --------------------------------------------------------------

@dataclass
class BellCurveSection:
    grid: dict = field(default_factory=lambda: {"omega_t": {"start": 2 * math.pi / 1e4, "stop": 2 * math.pi, "num": 10000}})
    damped: list = field(default_factory=lambda: [{"gamma_phi_over_omega": 0.1}])


@dataclass
class CriticalNoiseSection:
    omega: float | None = None
    tol: float = 1e-6


@dataclass
class RabiScanSection:
    grid: dict = field(default_factory=lambda: {"omega_t": {"start": 0.0, "stop": 4 * math.pi, "num": 41}})
    shots_per_point: int = 20000


@dataclass
class TbiPointSection:
    omega_t: float | None = None
    target_stderr: float = 0.0039
    shots_t: int | None = None
    shots_2t: int | None = None
    k: float = 3.0
    write_shots: bool = True


@dataclass
class TraceSection:
    duration: float = 120.0
    bin_width: float = 5e-3
    illumination: str = "ORANGE"
    power: float | None = None


@dataclass
class HistogramSection:
    shots: int = 100000
    bin_width: int = 1


@dataclass
class DwellSection:
    threshold: int | None = None
    min_run: int = 3
    drop_edges: bool = True


@dataclass
class SimulateSection:
    rabi_scan: RabiScanSection = field(default_factory=RabiScanSection)
    tbi_point: TbiPointSection = field(default_factory=TbiPointSection)
    trace: TraceSection = field(default_factory=TraceSection)
    histogram: HistogramSection = field(default_factory=HistogramSection)
    charge_histogram: HistogramSection = field(default_factory=HistogramSection)


@dataclass
class RunConfig:
    master_seed: int = 0
    workers: int = 1
    output_dir: str = "out"
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    bell_curve: BellCurveSection = field(default_factory=BellCurveSection)
    critical_noise: CriticalNoiseSection = field(default_factory=CriticalNoiseSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    dwell_times: DwellSection = field(default_factory=DwellSection)
    raw: dict = field(default_factory=dict, repr=False)

    def digest(self) -> str:
        """SHA-256 of the canonical config, excluding worker count and
        output location (they do not affect results)."""
        payload = {k: v for k, v in self.raw.items() if k not in ("workers", "output_dir")}
        payload["master_seed"] = self.master_seed
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _section(cls, data, path):
    if data is None:
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(data, names, path)
    kw = {}
    for key, value in data.items():
        sub = names[key].default_factory if names[key].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub()):
            kw[key] = _section(type(sub()), value, f"{path}.{key}")
        else:
            kw[key] = value
    return cls(**kw)


def _validate_sections(cfg: RunConfig):
    omega = cfg.experiment.rabi.omega
    parse_grid(cfg.bell_curve.grid, omega, "bell_curve.grid")
    if not isinstance(cfg.bell_curve.damped, list):
        raise ConfigError("bell_curve.damped: expected a list")
    for i, d in enumerate(cfg.bell_curve.damped):
        _check_keys(d, ("gamma_phi_over_omega", "gamma_1_over_omega"), f"bell_curve.damped[{i}]")
        for k, v in d.items():
            _number(v, f"bell_curve.damped[{i}].{k}", nonneg=True)
    if cfg.critical_noise.omega is not None:
        _number(cfg.critical_noise.omega, "critical_noise.omega", positive=True)
    _number(cfg.critical_noise.tol, "critical_noise.tol", positive=True)
    sim = cfg.simulate
    parse_grid(sim.rabi_scan.grid, omega, "simulate.rabi_scan.grid")
    _number(sim.rabi_scan.shots_per_point, "simulate.rabi_scan.shots_per_point", positive=True, integer=True)
    tp = sim.tbi_point
    if tp.omega_t is not None:
        _number(tp.omega_t, "simulate.tbi_point.omega_t", positive=True)
    _number(tp.target_stderr, "simulate.tbi_point.target_stderr", positive=True)
    for k in ("shots_t", "shots_2t"):
        if getattr(tp, k) is not None:
            _number(getattr(tp, k), f"simulate.tbi_point.{k}", positive=True, integer=True)
    _number(tp.k, "simulate.tbi_point.k", nonneg=True)
    if not isinstance(tp.write_shots, bool):
        raise ConfigError("simulate.tbi_point.write_shots: expected a boolean")
    _number(sim.trace.duration, "simulate.trace.duration", positive=True)
    _number(sim.trace.bin_width, "simulate.trace.bin_width", positive=True)
    if sim.trace.illumination not in ("ORANGE", "GREEN"):
        raise ConfigError("simulate.trace.illumination: expected ORANGE or GREEN")
    if sim.trace.power is not None:
        _number(sim.trace.power, "simulate.trace.power", positive=True)
    for name in ("histogram", "charge_histogram"):
        h = getattr(sim, name)
        _number(h.shots, f"simulate.{name}.shots", positive=True, integer=True)
        _number(h.bin_width, f"simulate.{name}.bin_width", positive=True, integer=True)
    dw = cfg.dwell_times
    if dw.threshold is not None:
        _number(dw.threshold, "dwell_times.threshold", nonneg=True, integer=True)
    _number(dw.min_run, "dwell_times.min_run", positive=True, integer=True)


def load_run_config(source=None, seed: int | None = None, workers: int | None = None,
                    output_dir: str | None = None) -> RunConfig:
    """Parse a config file path, a dict, or ``None`` (all defaults).

    Command-line overrides take precedence over file values.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    top = ("master_seed", "workers", "output_dir", "experiment", "bell_curve",
           "critical_noise", "simulate", "dwell_times")
    _check_keys(raw, top, "config")

    master_seed = raw.get("master_seed", 0) if seed is None else seed
    master_seed = _number(master_seed, "master_seed", nonneg=True, integer=True)
    if master_seed >= 2**64:
        raise ConfigError("master_seed must fit in 64 bits")
    n_workers = _number(raw.get("workers", 1) if workers is None else workers,
                        "workers", positive=True, integer=True)
    out = raw.get("output_dir", "out") if output_dir is None else output_dir

    try:
        cfg = RunConfig(
            master_seed=master_seed, workers=n_workers, output_dir=str(out),
            experiment=build_experiment(raw.get("experiment")),
            bell_curve=_section(BellCurveSection, raw.get("bell_curve"), "bell_curve"),
            critical_noise=_section(CriticalNoiseSection, raw.get("critical_noise"), "critical_noise"),
            simulate=_section(SimulateSection, raw.get("simulate"), "simulate"),
            dwell_times=_section(DwellSection, raw.get("dwell_times"), "dwell_times"),
            raw=raw,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    _validate_sections(cfg)
    return cfg
