"""Two-tone frequency sweeps and impedance dataset generation.

A sweep excites the converter with the nominal fundamental plus one small
harmonic tone, waits out the transients, then integrates exactly one
coherent window (an integer number of periods of both tones) and extracts
the harmonic current phasor with a single-bin correlation.  The impedance at
the tone frequency is the ratio of the injected voltage phasor to that
current phasor.

Sweep frequencies live on a commensurable grid (0.5 Hz by default) so that
the window is exactly periodic and spectral leakage is identically zero; no
tapering or interpolation is ever applied.  Failed points are reported, not
interpolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np
import yaml

from . import _kernels as K
from .pfc import PfcParams, SourceSpec, cold_start_state

_LIN_KINDS = {"r": K.LIN_R, "rl": K.LIN_RL, "rc": K.LIN_RC}


class UnmeasurablePointError(RuntimeError):
    """Harmonic current below the numeric floor (open-circuit-like point)."""


class IncommensurableError(ValueError):
    """Tone frequencies do not share the sweep's base resolution."""


@dataclass(frozen=True)
class OracleBranch:
    """Series linear branch substituted for the converter in self-tests.

    ``kind`` is one of 'r', 'rl', 'rc'.  The analytic impedance is known in
    closed form, which makes the full sweep path checkable end to end.
    """

    kind: str
    r: float
    l: float = 0.0
    c: float = 0.0
    v_com_rms: float = 230.0
    w_g: float = 2.0 * math.pi * 60.0

    def __post_init__(self):
        if self.kind not in _LIN_KINDS:
            raise ValueError(f"kind must be one of {sorted(_LIN_KINDS)}")
        if self.r <= 0.0:
            raise ValueError("r must be strictly positive")
        if self.kind == "rl" and self.l <= 0.0:
            raise ValueError("rl branch needs l > 0")
        if self.kind == "rc" and self.c <= 0.0:
            raise ValueError("rc branch needs c > 0")

    @property
    def v_peak(self) -> float:
        return math.sqrt(2.0) * self.v_com_rms

    @property
    def grid_period(self) -> float:
        return 2.0 * math.pi / self.w_g

    def analytic_impedance(self, w: float) -> complex:
        if self.kind == "r":
            return complex(self.r)
        if self.kind == "rl":
            return self.r + 1j * w * self.l
        return self.r + 1.0 / (1j * w * self.c)

    @property
    def time_constant(self) -> float:
        if self.kind == "rl":
            return self.l / self.r
        if self.kind == "rc":
            return self.r * self.c
        return 0.0


Circuit = Union[PfcParams, OracleBranch]


@dataclass(frozen=True)
class SweepConfig:
    """Knobs of the sweep procedure; defaults match the canonical setup."""

    injection_fraction: float = 0.05  # tone amplitude / fundamental peak
    theta0: float = 0.0               # fundamental initial phase (rad)
    base_hz: float = 0.5              # commensurability grid
    steps_per_cycle: int = 2000       # integrator steps per fundamental period
    settle_max_s: float = 2.0
    settle_tol: float = 1e-3
    preroll_s: float = 0.5            # two-tone run-in before the window
    min_window_s: float | None = None  # None -> max(1 s, common period)
    current_floor: float = 1e-12      # A, below which the point is unmeasurable

    def __post_init__(self):
        if not (0.0 < self.injection_fraction <= 0.1):
            raise ValueError("injection_fraction must be in (0, 0.1]")
        if self.base_hz <= 0.0 or self.steps_per_cycle < 200:
            raise ValueError("base_hz must be positive and steps_per_cycle >= 200")


@dataclass(frozen=True)
class PhasorMeasurement:
    """One complex spectral line: frequency in rad/s, amplitude in the
    record's units, phase in (-pi, pi]."""

    frequency: float
    magnitude: float
    phase: float

    def __post_init__(self):
        if self.magnitude < 0.0:
            raise ValueError("magnitude must be non-negative")
        if not (-math.pi < self.phase <= math.pi + 1e-15):
            raise ValueError("phase must lie in (-pi, pi]")

    @property
    def as_complex(self) -> complex:
        return self.magnitude * complex(math.cos(self.phase), math.sin(self.phase))


@dataclass(frozen=True)
class ImpedancePoint:
    """One swept impedance sample in rectangular form.

    The frequency is stored in Hz (the serialized unit) so that save/load
    round-trips are bit-exact; ``w_hm`` derives from it.
    """

    f_hz: float     # Hz
    p_load: float   # W
    re: float       # Ohm
    im: float       # Ohm

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ValueError("impedance parts must be finite")

    @property
    def w_hm(self) -> float:
        return 2.0 * math.pi * self.f_hz

    @property
    def z(self) -> complex:
        return complex(self.re, self.im)

    @property
    def magnitude(self) -> float:
        return abs(self.z)

    @property
    def phase(self) -> float:
        return math.atan2(self.im, self.re)


@dataclass
class ImpedanceDataset:
    """Swept impedance samples plus the sweep configuration that made them.

    ``failures`` lists (p_load, f_hz, reason) for points that could not be
    measured; they are never silently dropped or filled in.
    """

    points: list[ImpedancePoint]
    meta: dict
    failures: list[tuple[float, float, str]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for pt in self.points:
            key = (pt.f_hz, pt.p_load)
            if key in seen:
                raise ValueError(f"duplicate sweep point {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.points)

    def workloads(self) -> list[float]:
        return sorted({pt.p_load for pt in self.points})

    def frequencies_hz(self) -> list[float]:
        return sorted({pt.f_hz for pt in self.points})

    def curve(self, p_load: float) -> list[ImpedancePoint]:
        """Single-workload curve sorted by frequency."""
        pts = [pt for pt in self.points if pt.p_load == p_load]
        return sorted(pts, key=lambda pt: pt.f_hz)

    def features_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """(w, p_load) features and (re, im) targets as dense arrays."""
        x = np.array([[pt.w_hm, pt.p_load] for pt in self.points])
        y = np.array([[pt.re, pt.im] for pt in self.points])
        return x, y

    def to_csv(self, path, header_comment: str | None = None) -> None:
        write_dataset_csv(self, path, header_comment)

    @classmethod
    def from_csv(cls, path) -> "ImpedanceDataset":
        return read_dataset_csv(path)


def two_tone_voltage(t, source: SourceSpec):
    """Excitation waveform: fundamental plus the small harmonic tone.
    Accepts scalar or array ``t``."""
    t = np.asarray(t, dtype=float)
    v = source.v_peak * np.cos(source.w_g * t + source.theta0)
    if source.dv_hm != 0.0:
        v = v + source.dv_hm * np.cos(source.w_hm * t)
    return float(v) if v.ndim == 0 else v


def _grid_index(f_hz: float, base_hz: float) -> int:
    k = f_hz / base_hz
    ki = round(k)
    if abs(k - ki) > 1e-6 or ki <= 0:
        raise IncommensurableError(
            f"{f_hz} Hz is not a positive multiple of the {base_hz} Hz sweep "
            f"grid; snap the frequency to the grid first")
    return ki


def common_period(w_g: float, w_hm: float, base_hz: float = 0.5) -> float:
    """Shortest interval containing an integer number of periods of both
    tones.  Both frequencies must sit on the ``base_hz`` grid."""
    kg = _grid_index(w_g / (2.0 * math.pi), base_hz)
    kh = _grid_index(w_hm / (2.0 * math.pi), base_hz)
    g = math.gcd(kg, kh)
    return 1.0 / (g * base_hz)


def coherent_window(w_g: float, w_hm: float, dt: float,
                    min_duration: float | None = None,
                    base_hz: float = 0.5) -> int:
    """Smallest sample count K such that K*dt is an integer multiple of the
    common period of both tones and spans at least ``min_duration``.

    ``min_duration`` defaults to max(1 s, common period): at least one second
    of record and never less than the achievable frequency resolution allows.
    """
    if w_hm == w_g:
        raise ValueError("tone frequency must differ from the fundamental")
    t_c = common_period(w_g, w_hm, base_hz)
    steps_per_tc = int(round(t_c / dt))
    if steps_per_tc < 1 or abs(steps_per_tc * dt - t_c) > 1e-9 * t_c:
        raise IncommensurableError(
            f"dt={dt!r} does not evenly divide the common period {t_c!r}; "
            f"derive dt from the fundamental period")
    if min_duration is None:
        min_duration = max(1.0, t_c)
    n_periods = max(1, math.ceil(min_duration / t_c - 1e-9))
    return n_periods * steps_per_tc


def single_bin_dft(samples, dt: float, f_hz: float) -> PhasorMeasurement:
    """Complex Fourier coefficient of a real record at one frequency, scaled
    so a pure A*cos(2 pi f t + phi) record yields magnitude A and phase phi.

    The record must hold an integer number of periods of ``f`` (coherent
    window); leakage at other coherent bins is then exactly zero.
    """
    samples = np.ascontiguousarray(samples, dtype=float)
    if samples.ndim != 1 or samples.size < 2:
        raise ValueError("need a 1-D record of at least two samples")
    if f_hz <= 0.0 or dt <= 0.0:
        raise ValueError("f_hz and dt must be positive")
    n_periods = samples.size * dt * f_hz
    if abs(n_periods - round(n_periods)) > 1e-6 or round(n_periods) < 1:
        raise ValueError(
            f"record spans {n_periods:.6g} periods of {f_hz} Hz; the window "
            f"must be coherent (integer period count)")
    w = 2.0 * math.pi * f_hz
    re, im = K.single_bin_coeff(samples, dt, w)
    mag = math.hypot(re, im)
    phase = math.atan2(im, re)
    if phase <= -math.pi:
        phase += 2.0 * math.pi
    return PhasorMeasurement(frequency=w, magnitude=mag, phase=phase)


def _sweep_timing(circuit: Circuit, w_hm: float, cfg: SweepConfig):
    """dt, run-in steps and window steps for one sweep point.  The run-in is
    rounded up to whole common periods so the window starts at tone phase
    zero and fundamental phase theta0."""
    t_g = circuit.grid_period
    dt = t_g / cfg.steps_per_cycle
    t_c = common_period(circuit.w_g, w_hm, cfg.base_hz)
    steps_per_tc = int(round(t_c / dt))
    preroll = cfg.preroll_s
    if isinstance(circuit, OracleBranch):
        preroll = max(preroll, 20.0 * circuit.time_constant)
    n_pre = max(1, math.ceil(preroll / t_c - 1e-9))
    window_steps = coherent_window(circuit.w_g, w_hm, dt,
                                   cfg.min_window_s, cfg.base_hz)
    return dt, n_pre * steps_per_tc, window_steps


def _check_tone(circuit: Circuit, w_hm: float) -> None:
    if not (0.0 < w_hm < 2.0 * circuit.w_g):
        raise ValueError("tone frequency must lie in (0, 2*w_g)")
    if w_hm == circuit.w_g:
        raise ValueError("tone frequency must differ from the fundamental")


def _impedance_from_phasor(dv_hm: float, re: float, im: float,
                           floor: float) -> complex:
    mag = math.hypot(re, im)
    if not (math.isfinite(mag) and mag > floor):
        raise UnmeasurablePointError(
            f"harmonic current magnitude {mag:.3e} A below the measurement "
            f"floor; the point behaves open-circuit")
    return complex(dv_hm) / complex(re, im)


def measure_impedance(circuit: Circuit, p_load: float, w_hm: float,
                      cfg: SweepConfig | None = None) -> ImpedancePoint:
    """Measure the input impedance at one (workload, frequency) point.

    For a :class:`PfcParams` circuit: settle under the bare fundamental from
    a cold start, switch on the tone for a whole-period run-in, then
    integrate one coherent window and form Z from the injected voltage and
    extracted current phasors.  For an :class:`OracleBranch` the same
    excitation and extraction run against the linear branch.
    """
    cfg = cfg or SweepConfig()
    _check_tone(circuit, w_hm)
    dv = cfg.injection_fraction * circuit.v_peak
    dt, preroll_steps, window_steps = _sweep_timing(circuit, w_hm, cfg)
    src = SourceSpec(v_peak=circuit.v_peak, w_g=circuit.w_g,
                     theta0=cfg.theta0, dv_hm=dv, w_hm=w_hm)

    if isinstance(circuit, OracleBranch):
        re, im = K.lin_branch_phasor(
            _LIN_KINDS[circuit.kind], circuit.r, circuit.l, circuit.c,
            dt, preroll_steps, window_steps, w_hm, src.to_vector())
        z = _impedance_from_phasor(dv, re, im, cfg.current_floor)
        return ImpedancePoint(f_hz=w_hm / (2.0 * math.pi), p_load=p_load,
                              re=z.real, im=z.imag)

    from .pfc import settle  # local import keeps module load light
    fund = SourceSpec(v_peak=circuit.v_peak, w_g=circuit.w_g,
                      theta0=cfg.theta0, dv_hm=0.0, w_hm=0.0)
    state = settle(circuit, fund, p_load, dt=dt,
                   max_settle_s=cfg.settle_max_s, tol=cfg.settle_tol)
    x = state.as_array()
    prm = circuit.to_vector()
    t_end = K.advance_pfc(x, 0.0, dt, preroll_steps, src.to_vector(),
                          float(p_load), prm)
    if t_end < 0.0:
        raise UnmeasurablePointError("state diverged during the tone run-in")
    re, im, status = K.window_phasor_pfc(x, dt, window_steps, w_hm,
                                         src.to_vector(), float(p_load), prm)
    if status != 0:
        raise UnmeasurablePointError("state diverged inside the window")
    z = _impedance_from_phasor(dv, re, im, cfg.current_floor)
    return ImpedancePoint(f_hz=w_hm / (2.0 * math.pi), p_load=p_load,
                          re=z.real, im=z.imag)


def generate_dataset(circuit: Circuit, workload_grid, frequency_grid_hz,
                     cfg: SweepConfig | None = None) -> ImpedanceDataset:
    """Sweep the Cartesian product of workloads and frequencies.

    Points are independent; the PFC path settles each workload once under
    the bare fundamental and fans the per-point two-tone runs out to
    parallel threads.  Output ordering is workload-major, frequency-minor
    regardless of scheduling.
    """
    cfg = cfg or SweepConfig()
    workloads = [float(p) for p in workload_grid]
    freqs = [float(f) for f in frequency_grid_hz]
    if not workloads or not freqs:
        raise ValueError("workload and frequency grids must be non-empty")
    if len(set(workloads)) != len(workloads) or len(set(freqs)) != len(freqs):
        raise ValueError("grids must not contain duplicates")
    for f in freqs:
        _grid_index(f, cfg.base_hz)
        _check_tone(circuit, 2.0 * math.pi * f)

    points: list[ImpedancePoint] = []
    failures: list[tuple[float, float, str]] = []

    if isinstance(circuit, OracleBranch):
        for p in workloads:
            for f in freqs:
                try:
                    points.append(measure_impedance(circuit, p,
                                                    2.0 * math.pi * f, cfg))
                except (UnmeasurablePointError, ValueError) as exc:
                    failures.append((p, f, str(exc)))
        return ImpedanceDataset(points=points, meta=_sweep_meta(circuit, cfg, workloads, freqs),
                                failures=failures)

    dv = cfg.injection_fraction * circuit.v_peak
    dt = circuit.grid_period / cfg.steps_per_cycle
    prm = circuit.to_vector()
    fund = SourceSpec(v_peak=circuit.v_peak, w_g=circuit.w_g,
                      theta0=cfg.theta0, dv_hm=0.0, w_hm=0.0)

    wl_arr = np.asarray(workloads)
    settled = np.empty((len(workloads), K.NSTATE))
    settle_status = np.empty(len(workloads), dtype=np.int64)
    max_cycles = int(cfg.settle_max_s / circuit.grid_period)
    K.settle_workloads_pfc(cold_start_state(circuit).as_array(), dt,
                           cfg.steps_per_cycle, max_cycles, cfg.settle_tol, 5,
                           fund.to_vector(), wl_arr, prm, settled,
                           settle_status)

    n_pts = len(workloads) * len(freqs)
    wl_index = np.empty(n_pts, dtype=np.int64)
    p_loads = np.empty(n_pts)
    w_hms = np.empty(n_pts)
    preroll_steps = np.empty(n_pts, dtype=np.int64)
    window_steps = np.empty(n_pts, dtype=np.int64)
    src_table = np.empty((n_pts, K.SRC_SIZE))
    for j, p in enumerate(workloads):
        for i, f in enumerate(freqs):
            idx = j * len(freqs) + i
            w = 2.0 * math.pi * f
            wl_index[idx] = j
            p_loads[idx] = p
            w_hms[idx] = w
            _, pre, win = _sweep_timing(circuit, w, cfg)
            preroll_steps[idx] = pre
            window_steps[idx] = win
            src_table[idx] = SourceSpec(circuit.v_peak, circuit.w_g,
                                        cfg.theta0, dv, w).to_vector()

    out_re = np.empty(n_pts)
    out_im = np.empty(n_pts)
    out_status = np.empty(n_pts, dtype=np.int64)
    K.sweep_points_pfc(settled, wl_index, dt, preroll_steps, window_steps,
                       src_table, p_loads, w_hms, prm, out_re, out_im,
                       out_status)

    for j, p in enumerate(workloads):
        for i, f in enumerate(freqs):
            idx = j * len(freqs) + i
            if settle_status[j] != 0:
                reason = ("settle timeout under the fundamental"
                          if settle_status[j] == 1 else
                          "settle diverged under the fundamental")
                failures.append((p, f, reason))
                continue
            if out_status[idx] != 0:
                failures.append((p, f, "state diverged during measurement"))
                continue
            try:
                z = _impedance_from_phasor(dv, out_re[idx], out_im[idx],
                                           cfg.current_floor)
            except UnmeasurablePointError as exc:
                failures.append((p, f, str(exc)))
                continue
            points.append(ImpedancePoint(f_hz=w_hms[idx] / (2.0 * math.pi),
                                         p_load=p, re=z.real, im=z.imag))

    return ImpedanceDataset(points=points,
                            meta=_sweep_meta(circuit, cfg, workloads, freqs),
                            failures=failures)


def _sweep_meta(circuit: Circuit, cfg: SweepConfig, workloads, freqs) -> dict:
    dt = circuit.grid_period / cfg.steps_per_cycle
    kind = circuit.kind if isinstance(circuit, OracleBranch) else "pfc"
    return {
        "circuit_kind": kind,
        "injection_fraction": cfg.injection_fraction,
        "theta0_rad": cfg.theta0,
        "base_hz": cfg.base_hz,
        "dt_s": dt,
        "steps_per_cycle": cfg.steps_per_cycle,
        "preroll_s": cfg.preroll_s,
        "settle_max_s": cfg.settle_max_s,
        "settle_tol": cfg.settle_tol,
        "min_window_s": cfg.min_window_s,
        "workloads_w": list(workloads),
        "frequencies_hz": list(freqs),
    }


def aggregate_parallel(point: ImpedancePoint, n_converters: int) -> ImpedancePoint:
    """Impedance of ``n_converters`` identical units in parallel at the same
    bus: the complex impedance divides by the count, the phase is unchanged."""
    if not isinstance(n_converters, int) or n_converters < 1:
        raise ValueError("n_converters must be a positive integer")
    return replace(point, re=point.re / n_converters, im=point.im / n_converters)


# -- persistence ---------------------------------------------------------------

DATASET_HEADER = "p_load_w,f_hz,re_ohm,im_ohm"


def _meta_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".meta.yaml")


def write_dataset_csv(dataset: ImpedanceDataset, path,
                      header_comment: str | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(DATASET_HEADER + "\n")
        for pt in dataset.points:
            fh.write("%.17g,%.17g,%.17g,%.17g\n"
                     % (pt.p_load, pt.f_hz, pt.re, pt.im))
    meta = dict(dataset.meta)
    meta["failures"] = [list(f) for f in dataset.failures]
    with _meta_path(path).open("w", encoding="utf-8") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)


def read_dataset_csv(path) -> ImpedanceDataset:
    path = Path(path)
    points = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == DATASET_HEADER:
                continue
            p, f, re, im = (float(v) for v in line.split(","))
            points.append(ImpedancePoint(f_hz=f, p_load=p, re=re, im=im))
    meta: dict = {}
    failures: list[tuple[float, float, str]] = []
    mp = _meta_path(path)
    if mp.exists():
        with mp.open("r", encoding="utf-8") as fh:
            meta = yaml.safe_load(fh) or {}
        failures = [tuple(f) for f in meta.pop("failures", [])]
    return ImpedanceDataset(points=points, meta=meta, failures=failures)
