"""Large-signal averaged model of a single PFC converter.

The converter chain is EMI filter -> full-bridge rectifier -> boost stage ->
DC link feeding a constant-power load, with the usual dual-loop control: an
outer PI holding the DC-link voltage and an inner PI tracking a current
reference shaped like the rectified bus waveform.

The model is the duty-cycle average of the switching stage.  That is adequate
for input-impedance work below twice the grid frequency and keeps full sweeps
tractable on a desktop; per-edge PWM simulation is out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import _kernels as K


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, t_fail: float):
        super().__init__(f"state became non-finite at t={t_fail:.6g} s")
        self.t_fail = t_fail


class SettleTimeoutError(RuntimeError):
    """Settling did not converge within the allowed simulated time."""

    def __init__(self, last_delta: float, max_time: float):
        super().__init__(
            f"DC-link cycle mean still moving by {last_delta:.3e} (relative) "
            f"after {max_time:.3g} s simulated")
        self.last_delta = last_delta


@dataclass(frozen=True)
class PfcParams:
    """Circuit and controller constants of one converter.

    Units are SI throughout: H, F, Ohm, V, rad/s.  ``v_com_rms`` is the
    nominal input at the common bus and ``sqrt(2)*v_com_rms`` normalises the
    current-reference waveform shape.
    """

    l_f: float        # EMI filter inductance
    c_f: float        # EMI filter capacitance
    l_b: float        # boost inductance
    c_dc: float       # DC-link capacitance
    r_lf: float       # filter inductor parasitic resistance
    r_lb: float       # boost inductor parasitic resistance
    r_d: float        # diode conduction resistance
    v_d: float        # diode forward drop
    v_ref: float      # DC-link voltage setpoint
    kp_v: float       # voltage loop proportional gain
    ki_v: float       # voltage loop integral gain
    kp_i: float       # current loop proportional gain
    ki_i: float       # current loop integral gain
    d_min: float      # duty-cycle lower bound
    d_max: float      # duty-cycle upper bound
    v_min: float      # clamp in the constant-power-load denominator
    v_com_rms: float  # nominal input voltage, rms
    w_g: float        # grid angular frequency

    def __post_init__(self):
        for name in ("l_f", "c_f", "l_b", "c_dc", "r_lf", "r_lb", "r_d"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.v_d < 0.0:
            raise ValueError("v_d must be non-negative")
        if not (0.0 <= self.d_min < self.d_max <= 1.0):
            raise ValueError("duty bounds must satisfy 0 <= d_min < d_max <= 1")
        if self.v_min <= 0.0:
            raise ValueError("v_min must be strictly positive")
        if self.v_com_rms <= 0.0 or self.w_g <= 0.0:
            raise ValueError("v_com_rms and w_g must be strictly positive")
        if self.v_ref <= math.sqrt(2.0) * self.v_com_rms:
            raise ValueError(
                "v_ref must exceed the rectified input peak "
                f"({math.sqrt(2.0) * self.v_com_rms:.1f} V): boost topology")

    @property
    def v_peak(self) -> float:
        return math.sqrt(2.0) * self.v_com_rms

    @property
    def grid_period(self) -> float:
        return 2.0 * math.pi / self.w_g

    def default_dt(self, steps_per_cycle: int = 2000) -> float:
        """Fixed integrator step: one grid period split into
        ``steps_per_cycle`` equal slices (2000 by default)."""
        return self.grid_period / steps_per_cycle

    def to_vector(self) -> np.ndarray:
        prm = np.empty(K.PRM_SIZE)
        prm[K.PRM_L_F] = self.l_f
        prm[K.PRM_C_F] = self.c_f
        prm[K.PRM_L_B] = self.l_b
        prm[K.PRM_C_DC] = self.c_dc
        prm[K.PRM_R_LF] = self.r_lf
        prm[K.PRM_R_LB] = self.r_lb
        prm[K.PRM_R_D] = self.r_d
        prm[K.PRM_V_D] = self.v_d
        prm[K.PRM_V_REF] = self.v_ref
        prm[K.PRM_KP_V] = self.kp_v
        prm[K.PRM_KI_V] = self.ki_v
        prm[K.PRM_KP_I] = self.kp_i
        prm[K.PRM_KI_I] = self.ki_i
        prm[K.PRM_D_MIN] = self.d_min
        prm[K.PRM_D_MAX] = self.d_max
        prm[K.PRM_V_MIN] = self.v_min
        prm[K.PRM_V_PEAK] = self.v_peak
        prm[K.PRM_W_G] = self.w_g
        return prm

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PfcParams":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown circuit parameter(s): {sorted(unknown)}")
        missing = known - set(mapping)
        if missing:
            raise ValueError(f"missing circuit parameter(s): {sorted(missing)}")
        return cls(**{k: float(v) for k, v in mapping.items()})


@dataclass(frozen=True)
class SourceSpec:
    """Common-bus excitation: fundamental tone plus one optional small
    harmonic tone used for impedance sweeps."""

    v_peak: float    # fundamental amplitude (peak volts)
    w_g: float       # fundamental angular frequency
    theta0: float    # fundamental initial phase
    dv_hm: float     # harmonic tone amplitude (0 disables the tone)
    w_hm: float      # harmonic tone angular frequency

    def __post_init__(self):
        if self.v_peak <= 0.0 or self.w_g <= 0.0:
            raise ValueError("v_peak and w_g must be strictly positive")
        if self.dv_hm < 0.0:
            raise ValueError("dv_hm must be non-negative")
        if self.dv_hm > 0.0:
            if not (0.0 < self.w_hm < 2.0 * self.w_g):
                raise ValueError("w_hm must lie in (0, 2*w_g)")
            if self.w_hm == self.w_g:
                raise ValueError("w_hm must differ from the fundamental")
            if self.dv_hm > 0.1 * self.v_peak:
                raise ValueError("tone amplitude beyond the small-injection "
                                 "regime (> 10% of the fundamental)")

    @classmethod
    def fundamental(cls, params: PfcParams, theta0: float = 0.0) -> "SourceSpec":
        return cls(v_peak=params.v_peak, w_g=params.w_g, theta0=theta0,
                   dv_hm=0.0, w_hm=0.0)

    def with_tone(self, dv_hm: float, w_hm: float) -> "SourceSpec":
        return SourceSpec(self.v_peak, self.w_g, self.theta0, dv_hm, w_hm)

    def to_vector(self) -> np.ndarray:
        return np.array([self.v_peak, self.w_g, self.theta0,
                         self.dv_hm, self.w_hm])


_STATE_FIELDS = ("i_fil", "v_fbri", "i_lb", "v_dc", "sigma_v", "sigma_i")


@dataclass(frozen=True)
class PfcState:
    """Converter state: filter inductor current, filter capacitor voltage,
    boost inductor current, DC-link voltage, and the two PI integrators."""

    i_fil: float = 0.0
    v_fbri: float = 0.0
    i_lb: float = 0.0
    v_dc: float = 0.0
    sigma_v: float = 0.0
    sigma_i: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.i_fil, self.v_fbri, self.i_lb, self.v_dc,
                         self.sigma_v, self.sigma_i])

    @classmethod
    def from_array(cls, arr) -> "PfcState":
        return cls(*(float(v) for v in arr))

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f)) for f in _STATE_FIELDS)


def cold_start_state(params: PfcParams) -> PfcState:
    """State before control is enabled: the DC link sits at the rectified
    peak (bridge precharge), everything else at zero."""
    return PfcState(v_dc=params.v_peak)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled state history.  ``data`` has one row per sample in
    the order (i_fil, v_fbri, i_lb, v_dc, sigma_v, sigma_i)."""

    dt: float
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != K.NSTATE:
            raise ValueError("trajectory data must have shape (K, 6)")
        if self.data.shape[0] < 1:
            raise ValueError("trajectory must contain at least one sample")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    @property
    def i_fil(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def v_fbri(self) -> np.ndarray:
        return self.data[:, 1]

    @property
    def i_lb(self) -> np.ndarray:
        return self.data[:, 2]

    @property
    def v_dc(self) -> np.ndarray:
        return self.data[:, 3]

    def state(self, k: int) -> PfcState:
        return PfcState.from_array(self.data[k])

    def final_state(self) -> PfcState:
        return self.state(len(self) - 1)

    def to_csv(self, path) -> None:
        write_trajectory_csv(self, path)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        return read_trajectory_csv(path)


TRAJECTORY_HEADER = "t_s,i_fil_a,v_fbri_v,i_lb_a,v_dc_v,sigma_v,sigma_i"


def write_trajectory_csv(traj: Trajectory, path, header_comment: str | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(TRAJECTORY_HEADER + "\n")
        for k in range(len(traj)):
            row = traj.data[k]
            t = k * traj.dt
            fh.write("%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                     % (t, row[0], row[1], row[2], row[3], row[4], row[5]))


def read_trajectory_csv(path) -> Trajectory:
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("t_s"):
                if line != TRAJECTORY_HEADER:
                    raise ValueError(f"unexpected trajectory header: {line}")
                continue
            rows.append([float(v) for v in line.split(",")])
    arr = np.asarray(rows)
    if arr.shape[0] < 1:
        raise ValueError("empty trajectory file")
    dt = arr[1, 0] - arr[0, 0] if arr.shape[0] > 1 else 0.0
    return Trajectory(dt=dt, data=np.ascontiguousarray(arr[:, 1:]))


def derivative(state: PfcState, params: PfcParams, v_in: float,
               p_load: float) -> PfcState:
    """Instantaneous state rates under the averaged converter equations.

    Raises :class:`DivergenceError` on a non-finite input state (the symptom
    of a blown-up integration upstream).
    """
    if p_load < 0.0:
        raise ValueError("p_load must be non-negative")
    if not state.is_finite():
        raise DivergenceError(float("nan"))
    out = np.empty(K.NSTATE)
    K.pfc_rhs(state.as_array(), float(v_in), float(p_load),
              params.to_vector(), out)
    return PfcState.from_array(out)


def _check_dt(params: PfcParams, dt: float) -> None:
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if dt > params.grid_period / 200.0:
        raise ValueError(
            f"dt={dt:.3g} too coarse; need at most one two-hundredth of the "
            f"grid period ({params.grid_period / 200.0:.3g} s)")


def integrate(initial: PfcState, params: PfcParams, source: SourceSpec,
              p_load: float, duration: float, dt: float) -> Trajectory:
    """Fixed-step 4th-order integration from ``initial`` over ``duration``.

    Returns round(duration/dt) + 1 uniformly spaced samples including the
    initial state.  Identical inputs produce bit-identical trajectories.
    """
    _check_dt(params, dt)
    if duration < 0.0:
        raise ValueError("duration must be non-negative")
    if p_load < 0.0:
        raise ValueError("p_load must be non-negative")
    n_steps = int(round(duration / dt))
    out = np.empty((n_steps + 1, K.NSTATE))
    x = initial.as_array()
    bad = K.record_pfc(x, 0.0, dt, n_steps, source.to_vector(),
                       float(p_load), params.to_vector(), out)
    if bad >= 0:
        raise DivergenceError(bad * dt)
    return Trajectory(dt=dt, data=out)


def _settle_window(params: PfcParams, source: SourceSpec, dt: float):
    """Monitoring window for settling: one fundamental period for a bare
    fundamental; the common period of both tones for a two-tone source (the
    two-tone steady state is only periodic over the common period).  The
    consecutive-pass count is scaled so the check always spans at least five
    fundamental cycles."""
    t_g = params.grid_period
    if source.dv_hm == 0.0:
        t_cycle = t_g
        consec = 5
    else:
        from .sweep import common_period  # deferred: avoids import cycle
        t_cycle = common_period(source.w_g, source.w_hm)
        consec = max(1, math.ceil(5.0 * t_g / t_cycle))
    steps = int(round(t_cycle / dt))
    if steps < 1 or abs(steps * dt - t_cycle) > 1e-9 * t_cycle:
        raise ValueError("dt does not evenly divide the settling period; "
                         "derive dt from PfcParams.default_dt")
    return t_cycle, steps, consec


def settle(params: PfcParams, source: SourceSpec, p_load: float,
           dt: float | None = None, max_settle_s: float = 2.0,
           tol: float = 1e-3, initial: PfcState | None = None) -> PfcState:
    """Run the converter to a (periodic) steady state.

    Convergence: the cycle mean of the DC-link voltage changes by less than
    ``tol`` (relative) for five consecutive fundamental cycles; under a
    two-tone source the mean is taken over the common period of both tones
    instead, which is the shortest beat-free window.

    Raises :class:`SettleTimeoutError` with the last observed delta if the
    mean is still moving after ``max_settle_s`` of simulated time.
    """
    if dt is None:
        dt = params.default_dt()
    _check_dt(params, dt)
    _t_cycle, steps, consec = _settle_window(params, source, dt)
    max_cycles = int(max_settle_s / (steps * dt))
    if max_cycles < consec + 1:
        raise SettleTimeoutError(math.inf, max_settle_s)
    x = (initial if initial is not None else cold_start_state(params)).as_array()
    status, _cycles, delta = K.settle_pfc(
        x, dt, steps, max_cycles, tol, consec,
        source.to_vector(), float(p_load), params.to_vector())
    if status == 2:
        raise DivergenceError(float("nan"))
    if status == 1:
        raise SettleTimeoutError(delta, max_settle_s)
    return PfcState.from_array(x)


def extract_input_current(trajectory: Trajectory) -> np.ndarray:
    """Common-bus current samples: the filter inductor current component of
    every state sample."""
    if len(trajectory) < 1:
        raise ValueError("empty trajectory")
    return trajectory.i_fil.copy()


# -- parameter config files --------------------------------------------------

def load_params(path=None) -> PfcParams:
    """Load circuit parameters from a YAML file with a top-level ``circuit``
    mapping (or a bare mapping).  With no path, the packaged defaults for the
    canonical 3.6 kW, 230 V rms -> 400 V DC configuration are used."""
    if path is None:
        text = resources.files("ssrkit.configs").joinpath("default.yaml").read_text()
        doc = yaml.safe_load(text)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError("parameter file must contain a mapping")
    mapping = doc.get("circuit", doc)
    return PfcParams.from_mapping(mapping)
