"""Compiled inner loops for the converter simulator and sweep engine.

Everything here is numba-jitted with fastmath disabled so that results are
bit-reproducible across runs and across thread counts.  The public API lives
in :mod:`ssrkit.pfc` and :mod:`ssrkit.sweep`; these kernels operate on plain
float64 arrays.

Parameter vector layout (PRM_* indices) and source vector layout (SRC_*)
are shared with the wrapper modules.
"""

import math

import numpy as np
from numba import njit, prange

# PfcParams packed as a float64 vector
PRM_L_F = 0
PRM_C_F = 1
PRM_L_B = 2
PRM_C_DC = 3
PRM_R_LF = 4
PRM_R_LB = 5
PRM_R_D = 6
PRM_V_D = 7
PRM_V_REF = 8
PRM_KP_V = 9
PRM_KI_V = 10
PRM_KP_I = 11
PRM_KI_I = 12
PRM_D_MIN = 13
PRM_D_MAX = 14
PRM_V_MIN = 15
PRM_V_PEAK = 16  # sqrt(2) * V_com_rms, the current-shaping normalisation
PRM_W_G = 17
PRM_SIZE = 18

# SourceSpec packed as a float64 vector
SRC_V_PEAK = 0
SRC_W_G = 1
SRC_THETA0 = 2
SRC_DV_HM = 3
SRC_W_HM = 4
SRC_SIZE = 5

NSTATE = 6  # i_fil, v_fbri, i_lb, v_dc, sigma_v, sigma_i

# linear oracle branch kinds
LIN_R = 0
LIN_RL = 1
LIN_RC = 2


@njit(cache=True)
def source_voltage(t, src):
    """Two-tone bus voltage: fundamental plus one small harmonic tone."""
    v = src[SRC_V_PEAK] * math.cos(src[SRC_W_G] * t + src[SRC_THETA0])
    if src[SRC_DV_HM] != 0.0:
        v += src[SRC_DV_HM] * math.cos(src[SRC_W_HM] * t)
    return v


@njit(cache=True)
def pfc_rhs(x, vin, p_load, prm, out):
    """Averaged-model state derivative of the PFC converter.

    States: [i_fil, v_fbri, i_lb, v_dc, sigma_v, sigma_i].
    The PWM stage is represented by its duty-cycle average; the bridge by an
    offset diode model (two conducting diodes).  Integrators freeze only when
    their own error pushes deeper into the active duty saturation.
    """
    i_fil = x[0]
    v_f = x[1]
    i_lb = x[2]
    v_dc = x[3]
    sig_v = x[4]
    sig_i = x[5]

    # outer voltage loop -> current amplitude command
    e_v = prm[PRM_V_REF] - v_dc
    i_amp = prm[PRM_KP_V] * e_v + prm[PRM_KI_V] * sig_v
    # inner current loop tracks the rectified bus waveform shape
    shape = abs(v_f) / prm[PRM_V_PEAK]
    i_ref = i_amp * shape
    e_i = i_ref - i_lb
    d_raw = prm[PRM_KP_I] * e_i + prm[PRM_KI_I] * sig_i
    sat_hi = d_raw > prm[PRM_D_MAX]
    sat_lo = d_raw < prm[PRM_D_MIN]
    if sat_hi:
        d = prm[PRM_D_MAX]
    elif sat_lo:
        d = prm[PRM_D_MIN]
    else:
        d = d_raw

    # EMI filter inductor and capacitor
    out[0] = (vin - prm[PRM_R_LF] * i_fil - v_f) / prm[PRM_L_F]
    i_bridge = i_lb if v_f >= 0.0 else -i_lb
    out[1] = (i_fil - i_bridge) / prm[PRM_C_F]

    # bridge + boost inductor; diode pair blocks reverse current
    v_rect = abs(v_f) - 2.0 * (prm[PRM_V_D] + prm[PRM_R_D] * i_lb)
    di_lb = (v_rect - prm[PRM_R_LB] * i_lb - (1.0 - d) * v_dc) / prm[PRM_L_B]
    if i_lb <= 0.0 and di_lb < 0.0:
        di_lb = 0.0
    out[2] = di_lb

    # DC link fed by the averaged switch, discharged by the constant-power load
    v_cpl = v_dc if v_dc > prm[PRM_V_MIN] else prm[PRM_V_MIN]
    out[3] = ((1.0 - d) * i_lb - p_load / v_cpl) / prm[PRM_C_DC]

    # anti-windup: freeze an integrator only when it drives into saturation
    if (sat_hi and e_v > 0.0) or (sat_lo and e_v < 0.0):
        out[4] = 0.0
    else:
        out[4] = e_v
    if (sat_hi and e_i > 0.0) or (sat_lo and e_i < 0.0):
        out[5] = 0.0
    else:
        out[5] = e_i


@njit(cache=True)
def rk4_step_pfc(x, t, dt, src, p_load, prm, k1, k2, k3, k4, xt):
    """One classical 4th-order step, in place.  Boost current is floored at
    zero afterwards (diode blocking is a one-sided constraint)."""
    v0 = source_voltage(t, src)
    vh = source_voltage(t + 0.5 * dt, src)
    v1 = source_voltage(t + dt, src)

    pfc_rhs(x, v0, p_load, prm, k1)
    for i in range(NSTATE):
        xt[i] = x[i] + 0.5 * dt * k1[i]
    pfc_rhs(xt, vh, p_load, prm, k2)
    for i in range(NSTATE):
        xt[i] = x[i] + 0.5 * dt * k2[i]
    pfc_rhs(xt, vh, p_load, prm, k3)
    for i in range(NSTATE):
        xt[i] = x[i] + dt * k3[i]
    pfc_rhs(xt, v1, p_load, prm, k4)
    for i in range(NSTATE):
        x[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    if x[2] < 0.0:
        x[2] = 0.0


@njit(cache=True)
def advance_pfc(x, t0, dt, n_steps, src, p_load, prm):
    """Advance ``n_steps`` without recording.  Returns the end time, or -1.0
    if a state went non-finite (divergence; caller reports the time)."""
    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    xt = np.empty(NSTATE)
    t = t0
    for _ in range(n_steps):
        rk4_step_pfc(x, t, dt, src, p_load, prm, k1, k2, k3, k4, xt)
        t += dt
        for i in range(NSTATE):
            if not math.isfinite(x[i]):
                return -1.0
    return t


@njit(cache=True)
def record_pfc(x, t0, dt, n_steps, src, p_load, prm, out):
    """Advance ``n_steps`` recording every state sample (including the
    initial one) into ``out`` of shape (n_steps + 1, 6).  Returns the step
    index at which a state went non-finite, or -1 on success."""
    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    xt = np.empty(NSTATE)
    for i in range(NSTATE):
        out[0, i] = x[i]
    t = t0
    for k in range(n_steps):
        rk4_step_pfc(x, t, dt, src, p_load, prm, k1, k2, k3, k4, xt)
        t += dt
        for i in range(NSTATE):
            out[k + 1, i] = x[i]
            if not math.isfinite(x[i]):
                return k + 1
    return -1


@njit(cache=True)
def settle_pfc(x, dt, steps_per_cycle, max_cycles, tol, n_consec, src, p_load, prm):
    """Integrate whole excitation cycles until the cycle mean of the DC-link
    voltage stops moving.

    ``steps_per_cycle`` covers one period of the (periodic) excitation.
    Convergence: relative change of the cycle mean below ``tol`` for
    ``n_consec`` consecutive cycles.  Returns (status, cycles_run, last_delta)
    with status 0 = converged, 1 = timeout, 2 = non-finite state.
    """
    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    xt = np.empty(NSTATE)
    t = 0.0
    prev_mean = -1.0
    streak = 0
    delta = math.inf
    for cyc in range(max_cycles):
        acc = 0.0
        for _ in range(steps_per_cycle):
            acc += x[3]
            rk4_step_pfc(x, t, dt, src, p_load, prm, k1, k2, k3, k4, xt)
            t += dt
        for i in range(NSTATE):
            if not math.isfinite(x[i]):
                return 2, cyc + 1, delta
        mean = acc / steps_per_cycle
        if prev_mean > 0.0:
            delta = abs(mean - prev_mean) / abs(prev_mean)
            if delta < tol:
                streak += 1
                if streak >= n_consec:
                    return 0, cyc + 1, delta
            else:
                streak = 0
        prev_mean = mean
    return 1, max_cycles, delta


@njit(cache=True)
def window_phasor_pfc(x, dt, n_samples, w, src, p_load, prm):
    """Advance one coherent window accumulating the single-bin Fourier
    coefficient of the input (filter inductor) current at ``w``.

    Samples are taken at the start of each step, k = 0 .. n_samples-1.
    Returns (re, im, status) scaled so that A*cos(w t + phi) gives A angle
    phi; status != 0 flags a non-finite state.
    """
    k1 = np.empty(NSTATE)
    k2 = np.empty(NSTATE)
    k3 = np.empty(NSTATE)
    k4 = np.empty(NSTATE)
    xt = np.empty(NSTATE)
    acc_re = 0.0
    acc_im = 0.0
    t = 0.0
    for k in range(n_samples):
        tk = k * dt
        acc_re += x[0] * math.cos(w * tk)
        acc_im -= x[0] * math.sin(w * tk)
        rk4_step_pfc(x, t, dt, src, p_load, prm, k1, k2, k3, k4, xt)
        t += dt
        for i in range(NSTATE):
            if not math.isfinite(x[i]):
                return 0.0, 0.0, 1
    scale = 2.0 / n_samples
    return acc_re * scale, acc_im * scale, 0


@njit(cache=True)
def single_bin_coeff(samples, dt, w):
    """Single-bin correlation of a real record against cos/sin at ``w``,
    scaled so a pure A*cos(w t + phi) record yields A angle phi."""
    n = samples.shape[0]
    acc_re = 0.0
    acc_im = 0.0
    for k in range(n):
        tk = k * dt
        acc_re += samples[k] * math.cos(w * tk)
        acc_im -= samples[k] * math.sin(w * tk)
    scale = 2.0 / n
    return acc_re * scale, acc_im * scale


@njit(cache=True)
def lin_branch_phasor(kind, r, l, c, dt, n_pre, n_samples, w, src):
    """Two-tone response of a series linear branch (R, RL or series RC),
    returning the input-current phasor at ``w`` after an n_pre-step run-in.

    The branch replaces the converter in oracle checks: same excitation,
    same windowing, same extraction path.
    """
    k1 = 0.0
    state = 0.0  # RL: inductor current; RC: capacitor voltage
    t = 0.0
    for _ in range(n_pre):
        if kind == LIN_RL:
            v0 = source_voltage(t, src)
            vh = source_voltage(t + 0.5 * dt, src)
            v1 = source_voltage(t + dt, src)
            a1 = (v0 - r * state) / l
            a2 = (vh - r * (state + 0.5 * dt * a1)) / l
            a3 = (vh - r * (state + 0.5 * dt * a2)) / l
            a4 = (v1 - r * (state + dt * a3)) / l
            state += (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        elif kind == LIN_RC:
            v0 = source_voltage(t, src)
            vh = source_voltage(t + 0.5 * dt, src)
            v1 = source_voltage(t + dt, src)
            a1 = (v0 - state) / (r * c)
            a2 = (vh - (state + 0.5 * dt * a1)) / (r * c)
            a3 = (vh - (state + 0.5 * dt * a2)) / (r * c)
            a4 = (v1 - (state + dt * a3)) / (r * c)
            state += (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        t += dt
    acc_re = 0.0
    acc_im = 0.0
    for k in range(n_samples):
        tk = k * dt
        if kind == LIN_R:
            cur = source_voltage(t, src) / r
        elif kind == LIN_RL:
            cur = state
        else:
            cur = (source_voltage(t, src) - state) / r
        acc_re += cur * math.cos(w * tk)
        acc_im -= cur * math.sin(w * tk)
        # advance to the next sample instant
        if kind == LIN_RL:
            v0 = source_voltage(t, src)
            vh = source_voltage(t + 0.5 * dt, src)
            v1 = source_voltage(t + dt, src)
            a1 = (v0 - r * state) / l
            a2 = (vh - r * (state + 0.5 * dt * a1)) / l
            a3 = (vh - r * (state + 0.5 * dt * a2)) / l
            a4 = (v1 - r * (state + dt * a3)) / l
            state += (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        elif kind == LIN_RC:
            v0 = source_voltage(t, src)
            vh = source_voltage(t + 0.5 * dt, src)
            v1 = source_voltage(t + dt, src)
            a1 = (v0 - state) / (r * c)
            a2 = (vh - (state + 0.5 * dt * a1)) / (r * c)
            a3 = (vh - (state + 0.5 * dt * a2)) / (r * c)
            a4 = (v1 - (state + dt * a3)) / (r * c)
            state += (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        t += dt
    scale = 2.0 / n_samples
    return acc_re * scale, acc_im * scale


@njit(cache=True)
def settle_workloads_pfc(x0, dt, steps_per_cycle, max_cycles, tol, n_consec,
                         src_fund, workloads, prm, out_states, out_status):
    """Settle the converter under the bare fundamental for each workload.

    Parallel over workloads; each settle is independent and starts from the
    same cold state ``x0``.
    """
    n = workloads.shape[0]
    for j in prange(n):
        x = x0.copy()
        status, _, _ = settle_pfc(x, dt, steps_per_cycle, max_cycles, tol,
                                  n_consec, src_fund, workloads[j], prm)
        out_states[j] = x
        out_status[j] = status


@njit(cache=True)
def sweep_points_pfc(settled, wl_index, dt, preroll_steps, window_steps,
                     src_table, p_loads, w_hms, prm, out_re, out_im, out_status):
    """Measure every sweep point: two-tone run-in from the per-workload
    settled state, then one coherent window with inline phasor extraction.

    Parallel over points; outputs are indexed by point so the result is
    independent of scheduling.
    """
    n = p_loads.shape[0]
    for j in prange(n):
        x = settled[wl_index[j]].copy()
        src = src_table[j]
        t_end = advance_pfc(x, 0.0, dt, preroll_steps[j], src, p_loads[j], prm)
        if t_end < 0.0:
            out_re[j] = np.nan
            out_im[j] = np.nan
            out_status[j] = 2
            continue
        re, im, st = window_phasor_pfc(x, dt, window_steps[j], w_hms[j], src,
                                       p_loads[j], prm)
        out_re[j] = re
        out_im[j] = im
        out_status[j] = st
