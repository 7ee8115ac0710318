"""Fixed-step time-domain simulation of the converter-plus-grid system.

Engine layout
-------------
The linear electrical network (converter-side inductor, shunt damping
branch, Thevenin grid branch) is integrated with the trapezoidal rule on
its stationary-frame complex envelope, so a balanced three-phase set is
one complex state per branch.  The discrete controller runs once per
step with forward-Euler state updates; its EMF command is computed from
the measurements of step ``n``, held over the following interval
(zero-order hold, with a half-step phase advance that centres the held
vector on the interval), and limited to the linear modulation range
``u_dc / sqrt(3)``.  The DC bus is integrated in stored-energy form so
its power balance stays exact under the trapezoidal quadrature.

A run starts ``SOFT_START_S`` before the recorded window on the exact
analytic steady state; the pre-roll absorbs the small offset between the
continuous equilibrium and the discrete orbit, and recording starts at
``t = 0`` with the estimator chain already settled.

Damping control plugs in as a stream processor: it transforms only the
voltage samples handed to the controller.  The physical terminal
quantities and every recorded channel stay untouched.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from .ardc import ArdcConfig, ArdcRuntime
from .plant import (
    GridParams,
    OperatingPoint,
    PlantParams,
    _unwrap_controller,
    connected_equilibrium,
    linearize_device,
    solve_source_voltage,
)

SOFT_START_S = 0.3
BLOWUP_FACTOR = 1e6


def _fingerprint_of(ctrl) -> str:
    fp = getattr(ctrl, "fingerprint")
    return fp if isinstance(fp, str) else fp()

_CHANNELS = (
    "v_a", "v_b", "v_c",
    "i_a", "i_b", "i_c",
    "p", "q", "v_dc",
    "v_alpha", "v_beta", "i_alpha", "i_beta",
    "v_pu",
)

# inverse Clarke phase rotators (amplitude-invariant, three-wire)
_PH_B = cmath.exp(-2j * math.pi / 3.0)
_PH_C = cmath.exp(2j * math.pi / 3.0)


class SimulationBlowUp(RuntimeError):
    """Raised when an integration leaves its numerical operating domain."""

    def __init__(self, t_fail: float, what: str):
        self.t_fail = float(t_fail)
        super().__init__(f"simulation aborted at t={t_fail:.6f} s: {what}")


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridScaleEvent:
    """Step the grid impedance scale (absolute, applied at ``t``)."""

    t: float
    scale: float

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError("grid scale must be positive")


@dataclass(frozen=True)
class FaultEvent:
    """Source-side voltage dip over ``[t, t + duration)``.

    ``three_phase`` scales the whole source to ``retained_pu``;
    ``phase_a`` dips a single phase, which splits the source into the
    sequence pair ``(2+d)/3`` and ``(d-1)/3`` of the pre-fault envelope.
    A retained voltage of 1.0 is an exact no-op.
    """

    t: float
    duration: float
    retained_pu: float = 0.05
    kind: str = "three_phase"

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("fault duration must be positive")
        if not 0.0 <= self.retained_pu <= 1.0:
            raise ValueError("retained voltage must lie in [0, 1]")
        if self.kind not in ("three_phase", "phase_a"):
            raise ValueError("fault kind must be 'three_phase' or 'phase_a'")


@dataclass(frozen=True)
class TurbineCountEvent:
    """Scale the aggregated machine-side power to ``ratio`` of its base.

    A farm of N identical units behind one equivalent terminal carries
    N/N0 of the base power; the exported current follows through the
    DC-bus regulation without rebuilding the network.
    """

    t: float
    ratio: float

    def __post_init__(self):
        if self.ratio <= 0.0:
            raise ValueError("turbine count ratio must be positive")


@dataclass(frozen=True)
class SimConfig:
    """Run geometry: step, duration, events, recorded channels."""

    dt: float = 50e-6
    t_end: float = 1.0
    events: tuple = ()
    record: tuple = _CHANNELS

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")
        if self.t_end < self.dt:
            raise ValueError("t_end must cover at least one step")
        object.__setattr__(self, "record", tuple(self.record))
        unknown = set(self.record) - set(_CHANNELS)
        if unknown:
            raise ValueError(f"unknown record channels: {sorted(unknown)}")
        events = tuple(sorted(self.events, key=lambda ev: ev.t))
        object.__setattr__(self, "events", events)
        for ev in events:
            if not 0.0 <= ev.t <= self.t_end:
                raise ValueError(f"event at t={ev.t} outside [0, {self.t_end}]")
            if isinstance(ev, FaultEvent) and ev.t + ev.duration > self.t_end:
                raise ValueError("fault extends past the end of the run")
        faults = [ev for ev in events if isinstance(ev, FaultEvent)]
        for prev, nxt in zip(faults, faults[1:]):
            if nxt.t < prev.t + prev.duration:
                raise ValueError("overlapping faults are not supported")


def source_emf(t: float, e_mag, f1_hz: float, fault_events) -> complex:
    """Stationary-frame complex source EMF at time ``t``.

    The healthy source is a positive-sequence vector of phasor
    ``e_mag`` (a real value means zero phase); an active fault rescales
    it and, for a single-phase dip, adds the counter-rotating
    (negative-sequence) component created by scaling one phase of the
    three-phase set.
    """
    p, n = 1.0, 0.0
    for ev in fault_events:
        if ev.t <= t < ev.t + ev.duration:
            d = ev.retained_pu
            if ev.kind == "three_phase":
                p, n = d, 0.0
            else:
                p, n = (2.0 + d) / 3.0, (d - 1.0) / 3.0
            break
    base = e_mag * cmath.exp(2j * math.pi * f1_hz * t)
    return p * base + n * base.conjugate()


# ---------------------------------------------------------------------------
# trapezoidal network
# ---------------------------------------------------------------------------


class NetworkIntegrator:
    """Trapezoidal integrator for the linear PCC network.

    States are stationary-frame complex envelopes: converter inductor
    current ``i_c``, damping-branch capacitor voltage ``v_cf`` and grid
    branch current ``i_g``.  The PCC voltage is algebraic:
    ``v_t = v_cf + r_f * (i_c + i_inj - i_g)``.  Inputs are the held
    converter EMF, the source EMF at both interval endpoints and an
    optional shunt current injection at both endpoints.
    """

    def __init__(self, pp: PlantParams, gp: GridParams, dt: float):
        self.pp = pp
        self.dt = float(dt)
        self._rf = pp.r_f_ohm
        self.i_c = 0j
        self.v_cf = 0j
        self.i_g = 0j
        self.set_grid(gp)

    def set_grid(self, gp: GridParams) -> None:
        """Rebuild the step matrices for a new grid strength (states kept)."""
        self.gp = gp
        pp = self.pp
        r_f, l_c, c_f = pp.r_f_ohm, pp.l_c_h, pp.c_f_f
        r_g, l_g = gp.r_eff, gp.l_eff
        a = np.array(
            [
                [-r_f / l_c, -1.0 / l_c, r_f / l_c],
                [1.0 / c_f, 0.0, -1.0 / c_f],
                [r_f / l_g, 1.0 / l_g, -(r_f + r_g) / l_g],
            ]
        )
        b = np.array(
            [
                [1.0 / l_c, 0.0, -r_f / l_c],
                [0.0, 0.0, 1.0 / c_f],
                [0.0, -1.0 / l_g, r_f / l_g],
            ]
        )  # inputs: v_conv, e, i_inj
        half = 0.5 * self.dt
        m_inv = np.linalg.inv(np.eye(3) - half * a)
        m_step = m_inv @ (np.eye(3) + half * a)
        b_half = m_inv @ (half * b)
        # unrolled scalar coefficients for the per-sample hot path
        self._m = tuple(tuple(row) for row in m_step)
        self._b = tuple(tuple(row) for row in b_half)

    def v_t(self, i_inj: complex = 0j) -> complex:
        return self.v_cf + self._rf * (self.i_c + i_inj - self.i_g)

    def step(
        self,
        v_conv: complex,
        e0: complex,
        e1: complex,
        i_inj0: complex = 0j,
        i_inj1: complex = 0j,
    ) -> None:
        x0, x1, x2 = self.i_c, self.v_cf, self.i_g
        u0 = v_conv + v_conv  # held over the interval: same value twice
        u1 = e0 + e1
        u2 = i_inj0 + i_inj1
        m, b = self._m, self._b
        self.i_c = (
            m[0][0] * x0 + m[0][1] * x1 + m[0][2] * x2
            + b[0][0] * u0 + b[0][1] * u1 + b[0][2] * u2
        )
        self.v_cf = (
            m[1][0] * x0 + m[1][1] * x1 + m[1][2] * x2
            + b[1][0] * u0 + b[1][1] * u1 + b[1][2] * u2
        )
        self.i_g = (
            m[2][0] * x0 + m[2][1] * x1 + m[2][2] * x2
            + b[2][0] * u0 + b[2][1] * u1 + b[2][2] * u2
        )

    def stored_energy(self) -> float:
        """Instantaneous three-phase energy in the reactive elements."""
        pp = self.pp
        return 0.75 * (
            pp.l_c_h * abs(self.i_c) ** 2
            + pp.c_f_f * abs(self.v_cf) ** 2
            + self.gp.l_eff * abs(self.i_g) ** 2
        )

    def dissipated_midpoint(self, pre: tuple, dt: float) -> float:
        """Resistive energy over one step, quadrature-matched to the rule.

        Evaluating the dissipation at the state midpoints makes the
        discrete energy balance of the trapezoidal step exact to
        rounding, which is what the conservation check relies on.
        """
        i_cm = 0.5 * (pre[0] + self.i_c)
        i_gm = 0.5 * (pre[2] + self.i_g)
        p = 1.5 * (
            self.pp.r_f_ohm * abs(i_cm - i_gm) ** 2
            + self.gp.r_eff * abs(i_gm) ** 2
        )
        return p * dt


# ---------------------------------------------------------------------------
# discrete controller
# ---------------------------------------------------------------------------


class _Converter:
    """Forward-Euler realization of the converter control in the
    stationary frame.

    The synchronization angle integrates the nominal frequency plus the
    loop correction, so every inner quantity matches the rotating-frame
    model with ``theta = w1*t + delta``.  ``command`` consumes the
    measurements of one sample, emits the EMF to hold over the next
    interval (clamped to the modulation limit, phase-advanced half a
    step to centre the hold) and then advances its own states.
    """

    __slots__ = (
        "cp", "w1", "u_ref", "v_nom", "dt", "tau_h", "_adv", "_sqrt3",
        "theta", "phi_pll", "gam", "phi_dc", "vm1", "vm2", "pv", "w",
    )

    def __init__(self, pp, cp, x0, t_start: float, dt: float, f1_hz: float):
        self.cp = cp
        self.w1 = 2.0 * math.pi * f1_hz
        self.u_ref = pp.u_dc_v
        self.v_nom = pp.v_phase_peak
        self.dt = float(dt)
        self.tau_h = 0.5 * cp.tau_vm
        self._adv = cmath.exp(0.5j * self.w1 * self.dt)
        self._sqrt3 = math.sqrt(3.0)
        self.theta = float(x0[5]) + self.w1 * t_start
        self.phi_pll = float(x0[6])
        self.gam = complex(x0[7], x0[8])
        self.phi_dc = float(x0[9])
        self.vm1 = float(x0[10])
        self.vm2 = float(x0[11])
        self.pv = complex(x0[12], x0[13])
        self.w = complex(x0[14], x0[15])

    def command(self, v_ctl: complex, i_c: complex, u_dc: float) -> complex:
        cp = self.cp
        rot = cmath.exp(-1j * self.theta)
        vp = v_ctl * rot
        ip = i_c * rot

        eps = self.pv.imag
        d_theta = self.w1 + cp.k_pp * eps + cp.k_pi * self.phi_pll
        vm = abs(v_ctl)
        id_ref = (
            cp.k_dcp * (u_dc - self.u_ref)
            + cp.k_dci * self.phi_dc
            + cp.k_dw * (d_theta - self.w1)
        )
        iq_ref = cp.k_qv * (self.vm2 - self.v_nom)
        i_ref = complex(id_ref, iq_ref) - cp.g_vd * (vp - self.w)
        err = i_ref - ip
        v_ref_p = vp + 1j * cp.k_rd * ip + cp.k_p * err + cp.k_i * self.gam
        v_conv = v_ref_p * cmath.exp(1j * self.theta)
        lim = u_dc / self._sqrt3
        mag = abs(v_conv)
        if mag > lim:
            v_conv *= lim / mag
        v_conv *= self._adv

        dt = self.dt
        d_vm1 = (vm - self.vm1) / self.tau_h
        d_vm2 = (self.vm1 - self.vm2) / self.tau_h
        self.pv += dt * (vp - self.pv) / cp.tau_pll
        self.theta += dt * d_theta
        self.phi_pll += dt * eps
        self.vm1 += dt * d_vm1
        self.vm2 += dt * d_vm2
        self.phi_dc += dt * (u_dc - self.u_ref)
        self.gam += dt * err
        self.w += dt * (vp - self.w) / cp.tau_w
        return v_conv


class _Engine:
    """Network + converter + DC bus stepped together.

    The DC bus carries a braking chopper: whenever stored energy would
    push the bus above ``CHOPPER_LIMIT_PU`` times its rating, the excess
    is dissipated and the bus holds at the protection ceiling.  Below
    the threshold the chopper is inert, so small-signal behaviour is
    untouched; it only bounds large transients (faults, saturated
    resonance) that the machine side would otherwise keep pumping.
    """

    def __init__(self, pp, cp, gp, eq, dt: float, t_start: float, f1_hz: float):
        self.pp = pp
        self.dt = float(dt)
        self.net = NetworkIntegrator(pp, gp, dt)
        rot0 = cmath.exp(2j * math.pi * f1_hz * t_start)
        x0 = eq["x0"]
        self.net.i_c = complex(x0[0], x0[1]) * rot0
        self.net.v_cf = complex(x0[2], x0[3]) * rot0
        self.net.i_g = eq["i_out0"] * rot0
        self.conv = _Converter(pp, cp, x0, t_start, dt, f1_hz)
        self.u_dc = float(x0[4])
        self.w_dc = 0.5 * pp.c_dc_f * self.u_dc**2
        self.p_msc = eq["p_msc"]
        self._i_lim2 = (BLOWUP_FACTOR * pp.i_phase_peak) ** 2
        self._v_lim2 = (BLOWUP_FACTOR * pp.v_phase_peak) ** 2
        self._u_lim = BLOWUP_FACTOR * pp.u_dc_v
        self._w_floor = 0.5 * pp.c_dc_f * (1e-3 * pp.u_dc_v) ** 2
        self._w_chop = 0.5 * pp.c_dc_f * (CHOPPER_LIMIT_PU * pp.u_dc_v) ** 2

    def step(self, t_next, v_ctl, e0, e1, i_inj0=0j, i_inj1=0j) -> None:
        net = self.net
        i_c_meas = net.i_c
        v_conv = self.conv.command(v_ctl, i_c_meas, self.u_dc)
        if not (
            math.isfinite(v_conv.real) and math.isfinite(v_conv.imag)
        ):
            raise SimulationBlowUp(t_next, "converter command is not finite")
        p0 = 1.5 * (v_conv * i_c_meas.conjugate()).real
        net.step(v_conv, e0, e1, i_inj0, i_inj1)
        p1 = 1.5 * (v_conv * net.i_c.conjugate()).real
        self.w_dc += 0.5 * self.dt * (2.0 * self.p_msc - p0 - p1)
        if self.w_dc > self._w_chop:
            self.w_dc = self._w_chop
        if not (self.w_dc > self._w_floor):
            raise SimulationBlowUp(t_next, "DC bus collapsed")
        self.u_dc = math.sqrt(2.0 * self.w_dc * (1.0 / self.pp.c_dc_f))
        if not (self.u_dc <= self._u_lim):
            raise SimulationBlowUp(
                t_next, f"DC-bus voltage exceeded {BLOWUP_FACTOR:.0e} x rating"
            )
        ic, vf, ig = net.i_c, net.v_cf, net.i_g
        if not (
            ic.real**2 + ic.imag**2 <= self._i_lim2
            and ig.real**2 + ig.imag**2 <= self._i_lim2
            and vf.real**2 + vf.imag**2 <= self._v_lim2
        ):
            raise SimulationBlowUp(
                t_next, f"network state exceeded {BLOWUP_FACTOR:.0e} x rating"
            )


# ---------------------------------------------------------------------------
# waveforms
# ---------------------------------------------------------------------------


@dataclass
class Waveform:
    """Recorded run: a shared time axis plus named channels."""

    dt: float
    t: np.ndarray
    channels: dict
    meta: dict = field(default_factory=dict)

    def to_csv(self, path, downsample: int = 1) -> None:
        """Write ``t`` plus every channel, optionally keeping each
        ``downsample``-th row."""
        if downsample < 1:
            raise ValueError("downsample must be >= 1")
        names = list(self.channels)
        cols = [self.t[::downsample]] + [
            self.channels[n][::downsample] for n in names
        ]
        data = np.column_stack(cols)
        header = ",".join(["t"] + names)
        np.savetxt(path, data, delimiter=",", header=header, comments="",
                   fmt="%.9g")


def _build_channels(record, v, i, u_dc, pu):
    full = {
        "v_a": lambda: v.real,
        "v_b": lambda: (v * _PH_B).real,
        "v_c": lambda: (v * _PH_C).real,
        "i_a": lambda: i.real,
        "i_b": lambda: (i * _PH_B).real,
        "i_c": lambda: (i * _PH_C).real,
        "p": lambda: 1.5 * (v * np.conj(i)).real,
        "q": lambda: 1.5 * (v * np.conj(i)).imag,
        "v_dc": lambda: u_dc,
        "v_alpha": lambda: v.real,
        "v_beta": lambda: v.imag,
        "i_alpha": lambda: i.real,
        "i_beta": lambda: i.imag,
        "v_pu": lambda: pu,
    }
    return {name: np.asarray(full[name]()) for name in record}


# ---------------------------------------------------------------------------
# scenario runs
# ---------------------------------------------------------------------------


def run_simulation(
    cfg: SimConfig,
    plant: PlantParams,
    ctrl,
    grid: GridParams,
    ardc: ArdcConfig | None = None,
    *,
    e_source: float | None = None,
    p_mw: float | None = None,
    v_pcc_pu: float = 1.0,
) -> Waveform:
    """Integrate one scenario and return the recorded waveform.

    The run initializes on the analytic steady state of the initial
    grid, pre-rolls ``SOFT_START_S`` before ``t = 0`` and records from
    ``t = 0`` to ``cfg.t_end``.  ``ctrl`` may be sealed.  If
    ``e_source`` is omitted it is solved so the PCC sits at
    ``v_pcc_pu`` before any event.  When ``ardc`` is given, a damping
    runtime is attached between the terminal measurements and the
    controller; it never touches the recorded physical channels.
    Identical inputs give bit-identical waveforms.
    """
    pp, cp, gp = plant, _unwrap_controller(ctrl), grid
    dt = cfg.dt
    f1 = gp.f1_hz
    p_w = (p_mw if p_mw is not None else pp.s_mva) * 1e6
    if e_source is None:
        e_source = solve_source_voltage(pp, cp, gp, v_pcc_pu * pp.v_phase_peak, p_w)
    eq = connected_equilibrium(pp, cp, gp, e_source, p_w)

    n_pre = int(round(SOFT_START_S / dt))
    n_rec = int(round(cfg.t_end / dt))
    eng = _Engine(pp, cp, gp, eq, dt, -n_pre * dt, f1)

    runtime = None
    if ardc is not None:
        runtime = ArdcRuntime(ardc, dt=dt, f1_hz=f1)
        rot0 = cmath.exp(-2j * math.pi * f1 * (n_pre * dt))
        runtime.preload_fundamental(eq["i_out0"] * rot0)

    faults = tuple(ev for ev in cfg.events if isinstance(ev, FaultEvent))
    # a fault sits at electrical distance retained_pu along the Thevenin
    # line: the branch impedance between the PCC and the fault shrinks
    # by that factor, and the dip profile (source_emf) applies to the
    # pre-fault voltage at the fault bus, so the terminal actually
    # follows the dip instead of being held up by the converter.
    # retained_pu = 1 leaves impedance and EMF exactly unchanged.
    z_g0 = gp.r_eff + 1j * 2.0 * math.pi * f1 * gp.l_eff
    anchors = tuple(
        e_source
        if ev.retained_pu == 1.0
        else eq["v_t0"] - ev.retained_pu * z_g0 * eq["i_out0"]
        for ev in faults
    )

    def e_base(t: float):
        for ev, anchor in zip(faults, anchors):
            if ev.t <= t < ev.t + ev.duration:
                return anchor
        return e_source

    stepped = {}
    for ev in cfg.events:
        if isinstance(ev, FaultEvent):
            k_on = int(round(ev.t / dt))
            k_off = int(round((ev.t + ev.duration) / dt))
            stepped.setdefault(k_on, []).append(("fault", ev.retained_pu))
            stepped.setdefault(k_off, []).append(("fault", None))
        else:
            stepped.setdefault(int(round(ev.t / dt)), []).append(ev)

    # one-cycle RMS-derived magnitude of the PCC vector, per unit
    n_cyc = max(1, int(round(1.0 / (f1 * dt))))
    v_t0 = eng.net.v_t()
    ring = [abs(v_t0) ** 2] * n_cyc
    acc = sum(ring)
    pos = 0
    v_nom = pp.v_phase_peak

    v_rec = np.empty(n_rec + 1, dtype=complex)
    i_rec = np.empty(n_rec + 1, dtype=complex)
    u_rec = np.empty(n_rec + 1, dtype=float)
    pu_rec = np.empty(n_rec + 1, dtype=float)

    net = eng.net
    gp_cur = gp
    fault_alpha = None
    total = n_pre + n_rec
    for n in range(total + 1):
        k = n - n_pre
        t0 = k * dt
        if k >= 0 and k in stepped:
            for ev in stepped[k]:
                if isinstance(ev, tuple):
                    fault_alpha = ev[1]
                elif isinstance(ev, GridScaleEvent):
                    gp_cur = gp_cur.with_scale(ev.scale)
                else:
                    eng.p_msc = ev.ratio * eq["p_msc"]
            s = gp_cur.scale * (1.0 if fault_alpha is None else fault_alpha)
            net.set_grid(gp_cur.with_scale(s))
        v_t = net.v_cf + net._rf * (net.i_c - net.i_g)
        i_out = net.i_g
        mag2 = v_t.real * v_t.real + v_t.imag * v_t.imag
        acc += mag2 - ring[pos]
        ring[pos] = mag2
        pos += 1
        if pos == n_cyc:
            pos = 0
            acc = sum(ring)  # resync the running sum once per cycle
        pu = math.sqrt(acc / n_cyc) / v_nom
        if k >= 0:
            v_rec[k] = v_t
            i_rec[k] = i_out
            u_rec[k] = eng.u_dc
            pu_rec[k] = pu
        if n == total:
            break
        if runtime is not None:
            out = runtime.process_sample(
                t0, (v_t.real, v_t.imag), (i_out.real, i_out.imag), pu
            )
            v_ctl = complex(out[0], out[1])
        else:
            v_ctl = v_t
        t1 = (k + 1) * dt
        e0 = source_emf(t0, e_base(t0), f1, faults)
        e1 = source_emf(t1, e_base(t1), f1, faults)
        eng.step(t1, v_ctl, e0, e1)

    t_arr = np.arange(n_rec + 1) * dt
    channels = _build_channels(cfg.record, v_rec, i_rec, u_rec, pu_rec)
    meta = {
        "events": cfg.events,
        "e_source": e_source,
        "p_msc": eq["p_msc"],
        "fingerprint": _fingerprint_of(ctrl),
        "ardc_log": [row for row in runtime.log if row[0] >= -1e-12]
        if runtime is not None
        else [],
    }
    return Waveform(dt=dt, t=t_arr, channels=channels, meta=meta)


# ---------------------------------------------------------------------------
# terminal probing (admittance measurement support)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InjectionSpec:
    """One shunt current injection at the PCC.

    ``channel`` selects which spectral channel the injected envelope
    excites: 1 rotates at ``f`` (envelope ``exp(+j*nu*t)``), 2 at the
    coupled mirror ``2*f1 - f`` (envelope ``exp(-j*nu*t)``).
    """

    f_hz: float
    amplitude_frac: float
    channel: int = 1
    settle_s: float = 0.4
    window_s: float = 1.0
    ramp_s: float = 0.1

    def __post_init__(self):
        if self.f_hz <= 0.0:
            raise ValueError("injection frequency must be positive")
        if not 0.0 < self.amplitude_frac <= 0.02:
            raise ValueError("injection amplitude must lie in (0, 0.02] of rating")
        if self.channel not in (1, 2):
            raise ValueError("channel must be 1 or 2")
        if self.window_s <= 0.0 or self.settle_s < 0.0 or self.ramp_s < 0.0:
            raise ValueError("settle, window and ramp must be non-negative")
        if self.ramp_s > self.settle_s:
            raise ValueError("ramp must finish inside the settling interval")


@dataclass(frozen=True)
class ProbeResult:
    """Channel phasors of the terminal response to one injection."""

    f_hz: float
    channel: int
    v1: complex
    v2c: complex
    i1: complex
    i2c: complex


class ProbeError(RuntimeError):
    """No spectral steady state within the allotted settling interval."""


class LinearSsDevice:
    """Black-box device backed by the analytic small-signal model.

    Deterministic: identical voltage histories produce identical current
    histories.  The vendor constants stay sealed inside; only the
    fingerprint is exposed for manifests.
    """

    def __init__(self, pp: PlantParams, ctrl, op: OperatingPoint | None = None):
        cp = _unwrap_controller(ctrl)
        self._pp = pp
        self._lin = linearize_device(pp, cp, op or OperatingPoint())
        self.fingerprint = _fingerprint_of(ctrl)
        self._disc = {}

    def _discretized(self, gp: GridParams, dt: float):
        key = (gp.r_eff, gp.l_eff, gp.f1_hz, dt)
        sysd = self._disc.get(key)
        if sysd is not None:
            return sysd
        from scipy.signal import cont2discrete

        lin = self._lin
        a, b, c, d = lin.a, lin.b, lin.c, lin.d
        dinv = np.linalg.inv(d)
        n = a.shape[0]
        l_e, r_e = gp.l_eff, gp.r_eff
        w1 = 2.0 * math.pi * gp.f1_hz
        jrot = np.array([[0.0, -1.0], [1.0, 0.0]])
        eye2 = np.eye(2)

        a_cl = np.zeros((n + 2, n + 2))
        a_cl[:n, :n] = a - b @ dinv @ c
        a_cl[:n, n:] = b @ dinv
        a_cl[n:, :n] = -(dinv @ c) / l_e
        a_cl[n:, n:] = dinv / l_e - (r_e / l_e) * eye2 - w1 * jrot
        b_cl = np.vstack([-b @ dinv, -dinv / l_e])
        c_cl = np.vstack(
            [
                np.hstack([-dinv @ c, dinv]),          # terminal voltage
                np.hstack([np.zeros((2, n)), eye2]),   # exported current
            ]
        )
        d_cl = np.vstack([-dinv, -eye2])
        sysd = cont2discrete((a_cl, b_cl, c_cl, d_cl), dt, method="bilinear")[:4]
        self._disc[key] = sysd
        return sysd

    def probe_series(self, gp: GridParams, inj: InjectionSpec, dt: float):
        """Baseband terminal voltage / exported current under injection."""
        from scipy.signal import dlsim

        ad, bd, cd, dd = self._discretized(gp, dt)
        n_samp = int(round((inj.settle_s + 2.0 * inj.window_s) / dt)) + 1
        tv = np.arange(n_samp) * dt
        env = _injection_envelope(tv, inj, self._pp.i_phase_peak, gp.f1_hz)
        u = np.column_stack([env.real, env.imag])
        _, yout, _ = dlsim((ad, bd, cd, dd, dt), u, t=tv)
        v_bb = yout[:, 0] + 1j * yout[:, 1]
        i_bb = yout[:, 2] + 1j * yout[:, 3]
        return tv, v_bb, i_bb


class NonlinearDevice:
    """Black-box device backed by the full averaged converter model.

    Probing runs the switching-averaged time-domain loop and subtracts a
    shared no-injection baseline, so the extracted spectra carry only
    the injection response.
    """

    def __init__(self, pp: PlantParams, ctrl, e_source: float, p_w: float):
        self._pp = pp
        self._cp = _unwrap_controller(ctrl)
        self.fingerprint = _fingerprint_of(ctrl)
        self._e = float(e_source)
        self._p = float(p_w)
        self._baseline = {}

    def _run(self, gp: GridParams, dt: float, n_samp: int, env: np.ndarray | None):
        pp, cp = self._pp, self._cp
        f1 = gp.f1_hz
        eq = connected_equilibrium(pp, cp, gp, self._e, self._p)
        n_pre = int(round(SOFT_START_S / dt))
        eng = _Engine(pp, cp, gp, eq, dt, -n_pre * dt, f1)
        net = eng.net
        v_ser = np.empty(n_samp, dtype=complex)
        i_ser = np.empty(n_samp, dtype=complex)
        w1 = 2.0 * math.pi * f1
        for n in range(n_pre + n_samp):
            k = n - n_pre
            t0 = k * dt
            if k >= 0 and env is not None:
                inj0 = env[k] * cmath.exp(1j * w1 * t0)
            else:
                inj0 = 0j
            v_t = net.v_t(inj0)
            if k >= 0:
                v_ser[k] = v_t
                i_ser[k] = net.i_g - inj0
            if k == n_samp - 1:
                break
            t1 = (k + 1) * dt
            if k + 1 >= 0 and env is not None:
                inj1 = env[min(k + 1, n_samp - 1)] * cmath.exp(1j * w1 * t1)
            else:
                inj1 = 0j
            e0 = source_emf(t0, self._e, f1, ())
            e1 = source_emf(t1, self._e, f1, ())
            eng.step(t1, v_t, e0, e1, inj0, inj1)
        return v_ser, i_ser

    def probe_series(self, gp: GridParams, inj: InjectionSpec, dt: float):
        n_samp = int(round((inj.settle_s + 2.0 * inj.window_s) / dt)) + 1
        key = (gp.r_eff, gp.l_eff, gp.f1_hz, dt, n_samp)
        base = self._baseline.get(key)
        if base is None:
            base = self._run(gp, dt, n_samp, None)
            self._baseline[key] = base
        tv = np.arange(n_samp) * dt
        env = _injection_envelope(tv, inj, self._pp.i_phase_peak, gp.f1_hz)
        v_ser, i_ser = self._run(gp, dt, n_samp, env)
        demod = np.exp(-2j * math.pi * gp.f1_hz * tv)
        # reference the measurement frame to the unperturbed terminal
        # voltage phase, the same alignment a synchronized analyzer uses
        v0 = np.mean(base[0] * demod)
        align = v0.conjugate() / abs(v0)
        v_bb = (v_ser - base[0]) * demod * align
        i_bb = (i_ser - base[1]) * demod * align
        return tv, v_bb, i_bb


def _injection_envelope(tv, inj: InjectionSpec, i_rated: float, f1_hz: float):
    """Complex baseband envelope of the injected current."""
    nu = 2.0 * math.pi * (inj.f_hz - f1_hz)
    if inj.channel == 2:
        nu = -nu
    amp = inj.amplitude_frac * i_rated
    if inj.ramp_s > 0.0:
        x = np.clip(tv / inj.ramp_s, 0.0, 1.0)
        ramp = 0.5 - 0.5 * np.cos(math.pi * x)
    else:
        ramp = np.ones_like(tv)
    return amp * ramp * np.exp(1j * nu * tv)


def terminal_probe(
    device,
    grid: GridParams,
    inj: InjectionSpec,
    dt: float = 50e-6,
    steady_tol: float = 0.05,
) -> ProbeResult:
    """Measure the terminal spectra produced by one injection.

    The device runs connected to ``grid`` with the injection applied at
    the PCC; the response is projected on the injection envelope and its
    conjugate over two consecutive integer-cycle windows.  The second
    window is the result; if the two disagree by more than
    ``steady_tol`` relative, no spectral steady state was reached and a
    :class:`ProbeError` is raised.  Injections at the fundamental are
    rejected: the method cannot separate them from the operating point.
    """
    f1 = grid.f1_hz
    if abs(inj.f_hz - f1) < 0.5:
        raise ValueError("cannot probe at (or within 0.5 Hz of) the fundamental")
    if not 0.0 < inj.f_hz < 2.0 * f1:
        raise ValueError("probe frequency must keep its mirror above DC")
    cycles = abs(inj.f_hz - f1) * inj.window_s
    if abs(cycles - round(cycles)) > 1e-6 * max(1.0, cycles):
        raise ValueError(
            "analysis window must span an integer number of beat cycles"
        )
    tv, v_bb, i_bb = device.probe_series(grid, inj, dt)
    nu = 2.0 * math.pi * (inj.f_hz - f1)
    n_w = int(round(inj.window_s / dt))
    n0 = int(round(inj.settle_s / dt))

    def project(series, lo, hi):
        seg = series[lo:hi]
        ph = np.exp(-1j * nu * tv[lo:hi])
        return np.mean(seg * ph), np.mean(seg * np.conj(ph))

    vp_a, vn_a = project(v_bb, n0, n0 + n_w)
    ip_a, in_a = project(i_bb, n0, n0 + n_w)
    vp_b, vn_b = project(v_bb, n0 + n_w, n0 + 2 * n_w)
    ip_b, in_b = project(i_bb, n0 + n_w, n0 + 2 * n_w)

    v_scale = max(abs(vp_b), abs(vn_b))
    i_scale = max(abs(ip_b), abs(in_b))
    drift = max(
        abs(vp_a - vp_b) + abs(vn_a - vn_b),
        0.0,
    ) / max(v_scale, 1e-30) + (abs(ip_a - ip_b) + abs(in_a - in_b)) / max(
        i_scale, 1e-30
    )
    if drift > 2.0 * steady_tol:
        raise ProbeError(
            f"no spectral steady state at {inj.f_hz} Hz within "
            f"{inj.settle_s + inj.window_s} s (drift {drift:.3g})"
        )
    return ProbeResult(
        f_hz=inj.f_hz,
        channel=inj.channel,
        v1=vp_b,
        v2c=np.conj(vn_b),
        i1=ip_b,
        i2c=np.conj(in_b),
    )
