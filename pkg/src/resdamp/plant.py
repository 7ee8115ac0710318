"""Plant-side models: converter parameters, grid equivalent, and the
reference grey-box admittance.

The grid-side converter is modelled as an averaged dq-frame system: a
synchronous-reference-frame PLL, inner current PI control with
cross-coupling decoupling, a DC-bus voltage outer loop driving the d-axis
current reference, a reactive-support droop driving the q-axis reference,
and a connection inductance with a shunt RC damping filter at the
terminal.  The machine-side converter is reduced to a constant-power
injection onto the DC capacitor (its torque/current loops are far slower
than the band analysed here); the machine-side gains are stored for
completeness but unused.

Two kinds of frequency-domain objects are produced:

* ``reference_admittance`` — the analytic two-channel coupled admittance
  of the converter, used as the oracle that black-box terminal sweeps are
  checked against.
* ``grid_impedance_pair`` — the grid-side impedance seen by each spectral
  channel; channel 2 operators are evaluated at ``s - 2j*w1``.

Sign convention: admittances are positive for passive loads, i.e.
``Y = d(i_into_device)/d(v_terminal)``.  The closed-loop characteristic of
the source-fed system is then ``1 + Z_grid * Y_device``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from math import sqrt

import numpy as np
from scipy import optimize

from .freqcore import (
    FrequencyGrid,
    FrequencyResponse,
    MimoAdmittance,
    shift_s2,
)

__all__ = [
    "PlantParams",
    "GridParams",
    "ControllerParams",
    "SealedController",
    "OperatingPoint",
    "DeviceLinearization",
    "InfeasibleOperatingPoint",
    "seal",
    "grid_impedance_pair",
    "device_equilibrium",
    "linearize_device",
    "coupled_from_dq",
    "reference_admittance",
    "closed_loop_matrix",
    "connected_equilibrium",
    "solve_source_voltage",
]

TWO_PI = 2.0 * np.pi


class InfeasibleOperatingPoint(RuntimeError):
    """No steady state exists for the requested power flow / voltage."""


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantParams:
    """Physical constants of the aggregated turbine + converter unit.

    Voltages are line-to-line RMS in kV, power in MVA.  Internally all
    computation is in SI peak (amplitude-invariant dq) quantities.
    """

    u1_kv: float = 0.69
    s_mva: float = 1.632
    u_dc_kv: float = 1.2
    f1_hz: float = 50.0
    c_dc_f: float = 0.15
    l_c_h: float = 1.5e-4
    r_f_ohm: float = 0.02
    c_f_f: float = 5.0e-4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0.0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def omega1(self) -> float:
        return TWO_PI * self.f1_hz

    @property
    def v_phase_peak(self) -> float:
        """Nominal phase-voltage amplitude (V): sqrt(2/3) * U_ll."""
        return sqrt(2.0 / 3.0) * self.u1_kv * 1e3

    @property
    def i_phase_peak(self) -> float:
        """Rated phase-current amplitude (A) at rated apparent power."""
        return 2.0 * self.s_mva * 1e6 / (3.0 * self.v_phase_peak)

    @property
    def u_dc_v(self) -> float:
        return self.u_dc_kv * 1e3

    @property
    def p_rated_w(self) -> float:
        return self.s_mva * 1e6

    @property
    def z_base(self) -> float:
        return (self.u1_kv * 1e3) ** 2 / (self.s_mva * 1e6)


@dataclass(frozen=True)
class GridParams:
    """Thevenin equivalent of the receiving grid: series R-L behind an
    ideal source, uniformly scalable to emulate strength changes."""

    r_grid: float = 0.012
    l_grid: float = 0.25 / (TWO_PI * 50.0)
    f1_hz: float = 50.0
    scale: float = 1.0

    def __post_init__(self):
        if self.r_grid <= 0 or self.l_grid <= 0:
            raise ValueError("grid R and L must be positive")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.f1_hz <= 0:
            raise ValueError("f1_hz must be positive")

    @property
    def omega1(self) -> float:
        return TWO_PI * self.f1_hz

    @property
    def r_eff(self) -> float:
        return self.scale * self.r_grid

    @property
    def l_eff(self) -> float:
        return self.scale * self.l_grid

    def impedance(self, s) -> complex:
        """Scaled series impedance at complex frequency s."""
        return self.scale * (self.r_grid + s * self.l_grid)

    def with_scale(self, scale: float) -> "GridParams":
        return GridParams(self.r_grid, self.l_grid, self.f1_hz, scale)


@dataclass(frozen=True)
class ControllerParams:
    """Converter control constants.

    ``k_mp``, ``k_mi``, ``k_mrd`` belong to the machine-side torque/current
    loops; they are accepted and stored but the machine side is reduced to
    a constant-power DC injection, so they do not enter the dynamics.
    Implementation constants of the inner control structure:

    * ``k_qv`` (A per V) and ``tau_vm`` (s) — reactive-support droop
      ``i_q_ref = k_qv * (|v|_filtered - V_nom)`` with a second-order
      low-pass on the magnitude, negative feedback that raises capacitive
      output when the terminal voltage sags.
    * ``tau_pll`` (s) — low-pass on the synchronization input; the PLL
      only needs sub-hundred-hertz content, and the roll-off stops its
      operating-current rotation from undamping the grid-inductance /
      shunt-filter resonance a few hundred hertz up.
    * ``g_vd`` (S) and ``tau_w`` (s) — washout-filtered virtual
      conductance: the current reference absorbs ``g_vd * (v - <v>)``,
      which damps oscillatory terminal-voltage content without shifting
      the operating point.
    * ``k_dw`` (A*s/rad) — synchronization damping: the d-axis reference
      receives the PLL frequency deviation, so active power opposes the
      angle swing that weak grids leave underdamped — the converter
      analogue of a damper winding.  May be of either sign; zero
      disables it.
    """

    k_pp: float = 0.29
    k_pi: float = 14.0
    k_p: float = 0.25
    k_i: float = 355.0
    k_rd: float = 0.0471
    k_dcp: float = 0.5
    k_dci: float = 5.0
    k_mp: float = 0.8
    k_mi: float = 50.0
    k_mrd: float = 0.2561
    k_qv: float = 16.0
    tau_vm: float = 0.05
    tau_pll: float = 1.0e-3
    g_vd: float = 0.0
    tau_w: float = 0.02
    k_dw: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "k_dw":
                continue  # signed damping feed
            if f.name in ("k_qv", "g_vd"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive")

    def fingerprint(self) -> str:
        """Stable hash of the full constant set (hex digest)."""
        parts = ",".join(
            f"{f.name}={float(getattr(self, f.name))!r}" for f in fields(self)
        )
        return hashlib.sha256(parts.encode()).hexdigest()


# module-private capability token: only code inside this package that
# imports the token can open a SealedController.
_SEAL_TOKEN = object()


class SealedController:
    """Opaque wrapper around :class:`ControllerParams`.

    Emulates the vendor black box: consumers can identify the constant
    set by fingerprint and hand it to the simulator, but cannot read the
    gains.  Package-internal device implementations unseal it with the
    module-private capability token.
    """

    __slots__ = ("__params", "_fp")

    def __init__(self, params: ControllerParams):
        if not isinstance(params, ControllerParams):
            raise TypeError("SealedController wraps ControllerParams")
        self.__params = params
        self._fp = params.fingerprint()

    @property
    def fingerprint(self) -> str:
        return self._fp

    def reveal(self, token) -> ControllerParams:
        if token is not _SEAL_TOKEN:
            raise PermissionError("sealed controller: constants are not readable")
        return self.__params

    def __repr__(self) -> str:  # never leak gain values
        return f"SealedController(fingerprint={self._fp[:12]}...)"

    def __eq__(self, other):
        return isinstance(other, SealedController) and other._fp == self._fp

    def __hash__(self):
        return hash(self._fp)


def seal(params: ControllerParams) -> SealedController:
    return SealedController(params)


def _unwrap_controller(ctl) -> ControllerParams:
    if isinstance(ctl, SealedController):
        return ctl.reveal(_SEAL_TOKEN)
    if isinstance(ctl, ControllerParams):
        return ctl
    raise TypeError("expected ControllerParams or SealedController")


@dataclass(frozen=True)
class OperatingPoint:
    """Steady operating condition the small-signal model is taken at."""

    p_mw: float = 1.632
    v_pcc_pu: float = 1.0

    def __post_init__(self):
        if self.p_mw <= 0:
            raise ValueError("p_mw must be positive")
        if not 0.2 <= self.v_pcc_pu <= 1.5:
            raise ValueError("v_pcc_pu out of plausible range [0.2, 1.5]")


# ---------------------------------------------------------------------------
# grid impedance pair
# ---------------------------------------------------------------------------


def grid_impedance_pair(
    g: GridParams, grid: FrequencyGrid
) -> tuple[FrequencyResponse, FrequencyResponse]:
    """Impedance seen by each spectral channel on the given grid.

    Channel 1 is the direct component at f; channel 2 is the conjugated
    component at the coupled frequency, so its (real-coefficient) operator
    is evaluated at ``s2 = s - 2j*w1``.
    """
    s = grid.s
    w1 = g.omega1
    z1 = np.array([g.impedance(si) for si in s])
    z2 = np.array([g.impedance(shift_s2(si, w1)) for si in s])
    return FrequencyResponse(grid, z1), FrequencyResponse(grid, z2)


# ---------------------------------------------------------------------------
# nonlinear dq-frame device model
# ---------------------------------------------------------------------------

# state vector layout (16 real states)
STATE_NAMES = (
    "i_cd",      # converter inductor current, d (A)
    "i_cq",      # converter inductor current, q (A)
    "v_fd",      # damping-filter capacitor voltage, d (V)
    "v_fq",      # damping-filter capacitor voltage, q (V)
    "u_dc",      # DC-bus voltage (V)
    "delta",     # PLL angle relative to the system frame (rad)
    "phi_pll",   # PLL integrator state (V*s)
    "gam_d",     # current-PI integrator, d (A*s)
    "gam_q",     # current-PI integrator, q (A*s)
    "phi_dc",    # DC-loop integrator state (V*s)
    "vm_f1",     # droop voltage-magnitude filter, first stage (V)
    "vm_f2",     # droop voltage-magnitude filter, second stage (V)
    "pv_d",      # low-passed synchronization voltage, d (V, PLL frame)
    "pv_q",      # low-passed synchronization voltage, q (V, PLL frame)
    "w_d",       # virtual-conductance washout state, d (V, PLL frame)
    "w_q",       # virtual-conductance washout state, q (V, PLL frame)
)


def _device_rhs(
    x: np.ndarray,
    v_td: float,
    v_tq: float,
    pp: PlantParams,
    cp: ControllerParams,
    p_msc: float,
) -> np.ndarray:
    """Continuous-time state derivative of the averaged converter model.

    Inputs are the terminal (PCC) voltage dq components in the system
    frame; the machine side injects the constant power ``p_msc`` onto the
    DC capacitor.
    """
    w1 = pp.omega1
    v_nom = pp.v_phase_peak
    u_ref = pp.u_dc_v

    i_c = x[0] + 1j * x[1]
    v_cf = x[2] + 1j * x[3]
    u_dc = x[4]
    delta = x[5]
    phi_pll = x[6]
    gam = x[7] + 1j * x[8]
    phi_dc = x[9]
    vm_f1 = x[10]
    vm_f2 = x[11]
    pv = x[12] + 1j * x[13]
    w = x[14] + 1j * x[15]
    v_t = v_td + 1j * v_tq

    # PLL: low-pass the own-frame projection, drive its q part to zero
    rot = np.exp(-1j * delta)
    vp = v_t * rot
    ip = i_c * rot
    d_pv = (vp - pv) / cp.tau_pll
    eps = pv.imag
    d_delta = cp.k_pp * eps + cp.k_pi * phi_pll
    d_phi_pll = eps

    # outer loops: DC-bus regulation -> id ref, voltage droop -> iq ref
    # (droop magnitude is filtered twice so it carries no high-frequency
    # content into the current reference)
    tau_h = 0.5 * cp.tau_vm
    d_vm1 = (abs(v_t) - vm_f1) / tau_h
    d_vm2 = (vm_f1 - vm_f2) / tau_h
    id_ref = cp.k_dcp * (u_dc - u_ref) + cp.k_dci * phi_dc + cp.k_dw * d_delta
    d_phi_dc = u_dc - u_ref
    iq_ref = cp.k_qv * (vm_f2 - v_nom)

    # washout-filtered virtual conductance: absorb the oscillatory part
    # of the terminal voltage (PLL frame)
    d_w = (vp - w) / cp.tau_w
    i_ref = (id_ref + 1j * iq_ref) - cp.g_vd * (vp - w)

    # inner current PI with decoupling and voltage feed-forward (PLL frame)
    err = i_ref - ip
    d_gam = err
    v_ref_p = vp + 1j * cp.k_rd * ip + cp.k_p * err + cp.k_i * gam
    v_conv = v_ref_p * np.exp(1j * delta)

    # electrical side (system dq frame)
    i_f = (v_t - v_cf) / pp.r_f_ohm
    d_i_c = (v_conv - v_t) / pp.l_c_h - 1j * w1 * i_c
    d_v_cf = i_f / pp.c_f_f - 1j * w1 * v_cf

    # DC bus energy balance (averaged, lossless conversion)
    p_conv = 1.5 * (v_conv * np.conj(i_c)).real
    d_u = (p_msc - p_conv) / (pp.c_dc_f * u_dc)

    return np.array(
        [
            d_i_c.real,
            d_i_c.imag,
            d_v_cf.real,
            d_v_cf.imag,
            d_u,
            d_delta,
            d_phi_pll,
            d_gam.real,
            d_gam.imag,
            d_phi_dc,
            d_vm1,
            d_vm2,
            d_pv.real,
            d_pv.imag,
            d_w.real,
            d_w.imag,
        ]
    )


def _device_output(x: np.ndarray, v_td: float, v_tq: float, pp: PlantParams) -> np.ndarray:
    """Exported terminal current (into the grid), dq components."""
    i_c = x[0] + 1j * x[1]
    v_cf = x[2] + 1j * x[3]
    v_t = v_td + 1j * v_tq
    i_out = i_c - (v_t - v_cf) / pp.r_f_ohm
    return np.array([i_out.real, i_out.imag])


def device_equilibrium(
    pp: PlantParams,
    cp: ControllerParams,
    v_t0: complex,
    p_msc: float,
) -> np.ndarray:
    """Closed-form steady state of the terminal-driven converter.

    The terminal voltage phasor and machine-side power are given; every
    internal state follows analytically.  The result satisfies
    ``_device_rhs(x0, ...) == 0`` to machine precision.
    """
    w1 = pp.omega1
    v_nom = pp.v_phase_peak
    delta0 = float(np.angle(v_t0))
    rot = np.exp(-1j * delta0)
    vp0 = (v_t0 * rot).real  # |v_t0|, PLL q-component is zero
    if vp0 <= 0:
        raise InfeasibleOperatingPoint("terminal voltage must be non-zero")

    vm0 = abs(v_t0)
    iq0 = cp.k_qv * (vm0 - v_nom)
    id0 = p_msc / (1.5 * vp0)
    ip0 = id0 + 1j * iq0
    i_c0 = ip0 * np.exp(1j * delta0)

    u0 = pp.u_dc_v
    phi_dc0 = id0 / cp.k_dci
    # with feed-forward, the PI integrators hold only the inductor drop
    # not covered by the decoupling term
    gam0 = 1j * (w1 * pp.l_c_h - cp.k_rd) * ip0 / cp.k_i
    v_cf0 = v_t0 / (1.0 + 1j * w1 * pp.r_f_ohm * pp.c_f_f)

    return np.array(
        [
            i_c0.real,
            i_c0.imag,
            v_cf0.real,
            v_cf0.imag,
            u0,
            delta0,
            0.0,
            gam0.real,
            gam0.imag,
            phi_dc0,
            vm0,
            vm0,
            vp0,
            0.0,
            vp0,
            0.0,
        ]
    )


@dataclass(frozen=True)
class DeviceLinearization:
    """Small-signal state-space of the converter at one operating point.

    Input: terminal-voltage deviation (dq); output: exported-current
    deviation (dq).  The state order is ``STATE_NAMES``.
    """

    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    c: np.ndarray = field(repr=False)
    d: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)
    v_t0: complex
    p_msc: float
    meta: dict = field(default_factory=dict, repr=False)

    def transfer(self, nu: np.ndarray) -> np.ndarray:
        """dq transfer matrix C (j*nu*I - A)^-1 B + D, shape (n, 2, 2).

        ``nu`` is the dq-frame angular frequency (rad/s).
        """
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        n = self.a.shape[0]
        eye = np.eye(n)
        out = np.empty((len(nu), 2, 2), dtype=complex)
        for k, w in enumerate(nu):
            sol = np.linalg.solve(1j * w * eye - self.a, self.b)
            out[k] = self.c @ sol + self.d
        return out


# central-difference step scales per state (denominators use these
# magnitudes; the model is smooth so 1e-6 relative steps are accurate)
def _typical_scales(pp: PlantParams) -> np.ndarray:
    i_r = pp.i_phase_peak
    v_m = pp.v_phase_peak
    return np.array(
        [i_r, i_r, v_m, v_m, pp.u_dc_v, 1.0, 1.0, i_r / 100.0, i_r / 100.0,
         pp.u_dc_v / 100.0, v_m, v_m, v_m, v_m, v_m, v_m]
    )


def linearize_device(
    pp: PlantParams,
    ctl,
    op: OperatingPoint | None = None,
) -> DeviceLinearization:
    """Numerically linearize the converter about a steady operating point.

    Central differences on the analytic equilibrium; the model is smooth
    at any non-zero terminal voltage.
    """
    cp = _unwrap_controller(ctl)
    if op is None:
        op = OperatingPoint()
    v_t0 = complex(op.v_pcc_pu * pp.v_phase_peak)
    p_msc = op.p_mw * 1e6
    x0 = device_equilibrium(pp, cp, v_t0, p_msc)

    n = len(x0)
    scales = _typical_scales(pp)
    a = np.zeros((n, n))
    c = np.zeros((2, n))
    for i in range(n):
        h = 1e-6 * max(abs(x0[i]), scales[i])
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        a[:, i] = (
            _device_rhs(xp, v_t0.real, v_t0.imag, pp, cp, p_msc)
            - _device_rhs(xm, v_t0.real, v_t0.imag, pp, cp, p_msc)
        ) / (2.0 * h)
        c[:, i] = (
            _device_output(xp, v_t0.real, v_t0.imag, pp)
            - _device_output(xm, v_t0.real, v_t0.imag, pp)
        ) / (2.0 * h)

    b = np.zeros((n, 2))
    d = np.zeros((2, 2))
    hv = 1e-6 * pp.v_phase_peak
    for j, (dvd, dvq) in enumerate(((hv, 0.0), (0.0, hv))):
        b[:, j] = (
            _device_rhs(x0, v_t0.real + dvd, v_t0.imag + dvq, pp, cp, p_msc)
            - _device_rhs(x0, v_t0.real - dvd, v_t0.imag - dvq, pp, cp, p_msc)
        ) / (2.0 * hv)
        d[:, j] = (
            _device_output(x0, v_t0.real + dvd, v_t0.imag + dvq, pp)
            - _device_output(x0, v_t0.real - dvd, v_t0.imag - dvq, pp)
        ) / (2.0 * hv)

    meta = {"op": op, "state_names": STATE_NAMES}
    return DeviceLinearization(a, b, c, d, x0, v_t0, p_msc, meta)


# ---------------------------------------------------------------------------
# dq -> coupled two-channel transform
# ---------------------------------------------------------------------------


def coupled_from_dq(g_dq: np.ndarray) -> np.ndarray:
    """Map a real-coefficient 2x2 dq response to the coupled-channel form.

    ``g_dq`` has shape (n, 2, 2), each slice the dq matrix evaluated at
    dq frequency nu; the result is the 2x2 matrix linking the direct
    spectral component (channel 1) and the conjugated component at the
    coupled frequency (channel 2), evaluated at the physical frequency
    ``w = nu + w1``.  The off-diagonal entries vanish exactly when the dq
    matrix is of the symmetric form ``[[y, -z], [z, y]]``.
    """
    g = np.asarray(g_dq, dtype=complex)
    if g.ndim == 2:
        g = g[None, :, :]
    ydd = g[:, 0, 0]
    ydq = g[:, 0, 1]
    yqd = g[:, 1, 0]
    yqq = g[:, 1, 1]
    out = np.empty_like(g)
    out[:, 0, 0] = 0.5 * ((ydd + yqq) + 1j * (yqd - ydq))
    out[:, 0, 1] = 0.5 * ((ydd - yqq) + 1j * (yqd + ydq))
    out[:, 1, 0] = 0.5 * ((ydd - yqq) - 1j * (yqd + ydq))
    out[:, 1, 1] = 0.5 * ((ydd + yqq) - 1j * (yqd - ydq))
    return out


def reference_admittance(
    pp: PlantParams,
    ctl,
    grid: FrequencyGrid,
    op: OperatingPoint | None = None,
) -> MimoAdmittance:
    """Analytic coupled two-channel admittance of the converter.

    This is the white-box oracle corresponding to what a terminal
    frequency sweep measures: entry (1,1) at the probe frequency f, entry
    (2,2) for the conjugated component at 2*f1 - f, off-diagonals the
    frequency coupling contributed by the PLL and outer loops.
    """
    if op is None:
        op = OperatingPoint()
    lin = linearize_device(pp, ctl, op)
    nu = grid.omega - pp.omega1
    g = lin.transfer(nu)
    m = coupled_from_dq(-g)  # admittance sign: current into the device
    meta = {
        "op": (op.p_mw, op.v_pcc_pu),
        "provenance": "analytic",
        "f1_hz": pp.f1_hz,
    }
    return MimoAdmittance(
        grid, m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1], pp.f1_hz, meta
    )


# ---------------------------------------------------------------------------
# connected (source-fed) equilibrium and exact closed-loop poles
# ---------------------------------------------------------------------------


def connected_equilibrium(
    pp: PlantParams,
    ctl,
    gp: GridParams,
    e_source: float,
    p_msc: float,
) -> dict:
    """Steady state of the converter fed from a Thevenin source.

    Solves the power flow including the shunt filter and the reactive
    droop; raises :class:`InfeasibleOperatingPoint` when the requested
    power cannot be transmitted.  Returns terminal voltage, converter and
    branch currents, and the full device state vector.
    """
    cp = _unwrap_controller(ctl)
    w1 = pp.omega1
    v_nom = pp.v_phase_peak
    z1 = gp.impedance(1j * w1)
    y_f = (1j * w1 * pp.c_f_f) / (1.0 + 1j * w1 * pp.r_f_ohm * pp.c_f_f)

    v_scale = pp.v_phase_peak
    i_scale = pp.i_phase_peak
    p_scale = pp.p_rated_w

    # continuation in power: the load angle grows large on weak grids, so
    # ramp P from a light-load seed instead of solving cold at full power
    def solve_once(p_val, z_seed):
        def res_p(z):
            v = z[0] + 1j * z[1]
            i_c = z[2] + 1j * z[3]
            i_out = i_c - y_f * v
            kvl = v - e_source - z1 * i_out
            p_res = 1.5 * (v * np.conj(i_c)).real - p_val
            iq_pll = (i_c * np.exp(-1j * np.angle(v))).imag
            droop = iq_pll - cp.k_qv * (abs(v) - v_nom)
            return [
                kvl.real / v_scale,
                kvl.imag / v_scale,
                p_res / p_scale,
                droop / i_scale,
            ]

        out, info, ier, msg = optimize.fsolve(
            res_p, z_seed, full_output=True, xtol=1e-13
        )
        good = ier == 1 and np.max(np.abs(res_p(out))) <= 1e-8
        return out, good, msg

    z = np.array([e_source, 0.0, 0.05 * p_msc / (1.5 * e_source), 0.0])
    sol, good, msg = None, False, ""
    for frac in (0.05, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0):
        sol, good, msg = solve_once(frac * p_msc, z)
        if not good:
            break
        z = sol
    if not good:
        raise InfeasibleOperatingPoint(
            f"no steady state at E={e_source:.1f} V, P={p_msc/1e6:.3f} MW, "
            f"scale={gp.scale:g} ({msg.strip()})"
        )
    v_t0 = complex(sol[0] + 1j * sol[1])
    i_c0 = complex(sol[2] + 1j * sol[3])
    i_out0 = i_c0 - y_f * v_t0
    x0 = device_equilibrium(pp, cp, v_t0, p_msc)
    # replace the analytic i_c with the solved one (they agree; keep exact)
    x0[0], x0[1] = i_c0.real, i_c0.imag
    return {
        "v_t0": v_t0,
        "i_c0": i_c0,
        "i_out0": i_out0,
        "x0": x0,
        "e_source": e_source,
        "p_msc": p_msc,
    }


def solve_source_voltage(
    pp: PlantParams,
    ctl,
    gp: GridParams,
    v_target: float,
    p_msc: float,
) -> float:
    """Source EMF magnitude that places the terminal at ``v_target`` (V peak).

    Deterministic one-dimensional solve; raises
    :class:`InfeasibleOperatingPoint` when no source value achieves the
    target.
    """

    def f(e):
        try:
            eq = connected_equilibrium(pp, ctl, gp, float(e), p_msc)
        except InfeasibleOperatingPoint:
            return np.nan
        return abs(eq["v_t0"]) - v_target

    lo, hi = 0.6 * v_target, 1.6 * v_target
    flo, fhi = f(lo), f(hi)
    tries = 0
    while (np.isnan(flo) or flo > 0) and tries < 32:
        lo *= 1.06 if np.isnan(flo) else 0.85
        flo = f(lo)
        tries += 1
    tries = 0
    while (np.isnan(fhi) or fhi < 0) and tries < 32:
        hi *= 0.95 if np.isnan(fhi) else 1.2
        fhi = f(hi)
        tries += 1
    if np.isnan(flo) or np.isnan(fhi) or flo > 0 or fhi < 0:
        raise InfeasibleOperatingPoint(
            f"cannot bracket a source voltage for |v|={v_target:.1f} V, "
            f"P={p_msc/1e6:.3f} MW, scale={gp.scale:g}"
        )
    e = optimize.brentq(f, lo, hi, xtol=1e-9 * v_target, rtol=1e-14)
    return float(e)


_OMEGA_BLOCK = np.array([[0.0, 1.0], [-1.0, 0.0]])


def closed_loop_matrix(
    lin: DeviceLinearization,
    gp: GridParams,
) -> np.ndarray:
    """State matrix of the source-fed loop: device + grid branch (dq).

    The terminal voltage is eliminated through the device feed-through
    (the shunt filter makes D invertible).  Eigenvalues are the exact
    small-signal poles; a conjugate dq mode pair ``sigma +/- j*nu`` maps
    to the physical mirror frequencies ``f1 +/- nu/2pi`` with growth rate
    ``sigma``.
    """
    a, b, c, d = lin.a, lin.b, lin.c, lin.d
    r_e, l_e = gp.r_eff, gp.l_eff
    w1 = gp.omega1
    d_inv = np.linalg.inv(d)
    n = a.shape[0]
    acl = np.zeros((n + 2, n + 2))
    acl[:n, :n] = a - b @ d_inv @ c
    acl[:n, n:] = b @ d_inv
    acl[n:, :n] = -(d_inv @ c) / l_e
    acl[n:, n:] = d_inv / l_e - (r_e / l_e) * np.eye(2) + w1 * _OMEGA_BLOCK
    return acl
