"""Supplementary resonance damping: detection, tuning, and application.

A converter that measures a growing non-fundamental component in its
terminal current can damp it by presenting a virtual series branch
k * (R_grid + j*omega_r*L_grid) to every frequency except the
fundamental, which a notch filter removes from the fed-back current.
This module covers the whole loop:

* the notch filter (continuous response, discrete biquad, streaming),
* the virtual-impedance voltage correction,
* margin-driven sizing of k against device/grid admittance data,
* frequency-domain predictions of the reshaped loop (both spectral
  channels, so pole analysis of the coupled system stays honest),
* a windowed resonance estimator for terminal current samples,
* the supervision state machine (monitoring, pending, active,
  deactivating, blocked under low voltage) and a per-sample runtime.

Everything here works on terminal measurements and externally supplied
admittance data; nothing reaches into the converter's control internals.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .freqcore import FrequencyResponse
from .stability import bode_verdict

__all__ = [
    "K_MAX",
    "DEN_TOL",
    "DRIFT_HZ",
    "DRIFT_HOLD_S",
    "Mode",
    "ArdcConfig",
    "ArdcState",
    "ResonanceEstimate",
    "Biquad",
    "BiquadChannel",
    "TuneResult",
    "OmegaRSelection",
    "ReshapeResult",
    "ArdcRuntime",
    "notch_response",
    "notch_discretize",
    "biquad_response",
    "compensate",
    "tune_k",
    "select_omega_r",
    "reshape_predictions",
    "reshaped_grid_pair",
    "estimate_resonance",
    "step_state_machine",
    "recheck_verdict",
    "write_ardc_log",
]

#: upper clamp on the virtual-impedance fraction: k -> 1 would cancel
#: the entire device admittance and leave no margin for model error
K_MAX = 0.95

#: reshape denominators with magnitude at or below this are flagged
DEN_TOL = 1e-9

#: resonance-frequency drift (Hz) that, sustained, re-targets the branch
DRIFT_HZ = 3.0

#: how long (s) the drift must persist before omega_r is updated
DRIFT_HOLD_S = 0.1

_EPS_T = 1e-12


class Mode(str, Enum):
    """Supervision state of the damping loop."""

    MONITORING = "monitoring"
    PENDING = "pending"
    ACTIVE = "active"
    DEACTIVATING = "deactivating"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class ArdcConfig:
    """Damping-loop constants.

    The virtual branch is a fixed fraction ``k`` of the grid Thevenin
    branch, so its R/X angle matches the grid's at every frequency by
    construction (``r_v``/``l_v`` are derived, never stored).
    """

    g0: float = 1.0
    xi: float = 0.01
    omega0: float = 2.0 * math.pi * 50.0
    k: float = 0.0
    m: float = 1.4
    omega_r: float = 0.0
    r_grid: float = 0.0
    l_grid: float = 0.0
    r_th: float = 0.03
    t_s: float = 0.150
    block_voltage_pu: float = 0.8

    def __post_init__(self):
        if self.g0 <= 0.0:
            raise ValueError("notch dc gain g0 must be positive")
        if self.xi <= 0.0:
            raise ValueError("notch damping xi must be positive")
        if self.omega0 <= 0.0:
            raise ValueError("notch center omega0 must be positive")
        if not 0.0 <= self.k < 1.0:
            raise ValueError("virtual-impedance fraction k must be in [0, 1)")
        if self.m <= 1.0:
            raise ValueError("target margin m must exceed 1")
        if self.omega_r < 0.0:
            raise ValueError("resonance frequency omega_r must be >= 0")
        if self.r_grid < 0.0 or self.l_grid < 0.0:
            raise ValueError("grid branch parameters must be >= 0")
        if self.r_th <= 0.0:
            raise ValueError("detection threshold r_th must be positive")
        if self.t_s <= 0.0:
            raise ValueError("activation delay t_s must be positive")
        if not 0.0 < self.block_voltage_pu < 1.0:
            raise ValueError("blocking threshold must be in (0, 1) pu")

    @property
    def r_v(self) -> float:
        """Virtual resistance: k * R_grid."""
        return self.k * self.r_grid

    @property
    def l_v(self) -> float:
        """Virtual inductance: k * L_grid."""
        return self.k * self.l_grid


@dataclass(frozen=True)
class ResonanceEstimate:
    """One windowed estimate of the dominant non-fundamental component."""

    f_r: float
    a_r: float
    a0: float
    r: float
    timestamp: float


@dataclass(frozen=True)
class ArdcState:
    """Immutable supervision state; stepped once per analysis tick."""

    mode: Mode = Mode.MONITORING
    estimate: ResonanceEstimate | None = None
    pending_elapsed: float = 0.0
    omega_r: float = 0.0
    drift_elapsed: float = 0.0
    t: float = 0.0

    @classmethod
    def initial(cls, cfg: ArdcConfig) -> "ArdcState":
        return cls(mode=Mode.MONITORING, omega_r=cfg.omega_r)

    def replace(self, **changes) -> "ArdcState":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# notch filter
# ---------------------------------------------------------------------------


def notch_response(cfg: ArdcConfig, s):
    """Continuous notch response g0*(s^2+w0^2)/(s^2+2*xi*w0*s+w0^2).

    Unity (times g0) far from the center, exactly zero at s = j*w0.
    Accepts a scalar or an array of complex frequencies.
    """
    s = np.asarray(s, dtype=complex)
    w0 = cfg.omega0
    h = cfg.g0 * (s * s + w0 * w0) / (s * s + 2.0 * cfg.xi * w0 * s + w0 * w0)
    if h.ndim == 0:
        return complex(h)
    return h


@dataclass(frozen=True)
class Biquad:
    """Second-order section y[n] normalized to a monic denominator."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float


def notch_discretize(cfg: ArdcConfig, dt: float) -> Biquad:
    """Bilinear discretization of the notch, frequency-matched at w0.

    Pre-warping places the discrete zero pair exactly on the unit circle
    at the fundamental's digital frequency, so a steady w0 component is
    rejected completely rather than merely attenuated.  Steps above
    100 us put the fundamental too close to Nyquist-warping territory
    for the controller loops this feeds and are rejected.
    """
    if dt <= 0.0:
        raise ValueError("sample step must be positive")
    if dt > 100e-6:
        raise ValueError("sample step above 100 us is too coarse for the notch")
    w0 = cfg.omega0
    xi = cfg.xi
    kb = w0 / math.tan(0.5 * w0 * dt)
    k2 = kb * kb
    w2 = w0 * w0
    a0 = k2 + 2.0 * xi * w0 * kb + w2
    b0 = cfg.g0 * (k2 + w2) / a0
    b1 = 2.0 * cfg.g0 * (w2 - k2) / a0
    a1 = 2.0 * (w2 - k2) / a0
    a2 = (k2 - 2.0 * xi * w0 * kb + w2) / a0
    return Biquad(b0=b0, b1=b1, b2=b0, a1=a1, a2=a2)


def biquad_response(bq: Biquad, f_hz: float, dt: float) -> complex:
    """Frequency response of a biquad at f_hz for sample step dt."""
    zi = np.exp(-2j * math.pi * f_hz * dt)
    num = bq.b0 + zi * (bq.b1 + zi * bq.b2)
    den = 1.0 + zi * (bq.a1 + zi * bq.a2)
    return complex(num / den)


class BiquadChannel:
    """Streaming direct-form-II-transposed evaluation of one biquad."""

    __slots__ = ("bq", "_z1", "_z2")

    def __init__(self, bq: Biquad):
        self.bq = bq
        self._z1 = 0.0
        self._z2 = 0.0

    def step(self, x: float) -> float:
        b = self.bq
        y = b.b0 * x + self._z1
        self._z1 = b.b1 * x - b.a1 * y + self._z2
        self._z2 = b.b2 * x - b.a2 * y
        return y

    def reset(self) -> None:
        self._z1 = 0.0
        self._z2 = 0.0

    def preload(self, x_phasor: complex, omega: float, dt: float) -> None:
        """Set the delay states to their steady response for a sinusoid.

        The upcoming input is ``x[n] = Re(x_phasor * exp(1j*omega*n*dt))``
        with ``n = 0`` the next sample fed to :meth:`step`.  Preloading
        removes the filter's own start-up transient, so a stream that is
        already in sinusoidal steady state produces the steady output from
        the very first sample.
        """
        b = self.bq
        z0 = np.exp(1j * omega * dt)
        h = (b.b0 + b.b1 / z0 + b.b2 / z0**2) / (1.0 + b.a1 / z0 + b.a2 / z0**2)
        y_ph = h * x_phasor
        z1_ph = y_ph - b.b0 * x_phasor
        z2_ph = z1_ph * z0 - b.b1 * x_phasor + b.a1 * y_ph
        self._z1 = z1_ph.real
        self._z2 = z2_ph.real


# ---------------------------------------------------------------------------
# virtual-impedance correction
# ---------------------------------------------------------------------------


def compensate(v_ab, i_ab_notched, cfg: ArdcConfig, omega_r: float | None = None):
    """Subtract the virtual branch's voltage drop from a voltage sample.

    In stationary alpha/beta coordinates the branch R_v + j*w_r*L_v acts
    on the notched current as the rotation-scaling matrix
    [[-R_v, w_r*L_v], [-w_r*L_v, -R_v]] added to the voltage, i.e. the
    drop across the branch is removed from what the control later sees.
    ``omega_r`` overrides the configured value (the runtime passes the
    frozen estimate).
    """
    w_r = cfg.omega_r if omega_r is None else float(omega_r)
    r_v = cfg.r_v
    x_v = w_r * cfg.l_v
    ia = float(i_ab_notched[0])
    ib = float(i_ab_notched[1])
    return np.array(
        [
            float(v_ab[0]) - r_v * ia + x_v * ib,
            float(v_ab[1]) - x_v * ia - r_v * ib,
        ]
    )


# ---------------------------------------------------------------------------
# margin-driven tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TuneResult:
    """Sizing of the virtual-impedance fraction for a margin target."""

    k: float
    reshaping_needed: bool
    clamped: bool


def tune_k(y_dev, y_grid, m: float) -> TuneResult:
    """Fraction k so the reduced device magnitude meets margin m.

    At the critical frequency the damped loop presents (1-k)*|Y_device|
    against |Y_grid|; solving (1-k)*|Y_device|*m = |Y_grid| gives k.
    Inputs may be complex (their magnitudes are used).  A non-positive
    solution means the margin is already met (k = 0, no reshaping);
    solutions above K_MAX are clamped and flagged.
    """
    if m <= 1.0:
        raise ValueError("margin target m must exceed 1")
    mag_dev = abs(complex(y_dev))
    mag_grid = abs(complex(y_grid))
    if mag_dev <= 0.0:
        raise ValueError("device admittance magnitude must be positive")
    k_raw = 1.0 - mag_grid / (m * mag_dev)
    if k_raw <= 0.0:
        return TuneResult(k=0.0, reshaping_needed=False, clamped=False)
    if k_raw > K_MAX:
        return TuneResult(k=K_MAX, reshaping_needed=True, clamped=True)
    return TuneResult(k=float(k_raw), reshaping_needed=True, clamped=False)


@dataclass(frozen=True)
class OmegaRSelection:
    """Where the virtual branch should be targeted, and why."""

    omega_r: float
    f_hz: float
    margin: float
    from_crossing: bool


def select_omega_r(
    y_dev: FrequencyResponse, y_grid: FrequencyResponse
) -> OmegaRSelection:
    """Pick the frequency the damping must defend.

    The branch targets the worst 180-degree phase-opposition crossing
    (largest |Y_device|/|Y_grid|), where the magnitude comparison
    actually decides stability.  Without any crossing there is nothing
    critical; the global minimum of |Y_grid|/|Y_device| is returned as a
    conservative fallback so a caller can still size a branch.
    """
    assessment = bode_verdict(y_dev, y_grid)
    if assessment.crossings:
        worst = assessment.critical
        return OmegaRSelection(
            omega_r=2.0 * math.pi * worst.f_hz,
            f_hz=worst.f_hz,
            margin=worst.margin,
            from_crossing=True,
        )
    ratio = y_grid.magnitude() / y_dev.magnitude()
    i_min = int(np.argmin(ratio))
    f_min = float(y_dev.f_hz[i_min])
    return OmegaRSelection(
        omega_r=2.0 * math.pi * f_min,
        f_hz=f_min,
        margin=float(ratio[i_min]),
        from_crossing=False,
    )


# ---------------------------------------------------------------------------
# reshaped-loop predictions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReshapeResult:
    """Frequency-domain views of the loop with the branch engaged."""

    z_grid_re: FrequencyResponse
    y_dev_re: FrequencyResponse
    flagged: np.ndarray


def _virtual_branch(cfg: ArdcConfig) -> complex:
    return cfg.r_v + 1j * cfg.omega_r * cfg.l_v


def reshape_predictions(
    y_dev: FrequencyResponse, z_grid: FrequencyResponse, cfg: ArdcConfig
) -> ReshapeResult:
    """Two equivalent views of the engaged branch on one channel.

    The notch-gated constant branch V = R_v + j*omega_r*L_v can be read
    as grid reshaping, z - V*H(s), or as device reshaping,
    y / (1 - y*V*H(s)); both leave the closed loop identical.  Grid
    points where the device-side denominator nearly vanishes are flagged
    (the grid-side view stays usable there).
    """
    if y_dev.grid != z_grid.grid:
        raise ValueError("device and grid responses must share a grid")
    vh = _virtual_branch(cfg) * notch_response(cfg, y_dev.grid.s)
    z_re = z_grid.values - vh
    den = 1.0 - y_dev.values * vh
    flagged = np.abs(den) <= DEN_TOL
    safe = np.where(flagged, 1.0, den)
    y_re = y_dev.values / safe
    return ReshapeResult(
        z_grid_re=FrequencyResponse(y_dev.grid, z_re),
        y_dev_re=FrequencyResponse(y_dev.grid, y_re),
        flagged=flagged,
    )


def reshaped_grid_pair(
    z1: FrequencyResponse, z2: FrequencyResponse, cfg: ArdcConfig
) -> tuple[FrequencyResponse, FrequencyResponse]:
    """Grid impedance both spectral channels see with the branch engaged.

    The direct channel gains -V*H(s); the coupled channel, being the
    conjugated response at the mirror frequency, gains the conjugate
    branch through the mirror-shifted notch -conj(V)*H(s - 2j*w0).
    Feeding these into the folded single-channel loop keeps the coupled
    system's poles exact, which a single-channel reshape alone does not.
    """
    if z1.grid != z2.grid:
        raise ValueError("channel impedances must share a grid")
    v = _virtual_branch(cfg)
    s = z1.grid.s
    h1 = notch_response(cfg, s)
    h2 = notch_response(cfg, s - 2j * cfg.omega0)
    return (
        FrequencyResponse(z1.grid, z1.values - v * h1),
        FrequencyResponse(z2.grid, z2.values - np.conj(v) * h2),
    )


# ---------------------------------------------------------------------------
# resonance estimation
# ---------------------------------------------------------------------------

_MIN_WINDOW_S = 0.1
_ZOOM_POINTS = 41


def estimate_resonance(
    window,
    f1_hz: float,
    fs_hz: float,
    *,
    timestamp: float = 0.0,
    guard_hz: float = 5.0,
    band_hz: tuple = (5.0, 150.0),
) -> ResonanceEstimate:
    """Dominant non-fundamental component of one current window.

    The fundamental (and any offset) is removed by least squares at the
    known frequency, the residual is Hann-windowed, and the strongest
    spectral peak inside ``band_hz`` but outside ``guard_hz`` of the
    fundamental is refined by evaluating the windowed transform on a
    fine local grid plus parabolic interpolation.  The amplitude ratio
    r = a_r / a0 is what the supervision logic thresholds.
    """
    x = np.asarray(window, dtype=float)
    n = x.size
    if n < round(_MIN_WINDOW_S * fs_hz):
        raise ValueError("analysis window must cover at least 100 ms")
    if not np.any(x):
        return ResonanceEstimate(
            f_r=float(band_hz[0]), a_r=0.0, a0=0.0, r=0.0, timestamp=timestamp
        )
    t = np.arange(n) / fs_hz
    wt = 2.0 * math.pi * f1_hz * t
    basis = np.stack([np.cos(wt), np.sin(wt), np.ones(n)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    a0 = float(np.hypot(coef[0], coef[1]))
    resid = x - basis @ coef

    w = np.hanning(n)
    wsum = float(w.sum())
    xw = resid * w
    spec = np.abs(np.fft.rfft(xw))
    freqs = np.fft.rfftfreq(n, d=1.0 / fs_hz)
    valid = (
        (freqs >= band_hz[0])
        & (freqs <= band_hz[1])
        & (np.abs(freqs - f1_hz) > guard_hz)
    )
    if not np.any(valid):
        raise ValueError("no spectral bin inside the search band")
    spec = np.where(valid, spec, 0.0)
    i0 = int(np.argmax(spec))
    if spec[i0] == 0.0:
        return ResonanceEstimate(
            f_r=float(band_hz[0]), a_r=0.0, a0=a0, r=0.0, timestamp=timestamp
        )

    # local refinement: windowed transform on a fine grid around the
    # coarse bin, then a parabola through the best three points
    bin_w = fs_hz / n
    cand = np.linspace(freqs[i0] - bin_w, freqs[i0] + bin_w, _ZOOM_POINTS)
    keep = (
        (cand >= band_hz[0])
        & (cand <= band_hz[1])
        & (np.abs(cand - f1_hz) > guard_hz)
    )
    cand = cand[keep]
    kernel = np.exp(-2j * math.pi * np.outer(t, cand))
    mags = np.abs(xw @ kernel)
    j = int(np.argmax(mags))
    f_r = float(cand[j])
    if 0 < j < len(cand) - 1:
        m1, m2, m3 = mags[j - 1], mags[j], mags[j + 1]
        curv = m1 - 2.0 * m2 + m3
        if curv < 0.0:
            shift = 0.5 * (m1 - m3) / curv
            shift = min(1.0, max(-1.0, shift))
            f_r = float(cand[j] + shift * (cand[1] - cand[0]))
    a_r = 2.0 * float(np.abs(xw @ np.exp(-2j * math.pi * f_r * t))) / wsum
    if a0 > 0.0:
        r = a_r / a0
    else:
        r = math.inf if a_r > 0.0 else 0.0
    return ResonanceEstimate(
        f_r=f_r, a_r=a_r, a0=a0, r=float(r), timestamp=timestamp
    )


# ---------------------------------------------------------------------------
# supervision state machine
# ---------------------------------------------------------------------------


def step_state_machine(
    state: ArdcState,
    est: ResonanceEstimate,
    pcc_voltage_pu: float,
    cfg: ArdcConfig,
    dt_tick: float = 0.005,
    stability_recheck: str | None = None,
) -> ArdcState:
    """Advance the supervision state by one analysis tick.

    Low terminal voltage blocks from every mode (fault ride-through owns
    the converter then).  Detection must persist for ``cfg.t_s`` before
    the branch engages, the branch frequency freezes at engagement and
    only re-targets after a sustained drift, and an externally supplied
    "stable" recheck verdict retires the branch through a deactivating
    tick.
    """
    t = state.t + dt_tick
    if pcc_voltage_pu < cfg.block_voltage_pu:
        return state.replace(
            mode=Mode.BLOCKED, estimate=est, pending_elapsed=0.0,
            drift_elapsed=0.0, t=t,
        )
    mode = state.mode
    if mode is Mode.BLOCKED:
        return state.replace(
            mode=Mode.MONITORING, estimate=est, pending_elapsed=0.0,
            drift_elapsed=0.0, t=t,
        )
    if mode is Mode.MONITORING:
        if est.r > cfg.r_th:
            return state.replace(
                mode=Mode.PENDING, estimate=est, pending_elapsed=0.0, t=t
            )
        return state.replace(estimate=est, t=t)
    if mode is Mode.PENDING:
        if est.r <= cfg.r_th:
            return state.replace(
                mode=Mode.MONITORING, estimate=est, pending_elapsed=0.0, t=t
            )
        elapsed = state.pending_elapsed + dt_tick
        if elapsed >= cfg.t_s - _EPS_T:
            return state.replace(
                mode=Mode.ACTIVE, estimate=est, pending_elapsed=0.0,
                omega_r=2.0 * math.pi * est.f_r, drift_elapsed=0.0, t=t,
            )
        return state.replace(estimate=est, pending_elapsed=elapsed, t=t)
    if mode is Mode.ACTIVE:
        if stability_recheck == "stable":
            return state.replace(
                mode=Mode.DEACTIVATING, estimate=est, drift_elapsed=0.0, t=t
            )
        w_est = 2.0 * math.pi * est.f_r
        drifted = (
            est.r > cfg.r_th
            and abs(w_est - state.omega_r) > 2.0 * math.pi * DRIFT_HZ
        )
        if drifted:
            held = state.drift_elapsed + dt_tick
            if held >= DRIFT_HOLD_S - _EPS_T:
                return state.replace(
                    estimate=est, omega_r=w_est, drift_elapsed=0.0, t=t
                )
            return state.replace(estimate=est, drift_elapsed=held, t=t)
        return state.replace(estimate=est, drift_elapsed=0.0, t=t)
    if mode is Mode.DEACTIVATING:
        return state.replace(
            mode=Mode.MONITORING, estimate=est, pending_elapsed=0.0,
            drift_elapsed=0.0, t=t,
        )
    raise ValueError(f"unknown mode: {mode!r}")


def recheck_verdict(
    y1: FrequencyResponse,
    yg1: FrequencyResponse,
    y2: FrequencyResponse,
    yg2: FrequencyResponse,
    hysteresis: float = 0.1,
) -> str:
    """Judge whether retiring the branch would be safe.

    Both spectral channels must come back clean, and every crossing must
    clear unity by the hysteresis band; deactivating on a hairline
    margin would only re-trigger detection.
    """
    a1 = bode_verdict(y1, yg1, channel=1)
    a2 = bode_verdict(y2, yg2, channel=2)
    for a in (a1, a2):
        if a.verdict in ("unstable", "marginal"):
            return "unstable"
    margins = [a.m_meas for a in (a1, a2) if a.m_meas is not None]
    if margins and min(margins) < 1.0 + hysteresis:
        return "unstable"
    return "stable"


# ---------------------------------------------------------------------------
# per-sample runtime
# ---------------------------------------------------------------------------


class ArdcRuntime:
    """Sample-by-sample damping loop around a stream of measurements.

    Feed every control-rate sample through :meth:`process_sample`; the
    return value is the voltage the downstream control should use.  The
    raw current feeds a ring buffer analyzed every ``tick_s``; the
    notched current feeds the virtual branch whenever the supervision
    state is active.  Entering the blocked state zeroes the analysis
    buffer so fault transients never masquerade as resonance.

    Estimation starts only once the buffer holds a full window of live
    samples: a partially filled window is a gated signal whose edge
    leaks broadband energy past the fundamental guard and reads as a
    large spurious component.  Keeping the activation delay longer than
    the analysis window (the defaults: 150 ms vs 100 ms) guarantees any
    edge artifact clears before it could ever engage the branch.
    """

    def __init__(
        self,
        cfg: ArdcConfig,
        dt: float,
        f1_hz: float = 50.0,
        recheck=None,
        window_s: float = 0.1,
        tick_s: float = 0.005,
    ):
        self.cfg = cfg
        self.dt = float(dt)
        self.f1_hz = float(f1_hz)
        self.recheck = recheck
        bq = notch_discretize(cfg, self.dt)
        self._ch_a = BiquadChannel(bq)
        self._ch_b = BiquadChannel(bq)
        self._fs = 1.0 / self.dt
        self._nwin = int(round(window_s / self.dt))
        self._buf = np.zeros(self._nwin)
        self._pos = 0
        self._valid = 0
        self._tick_n = max(1, int(round(tick_s / self.dt)))
        self._tick_s = self._tick_n * self.dt
        self._count = 0
        self.state = ArdcState.initial(cfg)
        self.log: list[tuple] = []
        self.last_notched = np.zeros(2)
        self.last_compensation = np.zeros(2)

    def process_sample(self, t, v_ab, i_ab, pcc_voltage_pu) -> np.ndarray:
        """Advance one sample; returns the corrected voltage pair."""
        ia = float(i_ab[0])
        ib = float(i_ab[1])
        self.last_notched[0] = self._ch_a.step(ia)
        self.last_notched[1] = self._ch_b.step(ib)
        if self.state.mode is Mode.BLOCKED:
            self._buf[self._pos] = 0.0
        else:
            self._buf[self._pos] = ia
            if self._valid < self._nwin:
                self._valid += 1
        self._pos += 1
        if self._pos == self._nwin:
            self._pos = 0
        self._count += 1
        if self._count % self._tick_n == 0:
            self._tick(float(t), float(pcc_voltage_pu))
        if self.state.mode is Mode.ACTIVE:
            out = compensate(
                v_ab, self.last_notched, self.cfg, omega_r=self.state.omega_r
            )
            self.last_compensation[0] = out[0] - float(v_ab[0])
            self.last_compensation[1] = out[1] - float(v_ab[1])
            return out
        self.last_compensation[0] = 0.0
        self.last_compensation[1] = 0.0
        return np.array([float(v_ab[0]), float(v_ab[1])])

    def preload_fundamental(self, i_phasor: complex) -> None:
        """Warm-start both notch channels on a fundamental-only current.

        ``i_phasor`` is the complex envelope of the current at the next
        sample: ``i_alpha[n] = Re(i_phasor * exp(1j*w1*n*dt))`` and
        ``i_beta[n] = Im(...)``.  Without this, switching compensation on
        while the filters still carry their own start-up transient would
        leak a decaying image of the fundamental into the virtual branch.
        """
        w1 = 2.0 * np.pi * self.f1_hz
        self._ch_a.preload(i_phasor, w1, self.dt)
        self._ch_b.preload(-1j * i_phasor, w1, self.dt)

    def _tick(self, t: float, pcc_voltage_pu: float) -> None:
        if self.state.mode is Mode.BLOCKED or self._valid < self._nwin:
            est = ResonanceEstimate(f_r=0.0, a_r=0.0, a0=0.0, r=0.0, timestamp=t)
        else:
            window = np.concatenate([self._buf[self._pos:], self._buf[: self._pos]])
            est = estimate_resonance(window, self.f1_hz, self._fs, timestamp=t)
        verdict = None
        if self.recheck is not None and self.state.mode is Mode.ACTIVE:
            verdict = self.recheck()
        was = self.state.mode
        self.state = step_state_machine(
            self.state, est, pcc_voltage_pu, self.cfg,
            dt_tick=self._tick_s, stability_recheck=verdict,
        )
        if self.state.mode is Mode.BLOCKED and was is not Mode.BLOCKED:
            self._buf[:] = 0.0
            self._valid = 0
        self.log.append((t, self.state.mode.value, est.f_r, est.r))


def write_ardc_log(path, rows) -> None:
    """Write supervision log rows as CSV: t, mode, f_r, r."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mode", "f_r", "r"])
        for t, mode, f_r, r in rows:
            writer.writerow([f"{t:.6f}", mode, f"{f_r:.6f}", f"{r:.9f}"])
