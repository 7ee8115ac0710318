"""Bode-criterion resonance assessment and closed-loop pole analysis.

The weak-grid interconnection is judged channel by channel on its
equivalent single-input loop: wherever the device and grid admittances
are in phase opposition (unwrapped phase difference of 180 degrees, any
odd multiple), the magnitude ratio decides stability.  The same data
feeds a rational fit of the closed-loop transfer function whose dominant
pole gives growth rate and damping ratio.

Pure analysis over immutable inputs; everything here is safe to call
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .freqcore import (
    FitError,
    FrequencyResponse,
    RationalTF,
    eval_tf,
    rational_fit,
    tf_poles,
)

__all__ = [
    "MARGINAL_BAND",
    "Crossing",
    "ChannelAssessment",
    "StabilityReport",
    "ClosedLoopFit",
    "MarginUndefined",
    "bode_verdict",
    "measured_margin",
    "closed_loop_tf",
    "dominant_pole_in_band",
    "assess_channels",
    "render_text_report",
    "report_csv_rows",
    "write_report_files",
    "write_bode_csv",
    "PLOT_SCRIPT",
]

#: half-width of the magnitude-ratio band treated as marginal (sweep
#: noise floor; prevents verdict flapping near ratio 1)
MARGINAL_BAND = 0.02

#: dominant-pole search extends this far above the analysis band (Hz)
BAND_EXTENSION_HZ = 20.0


class MarginUndefined(ValueError):
    """Raised when a margin is requested from a report with no crossing."""


@dataclass(frozen=True)
class Crossing:
    """One 180-degree phase-difference crossing."""

    f_hz: float
    #: |Y_device| / |Y_grid| interpolated at the crossing
    ratio: float

    @property
    def margin(self) -> float:
        """|Y_grid| / |Y_device| at this crossing."""
        return 1.0 / self.ratio


@dataclass(frozen=True)
class ChannelAssessment:
    """Bode verdict for one frequency-coupled channel."""

    channel: int
    crossings: tuple
    verdict: str  # "stable" | "unstable" | "marginal" | "stable-in-band"

    @property
    def m_meas(self):
        """Minimum |Y_grid|/|Y_device| over crossings; None if none."""
        if not self.crossings:
            return None
        return min(c.margin for c in self.crossings)

    @property
    def critical(self):
        """Crossing with the largest device/grid ratio (None if none)."""
        if not self.crossings:
            return None
        return max(self.crossings, key=lambda c: c.ratio)


@dataclass(frozen=True)
class ClosedLoopFit:
    """Fitted closed-loop transfer function and its pole summary."""

    tf: RationalTF
    poles: np.ndarray
    dominant: complex
    damping_ratio: float
    fit_max_rel_error: float


@dataclass(frozen=True)
class StabilityReport:
    """Per-channel verdicts plus an optional fitted pole estimate."""

    channels: tuple
    closed_loop: ClosedLoopFit | None = None
    meta: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        """Worst verdict across channels."""
        order = {"unstable": 3, "marginal": 2, "stable": 1, "stable-in-band": 0}
        return max((c.verdict for c in self.channels), key=order.__getitem__)

    @property
    def m_meas(self):
        vals = [c.m_meas for c in self.channels if c.m_meas is not None]
        return min(vals) if vals else None


def _interp(x, x0, x1, y0, y1):
    t = (x - x0) / (x1 - x0)
    return y0 + t * (y1 - y0)


def bode_verdict(
    y_dev: FrequencyResponse,
    y_grid: FrequencyResponse,
    channel: int = 1,
) -> ChannelAssessment:
    """Judge one channel by the 180-degree phase-difference criterion.

    Phases are unwrapped over the ordered grid; every level 180 + k*360
    degrees is scanned (the loop transfer crosses the negative real axis
    at each).  Crossing frequencies come from linear interpolation of the
    phase difference; the magnitude ratio is interpolated at that
    frequency.  Verdict: any crossing ratio above 1 + MARGINAL_BAND is
    unstable; within the band marginal; below it stable; no crossing at
    all reports "stable-in-band" with an empty critical list.
    """
    if y_dev.grid != y_grid.grid:
        raise ValueError("device and grid responses must share a grid")
    f = y_dev.f_hz
    dphi = y_dev.phase_deg(unwrap=True) - y_grid.phase_deg(unwrap=True)
    mag_dev = y_dev.magnitude()
    mag_grid = y_grid.magnitude()

    # intervals spanning a hole in the grid (e.g. the guard band around
    # the fundamental) carry no phase information; interpolating across
    # them would fabricate crossings inside the hole
    steps = np.diff(f)
    max_step = 4.0 * float(np.median(steps))

    lo, hi = float(np.min(dphi)), float(np.max(dphi))
    k_min = math.ceil((lo - 180.0) / 360.0)
    k_max = math.floor((hi - 180.0) / 360.0)
    crossings = []
    for k in range(k_min, k_max + 1):
        level = 180.0 + 360.0 * k
        resid = dphi - level
        sign_change = np.nonzero(
            (resid[:-1] * resid[1:] < 0) & (steps <= max_step)
        )[0]
        hits = list(sign_change)
        hits.extend(i for i in np.nonzero(resid == 0)[0] if i < len(f))
        for i in sorted(set(int(i) for i in hits)):
            if resid[i] == 0:
                fc, md, mg = f[i], mag_dev[i], mag_grid[i]
            else:
                fc = _interp(0.0, resid[i], resid[i + 1], f[i], f[i + 1])
                md = _interp(fc, f[i], f[i + 1], mag_dev[i], mag_dev[i + 1])
                mg = _interp(fc, f[i], f[i + 1], mag_grid[i], mag_grid[i + 1])
            crossings.append(Crossing(float(fc), float(md / mg)))
    crossings.sort(key=lambda c: c.f_hz)

    if not crossings:
        verdict = "stable-in-band"
    else:
        worst = max(c.ratio for c in crossings)
        if worst > 1.0 + MARGINAL_BAND:
            verdict = "unstable"
        elif worst >= 1.0 - MARGINAL_BAND:
            verdict = "marginal"
        else:
            verdict = "stable"
    return ChannelAssessment(channel=channel, crossings=tuple(crossings),
                             verdict=verdict)


def measured_margin(report) -> float:
    """Minimum |Y_grid|/|Y_device| over every crossing in the report.

    Accepts a StabilityReport or a single ChannelAssessment.  A report
    with no crossing has no margin (distinct from an infinite one).
    """
    channels = report.channels if isinstance(report, StabilityReport) else (report,)
    margins = [c.m_meas for c in channels if c.m_meas is not None]
    if not margins:
        raise MarginUndefined("no crossing: margin undefined")
    return min(margins)


def dominant_pole_in_band(poles: np.ndarray, f_lo: float, f_hi: float) -> complex:
    """Pole with maximum real part whose |Im|/2pi lies in [f_lo, f_hi].

    Restricting to the analysis band (plus the extension the caller
    chose) keeps far-off fast poles and slow outer-loop drift out of the
    resonance verdict.

    A frequency-coupled resonance appears as two stationary-frame poles
    with identical real parts at mirror frequencies; among real-part
    ties the sub-synchronous (lowest |Im|) member is returned so the
    choice is deterministic rather than fit-noise dependent.
    """
    p = np.asarray(poles, dtype=complex)
    fim = np.abs(p.imag) / (2.0 * math.pi)
    sel = p[(fim >= f_lo) & (fim <= f_hi)]
    if sel.size == 0:
        raise ValueError(f"no pole with |Im|/2pi in [{f_lo:g}, {f_hi:g}] Hz")
    re_max = float(sel.real.max())
    tol = 1e-6 * max(1.0, abs(re_max))
    tied = sel[sel.real >= re_max - tol]
    return complex(tied[np.argmin(np.abs(tied.imag))])


def closed_loop_tf(
    y_dev: FrequencyResponse,
    z_grid: FrequencyResponse,
    order: int = 8,
) -> ClosedLoopFit:
    """Fit the closed-loop response H = Y/(1 + Y*Z) and report poles.

    The dominant pole is selected inside [f_min, f_max + 20 Hz] of the
    data grid; its damping ratio is -Re/|pole|.  Fit failures propagate.
    """
    if y_dev.grid != z_grid.grid:
        raise ValueError("device and grid responses must share a grid")
    h = y_dev.values / (1.0 + y_dev.values * z_grid.values)
    tf, rep = rational_fit(FrequencyResponse(y_dev.grid, h), order=order)
    poles = tf_poles(tf)
    f = y_dev.f_hz
    dom = dominant_pole_in_band(poles, f[0], f[-1] + BAND_EXTENSION_HZ)
    zeta = -dom.real / abs(dom) if dom != 0 else 0.0
    return ClosedLoopFit(tf=tf, poles=poles, dominant=dom,
                         damping_ratio=float(zeta),
                         fit_max_rel_error=rep.max_rel_error)


def assess_channels(
    siso_pair,
    grid_admittance_pair,
    fit_closed_loop: bool = True,
    fit_order: int = 8,
    meta=None,
) -> StabilityReport:
    """Full two-channel assessment from folded device and grid data.

    ``siso_pair`` and ``grid_admittance_pair`` are (channel-1, channel-2)
    FrequencyResponses.  The closed-loop fit runs on channel 1 (channel 2
    mirrors it for physical devices) and is skipped on fit failure with
    the error recorded in meta.
    """
    y1, y2 = siso_pair
    g1, g2 = grid_admittance_pair
    channels = (bode_verdict(y1, g1, channel=1), bode_verdict(y2, g2, channel=2))
    info = dict(meta or {})
    cl = None
    if fit_closed_loop:
        try:
            z1 = FrequencyResponse(g1.grid, 1.0 / g1.values)
            cl = closed_loop_tf(y1, z1, order=fit_order)
        except (FitError, ValueError) as exc:
            info["closed_loop_error"] = str(exc)
    return StabilityReport(channels=channels, closed_loop=cl, meta=info)


# ---------------------------------------------------------------------------
# reporting


def render_text_report(report: StabilityReport) -> str:
    lines = ["resonance stability assessment", "=" * 34]
    for key, val in sorted(report.meta.items()):
        if key != "closed_loop_error":
            lines.append(f"{key}: {val}")
    for ch in report.channels:
        lines.append("")
        lines.append(f"channel {ch.channel}: {ch.verdict}")
        if not ch.crossings:
            lines.append("  no 180-degree crossing in band")
        for c in ch.crossings:
            lines.append(
                f"  crossing at {c.f_hz:7.2f} Hz: |Y_dev|/|Y_grid| = {c.ratio:.4f}"
                f"  (margin {c.margin:.4f})"
            )
        if ch.m_meas is not None:
            lines.append(f"  measured margin m = {ch.m_meas:.4f}")
    lines.append("")
    lines.append(f"overall verdict: {report.verdict}")
    if report.m_meas is not None:
        lines.append(f"overall measured margin: {report.m_meas:.4f}")
    if report.closed_loop is not None:
        d = report.closed_loop.dominant
        lines.append(
            f"dominant pole (fit): {d.real:+.3f} {d.imag:+.3f}j rad/s"
            f"  ({abs(d.imag) / (2 * math.pi):.2f} Hz),"
            f" damping ratio {report.closed_loop.damping_ratio:+.4f}"
        )
    elif "closed_loop_error" in report.meta:
        lines.append(f"closed-loop fit unavailable: {report.meta['closed_loop_error']}")
    return "\n".join(lines) + "\n"


def report_csv_rows(report: StabilityReport):
    """Machine rows: (channel, critical_freq_hz, ratio, verdict)."""
    rows = []
    for ch in report.channels:
        if not ch.crossings:
            rows.append((ch.channel, "", "", ch.verdict))
        for c in ch.crossings:
            rows.append((ch.channel, f"{c.f_hz:.6f}", f"{c.ratio:.9f}", ch.verdict))
    return rows


def write_report_files(report: StabilityReport, out_dir, stem="stability"):
    """Write the text report and the machine CSV; returns the paths."""
    import pathlib

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / f"{stem}.txt"
    csvp = out / f"{stem}.csv"
    txt.write_text(render_text_report(report), encoding="utf-8")
    with open(csvp, "w", encoding="utf-8", newline="") as fh:
        fh.write("channel,critical_freq_hz,ratio,verdict\n")
        for row in report_csv_rows(report):
            fh.write(",".join(str(v) for v in row) + "\n")
    return txt, csvp


def write_bode_csv(path, y_dev: FrequencyResponse, y_grid: FrequencyResponse):
    """Bode-comparison data for external plotting."""
    if y_dev.grid != y_grid.grid:
        raise ValueError("device and grid responses must share a grid")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(
            "f_hz,mag_dev,phase_dev_deg,mag_grid,phase_grid_deg\n"
        )
        pd = y_dev.phase_deg(unwrap=True)
        pg = y_grid.phase_deg(unwrap=True)
        md = y_dev.magnitude()
        mg = y_grid.magnitude()
        for i, f in enumerate(y_dev.f_hz):
            fh.write(
                f"{f:.6f},{md[i]:.9e},{pd[i]:.6f},{mg[i]:.9e},{pg[i]:.6f}\n"
            )


#: standalone script that renders the Bode CSV written above
PLOT_SCRIPT = """\
#!/usr/bin/env python3
\"\"\"Render a device-vs-grid Bode comparison from a stability CSV.

Usage: plot_bode.py <bode_csv> [out.png]
\"\"\"
import csv
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

path = sys.argv[1]
out = sys.argv[2] if len(sys.argv) > 2 else path.rsplit(".", 1)[0] + ".png"
rows = list(csv.DictReader(open(path)))
f = [float(r["f_hz"]) for r in rows]
md = [float(r["mag_dev"]) for r in rows]
mg = [float(r["mag_grid"]) for r in rows]
pd = [float(r["phase_dev_deg"]) for r in rows]
pg = [float(r["phase_grid_deg"]) for r in rows]

fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
ax1.semilogy(f, md, label="device")
ax1.semilogy(f, mg, label="grid")
ax1.set_ylabel("|Y| (S)")
ax1.legend()
ax1.grid(True, which="both", alpha=0.3)
ax2.plot(f, [a - b for a, b in zip(pd, pg)], color="tab:red")
ax2.axhline(180, ls="--", color="k", lw=0.8)
ax2.axhline(-180, ls="--", color="k", lw=0.8)
ax2.set_ylabel("phase difference (deg)")
ax2.set_xlabel("frequency (Hz)")
ax2.grid(True, alpha=0.3)
fig.tight_layout()
fig.savefig(out, dpi=150)
print(out)
"""
