"""Rational transfer functions and frequency-response containers.

Conventions used throughout the package:

* polynomial coefficients are stored in descending powers, matching
  ``numpy.polyval`` (``[a_n, ..., a_1, a_0]`` for ``a_n s^n + ... + a_0``);
* coefficients may be real or complex (channel-shifted forms are complex);
* frequency grids are in Hz, Laplace points are ``s = j*2*pi*f`` in rad/s;
* CSV serialization is ``freq_hz,re,im`` with IEEE-754 round-trip floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Evaluating a rational function closer to a pole than this is an error.
POLE_FLOOR = 1e-30
# Acceptable relative residual |den(root)| / ||den|| for reported poles.
ROOT_RESIDUAL_TOL = 1e-8
# Largest rational-fit order the pole-relocation path accepts.
MAX_FIT_ORDER = 12
_FIT_ITERATIONS = 20


class PoleHitError(ArithmeticError):
    """Raised when a rational function is evaluated on top of a pole."""


class RootConvergenceError(ArithmeticError):
    """Raised when computed polynomial roots fail the residual check."""


class FitError(ValueError):
    """Raised when a rational fit is infeasible or numerically unusable."""


def fmt_float(x: float) -> str:
    """Shortest decimal string that round-trips the IEEE-754 double."""
    return repr(float(x))


@dataclass(frozen=True)
class RationalTF:
    """Rational transfer function num(s)/den(s), descending coefficients."""

    num: tuple
    den: tuple

    def __init__(self, num, den):
        num = tuple(complex(c) for c in np.atleast_1d(num))
        den = tuple(complex(c) for c in np.atleast_1d(den))
        if len(den) == 0 or all(c == 0 for c in den):
            raise ValueError("denominator must be a nonzero polynomial")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)

    @property
    def order(self) -> int:
        return len(self.den) - 1

    def __call__(self, s):
        return eval_tf(self, s)

    def is_real(self, tol: float = 0.0) -> bool:
        """True when every coefficient has |imag| <= tol."""
        return all(abs(c.imag) <= tol for c in self.num + self.den)


def _polyval(coeffs, s):
    return np.polyval(np.asarray(coeffs, dtype=complex), s)


def eval_tf(tf: RationalTF, s):
    """Evaluate ``tf`` at one or many Laplace points.

    Parameters
    ----------
    tf : RationalTF
    s : complex or array of complex
        Laplace points, typically ``1j*2*pi*f``.

    Returns
    -------
    complex or ndarray of complex

    Raises
    ------
    PoleHitError
        If ``|den(s)| < 1e-30`` at any requested point.
    """
    s_arr = np.asarray(s, dtype=complex)
    den_val = _polyval(tf.den, s_arr)
    bad = np.abs(den_val) < POLE_FLOOR
    if np.any(bad):
        where = np.atleast_1d(s_arr)[np.atleast_1d(bad)]
        raise PoleHitError(f"denominator magnitude below {POLE_FLOOR:g} at s={where[:4]}")
    out = _polyval(tf.num, s_arr) / den_val
    if np.isscalar(s) or s_arr.ndim == 0:
        return complex(out)
    return out


def shift_s2(s, omega1: float):
    """Map a Laplace point to its mirror-channel argument s2 = s - 2j*omega1.

    A perturbation at frequency f couples to 2*f1 - f; quantities on the
    coupled channel are real-coefficient operators evaluated at s2. The
    inverse map is ``s2 + 2j*omega1``; in floating point the round trip is
    accurate to an ulp but not bit-exact.  Bookkeeping that must be exact
    (matching a mirror frequency back to a grid point) therefore works in
    hertz via :func:`mirror_frequency_hz`, never through this map.
    """
    return s - 2j * omega1


def mirror_frequency_hz(f_hz, f1_hz: float = 50.0):
    """Frequency coupled to ``f_hz``: 2*f1 - f.

    Exact in IEEE-754 whenever ``f_hz`` and ``2*f1`` are modest dyadic
    rationals (every default analysis grid qualifies: integer or 2^-k
    spacings), so a grid symmetric about f1 maps onto itself bit-exactly;
    pinned by test.
    """
    return 2.0 * f1_hz - f_hz


def poly_shift(coeffs, a):
    """Coefficients of p(s + a) given those of p(s) (Taylor shift).

    Repeated synthetic division by (s - 0) after substituting u = s + a;
    O(n^2), exact in exact arithmetic. Used to build mirror-channel
    rational forms, e.g. den2(s) = den(s - 2j*omega1).
    """
    c = list(np.asarray(coeffs, dtype=complex))
    n = len(c)
    # Horner-based Taylor shift: repeatedly divide by (u) where s = u + (-a)...
    # Work with q(u) = p(u + a): synthetic division of p by (s - a) collects
    # Taylor coefficients about a from highest remainder outward.
    out = [0j] * n
    work = c[:]
    for k in range(n - 1, -1, -1):
        # one synthetic-division pass by root (-a) of the shifted variable
        for i in range(1, k + 1):
            work[i] = work[i] + a * work[i - 1]
        out[k] = work[k]
        # next pass works on the quotient (drop the remainder slot)
    return tuple(out)


def tf_poles(tf: RationalTF, residual_tol: float = ROOT_RESIDUAL_TOL):
    """Poles of a rational TF via balanced companion-matrix eigenvalues.

    Roots are Newton-polished once and checked against
    ``|den(p)| <= residual_tol * ||den||_2`` (denominator normalized by its
    leading coefficient first). Returns an array sorted by descending real
    part, so the dominant (least stable) pole is first.
    """
    den = np.trim_zeros(np.asarray(tf.den, dtype=complex), "f")
    if den.size <= 1:
        return np.array([], dtype=complex)
    den = den / den[0]
    roots = np.roots(den)
    dden = np.polyder(den)
    for _ in range(2):  # Newton polish
        d = np.polyval(dden, roots)
        step = np.where(np.abs(d) > 0, np.polyval(den, roots) / np.where(d == 0, 1, d), 0)
        roots = roots - step
    norm = np.linalg.norm(den)
    resid = np.abs(np.polyval(den, roots))
    # evaluation of a degree-n polynomial at |p| >> 1 amplifies roundoff by
    # ~sum |c_i||p|^i, so scale the tolerance accordingly
    scale = np.maximum(norm, np.polyval(np.abs(den), np.abs(roots)))
    bad = resid > residual_tol * scale
    if np.any(bad):
        raise RootConvergenceError(
            f"root residuals {resid[bad]} exceed {residual_tol:g}*scale for poles {roots[bad]}"
        )
    order = np.argsort(-roots.real, kind="stable")
    return roots[order]


def dominant_pole(tf: RationalTF) -> complex:
    """Pole with the largest real part."""
    poles = tf_poles(tf)
    if poles.size == 0:
        raise ValueError("transfer function has no poles")
    return complex(poles[0])


@dataclass(frozen=True)
class FrequencyGrid:
    """Strictly increasing grid of positive frequencies in Hz."""

    f_hz: np.ndarray = field(repr=False)

    def __init__(self, f_hz):
        arr = np.asarray(f_hz, dtype=float).copy()
        arr.setflags(write=False)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("frequency grid must be a 1-D nonempty array")
        if np.any(arr <= 0):
            raise ValueError("frequencies must be positive")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "f_hz", arr)

    def __len__(self) -> int:
        return int(self.f_hz.size)

    def __eq__(self, other) -> bool:
        return isinstance(other, FrequencyGrid) and np.array_equal(self.f_hz, other.f_hz)

    @property
    def omega(self) -> np.ndarray:
        """Angular frequencies in rad/s."""
        return 2.0 * np.pi * self.f_hz

    @property
    def s(self) -> np.ndarray:
        """Laplace points j*omega."""
        return 1j * self.omega

    def covers_band(self, fmin: float, fmax: float) -> bool:
        return self.f_hz[0] <= fmin and self.f_hz[-1] >= fmax


def default_grid(f1_hz: float = 50.0, fmin: float = 2.0, fmax: float = 98.0,
                 spacing: float = 1.0, guard_hz: float = 2.0) -> FrequencyGrid:
    """Default analysis grid: ``fmin..fmax`` stepped by ``spacing``, with
    points within ``guard_hz`` of the fundamental removed (sweeping at the
    fundamental is degenerate: injections collide with the operating point).
    """
    n = int(round((fmax - fmin) / spacing))
    f = fmin + spacing * np.arange(n + 1)
    keep = np.abs(f - f1_hz) > guard_hz - 1e-12
    return FrequencyGrid(f[keep])


@dataclass(frozen=True)
class FrequencyResponse:
    """Complex response sampled on a FrequencyGrid."""

    grid: FrequencyGrid
    values: np.ndarray = field(repr=False)

    def __init__(self, grid: FrequencyGrid, values):
        vals = np.asarray(values, dtype=complex).copy()
        vals.setflags(write=False)
        if vals.shape != (len(grid),):
            raise ValueError(
                f"values shape {vals.shape} does not match grid length {len(grid)}"
            )
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def f_hz(self) -> np.ndarray:
        return self.grid.f_hz

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def phase_deg(self, unwrap: bool = True) -> np.ndarray:
        ph = np.angle(self.values)
        if unwrap:
            ph = np.unwrap(ph)
        return np.degrees(ph)

    def to_csv(self, path) -> None:
        """Write ``freq_hz,re,im`` rows with round-trip float formatting."""
        lines = ["freq_hz,re,im"]
        for f, v in zip(self.grid.f_hz, self.values):
            lines.append(f"{fmt_float(f)},{fmt_float(v.real)},{fmt_float(v.imag)}")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "FrequencyResponse":
        with open(path, "r", encoding="ascii") as fh:
            header = fh.readline().strip()
            if header != "freq_hz,re,im":
                raise ValueError(f"unexpected header {header!r}; want 'freq_hz,re,im'")
            f, re, im = [], [], []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                a, b, c = line.split(",")
                f.append(float(a))
                re.append(float(b))
                im.append(float(c))
        return cls(FrequencyGrid(np.array(f)), np.array(re) + 1j * np.array(im))

    @classmethod
    def from_tf(cls, tf: RationalTF, grid: FrequencyGrid) -> "FrequencyResponse":
        return cls(grid, eval_tf(tf, grid.s))


@dataclass(frozen=True)
class MimoAdmittance:
    """Two-channel coupled admittance sampled on a frequency grid.

    Entry (1,1) relates current and voltage at the probe frequency f;
    entry (2,2) relates the conjugated spectral components at the coupled
    frequency 2*f1 - f; off-diagonals carry the frequency coupling.
    Values are in siemens, sign convention: positive for a passive load
    (``delta_i_into_device = Y @ delta_v``).
    """

    grid: FrequencyGrid
    y11: np.ndarray = field(repr=False)
    y12: np.ndarray = field(repr=False)
    y21: np.ndarray = field(repr=False)
    y22: np.ndarray = field(repr=False)
    f1_hz: float = 50.0
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.grid)
        for name in ("y11", "y12", "y21", "y22"):
            arr = np.asarray(getattr(self, name), dtype=complex)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, arr)

    def entry(self, i: int, j: int) -> FrequencyResponse:
        if i not in (1, 2) or j not in (1, 2):
            raise ValueError("entry indices are 1 or 2")
        return FrequencyResponse(self.grid, getattr(self, f"y{i}{j}"))

    def matrices(self) -> np.ndarray:
        """Stack of 2x2 matrices, shape (npts, 2, 2)."""
        out = np.empty((len(self.grid), 2, 2), dtype=complex)
        out[:, 0, 0] = self.y11
        out[:, 0, 1] = self.y12
        out[:, 1, 0] = self.y21
        out[:, 1, 1] = self.y22
        return out


@dataclass(frozen=True)
class FitReport:
    """Diagnostics for a rational fit."""

    max_rel_error: float
    rel_errors: np.ndarray = field(repr=False)
    condition: float = np.nan
    flagged: tuple = ()

    def __str__(self) -> str:
        extra = f", {len(self.flagged)} outlier(s) at {list(self.flagged)}" if self.flagged else ""
        return f"fit max rel error {self.max_rel_error:.3e}, cond {self.condition:.3e}{extra}"


def rational_fit(fr: FrequencyResponse, order: int, weights=None):
    """Fit a rational TF to frequency-response data (vector fitting).

    Pole relocation with a partial-fraction basis: model
    ``H(s) = sum_k c_k/(s - a_k) + d`` and weight function
    ``sigma(s) = 1 + sum_k ct_k/(s - a_k)`` are fitted jointly by linear
    least squares; the zeros of ``sigma`` become the next pole set. The
    basis stays well conditioned at every allowed order, unlike a power
    basis. A fixed number of iterations (20) keeps the result
    deterministic. Poles, residues and coefficients are complex (data
    from coupled channels is not conjugate-symmetric) and may lie in
    either half plane, so responses of unstable loops are fitted as-is.

    Parameters
    ----------
    fr : FrequencyResponse
    order : int
        Shared numerator/denominator order, ``1 <= order <= 12``.
    weights : array, optional
        Extra per-point weights multiplied with the relative-error
        weighting ``1/|H_k|``.

    Returns
    -------
    (RationalTF, FitReport)
        Fitted TF and a report with per-point relative errors, the
        condition number of the final residue identification, and
        flagged residual outliers.
    """
    if not 1 <= order <= MAX_FIT_ORDER:
        raise FitError(f"order must be in [1, {MAX_FIT_ORDER}], got {order}")
    npts = len(fr)
    if npts < 2 * (order + 1):
        raise FitError(f"need at least {2 * (order + 1)} points for order {order}, got {npts}")
    w_user = np.ones(npts) if weights is None else np.asarray(weights, dtype=float)
    if w_user.shape != (npts,) or np.any(w_user <= 0):
        raise FitError("weights must be positive and match the grid length")

    h = fr.values
    s_scale = float(np.median(np.abs(fr.grid.s)))
    s = fr.grid.s / s_scale  # scaled variable for conditioning
    denom = np.maximum(np.abs(h), 1e-300)

    # Initial poles: slightly damped, imaginary parts spread across the
    # sampled band (index quantiles adapt to linear and log grids alike).
    # Relocation moves them anywhere in the plane, including across the
    # real axis (needed for conjugate partners of positive-band modes).
    idx = np.linspace(0, npts - 1, order).round().astype(int) if order > 1 else [npts // 2]
    poles0 = np.abs(s[idx]) * (-0.01 + 1j)

    def basis(a):
        # phi[:, k] = 1/(s - a_k); nudge any pole sitting on a sample
        for _ in range(3):
            dist = np.abs(s[:, None] - a[None, :])
            hit = dist.min(axis=0) < 1e-9
            if not np.any(hit):
                break
            a = np.where(hit, a - 1e-8, a)
        return 1.0 / (s[:, None] - a[None, :]), a

    def vf_pass(wts):
        wk = wts / denom  # relative-error weighting
        a = poles0.copy()
        for _ in range(_FIT_ITERATIONS):
            phi, a = basis(a)
            # unknowns: [c (order); d (1); ct (order)]
            lhs = np.hstack([phi, np.ones((npts, 1)), -(h[:, None]) * phi]) * wk[:, None]
            sol, _, _, _ = np.linalg.lstsq(lhs, h * wk, rcond=None)
            ct = sol[order + 1:]
            # zeros of sigma(s) = 1 + sum ct_k/(s - a_k)
            a = np.linalg.eigvals(np.diag(a) - np.outer(np.ones(order), ct))
        # residue identification on the final poles
        phi, a = basis(a)
        lhs = np.hstack([phi, np.ones((npts, 1))]) * wk[:, None]
        sol, _, _, sv = np.linalg.lstsq(lhs, h * wk, rcond=None)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
        if not np.isfinite(cond) or cond > 1e13:
            raise FitError(f"fit normal system numerically singular (cond {cond:.3e})")
        c, d = sol[:order], sol[order]
        # assemble num/den polynomials in the scaled variable
        den_c = np.poly(a)
        num_c = d * den_c
        for k in range(order):
            cof = np.atleast_1d(np.poly(np.delete(a, k)))
            num_c += np.concatenate(([0j], c[k] * cof))
        # unscale: coefficient of s^k in scaled variable maps by s_scale^-k
        pw = s_scale ** np.arange(order, -1, -1, dtype=float)
        tf = RationalTF(num_c / pw * pw[0], den_c / pw * pw[0])
        rel = np.abs(eval_tf(tf, fr.grid.s) - h) / denom
        return tf, cond, rel

    tf, cond, rel = vf_pass(w_user)

    # One robust trimming pass: plain least squares smears a corrupted
    # sample across its neighbours, so residuals alone cannot separate
    # the culprit. Refit with suspect points down-weighted; against the
    # refined fit genuine outliers stand out by orders of magnitude.
    suspects = np.nonzero(rel > 5.0 * np.median(rel))[0]
    keep = max(1, npts // 10)
    if suspects.size > keep:
        suspects = suspects[np.argsort(rel[suspects])[-keep:]]
    flagged: tuple = ()
    if suspects.size:
        w_trim = w_user.copy()
        w_trim[suspects] *= 1e-6
        tf2, cond2, rel2 = vf_pass(w_trim)
        clean = np.setdiff1d(np.arange(npts), suspects)
        floor = max(50.0 * float(np.median(rel2[clean])), 1e-8)
        out = np.nonzero(rel2 > floor)[0]
        if out.size:
            tf, cond, rel, flagged = tf2, cond2, rel2, tuple(int(i) for i in out)

    report = FitReport(max_rel_error=float(np.max(rel)), rel_errors=rel,
                       condition=cond, flagged=flagged)
    return tf, report
