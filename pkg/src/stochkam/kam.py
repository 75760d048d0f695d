"""Frequency analysis, Diophantine tests and torus persistence scans.

The scan follows the deterministic flow of ``H0 + eta P`` (the most probable
dynamics when the noise satisfies the Hamiltonian-columns condition) from a
set of initial actions and asks, per ``(eta, I0)``, whether the orbit still
looks like a slightly deformed invariant torus: bounded frequency drift and
bounded action oscillation over a long finite window.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import ContractViolation, InvalidParameters, SamplingTooCoarse, StochKAMError
from .hamiltonian import flow_batch
from .noise import check_hamiltonian_columns

# unwrapped steps beyond this are treated as aliased
MAX_ANGLE_STEP = 0.5 * np.pi


@dataclass(frozen=True)
class FrequencyVector:
    omega: np.ndarray
    estimated_error: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.omega, dtype=float))
        e = np.atleast_1d(np.asarray(self.estimated_error, dtype=float))
        if w.shape != e.shape:
            raise ContractViolation("omega and estimated_error must have the same shape")
        if not np.all(np.isfinite(w)):
            raise ContractViolation("frequency components must be finite")
        if np.any(e < 0):
            raise ContractViolation("estimated errors must be non-negative")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "estimated_error", e)

    @property
    def n(self):
        return self.omega.size


@dataclass(frozen=True)
class KAMParams:
    """Smoothness ``l``, exponent ``nu`` (``tau = nu - 1``) and thresholds.

    ``n`` is the number of degrees of freedom the exponents are checked
    against (``l > 2 nu > 2 n``).
    """

    l: float
    nu: float
    alpha: float
    eta: float = 0.0
    k_max: int = 30
    n: int = 2
    c: float = 1.0
    drift_tol: float = 1e-3
    osc_tol_frac: float = 0.05

    def __post_init__(self):
        if not self.l > 2 * self.nu:
            raise InvalidParameters(f"need l > 2 nu, got l={self.l}, nu={self.nu}")
        if not self.nu > self.n:
            raise InvalidParameters(f"need nu > n, got nu={self.nu}, n={self.n}")
        if not self.alpha > 0:
            raise InvalidParameters("alpha must be positive")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise InvalidParameters("k_max must be a positive integer")
        if self.drift_tol < 0 or self.osc_tol_frac < 0:
            raise InvalidParameters("tolerances must be non-negative")
        if not self.c > 0:
            raise InvalidParameters("c must be positive")

    @property
    def tau(self):
        return self.nu - 1.0


# -- frequency estimation ---------------------------------------------------

def _slope(t, y):
    tc = t - t.mean()
    sxx = float(tc @ tc)
    b = float(tc @ (y - y.mean())) / sxx
    r = y - y.mean() - b * tc
    dof = max(len(t) - 2, 1)
    se = math.sqrt(float(r @ r) / dof / sxx)
    return b, se


def _refine(t, theta, w0, window):
    """Continuous peak of the windowed spectrum of ``exp(i theta)`` near ``w0``.

    The signal is demodulated by ``w0`` first, the Hann-windowed FFT peak is
    located with quadratic interpolation on the log magnitude, and the peak is
    then polished by solving ``d|F|^2/dnu = 0``.
    """
    N = len(t)
    tc = t - t[0]
    dt = tc[1] - tc[0]
    z = window * np.exp(1j * (theta - w0 * tc))
    pad = 4
    F = np.abs(np.fft.fft(z, pad * N))
    freqs = 2 * np.pi * np.fft.fftfreq(pad * N, d=dt)
    k = int(np.argmax(F))
    dnu = 2 * np.pi / (pad * N * dt)
    km, kp = (k - 1) % len(F), (k + 1) % len(F)
    a, b, c = (np.log(max(F[j], 1e-300)) for j in (km, k, kp))
    den = a - 2 * b + c
    off = 0.5 * (a - c) / den if den < 0 else 0.0
    nu0 = freqs[k] + off * dnu

    def dpow(nu):
        e = np.exp(-1j * nu * tc)
        Fv = np.sum(z * e)
        dF = np.sum(-1j * tc * z * e)
        return 2.0 * float(np.real(np.conj(Fv) * dF))

    lo, hi = nu0 - dnu, nu0 + dnu
    try:
        flo, fhi = dpow(lo), dpow(hi)
        if flo > 0 > fhi:
            nu0 = brentq(dpow, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    except (ValueError, RuntimeError):
        pass
    return w0 + nu0


def frequency_estimate(angle_series, T=None, times=None, *, expected_min_frequency=None):
    """Estimate the rotation frequencies of an angle time series.

    Parameters
    ----------
    angle_series : array (N+1,) or (N+1, n)
        Angle samples on a uniform grid; wrapped or unwrapped.
    T : float, optional
        Window length (samples at ``k T / N``).  Alternatively pass ``times``.
    expected_min_frequency : float, optional
        When given, enforce ``T >= 50 / expected_min_frequency``.

    Returns
    -------
    FrequencyVector
        Per component, the least-squares slope refined by the windowed
        spectral peak; ``estimated_error`` is the standard error of the
        slope plus a rounding floor.

    Raises
    ------
    SamplingTooCoarse
        If consecutive samples advance by more than a quarter turn after
        unwrapping, so the rotation cannot be followed unambiguously.
    """
    th = np.asarray(angle_series, dtype=float)
    squeeze = th.ndim == 1
    if squeeze:
        th = th[:, None]
    if th.ndim != 2 or th.shape[0] < 8:
        raise ContractViolation("need at least 8 samples of shape (N+1,) or (N+1, n)")
    if not np.all(np.isfinite(th)):
        raise ContractViolation("angle series must be finite")
    if times is None:
        if T is None or not T > 0:
            raise ContractViolation("pass a positive T or the sample times")
        t = np.linspace(0.0, float(T), th.shape[0])
    else:
        t = np.asarray(times, dtype=float)
        if t.shape != (th.shape[0],):
            raise ContractViolation("times must match the number of samples")
        steps = np.diff(t)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps.mean():
            raise ContractViolation("sample times must form a uniform increasing grid")
    span = t[-1] - t[0]
    if expected_min_frequency is not None and span < 50.0 / expected_min_frequency:
        raise ContractViolation(f"window {span:g} shorter than 50 / {expected_min_frequency:g}")

    un = np.unwrap(th, axis=0)
    jumps = np.max(np.abs(np.diff(un, axis=0)), axis=0)
    if np.any(jumps > MAX_ANGLE_STEP):
        j = int(np.argmax(jumps))
        raise SamplingTooCoarse(f"component {j} moves {jumps[j]:.3f} rad in one step; refine the grid")

    window = np.hanning(len(t))
    omega = np.empty(th.shape[1])
    err = np.empty(th.shape[1])
    for j in range(th.shape[1]):
        w_ls, se = _slope(t, un[:, j])
        if se <= 1e-13 * max(1.0, abs(w_ls)):
            w = w_ls
        else:
            w = _refine(t, un[:, j], w_ls, window)
        omega[j] = w
        err[j] = se + 64 * np.finfo(float).eps * max(1.0, abs(w)) * len(t)
    return FrequencyVector(omega, err)


# -- Diophantine condition --------------------------------------------------

def integer_vectors(n, k_max):
    """Nonzero integer vectors with ``|k|_1 <= k_max``, one per ``+-k`` pair.

    The representative has its first nonzero entry positive.  Rows are sorted
    by ``|k|_1`` then lexicographically.
    """
    rng = np.arange(-k_max, k_max + 1)
    grids = np.meshgrid(*([rng] * n), indexing="ij")
    K = np.stack([g.ravel() for g in grids], axis=1)
    norm = np.abs(K).sum(axis=1)
    K = K[(norm > 0) & (norm <= k_max)]
    first = K[np.arange(len(K)), np.argmax(K != 0, axis=1)]
    K = K[first > 0]
    order = np.lexsort(tuple(K[:, j] for j in range(n - 1, -1, -1)) + (np.abs(K).sum(axis=1),))
    return K[order]


def diophantine_check(omega, params):
    """Test ``|omega . k| |k|_1^tau >= alpha`` for ``0 < |k|_1 <= k_max``.

    Returns
    -------
    passes : bool
    worst_k : ndarray of int
        The minimising ``k`` (first in ``|k|_1``-then-lexicographic order).
    margin : float
        ``min |omega . k| |k|_1^tau - alpha``; negative when the check fails.
    """
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    if params.k_max < 1:
        raise ContractViolation("k_max must be >= 1")
    K = integer_vectors(w.size, int(params.k_max))
    vals = np.abs(K @ w) * np.abs(K).sum(axis=1).astype(float) ** params.tau
    i = int(np.argmin(vals))
    m = float(vals[i])
    return m >= params.alpha, K[i].copy(), m - params.alpha


def alpha_from_eta(eta, params):
    """``c * eta**(1/2 - nu/l)``, the torus-measure scale for perturbation ``eta``."""
    if not eta > 0:
        raise ContractViolation("eta must be positive")
    expo = 0.5 - params.nu / params.l
    if expo <= 0:
        raise InvalidParameters(f"exponent 1/2 - nu/l = {expo:g} is not positive")
    return params.c * eta ** expo


# -- persistence scan -------------------------------------------------------

@dataclass
class PersistenceRow:
    eta: float
    I0: np.ndarray
    omega: Optional[np.ndarray]
    omega0: np.ndarray
    omega_error: Optional[np.ndarray]
    drift: float
    osc: float
    survived: bool
    error: str = ""


@dataclass
class PersistenceReport:
    rows: list
    etas: list
    drift_tol: float
    osc_tol_frac: float
    k_max: int
    T: float
    N: int
    survival: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    slope: Optional[float] = None

    def rows_for(self, eta):
        return [r for r in self.rows if r.eta == eta]

    def drifts(self, I_index=0):
        """Drift per eta for the ``I_index``-th initial action (NaN on failure)."""
        out = []
        for eta in self.etas:
            rs = self.rows_for(eta)
            out.append(rs[I_index].drift if I_index < len(rs) else float("nan"))
        return np.array(out)

    def to_csv(self, filename=None):
        n = len(self.rows[0].I0) if self.rows else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta"] + [f"I0_{j + 1}" for j in range(n)] + [f"omega_{j + 1}" for j in range(n)]
                   + ["drift", "osc", "survived"])
        for r in self.rows:
            om = r.omega if r.omega is not None else [float("nan")] * n
            w.writerow([repr(r.eta)] + [repr(float(v)) for v in r.I0] + [repr(float(v)) for v in om]
                       + [repr(float(r.drift)), repr(float(r.osc)), int(r.survived)])
        text = buf.getvalue()
        if filename is not None:
            with open(filename, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self):
        lines = [f"drift_tol = {self.drift_tol:g}", f"osc_tol = {self.osc_tol_frac:g} * |I0|",
                 f"k_max = {self.k_max}", f"T = {self.T:g}, N = {self.N}"]
        for eta in self.etas:
            lines.append(f"eta = {eta:g}: survival = {self.survival[eta]:.6g} "
                         f"(failed estimates: {self.failures.get(eta, 0)})")
        slope = "n/a" if self.slope is None else f"{self.slope:.6g}"
        lines.append(f"log-log slope of (1 - survival) vs eta: {slope}")
        return "\n".join(lines) + "\n"


def _loglog_slope(etas, survival):
    pts = [(math.log(e), math.log(1.0 - s)) for e, s in zip(etas, survival) if e > 0 and s < 1.0]
    if len(pts) < 2:
        return None
    x, y = np.array(pts).T
    if np.ptp(x) == 0:
        return None
    return float(np.polyfit(x, y, 1)[0])


def torus_persistence_scan(sys, fld, etas, initial_actions, T, N, params, *, initial_angles=None,
                           box=None, check_noise=True):
    """Follow tori of ``H0 + eta P`` for every ``(eta, I0)`` and judge survival.

    Parameters
    ----------
    sys : HamiltonianSystem
        Must carry a nearly-integrable decomposition; ``eta`` is replaced by
        each scan value.
    fld : DiffusionField
        Checked for Hamiltonian columns on ``box`` so that the deterministic
        flow is the most probable dynamics.  Pass ``check_noise=False`` to
        skip.
    initial_actions : sequence of ``(n,)`` actions
        Each must have a Diophantine unperturbed frequency ``grad H0(I0)``
        for ``params.alpha, tau, k_max``.
    T, N : window length and steps of the deterministic integration.

    A row survives when ``|omega(eta) - grad H0(I0)| <= drift_tol`` and
    ``max_t |I(t) - I0| <= osc_tol_frac |I0|``.
    """
    rec = sys.nearly_integrable
    if rec is None:
        raise ContractViolation(f"system {sys.name!r} has no nearly-integrable decomposition")
    n = sys.n
    I0s = np.atleast_2d(np.asarray(initial_actions, dtype=float))
    if I0s.shape[1] != n:
        raise ContractViolation(f"initial actions need {n} components")
    th0 = np.zeros_like(I0s) if initial_angles is None else np.broadcast_to(
        np.asarray(initial_angles, dtype=float), I0s.shape)
    etas = [float(e) for e in etas]
    if any(e < 0 for e in etas):
        raise ContractViolation("eta values must be non-negative")
    if check_noise:
        if box is None:
            box = [(-1.0, 1.0)] * (2 * n)
        rep = check_hamiltonian_columns(fld, box)
        if not rep.passed:
            raise ContractViolation(f"noise field fails the Hamiltonian-columns check: {rep.note}")
    omega0 = rec.h0_gradient(I0s)
    for I0, w0 in zip(I0s, omega0):
        ok, k, margin = diophantine_check(w0, params)
        if not ok:
            raise ContractViolation(f"unperturbed frequency {w0.tolist()} at I0={I0.tolist()} is not "
                                    f"Diophantine (k={k.tolist()}, margin={margin:.3g})")

    X0 = np.concatenate([th0, I0s], axis=1)
    rows = []
    for eta in etas:
        s = sys.with_eta(eta)
        traj = flow_batch(s, X0, T, N)
        for m, (I0, w0) in enumerate(zip(I0s, omega0)):
            theta = traj[:, m, :n]
            action = traj[:, m, n:]
            osc = float(np.max(np.linalg.norm(action - I0, axis=1)))
            try:
                if not np.all(np.isfinite(traj[:, m])):
                    raise StochKAMError("trajectory left the finite range")
                fv = frequency_estimate(theta, T)
            except StochKAMError as exc:
                rows.append(PersistenceRow(eta, I0.copy(), None, w0, None, float("nan"), osc, False,
                                           error=str(exc)))
                continue
            drift = float(np.linalg.norm(fv.omega - w0))
            osc_tol = params.osc_tol_frac * float(np.linalg.norm(I0))
            ok = drift <= params.drift_tol and osc <= osc_tol
            rows.append(PersistenceRow(eta, I0.copy(), fv.omega, w0, fv.estimated_error, drift, osc, ok))

    report = PersistenceReport(rows, etas, params.drift_tol, params.osc_tol_frac, int(params.k_max),
                               float(T), int(N))
    for eta in etas:
        rs = report.rows_for(eta)
        good = [r for r in rs if not r.error]
        report.failures[eta] = len(rs) - len(good)
        report.survival[eta] = (sum(r.survived for r in good) / len(good)) if good else 0.0
    report.slope = _loglog_slope(etas, [report.survival[e] for e in etas])
    return report


def golden_actions(scales, direction=(1.0, (1.0 + math.sqrt(5.0)) / 2.0)):
    """Actions ``s * direction`` for each scale ``s`` (frequencies along ``direction`` for the twist map)."""
    d = np.asarray(direction, dtype=float)
    return np.array([s * d for s in scales])


__all__ = [
    "FrequencyVector", "KAMParams", "PersistenceRow", "PersistenceReport", "frequency_estimate",
    "integer_vectors", "diophantine_check", "alpha_from_eta", "torus_persistence_scan", "golden_actions",
]
