"""Diffusion coefficients and numerical checks of the structural conditions.

A :class:`DiffusionField` carries batch callables

* ``sigma(X)`` -> ``(M, d, d)`` symmetric matrices,
* ``sigma_derivative(X)`` -> ``(M, d, d, d)`` with ``[m, i, j, k] = d sigma_ij / d x_k``,
* optionally ``sigma_second(X)`` -> ``(M, d, d, d, d)`` second derivatives.

Columns ``V_j = sigma e_j`` are read as vector fields.  The divergence of
``sigma`` is the vector ``(div sigma)_j = sum_i d sigma_ij / d x_i``.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import ContractViolation, NearSingularError
from .hamiltonian import FD_STEP, apply_J, as_batch, fd_jacobian

DEFAULT_SAMPLES = 4096
FROBENIUS_TOL = 1e-8
C4_TOL = 1e-8
WITNESS_TOL = 1e-10
RAYLEIGH_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class DiffusionField:
    n: int
    sigma: Callable
    sigma_derivative: Optional[Callable] = None
    ellipticity: tuple = (1.0, 1.0)
    sigma_second: Optional[Callable] = None
    column_hamiltonians: Optional[Sequence] = None
    c3_witness: Optional["C3Witness"] = None
    constant: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lam, Lam = self.ellipticity
        if not (0 < lam <= Lam):
            raise ContractViolation("ellipticity bounds must satisfy 0 < lambda <= Lambda")

    @property
    def dim(self):
        return 2 * self.n

    def sigma_at(self, x):
        X, single = as_batch(x, self.dim)
        S = np.asarray(self.sigma(X), dtype=float)
        return S[0] if single else S

    def derivative_at(self, x):
        X, single = as_batch(x, self.dim)
        if self.sigma_derivative is not None:
            D = np.asarray(self.sigma_derivative(X), dtype=float)
        else:
            D = fd_jacobian(lambda Y: self.sigma(Y), X)
        return D[0] if single else D

    def second_at(self, x):
        X, single = as_batch(x, self.dim)
        if self.sigma_second is not None:
            D2 = np.asarray(self.sigma_second(X), dtype=float)
        else:
            D2 = fd_jacobian(lambda Y: self.derivative_at(Y), X, h=FD_STEP)
        return D2[0] if single else D2

    def scaled(self, c):
        """The field ``c * sigma`` for a constant ``c > 0``."""
        if not c > 0:
            raise ContractViolation("scale must be positive")
        s, d = self.sigma, self.sigma_derivative
        d2 = self.sigma_second
        lam, Lam = self.ellipticity
        return DiffusionField(
            n=self.n,
            sigma=lambda X: c * s(X),
            sigma_derivative=None if d is None else (lambda X: c * d(X)),
            sigma_second=None if d2 is None else (lambda X: c * d2(X)),
            ellipticity=(c * c * lam, c * c * Lam),
            constant=self.constant,
            name=f"{c:g}*{self.name}",
        )


@dataclass(frozen=True, eq=False)
class C3Witness:
    """Chart ``U`` with ``sigma(U(y)) = DU(y)`` on ``box`` (in y-coordinates)."""

    U: Callable
    DU: Callable
    box: tuple


@dataclass
class ConditionReport:
    condition: str
    verdict: str
    worst_point: Optional[list]
    worst_magnitude: float
    tolerance: float
    samples: int
    box: list
    note: str = ""

    @property
    def passed(self):
        return self.verdict == "pass"

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def sample_box(box, samples, include_corners=True):
    """Unscrambled Sobol points over an axis-aligned box (plus its corners)."""
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    if samples < 1:
        raise ContractViolation("need at least one sample")
    if np.any(hi < lo):
        raise ContractViolation("empty domain box")
    d = lo.size
    m = int(np.ceil(np.log2(max(samples, 2))))
    pts = qmc.Sobol(d, scramble=False).random_base2(m)[:samples]
    pts = qmc.scale(pts, lo, hi) if np.any(hi > lo) else np.tile(lo, (samples, 1))
    if include_corners and d <= 10:
        corners = np.array(np.meshgrid(*[[a, b] for a, b in zip(lo, hi)], indexing="ij"))
        pts = np.vstack([pts, corners.reshape(d, -1).T])
    return pts


def _box_list(box):
    return [[float(a), float(b)] for a, b in box]


def sigma_inverse(fld, x):
    """Inverse of ``sigma(x)``; rejects points where ellipticity fails.

    Raises :class:`NearSingularError` when the smallest eigenvalue of
    ``sigma(x)^2`` falls below ``lambda`` (up to 1e-9 relative slack).
    """
    X, single = as_batch(x, fld.dim)
    S = fld.sigma_at(X)
    ev = np.linalg.eigvalsh(S)
    smallest = np.min(ev * ev, axis=1)
    lam = fld.ellipticity[0]
    bad = np.flatnonzero(~(smallest >= lam * (1 - RAYLEIGH_SLACK)))
    if bad.size:
        i = int(bad[0])
        raise NearSingularError(
            f"sigma nearly singular at x={X[i].tolist()}: smallest eig(sigma^2)={smallest[i]:.3g} < lambda={lam:g}",
            point=X[i], index=i)
    inv = np.linalg.inv(S)
    inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
    return inv[0] if single else inv


def check_ellipticity(fld, box, samples=DEFAULT_SAMPLES):
    """Two-sided spectral bounds ``lambda <= v^T sigma^2 v <= Lambda`` on a box.

    The extreme Rayleigh quotients over unit ``v`` are the eigenvalues of
    ``sigma(x)^2``, so those are tested directly at every sample point.
    """
    X = sample_box(box, samples)
    S = fld.sigma_at(X)
    ev = np.linalg.eigvalsh(S) ** 2
    lam, Lam = fld.ellipticity
    lo_viol = lam * (1 - RAYLEIGH_SLACK) - ev.min(axis=1)
    hi_viol = ev.max(axis=1) - Lam * (1 + RAYLEIGH_SLACK)
    viol = np.maximum(lo_viol, hi_viol)
    i = int(np.argmax(viol))
    ok = bool(viol[i] <= 0)
    return ConditionReport(
        condition="C2", verdict="pass" if ok else "fail",
        worst_point=X[i].tolist(), worst_magnitude=float(viol[i]),
        tolerance=RAYLEIGH_SLACK, samples=len(X), box=_box_list(box),
        note=f"eig(sigma^2) range [{ev.min():.6g}, {ev.max():.6g}] vs [{lam:g}, {Lam:g}]",
    )


def lie_brackets(fld, X):
    """All column brackets ``[V_j, V_k] = DV_k V_j - DV_j V_k``; shape ``(M, d, d, d)`` as ``[m, j, k, :]``."""
    S = fld.sigma_at(X)
    D = fld.derivative_at(X)
    # DV_k V_j : sum_b dsigma[a, k, b] * sigma[b, j]
    DVk_Vj = np.einsum("makb,mbj->mjka", D, S)
    return DVk_Vj - np.swapaxes(DVk_Vj, 1, 2)


def check_frobenius(fld, box, samples=DEFAULT_SAMPLES):
    """Sufficient test for C3: every pair of columns of sigma commutes."""
    X = sample_box(box, samples)
    br = lie_brackets(fld, X)
    norms = np.linalg.norm(br, axis=-1).max(axis=(1, 2))
    scale = 1.0 + np.linalg.norm(fld.sigma_at(X), ord=2, axis=(1, 2))
    ratio = norms / scale
    i = int(np.argmax(ratio))
    ok = bool(ratio[i] <= FROBENIUS_TOL)
    return ConditionReport(
        condition="C3-frobenius", verdict="pass" if ok else "fail",
        worst_point=X[i].tolist(), worst_magnitude=float(norms[i]),
        tolerance=FROBENIUS_TOL, samples=len(X), box=_box_list(box),
        note="max |[V_j,V_k]| / (1 + |sigma|)",
    )


def check_c3_witness(fld, samples=DEFAULT_SAMPLES):
    """Direct check of ``sigma(U(y)) = DU(y)`` for a supplied chart ``U``."""
    w = fld.c3_witness
    if w is None:
        return ConditionReport("C3-witness", "not-checked", None, float("nan"), WITNESS_TOL, 0, [],
                               note="no chart supplied")
    Y = sample_box(w.box, samples)
    err = np.abs(fld.sigma_at(w.U(Y)) - w.DU(Y)).max(axis=(1, 2))
    i = int(np.argmax(err))
    ok = bool(err[i] <= WITNESS_TOL)
    return ConditionReport("C3-witness", "pass" if ok else "fail", Y[i].tolist(), float(err[i]),
                           WITNESS_TOL, len(Y), _box_list(w.box), note="sup |sigma(U(y)) - DU(y)|")


def column_jacobians(fld, X):
    """``out[m, i] = D(-J V_i)(x_m)``, the Jacobian of ``-J`` times column ``i``."""
    D = fld.derivative_at(X)
    DV = np.transpose(D, (0, 2, 1, 3))  # [m, i, a, b] = d sigma_ai / d x_b
    n = fld.n
    # -J v = (-v_p, v_q) row-wise
    return np.concatenate([-DV[:, :, n:, :], DV[:, :, :n, :]], axis=2)


def check_hamiltonian_columns(fld, box, samples=DEFAULT_SAMPLES):
    """C4: each column of sigma is a Hamiltonian vector field.

    A field ``V`` is locally Hamiltonian iff ``D(-J V)`` is symmetric; this is
    tested at every sample.  When ``column_hamiltonians`` are supplied the
    identity ``sigma_i = J grad H_i`` is verified as well.
    """
    X = sample_box(box, samples)
    A = column_jacobians(fld, X)
    asym = np.abs(A - np.swapaxes(A, 2, 3)).max(axis=(1, 2, 3))
    scale = 1.0 + np.linalg.norm(fld.sigma_at(X), ord=2, axis=(1, 2))
    ratio = asym / scale
    i = int(np.argmax(ratio))
    ok = bool(ratio[i] <= C4_TOL)
    note = "max |D(-J V_i) - D(-J V_i)^T| / (1 + |sigma|)"
    magnitude = float(asym[i])
    if ok and fld.column_hamiltonians is not None:
        S = fld.sigma_at(X)
        werr = np.zeros(len(X))
        for col, (_, grad_h) in enumerate(fld.column_hamiltonians):
            werr = np.maximum(werr, np.abs(S[:, :, col] - apply_J(grad_h(X))).max(axis=1))
        j = int(np.argmax(werr))
        note += f"; witness sup |sigma_i - J grad H_i| = {werr[j]:.3g}"
        if werr[j] > WITNESS_TOL:
            ok, i, magnitude = False, j, float(werr[j])
    return ConditionReport(
        condition="C4", verdict="pass" if ok else "fail",
        worst_point=X[i].tolist(), worst_magnitude=magnitude,
        tolerance=C4_TOL, samples=len(X), box=_box_list(box), note=note,
    )


def check_conditions(fld, box, samples=DEFAULT_SAMPLES):
    """Run every checker and return the reports keyed by condition name."""
    reports = [
        check_ellipticity(fld, box, samples),
        check_frobenius(fld, box, samples),
        check_c3_witness(fld, samples),
        check_hamiltonian_columns(fld, box, samples),
    ]
    return {r.condition: r for r in reports}


def divergence_sigma(fld, x):
    """``(div sigma)_j = sum_i d sigma_ij / d x_i``."""
    X, single = as_batch(x, fld.dim)
    out = np.einsum("miji->mj", fld.derivative_at(X))
    return out[0] if single else out


def divergence_gradient(fld, x):
    """``out[m, j, c] = d (div sigma)_j / d x_c``."""
    X, single = as_batch(x, fld.dim)
    out = np.einsum("mijic->mjc", fld.second_at(X))
    return out[0] if single else out


def ito_drift_correction(fld, x):
    """Stratonovich-to-Ito drift ``(1/2) sum_i (sigma_i . grad) sigma_i``.

    The sum runs over all ``2n`` columns of sigma.
    """
    X, single = as_batch(x, fld.dim)
    S = fld.sigma_at(X)
    D = fld.derivative_at(X)
    out = 0.5 * np.einsum("maib,mbi->ma", D, S)
    return out[0] if single else out


# -- library fields ---------------------------------------------------------

def constant_field(matrix, name="constant"):
    A = np.asarray(matrix, dtype=float)
    d = A.shape[0]
    if A.shape != (d, d) or d % 2 or not np.allclose(A, A.T, atol=1e-12):
        raise ContractViolation("constant sigma must be a symmetric even-dimensional matrix")
    ev = np.linalg.eigvalsh(A) ** 2
    if ev.min() <= 0:
        raise ContractViolation("constant sigma must be invertible")
    n = d // 2
    # columns are constant fields: V_i = J grad H_i with H_i(x) = -(J V_i) . x
    hams = []
    for i in range(d):
        g = -apply_J(A[:, i])
        hams.append((lambda X, g=g: X @ g, lambda X, g=g: np.broadcast_to(g, X.shape).copy()))
    return DiffusionField(
        n=n,
        sigma=lambda X: np.broadcast_to(A, (X.shape[0], d, d)).copy(),
        sigma_derivative=lambda X: np.zeros((X.shape[0], d, d, d)),
        sigma_second=lambda X: np.zeros((X.shape[0], d, d, d, d)),
        ellipticity=(float(ev.min()), float(ev.max())),
        column_hamiltonians=hams,
        c3_witness=C3Witness(U=lambda Y: Y @ A.T, DU=lambda Y: np.broadcast_to(A, (Y.shape[0], d, d)).copy(),
                             box=tuple((-1.0, 1.0) for _ in range(d))),
        constant=True,
        name=name,
        params={"matrix": A.tolist()},
    )


def identity(n=1, scale=1.0):
    """``sigma = scale * I``."""
    f = constant_field(scale * np.eye(2 * n), name="identity")
    return replace(f, params={"n": n, "scale": scale})


def _diag_field(n, g, dg, d2g, name, params, ellipticity, hams=None, witness=None):
    """Diagonal sigma whose entry ``i`` is ``g(x)[:, i]`` with gradients ``dg`` (M, d, d) and ``d2g`` (M, d, d, d)."""
    d = 2 * n
    idx = np.arange(d)

    def sigma(X):
        out = np.zeros((X.shape[0], d, d))
        out[:, idx, idx] = g(X)
        return out

    def deriv(X):
        out = np.zeros((X.shape[0], d, d, d))
        out[:, idx, idx, :] = dg(X)
        return out

    def second(X):
        out = np.zeros((X.shape[0], d, d, d, d))
        out[:, idx, idx, :, :] = d2g(X)
        return out

    return DiffusionField(n=n, sigma=sigma, sigma_derivative=deriv, sigma_second=second,
                          ellipticity=ellipticity, column_hamiltonians=hams, c3_witness=witness,
                          name=name, params=params)


def diag_poly(n=1, a=0.1, box_half_width=1.0):
    """``sigma = diag(1 + a p^2, 1 + a q^2)`` per degree of freedom.

    Every column is Hamiltonian (``H_q = p + a p^3 / 3``, ``H_p = -(q + a q^3 / 3)``)
    but the columns do not commute.  Ellipticity bounds refer to the box
    ``|x_i| <= box_half_width``.
    """
    d = 2 * n
    swap = np.concatenate([np.arange(n, d), np.arange(n)])  # entry i depends on coordinate swap[i]

    def g(X):
        return 1.0 + a * X[:, swap] ** 2

    def dg(X):
        out = np.zeros((X.shape[0], d, d))
        out[:, np.arange(d), swap] = 2 * a * X[:, swap]
        return out

    def d2g(X):
        out = np.zeros((X.shape[0], d, d, d))
        out[:, np.arange(d), swap, swap] = 2 * a
        return out

    hams = []
    for j in range(n):
        hams.append((lambda X, j=j: X[:, n + j] + a * X[:, n + j] ** 3 / 3,
                     lambda X, j=j: _unit_grad(X, n + j, 1 + a * X[:, n + j] ** 2)))
    for j in range(n):
        hams.append((lambda X, j=j: -(X[:, j] + a * X[:, j] ** 3 / 3),
                     lambda X, j=j: _unit_grad(X, j, -(1 + a * X[:, j] ** 2))))
    hi = (1 + a * box_half_width ** 2) ** 2
    return _diag_field(n, g, dg, d2g, "diag_poly", {"n": n, "a": a, "box_half_width": box_half_width},
                       (1.0, hi), hams=hams)


def _unit_grad(X, k, values):
    out = np.zeros_like(X)
    out[:, k] = values
    return out


def diag_sqrt(n=1, box_half_width=1.0):
    """``sigma = diag(sqrt(1 + q^2), sqrt(1 + p^2))``: commuting columns, not Hamiltonian.

    ``U(y) = sinh(y)`` componentwise satisfies ``sigma(U) = DU``.
    """
    d = 2 * n
    ar = np.arange(d)

    def g(X):
        return np.sqrt(1.0 + X * X)

    def dg(X):
        out = np.zeros((X.shape[0], d, d))
        out[:, ar, ar] = X / np.sqrt(1.0 + X * X)
        return out

    def d2g(X):
        out = np.zeros((X.shape[0], d, d, d))
        out[:, ar, ar, ar] = (1.0 + X * X) ** -1.5
        return out

    yb = float(np.arcsinh(box_half_width))
    witness = C3Witness(U=np.sinh, DU=lambda Y: _diag_stack(np.cosh(Y)), box=tuple((-yb, yb) for _ in range(d)))
    return _diag_field(n, g, dg, d2g, "diag_sqrt", {"n": n, "box_half_width": box_half_width},
                       (1.0, 1.0 + box_half_width ** 2), witness=witness)


def _diag_stack(V):
    M, d = V.shape
    out = np.zeros((M, d, d))
    out[:, np.arange(d), np.arange(d)] = V
    return out


def diag_linear(lam=0.1):
    """``sigma = diag(q, 1)``: degenerate on the line ``q = 0`` (C2 negative control)."""

    def sigma(X):
        return _diag_stack(np.stack([X[:, 0], np.ones(X.shape[0])], axis=1))

    def deriv(X):
        out = np.zeros((X.shape[0], 2, 2, 2))
        out[:, 0, 0, 0] = 1.0
        return out

    return DiffusionField(n=1, sigma=sigma, sigma_derivative=deriv,
                          sigma_second=lambda X: np.zeros((X.shape[0], 2, 2, 2, 2)),
                          ellipticity=(lam, 1.0), name="diag_linear", params={"lam": lam})


FIELDS = {
    "identity": identity,
    "diag_poly": diag_poly,
    "diag_sqrt": diag_sqrt,
    "diag_linear": diag_linear,
    "constant": constant_field,
}


def make_field(name, **params):
    try:
        factory = FIELDS[name]
    except KeyError:
        raise ContractViolation(f"unknown field {name!r}; known: {sorted(FIELDS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ContractViolation(f"bad parameters for field {name!r}: {exc}") from None
