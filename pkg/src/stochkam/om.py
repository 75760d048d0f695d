"""Onsager-Machlup action, rate function and most probable paths.

For a path ``phi`` the action is

    total = int |sigma^{-1}(phi) (J grad H(phi) - phi')|^2 ds
            - int (div sigma)(phi) . sigma^{-1}(phi) J grad H(phi) ds

and the large deviation rate is one half of the first (quadratic) integral.
Both are discretised with the midpoint rule: on interval ``k`` the state is
``(x_k + x_{k+1}) / 2`` and the velocity ``(x_{k+1} - x_k) / dt``, so the
quadratic term of an implicit-midpoint Hamiltonian orbit is exactly zero.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import minimize

from .errors import ContractViolation, NearSingularError
from .hamiltonian import apply_J, deterministic_flow
from .noise import check_hamiltonian_columns, divergence_gradient, divergence_sigma, sigma_inverse
from .paths import DiscretePath

GRAD_TOL = 1e-8
MAX_ITER = 10_000
QUADRATURE = "midpoint"


@dataclass(frozen=True)
class ActionBreakdown:
    quadratic_term: float
    divergence_term: float
    total: float
    N: int
    quadrature: str = QUADRATURE

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RateValue:
    value: float
    finite: bool

    def to_dict(self):
        return asdict(self)


def _check(sys, fld, path, min_N=1):
    if path.dim != sys.dim or fld.dim != sys.dim:
        raise ContractViolation("path, system and field dimensions disagree")
    if path.N < min_N:
        raise ContractViolation(f"need at least {min_N} intervals")


def _sinv(fld, M, index_offset=0):
    try:
        return sigma_inverse(fld, M)
    except NearSingularError as exc:
        raise NearSingularError(f"{exc} (interval {exc.index + index_offset})", point=exc.point,
                                index=exc.index + index_offset) from None


def _terms(sys, fld, M, V, derivatives=False):
    """Integrand pieces at states ``M`` with velocities ``V`` (both ``(K, d)``).

    Returns ``(quad, div, dL_dm, dL_dv)`` where ``L = quad - div``; the
    derivative arrays are ``None`` unless requested.
    """
    Sinv = _sinv(fld, M)
    f = apply_J(sys.gradient_at(M))
    r = np.einsum("kab,kb->ka", Sinv, f - V)
    quad = np.sum(r * r, axis=1)
    dv = divergence_sigma(fld, M)
    w = np.einsum("kab,kb->ka", Sinv, f)
    div = np.sum(dv * w, axis=1)
    if not derivatives:
        return quad, div, None, None
    D = fld.derivative_at(M)  # [k, a, b, c] = d sigma_ab / d x_c
    Df = apply_J_rows(sys.hessian_at(M))  # [k, a, c] = d f_a / d x_c
    s = np.einsum("kab,kb->ka", Sinv, r)
    # d quad / d m_c = -2 s^T Dsigma_c r + 2 s . Df[:, c]
    dq = -2.0 * np.einsum("ka,kabc,kb->kc", s, D, r) + 2.0 * np.einsum("ka,kac->kc", s, Df)
    u = np.einsum("kab,kb->ka", Sinv, dv)
    dd = (np.einsum("kjc,kj->kc", divergence_gradient(fld, M), w)
          - np.einsum("ka,kabc,kb->kc", u, D, w)
          + np.einsum("ka,kac->kc", u, Df))
    dL_dm = dq - dd
    dL_dv = -2.0 * s
    return quad, div, dL_dm, dL_dv


def apply_J_rows(A):
    """``J @ A`` for a batch of matrices ``(K, d, d)``."""
    n = A.shape[1] // 2
    return np.concatenate([A[:, n:, :], -A[:, :n, :]], axis=1)


def _midpoints(values, dt):
    return 0.5 * (values[1:] + values[:-1]), np.diff(values, axis=0) / dt


def om_action(sys, fld, path):
    """Midpoint-rule Onsager-Machlup action of a discrete path."""
    _check(sys, fld, path, min_N=2)
    M, V = _midpoints(path.values, path.dt)
    quad, div, _, _ = _terms(sys, fld, M, V)
    q = float(path.dt * np.sum(quad))
    dv = float(path.dt * np.sum(div))
    return ActionBreakdown(q, dv, q - dv, path.N)


def rate_function(sys, fld, path, x0):
    """Large deviation rate ``I(phi)``: half the quadratic term, or infinite.

    The finite branch requires ``phi(0) == x0`` exactly; any finite discrete
    path then has finite derivative energy.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (path.dim,) or not np.array_equal(path.values[0], x0):
        return RateValue(float("inf"), False)
    b = om_action(sys, fld, path)
    return RateValue(0.5 * b.quadratic_term, True)


def _interior_gradient(sys, fld, values, dt):
    M, V = _midpoints(values, dt)
    quad, div, Lm, Lv = _terms(sys, fld, M, V, derivatives=True)
    total = dt * float(np.sum(quad - div))
    grad = 0.5 * dt * (Lm[:-1] + Lm[1:]) + (Lv[:-1] - Lv[1:])
    return total, grad


def om_gradient(sys, fld, path):
    """Exact gradient of the discrete action with respect to the interior nodes.

    Returns an ``(N - 1, 2n)`` array; endpoints are held fixed.
    """
    _check(sys, fld, path, min_N=3)
    return _interior_gradient(sys, fld, path.values, path.dt)[1]


@dataclass(frozen=True, eq=False)
class MPPResult:
    path: DiscretePath
    converged: bool
    iterations: int
    grad_norm: float
    action: ActionBreakdown
    message: str = ""

    def to_dict(self):
        return {"converged": self.converged, "iterations": self.iterations, "grad_norm": self.grad_norm,
                "action": self.action.to_dict(), "message": self.message}


def _banded_hessian(fun_grad, z, n_nodes, d, h=1e-6):
    """Block-tridiagonal Hessian from ``3 d`` gradient differences (node colouring)."""
    K = n_nodes * d
    bw = 2 * d - 1  # half bandwidth in the flattened ordering
    ab = np.zeros((2 * bw + 1, K))
    for colour in range(3):
        for c in range(d):
            e = np.zeros((n_nodes, d))
            e[colour::3, c] = h
            e = e.ravel()
            dg = (fun_grad(z + e)[1] - fun_grad(z - e)[1]) / (2 * h)
            dg = dg.reshape(n_nodes, d)
            for node in range(colour, n_nodes, 3):
                col = node * d + c
                lo_node, hi_node = max(node - 1, 0), min(node + 1, n_nodes - 1)
                rows = np.arange(lo_node * d, (hi_node + 1) * d)
                vals = dg.ravel()[rows]
                ab[bw + rows - col, col] = vals
    return ab, bw


def solve_mpp(sys, fld, x0, xT, T, N, init=None, *, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Fixed-endpoint minimiser of the discrete action over the interior nodes.

    Quasi-Newton (L-BFGS with line search) from a straight line or ``init``,
    followed by Newton polishing steps with a finite-difference banded
    Hessian when the sup-norm of the gradient is still above ``tol``.
    Non-convergence is reported through ``converged=False`` together with the
    best iterate, never raised.
    """
    x0 = np.asarray(x0, dtype=float)
    xT = np.asarray(xT, dtype=float)
    d = sys.dim
    if N < 3:
        raise ContractViolation("need N >= 3")
    if init is None:
        init = DiscretePath.straight_line(x0, xT, T, N)
    elif init.N != N or not (np.array_equal(init.values[0], x0) and np.array_equal(init.values[-1], xT)):
        raise ContractViolation("init must share the grid and endpoints")
    dt = T / N
    vals = init.values.copy()

    def fun_grad(z):
        vals[1:-1] = z.reshape(N - 1, d)
        total, g = _interior_gradient(sys, fld, vals, dt)
        return total, g.ravel()

    z = init.values[1:-1].ravel().copy()
    res = minimize(fun_grad, z, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxcor": 30, "maxls": 50})
    z = res.x
    iterations = int(res.nit)
    f, g = fun_grad(z)
    gnorm = float(np.max(np.abs(g)))
    best = (gnorm, z.copy())
    polish = 0
    while gnorm > tol and polish < 50:
        ab, bw = _banded_hessian(fun_grad, z, N - 1, d)
        try:
            step = solve_banded((bw, bw), ab, -g)
        except (np.linalg.LinAlgError, ValueError):
            break
        t = 1.0
        while t > 1e-8:
            f_new, g_new = fun_grad(z + t * step)
            if f_new <= f + 1e-4 * t * float(g @ step) or np.max(np.abs(g_new)) < gnorm:
                break
            t *= 0.5
        z = z + t * step
        f, g = fun_grad(z)
        gnorm = float(np.max(np.abs(g)))
        polish += 1
        if gnorm < best[0]:
            best = (gnorm, z.copy())
    gnorm, z = best
    vals[1:-1] = z.reshape(N - 1, d)
    path = DiscretePath(T, vals.copy())
    converged = gnorm <= tol
    msg = "converged" if converged else f"gradient sup-norm {gnorm:.3g} above tolerance {tol:g}"
    return MPPResult(path, converged, iterations + polish, gnorm, om_action(sys, fld, path), msg)


def euler_lagrange_residual(sys, fld, path):
    """Discrete Euler-Lagrange residual ``dL/dy - d/dt dL/dy'`` at interior nodes.

    ``dL/dy`` is evaluated at node ``k`` with the central velocity
    ``(x_{k+1} - x_{k-1}) / (2 dt)``; ``dL/dy'`` lives on the interval
    midpoints and is differenced across node ``k``.  Both pieces are
    second-order accurate, so a smooth solution of the continuous
    Euler-Lagrange equation leaves an ``O(dt^2)`` residual.

    Returns ``(max_norm, per_node_norms)``.
    """
    _check(sys, fld, path, min_N=3)
    x = path.values
    dt = path.dt
    Vc = (x[2:] - x[:-2]) / (2 * dt)
    _, _, Ly, _ = _terms(sys, fld, x[1:-1], Vc, derivatives=True)
    M, V = _midpoints(x, dt)
    _, _, _, Lv = _terms(sys, fld, M, V, derivatives=True)
    res = Ly - (Lv[1:] - Lv[:-1]) / dt
    norms = np.linalg.norm(res, axis=1)
    return float(norms.max()), norms


@dataclass(frozen=True, eq=False)
class FlowCheckReport:
    status: str
    passed: Optional[bool]
    action: float
    distance: float
    divergence_term: float
    mpp: Optional[MPPResult]
    flow: DiscretePath
    c4: object
    thresholds: tuple = (1e-6, 1e-3, 1e-10)

    def to_dict(self):
        return {"status": self.status, "passed": self.passed, "action": self.action,
                "distance": self.distance, "divergence_term": self.divergence_term,
                "thresholds": {"action": self.thresholds[0], "distance": self.thresholds[1],
                               "divergence_term": self.thresholds[2]},
                "c4": self.c4.to_dict(), "mpp": None if self.mpp is None else self.mpp.to_dict()}


def _path_box(values, pad=0.05):
    lo = values.min(axis=0)
    hi = values.max(axis=0)
    span = np.maximum(hi - lo, 1e-3)
    return [(a - pad * s, b + pad * s) for a, b, s in zip(lo, hi, span)]


def verify_theorem2(sys, fld, x0, T, N, *, box=None, samples=1024):
    """Check that the most probable path between flow endpoints is the flow itself.

    The endpoint is the deterministic flow of ``x0`` after time ``T``.  When
    every column of sigma is Hamiltonian on ``box`` (default: a box around the
    flow path) the minimiser must have action <= 1e-6, lie within 1e-3 of the
    flow path and carry a divergence term <= 1e-10 in magnitude.  Otherwise
    the coincidence check is skipped and the non-zero divergence term along
    the flow path is reported.
    """
    flow = deterministic_flow(sys, x0, T, N)
    if box is None:
        box = _path_box(flow.values)
    c4 = check_hamiltonian_columns(fld, box, samples)
    a_tol, d_tol, div_tol = 1e-6, 1e-3, 1e-10
    if not c4.passed:
        div = om_action(sys, fld, flow).divergence_term
        return FlowCheckReport(
            status=f"skipped: columns of sigma are not Hamiltonian (C4 fails, asymmetry {c4.worst_magnitude:.3g}); "
                   f"divergence term along the flow path is {div:.6g}",
            passed=None, action=float("nan"), distance=float("nan"), divergence_term=div,
            mpp=None, flow=flow, c4=c4)
    res = solve_mpp(sys, fld, flow.values[0], flow.values[-1], T, N)
    action = res.action.total
    dist = res.path.sup_distance(flow)
    div = res.action.divergence_term
    ok = bool(res.converged and abs(action) <= a_tol and dist <= d_tol and abs(div) <= div_tol)
    status = "pass" if ok else ("fail" if res.converged else f"fail: solver {res.message}")
    return FlowCheckReport(status, ok, action, dist, div, res, flow, c4)
