"""Hamiltonian systems, the symplectic matrix and symplectic flows.

Phase points are ``x = (q_1..q_n, p_1..p_n)`` and the symplectic matrix is
``J = [[0, I], [-I, 0]]`` so that ``J grad H = (dH/dp, -dH/dq)``.  With the
opposite block-sign convention every trajectory is traversed backwards.

All system callables are *batch* callables: they take an ``(M, 2n)`` array
and return ``(M,)`` energies, ``(M, 2n)`` gradients or ``(M, 2n, 2n)``
Hessians.  The ``*_at`` helpers accept a single point as well.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ChartSingularityError, ContractViolation, IntegrationFailure, NumericDomainError
from .paths import DiscretePath

FD_STEP = 1e-5
MIDPOINT_TOL = 1e-12
MIDPOINT_MAXITER = 50


def symplectic_matrix(n):
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, I], [-I, Z]])


def apply_J(g):
    """``J @ g`` along the last axis, without a matrix product."""
    n = g.shape[-1] // 2
    return np.concatenate([g[..., n:], -g[..., :n]], axis=-1)


def as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ContractViolation(f"expected points of length {dim}, got shape {x.shape}")
    return X, single


def fd_gradient(energy, X, h=FD_STEP):
    """Central finite-difference gradient of a batch energy."""
    M, d = X.shape
    out = np.empty((M, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        out[:, j] = (energy(X + e) - energy(X - e)) / (2 * h)
    return out


def fd_jacobian(fn, X, h=FD_STEP):
    """Central differences of a batch vector field; ``out[m, i, j] = d fn_i / d x_j``."""
    M, d = X.shape
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        cols.append((fn(X + e) - fn(X - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class NearlyIntegrable:
    """Decomposition ``H(theta, I) = h0(I) + eta * shape(theta, I)``.

    ``shape_gradients`` returns ``(dP/dtheta, dP/dI)`` of the unit-amplitude
    shape, each ``(M, n)``.
    """

    h0: Callable
    h0_gradient: Callable
    shape: Callable
    shape_gradients: Callable
    eta: float = 0.0
    h0_hessian: Optional[Callable] = None
    shape_hessian: Optional[Callable] = None
    shape_depends_on_action: bool = True

    def perturbation(self, theta, action):
        return self.eta * self.shape(theta, action)

    def perturbation_gradients(self, theta, action):
        dth, dI = self.shape_gradients(theta, action)
        return self.eta * dth, self.eta * dI


@dataclass(frozen=True, eq=False)
class HamiltonianSystem:
    n: int
    energy: Callable
    gradient: Optional[Callable] = None
    hessian: Optional[Callable] = None
    separable: bool = False
    lipschitz_bound: Optional[float] = None
    nearly_integrable: Optional[NearlyIntegrable] = None
    chart: Optional[str] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ContractViolation("n must be a positive integer")
        if self.chart not in (None, "oscillator", "canonical"):
            raise ContractViolation(f"unknown chart {self.chart!r}")

    @property
    def dim(self):
        return 2 * self.n

    def energy_at(self, x):
        X, single = as_batch(x, self.dim)
        e = np.asarray(self.energy(X), dtype=float)
        return float(e[0]) if single else e

    def gradient_at(self, x):
        X, single = as_batch(x, self.dim)
        g = self.gradient(X) if self.gradient is not None else fd_gradient(self.energy, X)
        g = np.asarray(g, dtype=float)
        return g[0] if single else g

    def hessian_at(self, x):
        X, single = as_batch(x, self.dim)
        if self.hessian is not None:
            h = np.asarray(self.hessian(X), dtype=float)
        else:
            h = fd_jacobian(lambda Y: self.gradient_at(Y), X)
            h = 0.5 * (h + np.swapaxes(h, 1, 2))
        return h[0] if single else h

    def shifted(self, c):
        """Same dynamics, energy offset by the constant ``c``."""
        base = self.energy
        return replace(self, energy=lambda X: base(X) + c, name=f"{self.name}+const")

    def with_eta(self, eta):
        if self.nearly_integrable is None:
            raise ContractViolation(f"system {self.name!r} has no nearly-integrable decomposition")
        return nearly_integrable_system(replace(self.nearly_integrable, eta=float(eta)), self.n,
                                        name=self.name, params={**self.params, "eta": float(eta)})


def symplectic_gradient(sys, x):
    """Hamiltonian vector field ``J grad H(x)``.

    Examples
    --------
    >>> symplectic_gradient(harmonic(), [1.0, 0.0])
    array([ 0., -1.])
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != sys.dim:
        raise ContractViolation(f"point has length {x.shape[-1]}, system needs {sys.dim}")
    g = sys.gradient_at(x)
    if not np.all(np.isfinite(g)):
        raise NumericDomainError(f"non-finite gradient at x={x.tolist()}", point=x)
    return apply_J(g)


def _vector_field(sys, direction):
    def f(X):
        return direction * apply_J(sys.gradient_at(X))

    return f


def _verlet_step(sys, X, dt, direction):
    n = sys.n
    s = direction * dt
    q, p = X[:, :n], X[:, n:]
    g = sys.gradient_at(X)
    p_half = p - 0.5 * s * g[:, :n]
    g = sys.gradient_at(np.concatenate([q, p_half], axis=1))
    q_new = q + s * g[:, n:]
    g = sys.gradient_at(np.concatenate([q_new, p_half], axis=1))
    p_new = p_half - 0.5 * s * g[:, :n]
    return np.concatenate([q_new, p_new], axis=1)


def _midpoint_step(f, X, dt, step_index):
    with np.errstate(over="ignore", invalid="ignore"):
        Y = X + dt * f(X)
        for _ in range(MIDPOINT_MAXITER):
            Y_new = X + dt * f(0.5 * (X + Y))
            err = np.max(np.abs(Y_new - Y))
            Y = Y_new
            if not np.isfinite(err):
                break
            if err <= MIDPOINT_TOL * (1.0 + np.max(np.abs(Y))):
                return Y
    raise IntegrationFailure(
        f"implicit midpoint did not converge within {MIDPOINT_MAXITER} iterations at step {step_index}",
        step=step_index)


def flow_batch(sys, X0, T, N, direction=1, scheme=None):
    """Symplectic flow for a batch of initial points; returns ``(N+1, M, 2n)``."""
    X = np.array(X0, dtype=float)
    dt = T / N
    if scheme is None:
        scheme = "verlet" if sys.separable else "midpoint"
    out = np.empty((N + 1,) + X.shape)
    out[0] = X
    f = _vector_field(sys, direction)
    for k in range(N):
        if scheme == "verlet":
            X = _verlet_step(sys, X, dt, direction)
        elif scheme == "midpoint":
            X = _midpoint_step(f, X, dt, k)
        else:
            raise ContractViolation(f"unknown scheme {scheme!r}")
        out[k + 1] = X
    return out


def deterministic_flow(sys, x0, T, N, *, direction=1, scheme=None, max_dt=None):
    """Grid solution of ``dx/dt = J grad H(x)`` by a symplectic scheme.

    Stormer-Verlet is used when ``sys.separable`` declares ``H = T(p) + V(q)``,
    implicit midpoint (fixed point iteration) otherwise.  ``direction=-1``
    integrates with ``-J``, i.e. backwards in time.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.dim,):
        raise ContractViolation(f"x0 must have length {sys.dim}")
    if N < 2 or not T > 0:
        raise ContractViolation("need N >= 2 and T > 0")
    if max_dt is not None and T / N > max_dt:
        raise ContractViolation(f"dt = {T / N:g} exceeds the configured bound {max_dt:g}")
    vals = flow_batch(sys, x0[None, :], T, N, direction=direction, scheme=scheme)[:, 0, :]
    return DiscretePath(T, vals)


def explicit_euler(sys, x0, T, N):
    """Forward Euler on Hamilton's equations (reference for the SDE scheme at zero noise)."""
    x = np.asarray(x0, dtype=float)[None, :]
    dt = T / N
    out = [x[0]]
    for _ in range(N):
        x = x + dt * apply_J(sys.gradient_at(x))
        out.append(x[0])
    return DiscretePath(T, np.array(out))


# -- action-angle charts ----------------------------------------------------

def to_action_angle(sys, x):
    """Return ``(theta, action)`` for a phase point.

    For the ``"oscillator"`` chart ``I_j = (q_j^2 + p_j^2) / 2`` and
    ``theta_j = atan2(p_j, q_j)`` (reported in ``[0, 2 pi)``).  Under the
    ``J`` convention above this chart reverses orientation: the harmonic flow
    moves ``theta`` at rate ``-1``.  For ``"canonical"`` systems the
    coordinates already are ``(theta, I)``.
    """
    x = np.asarray(x, dtype=float)
    n = sys.n
    if x.shape[-1] != 2 * n:
        raise ContractViolation(f"point has length {x.shape[-1]}, system needs {2 * n}")
    if sys.chart == "canonical":
        return np.mod(x[..., :n], 2 * np.pi), x[..., n:].copy()
    if sys.chart != "oscillator":
        raise ContractViolation(f"system {sys.name!r} declares no action-angle chart")
    q, p = x[..., :n], x[..., n:]
    action = 0.5 * (q * q + p * p)
    if np.any(action == 0.0):
        raise ChartSingularityError("angle undefined where an action vanishes")
    theta = np.mod(np.arctan2(p, q), 2 * np.pi)
    return theta, action


def from_action_angle(sys, theta, action):
    theta = np.asarray(theta, dtype=float)
    action = np.asarray(action, dtype=float)
    if theta.shape[-1] != sys.n or action.shape[-1] != sys.n:
        raise ContractViolation(f"theta and action need {sys.n} components")
    if np.any(action < 0):
        raise ContractViolation("actions must be non-negative")
    if sys.chart == "canonical":
        return np.concatenate([theta, action], axis=-1)
    if sys.chart != "oscillator":
        raise ContractViolation(f"system {sys.name!r} declares no action-angle chart")
    r = np.sqrt(2.0 * action)
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)], axis=-1)


# -- library systems --------------------------------------------------------

def harmonic(n=1):
    """``H = sum_j (q_j^2 + p_j^2) / 2``."""
    return HamiltonianSystem(
        n=n,
        energy=lambda X: 0.5 * np.sum(X * X, axis=1),
        gradient=lambda X: X.copy(),
        hessian=lambda X: np.broadcast_to(np.eye(2 * n), (X.shape[0], 2 * n, 2 * n)).copy(),
        separable=True,
        lipschitz_bound=1.0,
        chart="oscillator",
        name="harmonic",
        params={"n": n},
    )


def pendulum():
    """``H = p^2 / 2 - cos q``."""

    def hess(X):
        out = np.zeros((X.shape[0], 2, 2))
        out[:, 0, 0] = np.cos(X[:, 0])
        out[:, 1, 1] = 1.0
        return out

    return HamiltonianSystem(
        n=1,
        energy=lambda X: 0.5 * X[:, 1] ** 2 - np.cos(X[:, 0]),
        gradient=lambda X: np.stack([np.sin(X[:, 0]), X[:, 1]], axis=1),
        hessian=hess,
        separable=True,
        lipschitz_bound=1.0,
        name="pendulum",
    )


def free(n=1):
    """``H = 0``: no drift at all."""
    d = 2 * n
    return HamiltonianSystem(
        n=n,
        energy=lambda X: np.zeros(X.shape[0]),
        gradient=lambda X: np.zeros_like(X),
        hessian=lambda X: np.zeros((X.shape[0], d, d)),
        separable=True,
        name="free",
        params={"n": n},
    )


def nearly_integrable_system(record, n, name="nearly-integrable", params=None):
    """Hamiltonian in canonical action-angle coordinates ``x = (theta, I)``."""

    def energy(X):
        th, I = X[:, :n], X[:, n:]
        return record.h0(I) + record.perturbation(th, I)

    def gradient(X):
        th, I = X[:, :n], X[:, n:]
        dth, dI = record.perturbation_gradients(th, I)
        return np.concatenate([dth, record.h0_gradient(I) + dI], axis=1)

    hessian = None
    if record.h0_hessian is not None and record.shape_hessian is not None:
        def hessian(X):
            th, I = X[:, :n], X[:, n:]
            out = record.eta * record.shape_hessian(th, I)
            out[:, n:, n:] += record.h0_hessian(I)
            return out

    lip = None
    if name == "twist2d":
        lip = max(1.0, 2.0 * abs(record.eta)) if record.eta else 1.0
    return HamiltonianSystem(
        n=n,
        energy=energy,
        gradient=gradient,
        hessian=hessian,
        separable=not record.shape_depends_on_action,
        lipschitz_bound=lip,
        nearly_integrable=record,
        chart="canonical",
        name=name,
        params=params or {},
    )


def twist2d(eta=0.0):
    """``H0(I) = (I1^2 + I2^2) / 2`` perturbed by ``eta cos(theta1 + theta2)``."""

    def shape_hess(th, I):
        c = np.cos(th[:, 0] + th[:, 1])
        out = np.zeros((th.shape[0], 4, 4))
        out[:, :2, :2] = -c[:, None, None]
        return out

    def shape_grads(th, I):
        s = np.sin(th[:, 0] + th[:, 1])
        return np.stack([-s, -s], axis=1), np.zeros_like(I)

    rec = NearlyIntegrable(
        h0=lambda I: 0.5 * np.sum(I * I, axis=1),
        h0_gradient=lambda I: I.copy(),
        shape=lambda th, I: np.cos(th[:, 0] + th[:, 1]),
        shape_gradients=shape_grads,
        eta=float(eta),
        h0_hessian=lambda I: np.broadcast_to(np.eye(2), (I.shape[0], 2, 2)).copy(),
        shape_hessian=shape_hess,
        shape_depends_on_action=False,
    )
    return nearly_integrable_system(rec, 2, name="twist2d", params={"eta": float(eta)})


def rotor(omega=(1.0,)):
    """Integrable ``H0(I) = omega . I`` in action-angle form (linear frequencies)."""
    w = np.asarray(omega, dtype=float)
    n = w.size
    rec = NearlyIntegrable(
        h0=lambda I: I @ w,
        h0_gradient=lambda I: np.broadcast_to(w, I.shape).copy(),
        shape=lambda th, I: np.zeros(th.shape[0]),
        shape_gradients=lambda th, I: (np.zeros_like(th), np.zeros_like(I)),
        h0_hessian=lambda I: np.zeros((I.shape[0], n, n)),
        shape_hessian=lambda th, I: np.zeros((th.shape[0], 2 * n, 2 * n)),
        shape_depends_on_action=False,
    )
    return nearly_integrable_system(rec, n, name="rotor", params={"omega": w.tolist()})


SYSTEMS = {
    "harmonic": harmonic,
    "pendulum": pendulum,
    "free": free,
    "twist2d": twist2d,
    "rotor": rotor,
}


def make_system(name, **params):
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ContractViolation(f"unknown system {name!r}; known: {sorted(SYSTEMS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ContractViolation(f"bad parameters for system {name!r}: {exc}") from None
