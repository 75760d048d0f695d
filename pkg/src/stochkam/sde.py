"""Brownian drivers and strong solvers for the Stratonovich SDE.

The equation is ``dX = J grad H(X) dt + gamma sigma(X) o dW``.  The default
scheme is Euler-Maruyama on the equivalent Ito form, whose drift carries
``gamma^2`` times :func:`~stochkam.noise.ito_drift_correction`; the
Stratonovich Heun predictor-corrector is available as a cross-check.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ContractViolation, DomainExit
from .hamiltonian import apply_J
from .noise import ito_drift_correction
from .paths import DiscretePath, write_csv

SCHEMES = ("euler", "heun")


@dataclass(frozen=True, eq=False)
class BrownianPath:
    T: float
    N: int
    increments: np.ndarray
    seed: int = 0
    stream_id: int = 0

    @property
    def dim(self):
        return self.increments.shape[1]

    @property
    def dt(self):
        return self.T / self.N

    def values(self):
        """``W(t_k)`` for ``k = 0..N``."""
        return np.vstack([np.zeros(self.dim), np.cumsum(self.increments, axis=0)])

    def coarsen(self, factor):
        """Same Brownian path observed on a grid ``factor`` times coarser."""
        if self.N % factor:
            raise ContractViolation(f"N={self.N} is not divisible by {factor}")
        inc = self.increments.reshape(self.N // factor, factor, self.dim).sum(axis=1)
        return BrownianPath(self.T, self.N // factor, inc, self.seed, self.stream_id)


@dataclass(frozen=True)
class NoiseConfig:
    gamma: float = 1.0
    seed: int = 0
    M: int = 1

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ContractViolation("gamma must be non-negative")
        if int(self.M) != self.M or self.M < 1:
            raise ContractViolation("M must be a positive integer")


def brownian_increments(T, N, dim, seed, streams, step_range=None, backend=None):
    """Increments ``(len(streams), N, dim)`` from the counter-based generator."""
    keys = kernels.stream_keys(seed, streams)
    sq = np.sqrt(T / N)
    steps = range(N) if step_range is None else step_range
    out = np.empty((len(keys), len(steps), dim))
    for j, k in enumerate(steps):
        out[:, j, :] = kernels.counter_normals(keys, k, dim, backend=backend) * sq
    return out


def sample_brownian(T, N, dim, seed=0, stream_id=0, backend=None):
    """Brownian increments on a uniform grid, reproducible from ``(seed, stream_id)``."""
    if N < 1 or dim < 1 or not T > 0:
        raise ContractViolation("need N >= 1, dim >= 1 and T > 0")
    inc = brownian_increments(T, N, dim, seed, [stream_id], backend=backend)[0]
    return BrownianPath(float(T), int(N), inc, int(seed), int(stream_id))


def _sigma_times(S, dW):
    return np.einsum("mab,mb->ma", S, dW)


def _drift(sys, fld, X, gamma, ito):
    f = apply_J(sys.gradient_at(X))
    if ito and gamma != 0 and not fld.constant:
        f = f + gamma * gamma * ito_drift_correction(fld, X)
    return f


def advance(sys, fld, X, dW, dt, gamma, scheme="euler"):
    """One step for a batch of states ``X`` with increments ``dW`` (both ``(M, d)``)."""
    if scheme == "euler":
        drift = _drift(sys, fld, X, gamma, ito=True)
        if gamma == 0:
            return X + drift * dt
        return X + drift * dt + gamma * _sigma_times(fld.sigma_at(X), dW)
    if scheme == "heun":
        f0 = _drift(sys, fld, X, gamma, ito=False)
        if gamma == 0:
            return X + f0 * dt
        g0 = _sigma_times(fld.sigma_at(X), dW)
        Xp = X + f0 * dt + gamma * g0
        f1 = _drift(sys, fld, Xp, gamma, ito=False)
        g1 = _sigma_times(fld.sigma_at(Xp), dW)
        return X + 0.5 * (f0 + f1) * dt + 0.5 * gamma * (g0 + g1)
    raise ContractViolation(f"unknown scheme {scheme!r}; use one of {SCHEMES}")


def _outside(X, box):
    if box is None:
        return np.zeros(X.shape[0], dtype=bool)
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return ~np.all((X >= lo) & (X <= hi), axis=1)


def integrate_stratonovich(sys, fld, x0, noise, gamma, *, scheme="euler", box=None, max_dt=None):
    """Strong solution of the SDE along one Brownian path.

    Raises :class:`~stochkam.errors.DomainExit` when the state leaves ``box``;
    the exception carries the exit step and the path computed so far.
    """
    x0 = np.asarray(x0, dtype=float)
    if noise.dim != sys.dim or x0.shape != (sys.dim,) or fld.dim != sys.dim:
        raise ContractViolation("system, field, x0 and noise dimensions disagree")
    if not gamma >= 0:
        raise ContractViolation("gamma must be non-negative")
    if max_dt is not None and noise.dt > max_dt:
        raise ContractViolation(f"dt = {noise.dt:g} exceeds the configured bound {max_dt:g}")
    vals = np.empty((noise.N + 1, sys.dim))
    vals[0] = x0
    X = x0[None, :]
    for k in range(noise.N):
        X = advance(sys, fld, X, noise.increments[k][None, :], noise.dt, gamma, scheme)
        vals[k + 1] = X[0]
        if _outside(X, box)[0] or not np.all(np.isfinite(X)):
            raise DomainExit(k + 1, vals[: k + 2].copy())
    return DiscretePath(noise.T, vals)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ensemble member; ``exit_step`` is set when the replicate left the box."""

    replicate: int
    path: Optional[DiscretePath]
    values: np.ndarray
    exit_step: Optional[int] = None

    @property
    def exited(self):
        return self.exit_step is not None


def ensemble(sys, fld, x0, T, N, cfg, *, scheme="euler", box=None, backend=None):
    """``cfg.M`` trajectories; replicate ``j`` is driven by stream ``j`` of ``cfg.seed``.

    Replicates are advanced together but each one only consumes its own
    stream, so the result does not depend on evaluation order or batching.
    Replicates that leave ``box`` are frozen and returned with ``exit_step``.
    """
    x0 = np.asarray(x0, dtype=float)
    d = sys.dim
    dt = T / N
    keys = kernels.stream_keys(cfg.seed, np.arange(cfg.M))
    vals = np.empty((N + 1, cfg.M, d))
    vals[0] = x0
    X = np.tile(x0, (cfg.M, 1))
    live = np.ones(cfg.M, dtype=bool)
    exit_step = np.full(cfg.M, -1)
    sq = np.sqrt(dt)
    for k in range(N):
        dW = kernels.counter_normals(keys, k, d, backend=backend) * sq
        Xn = X.copy()
        if np.any(live):
            Xn[live] = advance(sys, fld, X[live], dW[live], dt, cfg.gamma, scheme)
        out = live & (_outside(Xn, box) | ~np.all(np.isfinite(Xn), axis=1))
        exit_step[out] = k + 1
        live &= ~out
        X = Xn
        vals[k + 1] = X
    result = []
    for j in range(cfg.M):
        if exit_step[j] >= 0:
            result.append(Trajectory(j, None, vals[: exit_step[j] + 1, j].copy(), int(exit_step[j])))
        else:
            v = vals[:, j].copy()
            result.append(Trajectory(j, DiscretePath(T, v), v))
    return result


def dump_ensemble(trajs, directory, long_format=True):
    """CSV dump: ``trajectories.csv`` with a replicate column, or one file per replicate."""
    import os

    os.makedirs(directory, exist_ok=True)
    complete = [(t.replicate, t.path) for t in trajs if t.path is not None]
    files = []
    if long_format:
        fn = os.path.join(directory, "trajectories.csv")
        if complete:
            write_csv(complete, fn, replicate_column=True)
            files.append(fn)
    else:
        for rep, p in complete:
            fn = os.path.join(directory, f"replicate_{rep:06d}.csv")
            write_csv(p, fn)
            files.append(fn)
    return files
