"""Tube probabilities: Monte Carlo estimates, the Brownian small-ball series,
Onsager-Machlup ratio predictions and small-noise (LDP) curves.

A tube ``K(phi, eps)`` contains the paths whose deviation from the
reference satisfies ``max_k max_i |x_i(t_k) - phi_i(t_k)| <= eps`` (the
default ``"max"`` norm); with the default Brownian-bridge test the
excursions between grid nodes count too.  ``norm="euclidean"`` uses
``max_k |x(t_k) - phi(t_k)|_2`` on the nodes only.
"""

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import kernels
from .errors import ContractViolation, EmptyCurveError
from .hamiltonian import apply_J
from .noise import ito_drift_correction
from .om import om_action, rate_function
from .paths import DiscretePath

MIN_HITS = 30


class UnderflowWarning(UserWarning):
    """Zero tube hits; the log of the estimate is undefined."""


@dataclass(frozen=True, eq=False)
class TubeSpec:
    reference: DiscretePath
    epsilon: float
    x0: Optional[np.ndarray] = None
    norm: str = "max"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractViolation("epsilon must be positive")
        if self.norm not in ("max", "euclidean"):
            raise ContractViolation("norm must be 'max' or 'euclidean'")
        if self.x0 is not None and not np.array_equal(np.asarray(self.x0, dtype=float), self.reference.values[0]):
            raise ContractViolation("reference path must start at x0")

    def contains(self, path):
        dev = path.values - self.reference.values
        if self.norm == "euclidean":
            return bool(np.max(np.linalg.norm(dev, axis=1)) <= self.epsilon)
        return bool(np.max(np.abs(dev)) <= self.epsilon)


@dataclass(frozen=True)
class MCEstimate:
    p_hat: float
    std_err: float
    hits: int
    M: int
    seed: int
    gamma: float
    advisory: str = ""

    @classmethod
    def from_hits(cls, hits, M, seed, gamma):
        p = hits / M
        adv = "" if hits else "zero hits: probability below 1/M, do not take its log"
        return cls(p, math.sqrt(p * (1 - p) / M), int(hits), int(M), int(seed), float(gamma), adv)

    def to_dict(self):
        return asdict(self)


def _tube_hits(sys, fld, reference, eps, gamma, M, seed, *, bridge=True, box=None, backend=None,
               chunk=None, norm="max"):
    ref = reference.values
    N = reference.N
    dt = reference.dt
    d = sys.dim
    lo = np.full(d, -np.inf) if box is None else np.array([b[0] for b in box], dtype=float)
    hi = np.full(d, np.inf) if box is None else np.array([b[1] for b in box], dtype=float)
    if np.any(ref[0] < lo) or np.any(ref[0] > hi):
        return 0
    chunk = chunk or M
    hits = 0
    for start in range(0, M, chunk):
        keys = kernels.stream_keys(seed, np.arange(start, min(M, start + chunk)))
        X = np.tile(ref[0], (len(keys), 1))
        S_const = fld.sigma_at(ref[0])[None] if fld.constant else None
        for k in range(N):
            drift = apply_J(sys.gradient_at(X))
            if not fld.constant and gamma != 0:
                drift = drift + gamma * gamma * ito_drift_correction(fld, X)
            S = S_const if fld.constant else fld.sigma_at(X)
            inside = kernels.tube_step(X, drift, S, keys, k, dt, gamma, ref[k], ref[k + 1], eps, lo, hi,
                                       bridge=bridge, backend=backend, norm=norm)
            if not inside.all():
                X = X[inside]
                keys = keys[inside]
                if X.shape[0] == 0:
                    break
        hits += X.shape[0]
    return hits


def tube_probability_mc(sys, fld, tube, cfg, T=None, N=None, *, bridge=True, box=None, backend=None):
    """Fraction of simulated trajectories that stay in the tube.

    Trajectories start at ``tube.reference`` 's first node and follow the
    Euler-Maruyama scheme on the Ito form; replicate ``j`` uses stream ``j``
    of ``cfg.seed``, so two calls with the same seed share their noise
    (common random numbers).  Leaving ``box`` counts as a miss.
    """
    ref = tube.reference
    if T is not None and not math.isclose(T, ref.T, rel_tol=1e-12):
        raise ContractViolation("tube reference grid does not match T")
    if N is not None and N != ref.N:
        raise ContractViolation("tube reference grid does not match N")
    if cfg.M < 100:
        raise ContractViolation("need at least 100 replicates")
    if ref.dim != sys.dim:
        raise ContractViolation("reference path dimension does not match the system")
    hits = _tube_hits(sys, fld, ref, tube.epsilon, cfg.gamma, cfg.M, cfg.seed, bridge=bridge, box=box,
                      backend=backend, norm=tube.norm)
    est = MCEstimate.from_hits(hits, cfg.M, cfg.seed, cfg.gamma)
    if hits == 0:
        warnings.warn(est.advisory, UnderflowWarning, stacklevel=2)
    return est


def small_ball_oracle(epsilon, T=1.0, terms=50):
    """Partial sum for ``P(sup_{[0,T]} |B| <= eps)`` of a standard Brownian motion.

        (4/pi) sum_k (-1)^k / (2k+1) exp(-(2k+1)^2 pi^2 T / (8 eps^2))

    The series alternates with decreasing terms, so the truncation error is
    below the first omitted term.  Underflow yields 0.
    """
    if terms < 1:
        raise ContractViolation("terms must be >= 1")
    if not (epsilon > 0 and T > 0):
        raise ContractViolation("epsilon and T must be positive")
    x = epsilon / math.sqrt(T)
    c = math.pi ** 2 / (8.0 * x * x)
    total = 0.0
    for k in range(terms):
        m = 2 * k + 1
        e = -m * m * c
        if e < -745.0:
            break
        total += (-1) ** k / m * math.exp(e)
    return max(0.0, min(1.0, 4.0 / math.pi * total))


def om_ratio_prediction(sys, fld, phi1, phi2):
    """Predicted ``P(K(phi1, eps)) / P(K(phi2, eps))`` as ``eps -> 0``.

    Equals ``exp(-(A1 - A2) / 2)`` with ``A`` the Onsager-Machlup totals.
    """
    if phi1.N != phi2.N or not math.isclose(phi1.T, phi2.T, rel_tol=1e-12):
        raise ContractViolation("paths must share the time grid")
    a1 = om_action(sys, fld, phi1).total
    a2 = om_action(sys, fld, phi2).total
    return math.exp(-0.5 * (a1 - a2))


@dataclass(frozen=True)
class CurvePoint:
    gamma: float
    p_hat: float
    se: float
    hits: int
    g2logp: float
    lo: float
    hi: float
    usable: bool


@dataclass(frozen=True)
class LDPCurve:
    points: List[CurvePoint]
    reference: float
    epsilon: float
    M: int
    seed: int
    notes: list = field(default_factory=list)

    @property
    def usable(self):
        return [p for p in self.points if p.usable]

    def to_dict(self):
        return {"points": [asdict(p) for p in self.points], "reference_minus_rate": self.reference,
                "epsilon": self.epsilon, "M": self.M, "seed": self.seed, "notes": list(self.notes)}


def ldp_curve(sys, fld, tube, gammas, M, T=None, N=None, *, seed=0, bridge=True, box=None, backend=None):
    """``gamma^2 log p_hat`` against the noise intensity, with delta-method bands.

    Each point reuses the same seed (common random numbers across gammas).
    Points with fewer than 30 hits are kept but marked unusable.  The
    reference value is ``-I(phi)``.
    """
    from .sde import NoiseConfig

    gammas = [float(g) for g in gammas]
    if not gammas or any(g <= 0 for g in gammas):
        raise ContractViolation("gammas must be positive")
    if any(b >= a for a, b in zip(gammas, gammas[1:])):
        raise ContractViolation("gammas must be strictly descending")
    rate = rate_function(sys, fld, tube.reference, tube.reference.values[0])
    points = []
    for g in gammas:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnderflowWarning)
            est = tube_probability_mc(sys, fld, tube, NoiseConfig(gamma=g, seed=seed, M=M), T, N,
                                      bridge=bridge, box=box, backend=backend)
        usable = est.hits >= MIN_HITS
        if est.hits:
            val = g * g * math.log(est.p_hat)
            half = g * g * est.std_err / est.p_hat
        else:
            val = half = float("nan")
        points.append(CurvePoint(g, est.p_hat, est.std_err, est.hits, val, val - half, val + half, usable))
    if not any(p.usable for p in points):
        raise EmptyCurveError(f"no gamma gave {MIN_HITS} or more tube hits; increase epsilon or M")
    return LDPCurve(points, -rate.value, tube.epsilon, M, seed)
