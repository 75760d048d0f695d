"""Discrete paths on a uniform time grid and their CSV form."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DiscretePath:
    """Values ``x_0 .. x_N`` of a path on the grid ``t_k = k T / N``."""

    T: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] < 2:
            raise ContractViolation("path values must have shape (N+1, dim) with N >= 1")
        if not np.all(np.isfinite(vals)):
            raise ContractViolation("path values must be finite")
        if not self.T > 0:
            raise ContractViolation("T must be positive")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def N(self):
        return self.values.shape[0] - 1

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def dt(self):
        return self.T / self.N

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def start(self):
        return self.values[0]

    @property
    def end(self):
        return self.values[-1]

    def sup_distance(self, other):
        """Max over nodes and components of ``|self - other|``."""
        other_vals = other.values if isinstance(other, DiscretePath) else np.asarray(other)
        if other_vals.shape != self.values.shape:
            raise ContractViolation("paths live on different grids")
        return float(np.max(np.abs(self.values - other_vals)))

    @classmethod
    def constant(cls, point, T, N):
        point = np.asarray(point, dtype=float)
        return cls(T, np.tile(point, (N + 1, 1)))

    @classmethod
    def straight_line(cls, x0, xT, T, N):
        s = np.linspace(0.0, 1.0, N + 1)[:, None]
        x0 = np.asarray(x0, dtype=float)
        xT = np.asarray(xT, dtype=float)
        return cls(T, (1.0 - s) * x0 + s * xT)

    @classmethod
    def from_function(cls, fn, T, N):
        t = np.linspace(0.0, T, N + 1)
        return cls(T, np.array([fn(tk) for tk in t], dtype=float))


def header(dim):
    return ["t"] + [f"x{i + 1}" for i in range(dim)]


def write_csv(path_or_paths, filename, replicate_column=False):
    """Write one path, or a list of ``(replicate, DiscretePath)`` in long format."""
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        if replicate_column:
            rows = list(path_or_paths)
            dim = rows[0][1].dim
            w.writerow(["replicate"] + header(dim))
            for rep, p in rows:
                for t, x in zip(p.times, p.values):
                    w.writerow([rep, repr(float(t))] + [repr(float(v)) for v in x])
        else:
            p = path_or_paths
            w.writerow(header(p.dim))
            for t, x in zip(p.times, p.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


def read_csv(filename):
    """Inverse of :func:`write_csv` for a single path."""
    with open(filename, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    if head[0] != "t" or len(head) < 2:
        raise ContractViolation(f"{filename}: expected header t,x1,...")
    data = np.array([[float(v) for v in r] for r in body])
    t = data[:, 0]
    N = len(t) - 1
    if N < 1 or not np.allclose(np.diff(t), t[-1] / N, rtol=1e-9, atol=1e-12) or t[0] != 0.0:
        raise ContractViolation(f"{filename}: time column is not a uniform grid from 0")
    return DiscretePath(float(t[-1]), data[:, 1:])
