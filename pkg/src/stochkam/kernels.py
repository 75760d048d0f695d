"""Hot loops: counter-based Gaussian streams and the fused tube step.

Every kernel exists twice, a numba version and a vectorised numpy version,
selected through ``backend`` (default from :mod:`stochkam._jit`).  Both
produce the same bits for the integer hashing; floating point results agree
to a few ulps (libm differences in ``log``/``cos``).

Random numbers are a pure function of ``(seed, stream, counter)``: a
SplitMix64-style finaliser hashes the counter under a per-stream key, so any
replicate can be regenerated independently of evaluation order.
"""

import numpy as np

from ._jit import njit, prange, resolve_backend

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
SEED_SALT = np.uint64(0x2545F4914F6CDD1D)
BRIDGE_SALT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _mix64_np(z):
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * _M1
        z = z ^ (z >> np.uint64(27))
        z = z * _M2
        return z ^ (z >> np.uint64(31))


def stream_keys(seed, streams):
    """Per-stream 64-bit keys for ``seed`` (any int, reduced mod 2**64)."""
    s = np.atleast_1d(np.asarray(streams, dtype=np.int64)).astype(np.uint64)
    base = _mix64_np(np.array([int(seed) % 2**64], dtype=np.uint64) ^ SEED_SALT)
    with np.errstate(over="ignore"):
        return _mix64_np(base + (s + np.uint64(1)) * GOLDEN)


def _uniform_np(key, counter):
    with np.errstate(over="ignore"):
        h = _mix64_np(key ^ _mix64_np((counter + np.uint64(1)) * GOLDEN))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def _normals_np(keys, step, dim):
    # counter c = step*dim + j; pair c//2 feeds Box-Muller, parity picks cos/sin
    c = np.uint64(step) * np.uint64(dim) + np.arange(dim, dtype=np.uint64)
    pair = (c >> np.uint64(1)) * np.uint64(2)
    k = keys[:, None]
    u1 = _uniform_np(k, pair[None, :])
    u2 = _uniform_np(k, pair[None, :] + np.uint64(1))
    r = np.sqrt(-2.0 * np.log(u1))
    ang = _TWO_PI * u2
    odd = (c & np.uint64(1)).astype(bool)[None, :]
    return np.where(odd, r * np.sin(ang), r * np.cos(ang))


@njit(cache=True)
def _mix64_nb(z):
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _uniform_nb(key, counter):
    h = _mix64_nb(key ^ _mix64_nb((counter + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15)))
    return (np.float64(h >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _fill_normals_nb(key, base, dim, out):
    # same counter layout as _normals_np, one log per cos/sin pair
    j = 0
    while j < dim:
        c = base + np.uint64(j)
        p2 = (c >> np.uint64(1)) * np.uint64(2)
        u1 = _uniform_nb(key, p2)
        u2 = _uniform_nb(key, p2 + np.uint64(1))
        r = np.sqrt(-2.0 * np.log(u1))
        ang = 2.0 * np.pi * u2
        if c & np.uint64(1):
            out[j] = r * np.sin(ang)
            j += 1
        else:
            out[j] = r * np.cos(ang)
            if j + 1 < dim:
                out[j + 1] = r * np.sin(ang)
            j += 2


@njit(cache=True, parallel=True)
def _normals_nb(keys, step, dim):
    M = keys.shape[0]
    out = np.empty((M, dim))
    base = np.uint64(step) * np.uint64(dim)
    for i in prange(M):
        _fill_normals_nb(keys[i], base, dim, out[i])
    return out


def counter_normals(keys, step, dim, backend=None):
    """Standard normals ``(len(keys), dim)`` for time step ``step`` of each stream."""
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    if resolve_backend(backend) == "numba":
        return _normals_nb(keys, np.int64(step), np.int64(dim))
    return _normals_np(keys, step, dim)


def bridge_uniforms(keys, step, backend=None):
    """Uniforms on (0, 1) from a stream domain disjoint from the Gaussian draws."""
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    return _uniform_np(keys ^ BRIDGE_SALT, np.uint64(step))


@njit(cache=True, parallel=True)
def _tube_step_nb(X, drift, S, keys, step, dt, gamma, ref_prev, ref_next, eps, lo, hi, bridge, euclid, inside):
    M, d = X.shape
    sq = np.sqrt(dt)
    stride = 0 if S.shape[0] == 1 else 1
    base = np.uint64(step) * np.uint64(d)
    W = np.empty((M, d))
    for i in prange(M):
        key = keys[i]
        si = i * stride
        w = W[i]
        _fill_normals_nb(key, base, d, w)
        for j in range(d):
            w[j] *= sq
        ok = True
        pstay = 1.0
        r2 = 0.0
        for a in range(d):
            s = 0.0
            var = 0.0
            for b in range(d):
                sab = S[si, a, b]
                s += sab * w[b]
                var += sab * sab
            x_old = X[i, a]
            x_new = x_old + drift[i, a] * dt + gamma * s
            X[i, a] = x_new
            y1 = x_new - ref_next[a]
            if euclid:
                r2 += y1 * y1
                if not (x_new >= lo[a] and x_new <= hi[a]):
                    ok = False
            elif not (abs(y1) <= eps) or x_new < lo[a] or x_new > hi[a]:
                ok = False
            elif bridge:
                v = gamma * gamma * var * dt
                if v > 0.0:
                    y0 = x_old - ref_prev[a]
                    # exp(-40) is below half an ulp of 1, so skipping it is exact
                    z = -2.0 * (eps - y0) * (eps - y1) / v
                    if z > -40.0:
                        pstay *= 1.0 - np.exp(z)
                    z = -2.0 * (eps + y0) * (eps + y1) / v
                    if z > -40.0:
                        pstay *= 1.0 - np.exp(z)
        if euclid and not (r2 <= eps * eps):
            ok = False
        if ok and bridge and not euclid and pstay < 1.0:
            ok = _uniform_nb(key ^ np.uint64(0xD1B54A32D192ED03), np.uint64(step)) < pstay
        inside[i] = ok


def _tube_step_np(X, drift, S, keys, step, dt, gamma, ref_prev, ref_next, eps, lo, hi, bridge, euclid):
    M, d = X.shape
    w = _normals_np(keys, step, d) * np.sqrt(dt)
    if S.shape[0] == 1:
        noise = w @ S[0].T
        var = np.broadcast_to(np.sum(S[0] ** 2, axis=1), (M, d))
    else:
        noise = np.einsum("mab,mb->ma", S, w)
        var = np.sum(S * S, axis=2)
    X_old = X.copy()
    X += drift * dt + gamma * noise
    y1 = X - ref_next
    if euclid:
        ok = (np.sum(y1 * y1, axis=1) <= eps * eps) & np.all((X >= lo) & (X <= hi), axis=1)
        return ok
    ok = np.all((np.abs(y1) <= eps) & (X >= lo) & (X <= hi), axis=1)
    if bridge:
        v = gamma * gamma * var * dt
        y0 = X_old - ref_prev
        with np.errstate(divide="ignore", invalid="ignore"):
            up = 1.0 - np.exp(-2.0 * (eps - y0) * (eps - y1) / v)
            dn = 1.0 - np.exp(-2.0 * (eps + y0) * (eps + y1) / v)
        stay = np.where(v > 0.0, up * dn, 1.0)
        pstay = np.prod(stay, axis=1)
        need = ok & (pstay < 1.0)
        if np.any(need):
            u = _uniform_np(keys[need] ^ BRIDGE_SALT, np.uint64(step))
            ok[need] = u < pstay[need]
    return ok


def tube_step(X, drift, S, keys, step, dt, gamma, ref_prev, ref_next, eps, lo, hi, bridge=True, backend=None,
              norm="max"):
    """One Euler-Maruyama step for all live replicates plus the tube test.

    ``X`` is advanced in place.  ``S`` is ``(M, d, d)`` or ``(1, d, d)`` for a
    constant field.  Returns a boolean mask of replicates still inside the
    tube ``|X - ref| <= eps`` (max norm) and the box ``[lo, hi]``.  With
    ``bridge`` the between-node excursion is tested too: conditional on the
    two nodes the deviation is treated as a Brownian bridge with the frozen
    local variance, and the replicate survives with the product of the
    one-sided non-crossing probabilities.  ``norm="euclidean"`` tests
    ``|X - ref|_2 <= eps`` on the nodes only (no bridge correction).
    """
    if norm not in ("max", "euclidean"):
        raise ValueError(f"unknown tube norm {norm!r}")
    euclid = norm == "euclidean"
    args = (float(dt), float(gamma), np.ascontiguousarray(ref_prev, dtype=float),
            np.ascontiguousarray(ref_next, dtype=float), float(eps),
            np.ascontiguousarray(lo, dtype=float), np.ascontiguousarray(hi, dtype=float), bool(bridge), euclid)
    if resolve_backend(backend) == "numba":
        inside = np.empty(X.shape[0], dtype=np.bool_)
        _tube_step_nb(X, np.ascontiguousarray(drift), np.ascontiguousarray(S), keys, np.int64(step),
                      *args, inside)
        return inside
    return _tube_step_np(X, drift, S, keys, step, *args)
