"""Batch front-end: one JSON config per run, artifacts plus a manifest on disk.

Usage::

    stochkam run CONFIG.json [--out DIR]
    stochkam COMMAND CONFIG.json [--out DIR]     # command overrides the config

A config looks like::

    {
      "command": "tube",
      "system": {"name": "harmonic", "params": {}},
      "field": {"name": "identity"},
      "grid": {"T": 1.0, "N": 1000},
      "noise": {"gamma": 1.0, "M": 100000, "seed": 0},
      "options": {"epsilon": 0.5, "reference": {"constant": [0.5, 0.0]}},
      "output": "runs/tube"
    }

Exit codes: 0 success, 2 invalid config, 3 numerical failure, 4 Monte Carlo
underflow when ``options.fail_on_underflow`` is set.
"""

import argparse
import inspect
import json
import os
import platform
import sys as _sys
import time
import warnings

import numpy as np

from . import __version__
from ._jit import JIT_ENABLED, default_backend
from .errors import StochKAMError
from .hamiltonian import SYSTEMS, deterministic_flow, make_system
from .noise import FIELDS, check_conditions, make_field
from .paths import DiscretePath, read_csv, write_csv

COMMANDS = ("simulate", "om-eval", "mpp", "tube", "ldp", "kam-scan", "check-conditions")
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_UNDERFLOW = 0, 2, 3, 4


class ConfigError(Exception):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class Underflow(Exception):
    pass


# -- validation helpers -----------------------------------------------------

def _get(cfg, dotted, default=KeyError):
    cur = cfg
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if default is KeyError:
                raise ConfigError(dotted, "required")
            return default
        cur = cur[part]
    return cur


def _num(cfg, dotted, default=KeyError, *, positive=False, nonneg=False, integer=False):
    v = _get(cfg, dotted, default)
    if v is None:
        return v
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(dotted, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(dotted, f"expected an integer, got {v!r}")
    if not np.isfinite(v):
        raise ConfigError(dotted, "must be finite")
    if positive and not v > 0:
        raise ConfigError(dotted, f"must be > 0, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(dotted, f"must be >= 0, got {v!r}")
    return int(v) if integer else float(v)


def _vec(cfg, dotted, dim=None, default=KeyError):
    v = _get(cfg, dotted, default)
    if v is None:
        return v
    try:
        a = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(dotted, f"expected a list of numbers, got {v!r}") from None
    if a.ndim != 1 or (dim is not None and a.size != dim):
        raise ConfigError(dotted, f"expected a list of {dim} numbers" if dim else "expected a flat list")
    if not np.all(np.isfinite(a)):
        raise ConfigError(dotted, "entries must be finite")
    return a


def _box(cfg, dotted, dim, default=None):
    v = _get(cfg, dotted, default)
    if v is None:
        return None
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        if not v > 0:
            raise ConfigError(dotted, "half width must be positive")
        return [(-float(v), float(v))] * dim
    try:
        b = [(float(lo), float(hi)) for lo, hi in v]
    except (TypeError, ValueError):
        raise ConfigError(dotted, "expected a half width or a list of [lo, hi] pairs") from None
    if len(b) != dim or any(not lo < hi for lo, hi in b):
        raise ConfigError(dotted, f"expected {dim} intervals with lo < hi")
    return b


def _build_system(cfg):
    spec = _get(cfg, "system")
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError("system.name", "required")
    if spec["name"] not in SYSTEMS:
        raise ConfigError("system.name", f"unknown system {spec['name']!r}; known: {sorted(SYSTEMS)}")
    params = spec.get("params", {})
    try:
        return make_system(spec["name"], **params)
    except (StochKAMError, TypeError, ValueError) as exc:
        raise ConfigError("system.params", str(exc)) from None


def _build_field(cfg, n):
    spec = _get(cfg, "field")
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError("field.name", "required")
    name = spec["name"]
    if name not in FIELDS:
        raise ConfigError("field.name", f"unknown field {name!r}; known: {sorted(FIELDS)}")
    params = dict(spec.get("params", {}))
    if "n" in inspect.signature(FIELDS[name]).parameters:
        params.setdefault("n", n)
    try:
        fld = make_field(name, **params)
    except (StochKAMError, TypeError, ValueError) as exc:
        raise ConfigError("field.params", str(exc)) from None
    if fld.n != n:
        raise ConfigError("field.params", f"field has n={fld.n}, system has n={n}")
    return fld


def _grid(cfg):
    return _num(cfg, "grid.T", positive=True), _num(cfg, "grid.N", positive=True, integer=True)


def _noise(cfg, min_M=1):
    from .sde import NoiseConfig

    gamma = _num(cfg, "noise.gamma", 1.0, nonneg=True)
    M = _num(cfg, "noise.M", positive=True, integer=True)
    seed = _num(cfg, "noise.seed", 0, nonneg=True, integer=True)
    if M < min_M:
        raise ConfigError("noise.M", f"must be >= {min_M}")
    return NoiseConfig(gamma=gamma, seed=seed, M=M)


def _reference(cfg, dotted, sys, T, N):
    spec = _get(cfg, dotted)
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ConfigError(dotted, "expected one of {constant: x}, {flow: x0}, {straight: [a, b]}, {csv: file}")
    (kind, val), = spec.items()
    d = sys.dim
    if kind == "constant":
        return DiscretePath.constant(_vec(cfg, f"{dotted}.constant", d), T, N)
    if kind == "flow":
        return deterministic_flow(sys, _vec(cfg, f"{dotted}.flow", d), T, N)
    if kind == "straight":
        if not isinstance(val, list) or len(val) != 2:
            raise ConfigError(f"{dotted}.straight", "expected [start, end]")
        a = _vec({"v": val[0]}, "v", d)
        b = _vec({"v": val[1]}, "v", d)
        return DiscretePath.straight_line(a, b, T, N)
    if kind == "csv":
        try:
            p = read_csv(str(val))
        except (OSError, StochKAMError, ValueError) as exc:
            raise ConfigError(f"{dotted}.csv", str(exc)) from None
        if p.dim != d:
            raise ConfigError(f"{dotted}.csv", f"path has dimension {p.dim}, system needs {d}")
        return p
    raise ConfigError(dotted, f"unknown reference kind {kind!r}")


# -- commands ---------------------------------------------------------------
# Each command validates everything it needs first and returns a callable that
# does the numerical work and writes into ``out``.

def _plan_simulate(cfg, sys, fld):
    from .sde import SCHEMES, dump_ensemble, ensemble

    T, N = _grid(cfg)
    noise = _noise(cfg)
    x0 = _vec(cfg, "options.x0", sys.dim)
    scheme = _get(cfg, "options.scheme", "euler")
    if scheme not in SCHEMES:
        raise ConfigError("options.scheme", f"expected one of {SCHEMES}")
    box = _box(cfg, "options.box", sys.dim)
    long_format = bool(_get(cfg, "options.long_format", True))

    def run(out):
        trajs = ensemble(sys, fld, x0, T, N, noise, scheme=scheme, box=box)
        files = dump_ensemble(trajs, out, long_format=long_format)
        exits = [{"replicate": t.replicate, "exit_step": t.exit_step} for t in trajs if t.exited]
        summary = {"M": noise.M, "exited": len(exits), "exits": exits}
        _write_json(os.path.join(out, "simulate.json"), summary)
        return files + [os.path.join(out, "simulate.json")], summary

    return run


def _plan_om_eval(cfg, sys, fld):
    from .om import om_action, rate_function

    T, N = _grid(cfg)
    path = _reference(cfg, "options.path", sys, T, N)
    x0 = _vec(cfg, "options.x0", sys.dim, default=None)

    def run(out):
        br = om_action(sys, fld, path)
        rate = rate_function(sys, fld, path, path.values[0] if x0 is None else x0)
        res = {"om": br.to_dict(), "rate": {"value": rate.value, "finite": rate.finite}}
        fn = os.path.join(out, "om_eval.json")
        _write_json(fn, res)
        return [fn], res

    return run


def _plan_mpp(cfg, sys, fld):
    from .om import GRAD_TOL, MAX_ITER, solve_mpp

    T, N = _grid(cfg)
    x0 = _vec(cfg, "options.x0", sys.dim)
    xT = _vec(cfg, "options.xT", sys.dim, default=None)
    if xT is None:
        if not _get(cfg, "options.xT_from_flow", False):
            raise ConfigError("options.xT", "required (or set options.xT_from_flow)")
        xT = deterministic_flow(sys, x0, T, N).values[-1]
    tol = _num(cfg, "options.tol", GRAD_TOL, positive=True)
    max_iter = _num(cfg, "options.max_iter", MAX_ITER, positive=True, integer=True)
    init = None
    if _get(cfg, "options.init", None) is not None:
        init = _reference(cfg, "options.init", sys, T, N)

    def run(out):
        res = solve_mpp(sys, fld, x0, xT, T, N, init, tol=tol, max_iter=max_iter)
        fn_csv = os.path.join(out, "mpp.csv")
        write_csv(res.path, fn_csv)
        fn = os.path.join(out, "mpp.json")
        _write_json(fn, res.to_dict())
        return [fn_csv, fn], res.to_dict()

    return run


def _tube_inputs(cfg, sys):
    from .prob import TubeSpec

    T, N = _grid(cfg)
    eps = _num(cfg, "options.epsilon", positive=True)
    ref = _reference(cfg, "options.reference", sys, T, N)
    try:
        tube = TubeSpec(ref, eps, norm=_get(cfg, "options.norm", "max"))
    except StochKAMError as exc:
        raise ConfigError("options.epsilon", str(exc)) from None
    box = _box(cfg, "options.box", sys.dim)
    bridge = bool(_get(cfg, "options.bridge", True))
    strict = bool(_get(cfg, "options.fail_on_underflow", False))
    return tube, box, bridge, strict


def _plan_tube(cfg, sys, fld):
    from .prob import UnderflowWarning, tube_probability_mc

    noise = _noise(cfg, min_M=100)
    tube, box, bridge, strict = _tube_inputs(cfg, sys)

    def run(out):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnderflowWarning)
            est = tube_probability_mc(sys, fld, tube, noise, bridge=bridge, box=box)
        fn = os.path.join(out, "tube.json")
        _write_json(fn, est.to_dict())
        if strict and est.hits == 0:
            raise Underflow(est.advisory)
        return [fn], est.to_dict()

    return run


def _plan_ldp(cfg, sys, fld):
    from .prob import ldp_curve

    M = _num(cfg, "noise.M", positive=True, integer=True)
    if M < 100:
        raise ConfigError("noise.M", "must be >= 100")
    seed = _num(cfg, "noise.seed", 0, nonneg=True, integer=True)
    gammas = _vec(cfg, "options.gammas")
    if gammas.size == 0 or np.any(gammas <= 0) or np.any(np.diff(gammas) >= 0):
        raise ConfigError("options.gammas", "expected positive, strictly descending values")
    tube, box, bridge, strict = _tube_inputs(cfg, sys)

    def run(out):
        curve = ldp_curve(sys, fld, tube, gammas, M, seed=seed, bridge=bridge, box=box)
        fn_csv = os.path.join(out, "ldp.csv")
        with open(fn_csv, "w", newline="") as fh:
            fh.write("gamma,p_hat,se,g2logp,lo,hi,hits,usable\n")
            for p in curve.points:
                fh.write(",".join([repr(p.gamma), repr(p.p_hat), repr(p.se), repr(p.g2logp), repr(p.lo),
                                   repr(p.hi), str(p.hits), str(int(p.usable))]) + "\n")
        fn = os.path.join(out, "ldp.json")
        _write_json(fn, curve.to_dict())
        if strict and any(p.hits == 0 for p in curve.points):
            raise Underflow("some gamma produced zero tube hits")
        return [fn_csv, fn], curve.to_dict()

    return run


def _plan_kam_scan(cfg, sys, fld):
    from .errors import InvalidParameters
    from .kam import KAMParams, golden_actions, torus_persistence_scan

    if sys.nearly_integrable is None:
        raise ConfigError("system.name", "kam-scan needs a nearly-integrable system (e.g. twist2d)")
    T, N = _grid(cfg)
    etas = _vec(cfg, "options.etas")
    if np.any(etas < 0):
        raise ConfigError("options.etas", "must be non-negative")
    if _get(cfg, "options.initial_actions", None) is not None:
        I0 = np.asarray(_get(cfg, "options.initial_actions"), dtype=float)
        if I0.ndim != 2 or I0.shape[1] != sys.n:
            raise ConfigError("options.initial_actions", f"expected a list of {sys.n}-vectors")
    else:
        scales = _vec(cfg, "options.golden_scales", default=None)
        if scales is None:
            raise ConfigError("options.initial_actions", "required (or options.golden_scales)")
        I0 = golden_actions(scales)
        if I0.shape[1] != sys.n:
            raise ConfigError("options.golden_scales", "golden direction is two dimensional")
    angles = _vec(cfg, "options.initial_angles", sys.n, default=None)
    kp = _get(cfg, "options.params", {})
    try:
        params = KAMParams(**{"n": sys.n, **kp})
    except (InvalidParameters, TypeError) as exc:
        raise ConfigError("options.params", str(exc)) from None
    box = _box(cfg, "options.box", sys.dim)
    check_noise = bool(_get(cfg, "options.check_noise", True))

    def run(out):
        rep = torus_persistence_scan(sys, fld, etas, I0, T, N, params, initial_angles=angles, box=box,
                                     check_noise=check_noise)
        fn_csv = os.path.join(out, "persistence.csv")
        rep.to_csv(fn_csv)
        fn_txt = os.path.join(out, "persistence.txt")
        with open(fn_txt, "w") as fh:
            fh.write(rep.summary())
        res = {"survival": {repr(k): v for k, v in rep.survival.items()},
               "failures": {repr(k): v for k, v in rep.failures.items()}, "slope": rep.slope}
        return [fn_csv, fn_txt], res

    return run


def _plan_check_conditions(cfg, sys, fld):
    from .noise import DEFAULT_SAMPLES

    box = _box(cfg, "options.box", 2 * fld.n, default=1.0)
    samples = _num(cfg, "options.samples", DEFAULT_SAMPLES, positive=True, integer=True)

    def run(out):
        reps = check_conditions(fld, box, samples)
        res = {k: r.to_dict() for k, r in reps.items()}
        fn = os.path.join(out, "conditions.json")
        _write_json(fn, res)
        return [fn], {k: r.verdict for k, r in reps.items()}

    return run


PLANS = {
    "simulate": _plan_simulate,
    "om-eval": _plan_om_eval,
    "mpp": _plan_mpp,
    "tube": _plan_tube,
    "ldp": _plan_ldp,
    "kam-scan": _plan_kam_scan,
    "check-conditions": _plan_check_conditions,
}


# -- driver -----------------------------------------------------------------

def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _write_json(fn, obj):
    with open(fn, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _versions():
    import scipy

    out = {"stochkam": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def load_config(filename):
    try:
        with open(filename) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", str(exc)) from None
    if not text.strip():
        raise ConfigError("config", "file is empty")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be an object")
    return cfg


def plan(cfg):
    """Validate ``cfg`` and return ``(command, runner)``; raises :class:`ConfigError`."""
    cmd = _get(cfg, "command")
    if cmd not in COMMANDS:
        raise ConfigError("command", f"unknown command {cmd!r}; expected one of {COMMANDS}")
    sys = _build_system(cfg)
    fld = _build_field(cfg, sys.n)
    return cmd, PLANS[cmd](cfg, sys, fld)


def run(cfg, out_dir=None, stream=None):
    """Execute a config dict; returns the exit code."""
    stream = stream or _sys.stderr
    try:
        cmd, runner = plan(cfg)
        out_dir = out_dir or cfg.get("output") or f"stochkam-{cmd}"
        if not isinstance(out_dir, str):
            raise ConfigError("output", "expected a directory name")
    except ConfigError as exc:
        print(f"stochkam: invalid config: {exc}", file=stream)
        return EXIT_INVALID
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": cmd, "config": cfg, "seed": _get(cfg, "noise.seed", None),
                "versions": _versions(), "backend": default_backend(), "jit": JIT_ENABLED,
                "threads": os.environ.get("STOCHKAM_THREADS"), "output": os.path.abspath(out_dir)}
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        files, result = runner(out_dir)
        manifest["status"] = "ok"
        manifest["files"] = [os.path.basename(f) for f in files]
        manifest["result"] = result
    except Underflow as exc:
        manifest["status"] = f"underflow: {exc}"
        print(f"stochkam: Monte Carlo underflow: {exc}", file=stream)
        code = EXIT_UNDERFLOW
    except StochKAMError as exc:
        manifest["status"] = f"error: {type(exc).__name__}: {exc}"
        print(f"stochkam: {type(exc).__name__}: {exc}", file=stream)
        code = EXIT_NUMERIC
    manifest["wall_time_s"] = time.perf_counter() - t0
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    if code == EXIT_OK:
        print(f"stochkam {cmd}: wrote {out_dir}", file=stream)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="stochkam", description="Stochastic Hamiltonian experiments from JSON configs.")
    p.add_argument("command", choices=("run",) + COMMANDS,
                   help="'run' uses the command named in the config; otherwise it overrides it")
    p.add_argument("config", help="JSON run configuration")
    p.add_argument("--out", help="output directory (default: config 'output' or stochkam-COMMAND)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"stochkam: invalid config: {exc}", file=_sys.stderr)
        return EXIT_INVALID
    if args.command != "run":
        cfg = {**cfg, "command": args.command}
    return run(cfg, args.out)


if __name__ == "__main__":
    _sys.exit(main())
