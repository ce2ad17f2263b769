"""Command-line entry point: ``h1delay {verify, solve, project, scenario}``.

Exit codes: 0 success, 1 usage/config/IO error (or failed verdicts for
``verify`` and ``scenario``), 2 Lipschitz blow-up in ``solve``.  Output
files are written atomically; reports are JSON with sorted keys, so the same
inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .convex_projection import WAlphaSet, project_vbeta, project_walpha, verify_projection_properties
from .delay_functionals import make_delay
from .errors import ConfigError, H1DelayError
from .grid_function import GridFunction, from_csv, make
from .picard_solver import SddeProblem, SolveOptions, solve_fde, solve_sdde
from .weighted_calculus import verify_operator_bounds

EXIT_OK, EXIT_ERROR, EXIT_BLOWUP = 0, 1, 2

TOP_KEYS = {"kind", "n", "h", "T", "dt", "rhs", "L_g", "delay", "phi", "opts", "seed"}
OPT_KEYS = {"tol", "target_q", "beta0", "beta_max", "rho", "max_iter"}


# -- output helpers ------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, GridFunction):
        return obj.to_record()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def dumps(report) -> str:
    return json.dumps(report, sort_keys=True, indent=2, default=_jsonable, allow_nan=True) + "\n"


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- config parsing ------------------------------------------------------------------

def _number(block, key, where, positive=False, integer=False, default=None):
    if key not in block:
        if default is not None:
            return default
        raise ConfigError(f"{where}{key}", "missing")
    val = block[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}{key}", f"expected a number, got {val!r}")
    if integer and (not float(val).is_integer() or val < 1):
        raise ConfigError(f"{where}{key}", f"expected a positive integer, got {val!r}")
    if not math.isfinite(val) or (positive and val <= 0):
        raise ConfigError(f"{where}{key}", f"expected a positive finite number, got {val!r}")
    return int(val) if integer else float(val)


def _matrix(block, key, n, where):
    if key not in block:
        return np.zeros((n, n))
    try:
        M = np.asarray(block[key], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}{key}", "expected a numeric matrix") from None
    if M.shape != (n, n) or not np.all(np.isfinite(M)):
        raise ConfigError(f"{where}{key}", f"expected a finite {n}x{n} matrix")
    return M


def _vector(block, key, n, where, default=None):
    if key not in block:
        return np.zeros(n) if default is None else default
    try:
        v = np.asarray(block[key], dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}{key}", "expected a numeric vector") from None
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise ConfigError(f"{where}{key}", f"expected {n} finite numbers")
    return v


def _reject_unknown(block, allowed, where):
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ConfigError(f"{where}{extra[0]}", "unknown key")


BUILTIN_SDDE = {
    # name: (g, Lipschitz constant in (x, u))
    "growth": (lambda t, x, u: x, 1.0),
    "delayed_decay": (lambda t, x, u: -u, 1.0),
    "damped_delayed": (lambda t, x, u: -0.5 * x - u, 1.0),
    "bounded": (lambda t, x, u: np.cos(x + u), 1.0),
}


def parse_rhs(spec, n):
    """``(g, L_g)`` from a builtin tag or an affine/table block.

    ``affine``: ``g = A x + B u + c``.  ``table``: ``g = A x + B u + f(t)``
    with ``f`` piecewise linear through the rows of ``f`` at times ``t``
    (held constant outside).  Both get ``L_g = max(|A|_2, |B|_2)``.
    """
    if isinstance(spec, str):
        spec = {"type": "builtin", "name": spec}
    if not isinstance(spec, dict):
        raise ConfigError("rhs", "expected a builtin name or an object")
    kind = spec.get("type")
    if kind == "builtin":
        _reject_unknown(spec, {"type", "name"}, "rhs.")
        name = spec.get("name")
        if name not in BUILTIN_SDDE:
            raise ConfigError("rhs.name", f"unknown builtin {name!r} ({' | '.join(sorted(BUILTIN_SDDE))})")
        return BUILTIN_SDDE[name]
    if kind not in ("affine", "table"):
        raise ConfigError("rhs.type", f"expected builtin | affine | table, got {kind!r}")
    allowed = {"type", "A", "B", "c"} if kind == "affine" else {"type", "A", "B", "t", "f"}
    _reject_unknown(spec, allowed, "rhs.")
    A, B = _matrix(spec, "A", n, "rhs."), _matrix(spec, "B", n, "rhs.")
    L = max(float(np.linalg.norm(A, 2)), float(np.linalg.norm(B, 2)))
    if kind == "affine":
        c = _vector(spec, "c", n, "rhs.")
        return (lambda t, x, u: x @ A.T + u @ B.T + c), L
    try:
        tt = np.asarray(spec["t"], dtype=float).reshape(-1)
        ff = np.asarray(spec["f"], dtype=float).reshape(len(tt), n)
    except KeyError as exc:
        raise ConfigError(f"rhs.{exc.args[0]}", "missing") from None
    except (TypeError, ValueError):
        raise ConfigError("rhs.f", f"expected one row of {n} numbers per entry of rhs.t") from None
    if len(tt) < 1 or np.any(np.diff(tt) <= 0) or not np.all(np.isfinite(ff)):
        raise ConfigError("rhs.t", "times must be finite and strictly increasing")

    def g(t, x, u):
        f = np.stack([np.interp(np.asarray(t, dtype=float), tt, ff[:, j]) for j in range(n)], axis=1)
        return x @ A.T + u @ B.T + f

    return g, L


def parse_phi(spec, h, n, dt, base):
    where = "phi."
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        spec = {"constant": spec}
    if not isinstance(spec, dict):
        raise ConfigError("phi", "expected an object with constant | values | csv")
    modes = [k for k in ("constant", "values", "csv") if k in spec]
    if len(modes) != 1:
        raise ConfigError("phi", "give exactly one of constant | values | csv")
    mode = modes[0]
    if mode == "constant":
        _reject_unknown(spec, {"constant"}, where)
        v = _vector({"constant": np.atleast_1d(spec["constant"]).tolist()}, "constant", n, where)
        m = int(round(h / dt))
        try:
            return make(-h, 0.0, dt, np.tile(v, (m + 1, 1)))
        except H1DelayError as exc:
            raise ConfigError("dt", str(exc)) from None
    if mode == "values":
        _reject_unknown(spec, {"values", "dt"}, where)
        step = _number(spec, "dt", where, positive=True)
        try:
            vals = np.asarray(spec["values"], dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("phi.values", "expected numeric nodal values") from None
        vals = vals.reshape(-1, n) if vals.ndim == 1 and n == 1 else vals
        if vals.ndim != 2 or vals.shape[1] != n:
            raise ConfigError("phi.values", f"expected rows of {n} numbers")
        try:
            return make(-h, 0.0, step, vals)
        except H1DelayError as exc:
            raise ConfigError("phi.values", str(exc)) from None
    _reject_unknown(spec, {"csv"}, where)
    path = Path(spec["csv"])
    if not path.is_absolute():
        path = base / path
    try:
        return from_csv(path.read_text())
    except OSError as exc:
        raise ConfigError("phi.csv", f"cannot read {path}: {exc.strerror}") from None
    except (H1DelayError, ValueError) as exc:
        raise ConfigError("phi.csv", str(exc)) from None


def load_problem(config: dict, base: Path):
    """Validate a config document; return ``(problem, SolveOptions)``."""
    if not isinstance(config, dict):
        raise ConfigError("config", "top level must be an object")
    _reject_unknown(config, TOP_KEYS, "")
    kind = config.get("kind", "sdde")
    if kind not in ("sdde", "fde"):
        raise ConfigError("kind", f"expected sdde | fde, got {kind!r}")
    n = _number(config, "n", "", integer=True, default=1)
    h = _number(config, "h", "", positive=True)
    T = _number(config, "T", "", positive=True)
    dt = _number(config, "dt", "", positive=True)
    opts_block = config.get("opts", {})
    if not isinstance(opts_block, dict):
        raise ConfigError("opts", "expected an object")
    _reject_unknown(opts_block, OPT_KEYS, "opts.")
    opts = SolveOptions(dt=dt)
    for key in ("tol", "beta0", "beta_max", "rho"):
        if key in opts_block:
            setattr(opts, key, _number(opts_block, key, "opts.", positive=True))
    if "target_q" in opts_block:
        q = _number(opts_block, "target_q", "opts.", positive=True)
        if q >= 1.0:
            raise ConfigError("opts.target_q", f"must lie in (0, 1), got {q!r}")
        opts.target_q = q
    if "max_iter" in opts_block:
        opts.max_iter = _number(opts_block, "max_iter", "opts.", integer=True)
    if "phi" not in config:
        raise ConfigError("phi", "missing")
    phi = parse_phi(config["phi"], h, n, dt, base)

    if kind == "fde":
        rhs = config.get("rhs", "biology")
        if rhs != "biology" and rhs != {"type": "builtin", "name": "biology"}:
            raise ConfigError("rhs", "fde supports the builtin 'biology' right-hand side only")
        from .scenarios import BiologySpec, biology_problem

        if "delay" in config:
            raise ConfigError("delay", "fde right-hand sides carry their own delay")
        if n != 2:
            raise ConfigError("n", "the biology model has n = 2")
        try:
            spec = BiologySpec(h=h)
        except ValueError as exc:
            raise ConfigError("h", str(exc)) from None
        return biology_problem(spec, phi, T), opts

    if "rhs" not in config:
        raise ConfigError("rhs", "missing")
    g, L = parse_rhs(config["rhs"], n)
    if "L_g" in config:
        given = _number(config, "L_g", "", positive=False)
        if given < L * (1.0 - 1e-12):
            raise ConfigError("L_g", f"{given!r} is below the Lipschitz constant {L!r} of the right-hand side")
        L = given
    delay = config.get("delay")
    if not isinstance(delay, dict) or "tag" not in delay:
        raise ConfigError("delay", "expected {tag, params}")
    _reject_unknown(delay, {"tag", "params"}, "delay.")
    r = make_delay(delay["tag"], delay.get("params", {}), h, n)
    return SddeProblem(n, h, T, g, L, r, phi, "config"), opts


# -- subcommands --------------------------------------------------------------------

def cmd_verify(args):
    reports = [r.to_dict() for r in verify_operator_bounds(args.trials, args.seed)]
    reports += [r.to_dict() for r in verify_projection_properties(args.trials, args.seed)]
    ok = all(r["pass"] for r in reports)
    for r in reports:
        rho = f" rho={r['rho']:g}" if r.get("rho") else ""
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['name']}{rho} max_ratio={r['max_ratio']:.6g} bound={r['bound']:.6g}")
    if args.out:
        write_atomic(Path(args.out) / "verify.json", dumps({"trials": args.trials, "seed": args.seed, "pass": ok, "reports": reports}))
    return EXIT_OK if ok else EXIT_ERROR


def cmd_solve(args):
    path = Path(args.config)
    try:
        config = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    problem, opts = load_problem(config, path.parent)
    rep = solve_sdde(problem, opts) if problem.kind == "sdde" else solve_fde(problem, opts)
    out = Path(args.out)
    write_atomic(out / "solution.csv", rep.solution.to_csv())
    write_atomic(out / "report.json", dumps(rep.to_dict()))
    print(f"{rep.status} solved_T={rep.solved_T:g} beta={rep.beta_trace[-1][0]:.6g} iterations={rep.iterations}")
    return EXIT_OK if rep.complete else EXIT_BLOWUP


def cmd_project(args):
    path = Path(args.input)
    try:
        phi = from_csv(path.read_text())
    except OSError as exc:
        raise ConfigError("input", f"cannot read {path}: {exc.strerror}") from None
    except (H1DelayError, ValueError) as exc:
        raise ConfigError("input", str(exc)) from None
    if args.beta is not None:
        if args.alpha is not None:
            raise ConfigError("beta", "give either --beta or the W_alpha parameters, not both")
        if not args.beta > 0:
            raise ConfigError("beta", "must be positive")
        res = project_vbeta(phi, args.beta)
        label = {"set": "V_beta", "beta": args.beta}
    else:
        missing = [k for k in ("alpha", "w", "wplus", "c") if getattr(args, k) is None]
        if missing:
            raise ConfigError(missing[0], "required for a W_alpha projection (or give --beta)")
        h = (2.0 * args.w + 2.0 * args.wplus) / args.c
        if abs((phi.b - phi.a) - h) > 1e-9 * max(1.0, h):
            raise ConfigError("input", f"window length {phi.b - phi.a!r} differs from h = (2w + 2wplus)/c = {h!r}")
        try:
            wset = WAlphaSet(h, args.alpha, args.w, args.wplus, args.c)
        except H1DelayError as exc:
            raise ConfigError("alpha", str(exc)) from None
        res = project_walpha(phi, wset)
        label = {"set": "W_alpha", "alpha": args.alpha, "w": args.w, "w_plus": args.wplus, "c": args.c}
    write_atomic(Path(args.output), res.projected.to_csv())
    line = dict(label, iterations=res.iterations, kkt_residual=res.kkt_residual, already_member=res.active)
    print(json.dumps(line, sort_keys=True, default=_jsonable))
    return EXIT_OK


def cmd_scenario(args):
    from .scenarios import SCENARIOS

    res = SCENARIOS[args.name]()
    out = Path(args.out)
    for name, sol in sorted(res.trajectories.items()):
        write_atomic(out / f"{name}.csv", sol.to_csv())
    write_atomic(out / f"{res.name}_report.json", dumps(res.to_dict()))
    for c in res.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} value={c.value:.6g} {c.relation} {c.bound:.6g}")
    print(f"scenario {res.name}: {'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_ERROR


def build_parser():
    parser = argparse.ArgumentParser(prog="h1delay", description="State-dependent delay equations in weighted H^1.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="operator-bound and projection property suites")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", help="directory for verify.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("solve", help="solve the problem described by a JSON config")
    p.add_argument("config")
    p.add_argument("--out", default=".", help="directory for solution.csv and report.json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("project", help="project a window onto V_beta or W_alpha")
    p.add_argument("--input", required=True, help="window CSV (t, x_1, ...)")
    p.add_argument("--output", required=True, help="CSV for the projected window")
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--w", type=float)
    p.add_argument("--wplus", type=float)
    p.add_argument("--c", type=float)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("scenario", help="run a named end-to-end scenario")
    p.add_argument("name", choices=["counterexample", "classical", "positioning", "biology"])
    p.add_argument("--out", default=".", help="directory for trajectories and the report")
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (H1DelayError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
