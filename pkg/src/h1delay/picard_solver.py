"""Projected Picard iteration in exponentially weighted ``H^1``.

The unknown is ``y = x - phi_hat`` on ``[-h, T]``, zero on ``[-h, 0]``, where
``phi_hat`` extends the pre-history by its value at 0.  One Picard sweep
forms the window ``(y + phi_hat)_(t_i)`` at every node ``t_i >= 0``,
projects it onto ``V_beta`` when its slopes exceed ``beta``, evaluates the
right-hand side and integrates from zero with the trapezoid rule.  The
weight ``rho`` is chosen so that the theoretical contraction factor meets a
target; ``beta`` is doubled until the projection is inactive on the whole
interval (global solution) or a cap is exceeded (Lipschitz blow-up).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .convex_projection import project_vbeta_batch
from .delay_functionals import DelayFunctional, eval_windows
from .errors import ConfigError, MaxIterExceeded
from .grid_function import GridFunction, _cell_count, make, seminorms, weighted_h1_norm

RHO_FLOOR = 1e-6
BETA_FLOOR = 1e-6
BETA0_FACTOR = 1.25
SLOPE_MARGIN = 1e-9
UNDERFLOW_WEIGHT = 1e-280
NOISE_FLOOR = 1e-13


@dataclass
class SddeProblem:
    """``x'(t) = g(t, x(t), x(t + r(x_(t))))`` with pre-history ``phi``.

    ``g(t, x, u)`` is vectorized: ``t`` has shape ``(N,)``, ``x`` and ``u``
    shape ``(N, n)``; it returns ``(N, n)``.
    """

    n: int
    h: float
    T: float
    g: Callable
    L_g: float
    r: DelayFunctional
    phi: GridFunction
    name: str = "sdde"

    kind = "sdde"

    def lip_r(self):
        return self.r.lip_hint

    def rhs(self, t, windows, x, dt):
        delays, fired = self.r.evaluate_batch(windows, dt)
        u = eval_windows(windows, dt, delays)
        return np.asarray(self.g(t, x, u), dtype=float).reshape(len(t), self.n), fired

    def contraction_constants(self, beta):
        """``(L, A)`` in ``q(rho) = L (1/rho + A / sqrt(2 rho))``."""
        lip_r = self.lip_r()
        if not math.isfinite(lip_r):
            raise ConfigError("delay", "delay functional has no finite Lipschitz constant")
        return self.L_g, 2.0 * math.sqrt(self.h) + beta * lip_r + 1.0 / math.sqrt(self.h)

    def g_at_start(self):
        """``g(0, phi(0), phi(r(phi)))``."""
        phi = self.phi
        w = np.asarray(phi.values)[None]
        val, _ = self.rhs(np.zeros(1), w, w[:, -1], phi.dt)
        return val[0]


@dataclass
class FdeProblem:
    """``x'(t) = G(t, x_(t))``; ``G(t, windows, dt)`` returns ``(N, n)``.

    ``L_of_beta(beta)`` is the Lipschitz constant of ``G`` on windows with
    slopes bounded by ``beta`` (nondecreasing in ``beta``).
    """

    n: int
    h: float
    T: float
    G: Callable
    L_of_beta: Callable
    phi: GridFunction
    name: str = "fde"

    kind = "fde"

    def rhs(self, t, windows, x, dt):
        return np.asarray(self.G(t, windows, dt), dtype=float).reshape(len(t), self.n), False

    def contraction_constants(self, beta):
        return float(self.L_of_beta(beta)), 1.0

    def g_at_start(self):
        phi = self.phi
        w = np.asarray(phi.values)[None]
        val, _ = self.rhs(np.zeros(1), w, w[:, -1], phi.dt)
        return val[0]


@dataclass
class SolveOptions:
    dt: float | None = None
    tol: float = 1e-10
    target_q: float = 0.5
    beta0: float | None = None
    beta_max: float | None = None
    rho: float | None = None
    max_iter: int = 500


@dataclass
class SolveReport:
    solution: GridFunction
    solved_T: float
    status: str
    beta_trace: list
    rho_used: float
    contraction_ratios: list
    residual_sup: float
    apriori_margin: float | None
    q: float = math.nan
    iterations: int = 0
    projected_fraction: float = 0.0
    clamp_fired: bool = False
    warnings: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.status == "Complete"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "solved_T": self.solved_T,
            "beta_trace": [list(b) for b in self.beta_trace],
            "rho": self.rho_used,
            "q": self.q,
            "iterations": self.iterations,
            "ratios": list(self.contraction_ratios),
            "residual_sup": self.residual_sup,
            "apriori_margin": self.apriori_margin,
            "projected_fraction": self.projected_fraction,
            "clamp_fired": self.clamp_fired,
            "warnings": list(self.warnings),
        }


# -- rho selection -------------------------------------------------------------

def contraction_factor(rho, L, A):
    return L * (1.0 / rho + A / math.sqrt(2.0 * rho))


def choose_rho(L, h, beta, lip_r, target_q=0.5, A=None):
    """Smallest ``rho`` (to relative 1e-6) with ``q(rho) <= target_q``.

    ``q(rho) = L (1/rho + A / sqrt(2 rho))`` with
    ``A = 2 sqrt(h) + beta lip_r + 1/sqrt(h)`` unless ``A`` is given.
    """
    if not 0.0 < target_q < 1.0:
        raise ValueError(f"target_q must lie in (0, 1), got {target_q!r}")
    if A is None:
        A = 2.0 * math.sqrt(h) + beta * lip_r + 1.0 / math.sqrt(h)
    if L <= 0.0:
        return RHO_FLOOR
    hi = 1.0
    while contraction_factor(hi, L, A) > target_q:
        hi *= 2.0
    lo = hi / 2.0 if hi > 1.0 else 0.0
    while hi - lo > 1e-6 * hi:
        mid = 0.5 * (lo + hi)
        if mid > 0 and contraction_factor(mid, L, A) <= target_q:
            hi = mid
        else:
            lo = mid
    return max(hi, RHO_FLOOR)


# -- discretized Picard operator --------------------------------------------------

def _aligned(length, dt, name):
    try:
        return _cell_count(length, dt)
    except Exception:
        raise ConfigError("dt", f"{name}={length!r} is not an integer multiple of dt={dt!r}") from None


def phi_on_grid(phi: GridFunction, h, dt) -> GridFunction:
    """The pre-history on ``[-h, 0]`` with step ``dt`` (exact refinement only)."""
    if abs(phi.a + h) > 1e-9 * max(1.0, h) or abs(phi.b) > 1e-9 * max(1.0, h):
        raise ConfigError("phi", f"pre-history must live on [-{h}, 0], got [{phi.a}, {phi.b}]")
    if abs(phi.dt - dt) <= 1e-12 * dt:
        return phi
    ratio = phi.dt / dt
    if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
        raise ConfigError("phi", f"pre-history step {phi.dt!r} is not a multiple of dt={dt!r}")
    m = _aligned(h, dt, "h")
    t = -h + dt * np.arange(m + 1)
    return make(-h, 0.0, dt, np.stack([phi.eval(x) for x in t]))


class PicardOperator:
    """``F`` for a fixed problem, grid and ``beta``.

    Remembers the projections of the previous sweep and uses them as warm
    starts; collects how many windows needed projecting.
    """

    def __init__(self, problem, beta, dt, proj_tol=1e-10):
        self.problem = problem
        self.beta = float(beta)
        self.dt = float(dt)
        self.Z = _aligned(problem.h, dt, "h")
        self.K = _aligned(problem.T, dt, "T")
        self.phi = phi_on_grid(problem.phi, problem.h, dt)
        n = problem.n
        if self.phi.n != n:
            raise ConfigError("phi", f"pre-history has {self.phi.n} components, problem has n={n}")
        self.phi_hat = np.vstack([self.phi.values, np.repeat(self.phi.values[-1:], self.K, axis=0)])
        self.times = -problem.h + dt * np.arange(self.Z + self.K + 1)
        self.t_nodes = self.times[self.Z :]
        self.proj_tol = proj_tol
        self._warm = None
        self._warm_mask = None
        self.windows_seen = 0
        self.windows_projected = 0
        self.clamp_fired = False

    def zeros(self):
        return np.zeros_like(self.phi_hat)

    def grid(self, values):
        return GridFunction(-self.problem.h, self.problem.T, self.dt, values)

    def windows(self, X):
        W = sliding_window_view(X, self.Z + 1, axis=0)  # (K + 1, n, Z + 1)
        return np.moveaxis(W, -1, 1)

    def window_slope_max(self, X):
        S = np.linalg.norm(np.diff(X, axis=0), axis=1) / self.dt
        return sliding_window_view(S, self.Z).max(axis=1)

    def __call__(self, Y):
        X = Y + self.phi_hat
        W = self.windows(X)
        outside = np.flatnonzero(self.window_slope_max(X) > self.beta * (1.0 + 1e-12))
        self.windows_seen += len(W)
        self.windows_projected += len(outside)
        if outside.size:
            W = np.array(W)
            warm = np.array(W[outside])
            if self._warm is not None:
                known = self._warm_mask[outside]
                warm[known] = self._warm[outside[known]]
            P, _, _ = project_vbeta_batch(W[outside], self.dt, self.beta, self.proj_tol, warm_start=warm)
            if self._warm is None:
                self._warm = np.zeros_like(W)
                self._warm_mask = np.zeros(len(W), dtype=bool)
            self._warm[outside] = P
            self._warm_mask[outside] = True
            W[outside] = P
        rhs, fired = self.problem.rhs(self.t_nodes, W, X[self.Z :], self.dt)
        self.clamp_fired |= bool(fired)
        out = np.zeros_like(X)
        out[self.Z + 1 :] = np.cumsum(0.5 * self.dt * (rhs[1:] + rhs[:-1]), axis=0)
        return out

    def weighted_norm(self, D, rho):
        return weighted_h1_norm(GridFunction(0.0, self.problem.T, self.dt, D[self.Z :]), rho)


def picard_apply(y: GridFunction, problem, beta) -> GridFunction:
    """One application of the projected Picard map to ``y`` (zero on ``[-h, 0]``)."""
    op = PicardOperator(problem, beta, y.dt)
    return op.grid(op(np.asarray(y.values)))


def picard_solve_projected(problem, beta, rho, tol=1e-10, max_iter=500, dt=None, y0=None, op=None):
    """Iterate ``y_{k+1} = F y_k`` from ``y0`` (default 0).

    Stops when the weighted difference is below ``tol (1 - q) / q`` and the
    sup-norm difference is below ``tol max(1, |y|_inf)``; the second test
    guards late times, which the weight ``exp(-2 rho t)`` hides.

    Returns
    -------
    y : GridFunction
    iterations : int
    ratios : list of float
        Successive-difference ratios in the weighted norm; ratios whose
        denominator is at rounding level are not recorded.
    """
    if op is None:
        op = PicardOperator(problem, beta, dt if dt is not None else problem.phi.dt)
    L, A = problem.contraction_constants(beta)
    q = contraction_factor(rho, L, A) if L > 0 else 0.0
    weighted_tol = tol * (1.0 - q) / q if 0.0 < q < 1.0 else tol
    Y = op.zeros() if y0 is None else np.array(y0.values if isinstance(y0, GridFunction) else y0, dtype=float)
    Y[: op.Z + 1] = 0.0
    ratios = []
    prev = None
    for it in range(1, max_iter + 1):
        Y_new = op(Y)
        D = Y_new - Y
        sup = float(np.max(np.abs(D)))
        scale = max(1.0, float(np.max(np.abs(Y_new))))
        # entries at rounding level carry no contraction information; the
        # weight exp(-2 rho t) would otherwise let early-time rounding mask
        # genuine late-time differences
        noise = NOISE_FLOOR * np.maximum(np.abs(Y_new), np.abs(Y)) + 1e-300
        d = op.weighted_norm(np.where(np.abs(D) > noise, D, 0.0), rho)
        if prev is not None and prev > 0.0 and d > 0.0:
            ratios.append(d / prev)
        prev = d
        Y = Y_new
        if d <= weighted_tol and sup <= tol * scale:
            return op.grid(Y), it, ratios
    raise MaxIterExceeded(f"Picard iteration not converged after {max_iter} sweeps (last sup step {sup:.3e})")


# -- driver with beta continuation -------------------------------------------------

def _solve(problem, opts: SolveOptions | None):
    opts = opts or SolveOptions()
    dt = opts.dt if opts.dt is not None else problem.phi.dt
    if not dt > 0:
        raise ConfigError("dt", f"must be positive, got {dt!r}")
    if not problem.T > 0:
        raise ConfigError("T", f"must be positive, got {problem.T!r}")
    phi = phi_on_grid(problem.phi, problem.h, dt)
    lip_phi = seminorms(phi)["lip_seminorm"]
    g0 = float(np.linalg.norm(problem.g_at_start()))
    beta = opts.beta0 if opts.beta0 is not None else max(BETA0_FACTOR * max(lip_phi, g0), BETA_FLOOR)
    if opts.beta0 is not None and beta <= lip_phi:
        raise ConfigError("beta0", f"must exceed the pre-history Lipschitz seminorm {lip_phi!r}")
    beta_max = opts.beta_max if opts.beta_max is not None else 1024.0 * beta
    if beta_max < beta:
        raise ConfigError("beta_max", f"{beta_max!r} is below the initial bound {beta!r}")
    notes = []
    trace = []
    all_ratios = []
    total_it = 0
    Y = None
    seen = projected = 0
    fired = False
    while True:
        L, A = problem.contraction_constants(beta)
        rho = opts.rho if opts.rho is not None else choose_rho(L, problem.h, beta, 0.0, opts.target_q, A=A)
        q = contraction_factor(rho, L, A) if L > 0 else 0.0
        if math.exp(-2.0 * rho * problem.T) < UNDERFLOW_WEIGHT:
            msg = f"exp(-2 rho T) < {UNDERFLOW_WEIGHT:g} at rho={rho:.6g}; weighted norms lose late times"
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
            notes.append(msg)
        op = PicardOperator(problem, beta, dt)
        y, its, ratios = picard_solve_projected(problem, beta, rho, opts.tol, opts.max_iter, y0=Y, op=op)
        Y = np.array(y.values)
        total_it += its
        all_ratios.extend(ratios)
        seen += op.windows_seen
        projected += op.windows_projected
        fired |= op.clamp_fired
        X = Y + op.phi_hat
        slopes = np.linalg.norm(np.diff(X[op.Z :], axis=0), axis=1) / dt
        hit = np.flatnonzero(slopes >= beta * (1.0 - SLOPE_MARGIN))
        if hit.size == 0:
            trace.append((beta, problem.T, its))
            status, solved_T, final = "Complete", problem.T, X
            break
        T_beta = float(hit[0] * dt)
        trace.append((beta, T_beta, its))
        beta *= 2.0
        if beta > beta_max:
            status, solved_T = "LipschitzBlowup", T_beta
            final = X[: op.Z + hit[0] + 1]
            break
    sol = GridFunction(-problem.h, solved_T, dt, final) if solved_T > 0 else phi
    res = residual(sol, problem) if sol.m - op.Z >= 2 else 0.0
    margin = None
    if problem.kind == "sdde":
        margin = apriori_bound_check(sol, problem)["margin"]
    return SolveReport(
        solution=sol,
        solved_T=solved_T,
        status=status,
        beta_trace=trace,
        rho_used=rho,
        contraction_ratios=all_ratios,
        residual_sup=res,
        apriori_margin=margin,
        q=q,
        iterations=total_it,
        projected_fraction=projected / seen if seen else 0.0,
        clamp_fired=fired,
        warnings=notes,
    )


def solve_sdde(problem: SddeProblem, opts: SolveOptions | None = None) -> SolveReport:
    """Global solve with ``beta`` continuation; see the module docstring."""
    return _solve(problem, opts)


def solve_fde(problem: FdeProblem, opts: SolveOptions | None = None) -> SolveReport:
    """As :func:`solve_sdde`, with budget ``L(beta) (1/rho + 1/sqrt(2 rho))``."""
    return _solve(problem, opts)


# -- diagnostics -------------------------------------------------------------------

def _solution_parts(x: GridFunction, problem):
    dt = x.dt
    Z = _aligned(problem.h, dt, "h")
    X = np.asarray(x.values)
    W = np.moveaxis(sliding_window_view(X, Z + 1, axis=0), -1, 1)
    t = x.a + dt * np.arange(Z, x.m + 1)
    return Z, X, W, t


def residual(x: GridFunction, problem) -> float:
    """Max over interior nodes of ``|central slope - rhs|`` with unprojected windows."""
    Z, X, W, t = _solution_parts(x, problem)
    if x.m - Z < 2:
        return 0.0
    rhs, _ = problem.rhs(t[1:-1], W[1:-1], X[Z + 1 : -1], x.dt)
    slope = (X[Z + 2 :] - X[Z:-2]) / (2.0 * x.dt)
    return float(np.max(np.linalg.norm(slope - rhs, axis=1)))


def apriori_bound_check(x: GridFunction, problem) -> dict:
    """``|x(t)| <= (|phi|_inf + int_0^t |g(s, 0, 0)| ds) exp(2 L t)`` at every node."""
    Z, X, _, t = _solution_parts(x, problem)
    n = problem.n
    zeros = np.zeros((len(t), n))
    g00 = np.linalg.norm(np.asarray(problem.g(t, zeros, zeros), dtype=float).reshape(len(t), n), axis=1)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * x.dt * (g00[1:] + g00[:-1]))])
    sup_phi = float(np.max(np.linalg.norm(X[: Z + 1], axis=1)))
    with np.errstate(over="ignore"):
        bound = (sup_phi + integral) * np.exp(2.0 * problem.L_g * t)
    margin = float(np.min(bound - np.linalg.norm(X[Z:], axis=1)))
    return {"margin": margin, "pass": bool(margin >= -1e-9 * bound[-1])}


def permanence_teps(x: GridFunction, problem, eps) -> float:
    """Largest node ``T_eps`` up to which the permanence quantity stays ``<= eps``.

    The quantity is ``sup_s |x(s + t) - phi(s)| + |x'(t) - g(0, phi(0), phi(r(phi)))|``
    with ``x'`` a forward difference (backward at the last node).
    """
    Z, X, W, t = _solution_parts(x, problem)
    phi = X[: Z + 1]
    dev = np.max(np.linalg.norm(W - phi[None], axis=2), axis=1)
    slopes = np.diff(X[Z:], axis=0) / x.dt
    fwd = np.vstack([slopes, slopes[-1:]]) if len(slopes) else np.zeros((1, X.shape[1]))
    g0 = problem.g_at_start()
    total = dev + np.linalg.norm(fwd - g0, axis=1)
    bad = np.flatnonzero(total > eps)
    if bad.size == 0:
        return float(t[-1])
    if bad[0] == 0:
        return 0.0
    return float(t[bad[0] - 1])


def continuous_dependence_study(problem, phi, psi, opts: SolveOptions | None = None) -> dict:
    """Solve from ``phi`` and ``psi``; compare on ``[0, T]``."""
    from dataclasses import replace

    a = solve_sdde(replace(problem, phi=phi), opts) if problem.kind == "sdde" else solve_fde(replace(problem, phi=phi), opts)
    b = solve_sdde(replace(problem, phi=psi), opts) if problem.kind == "sdde" else solve_fde(replace(problem, phi=psi), opts)
    Z = _aligned(problem.h, a.solution.dt, "h")
    m = min(a.solution.m, b.solution.m) + 1
    diff = float(np.max(np.linalg.norm(a.solution.values[Z:m] - b.solution.values[Z:m], axis=1)))
    pd = phi_on_grid(phi, problem.h, a.solution.dt).values - phi_on_grid(psi, problem.h, a.solution.dt).values
    den = float(np.max(np.linalg.norm(pd, axis=1)))
    return {"sup_diff": diff, "ratio": diff / den if den > 0 else math.inf, "reports": (a, b)}


def key_estimate_study(problem: SddeProblem, beta, pairs=1000, seed=42, dt=None):
    """Empirical Lipschitz constant of ``phi -> g(0, phi(0), phi(r(phi)))`` on ``V_beta``.

    Compared against ``L_g (2 sqrt(h) + beta |r|_Lip + 1/sqrt(h))``.
    """
    from .delay_functionals import convex_pair_sampler, vbeta_member

    dt = dt if dt is not None else problem.phi.dt
    h = problem.h
    member = lambda rng: vbeta_member(rng, h, dt, beta, problem.n, amplitude=2.0 * h)  # noqa: E731
    sampler = convex_pair_sampler(member)

    def f(win):
        w = np.asarray(win.values)[None]
        val, _ = problem.rhs(np.zeros(1), w, w[:, -1], dt)
        return val[0]

    best = 0.0
    for k in range(pairs):
        a, b = sampler(np.random.default_rng([seed, k, 3]))
        den = weighted_h1_norm(a - b)
        if den > 0:
            best = max(best, float(np.linalg.norm(f(a) - f(b))) / den)
    _, A = problem.contraction_constants(beta)
    return {"max_ratio": best, "bound": problem.L_g * A, "beta": beta, "pairs": pairs}
