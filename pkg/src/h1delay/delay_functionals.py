"""Delay functionals ``r: H^1(-h, 0; R^n) -> [-h, 0]``.

Every functional evaluates a whole batch of windows at once: the solver
hands over an array of shape ``(N, H + 1, n)`` holding the nodal values of
``N`` windows on the common grid ``-h, -h + dt, ..., 0``.  Scalar calls on a
single :class:`~h1delay.grid_function.GridFunction` or ``WindowView`` go
through the same code path.

Elapsed-time models (threshold crossing, echo time) compute ``s* >= 0`` and
return the delay ``-s*``, so ``x(t + r) = x(t - s*)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .convex_projection import WAlphaSet, project_walpha
from .errors import GBoundsViolated, NoCrossing, NonConvergence, OutOfRange
from .grid_function import GridFunction, make, weighted_h1_norm

CLAMP_SLACK = 1e-12


def eval_windows(windows, dt, u):
    """Linear interpolation of each window at its own point ``u[i]`` in ``[-h, 0]``.

    ``windows`` has shape ``(N, H + 1, n)`` (or ``(N, H + 1)``); returns
    ``(N, n)`` (or ``(N,)``).  Grid nodes are reproduced exactly.
    """
    windows = np.asarray(windows)
    N, M1 = windows.shape[:2]
    H = M1 - 1
    pos = (np.asarray(u, dtype=float) + H * dt) / dt
    pos = np.clip(pos, 0.0, H)
    near = np.rint(pos)
    on_node = np.abs(pos - near) <= 1e-9 * np.maximum(1.0, pos)
    pos = np.where(on_node, near, pos)
    i = np.minimum(np.floor(pos).astype(int), max(H - 1, 0))
    frac = pos - i
    rows = np.arange(N)
    lo = windows[rows, i]
    hi = windows[rows, np.minimum(i + 1, H)]
    if windows.ndim == 3:
        frac = frac[:, None]
    return (1.0 - frac) * lo + frac * hi


@dataclass
class DelayFunctional:
    """A delay functional with its claimed Lipschitz constant.

    ``batch(windows, dt)`` returns the raw delays for a stack of windows;
    :meth:`evaluate_batch` clamps them into ``[-h, 0]`` and reports whether
    the clamp had to move any value.  ``component`` selects the state
    component the functional reads (``None`` means all components).
    """

    name: str
    h: float
    batch: Callable = field(repr=False)
    lip_hint: float
    validity_set: object = None
    component: int | None = None
    params: dict = field(default_factory=dict)

    def select(self, windows):
        windows = np.asarray(windows)
        if windows.ndim == 2:
            windows = windows[:, :, None]
        if self.component is None:
            return windows
        return windows[:, :, self.component : self.component + 1]

    def evaluate_batch(self, windows, dt):
        raw = np.asarray(self.batch(self.select(windows), dt), dtype=float)
        vals = np.clip(raw, -self.h, 0.0)
        fired = bool(np.any(np.abs(vals - raw) > CLAMP_SLACK * max(1.0, self.h)))
        return vals, fired

    def __call__(self, phi) -> float:
        vals = np.asarray(phi.values)
        _check_window(self, phi)
        out, _ = self.evaluate_batch(vals[None], phi.dt)
        return float(out[0])


def _check_window(r, phi):
    length = phi.b - phi.a
    if abs(length - r.h) > 1e-9 * max(1.0, r.h):
        raise ValueError(f"window length {length!r} does not match delay horizon h={r.h!r}")


def constant_delay(tau0, h) -> DelayFunctional:
    if not (-h <= tau0 <= 0.0):
        raise OutOfRange(f"constant delay {tau0!r} outside [-{h}, 0]")

    def batch(windows, dt):
        return np.full(windows.shape[0], float(tau0))

    return DelayFunctional("constant", h, batch, 0.0, params={"tau0": tau0})


def state_value_delay(cap, h) -> DelayFunctional:
    """``r(phi) = -min(|phi(0)|, cap)``; Lipschitz through point evaluation."""
    if not (0.0 < cap <= h):
        raise OutOfRange(f"cap {cap!r} must lie in (0, h={h!r}]")

    def batch(windows, dt):
        return -np.minimum(np.linalg.norm(windows[:, -1, :], axis=1), cap)

    lip = math.sqrt(h) + 1.0 / math.sqrt(h)
    return DelayFunctional("state_value", h, batch, lip, params={"cap": cap})


@dataclass
class ThresholdPaths:
    """Maturation trajectories kept by :func:`threshold_crossing`."""

    s: np.ndarray  # (M + 1,) step grid in elapsed time
    y: np.ndarray  # (N, M + 1) trajectory values; frozen after the crossing
    s_star: np.ndarray  # (N,)
    step: np.ndarray  # (N,) index of the step containing the crossing


def _checked_rate(g, eps, K):
    def rate(w, dt, y, s):
        p = eval_windows(w, dt, -s)
        val = np.asarray(g(y, p), dtype=float)
        bad = ~np.isfinite(val) | (val < eps - 1e-12) | (val > K + 1e-12)
        if np.any(bad):
            raise GBoundsViolated(f"g = {val[bad][0]!r} outside [{eps}, {K}]")
        return -val

    return rate


def _rk4(rate, w, dt, y, s, sig):
    k1 = rate(w, dt, y, s)
    k2 = rate(w, dt, y + 0.5 * sig * k1, s + 0.5 * sig)
    k3 = rate(w, dt, y + 0.5 * sig * k2, s + 0.5 * sig)
    k4 = rate(w, dt, y + sig * k3, s + sig)
    return y + sig / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def threshold_crossing(windows, dt, g, eps, K, x1, x2, ds=None, tol=1e-10, keep_path=False):
    """First time ``s*`` at which ``y' = -g(y, psi(-s)), y(0) = x2`` reaches ``x1``.

    Classical fourth-order Runge-Kutta on a step grid that contains every
    window node (``ds`` is shrunk so that ``dt / ds`` is an integer), then
    bisection on the length of the crossing step, re-integrated from its
    left end, until the bracket is shorter than ``tol``.

    Raises
    ------
    NoCrossing
        If some trajectory stays above ``x1`` on the whole window.
    GBoundsViolated
        If ``g`` leaves ``[eps, K]`` at any evaluated point.
    """
    w = np.asarray(windows)[..., 0]
    N, M1 = w.shape
    h = (M1 - 1) * dt
    sub = 4 if ds is None else max(1, int(math.ceil(dt / ds - 1e-9)))
    M = (M1 - 1) * sub
    step = h / M
    scale = max(1.0, abs(x1), abs(x2))
    rate = _checked_rate(g, eps, K)

    y = np.full(N, float(x2))
    k_cross = np.full(N, -1)
    y_left = np.empty(N)
    path = np.empty((N, M + 1)) if keep_path else None
    if keep_path:
        path[:, 0] = y
    live = np.arange(N)
    for k in range(M):
        if live.size == 0:
            if keep_path:
                path[:, k + 1 :] = path[:, k : k + 1]
            break
        y_new = _rk4(rate, w[live], dt, y[live], np.full(live.size, k * step), step)
        crossed = y_new <= x1
        hit = live[crossed]
        y_left[hit] = y[hit]
        k_cross[hit] = k
        y[live] = y_new
        if keep_path:
            path[:, k + 1] = y
        live = live[~crossed]
    # boundary crossing exactly at s = h, up to rounding
    if live.size:
        missing = live[y[live] - x1 > 1e-12 * scale]
        if missing.size:
            raise NoCrossing(f"trajectory ends at y(h) = {float(np.min(y[missing]))!r} > x1 = {x1!r}")
    s_star = np.full(N, h)
    idx = np.flatnonzero(k_cross >= 0)
    if idx.size:
        sub_w = w[idx]
        left = k_cross[idx] * step
        y0 = y_left[idx]
        lo = np.zeros(idx.size)
        hi = np.full(idx.size, step)
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            above = _rk4(rate, sub_w, dt, y0, left, mid) > x1
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        s_star[idx] = np.minimum(left + 0.5 * (lo + hi), h)
    if not keep_path:
        return s_star
    step_idx = np.where(k_cross >= 0, k_cross, M - 1)
    return s_star, ThresholdPaths(np.arange(M + 1) * step, path, s_star, step_idx)


def threshold_delay(g, eps, K, x1, x2, h, ds=None, tol=1e-10, lip_g=None, component=None) -> DelayFunctional:
    """Delay given by a threshold crossing of the maturation equation.

    ``g(y, p)`` must accept arrays and satisfy ``eps <= g <= K``; ``ds``
    defaults to a quarter of the window grid step.  ``lip_g`` (Lipschitz
    constant of ``g``) only feeds the reported constants.
    """
    if not (0.0 < eps <= K):
        raise OutOfRange(f"need 0 < eps <= K, got eps={eps!r}, K={K!r}")
    if not x1 < x2:
        raise OutOfRange(f"need x1 < x2, got {x1!r}, {x2!r}")
    if h < (x2 - x1) / eps * (1.0 - 1e-12):
        raise OutOfRange(f"h={h!r} shorter than (x2 - x1)/eps = {(x2 - x1) / eps!r}")

    def batch(windows, dt):
        return -threshold_crossing(windows, dt, g, eps, K, x1, x2, ds, tol)

    lip = math.inf
    if lip_g is not None:
        lip = threshold_l2_constant(lip_g, h) / eps
    params = {"eps": eps, "K": K, "x1": x1, "x2": x2, "ds": ds, "tol": tol, "lip_g": lip_g, "g": g}
    return DelayFunctional("threshold", h, batch, lip, component=component, params=params)


def threshold_l2_constant(L, h):
    """``C`` in ``eps |r(phi) - r(psi)| <= C |phi - psi|_{L2}``.

    Integrating the Gronwall bound ``|y_phi - y_psi|(t) <= L sqrt(t) e^{Lt}
    |phi - psi|_{L2}`` over ``[0, h]`` and adding the direct term gives
    ``C = L h * L sqrt(h) e^{Lh} + L sqrt(h)``.
    """
    return L * h * L * math.sqrt(h) * math.exp(L * h) + L * math.sqrt(h)


def echo_time(windows, dt, w, c, tol=1e-12, max_iter=10_000):
    """Solve ``c s = phi(-s) + phi(0) + 2 w`` by fixed-point iteration from ``s = 0``."""
    v = np.asarray(windows)[..., 0]
    N, M1 = v.shape
    h = (M1 - 1) * dt
    right = v[:, -1]
    s = np.zeros(N)
    for _ in range(max_iter):
        new = (eval_windows(v, dt, -np.clip(s, 0.0, h)) + right + 2.0 * w) / c
        if np.any(new < -1e-12) or np.any(new > h * (1 + 1e-12) + 1e-12):
            raise NonConvergence("echo iteration left [0, h]; input is not in W_alpha")
        diff = np.max(np.abs(new - s)) if N else 0.0
        s = new
        if diff < tol:
            return np.clip(s, 0.0, h)
    raise NonConvergence(f"echo iteration did not reach tol={tol!r}")


def echo_delay(w, w_plus, c, alpha, tol=1e-12, component=None) -> DelayFunctional:
    """Echo time ``-s_phi`` for windows in ``W_alpha`` (no projection)."""
    wset = WAlphaSet((2.0 * w + 2.0 * w_plus) / c, alpha, w, w_plus, c)
    h = wset.h

    def batch(windows, dt):
        return -echo_time(windows, dt, w, c, tol)

    lip = 2.0 / alpha * (math.sqrt(h) + 1.0 / math.sqrt(h))
    params = {"w": w, "w_plus": w_plus, "c": c, "alpha": alpha, "tol": tol}
    return DelayFunctional("echo", h, batch, lip, validity_set=wset, component=component, params=params)


def projected_echo_delay(w, w_plus, c, alpha, tol=1e-12, proj_tol=1e-10, component=None) -> DelayFunctional:
    """``r_alpha = -s`` of the ``W_alpha`` projection; defined on all windows.

    Windows already in ``W_alpha`` skip the projection.  The fraction of
    windows that needed projecting is accumulated in ``params["stats"]``.
    """
    base = echo_delay(w, w_plus, c, alpha, tol)
    wset = base.validity_set
    stats = {"windows": 0, "projected": 0}

    def batch(windows, dt):
        v = np.array(windows[..., 0])
        H = v.shape[1] - 1
        lo, hi, sb = wset.lower, wset.upper, wset.slope_bound
        slope = np.max(np.abs(np.diff(v, axis=1)), axis=1) / dt if H else np.zeros(len(v))
        outside = (
            (np.min(v, axis=1) < lo - 1e-12) | (np.max(v, axis=1) > hi + 1e-12) | (slope > sb + 1e-12)
        )
        stats["windows"] += len(v)
        stats["projected"] += int(outside.sum())
        for i in np.flatnonzero(outside):
            g = GridFunction(-H * dt, 0.0, dt, v[i])
            v[i] = project_walpha(g, wset, proj_tol).projected.values[:, 0]
        return -echo_time(v[:, :, None], dt, w, c, tol)

    params = dict(base.params, stats=stats)
    return DelayFunctional("echo_projected", base.h, batch, base.lip_hint, None, component, params)


# -- window samplers and Lipschitz measurement -------------------------------

def vbeta_member(rng, h, dt, beta, n=1, amplitude=1.0):
    """Random piecewise-linear window with every cell slope of norm <= beta."""
    m = int(round(h / dt))
    d = rng.standard_normal((m, n))
    d *= beta * rng.uniform(0.0, 1.0, (m, 1)) / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    v = np.empty((m + 1, n))
    v[0] = rng.uniform(-amplitude, amplitude, n)
    v[1:] = v[0] + dt * np.cumsum(d, axis=0)
    return make(-h, 0.0, dt, v)


def walpha_member(rng, wset: WAlphaSet, dt):
    """Random scalar window in ``W_alpha``: bounded slopes, squeezed into the box."""
    m = int(round(wset.h / dt))
    smooth = rng.integers(0, 2) == 0
    if smooth:
        t = np.linspace(0.0, 1.0, m + 1)
        v = np.cumsum(np.concatenate([[0.0], np.cos(rng.uniform(0.5, 6.0) * t[:-1] + rng.uniform(0, 6.3))]))
    else:
        v = np.concatenate([[0.0], np.cumsum(rng.uniform(-1.0, 1.0, m))])
    slope = np.max(np.abs(np.diff(v))) / dt if m else 0.0
    if slope > 0:
        v *= wset.slope_bound * rng.uniform(0.2, 1.0) / slope
    span = v.max() - v.min()
    room = wset.upper - wset.lower
    if span > room:
        v *= room / span
        span = room
    v += wset.lower - v.min() + rng.uniform(0.0, room - span)
    return make(-wset.h, 0.0, dt, np.clip(v, wset.lower, wset.upper))


def convex_pair_sampler(member):
    """Pairs of members close to each other: ``psi = (1 - lam) phi + lam chi``."""

    def sampler(rng):
        a = member(rng)
        b = member(rng)
        lam = 10.0 ** rng.uniform(-4.0, 0.0)
        return a, a.with_values((1.0 - lam) * a.values + lam * b.values)

    return sampler


def empirical_lipschitz(r: DelayFunctional, sampler, pairs=1000, seed=42):
    """``max |r(phi) - r(psi)| / |phi - psi|_{H^1}`` over seeded random pairs.

    ``sampler(rng)`` returns one pair of windows.  Pair ``k`` draws from
    ``default_rng([seed, k])``, so results do not depend on evaluation order.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    best, witness = 0.0, None
    for k in range(pairs):
        a, b = sampler(np.random.default_rng([seed, k]))
        den = weighted_h1_norm(a - b)
        if den <= 0.0:
            continue
        ratio = abs(r(a) - r(b)) / den
        if ratio > best or witness is None:
            best, witness = ratio, (a, b)
    return {"max_ratio": best, "witness_pair": witness}


def _bounded_rational(eps, K):
    """``eps + (K - eps) / (1 + y^2 + p^2)``; Lipschitz constant ``0.65 (K - eps)``."""
    return lambda y, q: eps + (K - eps) / (1.0 + y * y + q * q)


def make_delay(tag, params, h, n=1):
    """Build a delay functional from a config tag and parameter block.

    Unknown parameters are rejected with a :class:`ConfigError` naming them.
    """
    from .errors import ConfigError

    p = dict(params)
    try:
        r = _build_delay(tag, p, h, n)
    except KeyError as exc:
        raise ConfigError(f"delay.params.{exc.args[0]}", "missing parameter") from None
    except ConfigError:
        raise
    except (OutOfRange, ValueError, TypeError) as exc:
        raise ConfigError("delay.params", str(exc)) from None
    if p:
        raise ConfigError(f"delay.params.{sorted(p)[0]}", "unknown parameter")
    return r


def _build_delay(tag, p, h, n):
    from .errors import ConfigError

    if tag == "constant":
        return constant_delay(float(p.pop("tau0")), h)
    if tag == "state_value":
        return state_value_delay(float(p.pop("cap")), h)
    if tag == "echo":
        vals = [float(p.pop(k)) for k in ("w", "w_plus", "c", "alpha")]
        comp = p.pop("component", 0 if n > 1 else None)
        r = projected_echo_delay(*vals, tol=float(p.pop("tol", 1e-12)), component=comp)
        if abs(r.h - h) > 1e-9 * h:
            raise ConfigError("delay.params", f"echo horizon (2w + 2w_plus)/c = {r.h!r} differs from h={h!r}")
        return r
    if tag == "threshold":
        eps, K = float(p.pop("eps")), float(p.pop("K"))
        x1, x2 = float(p.pop("x1")), float(p.pop("x2"))
        kind = p.pop("g", "constant")
        if kind == "constant":
            gval = float(p.pop("g_value", K))
            g = lambda y, q: np.full(np.shape(y), gval)  # noqa: E731
            lip_g = 0.0
        elif kind == "bounded_rational":
            g, lip_g = _bounded_rational(eps, K), 0.65 * (K - eps)
        else:
            raise ConfigError("delay.params.g", f"unknown g {kind!r} (constant | bounded_rational)")
        comp = p.pop("component", 0 if n == 1 else 1)
        ds = p.pop("ds", None)
        return threshold_delay(g, eps, K, x1, x2, h, ds, float(p.pop("tol", 1e-10)), lip_g, comp)
    raise ConfigError("delay.tag", f"unknown delay {tag!r} (constant | state_value | threshold | echo)")
