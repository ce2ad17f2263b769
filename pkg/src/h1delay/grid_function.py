"""Continuous piecewise-linear functions on uniform grids.

A :class:`GridFunction` stores nodal values of a vector-valued function on
``[a, b]`` and interpolates linearly between nodes.  Every such function is
Lipschitz, so it is a faithful finite-dimensional model of an ``H^1`` element
with essentially bounded derivative.  All norms are computed in closed form
cell by cell, including the exponential weight ``exp(-2 rho t)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    MisalignedWindow,
    NonFiniteValue,
    NonIntegralGrid,
    OutOfDomain,
)

GRID_RTOL = 1e-12
_SNAP = 1e-9
# |2 rho dt| below which the 4-term expansion is used
TAYLOR_SWITCH = 1e-4
# |2 rho dt| below which the closed forms lose too many digits to cancellation
_SERIES_SWITCH = 2.0


def _cell_count(length, dt):
    if not (dt > 0) or not math.isfinite(dt):
        raise NonIntegralGrid(f"grid step must be positive and finite, got {dt!r}")
    ratio = length / dt
    m = round(ratio)
    if m < 1 or abs(ratio - m) > GRID_RTOL * max(1.0, abs(ratio)):
        raise NonIntegralGrid(
            f"interval length {length!r} is not an integer multiple of dt={dt!r} "
            f"(ratio {ratio!r})"
        )
    return int(m)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Piecewise-linear function on a uniform grid.

    Use :func:`make` to build validated instances; the constructor itself
    only normalizes shapes.

    Attributes
    ----------
    a, b : float
        Interval endpoints.
    dt : float
        Grid step, snapped so that ``(b - a) / dt`` is an exact integer.
    values : ndarray of shape (m + 1, n)
        Nodal values.  The array is read-only.
    """

    a: float
    b: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.flags.writeable:
            vals = vals.copy()
            vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    # -- geometry -------------------------------------------------------
    @property
    def m(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.a + self.dt * np.arange(self.m + 1)

    def node_index(self, t, exact=True):
        """Index of the grid node at time ``t``.

        Raises :class:`MisalignedWindow` when ``exact`` and ``t`` is not a node.
        """
        p = (t - self.a) / self.dt
        k = round(p)
        if exact and abs(p - k) > _SNAP:
            raise MisalignedWindow(f"time {t!r} is not a grid node (dt={self.dt!r})")
        if k < 0 or k > self.m:
            raise OutOfDomain(f"time {t!r} outside [{self.a!r}, {self.b!r}]")
        return int(k)

    # -- evaluation -----------------------------------------------------
    def eval(self, t):
        """Linear interpolation at ``t`` (scalar or 1-d array).

        Returns shape ``(n,)`` for scalar ``t`` and ``(len(t), n)`` otherwise.
        Requests within ``1e-12`` (relative) of the endpoints are clamped.
        """
        scalar = np.ndim(t) == 0
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        slack = GRID_RTOL * max(1.0, abs(self.a), abs(self.b))
        if np.any(tt < self.a - slack) or np.any(tt > self.b + slack):
            raise OutOfDomain(
                f"evaluation point outside [{self.a!r}, {self.b!r}]: "
                f"{tt[(tt < self.a - slack) | (tt > self.b + slack)][0]!r}"
            )
        out = interp_nodes(self.values, (tt - self.a) / self.dt)
        return out[0] if scalar else out

    __call__ = eval

    def slopes(self) -> np.ndarray:
        """Cell slope vectors, shape ``(m, n)``."""
        return np.diff(self.values, axis=0) / self.dt

    def seminorms(self) -> dict:
        return seminorms(self)

    def restrict(self, a, b) -> "GridFunction":
        """Restriction to the grid-aligned subinterval ``[a, b]``."""
        i = self.node_index(a)
        j = self.node_index(b)
        if j <= i:
            raise OutOfDomain(f"empty restriction [{a!r}, {b!r}]")
        return GridFunction(self.times[i], self.times[j], self.dt, self.values[i : j + 1])

    def with_values(self, values) -> "GridFunction":
        return make(self.a, self.b, self.dt, values)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return GridFunction(self.a, self.b, self.dt, self.values - other.values)

    def __add__(self, other):
        _check_same_grid(self, other)
        return GridFunction(self.a, self.b, self.dt, self.values + other.values)

    def __repr__(self):
        return (
            f"GridFunction(a={self.a!r}, b={self.b!r}, dt={self.dt!r}, "
            f"m={self.m}, n={self.n})"
        )

    # -- serialization --------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t"] + [f"x_{j + 1}" for j in range(self.n)])
        for t, row in zip(self.times, self.values):
            writer.writerow([_fmt(t)] + [_fmt(v) for v in row])
        return buf.getvalue()

    def to_record(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "dt": self.dt,
            "n": self.n,
            "values": self.values.tolist(),
        }


def _fmt(v):
    return format(float(v), ".16g")


def _check_same_grid(f, g):
    if f.values.shape != g.values.shape or abs(f.a - g.a) > _SNAP * f.dt or abs(f.dt - g.dt) > GRID_RTOL * f.dt:
        raise DimensionMismatch("functions live on different grids")


def interp_nodes(values, pos):
    """Interpolate nodal ``values`` (m+1, n) at fractional node positions ``pos``."""
    m = values.shape[0] - 1
    pos = np.clip(pos, 0.0, m)
    k = np.rint(pos)
    on_node = np.abs(pos - k) <= _SNAP
    idx = np.where(on_node, k, np.floor(pos)).astype(np.intp)
    idx = np.minimum(idx, max(m - 1, 0))
    frac = np.where(on_node, k - idx, pos - idx)[:, None]
    if m == 0:
        return np.repeat(values[:1], len(pos), axis=0)
    left = values[idx]
    right = values[idx + 1]
    out = left + frac * (right - left)
    # nodes are returned bit-exactly
    exact = on_node & (frac[:, 0] == 1.0)
    if np.any(exact):
        out[exact] = right[exact]
    return out


def make(a, b, dt, values) -> GridFunction:
    """Validated constructor.

    Raises
    ------
    NonIntegralGrid
        ``b <= a`` or ``(b - a) / dt`` not an integer within ``1e-12``.
    DimensionMismatch
        ``values`` does not have ``m + 1`` rows.
    NonFiniteValue
        Any nodal value is NaN or infinite.
    """
    a = float(a)
    b = float(b)
    if not b > a:
        raise NonIntegralGrid(f"need b > a, got a={a!r}, b={b!r}")
    m = _cell_count(b - a, float(dt))
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.ndim != 2 or vals.shape[0] != m + 1 or vals.shape[1] < 1:
        raise DimensionMismatch(
            f"expected {m + 1} nodal rows for [{a!r}, {b!r}] with dt={dt!r}, "
            f"got shape {np.shape(values)}"
        )
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValue("nodal values must be finite")
    return GridFunction(a, b, (b - a) / m, vals)


def sample(fn, a, b, dt, n=None) -> GridFunction:
    """Sample a callable ``fn(t) -> R^n`` at the grid nodes."""
    m = _cell_count(float(b) - float(a), float(dt))
    t = float(a) + (float(b) - float(a)) / m * np.arange(m + 1)
    vals = np.asarray([np.atleast_1d(fn(ti)) for ti in t], dtype=float)
    if n is not None and vals.shape[1] != n:
        raise DimensionMismatch(f"sampled function has {vals.shape[1]} components, expected {n}")
    return make(a, b, dt, vals)


def from_record(rec) -> GridFunction:
    return make(rec["a"], rec["b"], rec["dt"], np.asarray(rec["values"], dtype=float).reshape(-1, int(rec["n"])))


def from_csv(text, dt=None) -> GridFunction:
    """Parse the CSV layout written by :meth:`GridFunction.to_csv`."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0][0].strip() != "t":
        raise DimensionMismatch("CSV must start with a header row 't,x_1,...'")
    data = np.asarray([[float(v) for v in r] for r in rows[1:]], dtype=float)
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
        raise DimensionMismatch("CSV needs at least two rows and one value column")
    t = data[:, 0]
    a, b = t[0], t[-1]
    m = data.shape[0] - 1
    step = (b - a) / m if dt is None else dt
    if np.max(np.abs(t - (a + step * np.arange(m + 1)))) > 1e-9 * max(1.0, abs(b - a)):
        raise NonIntegralGrid("CSV time column is not a uniform grid")
    return make(a, b, step, data[:, 1:])


def dumps_record(f: GridFunction) -> str:
    return json.dumps(f.to_record(), indent=2, sort_keys=True)


# -- norms ------------------------------------------------------------------

def seminorms(f) -> dict:
    """``sup_norm``, ``lip_seminorm`` and ``sup_derivative`` of ``f``.

    For piecewise-linear functions the sup norm is attained at a node and the
    Lipschitz seminorm equals the largest cell-slope norm.
    """
    vals = f.values
    sup = float(np.max(np.linalg.norm(vals, axis=1)))
    if vals.shape[0] > 1:
        lip = float(np.max(np.linalg.norm(np.diff(vals, axis=0), axis=1)) / f.dt)
    else:
        lip = 0.0
    return {"sup_norm": sup, "lip_seminorm": lip, "sup_derivative": lip}


def exp_moments(k, d, jmax=2):
    """``(M0, ..., M_jmax)`` with ``Mj = int_0^d s^j exp(-k s) ds``."""
    x = k * d
    ax = abs(x)
    if ax < TAYLOR_SWITCH:
        terms = 4
    elif ax < _SERIES_SWITCH:
        terms = 30
    else:
        # repeated integration by parts: Mj = (j M_{j-1} - d^j e^{-x}) / k
        e = math.exp(-x)
        out = [-math.expm1(-x) / k]
        for j in range(1, jmax + 1):
            out.append((j * out[-1] - d**j * e) / k)
        return tuple(out)
    out = []
    for j in range(jmax + 1):
        acc = 0.0
        term = 1.0  # (-x)^p / p!
        for p in range(terms):
            acc += term / (j + p + 1)
            term *= -x / (p + 1)
        out.append(acc * d ** (j + 1))
    return tuple(out)


def _cell_weights(f, rho):
    """``exp(-2 rho t_left)`` for every cell (with underflow to zero)."""
    left = f.a + f.dt * np.arange(f.m)
    with np.errstate(under="ignore"):
        return np.exp(-2.0 * rho * left)


def cell_l2_squares(values, dt, rho=0.0, left_times=None):
    """Per-cell ``int |f|^2 exp(-2 rho t) dt`` for a piecewise-linear ``f``."""
    u = values[:-1]
    du = values[1:] - values[:-1]
    M0, M1, M2 = exp_moments(2.0 * rho, dt)
    slope = du / dt
    uu = np.einsum("ij,ij->i", u, u)
    um = np.einsum("ij,ij->i", u, slope)
    mm = np.einsum("ij,ij->i", slope, slope)
    cells = uu * M0 + 2.0 * um * M1 + mm * M2
    if rho != 0.0:
        with np.errstate(under="ignore"):
            cells = cells * np.exp(-2.0 * rho * left_times)
    return cells


def weighted_l2_norm(f, rho=0.0) -> float:
    """Exact ``L_{2,rho}`` norm of the piecewise-linear ``f``."""
    if f.m == 0:
        return 0.0
    left = f.a + f.dt * np.arange(f.m)
    return math.sqrt(max(float(np.sum(cell_l2_squares(f.values, f.dt, rho, left))), 0.0))


def weighted_derivative_norm(f, rho=0.0) -> float:
    """Exact ``L_{2,rho}`` norm of the (piecewise-constant) derivative."""
    if f.m == 0:
        return 0.0
    slope = np.diff(f.values, axis=0) / f.dt
    M0 = exp_moments(2.0 * rho, f.dt)[0]
    sq = np.einsum("ij,ij->i", slope, slope) * M0
    if rho != 0.0:
        sq = sq * _cell_weights(f, rho)
    return math.sqrt(float(np.sum(sq)))


def weighted_h1_norm(f, rho=0.0) -> float:
    """Exact ``H^1_rho`` norm: weighted L2 norms of ``f`` and ``f'`` combined."""
    return math.hypot(weighted_l2_norm(f, rho), weighted_derivative_norm(f, rho))


# -- constructions ----------------------------------------------------------

def extend_constant(phi: GridFunction, T) -> GridFunction:
    """Extend a pre-history on ``[-h, 0]`` by its value at 0 up to ``T``."""
    if abs(phi.b) > _SNAP * phi.dt:
        raise OutOfDomain("pre-history must end at t = 0")
    k = _cell_count(float(T), phi.dt)
    tail = np.repeat(phi.values[-1:], k, axis=0)
    return GridFunction(phi.a, phi.dt * k, phi.dt, np.vstack([phi.values, tail]))


class WindowView:
    """The segment ``u -> f(s + u)`` for ``u in [-h, 0]`` of a parent function.

    Shares memory with the parent; ``s`` must be a grid node of the parent.
    """

    __slots__ = ("parent", "anchor", "cells")

    def __init__(self, parent: GridFunction, anchor: int, cells: int):
        if anchor - cells < 0 or anchor > parent.m:
            raise OutOfDomain("window leaves the parent's domain")
        self.parent = parent
        self.anchor = anchor
        self.cells = cells

    @property
    def dt(self):
        return self.parent.dt

    @property
    def h(self):
        return self.cells * self.parent.dt

    @property
    def n(self):
        return self.parent.n

    @property
    def a(self):
        return -self.h

    @property
    def b(self):
        return 0.0

    @property
    def m(self):
        return self.cells

    @property
    def s(self):
        return self.parent.a + self.anchor * self.parent.dt

    @property
    def values(self):
        return self.parent.values[self.anchor - self.cells : self.anchor + 1]

    @property
    def times(self):
        return -self.h + self.dt * np.arange(self.cells + 1)

    def eval(self, u):
        scalar = np.ndim(u) == 0
        uu = np.atleast_1d(np.asarray(u, dtype=float))
        slack = GRID_RTOL * max(1.0, self.h)
        if np.any(uu < -self.h - slack) or np.any(uu > slack):
            raise OutOfDomain(f"window argument outside [{-self.h!r}, 0]")
        out = interp_nodes(self.values, (uu + self.h) / self.dt)
        return out[0] if scalar else out

    __call__ = eval

    def as_grid(self) -> GridFunction:
        return GridFunction(-self.h, 0.0, self.dt, self.values)

    def slopes(self):
        return np.diff(self.values, axis=0) / self.dt

    def __repr__(self):
        return f"WindowView(s={self.s!r}, h={self.h!r})"


def as_grid(f) -> GridFunction:
    return f.as_grid() if isinstance(f, WindowView) else f


def window(f: GridFunction, s, h=None) -> WindowView:
    """Window of ``f`` at node ``s`` of length ``h`` (default ``-f.a``)."""
    if h is None:
        h = -f.a
    cells = _cell_count(float(h), f.dt)
    p = (s - f.a) / f.dt
    k = round(p)
    if abs(p - k) > _SNAP:
        raise MisalignedWindow(f"window anchor {s!r} is not a grid node (dt={f.dt!r})")
    if k - cells < 0 or k > f.m:
        raise OutOfDomain(f"window at {s!r} of length {h!r} leaves [{f.a!r}, {f.b!r}]")
    return WindowView(f, int(k), cells)


def integrate_from_zero(f: GridFunction) -> GridFunction:
    """Antiderivative vanishing on ``[a, 0]``, sampled exactly at the nodes.

    The nodal values are the exact integrals of the piecewise-linear ``f``
    (trapezoid sums); between nodes the result is again linear.
    """
    z = f.node_index(0.0)
    out = np.zeros_like(f.values)
    if z < f.m:
        inc = 0.5 * f.dt * (f.values[z:-1] + f.values[z + 1 :])
        out[z + 1 :] = np.cumsum(inc, axis=0)
    return GridFunction(f.a, f.b, f.dt, out)
