"""Constant-delay DDE integration and the benchmark systems.

The integrator is the method of steps with a fixed RK4 step. Delayed states
``x(t - tau)`` come from the constant pre-history (the initial condition) when
``t - tau <= t_start``, otherwise from a cubic Hermite interpolant through the
already computed nodes and their derivatives. Steps that straddle a
discontinuity point ``t_start + j*tau`` are split there so that the low-order
derivative jumps inherited from the pre-history sit on mesh nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

SYSTEMS = ("lotka_volterra_dde", "spiral_dde", "fitzhugh_nagumo_dde", "rossler_dde")


class BlowUpError(RuntimeError):
    def __init__(self, time, which=None):
        self.time = time
        self.which = which
        msg = f"non-finite state at t={time:.6g}"
        if which is not None:
            idx = [int(i) for i in which]
            shown = ", ".join(map(str, idx[:10])) + (", ..." if len(idx) > 10 else "")
            msg += f" in {len(idx)} trajectories [{shown}]"
        super().__init__(msg)


@dataclass
class DDESpec:
    """A constant-delay vector field ``dx/dt = rhs(t, x(t), x(t - delay), params)``.

    ``rhs`` receives states of shape ``(..., dim)`` and must broadcast over the
    leading axes.
    """

    name: str
    dim: int
    delay: float
    rhs: Callable
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.delay > 0:
            raise ValueError(f"{self.name}: delay must be > 0, got {self.delay}")

    def __call__(self, t, x, xd):
        return self.rhs(t, x, xd, self.params)


@dataclass
class TimeSeries:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.times) != self.values.shape[0]:
            raise ValueError(f"{len(self.times)} timestamps for {self.values.shape[0]} rows")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


# -- systems -------------------------------------------------------------------

def _lotka_volterra(t, x, xd, p):
    # predator grows when the delayed prey exceeds 1; with the opposite sign
    # both populations explode for every initial condition in the sampling box
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 * (1.0 - xd[..., 1]), 0.5 * x2 * (xd[..., 0] - 1.0)], axis=-1)


def _spiral(t, x, xd, p):
    return np.tanh(x + xd) @ np.asarray(p["A"]).T


def _fitzhugh_nagumo(t, x, xd, p):
    x1, x2 = x[..., 0], x[..., 1]
    g = p["gamma"]
    dx1 = x1 - x1 ** 3 / 3.0 - g * xd[..., 1] + p["I"]
    dx2 = p["eps"] * (g * x1 + p["a"] - p["b"] * x2)
    return np.stack([dx1, dx2], axis=-1)


def _rossler(t, x, xd, p):
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([
        -x2 - x3,
        x1 + p["a"] * x2,
        p["b"] + x3 * (xd[..., 0] - p["c"]),
    ], axis=-1)


_DEFAULTS = {
    "lotka_volterra_dde": (2, _lotka_volterra, {"tau": 0.1}),
    "spiral_dde": (2, _spiral, {"tau": 2.5, "A": [[-1.0, 1.0], [-1.0, -1.0]]}),
    "fitzhugh_nagumo_dde": (2, _fitzhugh_nagumo,
                            {"tau": 1.0, "a": 0.5, "b": 0.8, "eps": 0.02, "I": 0.5, "gamma": 1.0}),
    "rossler_dde": (3, _rossler, {"tau": 2.5, "a": 0.2, "b": 0.2, "c": 4.5}),
}

# time window, initial-condition box, and whether t_start itself is sampled
WINDOWS = {
    "lotka_volterra_dde": ((2.0, 30.0), (0.1, 2.0), True),
    "spiral_dde": ((0.0, 20.0), (-2.0, 2.0), False),
    "fitzhugh_nagumo_dde": ((2.0, 30.0), (-5.0, 5.0), True),
    "rossler_dde": ((2.0, 20.0), (0.1, 1.5), True),
}


def make_system(name: str, overrides: dict | None = None) -> DDESpec:
    """Build one of the four benchmark systems with default parameters.

    ``overrides`` may replace any default, including ``tau``; the
    Fitzhugh-Nagumo system also accepts the coupling factor ``gamma``.
    """
    if name not in _DEFAULTS:
        raise ValueError(f"unknown system {name!r}; valid: {', '.join(SYSTEMS)}")
    dim, rhs, defaults = _DEFAULTS[name]
    params = {k: (np.array(v) if isinstance(v, list) else v) for k, v in defaults.items()}
    for key, value in (overrides or {}).items():
        if key not in params:
            raise ValueError(f"{name}: unknown parameter {key!r}; valid: {sorted(params)}")
        params[key] = np.array(value, dtype=float) if isinstance(value, (list, tuple)) else value
    tau = float(params.pop("tau"))
    return DDESpec(name=name, dim=dim, delay=tau, rhs=rhs, params=params)


def system_params(spec: DDESpec) -> dict:
    out = {"tau": spec.delay}
    for k, v in spec.params.items():
        out[k] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


def fhn_equilibrium(spec: DDESpec) -> np.ndarray:
    """Fixed point of the (coupled) Fitzhugh-Nagumo system.

    The real root of the cubic is polished so that the right-hand side
    evaluates to exactly zero in float64 whenever such a neighbour exists.
    """
    p = spec.params
    g, a, b, I = p["gamma"], p["a"], p["b"], p["I"]
    # x2 = (g x1 + a) / b  =>  -x1^3/3 + (1 - g^2/b) x1 + I - g a / b = 0
    roots = np.roots([-1.0 / 3.0, 0.0, 1.0 - g * g / b, I - g * a / b])
    x1 = float(sorted(roots[np.abs(roots.imag) < 1e-9].real)[0])
    x2 = (g * x1 + a) / b
    best = np.array([x1, x2])
    best_res = np.abs(spec(0.0, best, best)).max()
    for i in range(-64, 65):
        c1 = x1 + i * np.spacing(x1)
        for j in range(-64, 65):
            c = np.array([c1, x2 + j * np.spacing(x2)])
            res = np.abs(spec(0.0, c, c)).max()
            if res < best_res:
                best, best_res = c, res
                if res == 0.0:
                    return best
    return best


# -- integrator ----------------------------------------------------------------

class _History:
    """Growing node store with cubic Hermite lookup."""

    def __init__(self, t0, x0, capacity):
        self.t = np.empty(capacity)
        self.x = np.empty((capacity,) + x0.shape)
        self.f = np.empty((capacity,) + x0.shape)
        self.t0 = t0
        self.x0 = x0
        self.n = 0

    def push(self, t, x, f):
        if self.n == len(self.t):
            grow = len(self.t)
            self.t = np.concatenate([self.t, np.empty(grow)])
            self.x = np.concatenate([self.x, np.empty_like(self.x[:grow])])
            self.f = np.concatenate([self.f, np.empty_like(self.f[:grow])])
        self.t[self.n] = t
        self.x[self.n] = x
        self.f[self.n] = f
        self.n += 1

    def __call__(self, s):
        if s <= self.t0:
            return self.x0
        n = self.n
        t = self.t[:n]
        if s > t[n - 1] + 1e-12 * max(1.0, abs(s)):
            raise ValueError(
                f"delayed time {s:.6g} lies beyond the last computed node {t[n - 1]:.6g}; "
                "the step must not exceed the delay"
            )
        j = int(np.searchsorted(t, s, side="left")) - 1
        j = min(max(j, 0), n - 2)
        h = t[j + 1] - t[j]
        th = (s - t[j]) / h
        th2, th3 = th * th, th * th * th
        return ((2 * th3 - 3 * th2 + 1) * self.x[j] + (th3 - 2 * th2 + th) * h * self.f[j]
                + (-2 * th3 + 3 * th2) * self.x[j + 1] + (th3 - th2) * h * self.f[j + 1])


def _breakpoints(t_start, t_end, tau, order=4):
    return [t_start + j * tau for j in range(1, order + 1) if t_start + j * tau < t_end]


def _march(spec, grid, bps, hist, state, out, single, check_finite):
    tau = spec.delay
    dead = np.zeros(state.shape[0], dtype=bool)
    f_now = spec(grid[0], state, hist(grid[0] - tau))
    hist.push(grid[0], state, f_now)
    for k in range(len(grid) - 1):
        a, b = grid[k], grid[k + 1]
        cuts = [a] + [bp for bp in bps if a + 1e-12 < bp < b - 1e-12] + [b]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            h = hi - lo
            mid = hist(lo + h / 2 - tau)
            k1 = f_now
            k2 = spec(lo + h / 2, state + h / 2 * k1, mid)
            k3 = spec(lo + h / 2, state + h / 2 * k2, mid)
            k4 = spec(hi, state + h * k3, hist(hi - tau))
            state = state + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            f_now = spec(hi, state, hist(hi - tau))
            hist.push(hi, state, f_now)
        out[k + 1] = state
        if check_finite:
            bad = ~np.all(np.isfinite(state), axis=-1)
            if bad.any():
                if single or bad.all():
                    raise BlowUpError(b, None if single else np.flatnonzero(bad))
                dead |= bad
    return dead


def integrate(spec: DDESpec, x0, t_start: float, t_end: float, step: float,
              check_finite: bool = True):
    """Solve the DDE on the uniform grid ``t_start + k*step``.

    ``x0`` may be a single state ``(d,)``, giving a :class:`TimeSeries`, or a
    batch ``(K, d)`` integrated in lockstep, giving a list of series with
    ``None`` in place of any trajectory that blew up. The grid ends at
    ``t_end`` when ``(t_end - t_start) / step`` is an integer up to rounding.

    Raises :class:`BlowUpError` with the failure time when a single
    trajectory (or every trajectory of a batch) becomes non-finite.
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    if not t_end > t_start:
        raise ValueError(f"need t_end > t_start, got [{t_start}, {t_end}]")
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    state = x0[None, :] if single else x0.copy()
    if state.shape[-1] != spec.dim:
        raise ValueError(f"{spec.name} has dim {spec.dim}, got initial state of size {state.shape[-1]}")
    n_steps = int(round((t_end - t_start) / step))
    grid = t_start + step * np.arange(n_steps + 1)
    bps = _breakpoints(t_start, grid[-1], spec.delay)

    hist = _History(t_start, state.copy(), n_steps + len(bps) + 2)
    out = np.empty((n_steps + 1,) + state.shape)
    out[0] = state
    with np.errstate(over="ignore", invalid="ignore"):
        dead = _march(spec, grid, bps, hist, state, out, single, check_finite)
    if single:
        return TimeSeries(grid, out[:, 0, :])
    return [None if dead[i] else TimeSeries(grid, out[:, i, :]) for i in range(state.shape[0])]
