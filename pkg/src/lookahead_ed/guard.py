"""Action security modification: project agent actions onto feasible dispatch.

Three stages per look-ahead step, swept tau = 1..T so that the thermal ramp
band of step tau is anchored on the post-guard output of step tau-1:

1. de-normalise the action and compute adjustable capacities,
2. bind over-limit outputs to their band,
3. remove the generation/load deviation iteratively, weighting each unit by
   its remaining capacity and its incremental cost.

Three modes reproduce the training comparison: ``m1`` (no modification),
``m2`` (capacity-proportional redistribution) and ``m3`` (equal incremental
rate redistribution).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Generator, NetworkCase

MODES = ("m1", "m2", "m3")
SIGMA = 1e-8


class InfeasibleBand(ValueError):
    """Effective upper bound fell below the effective lower bound."""


@dataclass
class GuardContext:
    """Everything the guard needs besides the action itself.

    ``renewable_caps`` has one row per renewable generator (case order) and
    one column per step. ``prev_p`` is the previously operated output, or
    ``None`` for the first window, where no ramp anchor exists.
    """

    generators: tuple
    target_demand: np.ndarray
    renewable_caps: np.ndarray | None = None
    prev_p: np.ndarray | None = None
    sigma: float = SIGMA
    max_iter: int = 100
    dv_max: float = 0.05
    bus_v_limits: np.ndarray | None = None
    loss_factor: float = 0.0
    mode: str = "m3"

    def __post_init__(self):
        self.generators = tuple(self.generators)
        self.target_demand = np.atleast_1d(np.asarray(self.target_demand, dtype=float))
        if self.renewable_caps is not None:
            self.renewable_caps = np.atleast_2d(np.asarray(self.renewable_caps, dtype=float))
            if np.any(self.renewable_caps < 0):
                raise ValueError("renewable availability must be non-negative")
        if self.prev_p is not None:
            self.prev_p = np.asarray(self.prev_p, dtype=float)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown guard mode {self.mode!r}")

    @classmethod
    def from_case(cls, case: NetworkCase, target_demand, **kw) -> "GuardContext":
        idx = case.gen_bus_index()
        limits = np.array([[case.buses[k].v_min, case.buses[k].v_max] for k in idx]).reshape(-1, 2)
        kw.setdefault("bus_v_limits", limits)
        return cls(generators=case.generators, target_demand=target_demand, **kw)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def horizon(self) -> int:
        return self.target_demand.size

    def static_bounds(self):
        """Per-gen, per-step box with renewable availability folded in."""
        p_min = np.array([g.p_min for g in self.generators])
        p_max = np.array([g.p_max for g in self.generators])
        lo = np.repeat(p_min[:, None], self.horizon, axis=1)
        hi = np.repeat(p_max[:, None], self.horizon, axis=1)
        ren = np.array([g.renewable for g in self.generators], dtype=bool)
        if ren.any():
            lo[ren] = 0.0
            if self.renewable_caps is not None:
                hi[ren] = np.minimum(hi[ren], self.renewable_caps[:, :self.horizon])
        return lo, hi


@dataclass
class GuardReport:
    iterations: np.ndarray
    residual: np.ndarray
    clipped_upper: list = field(default_factory=list)
    clipped_lower: list = field(default_factory=list)
    capacity_exhausted: np.ndarray | None = None
    cost_fallback: np.ndarray | None = None
    action_clipped: bool = False

    def is_clean(self) -> bool:
        return (not self.iterations.any() and not self.clipped_upper and not self.clipped_lower
                and not self.capacity_exhausted.any() and not self.action_clipped)


@dataclass
class GuardedDispatch:
    p: np.ndarray
    v_set: np.ndarray
    report: GuardReport


def normalize_action(p, lo, hi):
    """Forward map of the output normalisation: lo -> -1, hi -> +1."""
    p, lo, hi = (np.asarray(x, dtype=float) for x in (p, lo, hi))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (2.0 * p - (hi + lo)) / safe, 0.0)


def denormalize_action(a_bar, lo, hi):
    """Affine map [-1, 1] -> [lo, hi]; returns (p, clipped_flag)."""
    a_bar = np.asarray(a_bar, dtype=float)
    clipped = bool(np.any((a_bar < -1) | (a_bar > 1)))
    a_bar = np.clip(a_bar, -1.0, 1.0)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    p = 0.5 * (a_bar + 1.0) * (hi - lo) + lo
    # pin the endpoints exactly
    p = np.where(a_bar == -1.0, lo, np.where(a_bar == 1.0, hi, p))
    return p, clipped


def effective_bounds(generators, lo_box, hi_box, prev):
    """Band for one step: box intersected with the thermal ramp window."""
    lo = np.array(lo_box, dtype=float)
    hi = np.array(hi_box, dtype=float)
    if prev is not None:
        for i, g in enumerate(generators):
            if g.renewable:
                continue
            hi[i] = min(hi[i], prev[i] + g.ramp_up)
            lo[i] = max(lo[i], prev[i] - g.ramp_down)
    bad = np.flatnonzero(hi < lo)
    if bad.size:
        raise InfeasibleBand(f"generator {int(bad[0])}: upper bound {hi[bad[0]]:.6g} "
                             f"below lower bound {lo[bad[0]]:.6g}")
    return lo, hi


def adjustable_capacity(a, lower, upper):
    """(V_u, V_l): room to raise and to cut each unit within its band."""
    a = np.asarray(a, dtype=float)
    return np.maximum(upper - a, 0.0), np.maximum(a - lower, 0.0)


def redistribute_over_limit(a, lower, upper):
    """Bind out-of-band outputs to the band; returns (a, V_u, V_l, hi_idx, lo_idx)."""
    a = np.asarray(a, dtype=float)
    above = np.flatnonzero(a > upper)
    below = np.flatnonzero(a < lower)
    a = np.clip(a, lower, upper)
    v_u, v_l = adjustable_capacity(a, lower, upper)
    return a, v_u, v_l, above.tolist(), below.tolist()


def _weights(cap, k, surplus, mode):
    eligible = cap > 0
    if mode == "m2":
        w = np.where(eligible, cap, 0.0)
        return w / w.sum(), False
    ke = k[eligible]
    if np.any(ke <= 0):
        w = np.where(eligible, cap, 0.0)
        return w / w.sum(), True
    if surplus:
        # expensive units are cut first
        w = np.where(eligible, cap * k, 0.0)
    else:
        # cheap units are raised first
        w = np.where(eligible, cap / np.where(eligible, k, 1.0), 0.0)
    return w / w.sum(), False


def eliminate_deviation(a, lower, upper, costs, demand, sigma=SIGMA, max_iter=100, mode="m3"):
    """Drive sum(a) to ``demand`` by repeated weighted moves inside the band.

    Marginal costs are re-evaluated every iteration. Returns
    ``(a, iterations, residual, exhausted, fallback)`` where residual is
    ``sum(a) - demand`` at exit.
    """
    a = np.array(a, dtype=float)
    c2 = np.array([c.c2 for c in costs])
    c1 = np.array([c.c1 for c in costs])
    fallback = False
    exhausted = False
    it = 0
    delta = a.sum() - demand
    while abs(delta) > sigma and it < max_iter:
        surplus = delta > 0
        cap = (a - lower) if surplus else (upper - a)
        cap = np.maximum(cap, 0.0)
        if not np.any(cap > 0):
            exhausted = True
            break
        it += 1
        w, fb = _weights(cap, 2.0 * c2 * a + c1, surplus, mode)
        fallback |= fb
        move = np.minimum(abs(delta) * w, cap)
        # a unit using its full capacity lands exactly on the bound
        if surplus:
            a = np.where(move >= cap, lower, a - move)
        else:
            a = np.where(move >= cap, upper, a + move)
        a = np.clip(a, lower, upper)
        delta = a.sum() - demand
    if abs(delta) > sigma and not exhausted:
        cap = (a - lower) if delta > 0 else (upper - a)
        exhausted = not np.any(cap > 0)
    return a, it, float(delta), exhausted, fallback


def guard_power(p, ctx: GuardContext):
    """Stages 2 and 3 on an already de-normalised (n_gen, T) schedule."""
    p = np.array(p, dtype=float).reshape(ctx.n_gen, ctx.horizon)
    T = ctx.horizon
    report = GuardReport(iterations=np.zeros(T, dtype=int), residual=np.zeros(T),
                         capacity_exhausted=np.zeros(T, dtype=bool),
                         cost_fallback=np.zeros(T, dtype=bool))
    target = ctx.target_demand * (1.0 + ctx.loss_factor)
    if ctx.mode == "m1":
        report.residual = p.sum(axis=0) - target
        return p, report
    lo_box, hi_box = ctx.static_bounds()
    costs = [g.cost for g in ctx.generators]
    prev = ctx.prev_p
    out = np.empty_like(p)
    for tau in range(T):
        lower, upper = effective_bounds(ctx.generators, lo_box[:, tau], hi_box[:, tau], prev)
        a, _, _, above, below = redistribute_over_limit(p[:, tau], lower, upper)
        report.clipped_upper += [(tau, i) for i in above]
        report.clipped_lower += [(tau, i) for i in below]
        a, it, resid, exhausted, fallback = eliminate_deviation(
            a, lower, upper, costs, target[tau], ctx.sigma, ctx.max_iter, ctx.mode)
        report.iterations[tau] = it
        report.residual[tau] = resid
        report.capacity_exhausted[tau] = exhausted
        report.cost_fallback[tau] = fallback
        out[:, tau] = a
        prev = a
    return out, report


def split_action(action, n_gen: int, horizon: int):
    """Flat action -> (power part, voltage part), each shaped (n_gen, T)."""
    action = np.asarray(action, dtype=float).ravel()
    if action.size != 2 * n_gen * horizon:
        raise ValueError(f"action has length {action.size}, expected {2 * n_gen * horizon}")
    half = n_gen * horizon
    pa = action[:half].reshape(horizon, n_gen).T
    va = action[half:].reshape(horizon, n_gen).T
    return pa, va


def join_action(pa, va):
    return np.concatenate([np.asarray(pa).T.ravel(), np.asarray(va).T.ravel()])


def voltage_setpoints(generators, dv_bar, dv_max, bus_v_limits=None):
    dv = np.clip(np.asarray(dv_bar, dtype=float), -1.0, 1.0) * dv_max
    v0 = np.array([g.v_setpoint for g in generators])[:, None]
    v = v0 + dv
    if bus_v_limits is not None:
        lim = np.asarray(bus_v_limits)
        v = np.clip(v, lim[:, :1], lim[:, 1:2])
    return v


def guard(action, ctx: GuardContext) -> GuardedDispatch:
    """Full modification of a flat normalised action for one window.

    In ``m1`` the power half is de-normalised over the nameplate box and
    passed through unchanged.
    """
    pa, va = split_action(action, ctx.n_gen, ctx.horizon)
    if ctx.mode == "m1":
        lo = np.array([g.p_min for g in ctx.generators])[:, None]
        hi = np.array([g.p_max for g in ctx.generators])[:, None]
        p, clipped = denormalize_action(pa, lo, hi)
    else:
        lo, hi = ctx.static_bounds()
        p, clipped = denormalize_action(pa, lo, hi)
    p, report = guard_power(p, ctx)
    report.action_clipped = clipped
    v_set = voltage_setpoints(ctx.generators, va, ctx.dv_max, ctx.bus_v_limits)
    return GuardedDispatch(p=p, v_set=v_set, report=report)


def dispatch_cost(generators: tuple[Generator, ...], p) -> float:
    p = np.asarray(p, dtype=float)
    return float(sum(np.sum(g.cost(p[i])) for i, g in enumerate(generators)))
