"""Classical dispatch baselines used as test oracles and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import CostFunction, NetworkCase, build_admittance, solve_power_flow

LAMBDA_TOL = 1e-9


class InfeasibleDemand(ValueError):
    pass


@dataclass
class DispatchInstance:
    costs: list
    lower: np.ndarray
    upper: np.ndarray
    demand: float

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if any(c.c2 < 0 for c in self.costs):
            raise ValueError("costs must be convex")

    @property
    def n(self) -> int:
        return len(self.costs)

    def cost(self, p) -> float:
        return float(sum(c(pi) for c, pi in zip(self.costs, p)))


def _response(lam, c2, c1, lo, hi):
    """Output of every unit at marginal price ``lam``."""
    quad = c2 > 0
    p = np.where(lam > c1, hi, lo)
    p = np.where(quad, np.clip((lam - c1) / np.where(quad, 2 * c2, 1.0), lo, hi), p)
    return p


def lambda_dispatch(inst: DispatchInstance, tol: float = LAMBDA_TOL):
    """Equal-incremental-cost dispatch by bisection on the system price.

    Returns ``(p, lam)``. Units with linear cost (c2 = 0) are filled in merit
    order once the price settles on their marginal cost; ties go to the lower
    index.
    """
    lo, hi, demand = inst.lower, inst.upper, float(inst.demand)
    if lo.sum() - demand > tol:
        raise InfeasibleDemand(f"demand {demand:.6g} below aggregate minimum {lo.sum():.6g}")
    if demand - hi.sum() > tol:
        raise InfeasibleDemand(f"demand {demand:.6g} above aggregate maximum {hi.sum():.6g}")
    c2 = np.array([c.c2 for c in inst.costs])
    c1 = np.array([c.c1 for c in inst.costs])

    lam_lo = float(np.min(2 * c2 * lo + c1))
    lam_hi = float(np.max(2 * c2 * hi + c1))
    width = max(lam_hi - lam_lo, 1.0)
    lam_lo -= width
    lam_hi += width
    while _response(lam_lo, c2, c1, lo, hi).sum() > demand:
        lam_lo -= 2 * (lam_hi - lam_lo)
    while _response(lam_hi, c2, c1, lo, hi).sum() < demand:
        lam_hi += 2 * (lam_hi - lam_lo)

    for _ in range(200):
        lam = 0.5 * (lam_lo + lam_hi)
        p = _response(lam, c2, c1, lo, hi)
        resid = p.sum() - demand
        if abs(resid) <= tol or lam in (lam_lo, lam_hi):
            break
        if resid > 0:
            lam_hi = lam
        else:
            lam_lo = lam

    resid = p.sum() - demand
    if abs(resid) > tol:
        # price sits on a flat (linear-cost) step: fill those units in order
        flat = np.flatnonzero((c2 == 0) & np.isclose(c1, lam, rtol=1e-9, atol=1e-9))
        rest = np.setdiff1d(np.arange(inst.n), flat)
        p = p.copy()
        remaining = demand - p[rest].sum()
        for i in flat:
            p[i] = min(max(remaining - lo[flat[flat > i]].sum(), lo[i]), hi[i])
            remaining -= p[i]
        resid = p.sum() - demand
        if abs(resid) > tol:
            interior = np.flatnonzero((p > lo) & (p < hi))
            if interior.size:
                p[interior[0]] = np.clip(p[interior[0]] - resid, lo[interior[0]], hi[interior[0]])
    return p, float(lam)


def kkt_residual(inst: DispatchInstance, p, lam, atol: float = 1e-9) -> float:
    """Largest |C'(p) - lam| over units strictly inside their bounds."""
    p = np.asarray(p)
    interior = (p > inst.lower + atol) & (p < inst.upper - atol)
    if not interior.any():
        return 0.0
    mc = np.array([c.marginal(pi) for c, pi in zip(inst.costs, p)])
    return float(np.max(np.abs(mc[interior] - lam)))


def _grid_costs(cost: CostFunction, lo, hi, step):
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    p = lo + step * np.arange(n)
    return p, cost(p)


def _grid_search(inst: DispatchInstance, order, step):
    """Exhaustive search with ``order[:-1]`` on the grid and ``order[-1]`` taking the rest.

    Every grid combination is scored through a min-plus table over the
    running sum, so the work is polynomial instead of a Cartesian product.
    """
    demand = float(inst.demand)
    free, rest = order[:-1], order[-1]
    grids = [_grid_costs(inst.costs[i], inst.lower[i], inst.upper[i], step) for i in free]
    # table[s] = cheapest cost of the free units whose outputs sum to offset + s*step
    table = grids[0][1].copy()
    choices = []
    for _, unit_cost in grids[1:]:
        size = table.size + unit_cost.size - 1
        best = np.full(size, np.inf)
        arg = np.zeros(size, dtype=int)
        for j, cj in enumerate(unit_cost):
            cand = table + cj
            window = best[j:j + table.size]
            better = cand < window
            window[better] = cand[better]
            arg[j:j + table.size][better] = j
        choices.append(arg)
        table = best

    sums = float(inst.lower[free].sum()) + step * np.arange(table.size)
    rem = demand - sums
    lo, hi = inst.lower[rest], inst.upper[rest]
    ok = (rem >= lo - 1e-9) & (rem <= hi + 1e-9)
    if not ok.any():
        return None, np.inf
    total = np.where(ok, table + inst.costs[rest](np.clip(rem, lo, hi)), np.inf)
    s = int(np.argmin(total))

    idx = [0] * len(free)
    for k in range(len(free) - 1, 0, -1):
        idx[k] = int(choices[k - 1][s])
        s -= idx[k]
    idx[0] = s
    p = np.zeros(inst.n)
    for k, i in enumerate(free):
        p[i] = grids[k][0][idx[k]]
    p[rest] = demand - p[free].sum()
    return p, inst.cost(p)


def brute_force_dispatch(inst: DispatchInstance, step: float = 0.01, max_units: int = 4):
    """Cheapest allocation over a ``step`` MW grid, summing exactly to demand.

    All units but one sit on the grid ``lower + k*step``; the remaining unit
    takes the exact balance. Each unit is tried as the balancing one and the
    cheapest result wins (ties: lower index).
    """
    if inst.n > max_units:
        raise ValueError(f"brute force supports at most {max_units} units, got {inst.n}")
    if step <= 0:
        raise ValueError("step must be positive")
    if inst.n == 1:
        if not inst.lower[0] - 1e-9 <= inst.demand <= inst.upper[0] + 1e-9:
            raise InfeasibleDemand("single unit cannot meet demand")
        return np.array([float(inst.demand)])
    best, best_cost = None, np.inf
    for r in range(inst.n):
        order = np.array([i for i in range(inst.n) if i != r] + [r])
        p, c = _grid_search(inst, order, step)
        if c < best_cost:
            best, best_cost = p, c
    if best is None:
        raise InfeasibleDemand("no grid allocation meets demand")
    return best


@dataclass
class BaselineResult:
    schedule: np.ndarray         # dispatched P, (n_gen, steps)
    realized_p: np.ndarray       # after power flow, slack absorbs losses
    realized_q: np.ndarray
    step_cost: np.ndarray
    total_cost: float
    prices: np.ndarray
    infeasible_steps: list = field(default_factory=list)
    diverged_steps: list = field(default_factory=list)
    voltage_violations: int = 0
    overloaded_branches: int = 0
    label: str = "OPF-lite (lambda dispatch + AC power flow audit)"


def rolling_baseline(case: NetworkCase, scenario, steps=None, loss_factor: float = 0.0,
                     epsilon: float = 1e-6) -> BaselineResult:
    """Step-by-step lambda dispatch with ramp chaining, audited by AC power flow.

    Network limits are not part of the optimisation; they are only counted
    after the power flow. Infeasible steps are recorded and clipped to the
    nearest aggregate bound.
    """
    from .grid import branch_loadings

    steps = scenario.horizon if steps is None else steps
    gens = case.generators
    ren = case.renewable_mask()
    ybus = build_admittance(case)
    p_min = case.array("p_min")
    p_max = case.array("p_max")
    costs = [g.cost for g in gens]
    schedule = np.zeros((case.n_gen, steps))
    realized_p = np.zeros_like(schedule)
    realized_q = np.zeros_like(schedule)
    step_cost = np.zeros(steps)
    prices = np.zeros(steps)
    result = BaselineResult(schedule, realized_p, realized_q, step_cost, 0.0, prices)
    vmin = case.array("v_min", "buses")
    vmax = case.array("v_max", "buses")
    prev = None
    for t in range(steps):
        lo = p_min.copy()
        hi = p_max.copy()
        if ren.any():
            lo[ren] = 0.0
            hi[ren] = np.minimum(hi[ren], scenario.renewable_p[:, t])
        if prev is not None:
            th = ~ren
            ru = case.array("ramp_up")
            rd = case.array("ramp_down")
            hi[th] = np.minimum(hi[th], prev[th] + ru[th])
            lo[th] = np.maximum(lo[th], prev[th] - rd[th])
        demand = scenario.load_p[:, t].sum() * (1.0 + loss_factor)
        inst = DispatchInstance(costs, lo, hi, demand)
        try:
            p, lam = lambda_dispatch(inst)
        except InfeasibleDemand:
            result.infeasible_steps.append(t)
            p = hi.copy() if demand > hi.sum() else lo.copy()
            lam = np.nan
        schedule[:, t] = p
        prices[t] = lam
        sol = solve_power_flow(case, ybus, p, None, scenario.load_p[:, t], scenario.load_q[:, t])
        if not sol.converged:
            result.diverged_steps.append(t)
            realized_p[:, t] = p
        else:
            realized_p[:, t] = sol.gen_p
            realized_q[:, t] = sol.gen_q
            result.voltage_violations += int(np.sum((sol.v_mag > vmax + 1e-9) | (sol.v_mag < vmin - 1e-9)))
            result.overloaded_branches += int(np.sum(branch_loadings(sol, case, epsilon) > 1))
        step_cost[t] = sum(float(c(x)) for c, x in zip(costs, realized_p[:, t]))
        prev = p
    result.total_cost = float(step_cost.sum())
    return result
