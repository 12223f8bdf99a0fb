"""Desk-scale synthetic cases and load scenarios.

Networks are random spanning trees plus a few meshing branches. Thermal
costs are drawn from ten quadratic templates, loads follow a daily profile
at 15-minute resolution, and renewables follow a solar-like availability
curve. Thermal limits are sized from a peak-load power flow so the base
dispatch sits well inside them.
"""

from __future__ import annotations

import numpy as np

from .env import LoadScenario
from .grid import (RENEWABLE, THERMAL, Branch, Bus, CostFunction, Generator, NetworkCase,
                   build_admittance, solve_power_flow)

# (c2 $/MW^2, c1 $/MW, c0 $) per step
COST_TEMPLATES = (
    (0.020, 18.0, 120.0),
    (0.035, 15.0, 90.0),
    (0.012, 24.0, 150.0),
    (0.050, 12.0, 60.0),
    (0.008, 28.0, 200.0),
    (0.028, 20.0, 100.0),
    (0.016, 22.0, 140.0),
    (0.042, 14.0, 80.0),
    (0.010, 26.0, 170.0),
    (0.024, 19.0, 110.0),
)
RENEWABLE_COST = (0.0, 2.0, 0.0)
STEPS_PER_DAY = 96


def _network(rng, n_bus):
    edges = set()
    for k in range(1, n_bus):
        edges.add((int(rng.integers(0, k)), k))
    extra = max(n_bus // 2, 0)
    tries = 0
    while extra and tries < 50 * n_bus:
        tries += 1
        a, b = sorted(int(x) for x in rng.choice(n_bus, 2, replace=False))
        if (a, b) not in edges:
            edges.add((a, b))
            extra -= 1
    return sorted(edges)


def daily_profile(steps, rng, noise=0.01, start_step=0):
    """Two-peak daily load shape in [~0.55, 1], 15-minute steps."""
    h = (np.arange(start_step, start_step + steps) % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    shape = 0.72 + 0.16 * np.exp(-((h - 11.0) / 3.0) ** 2) + 0.2 * np.exp(-((h - 19.0) / 2.5) ** 2) \
        - 0.12 * np.exp(-((h - 4.0) / 3.0) ** 2)
    shape = shape * (1.0 + noise * rng.standard_normal(steps))
    return shape / 1.1


def solar_profile(steps, rng, start_step=0):
    h = (np.arange(start_step, start_step + steps) % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    base = np.clip(np.sin((h - 6.0) / 12.0 * np.pi), 0.0, None)
    cloud = np.clip(1.0 - 0.3 * np.abs(rng.standard_normal(steps)), 0.2, 1.0)
    return 0.15 + 0.85 * base * cloud


def synth_case(n_bus=6, n_gen=3, n_renewable=1, seed=0, base_mva=100.0, peak_load=300.0,
               loading=0.55):
    """Random connected case with a feasible peak-load operating point."""
    if n_bus < 2 or n_gen < 1:
        raise ValueError("need at least 2 buses and 1 generator")
    if n_renewable >= n_gen:
        raise ValueError("need at least one thermal generator (the slack)")
    rng = np.random.default_rng(seed)
    buses = [Bus(id=k + 1, v_min=0.94, v_max=1.06) for k in range(n_bus)]
    edges = _network(rng, n_bus)

    n_thermal = n_gen - n_renewable
    shares = rng.uniform(0.6, 1.4, n_thermal)
    thermal_cap = 1.45 * peak_load * shares / shares.sum()
    ren_cap = rng.uniform(0.15, 0.25, n_renewable) * peak_load
    gen_bus = [0] + [int(b) for b in rng.integers(0, n_bus, n_gen - 1)]
    templates = rng.permutation(len(COST_TEMPLATES))
    gens = []
    for i in range(n_gen):
        bus = gen_bus[i] + 1
        if i < n_thermal:
            cap = float(np.round(thermal_cap[i], 2))
            c2, c1, c0 = COST_TEMPLATES[templates[i % len(templates)]]
            gens.append(Generator(
                bus=bus, p_min=float(np.round(0.15 * cap, 2)), p_max=cap,
                q_min=-0.6 * cap, q_max=0.6 * cap,
                ramp_up=float(np.round(0.12 * cap, 2)), ramp_down=float(np.round(0.12 * cap, 2)),
                cost=CostFunction(c2, c1, c0), kind=THERMAL, v_setpoint=1.02))
        else:
            cap = float(np.round(ren_cap[i - n_thermal], 2))
            gens.append(Generator(
                bus=bus, p_min=0.0, p_max=cap, q_min=-0.4 * cap, q_max=0.4 * cap,
                ramp_up=cap, ramp_down=cap, cost=CostFunction(*RENEWABLE_COST),
                kind=RENEWABLE, v_setpoint=1.01))

    weights = rng.uniform(0.5, 1.5, n_bus)
    weights[0] = 0.3
    base_load = peak_load * weights / weights.sum()

    branches = [Branch(from_bus=a + 1, to_bus=b + 1, r=float(np.round(rng.uniform(0.01, 0.03), 4)),
                       x=float(np.round(rng.uniform(0.05, 0.12), 4)),
                       b_charging=float(np.round(rng.uniform(0.0, 0.03), 4)), i_max=1.0)
                for a, b in edges]
    case = NetworkCase(base_mva, buses, branches, gens, slack_bus=1)

    # size thermal limits from a peak-load flow with an economic-ish dispatch
    p = np.array([g.p_max for g in gens]) * peak_load / sum(g.p_max for g in gens)
    sol = solve_power_flow(case, build_admittance(case), p, None, base_load,
                           base_load * np.tan(np.arccos(0.95)))
    if not sol.converged:
        raise ValueError("synthetic case has no peak-load power flow solution; try another seed")
    i_max = np.maximum(np.round(sol.branch_i / loading, 3), 0.2)
    branches = [Branch(**{**br.__dict__, "i_max": float(im)}) for br, im in zip(branches, i_max)]
    return NetworkCase(base_mva, buses, branches, gens, slack_bus=1), base_load


def synth_scenario(case: NetworkCase, base_load, steps=2 * STEPS_PER_DAY, seed=0,
                   power_factor=0.95, start_step=0) -> LoadScenario:
    rng = np.random.default_rng(seed + 7919)
    profile = daily_profile(steps, rng, start_step=start_step)
    bus_noise = 1.0 + 0.02 * rng.standard_normal((case.n_bus, steps))
    load_p = np.round(np.outer(base_load, profile) * bus_noise, 4)
    ren = np.flatnonzero(case.renewable_mask())
    avail = np.array([np.round(case.generators[i].p_max * solar_profile(steps, rng, start_step), 4)
                      for i in ren]).reshape(len(ren), steps)
    return LoadScenario.from_active(load_p, avail, power_factor=power_factor)


def synth(n_bus=6, n_gen=3, n_renewable=1, seed=0, steps=2 * STEPS_PER_DAY, **kw):
    """Case plus scenario, deterministic per seed."""
    case, base_load = synth_case(n_bus, n_gen, n_renewable, seed, **kw)
    return case, synth_scenario(case, base_load, steps, seed)
