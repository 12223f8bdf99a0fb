"""
Projecting a raw action onto a feasible dispatch
================================================

Two thermal units and one solar unit, three look-ahead steps. The same raw
action is passed through the guard in each mode.
"""

import numpy as np

from lookahead_ed.grid import RENEWABLE, CostFunction, Generator
from lookahead_ed.guard import GuardContext, dispatch_cost, guard, join_action

gens = (
    Generator(1, 20, 150, -60, 60, 25, 25, CostFunction(0.020, 18, 40)),
    Generator(2, 10, 120, -50, 50, 20, 20, CostFunction(0.008, 22, 30)),
    Generator(3, 0, 60, -20, 20, 60, 60, CostFunction(0, 2, 0), kind=RENEWABLE),
)
demand = np.array([150.0, 170.0, 185.0])
solar = np.array([[30.0, 35.0, 25.0]])
prev = np.array([80.0, 50.0, 20.0])

rng = np.random.default_rng(1)
raw = join_action(rng.uniform(-1, 1, (3, 3)), np.zeros((3, 3)))

for mode in ("m1", "m2", "m3"):
    ctx = GuardContext(gens, demand, renewable_caps=solar, prev_p=prev, mode=mode)
    out = guard(raw, ctx)
    print(mode)
    print(np.round(out.p, 2))
    print("  balance", np.round(out.p.sum(axis=0) - demand, 10), " cost", round(dispatch_cost(gens, out.p), 2))
