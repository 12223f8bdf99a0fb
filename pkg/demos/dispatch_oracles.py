"""
Lambda iteration against a brute-force grid
===========================================

Equal incremental cost dispatch and an exhaustive 0.01 MW grid search should
agree; the guard's iterative elimination should never beat either.
"""

import numpy as np

from lookahead_ed.grid import CostFunction
from lookahead_ed.guard import eliminate_deviation
from lookahead_ed.oracle import DispatchInstance, brute_force_dispatch, kkt_residual, lambda_dispatch

inst = DispatchInstance(
    costs=[CostFunction(0.02, 18, 40), CostFunction(0.008, 22, 30), CostFunction(0.05, 12, 10)],
    lower=[20.0, 10.0, 5.0],
    upper=[150.0, 120.0, 60.0],
    demand=210.0,
)
p, lam = lambda_dispatch(inst)
print("lambda dispatch", np.round(p, 4), "price", round(lam, 6), "KKT", kkt_residual(inst, p, lam))
print("cost", inst.cost(p))

grid = brute_force_dispatch(inst, step=0.01)
print("grid search    ", np.round(grid, 4), "cost", inst.cost(grid))

start = np.array([100.0, 100.0, 50.0])
a, it, resid, *_ = eliminate_deviation(start, inst.lower, inst.upper, inst.costs, inst.demand)
print("guard (m3)     ", np.round(a, 4), "cost", inst.cost(a), "after", it, "iterations")
