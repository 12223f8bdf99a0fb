"""
Power flow on a two-bus line
============================

A lossless line with a 10 MW load at the far end. The Newton solution is
checked against the closed form V2 = cos(th), sin(2 th) = -2 P X.
"""

import numpy as np

from lookahead_ed.grid import Branch, Bus, CostFunction, Generator, NetworkCase
from lookahead_ed.grid import branch_loadings, build_admittance, solve_power_flow

case = NetworkCase(
    base_mva=100.0,
    buses=[Bus(1), Bus(2)],
    branches=[Branch(1, 2, r=0.0, x=0.1, i_max=1.0)],
    generators=[Generator(1, 0, 500, -200, 200, 50, 50, CostFunction(0.01, 10, 0))],
    slack_bus=1,
)
ybus = build_admittance(case)
sol = solve_power_flow(case, ybus, gen_p=[0.0], load_p=[0, 10.0], load_q=[0, 0])

th = -0.5 * np.arcsin(2 * 0.1 * 0.1)
print("converged in", sol.iterations, "iterations, mismatch", sol.max_mismatch)
print("angle  ", sol.v_ang[1], "closed form", th)
print("voltage", sol.v_mag[1], "closed form", np.cos(th))
print("loading", branch_loadings(sol, case)[0])

# push the load well past what the line can carry
far = solve_power_flow(case, ybus, gen_p=[0.0], load_p=[0, 800.0], load_q=[0, 0])
print("800 MW load converged?", far.converged)
