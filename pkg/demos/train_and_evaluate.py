"""
Training the three modes on a desk-scale grid
=============================================

A 6-bus case with two thermal units and one solar unit. Two days train the
agent, the third day is the test. Takes about a minute per mode.
"""

import numpy as np

from lookahead_ed.agent import DdpgConfig, evaluate, train
from lookahead_ed.env import EnvConfig, LookaheadEnv
from lookahead_ed.oracle import rolling_baseline
from lookahead_ed.synth import synth

case, scenario = synth(6, 3, 1, seed=0, steps=288)
train_days, test_day = scenario.slice(0, 192), scenario.slice(192, 288)
T = 4

base = rolling_baseline(case, test_day, steps=test_day.n_windows(T))
print(f"OPF-lite baseline cost {base.total_cost:.0f}")

for mode in ("m1", "m2", "m3"):
    env_cfg = EnvConfig(T=T, mode=mode, episode_windows=24)
    cfg = DdpgConfig(actor_lr=1e-5, episodes=60, noise_decay=0.97, buffer_size=20_000)
    agent, records = train(lambda: LookaheadEnv(case, train_days, env_cfg), cfg)
    rewards = np.array([r["reward"] for r in records])
    res = evaluate(agent, LookaheadEnv(case, test_day, env_cfg))
    print(f"{mode}: last-decile reward {rewards[-6:].mean():.0f}, "
          f"test cost {res.total_cost:.0f} ({100 * (res.total_cost / base.total_cost - 1):+.1f}%), "
          f"bound violations {res.bound_violations}, worst latency {1e3 * res.latency.max():.2f} ms")
