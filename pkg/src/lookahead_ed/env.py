"""Receding-horizon dispatch environment.

Each call to :meth:`LookaheadEnv.step` dispatches one look-ahead window of
``T`` steps: the action is guarded, every step is solved by AC power flow
(with hard-overload tripping), and the window is scored. The window then
advances by a single step; only its first step counts as operated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import grid
from .grid import NetworkCase, build_admittance, solve_power_flow
from .guard import GuardContext, guard

PENALTY_NAMES = ("p_bounds", "q_bounds", "ramp", "flow", "voltage")


class ScenarioExhausted(IndexError):
    pass


@dataclass
class LoadScenario:
    """Per-bus load series (MW, MVAr) and renewable availability (MW).

    Arrays are shaped (entities, steps). ``l_max``/``l_min`` are the per-bus
    active-load extremes over the whole dataset; they default to the extremes
    of ``load_p`` itself.
    """

    load_p: np.ndarray
    load_q: np.ndarray
    renewable_p: np.ndarray
    l_max: np.ndarray | None = None
    l_min: np.ndarray | None = None
    dt_minutes: float = 15.0

    def __post_init__(self):
        self.load_p = np.atleast_2d(np.asarray(self.load_p, dtype=float))
        self.load_q = np.atleast_2d(np.asarray(self.load_q, dtype=float))
        self.renewable_p = np.asarray(self.renewable_p, dtype=float).reshape(-1, self.load_p.shape[1])
        if self.load_q.shape != self.load_p.shape:
            raise ValueError("active and reactive load series differ in shape")
        if self.load_p.shape[1] == 0:
            raise ValueError("scenario has no time steps")
        if np.any(self.renewable_p < 0):
            raise ValueError("renewable availability must be non-negative")
        if self.l_max is None:
            self.l_max = self.load_p.max(axis=1)
        if self.l_min is None:
            self.l_min = self.load_p.min(axis=1)
        self.l_max = np.asarray(self.l_max, dtype=float)
        self.l_min = np.asarray(self.l_min, dtype=float)
        if np.any(self.load_p > self.l_max[:, None] + 1e-9) or np.any(self.load_p < self.l_min[:, None] - 1e-9):
            raise ValueError("load sample outside the dataset range")

    @classmethod
    def from_active(cls, load_p, renewable_p, power_factor: float = 0.95, **kw):
        """Derive reactive load from a constant lagging power factor."""
        load_p = np.atleast_2d(np.asarray(load_p, dtype=float))
        load_q = load_p * np.tan(np.arccos(power_factor))
        return cls(load_p, load_q, renewable_p, **kw)

    @property
    def n_bus(self) -> int:
        return self.load_p.shape[0]

    @property
    def horizon(self) -> int:
        return self.load_p.shape[1]

    def n_windows(self, T: int) -> int:
        return max(self.horizon - T + 1, 0)

    def slice(self, start: int, stop: int) -> "LoadScenario":
        """Sub-range of steps, keeping the dataset-wide normalisation range."""
        return LoadScenario(self.load_p[:, start:stop], self.load_q[:, start:stop],
                            self.renewable_p[:, start:stop], self.l_max, self.l_min, self.dt_minutes)


def normalize_load(load, l_max, l_min):
    """Map [l_min, l_max] to [-1, 1]; a degenerate range maps to 0."""
    load = np.asarray(load, dtype=float)
    span = (l_max - l_min)[:, None] if load.ndim == 2 else l_max - l_min
    mid = (l_max + l_min)[:, None] if load.ndim == 2 else l_max + l_min
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (2.0 * load - mid) / safe, 0.0)


def denormalize_load(norm, l_max, l_min):
    norm = np.asarray(norm, dtype=float)
    span = (l_max - l_min)[:, None] if norm.ndim == 2 else l_max - l_min
    mid = (l_max + l_min)[:, None] if norm.ndim == 2 else l_max + l_min
    return 0.5 * (norm * span + mid)


def state_dim(n_bus: int, n_gen: int, T: int) -> int:
    return n_bus * T + 2 * n_gen * T


def action_dim(n_gen: int, T: int) -> int:
    return 2 * n_gen * T


def build_state(scenario: LoadScenario, t: int, prev_action, T: int) -> np.ndarray:
    """Normalised loads of window ``t`` (step-major) followed by the previous action."""
    if t < 0 or t + T > scenario.horizon:
        raise ScenarioExhausted(f"window {t} with T={T} runs past {scenario.horizon} steps")
    loads = normalize_load(scenario.load_p[:, t:t + T], scenario.l_max, scenario.l_min)
    return np.concatenate([loads.T.ravel(), np.asarray(prev_action, dtype=float).ravel()])


@dataclass
class EnvConfig:
    T: int = 16
    dt_minutes: float = 15.0
    w1: float = 1000.0
    w2: float = 1000.0
    w3: float = 1000.0
    w4: float = 1000.0
    w5: float = 1000.0
    overload_threshold: float = grid.OVERLOAD_THRESHOLD
    completion_bonus: float = 100.0
    divergence_penalty: float = 1000.0
    epsilon: float = grid.LOADING_EPS
    sigma: float = 1e-8
    max_iter: int = 100
    dv_max: float = 0.05
    loss_factor: float = 0.0
    mode: str = "m3"
    episode_windows: int | None = None
    forecast_noise: float = 0.0
    noise_seed: int = 0
    terminate_on_divergence: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if min(self.weights) < 0:
            raise ValueError("penalty weights must be non-negative")

    @property
    def weights(self):
        return (self.w1, self.w2, self.w3, self.w4, self.w5)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_penalties(realized_p, realized_q, v_mag, branch_i, case: NetworkCase,
                      config: EnvConfig, renewable_caps=None, prev_p=None):
    """Five weighted penalty magnitudes for the solved steps of one window.

    Arrays are (entities, steps) over the converged steps. ``prev_p`` is the
    operated output one interval before the window's first step, or ``None``
    at the start of an episode (no cross-window ramp term).
    """
    realized_p = np.asarray(realized_p, dtype=float)
    n_steps = realized_p.shape[1]
    if n_steps == 0:
        return dict.fromkeys(PENALTY_NAMES, 0.0)
    ren = case.renewable_mask()
    p_lo = np.repeat(case.array("p_min")[:, None], n_steps, axis=1)
    p_hi = np.repeat(case.array("p_max")[:, None], n_steps, axis=1)
    if ren.any():
        p_lo[ren] = 0.0
        if renewable_caps is not None:
            p_hi[ren] = np.minimum(p_hi[ren], np.asarray(renewable_caps)[:, :n_steps])
    viol_p = np.maximum(realized_p - p_hi, 0) + np.maximum(p_lo - realized_p, 0)

    q_lo = case.array("q_min")[:, None]
    q_hi = case.array("q_max")[:, None]
    viol_q = np.maximum(realized_q - q_hi, 0) + np.maximum(q_lo - realized_q, 0)

    # ramp variation: zero at the first window, cross-window for step 1, chained after
    first = np.zeros(case.n_gen) if prev_p is None else realized_p[:, 0] - np.asarray(prev_p)
    dp = np.column_stack([first, np.diff(realized_p, axis=1)])
    ru = case.array("ramp_up")[:, None]
    rd = case.array("ramp_down")[:, None]
    viol_r = (np.maximum(dp - ru, 0) + np.maximum(-rd - dp, 0))[~ren]

    i_max = case.array("i_max", "branches")[:, None]
    viol_i = np.maximum(np.asarray(branch_i) / i_max - 1.0, 0)

    v_lo = case.array("v_min", "buses")[:, None]
    v_hi = case.array("v_max", "buses")[:, None]
    viol_v = np.maximum(v_mag - v_hi, 0) + np.maximum(v_lo - v_mag, 0)

    sums = [viol_p.sum(), viol_q.sum(), viol_r.sum(), viol_i.sum(), viol_v.sum()]
    return {name: float(w * s) for name, w, s in zip(PENALTY_NAMES, config.weights, sums)}


def compute_reward(step_costs, penalties, completed: bool, config: EnvConfig,
                   diverged: bool = False) -> float:
    """Negative cost minus penalties, plus the completion bonus."""
    reward = -float(np.sum(step_costs)) - float(sum(penalties.values()))
    if completed:
        reward += config.completion_bonus
    if diverged:
        reward -= config.divergence_penalty
    return reward


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class LookaheadEnv:
    """Multi-period AC dispatch environment with a pluggable guard mode."""

    def __init__(self, case: NetworkCase, scenario: LoadScenario, config: EnvConfig | None = None):
        self.case = case
        self.scenario = scenario
        self.config = config or EnvConfig()
        if scenario.n_bus != case.n_bus:
            raise ValueError("scenario bus count does not match the case")
        if scenario.renewable_p.shape[0] != int(case.renewable_mask().sum()):
            raise ValueError("scenario renewable count does not match the case")
        self.T = self.config.T
        self.state_dim = state_dim(case.n_bus, case.n_gen, self.T)
        self.action_dim = action_dim(case.n_gen, self.T)
        self.costs = [g.cost for g in case.generators]
        self._ybus_cache = {}
        self._noise = np.random.default_rng(self.config.noise_seed)
        self.t = None

    @property
    def n_windows(self) -> int:
        return self.scenario.n_windows(self.T)

    def _ybus(self, statuses):
        key = statuses.tobytes()
        if key not in self._ybus_cache:
            self._ybus_cache[key] = build_admittance(self.case, statuses)
        return self._ybus_cache[key]

    def reset(self, start: int = 0) -> np.ndarray:
        if self.n_windows == 0:
            raise ScenarioExhausted("scenario is shorter than one look-ahead window")
        if not 0 <= start < self.n_windows:
            raise ScenarioExhausted(f"start window {start} outside 0..{self.n_windows - 1}")
        self.start = start
        limit = self.config.episode_windows or self.n_windows
        self.end = min(start + limit, self.n_windows)
        self.t = start
        self.statuses = self.case.statuses()
        self.prev_action = np.zeros(self.action_dim)
        self.prev_dispatch = None
        self.prev_realized = None
        self.done = False
        self._noise = np.random.default_rng(self.config.noise_seed)
        return build_state(self.scenario, self.t, self.prev_action, self.T)

    def forecast(self, t: int):
        sl = slice(t, t + self.T)
        load_p = self.scenario.load_p[:, sl]
        if self.config.forecast_noise > 0:
            load_p = load_p * (1.0 + self.config.forecast_noise * self._noise.standard_normal(load_p.shape))
        return load_p, self.scenario.renewable_p[:, sl]

    def guard_context(self, t: int | None = None) -> GuardContext:
        t = self.t if t is None else t
        load_p, caps = self.forecast(t)
        cfg = self.config
        return GuardContext.from_case(
            self.case, load_p.sum(axis=0), renewable_caps=caps, prev_p=self.prev_dispatch,
            sigma=cfg.sigma, max_iter=cfg.max_iter, dv_max=cfg.dv_max,
            loss_factor=cfg.loss_factor, mode=cfg.mode)

    def solve_window(self, p, v_set, t: int):
        """Power flow over the window's steps with cascading hard-overload trips.

        Trips persist for the remaining steps of this window only. Returns the
        per-step solutions and the trip log; stops at the first divergence.
        """
        sc = self.scenario
        statuses = self.statuses.copy()
        sols, trips = [], []
        for tau in range(p.shape[1]):
            k = t + tau
            while True:
                sol = solve_power_flow(self.case, self._ybus(statuses), p[:, tau], v_set[:, tau],
                                      sc.load_p[:, k], sc.load_q[:, k], statuses)
                if not sol.converged:
                    break
                loadings = grid.branch_loadings(sol, self.case, self.config.epsilon, statuses)
                statuses, tripped = grid.apply_hard_overload(
                    statuses, loadings, self.config.overload_threshold)
                if not tripped:
                    break
                trips += [(tau, j) for j in tripped]
            sols.append(sol)
            if not sol.converged:
                break
        return sols, trips

    def step(self, action) -> StepOutcome:
        if self.t is None or self.done:
            raise RuntimeError("call reset() before step()")
        action = np.asarray(action, dtype=float).ravel()
        if action.size != self.action_dim:
            raise ValueError(f"action has length {action.size}, expected {self.action_dim}")
        t = self.t
        ctx = self.guard_context(t)
        dispatch = guard(action, ctx)
        sols, trips = self.solve_window(dispatch.p, dispatch.v_set, t)

        diverged = not sols[-1].converged
        ok = sols[:-1] if diverged else sols
        n_ok = len(ok)
        realized_p = np.column_stack([s.gen_p for s in ok]) if ok else np.zeros((self.case.n_gen, 0))
        realized_q = np.column_stack([s.gen_q for s in ok]) if ok else np.zeros((self.case.n_gen, 0))
        v_mag = np.column_stack([s.v_mag for s in ok]) if ok else np.zeros((self.case.n_bus, 0))
        branch_i = np.column_stack([s.branch_i for s in ok]) if ok else np.zeros((self.case.n_branch, 0))
        penalties = compute_penalties(realized_p, realized_q, v_mag, branch_i, self.case, self.config,
                                      ctx.renewable_caps, self.prev_realized)
        step_costs = np.array([sum(float(c(x)) for c, x in zip(self.costs, realized_p[:, k]))
                               for k in range(n_ok)])

        terminal = diverged and self.config.terminate_on_divergence
        completed = (not terminal) and t + 1 >= self.end
        reward = compute_reward(step_costs, penalties, completed and not diverged, self.config, diverged)
        done = terminal or t + 1 >= self.end
        info = {
            "window": t,
            "penalties": penalties,
            "step_costs": step_costs,
            "cost": float(step_costs.sum()),
            "first_step_cost": float(step_costs[0]) if n_ok else float("nan"),
            "pf_iterations": [s.iterations for s in sols],
            "tripped": trips,
            "guard_report": dispatch.report,
            "dispatch": dispatch,
            "realized_p": realized_p,
            "realized_q": realized_q,
            "v_mag": v_mag,
            "branch_i": branch_i,
            "diverged_at": len(sols) - 1 if diverged else None,
            "completed": completed and not diverged,
            "bonus": self.config.completion_bonus if completed and not diverged else 0.0,
            "divergence_penalty": self.config.divergence_penalty if diverged else 0.0,
        }

        clipped_action = np.clip(action, -1.0, 1.0)
        if not done:
            self.prev_dispatch = dispatch.p[:, 0].copy()
            self.prev_realized = realized_p[:, 0].copy() if n_ok else dispatch.p[:, 0].copy()
            self.prev_action = clipped_action
            self.t = t + 1
            next_state = build_state(self.scenario, self.t, self.prev_action, self.T)
        else:
            self.done = True
            next_state = build_state(self.scenario, t, clipped_action, self.T)
        return StepOutcome(next_state, reward, done, info)
