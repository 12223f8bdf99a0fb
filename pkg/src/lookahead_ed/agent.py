"""DDPG in plain numpy: MLPs with hand-written backprop, Adam, replay, targets."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .guard import guard

CHECKPOINT_FORMAT = 1


class Mlp:
    """Fully connected network, ReLU hidden layers, batch-first arrays.

    ``output`` is ``"tanh"`` (bounded actor head) or ``"identity"``.
    """

    def __init__(self, sizes, output="identity", rng=None, final_scale=3e-3):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.output = output
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights, self.biases = [], []
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = k == len(self.sizes) - 2
            bound = final_scale if last else 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-bound, bound, (n_in, n_out)))
            self.biases.append(rng.uniform(-bound, bound, n_out))

    @property
    def params(self):
        return self.weights + self.biases

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.output = self.output
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def forward(self, x):
        """Returns ``(output, cache)``; accepts a single vector or a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input has {h.shape[1]} features, network expects {self.sizes[0]}")
        inputs, pre = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            if k < self.n_layers - 1:
                h = np.maximum(z, 0.0)
            elif self.output == "tanh":
                h = np.tanh(z)
            else:
                h = z
        cache = (inputs, pre, h, single)
        return (h[0] if single else h), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Reverse-mode gradients: ``(grad_weights, grad_biases, grad_input)``."""
        inputs, pre, out, single = cache
        g = np.asarray(grad_out, dtype=float)
        g = g[None, :] if single else g
        if g.shape != out.shape:
            raise ValueError(f"output gradient shape {g.shape} does not match {out.shape}")
        if self.output == "tanh":
            g = g * (1.0 - out ** 2)
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        for k in range(self.n_layers - 1, -1, -1):
            gw[k] = inputs[k].T @ g
            gb[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
            if k > 0:
                g = g * (pre[k - 1] > 0)
        return gw, gb, (g[0] if single else g)

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "output": self.output,
                "weights": [w.ravel().tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, doc) -> "Mlp":
        net = cls.__new__(cls)
        net.sizes = [int(s) for s in doc["sizes"]]
        net.output = doc["output"]
        net.weights, net.biases = [], []
        for k, (n_in, n_out) in enumerate(zip(net.sizes[:-1], net.sizes[1:])):
            w = np.asarray(doc["weights"][k], dtype=float)
            b = np.asarray(doc["biases"][k], dtype=float)
            if w.size != n_in * n_out or b.size != n_out:
                raise ValueError(f"layer {k}: parameter shape does not match sizes {n_in}x{n_out}")
            net.weights.append(w.reshape(n_in, n_out))
            net.biases.append(b)
        return net


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0

    def update(self, params, grads):
        """In-place bias-corrected Adam step."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ReplayBuffer:
    def __init__(self, capacity, state_dim, action_dim):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros((self.capacity, action_dim))
        self.r = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, state_dim))
        self.d = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done):
        k = self.cursor
        self.s[k], self.a[k], self.r[k], self.s2[k], self.d[k] = s, a, r, s2, float(done)
        self.cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        idx = rng.integers(0, self.size, batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx]


@dataclass
class DdpgConfig:
    actor_hidden: tuple = (512, 256, 128, 64)
    critic_hidden: tuple = (256, 128)
    actor_lr: float = 1e-7
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    buffer_size: int = 100_000
    noise_scale: float = 0.2
    noise_decay: float = 0.99
    noise_min: float = 0.0
    reward_scale: float = 1e-4
    episodes: int = 100
    warmup: int = 0
    updates_per_step: int = 1
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class DdpgAgent:
    def __init__(self, state_dim, action_dim, config: DdpgConfig | None = None):
        self.config = config or DdpgConfig()
        cfg = self.config
        self.state_dim, self.action_dim = state_dim, action_dim
        rng = np.random.default_rng(cfg.seed)
        self.actor = Mlp([state_dim, *cfg.actor_hidden, action_dim], "tanh", rng)
        self.critic = Mlp([state_dim + action_dim, *cfg.critic_hidden, 1], "identity", rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, cfg.critic_lr)
        self.rng = np.random.default_rng(cfg.seed + 1)

    def act(self, state, noise_scale=0.0, rng=None):
        state = np.asarray(state, dtype=float)
        if state.size != self.state_dim:
            raise ValueError(f"state has length {state.size}, expected {self.state_dim}")
        a = self.actor(state)
        if noise_scale > 0:
            rng = rng if rng is not None else self.rng
            a = a + noise_scale * rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)

    def update(self, batch):
        return ddpg_update(batch, self)


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    for t, o in zip(target.params, online.params):
        t *= 1.0 - tau
        t += tau * o


def ddpg_update(batch, agent: DdpgAgent):
    """One critic regression step, one actor ascent step, then target tracking.

    Returns ``(critic_loss, actor_objective)`` measured before the steps.
    """
    cfg = agent.config
    s, a, r, s2, d = batch
    n = s.shape[0]
    a2 = agent.actor_target(s2)
    q2 = agent.critic_target(np.hstack([s2, a2]))[:, 0]
    y = r + cfg.gamma * (1.0 - d) * q2

    q, cache = agent.critic.forward(np.hstack([s, a]))
    err = q[:, 0] - y
    critic_loss = float(np.mean(err ** 2))
    gw, gb, _ = agent.critic.backward(cache, (2.0 / n) * err[:, None])
    agent.critic_opt.update(agent.critic.params, gw + gb)

    mu, actor_cache = agent.actor.forward(s)
    qa, qcache = agent.critic.forward(np.hstack([s, mu]))
    actor_objective = float(np.mean(qa))
    _, _, g_in = agent.critic.backward(qcache, np.full((n, 1), -1.0 / n))
    gw, gb, _ = agent.actor.backward(actor_cache, g_in[:, agent.state_dim:])
    agent.actor_opt.update(agent.actor.params, gw + gb)

    soft_update(agent.actor_target, agent.actor, cfg.tau)
    soft_update(agent.critic_target, agent.critic, cfg.tau)
    return critic_loss, actor_objective


def save_checkpoint(agent: DdpgAgent, path, extra=None) -> None:
    from .files import atomic_write

    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "state_dim": agent.state_dim,
        "action_dim": agent.action_dim,
        "config": agent.config.to_dict(),
        "actor": agent.actor.to_dict(),
        "critic": agent.critic.to_dict(),
        "actor_target": agent.actor_target.to_dict(),
        "critic_target": agent.critic_target.to_dict(),
        "extra": extra or {},
    }
    atomic_write(path, json.dumps(doc))


def load_checkpoint(path) -> DdpgAgent:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format_version')!r}")
    cfg = DdpgConfig(**doc["config"])
    agent = DdpgAgent(doc["state_dim"], doc["action_dim"], cfg)
    for name in ("actor", "critic", "actor_target", "critic_target"):
        net = Mlp.from_dict(doc[name])
        if net.sizes != getattr(agent, name).sizes:
            raise ValueError(f"{path}: {name} sizes {net.sizes} do not match the config")
        setattr(agent, name, net)
    agent.actor_opt = Adam(agent.actor.params, cfg.actor_lr)
    agent.critic_opt = Adam(agent.critic.params, cfg.critic_lr)
    return agent


EPISODE_COLUMNS = ("episode", "start", "windows", "reward", "mean_reward", "cost",
                   "p_bounds", "q_bounds", "ramp", "flow", "voltage",
                   "violating_windows", "tripped", "diverged", "completed", "noise")


def train(env_factory, config: DdpgConfig, agent: DdpgAgent | None = None,
          checkpoint_dir=None, log=None):
    """Run the DDPG loop and return ``(agent, per-episode records)``.

    Episodes start at a window drawn from the seeded generator; everything
    random flows from ``config.seed`` so records are reproducible bit for bit.
    Records carry no wall-clock fields for the same reason.
    """
    env = env_factory()
    agent = agent or DdpgAgent(env.state_dim, env.action_dim, config)
    buffer = ReplayBuffer(config.buffer_size, env.state_dim, env.action_dim)
    rng = np.random.default_rng(config.seed + 2)
    # own stream, so every mode sees the same episode starts
    starts = np.random.default_rng(config.seed + 3)
    records = []
    noise = config.noise_scale
    steps = 0
    for ep in range(config.episodes):
        start = int(starts.integers(0, env.n_windows))
        state = env.reset(start)
        totals = dict.fromkeys(("reward", "cost", "p_bounds", "q_bounds", "ramp", "flow", "voltage"), 0.0)
        windows = violating = tripped = 0
        diverged = completed = False
        while True:
            action = agent.act(state, noise, rng)
            out = env.step(action)
            buffer.push(state, action, out.reward * config.reward_scale, out.next_state, out.done)
            steps += 1
            if len(buffer) >= max(config.batch_size, config.warmup):
                for _ in range(config.updates_per_step):
                    ddpg_update(buffer.sample(config.batch_size, rng), agent)
            windows += 1
            totals["reward"] += out.reward
            totals["cost"] += out.info["cost"]
            for k, v in out.info["penalties"].items():
                totals[k] += v
            violating += any(v > 0 for v in out.info["penalties"].values())
            tripped += len(out.info["tripped"])
            state = out.next_state
            if out.done:
                diverged = out.info["diverged_at"] is not None
                completed = out.info["completed"]
                break
        rec = {"episode": ep, "start": start, "windows": windows, **totals,
               "mean_reward": totals["reward"] / windows, "violating_windows": violating,
               "tripped": tripped, "diverged": int(diverged), "completed": int(completed),
               "noise": float(noise)}
        records.append({c: rec[c] for c in EPISODE_COLUMNS})
        if log:
            log(records[-1])
        noise = max(noise * config.noise_decay, config.noise_min)
        if checkpoint_dir and config.checkpoint_every and (ep + 1) % config.checkpoint_every == 0:
            save_checkpoint(agent, Path(checkpoint_dir) / f"checkpoint_{ep + 1:05d}.json",
                            {"episode": ep + 1})
    return agent, records


@dataclass
class EvalResult:
    schedule: np.ndarray
    realized_p: np.ndarray
    step_cost: np.ndarray
    total_cost: float
    total_reward: float
    violations: dict
    latency: np.ndarray
    windows: int
    diverged_windows: list = field(default_factory=list)
    tripped: list = field(default_factory=list)

    @property
    def bound_violations(self) -> int:
        """Dispatched box/availability plus thermal ramp breaches."""
        return self.violations["p_bounds"] + self.violations["ramp"]


def dispatch_violations(p, prev, case, caps, tol=1e-9):
    """Count box/availability and thermal ramp breaches of one dispatched step."""
    ren = case.renewable_mask()
    lo = case.array("p_min")
    hi = case.array("p_max")
    if ren.any():
        lo = np.where(ren, 0.0, lo)
        hi[ren] = np.minimum(hi[ren], caps)
    n_box = int(np.sum((p > hi + tol) | (p < lo - tol)))
    n_ramp = 0
    if prev is not None:
        dp = p - prev
        ru, rd = case.array("ramp_up"), case.array("ramp_down")
        n_ramp = int(np.sum(((dp > ru + tol) | (dp < -rd - tol)) & ~ren))
    return n_box, n_ramp


def evaluate(agent: DdpgAgent, env, start: int = 0, windows: int | None = None) -> EvalResult:
    """Noise-free receding-horizon rollout; each window's first step is operated.

    Runs on a private copy of ``env`` that keeps going after a divergence so
    the whole test range is covered. Violations are counted, never masked; a
    window whose operated step diverges is costed at its dispatched output.
    """
    from .env import LookaheadEnv

    env = LookaheadEnv(env.case, env.scenario,
                       replace(env.config, terminate_on_divergence=False, episode_windows=None))
    case = env.case
    state = env.reset(start)
    n = env.n_windows - start if windows is None else min(windows, env.n_windows - start)
    env.end = start + n
    schedule = np.zeros((case.n_gen, n))
    realized = np.zeros((case.n_gen, n))
    step_cost = np.zeros(n)
    latency = np.zeros(n)
    viol = dict.fromkeys(("p_bounds", "ramp", "slack_p", "q_bounds", "flow", "voltage"), 0)
    slack_gens = np.flatnonzero(case.gen_bus_index() == case.slack_index)
    p_lo, p_hi = case.array("p_min"), case.array("p_max")
    q_lo, q_hi = case.array("q_min"), case.array("q_max")
    v_lo, v_hi = case.array("v_min", "buses"), case.array("v_max", "buses")
    i_max = case.array("i_max", "branches")
    costs = [g.cost for g in case.generators]
    total_reward = 0.0
    prev = None
    diverged, trips = [], []
    for w in range(n):
        t0 = time.perf_counter()
        action = agent.act(state)
        ctx = env.guard_context()
        guard(action, ctx)
        latency[w] = time.perf_counter() - t0

        out = env.step(action)
        total_reward += out.reward
        p0 = out.info["dispatch"].p[:, 0]
        schedule[:, w] = p0
        caps = ctx.renewable_caps[:, 0] if ctx.renewable_caps is not None else []
        nb, nr = dispatch_violations(p0, prev, case, caps)
        viol["p_bounds"] += nb
        viol["ramp"] += nr
        trips += [(start + w, j) for tau, j in out.info["tripped"] if tau == 0]
        prev = p0
        if out.info["diverged_at"] == 0:
            diverged.append(start + w)
            realized[:, w] = p0
            step_cost[w] = sum(float(c(x)) for c, x in zip(costs, p0))
        else:
            rp = out.info["realized_p"][:, 0]
            rq = out.info["realized_q"][:, 0]
            realized[:, w] = rp
            step_cost[w] = out.info["step_costs"][0]
            viol["slack_p"] += int(np.sum((rp[slack_gens] > p_hi[slack_gens] + 1e-9)
                                          | (rp[slack_gens] < p_lo[slack_gens] - 1e-9)))
            viol["q_bounds"] += int(np.sum((rq > q_hi + 1e-9) | (rq < q_lo - 1e-9)))
            vm = out.info["v_mag"][:, 0]
            viol["voltage"] += int(np.sum((vm > v_hi + 1e-9) | (vm < v_lo - 1e-9)))
            viol["flow"] += int(np.sum(out.info["branch_i"][:, 0] > i_max))
        state = out.next_state
        if out.done:
            break
    return EvalResult(schedule, realized, step_cost, float(step_cost.sum()), total_reward, viol,
                      latency, n, diverged, trips)
