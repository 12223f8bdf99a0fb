"""Command line entry point: ``lookahead-ed {synth,pf,guard,train,eval,baseline}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import files
from .agent import CHECKPOINT_FORMAT, DdpgConfig, EPISODE_COLUMNS, evaluate, load_checkpoint, save_checkpoint, train
from .env import EnvConfig, LookaheadEnv
from .grid import build_admittance, solve_power_flow
from .guard import MODES, GuardContext, guard
from .oracle import DispatchInstance, lambda_dispatch, rolling_baseline
from .synth import synth

MANIFEST_FORMAT = 1


@dataclass
class RunConfig:
    case: str | None = None
    scenario: str | None = None
    out: str = "runs/latest"
    checkpoint: str | None = None
    mode: str = "m3"
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.env.mode = self.mode
        self.ddpg.seed = self.seed

    def check_paths(self, *names):
        for name in names:
            path = getattr(self, name)
            if path is None or not Path(path).exists():
                raise FileNotFoundError(f"{name} file not found: {path}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["ddpg"]["actor_hidden"] = list(self.ddpg.actor_hidden)
        doc["ddpg"]["critic_hidden"] = list(self.ddpg.critic_hidden)
        return doc


def _section(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    bad = set(values) - known
    if bad:
        raise ValueError(f"unknown {where} setting(s): {sorted(bad)}")
    return cls(**values)


def build_run_config(args) -> RunConfig:
    """Merge a config file (``env``/``ddpg`` sections or dotted flat keys) with flags."""
    doc = files.load_config(args.config) if getattr(args, "config", None) else {}
    env_kw = dict(doc.get("env", {}))
    ddpg_kw = dict(doc.get("ddpg", {}))
    top = {}
    for key, value in doc.items():
        if key in ("env", "ddpg"):
            continue
        if key.startswith("env."):
            env_kw[key[4:]] = value
        elif key.startswith("ddpg."):
            ddpg_kw[key[5:]] = value
        else:
            top[key] = value
    for name in ("case", "scenario", "out", "checkpoint", "mode", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            top[name] = value
    unknown = set(top) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ValueError(f"unknown setting(s): {sorted(unknown)}")
    return RunConfig(env=_section(EnvConfig, env_kw, "env"),
                     ddpg=_section(DdpgConfig, ddpg_kw, "ddpg"), **top)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run: RunConfig, out: Path, command: str) -> None:
    doc = {
        "manifest_format": MANIFEST_FORMAT,
        "command": command,
        "config": run.to_dict(),
        "seed": run.seed,
        "formats": {"case": files.CASE_FORMAT, "scenario": files.SCENARIO_FORMAT,
                    "metrics": files.METRICS_FORMAT, "checkpoint": CHECKPOINT_FORMAT},
        "inputs": {name: {"path": str(getattr(run, name)), "sha256": _sha256(getattr(run, name))}
                   for name in ("case", "scenario", "checkpoint") if getattr(run, name)},
    }
    files.write_json(doc, out / "manifest.json")


def _plot_curve(records, path, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([float(r["episode"]) for r in records], [float(r["reward"]) for r in records], lw=1)
    ax.set_xlabel("episode")
    ax.set_ylabel("episode reward")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_schedule(schedule, path, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, row in enumerate(schedule):
        ax.plot(row, lw=1, label=f"gen {i}")
    ax.set_xlabel("window")
    ax.set_ylabel("MW")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _emit(doc, out):
    text = json.dumps(doc, indent=1)
    if out:
        files.atomic_write(out, text + "\n")
    else:
        print(text)


def cmd_synth(args):
    case, scenario = synth(args.buses, args.gens, args.renewables, seed=args.seed or 0, steps=args.steps)
    out = Path(args.out or ".")
    files.write_case(case, out / "case.json")
    files.write_scenario(scenario, case, out / "scenario.csv")
    print(f"wrote {out / 'case.json'} and {out / 'scenario.csv'}")


def cmd_pf(args):
    case = files.parse_case(args.case)
    load_p = np.zeros(case.n_bus)
    load_q = np.zeros(case.n_bus)
    gen_p = case.array("p_min")
    if args.scenario:
        sc = files.parse_scenario(args.scenario, case)
        load_p, load_q = sc.load_p[:, args.step], sc.load_q[:, args.step]
        lo, hi = case.array("p_min"), case.array("p_max")
        ren = case.renewable_mask()
        hi[ren] = np.minimum(hi[ren], sc.renewable_p[:, args.step])
        gen_p, _ = lambda_dispatch(DispatchInstance([g.cost for g in case.generators], lo, hi, load_p.sum()))
    sol = solve_power_flow(case, build_admittance(case), gen_p, None, load_p, load_q)
    _emit({"converged": sol.converged, "iterations": sol.iterations, "max_mismatch": sol.max_mismatch,
           "v_mag": sol.v_mag.tolist(), "v_ang": sol.v_ang.tolist(), "gen_p": sol.gen_p.tolist(),
           "gen_q": sol.gen_q.tolist(), "branch_i": sol.branch_i.tolist()}, args.out)
    return 0 if sol.converged else 3


def cmd_guard(args):
    case = files.parse_case(args.case)
    doc = json.loads(Path(args.action).read_text())
    action = doc["action"] if isinstance(doc, dict) else doc
    ctx_doc = json.loads(Path(args.context).read_text())
    if args.mode:
        ctx_doc["mode"] = args.mode
    demand = ctx_doc.pop("target_demand")
    ctx = GuardContext.from_case(case, demand, **ctx_doc)
    res = guard(action, ctx)
    rep = res.report
    _emit({"p": res.p.tolist(), "v_set": res.v_set.tolist(), "report": {
        "iterations": rep.iterations.tolist(), "residual": rep.residual.tolist(),
        "clipped_upper": rep.clipped_upper, "clipped_lower": rep.clipped_lower,
        "capacity_exhausted": rep.capacity_exhausted.tolist(),
        "cost_fallback": rep.cost_fallback.tolist(), "action_clipped": rep.action_clipped}}, args.out)


def _load_inputs(run: RunConfig):
    run.check_paths("case", "scenario")
    case = files.parse_case(run.case)
    scenario = files.parse_scenario(run.scenario, case, run.env.dt_minutes)
    return case, scenario


def cmd_train(args):
    run = build_run_config(args)
    case, scenario = _load_inputs(run)
    out = Path(run.out)
    write_manifest(run, out, "train")
    agent, records = train(lambda: LookaheadEnv(case, scenario, run.env), run.ddpg,
                           checkpoint_dir=out / "checkpoints")
    files.write_metrics(records, out / "metrics.csv", list(EPISODE_COLUMNS))
    save_checkpoint(agent, out / "agent.json", {"episodes": run.ddpg.episodes, "mode": run.mode})
    if args.plot:
        _plot_curve(records, out / "reward_curve.png", f"training reward ({run.mode})")
    print(f"trained {run.ddpg.episodes} episodes; metrics in {out / 'metrics.csv'}")


def cmd_eval(args):
    run = build_run_config(args)
    case, scenario = _load_inputs(run)
    run.check_paths("checkpoint")
    agent = load_checkpoint(run.checkpoint)
    out = Path(run.out)
    write_manifest(run, out, "eval")
    res = evaluate(agent, LookaheadEnv(case, scenario, run.env))
    rows = []
    for w in range(res.schedule.shape[1]):
        row = {"window": w, "cost": float(res.step_cost[w]), "latency_ms": float(res.latency[w] * 1e3),
               "diverged": int(w in res.diverged_windows)}
        row.update({f"gen_{i}_p": float(res.schedule[i, w]) for i in range(case.n_gen)})
        rows.append(row)
    files.write_metrics(rows, out / "eval_metrics.csv")
    summary = {"mode": run.mode, "windows": res.windows, "total_cost": res.total_cost,
               "total_reward": res.total_reward, "violations": res.violations,
               "bound_violations": res.bound_violations, "diverged_windows": res.diverged_windows,
               "latency_ms_mean": float(res.latency.mean() * 1e3), "latency_ms_max": float(res.latency.max() * 1e3)}
    files.write_json(summary, out / "eval_summary.json")
    if args.plot:
        _plot_schedule(res.schedule, out / "eval_schedule.png", f"operated dispatch ({run.mode})")
    print(json.dumps(summary, indent=1))


def cmd_baseline(args):
    run = build_run_config(args)
    case, scenario = _load_inputs(run)
    out = Path(run.out)
    write_manifest(run, out, "baseline")
    steps = args.steps or scenario.n_windows(run.env.T)
    res = rolling_baseline(case, scenario, steps=steps, loss_factor=run.env.loss_factor)
    rows = []
    for t in range(steps):
        row = {"step": t, "cost": float(res.step_cost[t]), "lambda": float(res.prices[t])}
        row.update({f"gen_{i}_p": float(res.realized_p[i, t]) for i in range(case.n_gen)})
        rows.append(row)
    files.write_metrics(rows, out / "baseline.csv")
    summary = {"label": res.label, "steps": steps, "total_cost": res.total_cost,
               "infeasible_steps": res.infeasible_steps, "diverged_steps": res.diverged_steps,
               "voltage_violations": res.voltage_violations, "overloaded_branches": res.overloaded_branches}
    files.write_json(summary, out / "baseline_summary.json")
    if args.plot:
        _plot_schedule(res.realized_p, out / "baseline_schedule.png", "OPF-lite baseline")
    print(json.dumps(summary, indent=1))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lookahead-ed", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, config=True):
        p.add_argument("--case")
        p.add_argument("--scenario")
        if config:
            p.add_argument("--config")
            p.add_argument("--mode", choices=MODES)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--plot", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic case and scenario")
    p.add_argument("--buses", type=int, default=6)
    p.add_argument("--gens", type=int, default=3)
    p.add_argument("--renewables", type=int, default=1)
    p.add_argument("--steps", type=int, default=192)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pf", help="solve one AC power flow")
    common(p, config=False)
    p.add_argument("--step", type=int, default=0)
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("guard", help="apply the action security modification to an action file")
    p.add_argument("--case", required=True)
    p.add_argument("--action", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out")
    p.set_defaults(func=cmd_guard)

    p = sub.add_parser("train", help="train a DDPG agent")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="noise-free receding-horizon test of a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="rolling OPF-lite baseline")
    common(p)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_baseline)
    return parser


def run_cli(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        code = args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"lookahead-ed {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
