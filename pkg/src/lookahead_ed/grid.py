"""Static network model and Newton-Raphson AC power flow.

Case data is stored in physical units (MW, MVAr); the solver works in
per-unit on ``base_mva``. Branch currents and ``i_max`` are per-unit.

Branch two-port model (series admittance ``ys = 1/(r + jx)``, complex
ratio ``t = tap * exp(j*shift)`` on the from side)::

    Yff = (ys + j*b/2) / |t|^2     Yft = -ys / conj(t)
    Ytf = -ys / t                  Ytt =  ys + j*b/2

Bus shunts ``g + jb`` are added to the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

PF_TOL = 1e-8
PF_MAX_ITER = 20
LOADING_EPS = 1e-6
OVERLOAD_THRESHOLD = 1.4

THERMAL = "thermal"
RENEWABLE = "renewable"


class CaseError(ValueError):
    """Raised when a network case breaks one of its invariants."""


@dataclass(frozen=True)
class CostFunction:
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    def __call__(self, p):
        return self.c2 * np.square(p) + self.c1 * np.asarray(p) + self.c0

    def marginal(self, p):
        return 2.0 * self.c2 * np.asarray(p) + self.c1


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float = 0.94
    v_max: float = 1.06
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    i_max: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    ramp_up: float
    ramp_down: float
    cost: CostFunction = field(default_factory=CostFunction)
    kind: str = THERMAL
    v_setpoint: float = 1.0

    @property
    def renewable(self) -> bool:
        return self.kind == RENEWABLE


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple
    branches: tuple
    generators: tuple
    slack_bus: int

    def __post_init__(self):
        # accept lists from callers, keep the case hashable/immutable
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def bus_index(self) -> dict:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def slack_index(self) -> int:
        return self.bus_index[self.slack_bus]

    def gen_bus_index(self) -> np.ndarray:
        idx = self.bus_index
        return np.array([idx[g.bus] for g in self.generators], dtype=int)

    def statuses(self) -> np.ndarray:
        return np.array([br.status for br in self.branches], dtype=bool)

    def renewable_mask(self) -> np.ndarray:
        return np.array([g.renewable for g in self.generators], dtype=bool)

    def array(self, attr: str, of: str = "generators") -> np.ndarray:
        return np.array([getattr(item, attr) for item in getattr(self, of)], dtype=float)


def validate_case(case: NetworkCase) -> None:
    if not case.base_mva > 0:
        raise CaseError(f"base_mva must be positive, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("bus ids are not unique")
    known = set(ids)
    if case.slack_bus not in known:
        raise CaseError(f"slack bus {case.slack_bus} does not exist")
    for b in case.buses:
        if not 0 < b.v_min < b.v_max:
            raise CaseError(f"bus {b.id}: need 0 < v_min < v_max")
    for j, br in enumerate(case.branches):
        name = f"branch {j} ({br.from_bus}-{br.to_bus})"
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseError(f"{name}: endpoint does not exist")
        if br.r == 0 and br.x == 0:
            raise CaseError(f"{name}: zero impedance")
        if not br.i_max > 0:
            raise CaseError(f"{name}: i_max must be positive")
        if not br.tap > 0:
            raise CaseError(f"{name}: tap must be positive")
    for i, g in enumerate(case.generators):
        name = f"generator {i} (bus {g.bus})"
        if g.bus not in known:
            raise CaseError(f"{name}: bus does not exist")
        if g.p_min > g.p_max:
            raise CaseError(f"{name}: p_min > p_max")
        if g.q_min > g.q_max:
            raise CaseError(f"{name}: q_min > q_max")
        if g.ramp_up < 0 or g.ramp_down < 0:
            raise CaseError(f"{name}: negative ramp limit")
        if g.kind not in (THERMAL, RENEWABLE):
            raise CaseError(f"{name}: unknown kind {g.kind!r}")
        if g.renewable and g.p_min != 0:
            raise CaseError(f"{name}: renewable generators need p_min = 0")
        if g.cost.c2 < 0:
            raise CaseError(f"{name}: cost must be convex (c2 >= 0)")


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    branch_i: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def _branch_stamps(case: NetworkCase):
    br = case.branches
    ys = 1.0 / (np.array([b.r for b in br]) + 1j * np.array([b.x for b in br]))
    bc = np.array([b.b_charging for b in br])
    t = np.array([b.tap for b in br]) * np.exp(1j * np.array([b.shift for b in br]))
    ytt = ys + 0.5j * bc
    yff = ytt / (t * np.conj(t))
    yft = -ys / np.conj(t)
    ytf = -ys / t
    return yff, yft, ytf, ytt


def _endpoints(case: NetworkCase):
    idx = case.bus_index
    f = np.array([idx[b.from_bus] for b in case.branches], dtype=int)
    t = np.array([idx[b.to_bus] for b in case.branches], dtype=int)
    return f, t


def build_admittance(case: NetworkCase, statuses=None) -> np.ndarray:
    """Dense complex bus admittance matrix in p.u.

    Assembled from triplets so the same stamps can feed a sparse matrix.
    """
    n = case.n_bus
    statuses = case.statuses() if statuses is None else np.asarray(statuses, dtype=bool)
    ysh = case.array("shunt_g", "buses") + 1j * case.array("shunt_b", "buses")
    if case.n_branch == 0:
        return np.diag(ysh).astype(complex)
    yff, yft, ytf, ytt = _branch_stamps(case)
    on = statuses.astype(float)
    f, t = _endpoints(case)
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff * on, yft * on, ytf * on, ytt * on, ysh])
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).toarray()


def branch_currents(case: NetworkCase, voltage: np.ndarray, statuses=None) -> np.ndarray:
    """Per-branch current magnitude (p.u.), the larger of the two ends."""
    if case.n_branch == 0:
        return np.zeros(0)
    statuses = case.statuses() if statuses is None else np.asarray(statuses, dtype=bool)
    yff, yft, ytf, ytt = _branch_stamps(case)
    f, t = _endpoints(case)
    i_from = yff * voltage[f] + yft * voltage[t]
    i_to = ytf * voltage[f] + ytt * voltage[t]
    return np.where(statuses, np.maximum(np.abs(i_from), np.abs(i_to)), 0.0)


def _connected_to_slack(case: NetworkCase, statuses) -> np.ndarray:
    f, t = _endpoints(case)
    on = np.asarray(statuses, dtype=bool)
    adj = sparse.coo_matrix(
        (np.ones(on.sum()), (f[on], t[on])), shape=(case.n_bus, case.n_bus))
    _, labels = sparse.csgraph.connected_components(adj, directed=False)
    return labels == labels[case.slack_index]


def bus_voltage_setpoints(case: NetworkCase, v_set=None) -> np.ndarray:
    """Per-bus magnitude target; the first generator at a bus sets it."""
    v_set = case.array("v_setpoint") if v_set is None else np.asarray(v_set, dtype=float)
    vm = np.ones(case.n_bus)
    seen = set()
    for i, k in enumerate(case.gen_bus_index()):
        if k not in seen:
            bus = case.buses[k]
            vm[k] = min(max(v_set[i], bus.v_min), bus.v_max)
            seen.add(k)
    return vm


def power_mismatch(ybus, voltage, s_spec, pv, pq) -> np.ndarray:
    mis = voltage * np.conj(ybus @ voltage) - s_spec
    return np.concatenate([mis[pv].real, mis[pq].real, mis[pq].imag])


def _jacobian(ybus, voltage, pv, pq):
    ibus = ybus @ voltage
    diag_v = np.diag(voltage)
    ds_dvm = diag_v @ np.conj(ybus @ np.diag(voltage / np.abs(voltage))) \
        + np.diag(np.conj(ibus) * voltage / np.abs(voltage))
    ds_dva = 1j * diag_v @ np.conj(np.diag(ibus) - ybus @ diag_v)
    pvpq = np.concatenate([pv, pq])
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def solve_power_flow(case: NetworkCase, ybus, gen_p=None, v_set=None,
                     load_p=None, load_q=None, statuses=None,
                     tol: float = PF_TOL, max_iter: int = PF_MAX_ITER) -> PowerFlowSolution:
    """Polar Newton-Raphson power flow from a flat start.

    ``gen_p`` (MW) is the per-generator schedule; the slack bus's generators
    absorb the active residual. ``v_set`` is the per-generator magnitude
    setpoint (p.u.), clipped to the bus limits. ``load_p``/``load_q`` are
    per-bus in MW/MVAr. Reactive limits are reported, never enforced.

    A diverged solve is returned with ``converged=False``; it never raises.
    """
    n = case.n_bus
    base = case.base_mva
    gen_p = case.array("p_min") if gen_p is None else np.asarray(gen_p, dtype=float)
    load_p = np.zeros(n) if load_p is None else np.asarray(load_p, dtype=float)
    load_q = np.zeros(n) if load_q is None else np.asarray(load_q, dtype=float)
    statuses = case.statuses() if statuses is None else np.asarray(statuses, dtype=bool)
    gbus = case.gen_bus_index()
    slack = case.slack_index

    is_gen_bus = np.zeros(n, dtype=bool)
    is_gen_bus[gbus] = True
    pv = np.flatnonzero(is_gen_bus & (np.arange(n) != slack))
    pq = np.flatnonzero(~is_gen_bus & (np.arange(n) != slack))

    p_inj = -load_p.copy()
    np.add.at(p_inj, gbus, gen_p)
    s_spec = (p_inj - 1j * load_q) / base

    vm = bus_voltage_setpoints(case, v_set)
    voltage = vm.astype(complex)

    def finish(converged, it, mismatch):
        s_bus = voltage * np.conj(ybus @ voltage) * base
        p_out, q_out = _realized_gen_output(case, gbus, gen_p, s_bus, load_p, load_q)
        return PowerFlowSolution(
            v_mag=np.abs(voltage), v_ang=np.angle(voltage), gen_p=p_out, gen_q=q_out,
            branch_i=branch_currents(case, voltage, statuses), converged=converged,
            iterations=it, max_mismatch=float(mismatch))

    if case.n_branch and not _connected_to_slack(case, statuses).all():
        return finish(False, 0, np.inf)

    f = power_mismatch(ybus, voltage, s_spec, pv, pq)
    norm = np.max(np.abs(f)) if f.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            return finish(False, it, norm)
        it += 1
        try:
            dx = np.linalg.solve(_jacobian(ybus, voltage, pv, pq), -f)
        except np.linalg.LinAlgError:
            return finish(False, it, norm)
        va = np.angle(voltage)
        vmag = np.abs(voltage)
        va[pv] += dx[:len(pv)]
        va[pq] += dx[len(pv):len(pv) + len(pq)]
        vmag[pq] += dx[len(pv) + len(pq):]
        if not np.all(np.isfinite(vmag)) or np.any(vmag <= 0):
            return finish(False, it, np.inf)
        voltage = vmag * np.exp(1j * va)
        f = power_mismatch(ybus, voltage, s_spec, pv, pq)
        norm = np.max(np.abs(f))
    return finish(True, it, norm)


def _realized_gen_output(case, gbus, gen_p, s_bus, load_p, load_q):
    """Split solved bus injections back onto generators.

    Slack P residual goes to the first slack generator. Reactive output at a
    bus is shared evenly by its generators.
    """
    p = np.array(gen_p, dtype=float)
    q = np.zeros(case.n_gen)
    slack = case.slack_index
    at_slack = np.flatnonzero(gbus == slack)
    if at_slack.size:
        others = p[at_slack[1:]].sum()
        p[at_slack[0]] = s_bus[slack].real + load_p[slack] - others
    for k in np.unique(gbus):
        members = np.flatnonzero(gbus == k)
        q[members] = (s_bus[k].imag + load_q[k]) / members.size
    return p, q


def branch_loadings(solution: PowerFlowSolution, case: NetworkCase, epsilon: float = LOADING_EPS,
                    statuses=None) -> np.ndarray:
    """Loading rate I / (I_max + eps); out-of-service branches report 0."""
    statuses = case.statuses() if statuses is None else np.asarray(statuses, dtype=bool)
    i_max = case.array("i_max", "branches")
    return np.where(statuses, solution.branch_i / (i_max + epsilon), 0.0)


def apply_hard_overload(statuses, loadings, threshold: float = OVERLOAD_THRESHOLD):
    """Trip every branch loaded above ``threshold``.

    Returns the new status array and the list of newly tripped branch indices.
    """
    if not threshold > 1:
        raise ValueError("overload threshold must exceed 1")
    statuses = np.asarray(statuses, dtype=bool)
    over = statuses & (np.asarray(loadings) > threshold)
    if not over.any():
        return statuses.copy(), []
    out = statuses.copy()
    out[over] = False
    return out, [int(j) for j in np.flatnonzero(over)]


def active_losses(solution: PowerFlowSolution, load_p: Sequence[float]) -> float:
    return float(np.sum(solution.gen_p) - np.sum(load_p))
