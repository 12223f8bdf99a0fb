import numpy as np
import pytest

from lookahead_ed.env import LoadScenario
from lookahead_ed.grid import RENEWABLE, Branch, Bus, CostFunction, Generator, NetworkCase
from lookahead_ed.synth import synth

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def two_bus():
    return NetworkCase(
        base_mva=100.0,
        buses=[Bus(1), Bus(2)],
        branches=[Branch(1, 2, r=0.0, x=0.1, i_max=5.0)],
        generators=[Generator(1, 0, 1000, -1000, 1000, 100, 100, CostFunction(0.01, 10, 0))],
        slack_bus=1,
    )


def three_bus_case(i_max_23=1.0, mesh=True):
    """Slack at bus 1, a cheap thermal unit at bus 2, load at bus 3.

    Without ``mesh`` bus 2 hangs off bus 3 only, so tripping 2-3 islands it.
    """
    branches = [Branch(1, 3, r=0.01, x=0.08, i_max=2.0, b_charging=0.02),
                Branch(2, 3, r=0.01, x=0.08, i_max=i_max_23, b_charging=0.02)]
    if mesh:
        branches.append(Branch(1, 2, r=0.01, x=0.1, i_max=2.0))
    gens = [
        Generator(1, 10.0, 200.0, -150.0, 150.0, 40.0, 40.0, CostFunction(0.02, 20.0, 50.0), v_setpoint=1.0),
        Generator(2, 10.0, 200.0, -150.0, 150.0, 40.0, 40.0, CostFunction(0.01, 15.0, 30.0), v_setpoint=1.0),
    ]
    buses = [Bus(1, 0.94, 1.06), Bus(2, 0.94, 1.06), Bus(3, 0.94, 1.06)]
    return NetworkCase(100.0, buses, branches, gens, slack_bus=1)


def three_bus_scenario(steps=6, load=100.0):
    load_p = np.zeros((3, steps))
    load_p[2] = load + np.linspace(0, 5, steps)
    load_q = 0.2 * load_p
    return LoadScenario(load_p, load_q, np.zeros((0, steps)))


@pytest.fixture
def three_bus():
    return three_bus_case()


@pytest.fixture(scope="session")
def desk():
    """The 6-bus / 3-generator synthetic fixture (one renewable)."""
    return synth(6, 3, 1, seed=0, steps=96 * 3)


@pytest.fixture
def renewable_gen():
    return Generator(2, 0.0, 60.0, -20.0, 20.0, 60.0, 60.0, CostFunction(0.0, 2.0, 0.0), kind=RENEWABLE)


def finite_difference_errors(net, x, grad_out, rng, per_layer=20, h=1e-5, floor=1e-8):
    """Max relative error of analytic vs central-difference gradients.

    The scalar probed is ``sum(grad_out * net(x))``. Sampled entries from every
    weight and bias array, plus the input, are compared; returns a dict of
    per-array maxima keyed ``w0, b0, ..., input``.
    """
    def loss():
        return float(np.sum(grad_out * net(x)))

    out, cache = net.forward(x)
    gw, gb, gx = net.backward(cache, grad_out)
    errors = {}
    arrays = [(f"w{k}", w, g) for k, (w, g) in enumerate(zip(net.weights, gw))]
    arrays += [(f"b{k}", b, g) for k, (b, g) in enumerate(zip(net.biases, gb))]
    arrays.append(("input", x, gx))
    for name, arr, grad in arrays:
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        idx = rng.choice(flat.size, min(per_layer, flat.size), replace=False)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = loss()
            flat[i] = keep - h
            down = loss()
            flat[i] = keep
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor))
        errors[name] = worst
    return errors


def loop_admittance(case, statuses=None):
    """Reference Ybus built entry by entry from the two-port formulas."""
    n = case.n_bus
    idx = case.bus_index
    y = np.zeros((n, n), dtype=complex)
    for k, b in enumerate(case.buses):
        y[k, k] += b.shunt_g + 1j * b.shunt_b
    for j, br in enumerate(case.branches):
        if statuses is not None and not statuses[j]:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1 / complex(br.r, br.x)
        a = br.tap * np.exp(1j * br.shift)
        y[f, f] += (ys + 0.5j * br.b_charging) / abs(a) ** 2
        y[f, t] += -ys / np.conj(a)
        y[t, f] += -ys / a
        y[t, t] += ys + 0.5j * br.b_charging
    return y
