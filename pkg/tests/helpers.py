"""Instance builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from riskte.network import Edge, Flow, Instance, Network, Tunnel, generate_tunnels
from riskte.scenarios import ScenarioSet, build_survival, make_scenario_set


def three_node() -> tuple[Instance, ScenarioSet]:
    """a->c directly or via b; b->c shares the b-c link."""
    net = Network(("a", "b", "c"), (
        Edge("ac", "a", "c", 4.0),
        Edge("ab", "a", "b", 6.0),
        Edge("bc", "b", "c", 5.0),
    ))
    flows = (Flow("f1", "a", "c", 6.0), Flow("f2", "b", "c", 4.0))
    tunnels = (
        Tunnel("f1:direct", "f1", ("ac",)),
        Tunnel("f1:via-b", "f1", ("ab", "bc")),
        Tunnel("f2:direct", "f2", ("bc",)),
    )
    inst = Instance(net, flows, tunnels, name="three")
    sset = make_scenario_set([(), ("ac",), ("bc",), ("ab",)], [0.8, 0.1, 0.06, 0.04],
                             [e.id for e in net.edges], tol=1e-12)
    return inst, build_survival(inst, sset)


def random_instance(seed: int, max_nodes: int = 5, max_scenarios: int = 6
                    ) -> tuple[Instance, ScenarioSet]:
    """A small complete digraph with random capacities, flows and failure sets."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, max_nodes + 1))
    nodes = tuple(f"v{i}" for i in range(n))
    edges = []
    for a in nodes:
        for b in nodes:
            if a != b:
                edges.append(Edge(f"e{len(edges)}", a, b, float(rng.uniform(1.0, 10.0))))
    net = Network(nodes, tuple(edges))
    pairs = [(a, b) for a in nodes for b in nodes if a != b]
    n_flows = int(rng.integers(1, min(4, len(pairs)) + 1))
    chosen = rng.choice(len(pairs), size=n_flows, replace=False)
    flows = [Flow(f"f{i}", *pairs[j], float(rng.uniform(0.5, 12.0))) for i, j in enumerate(chosen)]
    tunnels = generate_tunnels(net, flows, int(rng.integers(1, 4)))
    inst = Instance(net, tuple(flows), tuple(tunnels), name=f"rand{seed}")
    n_scen = int(rng.integers(1, max_scenarios + 1))
    sets = {()}
    while len(sets) < n_scen:
        k = int(rng.integers(1, 3))
        sets.add(tuple(sorted(rng.choice(len(edges), size=k, replace=False).tolist())))
    sets = sorted(sets)
    probs = rng.uniform(0.01, 1.0, size=len(sets))
    probs /= probs.sum()
    sset = make_scenario_set([[edges[i].id for i in s] for s in sets], probs,
                             [e.id for e in edges], tol=1e-9)
    return inst, build_survival(inst, sset)


def shuffled_scenarios(inst: Instance, sset: ScenarioSet, seed: int) -> ScenarioSet:
    """The same scenarios listed in a random order with fresh labels."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(sset.n)
    out = make_scenario_set([sset.failed[i] for i in perm], sset.raw_probs[perm],
                            [e.id for e in inst.network.edges],
                            labels=[f"s{int(i)}" for i in rng.permutation(sset.n)])
    return build_survival(inst, out)


def solve_lp(parsed) -> tuple[float, dict[str, float]]:
    """Solve a parsed LP with scipy's HiGHS MILP; returns (objective, values)."""
    from scipy.optimize import Bounds, LinearConstraint, milp
    from scipy.sparse import lil_matrix

    names = parsed.variables
    idx = {n: i for i, n in enumerate(names)}
    c = np.zeros(len(names))
    for n, v in parsed.objective.items():
        c[idx[n]] = v
    A = lil_matrix((len(parsed.constraints), len(names)))
    lo, hi = [], []
    for i, (_, terms, sense, rhs) in enumerate(parsed.constraints):
        for n, v in terms.items():
            A[i, idx[n]] = v
        lo.append(rhs if sense in (">=", "=") else -np.inf)
        hi.append(rhs if sense in ("<=", "=") else np.inf)
    lb, ub = np.zeros(len(names)), np.ones(len(names))
    for n, (a, b) in parsed.bounds.items():
        lb[idx[n]], ub[idx[n]] = a, b
    integ = np.zeros(len(names))
    for n in parsed.binaries:
        integ[idx[n]] = 1
    res = milp(c, constraints=LinearConstraint(A.tocsr(), lo, hi), bounds=Bounds(lb, ub),
               integrality=integ, options={"mip_rel_gap": 1e-9})
    if not res.success:
        raise RuntimeError(res.message)
    return float(res.fun), {n: float(res.x[i]) for i, n in enumerate(names)}


# (criterion number, title, passed, detail, seconds), filled by the acceptance module
ACCEPTANCE: list[tuple[int, str, bool, str, float]] = []
