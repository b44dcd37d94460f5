"""Built-in instances, demand synthesis and training-set construction."""

from __future__ import annotations

import json
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .network import Edge, Flow, Instance, Network, Tunnel, generate_tunnels, instance_from_dict
from .scenarios import ScenarioSet, build_survival, make_scenario_set, perturb_demands, \
    scenarios_from_dict
from .unroll import Sample


def _data(name: str) -> dict:
    return json.loads(resources.files("riskte").joinpath("data").joinpath(name).read_text())


def fig1_instance() -> Instance:
    """Two sources sharing a relay M toward D; the relay link is the bottleneck."""
    return instance_from_dict(_data("fig1_instance.json"))


def fig1_scenarios(instance: Instance | None = None) -> ScenarioSet:
    instance = instance or fig1_instance()
    return build_survival(instance, scenarios_from_dict(_data("fig1_scenarios.json"),
                                                       instance.network))


def fig1_decisions(instance: Instance | None = None) -> dict[str, np.ndarray]:
    """The two illustrated allocations as split-ratio vectors in tunnel order."""
    instance = instance or fig1_instance()
    out = {}
    for name, bw in _data("fig1_decisions.json")["decisions"].items():
        x = np.zeros(instance.n_tunnels)
        for tid, value in bw.items():
            t = instance.tunnel_index[tid]
            x[t] = value / instance.demand[instance.tunnel_flow[t]]
        out[name] = x
    return out


def fig2_instance() -> Instance:
    """Four single-edge flows; e2 is asked to carry 1.5 units on capacity 1."""
    caps = (1.0, 1.0, 1.0, 100.0)
    demands = (0.5, 1.5, 0.8, 100.0)
    nodes, edges, flows, tunnels = [], [], [], []
    for i, (c, d) in enumerate(zip(caps, demands), start=1):
        a, b = f"a{i}", f"b{i}"
        nodes += [a, b]
        edges.append(Edge(f"e{i}", a, b, c))
        flows.append(Flow(f"f{i}", a, b, d))
        tunnels.append(Tunnel(f"f{i}#0", f"f{i}", (f"e{i}",)))
    return Instance(Network(tuple(nodes), tuple(edges)), tuple(flows), tuple(tunnels), name="fig2")


DESK_SCENARIOS = (
    ((), 0.80),
    (("s1-d",), 0.06),
    (("s2-d",), 0.05),
    (("s3-d",), 0.04),
    (("m-d",), 0.02),
    (("n-d",), 0.02),
    (("s1-d", "s2-d"), 0.006),
    (("s1-d", "m-d"), 0.004),
)


def desk_instance() -> Instance:
    """Three sources reaching d directly or through relays m and n.

    Every source has a direct, a via-m and a via-n tunnel; the relay links
    into d are shared by three tunnels each and are tighter than demand.
    """
    srcs = ("s1", "s2", "s3")
    direct_cap = {"s1": 6.0, "s2": 7.0, "s3": 8.0}
    demand = {"s1": 10.0, "s2": 9.0, "s3": 8.0}
    edges = []
    for s in srcs:
        edges.append(Edge(f"{s}-d", s, "d", direct_cap[s]))
        edges.append(Edge(f"{s}-m", s, "m", 6.0))
        edges.append(Edge(f"{s}-n", s, "n", 6.0))
    edges += [Edge("m-d", "m", "d", 7.0), Edge("n-d", "n", "d", 5.0)]
    net = Network(srcs + ("m", "n", "d"), tuple(edges))
    flows = tuple(Flow(s, s, "d", demand[s]) for s in srcs)
    tunnels = []
    for s in srcs:
        tunnels.append(Tunnel(f"{s}:direct", s, (f"{s}-d",)))
        tunnels.append(Tunnel(f"{s}:via-m", s, (f"{s}-m", "m-d")))
        tunnels.append(Tunnel(f"{s}:via-n", s, (f"{s}-n", "n-d")))
    return Instance(net, flows, tuple(tunnels), name="desk")


def desk_scenarios(instance: Instance | None = None) -> ScenarioSet:
    instance = instance or desk_instance()
    sset = make_scenario_set([f for f, _ in DESK_SCENARIOS], [p for _, p in DESK_SCENARIOS],
                             [e.id for e in instance.network.edges], tol=1e-9)
    return build_survival(instance, sset)


def demand_variants(instance: Instance, sset: ScenarioSet, n: int, sigma: float,
                    seed: int) -> list[Sample]:
    """``n`` demand-perturbed copies of one instance sharing its scenario set."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    return [Sample(perturb_demands(instance, sigma, int(s)), sset) for s in seeds]


def split_dataset(samples: Sequence[Sample], val_fraction: float = 0.2
                  ) -> tuple[list[Sample], list[Sample]]:
    n_val = int(round(len(samples) * val_fraction))
    n_val = min(max(n_val, 1), len(samples) - 1) if len(samples) > 1 else 0
    return list(samples[n_val:]), list(samples[:n_val])


def gravity_demands(network: Network, total: float,
                    weights: Mapping[str, float] | None = None,
                    pairs: Sequence[tuple[str, str]] | None = None) -> list[Flow]:
    """D_sd proportional to w_s * w_d, scaled so the demands sum to ``total``.

    Weights default to node degree; pairs default to every ordered pair of
    distinct nodes.
    """
    if total < 0:
        raise ValueError("total demand must be non-negative")
    w = dict(network.degree()) if weights is None else {k: float(v) for k, v in weights.items()}
    if any(v < 0 for v in w.values()):
        raise ValueError("gravity weights must be non-negative")
    if pairs is None:
        pairs = [(s, d) for s in network.nodes for d in network.nodes if s != d]
    raw = np.array([w.get(s, 0.0) * w.get(d, 0.0) for s, d in pairs])
    norm = raw.sum()
    dem = raw * (total / norm) if norm > 0 else np.zeros(len(pairs))
    return [Flow(f"{s}->{d}", s, d, float(v)) for (s, d), v in zip(pairs, dem)]


def synthetic_instance(network: Network, total: float, k_sp: int = 3,
                       weights: Mapping[str, float] | None = None,
                       pairs: Sequence[tuple[str, str]] | None = None,
                       name: str = "synthetic") -> Instance:
    flows = tuple(gravity_demands(network, total, weights, pairs))
    return Instance(network, flows, tuple(generate_tunnels(network, flows, k_sp)), name=name)
