"""Topologies, demands and candidate tunnels.

An :class:`Instance` bundles a directed :class:`Network`, the flows routed
over it and the candidate tunnels of every flow.  On construction it builds
the flat index arrays used by the numerical code: every (tunnel, edge) pair
gets a position ``p`` and the pairs of one tunnel are contiguous, in path
order.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class InstanceError(ValueError):
    """Raised when a network, flow or tunnel description is invalid."""


@dataclass(frozen=True)
class Edge:
    id: str
    src: str
    dst: str
    capacity: float


@dataclass(frozen=True)
class Flow:
    id: str
    src: str
    dst: str
    demand: float


@dataclass(frozen=True)
class Tunnel:
    id: str
    flow: str
    edges: tuple[str, ...]


@dataclass(frozen=True)
class Network:
    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise InstanceError("duplicate node id")
        known = set(self.nodes)
        seen = set()
        for e in self.edges:
            if e.id in seen:
                raise InstanceError(f"duplicate edge id {e.id!r}")
            seen.add(e.id)
            if e.src not in known or e.dst not in known:
                raise InstanceError(f"edge {e.id!r} references an unknown node")
            if e.src == e.dst:
                raise InstanceError(f"edge {e.id!r} is a self loop")
            if not np.isfinite(e.capacity) or e.capacity <= 0:
                raise InstanceError(f"edge {e.id!r} must have a positive capacity")

    @cached_property
    def edge_index(self) -> dict[str, int]:
        return {e.id: i for i, e in enumerate(self.edges)}

    @cached_property
    def out_edges(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {n: [] for n in self.nodes}
        for i, e in enumerate(self.edges):
            out[e.src].append(i)
        return out

    @property
    def capacity(self) -> np.ndarray:
        return np.array([e.capacity for e in self.edges], dtype=float)

    def degree(self) -> dict[str, int]:
        deg = {n: 0 for n in self.nodes}
        for e in self.edges:
            deg[e.src] += 1
            deg[e.dst] += 1
        return deg


@dataclass(frozen=True)
class Instance:
    """Network, flows and candidate tunnels; immutable once built."""

    network: Network
    flows: tuple[Flow, ...]
    tunnels: tuple[Tunnel, ...]
    name: str = field(default="instance", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))
        object.__setattr__(self, "tunnels", tuple(self.tunnels))
        nodes = set(self.network.nodes)
        pairs = set()
        fids = set()
        for f in self.flows:
            if f.id in fids:
                raise InstanceError(f"duplicate flow id {f.id!r}")
            fids.add(f.id)
            if f.src not in nodes or f.dst not in nodes:
                raise InstanceError(f"flow {f.id!r} references an unknown node")
            if f.src == f.dst:
                raise InstanceError(f"flow {f.id!r} has identical endpoints")
            if (f.src, f.dst) in pairs:
                raise InstanceError(f"duplicate flow pair ({f.src}, {f.dst})")
            pairs.add((f.src, f.dst))
            if not np.isfinite(f.demand) or f.demand < 0:
                raise InstanceError(f"flow {f.id!r} has a negative demand")
        flows = {f.id: f for f in self.flows}
        eidx = self.network.edge_index
        tids = set()
        for t in self.tunnels:
            if t.id in tids:
                raise InstanceError(f"duplicate tunnel id {t.id!r}")
            tids.add(t.id)
            if t.flow not in flows:
                raise InstanceError(f"tunnel {t.id!r} references unknown flow {t.flow!r}")
            if not t.edges:
                raise InstanceError(f"tunnel {t.id!r} has an empty path")
            for eid in t.edges:
                if eid not in eidx:
                    raise InstanceError(f"tunnel {t.id!r} references unknown edge {eid!r}")
            f = flows[t.flow]
            path = [self.network.edges[eidx[eid]] for eid in t.edges]
            if path[0].src != f.src or path[-1].dst != f.dst:
                raise InstanceError(f"tunnel {t.id!r} does not join {f.src} to {f.dst}")
            visited = [path[0].src]
            for a, b in zip(path, path[1:]):
                if a.dst != b.src:
                    raise InstanceError(f"tunnel {t.id!r} is not a connected path")
            visited += [e.dst for e in path]
            if len(set(visited)) != len(visited):
                raise InstanceError(f"tunnel {t.id!r} revisits a node")

    # -- sizes ---------------------------------------------------------------

    @property
    def n_edges(self) -> int:
        return len(self.network.edges)

    @property
    def n_flows(self) -> int:
        return len(self.flows)

    @property
    def n_tunnels(self) -> int:
        return len(self.tunnels)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_tunnel)

    # -- index arrays --------------------------------------------------------

    @cached_property
    def flow_index(self) -> dict[str, int]:
        return {f.id: i for i, f in enumerate(self.flows)}

    @cached_property
    def tunnel_index(self) -> dict[str, int]:
        return {t.id: i for i, t in enumerate(self.tunnels)}

    @cached_property
    def capacity(self) -> np.ndarray:
        return self.network.capacity

    @cached_property
    def demand(self) -> np.ndarray:
        return np.array([f.demand for f in self.flows], dtype=float)

    @cached_property
    def tunnel_flow(self) -> np.ndarray:
        return np.array([self.flow_index[t.flow] for t in self.tunnels], dtype=np.intp)

    @cached_property
    def tunnel_hops(self) -> np.ndarray:
        return np.array([len(t.edges) for t in self.tunnels], dtype=np.intp)

    @cached_property
    def pair_tunnel(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_tunnels, dtype=np.intp), self.tunnel_hops)

    @cached_property
    def pair_edge(self) -> np.ndarray:
        eidx = self.network.edge_index
        return np.array([eidx[e] for t in self.tunnels for e in t.edges], dtype=np.intp)

    @cached_property
    def tunnel_starts(self) -> np.ndarray:
        """Offset of each tunnel's first pair (tunnels are never empty)."""
        return np.concatenate([[0], np.cumsum(self.tunnel_hops)[:-1]]).astype(np.intp)

    @cached_property
    def edge_groups(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pair permutation grouping pairs by edge, segment starts, edge of each segment)."""
        perm = np.argsort(self.pair_edge, kind="stable")
        sorted_edges = self.pair_edge[perm]
        if len(perm) == 0:
            return perm, np.zeros(0, np.intp), np.zeros(0, np.intp)
        starts = np.flatnonzero(np.r_[True, sorted_edges[1:] != sorted_edges[:-1]])
        return perm, starts, sorted_edges[starts]

    @cached_property
    def flow_tunnel_matrix(self) -> np.ndarray:
        """Incidence matrix of shape (flows, tunnels)."""
        a = np.zeros((self.n_flows, self.n_tunnels))
        a[self.tunnel_flow, np.arange(self.n_tunnels)] = 1.0
        return a

    @cached_property
    def need(self) -> np.ndarray:
        """1 for flows with positive demand, 0 otherwise; a zero-demand flow never loses."""
        return (self.demand > 0).astype(float)

    @cached_property
    def inv_demand(self) -> np.ndarray:
        """1/D_f per tunnel, 0 where the owning flow has zero demand."""
        d = self.demand[self.tunnel_flow]
        out = np.zeros_like(d)
        np.divide(1.0, d, out=out, where=d > 0)
        return out

    @cached_property
    def edge_tunnels(self) -> dict[str, frozenset[str]]:
        out: dict[str, set[str]] = {e.id: set() for e in self.network.edges}
        for t in self.tunnels:
            for e in t.edges:
                out[e].add(t.id)
        return {k: frozenset(v) for k, v in out.items()}

    # -- derived instances ---------------------------------------------------

    def with_demands(self, demands: Sequence[float]) -> "Instance":
        if len(demands) != self.n_flows:
            raise InstanceError("demand vector length does not match the flow count")
        flows = tuple(replace(f, demand=float(d)) for f, d in zip(self.flows, demands))
        return Instance(self.network, flows, self.tunnels, name=self.name)

    def with_tunnels(self, tunnels: Iterable[Tunnel]) -> "Instance":
        return Instance(self.network, self.flows, tuple(tunnels), name=self.name)


def tunnels_on_edge(instance: Instance, edge_id: str) -> frozenset[str]:
    """Ids of the tunnels whose path contains ``edge_id``."""
    try:
        return instance.edge_tunnels[edge_id]
    except KeyError:
        raise InstanceError(f"unknown edge {edge_id!r}") from None


# -- k shortest paths ---------------------------------------------------------


def _shortest_path(network: Network, src: str, dst: str,
                   banned_edges: set[int], banned_nodes: set[str]) -> tuple[int, ...] | None:
    """Fewest-hop path; among those the lexicographically smallest edge-index sequence."""
    edges = network.edges
    into: dict[str, list[int]] = {n: [] for n in network.nodes}
    for i, e in enumerate(edges):
        if i not in banned_edges and e.src not in banned_nodes and e.dst not in banned_nodes:
            into[e.dst].append(i)
    if src in banned_nodes or dst in banned_nodes:
        return None
    dist = {dst: 0}
    queue = deque([dst])
    while queue:
        node = queue.popleft()
        for i in into[node]:
            u = edges[i].src
            if u not in dist:
                dist[u] = dist[node] + 1
                queue.append(u)
    if src not in dist:
        return None
    path = []
    node = src
    while node != dst:
        for i in network.out_edges[node]:
            e = edges[i]
            if (i not in banned_edges and e.dst not in banned_nodes
                    and dist.get(e.dst, -1) == dist[node] - 1):
                path.append(i)
                node = e.dst
                break
    return tuple(path)


def k_shortest_paths(network: Network, src: str, dst: str, k: int) -> list[tuple[int, ...]]:
    """Yen's algorithm with hop count as length; returns edge-index paths."""
    first = _shortest_path(network, src, dst, set(), set())
    if first is None:
        return []
    accepted = [first]
    candidates: list[tuple[int, tuple[int, ...]]] = []
    queued = {first}
    edges = network.edges
    while len(accepted) < k:
        prev = accepted[-1]
        nodes = [src] + [edges[i].dst for i in prev]
        for i in range(len(prev)):
            root = prev[:i]
            banned_edges = {p[i] for p in accepted if len(p) > i and p[:i] == root}
            spur = _shortest_path(network, nodes[i], dst, banned_edges, set(nodes[:i]))
            if spur is None:
                continue
            cand = root + spur
            if cand not in queued:
                queued.add(cand)
                heapq.heappush(candidates, (len(cand), cand))
        if not candidates:
            break
        accepted.append(heapq.heappop(candidates)[1])
    return accepted


def generate_tunnels(network: Network, flows: Sequence[Flow], k_sp: int) -> list[Tunnel]:
    """Up to ``k_sp`` loop-free fewest-hop tunnels per flow, in flow order.

    Ties between equal-length paths go to the smaller edge-index sequence.
    """
    if k_sp < 1:
        raise ValueError("k_sp must be positive")
    tunnels = []
    for f in flows:
        paths = k_shortest_paths(network, f.src, f.dst, k_sp)
        if not paths:
            raise InstanceError(f"no path from {f.src} to {f.dst} for flow {f.id!r}")
        for j, p in enumerate(paths):
            tunnels.append(Tunnel(f"{f.id}#{j}", f.id, tuple(network.edges[i].id for i in p)))
    return tunnels


# -- synthetic topologies ----------------------------------------------------


def complete_graph(n: int, capacity: float = 10.0) -> Network:
    nodes = tuple(f"n{i}" for i in range(n))
    edges = []
    for a in nodes:
        for b in nodes:
            if a != b:
                edges.append(Edge(f"e{len(edges)}", a, b, capacity))
    return Network(nodes, tuple(edges))


def ring_with_chords(n: int, chords: Sequence[tuple[int, int]] = (),
                     capacity: float = 10.0) -> Network:
    """Bidirectional ring on ``n`` nodes plus bidirectional chords."""
    links = [(i, (i + 1) % n) for i in range(n)] + [tuple(c) for c in chords]
    return _bidirectional(n, links, capacity)


def grid_graph(rows: int, cols: int, capacity: float = 10.0) -> Network:
    links = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                links.append((i, i + 1))
            if r + 1 < rows:
                links.append((i, i + cols))
    return _bidirectional(rows * cols, links, capacity)


def _bidirectional(n: int, links, capacity: float) -> Network:
    nodes = tuple(f"n{i}" for i in range(n))
    edges = []
    for a, b in links:
        edges.append(Edge(f"e{len(edges)}", nodes[a], nodes[b], capacity))
        edges.append(Edge(f"e{len(edges)}", nodes[b], nodes[a], capacity))
    return Network(nodes, tuple(edges))


# -- file format ---------------------------------------------------------------


def instance_from_dict(data: dict, k_sp: int | None = None, name: str = "instance") -> Instance:
    """Build an instance from the JSON document layout.

    ``tunnels`` is optional; without it tunnels come from k-shortest paths
    (``k_sp`` argument, else the document's ``k_sp`` key, else 3).  With
    ``"directed": false`` every edge becomes two directed edges ``<id>:fwd``
    and ``<id>:rev`` of the same capacity.
    """
    try:
        nodes = tuple(str(n) for n in data["nodes"])
        raw_edges = data["edges"]
        raw_flows = data.get("flows", [])
        edges = []
        for e in raw_edges:
            eid, src, dst, cap = str(e["id"]), str(e["src"]), str(e["dst"]), float(e["capacity"])
            if data.get("directed", True):
                edges.append(Edge(eid, src, dst, cap))
            else:
                edges.append(Edge(f"{eid}:fwd", src, dst, cap))
                edges.append(Edge(f"{eid}:rev", dst, src, cap))
        flows = tuple(Flow(str(f["id"]), str(f["src"]), str(f["dst"]), float(f["demand"]))
                      for f in raw_flows)
        network = Network(nodes, tuple(edges))
        if "tunnels" in data:
            tunnels = tuple(Tunnel(str(t["id"]), str(t["flow"]), tuple(str(x) for x in t["edges"]))
                            for t in data["tunnels"])
        else:
            k = k_sp if k_sp is not None else int(data.get("k_sp", 3))
            tunnels = tuple(generate_tunnels(network, flows, k))
    except (KeyError, TypeError) as exc:
        raise InstanceError(f"malformed instance document: {exc}") from exc
    return Instance(network, flows, tunnels, name=str(data.get("name", name)))


def instance_to_dict(instance: Instance) -> dict:
    net = instance.network
    return {
        "name": instance.name,
        "nodes": list(net.nodes),
        "edges": [{"id": e.id, "src": e.src, "dst": e.dst, "capacity": e.capacity} for e in net.edges],
        "flows": [{"id": f.id, "src": f.src, "dst": f.dst, "demand": f.demand} for f in instance.flows],
        "tunnels": [{"id": t.id, "flow": t.flow, "edges": list(t.edges)} for t in instance.tunnels],
    }


def load_instance(path: str | Path, k_sp: int | None = None) -> Instance:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError(f"{path}: not valid JSON ({exc})") from exc
    return instance_from_dict(data, k_sp=k_sp, name=path.stem.split(".")[0])


def save_instance(instance: Instance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(instance_to_dict(instance), indent=1) + "\n")
