"""Decision-space transforms: gated reservation and the scaling baselines.

Reservations ``y`` live on (tunnel, edge) pairs and are indexed like
``instance.pair_tunnel`` / ``instance.pair_edge``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Instance


@dataclass
class LatentState:
    z: np.ndarray  # (pairs,) contention logits
    w: np.ndarray  # (tunnels,) gates

    @classmethod
    def zeros(cls, instance: Instance) -> "LatentState":
        return cls(np.zeros(instance.n_pairs), np.zeros(instance.n_tunnels))

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.w))):
            raise ValueError("latent state must be finite")


@dataclass
class Recovered:
    x: np.ndarray           # (tunnels,) split ratios b_t / D_f
    b: np.ndarray           # (tunnels,) bottleneck bandwidth
    bottleneck: np.ndarray  # (tunnels,) pair index of the argmin edge


def edge_softmax(logits: np.ndarray, instance: Instance) -> np.ndarray:
    """Softmax of pair logits within each edge, with per-edge max subtraction."""
    perm, starts, _ = instance.edge_groups
    if len(perm) == 0:
        return np.zeros(0)
    a = logits[perm]
    counts = np.diff(np.r_[starts, len(a)])
    a = a - np.repeat(np.maximum.reduceat(a, starts), counts)
    e = np.exp(a)
    y = np.empty_like(logits)
    y[perm] = e / np.repeat(np.add.reduceat(e, starts), counts)
    return y


def edge_softmax_backward(y: np.ndarray, gy: np.ndarray, instance: Instance) -> np.ndarray:
    """Vector-Jacobian product of :func:`edge_softmax`."""
    perm, starts, _ = instance.edge_groups
    if len(perm) == 0:
        return np.zeros(0)
    counts = np.diff(np.r_[starts, len(perm)])
    dot = np.add.reduceat((y * gy)[perm], starts)
    ga = np.empty_like(y)
    ga[perm] = y[perm] * (gy[perm] - np.repeat(dot, counts))
    return ga


def project_gated(state: LatentState, instance: Instance) -> np.ndarray:
    """y[t,e] = softmax over tunnels on e of (z[t,e] + w[t])."""
    return edge_softmax(state.z + state.w[instance.pair_tunnel], instance)


def project_br(state: LatentState, instance: Instance) -> np.ndarray:
    """Per-edge softmax of the contention logits alone; gates are ignored."""
    return edge_softmax(state.z, instance)


def recover_allocation(y: np.ndarray, instance: Instance) -> Recovered:
    """Bottleneck bandwidth b_t = min_e C_e y_te and x_t = b_t / D_f(t).

    Ties for the bottleneck go to the lowest edge index.  Zero-demand flows
    get x = 0.
    """
    if instance.n_tunnels == 0:
        empty = np.zeros(0)
        return Recovered(empty, empty, np.zeros(0, np.intp))
    cy = instance.capacity[instance.pair_edge] * y
    b = np.minimum.reduceat(cy, instance.tunnel_starts)
    order = np.lexsort((instance.pair_edge, cy, instance.pair_tunnel))
    first = np.r_[True, instance.pair_tunnel[order][1:] != instance.pair_tunnel[order][:-1]]
    bottleneck = order[first]
    return Recovered(b * instance.inv_demand, b, bottleneck)


def bottleneck_margin(y: np.ndarray, b: np.ndarray, instance: Instance) -> np.ndarray:
    """m[t,e] = C_e y[t,e] - b_t (zero on the bottleneck edge)."""
    return instance.capacity[instance.pair_edge] * y - b[instance.pair_tunnel]


def edge_loads(x: np.ndarray, instance: Instance) -> np.ndarray:
    """Load per edge: sum over tunnels crossing it of D_f x_t."""
    bw = instance.demand[instance.tunnel_flow] * x
    return np.bincount(instance.pair_edge, weights=bw[instance.pair_tunnel],
                       minlength=instance.n_edges)


def reservation_loads(y: np.ndarray, instance: Instance) -> np.ndarray:
    """Load induced on each edge by the bottleneck bandwidths of a reservation."""
    b = recover_allocation(y, instance).b
    return np.bincount(instance.pair_edge, weights=b[instance.pair_tunnel],
                       minlength=instance.n_edges)


def global_scaling_factor(x: np.ndarray, instance: Instance) -> float:
    if instance.n_edges == 0:
        return 0.0
    return float(np.max(edge_loads(x, instance) / instance.capacity))


def project_global_scaling(x_raw: np.ndarray, instance: Instance) -> np.ndarray:
    """Divide every allocation by gamma_max when some edge is overloaded."""
    x_raw = np.asarray(x_raw, dtype=float)
    gamma = global_scaling_factor(x_raw, instance)
    return x_raw / gamma if gamma > 1.0 else x_raw.copy()


def local_scaling_factors(x: np.ndarray, instance: Instance) -> np.ndarray:
    """gamma_t = max over the tunnel's edges of load_e / C_e (raw loads)."""
    ratio = edge_loads(x, instance) / instance.capacity
    if instance.n_tunnels == 0:
        return np.zeros(0)
    return np.maximum.reduceat(ratio[instance.pair_edge], instance.tunnel_starts)


def project_local_scaling(x_raw: np.ndarray, instance: Instance) -> np.ndarray:
    """Scale each tunnel by its own bottleneck factor; never scales up."""
    x_raw = np.asarray(x_raw, dtype=float)
    return x_raw / np.maximum(1.0, local_scaling_factors(x_raw, instance))


def reservation_from_allocation(x: np.ndarray, instance: Instance) -> np.ndarray:
    """A reservation whose recovered allocation dominates ``x``.

    Each pair reserves D_f x_t / C_e and the spare share of every edge is
    split evenly among its tunnels.  ``x`` must be capacity feasible.
    """
    need = (instance.demand[instance.tunnel_flow] * x)[instance.pair_tunnel] \
        / instance.capacity[instance.pair_edge]
    used = np.bincount(instance.pair_edge, weights=need, minlength=instance.n_edges)
    if np.any(used > 1 + 1e-9):
        raise ValueError("allocation exceeds capacity")
    count = np.bincount(instance.pair_edge, minlength=instance.n_edges)
    spare = np.divide(1.0 - used, count, out=np.zeros(instance.n_edges), where=count > 0)
    return need + spare[instance.pair_edge]
