"""Per-(tunnel, edge, scenario) feature tuples fed to the update policy."""

from __future__ import annotations

import numpy as np

from .network import Instance
from .scenarios import ScenarioSet

FEATURES = ("alpha", "flow_loss", "scenario_loss", "split", "margin",
            "capacity_norm", "demand_norm", "share")
SCALING_FEATURES = ("alpha", "flow_loss", "scenario_loss", "split", "demand_norm")


def capacity_norm(instance: Instance) -> np.ndarray:
    c = instance.capacity
    return c / c.max() if c.size else c


def demand_norm(instance: Instance) -> np.ndarray:
    d = instance.demand
    if d.size == 0 or d.max() <= 0:
        return np.zeros_like(d)
    return d / d.max()


def feature_tensor(y: np.ndarray, x: np.ndarray, margin: np.ndarray, per_flow: np.ndarray,
                   per_scenario: np.ndarray, alpha: np.ndarray, instance: Instance,
                   normalize_margin: bool = False) -> np.ndarray:
    """Stack the eight features for every pair and scenario: shape (P, N, 8)."""
    pt, pe = instance.pair_tunnel, instance.pair_edge
    pf = instance.tunnel_flow[pt]
    n_pairs, n = len(pt), alpha.shape[1]
    m = margin / instance.capacity[pe] if normalize_margin else margin
    s = np.empty((n_pairs, n, 8))
    s[:, :, 0] = alpha[pt]
    s[:, :, 1] = per_flow[pf]
    s[:, :, 2] = per_scenario[None, :]
    s[:, :, 3] = x[pt][:, None]
    s[:, :, 4] = m[:, None]
    s[:, :, 5] = capacity_norm(instance)[pe][:, None]
    s[:, :, 6] = demand_norm(instance)[pf][:, None]
    s[:, :, 7] = y[:, None]
    return s


def scaling_feature_tensor(x: np.ndarray, per_flow: np.ndarray, per_scenario: np.ndarray,
                           alpha: np.ndarray, instance: Instance) -> np.ndarray:
    """Five tunnel-level features for the scaling baselines: shape (T, N, 5)."""
    tf = instance.tunnel_flow
    s = np.empty((instance.n_tunnels, alpha.shape[1], 5))
    s[:, :, 0] = alpha
    s[:, :, 1] = per_flow[tf]
    s[:, :, 2] = per_scenario[None, :]
    s[:, :, 3] = x[:, None]
    s[:, :, 4] = demand_norm(instance)[tf][:, None]
    return s


def extract_features(y: np.ndarray, x: np.ndarray, margin: np.ndarray, per_flow: np.ndarray,
                     per_scenario: np.ndarray, sset: ScenarioSet, instance: Instance,
                     q: int, normalize_margin: bool = False) -> dict[tuple[str, str], np.ndarray]:
    """Feature tuple of every (tunnel id, edge id) under scenario ``q``."""
    s = feature_tensor(y, x, margin, per_flow, per_scenario, sset.alpha, instance,
                       normalize_margin=normalize_margin)[:, q, :]
    edges = instance.network.edges
    return {(instance.tunnels[t].id, edges[e].id): s[p]
            for p, (t, e) in enumerate(zip(instance.pair_tunnel, instance.pair_edge))}
