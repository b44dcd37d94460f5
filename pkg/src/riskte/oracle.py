"""Brute-force and local-search reference optimizers for small instances.

The grid search enumerates per-edge reservation simplices on a regular grid.
Only edges shared by two or more tunnels carry a choice, since a lone
tunnel always reserves the whole edge.  Grid points are visited in
lexicographic order of the concatenated reservation vector, so the first
minimum found is the lexicographically smallest one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .network import Instance
from .reservation import edge_softmax, recover_allocation
from .risk import RiskSpec, flow_losses, loss_weights, objective, objective_from_losses
from .scenarios import ScenarioSet

DEFAULT_CAP = 10_000_000
CHUNK = 8192


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    step: float = 0.05
    refine_iters: int = 200
    refine_lr: float = 0.05
    restarts: int = 0
    seed: int = 0
    cap: int = DEFAULT_CAP
    search: str = "reservation"  # or "gs": raw allocations repaired by global scaling

    def __post_init__(self):
        if not 0.0 < self.step <= 1.0:
            raise ValueError("grid step must lie in (0, 1]")
        if self.search not in ("reservation", "gs"):
            raise ValueError(f"unknown search space {self.search!r}")
        if self.refine_iters < 0 or self.refine_lr <= 0 or self.restarts < 0:
            raise ValueError("invalid refinement settings")

    @property
    def divisions(self) -> int:
        n = round(1.0 / self.step)
        if abs(n * self.step - 1.0) > 1e-9:
            raise ValueError("grid step must divide 1 evenly")
        return n


@dataclass
class OracleResult:
    J: float
    x: np.ndarray
    y: np.ndarray | None
    evaluated: int

    def to_dict(self, spec: RiskSpec | None = None, config: OracleConfig | None = None) -> dict:
        doc = {"J": self.J, "x": [float(v) for v in self.x],
               "y": None if self.y is None else [float(v) for v in self.y],
               "evaluated": self.evaluated}
        if spec is not None:
            doc["spec"] = asdict(spec)
        if config is not None:
            doc["config"] = asdict(config)
        return doc


def save_result(result: OracleResult, path: str | Path, spec: RiskSpec | None = None,
                config: OracleConfig | None = None) -> None:
    Path(path).write_text(json.dumps(result.to_dict(spec, config), indent=1) + "\n")


def load_reference_J(path: str | Path) -> float:
    """J* from an oracle result file or a ``{"J": ...}`` document."""
    doc = json.loads(Path(path).read_text())
    return float(doc["J"] if "J" in doc else doc["J_star"])


def simplex_grid(parts: int, divisions: int) -> np.ndarray:
    """All points of the simplex with coordinates in multiples of 1/divisions, in lex order."""
    out = []

    def rec(prefix, left, k):
        if k == 1:
            out.append(prefix + [left])
            return
        for v in range(left + 1):
            rec(prefix + [v], left - v, k - 1)

    rec([], divisions, parts)
    return np.array(out, dtype=float) / divisions


def grid_size(instance: Instance, step: float) -> int:
    n = OracleConfig(step=step).divisions
    total = 1
    for k in _contested(instance)[1]:
        total *= math.comb(n + k - 1, k - 1)
    return total


def _contested(instance: Instance):
    perm, starts, edges = instance.edge_groups
    counts = np.diff(np.r_[starts, len(perm)])
    groups = [perm[s:s + c] for s, c in zip(starts, counts) if c >= 2]
    return groups, [len(g) for g in groups]


def _batch_objective(y: np.ndarray, instance: Instance, sset: ScenarioSet,
                     spec: RiskSpec) -> tuple[np.ndarray, np.ndarray]:
    cy = y * instance.capacity[instance.pair_edge]
    b = np.minimum.reduceat(cy, instance.tunnel_starts, axis=1)
    x = b * instance.inv_demand
    per_flow = flow_losses(x, sset.alpha, instance)
    return objective_from_losses(per_flow, sset.probs, spec), x


def _check_inputs(instance: Instance, sset: ScenarioSet):
    if sset.alpha is None or sset.alpha.shape[0] != instance.n_tunnels:
        raise ValueError("scenario set has no survival matrix for this instance")


def grid_search(instance: Instance, sset: ScenarioSet, spec: RiskSpec,
                config: OracleConfig = OracleConfig()) -> OracleResult:
    """Global optimum of J over the reservation grid (or the raw-x grid in ``gs`` mode)."""
    _check_inputs(instance, sset)
    if config.search == "gs":
        return _gs_grid_search(instance, sset, spec, config)
    n = config.divisions
    groups, sizes = _contested(instance)
    grids = [simplex_grid(k, n) for k in sizes]
    shape = tuple(len(g) for g in grids)
    total = int(np.prod(shape, dtype=object)) if shape else 1
    if total > config.cap:
        raise OracleError(f"grid has {total} points, above the cap of {config.cap}; "
                          "use a coarser step")
    best_J, best_idx, best_x = math.inf, None, None
    for lo in range(0, total, CHUNK):
        idx = np.arange(lo, min(lo + CHUNK, total))
        y = np.ones((len(idx), instance.n_pairs))
        if shape:
            coords = np.unravel_index(idx, shape)
            for g, grid, c in zip(groups, grids, coords):
                y[:, g] = grid[c]
        J, x = _batch_objective(y, instance, sset, spec)
        i = int(np.argmin(J))
        if J[i] < best_J:
            best_J, best_idx, best_x = float(J[i]), int(idx[i]), x[i].copy()
            best_y = y[i].copy()
    return OracleResult(best_J, best_x, best_y, total)


def _gs_grid_search(instance: Instance, sset: ScenarioSet, spec: RiskSpec,
                    config: OracleConfig) -> OracleResult:
    n = config.divisions
    T = instance.n_tunnels
    total = (n + 1) ** T
    if total > config.cap:
        raise OracleError(f"grid has {total} points, above the cap of {config.cap}; "
                          "use a coarser step")
    levels = np.arange(n + 1) / n
    dem_t = instance.demand[instance.tunnel_flow]
    best_J, best_x = math.inf, None
    for lo in range(0, total, CHUNK):
        idx = np.arange(lo, min(lo + CHUNK, total))
        x_raw = levels[np.stack(np.unravel_index(idx, (n + 1,) * T), axis=1)] if T \
            else np.zeros((len(idx), 0))
        bw = (x_raw * dem_t)[:, instance.pair_tunnel]
        loads = np.zeros((len(idx), instance.n_edges))
        for p, e in enumerate(instance.pair_edge):
            loads[:, e] += bw[:, p]
        gamma = (loads / instance.capacity).max(axis=1) if instance.n_edges else np.zeros(len(idx))
        x = x_raw / np.maximum(gamma, 1.0)[:, None]
        J = objective_from_losses(flow_losses(x, sset.alpha, instance), sset.probs, spec)
        i = int(np.argmin(J))
        if J[i] < best_J:
            best_J, best_x = float(J[i]), x[i].copy()
    return OracleResult(best_J, best_x, None, total)


# -- local refinement -------------------------------------------------------------


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def project_edges(y: np.ndarray, instance: Instance) -> np.ndarray:
    out = np.empty_like(y)
    perm, starts, _ = instance.edge_groups
    bounds = np.r_[starts, len(perm)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        g = perm[a:b]
        out[g] = project_simplex(y[g])
    return out


def reservation_objective(y: np.ndarray, instance: Instance, sset: ScenarioSet,
                          spec: RiskSpec) -> float:
    return objective(recover_allocation(y, instance).x, sset, spec, instance)


def reservation_subgradient(y: np.ndarray, instance: Instance, sset: ScenarioSet,
                            spec: RiskSpec) -> tuple[float, np.ndarray]:
    """J(y) and a subgradient with masks fixed and min/max(0,.) routed as in training."""
    rec = recover_allocation(y, instance)
    served = instance.flow_tunnel_matrix @ (rec.x[:, None] * sset.alpha)
    slack = instance.need[:, None] - served
    per_flow = np.maximum(0.0, slack)
    J = float(objective_from_losses(per_flow, sset.probs, spec))
    c = loss_weights(spec, per_flow, sset.probs)
    gl = c if spec.granularity == "flow" else np.broadcast_to(c / max(instance.n_flows, 1),
                                                              per_flow.shape)
    gserved = -gl * (slack > 0)
    gx = (gserved[instance.tunnel_flow] * sset.alpha).sum(axis=1)
    gy = np.zeros(instance.n_pairs)
    gy[rec.bottleneck] = gx * instance.inv_demand * instance.capacity[
        instance.pair_edge[rec.bottleneck]]
    return J, gy


def subgradient_refine(start: np.ndarray, instance: Instance, sset: ScenarioSet,
                       spec: RiskSpec, config: OracleConfig = OracleConfig()) -> OracleResult:
    """Projected subgradient descent with backtracking from ``start`` and random restarts.

    Only improving steps are accepted, so J never increases from the
    starting point's value.
    """
    _check_inputs(instance, sset)
    y0 = np.asarray(start, dtype=float)
    if y0.shape != (instance.n_pairs,):
        raise ValueError("start must be a reservation vector")
    best = _descend(y0, instance, sset, spec, config)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.restarts):
        y = edge_softmax(rng.standard_normal(instance.n_pairs), instance)
        cand = _descend(y, instance, sset, spec, config)
        if cand.J < best.J:
            best = cand
    return best


def _descend(y: np.ndarray, instance, sset, spec, config) -> OracleResult:
    J, g = reservation_subgradient(y, instance, sset, spec)
    lr = config.refine_lr
    evals = 1
    for _ in range(config.refine_iters):
        if not np.any(g):
            break
        accepted = False
        step = lr
        while step > 1e-10:
            cand = project_edges(y - step * g, instance)
            Jc, gc = reservation_subgradient(cand, instance, sset, spec)
            evals += 1
            if Jc < J:
                y, J, g, accepted = cand, Jc, gc, True
                lr = min(step * 2.0, 1.0)
                break
            step *= 0.5
        if not accepted:
            break
    return OracleResult(J, recover_allocation(y, instance).x, y, evals)
