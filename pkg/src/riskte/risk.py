"""Sort-and-Select risk objectives over per-flow scenario losses.

Every function here accepts arbitrary leading batch dimensions; the last
axis always indexes scenarios in canonical order.  Sorting is a stable
descending sort, so tied losses keep ascending scenario order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Instance
from .scenarios import ScenarioSet

KINDS = ("robust", "cvar", "quantile", "expectation")
GRANULARITIES = ("scenario", "flow")
# absorbs round-off when a cumulative probability lands exactly on 1 - beta
GAMMA_TOL = 1e-12


@dataclass(frozen=True)
class RiskSpec:
    kind: str = "expectation"
    beta: float = 0.95
    granularity: str | None = None
    exact_cvar: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.granularity is None:
            object.__setattr__(self, "granularity", "flow" if self.kind == "quantile" else "scenario")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.exact_cvar and self.kind != "cvar":
            raise ValueError("exact_cvar only applies to the cvar objective")


@dataclass
class LossTable:
    per_flow: np.ndarray      # (..., F, N)
    per_scenario: np.ndarray  # (..., N)


@dataclass
class SortedLoss:
    order: np.ndarray  # scenario index at each rank
    v: np.ndarray      # sorted losses, descending
    pi: np.ndarray     # probability at each rank
    gamma: np.ndarray  # cumulative probability

    @property
    def delta(self) -> np.ndarray:
        """Permutation tensor: delta[..., q, r] = 1 iff scenario q sits at rank r."""
        n = self.order.shape[-1]
        return (self.order[..., None, :] == np.arange(n)[:, None]).astype(float)

    @property
    def rank_of(self) -> np.ndarray:
        return np.argsort(self.order, axis=-1)


def flow_losses(x: np.ndarray, alpha: np.ndarray, instance: Instance) -> np.ndarray:
    """l[f, q] = max(0, 1 - sum_t x_t alpha[t, q]) for x of shape (..., T).

    Flows with zero demand have nothing to lose and get l = 0.
    """
    served = np.einsum("ft,...t,tq->...fq", instance.flow_tunnel_matrix, x, alpha)
    return np.maximum(0.0, instance.need[:, None] - served)


def compute_losses(x: np.ndarray, sset: ScenarioSet, instance: Instance) -> LossTable:
    per_flow = flow_losses(np.asarray(x, dtype=float), sset.alpha, instance)
    if instance.n_flows == 0:
        return LossTable(per_flow, np.zeros(per_flow.shape[:-2] + (sset.n,)))
    return LossTable(per_flow, per_flow.mean(axis=-2))


def sort_losses(losses: np.ndarray, probs: np.ndarray) -> SortedLoss:
    losses = np.asarray(losses, dtype=float)
    order = np.argsort(-losses, axis=-1, kind="stable")
    v = np.take_along_axis(losses, order, axis=-1)
    pi = np.asarray(probs, dtype=float)[order]
    return SortedLoss(order, v, pi, np.cumsum(pi, axis=-1))


def risk_mask(spec: RiskSpec, sl: SortedLoss) -> np.ndarray:
    """Rank selection mask I[..., r].

    Fractional only in ``exact_cvar`` mode, where the rank straddling the
    1 - beta boundary gets weight (1 - beta - Gamma_{r-1}) / pi_r.
    """
    gamma = sl.gamma
    if spec.kind == "expectation":
        return np.ones_like(gamma)
    mask = np.zeros_like(gamma)
    if spec.kind == "robust":
        mask[..., 0] = 1.0
        return mask
    tail = 1.0 - spec.beta
    prev = np.concatenate([np.zeros_like(gamma[..., :1]), gamma[..., :-1]], axis=-1)
    if spec.kind == "cvar":
        mask = (gamma <= tail + GAMMA_TOL).astype(float)
        if spec.exact_cvar:
            boundary = (prev < tail - GAMMA_TOL) & (gamma > tail + GAMMA_TOL)
            frac = np.divide(tail - prev, sl.pi, out=np.zeros_like(gamma), where=sl.pi > 0)
            mask = np.where(boundary, frac, mask)
        return mask
    # quantile: the single rank whose cumulative mass first reaches 1 - beta
    return ((prev < tail - GAMMA_TOL) & (gamma >= tail - GAMMA_TOL)).astype(float)


def rank_weights(spec: RiskSpec, sl: SortedLoss) -> np.ndarray:
    """Weight of each rank in J.  Robust counts the worst rank with weight 1."""
    mask = risk_mask(spec, sl)
    if spec.kind == "robust":
        return mask
    return sl.pi * mask


def _unit_losses(spec: RiskSpec, per_flow: np.ndarray) -> np.ndarray:
    if spec.granularity == "flow":
        return per_flow
    if per_flow.shape[-2] == 0:
        return np.zeros(per_flow.shape[:-2] + per_flow.shape[-1:])
    return per_flow.mean(axis=-2)


def objective_from_losses(per_flow: np.ndarray, probs: np.ndarray, spec: RiskSpec) -> np.ndarray:
    """J for loss tables of shape (..., F, N); returns shape (...)."""
    units = _unit_losses(spec, per_flow)
    sl = sort_losses(units, probs)
    contrib = (rank_weights(spec, sl) * sl.v).sum(axis=-1)
    return contrib.sum(axis=-1) if spec.granularity == "flow" else contrib


def objective_for_order(per_flow: np.ndarray, probs: np.ndarray, spec: RiskSpec,
                        order: np.ndarray) -> float:
    """J with the rank order given (e.g. by a solver) instead of the stable sort.

    ``order`` holds scenario indices by rank, shape (N,) for scenario
    granularity or (F, N) for flow granularity.  Among tied losses any order
    is a valid sort, and the cvar and quantile masks depend on which one.
    """
    units = _unit_losses(spec, per_flow)
    order = np.asarray(order)
    v = np.take_along_axis(units, order, axis=-1)
    pi = np.asarray(probs, dtype=float)[order]
    sl = SortedLoss(order, v, pi, np.cumsum(pi, axis=-1))
    contrib = (rank_weights(spec, sl) * sl.v).sum(axis=-1)
    return float(contrib.sum() if spec.granularity == "flow" else contrib)


def objective(x: np.ndarray, sset: ScenarioSet, spec: RiskSpec, instance: Instance) -> float:
    """Unified objective: sum over masked ranks of pi * I * v."""
    per_flow = flow_losses(np.asarray(x, dtype=float), sset.alpha, instance)
    return float(objective_from_losses(per_flow, sset.probs, spec))


def _to_scenarios(sl: SortedLoss, by_rank: np.ndarray) -> np.ndarray:
    out = np.empty_like(by_rank)
    np.put_along_axis(out, sl.order, by_rank, axis=-1)
    return out


def scenario_mask(spec: RiskSpec, per_flow: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """The rank mask mapped back to scenario ids: (N,) or (F, N) per granularity."""
    sl = sort_losses(_unit_losses(spec, per_flow), probs)
    return _to_scenarios(sl, risk_mask(spec, sl))


def risk_weights(spec: RiskSpec, per_flow: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """rho = p * m, per scenario (scenario granularity) or per (flow, scenario)."""
    return np.asarray(probs) * scenario_mask(spec, per_flow, probs)


def loss_weights(spec: RiskSpec, per_flow: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Weights c with J = sum c * units, i.e. dJ/d(unit losses) with masks held fixed."""
    sl = sort_losses(_unit_losses(spec, per_flow), probs)
    return _to_scenarios(sl, rank_weights(spec, sl))
