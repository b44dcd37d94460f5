"""Probabilistic failure scenarios, tunnel survival and demand noise."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .network import Flow, Instance, InstanceError, Network

DEFAULT_SCENARIO_CAP = 100_000
PROB_CLAMP = 1e-12


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class FailureModel:
    """Independent per-edge failures with Weibull-distributed probabilities.

    The cutoff is ``cutoff_c * 1e-5`` and the Weibull scale ``weibull_s * 1e-3``.
    """

    cutoff_c: float = 50.0
    weibull_s: float = 2.0
    shape: float = 0.8
    max_failures: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.cutoff_c <= 0 or self.weibull_s <= 0 or self.shape <= 0:
            raise ValueError("cutoff, Weibull scale and shape must be positive")
        if self.max_failures < 0:
            raise ValueError("max_failures must be non-negative")

    @property
    def cutoff(self) -> float:
        return self.cutoff_c * 1e-5

    @property
    def scale(self) -> float:
        return self.weibull_s * 1e-3


@dataclass(frozen=True)
class ScenarioSet:
    """Scenarios in canonical order.

    Canonical order is descending probability, ties broken by the failed
    edge positions compared lexicographically.  Position ``q`` in every array
    is the scenario's dense id; ``labels`` keeps the ids a file used.
    ``alpha`` has shape (tunnels, scenarios) once :func:`build_survival` ran.
    """

    failed: tuple[tuple[str, ...], ...]
    probs: np.ndarray
    raw_probs: np.ndarray
    labels: tuple[str, ...]
    alpha: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.failed)

    def index_of(self, failed_edges: Sequence[str]) -> int:
        key = set(failed_edges)
        for q, f in enumerate(self.failed):
            if set(f) == key:
                return q
        raise KeyError(tuple(failed_edges))


def make_scenario_set(failed_sets: Sequence[Sequence[str]], probs: Sequence[float],
                      edge_order: Sequence[str], labels: Sequence[str] | None = None,
                      tol: float | None = None) -> ScenarioSet:
    """Canonicalize, validate and renormalize a list of scenarios.

    ``tol`` bounds how far the given probabilities may sum from 1 before
    renormalization; ``None`` skips the check (pruned enumerations).
    """
    pos = {e: i for i, e in enumerate(edge_order)}
    raw = np.asarray(probs, dtype=float)
    if len(failed_sets) != len(raw) or len(raw) == 0:
        raise ScenarioError("need one probability per scenario and at least one scenario")
    if np.any(~np.isfinite(raw)) or np.any(raw <= 0) or np.any(raw > 1):
        raise ScenarioError("scenario probabilities must lie in (0, 1]")
    keys = []
    for fs in failed_sets:
        for e in fs:
            if e not in pos:
                raise ScenarioError(f"scenario fails unknown edge {e!r}")
        idx = tuple(sorted({pos[e] for e in fs}))
        if len(idx) != len(fs):
            raise ScenarioError("scenario lists an edge twice")
        keys.append(idx)
    if len(set(keys)) != len(keys):
        raise ScenarioError("duplicate failed-edge set")
    if () not in keys:
        raise ScenarioError("the nominal (no-failure) scenario is missing")
    total = math.fsum(raw)
    if tol is not None and abs(total - 1.0) > tol:
        raise ScenarioError(f"scenario probabilities sum to {total}, not 1")
    labels = [str(i) for i in range(len(raw))] if labels is None else [str(x) for x in labels]
    order = sorted(range(len(raw)), key=lambda i: (-raw[i], keys[i]))
    raw_sorted = raw[order]
    probs_out = raw_sorted / total
    return ScenarioSet(
        failed=tuple(tuple(edge_order[j] for j in keys[i]) for i in order),
        probs=probs_out,
        raw_probs=raw_sorted,
        labels=tuple(labels[i] for i in order),
    )


def sample_link_probs(network: Network, model: FailureModel) -> dict[str, float]:
    """Per-edge failure probabilities from a Weibull law truncated to (0, 0.5].

    One uniform draw per edge (network order) is mapped through the inverse
    CDF of the truncated law.
    """
    rng = np.random.default_rng(model.seed)
    u = 1.0 - rng.random(len(network.edges))
    lam, k = model.scale, model.shape
    mass = -math.expm1(-((0.5 / lam) ** k))
    p = lam * (-np.log1p(-u * mass)) ** (1.0 / k)
    p = np.clip(p, PROB_CLAMP, 0.5)
    return {e.id: float(v) for e, v in zip(network.edges, p)}


def enumerate_scenarios(probs: Mapping[str, float], cutoff: float, max_failures: int,
                        cap: int = DEFAULT_SCENARIO_CAP) -> ScenarioSet:
    """All failure sets of size <= ``max_failures`` whose probability reaches ``cutoff``.

    The nominal scenario is always kept.  Probabilities are clamped to
    [1e-12, 1 - 1e-12] before use and renormalized after pruning.
    """
    edges = list(probs)
    p = np.clip(np.array([probs[e] for e in edges], dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    nominal = float(np.prod(1.0 - p))
    ratio = p / (1.0 - p)
    # best[i]: largest factor any extension using edges i.. can contribute
    best = np.ones(len(edges) + 1)
    for i in range(len(edges) - 1, -1, -1):
        best[i] = best[i + 1] * max(1.0, ratio[i])

    found: list[tuple[tuple[int, ...], float]] = [((), nominal)]

    def visit(start: int, chosen: tuple[int, ...], prob: float):
        if len(chosen) == max_failures:
            return
        for i in range(start, len(edges)):
            q = prob * ratio[i]
            if q >= cutoff:
                found.append((chosen + (i,), q))
                if len(found) > cap:
                    raise ScenarioError(
                        f"more than {cap} scenarios above the cutoff; use a larger cutoff")
            if q * best[i + 1] >= cutoff:
                visit(i + 1, chosen + (i,), q)

    visit(0, (), nominal)
    return make_scenario_set([[edges[i] for i in fs] for fs, _ in found],
                             [q for _, q in found], edges)


def generate_scenarios(network: Network, model: FailureModel,
                       cap: int = DEFAULT_SCENARIO_CAP) -> ScenarioSet:
    probs = sample_link_probs(network, model)
    return enumerate_scenarios(probs, model.cutoff, model.max_failures, cap=cap)


def build_survival(instance: Instance, sset: ScenarioSet) -> ScenarioSet:
    """Attach alpha[t, q] = 1 iff tunnel t avoids every failed edge of q."""
    eidx = instance.network.edge_index
    fail = np.zeros((instance.n_edges, sset.n), dtype=bool)
    for q, fs in enumerate(sset.failed):
        for e in fs:
            if e not in eidx:
                raise ScenarioError(f"scenario {sset.labels[q]} fails unknown edge {e!r}")
            fail[eidx[e], q] = True
    if instance.n_tunnels == 0:
        return replace(sset, alpha=np.ones((0, sset.n)))
    hit = np.add.reduceat(fail[instance.pair_edge].astype(np.int64), instance.tunnel_starts, axis=0)
    return replace(sset, alpha=(hit == 0).astype(float))


def perturb_flows(flows: Sequence[Flow], sigma: float, seed: int) -> list[Flow]:
    """D'_f = max(0, D_f + eta_f) with eta_f ~ N(0, (sigma D_f)^2)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    d = np.array([f.demand for f in flows], dtype=float)
    noisy = np.maximum(0.0, d + rng.standard_normal(len(d)) * sigma * d)
    return [replace(f, demand=float(v)) for f, v in zip(flows, noisy)]


def perturb_demands(instance: Instance, sigma: float, seed: int) -> Instance:
    flows = perturb_flows(instance.flows, sigma, seed)
    return instance.with_demands([f.demand for f in flows])


# -- file format ---------------------------------------------------------------


def scenarios_from_dict(data: dict, network: Network) -> ScenarioSet:
    try:
        items = data["scenarios"]
        failed = [[str(e) for e in s["failed_edges"]] for s in items]
        probs = [float(s["prob"]) for s in items]
        labels = [str(s.get("id", i)) for i, s in enumerate(items)]
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario document: {exc}") from exc
    return make_scenario_set(failed, probs, [e.id for e in network.edges], labels, tol=1e-6)


def scenarios_to_dict(sset: ScenarioSet) -> dict:
    return {"scenarios": [{"id": lab, "failed_edges": list(f), "prob": float(p)}
                          for lab, f, p in zip(sset.labels, sset.failed, sset.probs)]}


def load_scenarios(path: str | Path, instance: Instance) -> ScenarioSet:
    """Read a scenario file and attach survival indicators for ``instance``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return build_survival(instance, scenarios_from_dict(data, instance.network))


def save_scenarios(sset: ScenarioSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenarios_to_dict(sset), indent=1) + "\n")


__all__ = [
    "FailureModel", "ScenarioSet", "ScenarioError", "InstanceError", "make_scenario_set",
    "sample_link_probs", "enumerate_scenarios", "generate_scenarios", "build_survival",
    "perturb_flows", "perturb_demands", "scenarios_from_dict", "scenarios_to_dict",
    "load_scenarios", "save_scenarios",
]
