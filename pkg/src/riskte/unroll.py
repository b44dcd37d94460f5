"""The unrolled Generate-Perceive-Update optimizer, its gradient, and training.

A rollout starts from zero latents, and at every step projects the latents
to a feasible decision, evaluates losses and risk weights, extracts features
per scenario and applies the policy's risk-weighted updates.  The gradient
of the terminal objective w.r.t. the policy parameters is computed by a
hand-written reverse pass over the recorded steps.  Sorting, masks and risk
weights are held constant in the reverse pass.

Four decision spaces are supported:

``GR``  gated reservation (contention logits plus per-tunnel gates)
``BR``  per-edge reservation without gates
``GS``  per-tunnel allocations repaired by global scaling
``LS``  per-tunnel allocations repaired by local (per-tunnel) scaling
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import policy
from .features import feature_tensor, scaling_feature_tensor
from .network import Instance
from .policy import PolicyParams
from .reservation import edge_softmax, edge_softmax_backward, recover_allocation
from .risk import RiskSpec, loss_weights, objective_from_losses, risk_weights, scenario_mask
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)

VARIANTS = ("GR", "BR", "GS", "LS")
REL_ERROR_FLOOR = 1e-9


class RolloutError(RuntimeError):
    pass


class Sample(NamedTuple):
    instance: Instance
    scenarios: ScenarioSet


@dataclass(frozen=True)
class RolloutConfig:
    K: int = 7
    K1: int | None = None
    spec: RiskSpec = field(default_factory=RiskSpec)
    clip: float = 10.0
    record: bool = False
    variant: str = "GR"
    normalize_margin: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.K1 is not None and not 1 <= self.K1 <= self.K:
            raise ValueError("K1 must satisfy 1 <= K1 <= K")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def steps(self) -> int:
        return self.K if self.K1 is None else self.K1

    @property
    def input_dim(self) -> int:
        return 8 if self.variant in ("GR", "BR") else 5


@dataclass
class RolloutResult:
    J: float
    x: np.ndarray
    y: np.ndarray | None
    per_flow: np.ndarray
    per_scenario: np.ndarray
    z: np.ndarray
    w: np.ndarray
    trajectory: list[dict] = field(default_factory=list)
    signature: tuple = ()


# -- shared pieces ---------------------------------------------------------------


def _losses(x, alpha, inst):
    served = inst.flow_tunnel_matrix @ (x[:, None] * alpha)
    slack = inst.need[:, None] - served
    return np.maximum(0.0, slack), slack > 0


def _unit_rho(rho, spec, unit_flow, n_units):
    if spec.granularity == "flow":
        return rho[unit_flow]
    return np.broadcast_to(rho, (n_units, rho.shape[-1]))


def _loss_grad_to_x(gl, active, alpha, inst):
    """Back through l = max(0, 1 - A (x * alpha))."""
    gserved = -gl * active
    return (gserved[inst.tunnel_flow] * alpha).sum(axis=1)


def _terminal_loss_grad(spec, per_flow, probs, n_flows):
    c = loss_weights(spec, per_flow, probs)
    if spec.granularity == "flow":
        return c
    return np.broadcast_to(c / n_flows, per_flow.shape)


# -- decoders ----------------------------------------------------------------------


class _Reservation:
    """GR / BR: latents are pair logits z and tunnel gates w."""

    def __init__(self, inst: Instance, gated: bool, normalize_margin: bool):
        self.inst, self.gated, self.normalize_margin = inst, gated, normalize_margin
        self.cap_p = inst.capacity[inst.pair_edge]

    def init(self):
        return np.zeros(self.inst.n_pairs), np.zeros(self.inst.n_tunnels)

    def decode(self, z, w):
        inst = self.inst
        a = z + w[inst.pair_tunnel] if self.gated else z
        y = edge_softmax(a, inst)
        rec = recover_allocation(y, inst)
        return {"y": y, "b": rec.b, "bottleneck": rec.bottleneck, "x": rec.x}

    def decode_backward(self, d, gx, gy=None, gcy=None, gb=None):
        inst = self.inst
        gb = gx * inst.inv_demand if gb is None else gb + gx * inst.inv_demand
        gcy = np.zeros(inst.n_pairs) if gcy is None else gcy.copy()
        np.add.at(gcy, d["bottleneck"], gb)
        gy_total = self.cap_p * gcy if gy is None else gy + self.cap_p * gcy
        ga = edge_softmax_backward(d["y"], gy_total, inst)
        gw = np.add.reduceat(ga, inst.tunnel_starts) if self.gated and inst.n_tunnels \
            else np.zeros(inst.n_tunnels)
        return ga, gw

    def features(self, d, per_flow, lq, alpha):
        inst = self.inst
        margin = self.cap_p * d["y"] - d["b"][inst.pair_tunnel]
        d["margin"] = margin
        return feature_tensor(d["y"], d["x"], margin, per_flow, lq, alpha, inst,
                              normalize_margin=self.normalize_margin)

    @property
    def unit_tunnel(self):
        return self.inst.pair_tunnel

    def aggregate(self, contrib):
        """contrib (P, N, 2) weighted policy outputs -> raw (dz, dw)."""
        dz = contrib[..., 0].sum(axis=1)
        if not self.gated or self.inst.n_tunnels == 0:
            return dz, np.zeros(self.inst.n_tunnels)
        return dz, np.add.reduceat(contrib[..., 1].sum(axis=1), self.inst.tunnel_starts)

    def aggregate_backward(self, gdz, gdw):
        g = np.empty((len(gdz), 2))
        g[:, 0] = gdz
        g[:, 1] = gdw[self.inst.pair_tunnel] if self.gated else 0.0
        return g

    def features_backward(self, d, gs):
        inst = self.inst
        pt = inst.pair_tunnel
        gx = np.bincount(pt, weights=gs[:, :, 3].sum(axis=1), minlength=inst.n_tunnels)
        gm = gs[:, :, 4].sum(axis=1)
        if self.normalize_margin:
            gm = gm / self.cap_p
        gy = gs[:, :, 7].sum(axis=1)
        # margin = C y - b[t]
        gb = -np.bincount(pt, weights=gm, minlength=inst.n_tunnels)
        return gx, gy, gm, gb

    def signature(self, d):
        return d["bottleneck"].tobytes()


class _Scaling:
    """GS / LS: latents are per-tunnel log-allocations u (stored in ``z``)."""

    def __init__(self, inst: Instance, mode: str):
        self.inst, self.mode = inst, mode
        counts = np.bincount(inst.tunnel_flow, minlength=inst.n_flows)
        self.base = 1.0 / np.maximum(counts[inst.tunnel_flow], 1)
        self.dem_t = inst.demand[inst.tunnel_flow]

    def init(self):
        return np.zeros(self.inst.n_tunnels), np.zeros(self.inst.n_tunnels)

    def decode(self, z, w):
        inst = self.inst
        x_raw = np.exp(z) * self.base
        loads = np.bincount(inst.pair_edge, weights=(self.dem_t * x_raw)[inst.pair_tunnel],
                            minlength=inst.n_edges)
        ratio = loads / inst.capacity
        d = {"x_raw": x_raw, "ratio": ratio, "y": None}
        if self.mode == "GS":
            e_star = int(np.argmax(ratio)) if len(ratio) else 0
            gamma = float(ratio[e_star]) if len(ratio) else 0.0
            d.update(e_star=e_star, gamma=gamma)
            d["x"] = x_raw / gamma if gamma > 1.0 else x_raw.copy()
        else:
            rp = ratio[inst.pair_edge]
            order = np.lexsort((inst.pair_edge, -rp, inst.pair_tunnel))
            first = np.r_[True, inst.pair_tunnel[order][1:] != inst.pair_tunnel[order][:-1]]
            arg = order[first]
            gamma_t = rp[arg]
            d.update(arg=arg, gamma_t=gamma_t)
            d["x"] = x_raw / np.maximum(1.0, gamma_t)
        return d

    def decode_backward(self, d, gx, gy=None, gcy=None, gb=None):
        inst = self.inst
        x_raw = d["x_raw"]
        gload = np.zeros(inst.n_edges)
        if self.mode == "GS":
            gamma = d["gamma"]
            if gamma > 1.0:
                gx_raw = gx / gamma
                gload[d["e_star"]] = -(gx @ x_raw) / gamma ** 2 / inst.capacity[d["e_star"]]
            else:
                gx_raw = gx.copy()
        else:
            gamma_t = d["gamma_t"]
            scale = np.maximum(1.0, gamma_t)
            gx_raw = gx / scale
            over = gamma_t > 1.0
            ggamma = np.where(over, -gx * x_raw / gamma_t ** 2, 0.0)
            gratio = np.bincount(inst.pair_edge[d["arg"]], weights=ggamma, minlength=inst.n_edges)
            gload = gratio / inst.capacity
        gx_raw = gx_raw + self.dem_t * np.bincount(
            inst.pair_tunnel, weights=gload[inst.pair_edge], minlength=inst.n_tunnels)
        return gx_raw * x_raw, np.zeros(inst.n_tunnels)

    def features(self, d, per_flow, lq, alpha):
        return scaling_feature_tensor(d["x"], per_flow, lq, alpha, self.inst)

    @property
    def unit_tunnel(self):
        return np.arange(self.inst.n_tunnels)

    def aggregate(self, contrib):
        return contrib[..., 0].sum(axis=1), np.zeros(self.inst.n_tunnels)

    def aggregate_backward(self, gdz, gdw):
        g = np.zeros((len(gdz), 2))
        g[:, 0] = gdz
        return g

    def features_backward(self, d, gs):
        return gs[:, :, 3].sum(axis=1), None, None, None

    def signature(self, d):
        if self.mode == "GS":
            return bytes([d["gamma"] > 1.0]) + np.int64(d["e_star"]).tobytes()
        return d["arg"].tobytes() + (d["gamma_t"] > 1.0).tobytes()


def _decoder(inst: Instance, cfg: RolloutConfig):
    if cfg.variant in ("GR", "BR"):
        return _Reservation(inst, cfg.variant == "GR", cfg.normalize_margin)
    return _Scaling(inst, cfg.variant)


# -- rollout -----------------------------------------------------------------------


def _run(params: PolicyParams, inst: Instance, sset: ScenarioSet, cfg: RolloutConfig,
         keep_tape: bool):
    if sset.alpha is None or sset.alpha.shape[0] != inst.n_tunnels:
        raise ValueError("scenario set has no survival matrix for this instance")
    if params.input_dim != cfg.input_dim:
        raise ValueError(f"variant {cfg.variant} needs a {cfg.input_dim}-input policy")
    spec, alpha, probs = cfg.spec, sset.alpha, sset.probs
    dec = _decoder(inst, cfg)
    units = dec.unit_tunnel
    unit_flow = inst.tunnel_flow[units]
    n_flows = max(inst.n_flows, 1)
    z, w = dec.init()
    tape, traj, sig = [], [], []
    for k in range(cfg.steps):
        d = dec.decode(z, w)
        per_flow, active = _losses(d["x"], alpha, inst)
        lq = per_flow.sum(axis=0) / n_flows
        rho = risk_weights(spec, per_flow, probs)
        rho_u = _unit_rho(rho, spec, unit_flow, len(units))
        s = dec.features(d, per_flow, lq, alpha)
        out, pre = policy.forward(params, s, return_hidden=True)
        raw_dz, raw_dw = dec.aggregate(rho_u[..., None] * out)
        if not (np.all(np.isfinite(raw_dz)) and np.all(np.isfinite(raw_dw))):
            raise RolloutError(f"non-finite update at iteration {k}")
        mz = np.abs(raw_dz) < cfg.clip
        mw = np.abs(raw_dw) < cfg.clip
        if cfg.record:
            traj.append({"k": k, "y": None if d["y"] is None else d["y"].copy(),
                         "x": d["x"].copy(), "features": s})
        if keep_tape:
            tape.append({"d": d, "active": active, "rho_u": rho_u, "s": s, "pre": pre,
                         "mz": mz, "mw": mw})
            sig.append((dec.signature(d), active.tobytes(),
                        scenario_mask(spec, per_flow, probs).tobytes(),
                        (pre > 0).tobytes(), mz.tobytes(), mw.tobytes()))
        z = z + np.clip(raw_dz, -cfg.clip, cfg.clip)
        w = w + np.clip(raw_dw, -cfg.clip, cfg.clip)
    d = dec.decode(z, w)
    per_flow, active = _losses(d["x"], alpha, inst)
    J = float(objective_from_losses(per_flow, probs, spec))
    if not np.isfinite(J):
        raise RolloutError(f"non-finite objective after iteration {cfg.steps - 1}")
    if keep_tape:
        sig.append((dec.signature(d), active.tobytes(),
                    scenario_mask(spec, per_flow, probs).tobytes()))
    if cfg.record:
        traj.append({"k": cfg.steps, "y": None if d["y"] is None else d["y"].copy(),
                     "x": d["x"].copy(), "features": None})
    lq = per_flow.sum(axis=0) / n_flows
    result = RolloutResult(J, d["x"], d["y"], per_flow, lq, z, w, traj, tuple(sig))
    return result, (dec, tape, d, active)


def unroll(params: PolicyParams, instance: Instance, sset: ScenarioSet,
           cfg: RolloutConfig) -> RolloutResult:
    """Run the K-step rollout (``cfg.K1`` steps when set) and score y_K."""
    return _run(params, instance, sset, cfg, keep_tape=False)[0]


def rollout_grad(params: PolicyParams, instance: Instance, sset: ScenarioSet,
                 cfg: RolloutConfig) -> tuple[RolloutResult, PolicyParams]:
    """Terminal objective and its exact gradient w.r.t. the policy parameters."""
    result, (dec, tape, final, active) = _run(params, instance, sset, cfg, keep_tape=True)
    inst, alpha, spec = instance, sset.alpha, cfg.spec
    n_flows = max(inst.n_flows, 1)
    grads = params.zeros_like()

    gl = _terminal_loss_grad(spec, result.per_flow, sset.probs, n_flows)
    gx = _loss_grad_to_x(gl, active, alpha, inst)
    gz, gw = dec.decode_backward(final, gx)

    for step in reversed(tape):
        d = step["d"]
        rho_u = step["rho_u"]
        gdz = gz * step["mz"]
        gdw = gw * step["mw"]
        g_unit = dec.aggregate_backward(gdz, gdw)
        gout = rho_u[..., None] * g_unit[:, None, :]
        g_step, gs = policy.backward(params, step["s"], gout, step["pre"])
        for acc, g in zip(grads.arrays(), g_step.arrays()):
            acc += g
        # features -> losses
        unit_flow = inst.tunnel_flow[dec.unit_tunnel]
        gl = np.zeros((inst.n_flows, sset.n))
        np.add.at(gl, unit_flow, gs[:, :, 1])
        gl += gs[:, :, 2].sum(axis=0)[None, :] / n_flows
        gx_feat, gy, gm, gb = dec.features_backward(d, gs)
        gx = gx_feat + _loss_grad_to_x(gl, step["active"], alpha, inst)
        ga, gw_dec = dec.decode_backward(d, gx, gy=gy, gcy=gm, gb=gb)
        gz = gz + ga
        gw = gw + gw_dec
    return result, grads


def loss_and_grad(params: PolicyParams, batch: Sequence[Sample],
                  cfg: RolloutConfig) -> tuple[float, PolicyParams]:
    """Mean terminal objective over a batch and its gradient."""
    if not batch:
        raise ValueError("empty batch")
    total = params.zeros_like()
    js = []
    for inst, sset in batch:
        res, g = rollout_grad(params, inst, sset, cfg)
        js.append(res.J)
        for acc, gi in zip(total.arrays(), g.arrays()):
            acc += gi
    n = len(batch)
    for acc in total.arrays():
        acc /= n
    return float(np.mean(js)), total


# -- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.patience < 0:
            raise ValueError("invalid training configuration")
        if self.patience > self.epochs:
            raise ValueError("patience cannot exceed the epoch count")


class Adam:
    def __init__(self, size: int, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1 ** self.t)
        v_hat = self.v / (1 - c.beta2 ** self.t)
        return theta - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


@dataclass
class EpochLog:
    epoch: int
    train_J: float
    val_J: float
    wall_s: float


def mean_objective(params: PolicyParams, samples: Sequence[Sample], cfg: RolloutConfig) -> float:
    return float(np.mean([unroll(params, i, s, cfg).J for i, s in samples]))


def train(train_set: Sequence[Sample], val_set: Sequence[Sample], train_cfg: TrainConfig,
          rollout_cfg: RolloutConfig, params: PolicyParams | None = None
          ) -> tuple[PolicyParams, list[EpochLog]]:
    """Adam over shuffled mini-batches with early stopping on validation J.

    Epoch 0 in the log is the untrained policy.  Returns the checkpoint with
    the best validation objective.  Training stops once more than
    ``patience`` consecutive epochs fail to improve on it.
    """
    if not train_set:
        raise ValueError("empty training set")
    val_set = val_set or train_set
    rng = np.random.default_rng(train_cfg.seed)
    if params is None:
        params = policy.init_params(train_cfg.seed, input_dim=rollout_cfg.input_dim)
    params = params.copy()
    theta = params.to_vector()
    opt = Adam(theta.size, train_cfg)
    start = time.perf_counter()
    best_val = mean_objective(params, val_set, rollout_cfg)
    best = params.copy()
    history = [EpochLog(0, mean_objective(params, train_set, rollout_cfg), best_val, 0.0)]
    stale = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        js = []
        for i in range(0, len(order), train_cfg.batch_size):
            batch = [train_set[j] for j in order[i:i + train_cfg.batch_size]]
            J, g = loss_and_grad(params, batch, rollout_cfg)
            gvec = g.to_vector()
            if not (np.isfinite(J) and np.all(np.isfinite(gvec))):
                raise RolloutError(f"training diverged in epoch {epoch}")
            theta = opt.step(theta, gvec)
            params = params.with_vector(theta)
            js.append(J)
        val = mean_objective(params, val_set, rollout_cfg)
        history.append(EpochLog(epoch, float(np.mean(js)), val, time.perf_counter() - start))
        log.info("epoch %d train J %.6f val J %.6f", epoch, np.mean(js), val)
        if val < best_val:
            best_val, best, stale = val, params.copy(), 0
        else:
            stale += 1
            if stale > train_cfg.patience:
                break
    best.meta.update(seed=train_cfg.seed, variant=rollout_cfg.variant, K=rollout_cfg.K,
                     objective=rollout_cfg.spec.kind, beta=rollout_cfg.spec.beta,
                     epochs_run=history[-1].epoch, best_val_J=best_val)
    return best, history


def write_train_log(history: Sequence[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "train_J", "val_J", "wall_s"])
        for h in history:
            out.writerow([h.epoch, repr(h.train_J), repr(h.val_J), f"{h.wall_s:.3f}"])


# -- evaluation --------------------------------------------------------------------


@dataclass
class EvalReport:
    J: float
    J_star: float | None
    rel_error: float | None
    per_scenario: np.ndarray
    per_flow: np.ndarray
    x: np.ndarray
    y: np.ndarray | None
    K1: int


def relative_error(J: float, J_star: float) -> float:
    return (J - J_star) / max(J_star, REL_ERROR_FLOOR)


def evaluate(params: PolicyParams, instance: Instance, sset: ScenarioSet, spec: RiskSpec,
             K1: int, J_star: float | None = None, K: int | None = None,
             variant: str = "GR") -> EvalReport:
    cfg = RolloutConfig(K=max(K or K1, K1), K1=K1, spec=spec, variant=variant)
    res = unroll(params, instance, sset, cfg)
    rel = None if J_star is None else relative_error(res.J, J_star)
    return EvalReport(res.J, J_star, rel, res.per_scenario, res.per_flow, res.x, res.y, K1)


def write_eval_csv(report: EvalReport, instance: Instance, sset: ScenarioSet,
                   path: str | Path) -> None:
    """One row per (flow, scenario) loss plus the scenario-level mean."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["flow", "scenario", "prob", "loss"])
        for q in range(sset.n):
            for f, flow in enumerate(instance.flows):
                out.writerow([flow.id, sset.labels[q], repr(float(sset.probs[q])),
                              repr(float(report.per_flow[f, q]))])
            out.writerow(["*", sset.labels[q], repr(float(sset.probs[q])),
                          repr(float(report.per_scenario[q]))])


def direct_ratio(x: np.ndarray, instance: Instance) -> float:
    """Share of allocated bandwidth carried on 1-hop tunnels."""
    bw = instance.demand[instance.tunnel_flow] * x
    total = bw.sum()
    return float(bw[instance.tunnel_hops == 1].sum() / total) if total > 0 else 0.0


__all__ = [
    "VARIANTS", "RolloutConfig", "RolloutResult", "RolloutError", "Sample", "unroll",
    "rollout_grad", "loss_and_grad", "TrainConfig", "Adam", "EpochLog", "train",
    "mean_objective", "write_train_log", "EvalReport", "evaluate", "relative_error",
    "write_eval_csv", "direct_ratio",
]
