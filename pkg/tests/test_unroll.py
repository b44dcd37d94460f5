import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskte import policy
from riskte.datasets import demand_variants, fig1_decisions, fig1_instance, fig1_scenarios, \
    split_dataset
from riskte.network import Edge, Flow, Instance, Network, Tunnel
from riskte.oracle import OracleConfig, grid_search
from riskte.reservation import LatentState, project_gated, recover_allocation
from riskte.risk import RiskSpec, objective
from riskte.scenarios import build_survival, make_scenario_set
from riskte.unroll import (
    REL_ERROR_FLOOR, Adam, RolloutConfig, RolloutError, Sample, TrainConfig, direct_ratio,
    evaluate, loss_and_grad, relative_error, rollout_grad, train, unroll, write_eval_csv,
    write_train_log,
)

from helpers import random_instance, shuffled_scenarios, three_node

SPECS = [RiskSpec("expectation"), RiskSpec("cvar", 0.9), RiskSpec("robust"),
         RiskSpec("quantile", 0.9), RiskSpec("cvar", 0.9, "flow")]
# objectives whose gradient on the three-node instance is not identically zero
FD_SPECS = [RiskSpec("expectation"), RiskSpec("cvar", 0.8), RiskSpec("quantile", 0.5),
            RiskSpec("cvar", 0.5, "flow"), RiskSpec("robust", granularity="flow")]


def scaled_params(seed, input_dim=8, scale=0.3):
    p = policy.init_params(seed, input_dim=input_dim)
    return p.with_vector(p.to_vector() * scale)


def single_edge(cap=10.0, demand=4.0):
    net = Network(("a", "b"), (Edge("ab", "a", "b", cap),))
    inst = Instance(net, (Flow("f", "a", "b", demand),), (Tunnel("t", "f", ("ab",)),))
    sset = build_survival(inst, make_scenario_set([(), ("ab",)], [0.9, 0.1], ["ab"]))
    return inst, sset


def fd_errors(params, inst, sset, cfg, coords, h=1e-6):
    """Relative errors of central differences on ``coords``; probes crossing a kink are skipped.

    The denominator is floored at 1e-7, above the ~1e-10 round-off of a
    central difference with h = 1e-6, so exactly-zero coordinates pass.
    """
    res, g = rollout_grad(params, inst, sset, cfg)
    theta, gv = params.to_vector(), g.to_vector()
    errs = []
    for i in coords:
        hi, lo = theta.copy(), theta.copy()
        hi[i] += h
        lo[i] -= h
        rp, _ = rollout_grad(params.with_vector(hi), inst, sset, cfg)
        rm, _ = rollout_grad(params.with_vector(lo), inst, sset, cfg)
        if rp.signature != res.signature or rm.signature != res.signature:
            continue
        fd = (rp.J - rm.J) / (2 * h)
        errs.append(abs(fd - gv[i]) / max(abs(fd), abs(gv[i]), 1e-7))
    return errs


# -- rollout basics ----------------------------------------------------------------


def test_zero_policy_is_a_fixed_point():
    inst, sset = three_node()
    p = policy.init_params(0).zeros_like()
    res = unroll(p, inst, sset, RolloutConfig(K=5, record=True))
    uniform = project_gated(LatentState.zeros(inst), inst)
    np.testing.assert_array_equal(res.y, uniform)
    assert not res.z.any() and not res.w.any()
    assert len(res.trajectory) == 6


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.granularity}")
def test_single_tunnel_edge_is_policy_independent(spec):
    inst, sset = single_edge()
    for seed in range(3):
        res = unroll(scaled_params(seed, scale=5.0), inst, sset, RolloutConfig(K=3, spec=spec))
        assert res.y.tolist() == [1.0]
        assert res.x.tolist() == [2.5]
        assert res.J == objective(np.array([2.5]), sset, spec, inst)


def test_flat_objective_has_zero_gradient():
    inst, _ = single_edge(cap=100.0, demand=1.0)
    sset = build_survival(inst, make_scenario_set([()], [1.0], ["ab"]))
    res, g = rollout_grad(scaled_params(2), inst, sset, RolloutConfig(K=3))
    assert res.J == 0.0
    assert not g.to_vector().any()


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(K=0)
    with pytest.raises(ValueError):
        RolloutConfig(K=3, K1=4)
    with pytest.raises(ValueError):
        RolloutConfig(variant="XX")
    inst, sset = three_node()
    with pytest.raises(ValueError, match="5-input"):
        unroll(policy.init_params(0), inst, sset, RolloutConfig(variant="GS"))
    with pytest.raises(ValueError, match="survival"):
        unroll(policy.init_params(0), inst, make_scenario_set([()], [1.0], ["ac"]), RolloutConfig())


def test_non_finite_update_names_iteration():
    inst, sset = three_node()
    p = policy.init_params(0)
    p.b2 = np.array([np.nan, 0.0])
    with pytest.raises(RolloutError, match="iteration 0"):
        unroll(p, inst, sset, RolloutConfig(K=3))


def test_rollout_is_deterministic():
    inst, sset = random_instance(4)
    p = scaled_params(9)
    cfg = RolloutConfig(K=7, spec=RiskSpec("cvar", 0.9))
    a, b = unroll(p, inst, sset, cfg), unroll(p, inst, sset, cfg)
    assert a.J == b.J and a.y.tobytes() == b.y.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(SPECS))
def test_scenario_order_invariance(seed, spec):
    inst, sset = random_instance(seed)
    p = scaled_params(seed % 7)
    cfg = RolloutConfig(K=4, spec=spec)
    a = unroll(p, inst, sset, cfg)
    b = unroll(p, inst, shuffled_scenarios(inst, sset, seed + 1), cfg)
    assert a.J == b.J and a.y.tobytes() == b.y.tobytes()


def test_weight_sharing_across_steps():
    inst, sset = three_node()
    p = scaled_params(1)
    assert [a.shape for a in p.arrays()] == [(8, 64), (64,), (64, 2), (2,)]
    full = unroll(p, inst, sset, RolloutConfig(K=7, record=True))
    for k1 in (1, 3, 6):
        short = unroll(p, inst, sset, RolloutConfig(K=7, K1=k1))
        np.testing.assert_array_equal(short.y, full.trajectory[k1]["y"])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_every_step_is_feasible(seed):
    inst, sset = random_instance(seed)
    res = unroll(scaled_params(seed % 5, scale=2.0), inst, sset, RolloutConfig(K=5, record=True))
    used = np.bincount(inst.pair_edge, minlength=inst.n_edges) > 0
    for step in res.trajectory:
        sums = np.bincount(inst.pair_edge, weights=step["y"], minlength=inst.n_edges)
        np.testing.assert_allclose(sums[used], 1.0, atol=1e-9)
        loads = np.bincount(inst.pair_edge, minlength=inst.n_edges,
                            weights=(inst.demand[inst.tunnel_flow] * step["x"])[inst.pair_tunnel])
        assert np.all(loads <= inst.capacity + 1e-9)


def test_trajectory_features_shape():
    inst, sset = three_node()
    res = unroll(scaled_params(0), inst, sset, RolloutConfig(K=2, record=True))
    assert res.trajectory[0]["features"].shape == (inst.n_pairs, sset.n, 8)
    assert res.trajectory[-1]["features"] is None


# -- gradients ---------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["GR", "BR", "GS", "LS"])
@pytest.mark.parametrize("spec", FD_SPECS, ids=lambda s: f"{s.kind}-{s.granularity}")
def test_gradient_matches_finite_differences(variant, spec):
    inst, sset = three_node()
    cfg = RolloutConfig(K=2, spec=spec, variant=variant)
    p = scaled_params(3, input_dim=cfg.input_dim)
    coords = np.random.default_rng(0).choice(p.to_vector().size, 25, replace=False)
    errs = fd_errors(p, inst, sset, cfg, coords)
    assert len(errs) >= 15
    assert max(errs) < 1e-3
    assert np.abs(rollout_grad(p, inst, sset, cfg)[1].to_vector()).max() > 1e-6


def test_gate_gradient_is_sum_of_edge_terms():
    inst, sset = three_node()
    rng = np.random.default_rng(5)
    z, w = rng.normal(size=inst.n_pairs), rng.normal(size=inst.n_tunnels)
    spec = RiskSpec("expectation")

    def J(z, w):
        y = project_gated(LatentState(z, w), inst)
        return objective(recover_allocation(y, inst).x, sset, spec, inst)

    h = 1e-6
    for t in range(inst.n_tunnels):
        dw = np.zeros(inst.n_tunnels)
        dw[t] = h
        gw = (J(z, w + dw) - J(z, w - dw)) / (2 * h)
        parts = 0.0
        for p in np.flatnonzero(inst.pair_tunnel == t):
            dz = np.zeros(inst.n_pairs)
            dz[p] = h
            parts += (J(z + dz, w) - J(z - dz, w)) / (2 * h)
        assert gw == pytest.approx(parts, abs=1e-7)


def test_batch_gradient_is_mean_of_items():
    inst, sset = three_node()
    batch = [Sample(i, sset) for i in (inst, inst.with_demands([5.0, 3.0]))]
    cfg = RolloutConfig(K=2, spec=RiskSpec("cvar", 0.9))
    p = scaled_params(2)
    J, g = loss_and_grad(p, batch, cfg)
    parts = [rollout_grad(p, i, s, cfg) for i, s in batch]
    assert J == pytest.approx(np.mean([r.J for r, _ in parts]))
    np.testing.assert_allclose(g.to_vector(), np.mean([gi.to_vector() for _, gi in parts], axis=0))
    with pytest.raises(ValueError):
        loss_and_grad(p, [], cfg)


# -- training ----------------------------------------------------------------------


def test_adam_first_step():
    cfg = TrainConfig(lr=0.1)
    opt = Adam(3, cfg)
    theta = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(theta, [-0.1, 0.1, 0.0], rtol=1e-6)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(epochs=3, patience=4)
    with pytest.raises(ValueError):
        train([], [], TrainConfig(), RolloutConfig())


@pytest.fixture(scope="module")
def small_data():
    inst, sset = three_node()
    data = [Sample(inst, sset)] + demand_variants(inst, sset, 11, 0.1, 0)
    return split_dataset(data, 0.25)


def test_patience_zero_stops_at_first_stall(small_data):
    tr, va = small_data
    _, hist = train(tr, va, TrainConfig(lr=0.05, batch_size=4, epochs=12, patience=0),
                    RolloutConfig(K=2))
    best = hist[0].val_J
    for h in hist[1:-1]:
        assert h.val_J < best
        best = h.val_J
    assert hist[-1].val_J >= best or len(hist) == 13


def test_training_log_reproducible(small_data, tmp_path):
    tr, va = small_data
    cfg = TrainConfig(lr=0.01, batch_size=4, epochs=3, patience=3, seed=5)
    pa, ha = train(tr, va, cfg, RolloutConfig(K=2))
    pb, hb = train(tr, va, cfg, RolloutConfig(K=2))
    assert [(h.epoch, h.train_J, h.val_J) for h in ha] == [(h.epoch, h.train_J, h.val_J) for h in hb]
    assert pa.to_vector().tobytes() == pb.to_vector().tobytes()
    write_train_log(ha, tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "train_J", "val_J", "wall_s"] and len(rows) == len(ha) + 1
    assert float(rows[1][2]) == ha[0].val_J


def test_train_returns_best_checkpoint(small_data):
    tr, va = small_data
    rcfg = RolloutConfig(K=2)
    p, hist = train(tr, va, TrainConfig(lr=0.02, batch_size=4, epochs=4, patience=4), rcfg)
    best = min(h.val_J for h in hist)
    assert p.meta["best_val_J"] == best
    assert np.mean([unroll(p, i, s, rcfg).J for i, s in va]) == pytest.approx(best, abs=1e-15)
    assert best <= hist[0].val_J


# -- evaluation --------------------------------------------------------------------


def test_relative_error_floor():
    assert relative_error(0.5, 0.0) == 0.5 / REL_ERROR_FLOOR
    assert relative_error(1.1, 1.0) == pytest.approx(0.1)


def test_oracle_allocation_has_zero_relative_error():
    inst = fig1_instance()
    sset = fig1_scenarios(inst)
    spec = RiskSpec("expectation")
    best = grid_search(inst, sset, spec, OracleConfig(step=0.05))
    assert relative_error(objective(best.x, sset, spec, inst), best.J) == 0.0


def test_fig1_robust_ranks_decision2_first():
    inst = fig1_instance()
    sset = fig1_scenarios(inst)
    dec = fig1_decisions(inst)
    spec = RiskSpec("robust")
    ref = min(objective(x, sset, spec, inst) for x in dec.values())
    errs = {k: relative_error(objective(x, sset, spec, inst), ref) for k, x in dec.items()}
    assert errs["decision2"] == 0.0 < errs["decision1"]


def test_evaluate_report_and_csv(tmp_path):
    inst, sset = three_node()
    p = scaled_params(0)
    rep = evaluate(p, inst, sset, RiskSpec("cvar", 0.9), K1=3, K=7)
    assert rep.rel_error is None and rep.K1 == 3
    assert rep.J == unroll(p, inst, sset, RolloutConfig(K=7, K1=3, spec=RiskSpec("cvar", 0.9))).J
    rep2 = evaluate(p, inst, sset, RiskSpec("cvar", 0.9), K1=3, J_star=rep.J)
    assert rep2.rel_error == 0.0
    write_eval_csv(rep, inst, sset, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["flow", "scenario", "prob", "loss"]
    assert len(rows) == 1 + sset.n * (inst.n_flows + 1)


def test_direct_ratio_by_hand():
    inst, _ = three_node()
    # f1: 3 units direct, 1.5 via b; f2: 2 units direct
    x = np.array([0.5, 0.25, 0.5])
    assert direct_ratio(x, inst) == pytest.approx(5.0 / 6.5)
    assert direct_ratio(np.zeros(3), inst) == 0.0
