import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskte.datasets import fig1_decisions, fig1_instance, fig1_scenarios
from riskte.features import FEATURES, extract_features, feature_tensor
from riskte.network import Edge, Instance, Network
from riskte.reservation import (
    LatentState, bottleneck_margin, project_gated, recover_allocation, reservation_from_allocation,
)
from riskte.risk import compute_losses
from riskte.scenarios import build_survival

from helpers import random_instance, shuffled_scenarios, three_node


def state_features(y, inst, sset, **kw):
    rec = recover_allocation(y, inst)
    m = bottleneck_margin(y, rec.b, inst)
    lt = compute_losses(rec.x, sset, inst)
    return rec, m, lt, feature_tensor(y, rec.x, m, lt.per_flow, lt.per_scenario, sset.alpha, inst, **kw)


def test_eight_features_in_fixed_order():
    assert FEATURES == ("alpha", "flow_loss", "scenario_loss", "split", "margin",
                        "capacity_norm", "demand_norm", "share")
    inst, sset = three_node()
    *_, s = state_features(project_gated(LatentState.zeros(inst), inst), inst, sset)
    assert s.shape == (inst.n_pairs, sset.n, 8)


def test_fig1_decision1_under_first_failure():
    inst = fig1_instance()
    sset = fig1_scenarios(inst)
    y = reservation_from_allocation(fig1_decisions(inst)["decision1"], inst)
    rec, m, lt, _ = state_features(y, inst, sset)
    q = sset.index_of(["S1-D"])
    tuples = extract_features(y, rec.x, m, lt.per_flow, lt.per_scenario, sset, inst, q)
    s = tuples[("S1:direct", "S1-D")]
    assert s[0] == 0.0
    assert s[1] == pytest.approx(1 - 5 / 15)
    assert s[2] == pytest.approx((1 - 5 / 15) / 2)
    assert s[3] == pytest.approx(10 / 15)
    assert s[5] == 1.0 and s[6] == 1.0
    assert tuples[("S1:via-M", "M-D")][0] == 1.0
    assert len(tuples) == inst.n_pairs


def test_zero_allocation_features():
    inst, sset = three_node()
    y = np.zeros(inst.n_pairs)
    *_, s = state_features(y, inst, sset)
    assert np.all(s[:, 0, 0] == 1.0) and np.all(s[:, 0, 1] == 1.0) and np.all(s[:, 0, 2] == 1.0)


def test_broken_tunnel_alpha_zero():
    inst, sset = three_node()
    *_, s = state_features(project_gated(LatentState.zeros(inst), inst), inst, sset)
    q = sset.index_of(["ac"])
    assert s[0, q, 0] == 0.0
    assert np.all(s[1:3, q, 0] == 1.0)


def test_margin_normalization_option():
    inst, sset = three_node()
    y = project_gated(LatentState(np.arange(inst.n_pairs, dtype=float), np.zeros(3)), inst)
    _, m, _, raw = state_features(y, inst, sset)
    *_, scaled = state_features(y, inst, sset, normalize_margin=True)
    np.testing.assert_allclose(scaled[:, 0, 4], m / inst.capacity[inst.pair_edge])
    np.testing.assert_array_equal(scaled[..., [0, 1, 2, 3, 5, 6, 7]], raw[..., [0, 1, 2, 3, 5, 6, 7]])


def scaled(inst: Instance, c: float) -> Instance:
    net = inst.network
    edges = tuple(Edge(e.id, e.src, e.dst, e.capacity * c) for e in net.edges)
    return Instance(Network(net.nodes, edges), inst.flows, inst.tunnels).with_demands(inst.demand * c)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 5000), st.sampled_from([0.5, 2.0, 4.0, 0.25]))
def test_joint_rescaling_only_scales_margin(seed, c):
    inst, sset = random_instance(seed)
    rng = np.random.default_rng(seed)
    y = project_gated(LatentState(rng.normal(size=inst.n_pairs), rng.normal(size=inst.n_tunnels)), inst)
    big = scaled(inst, c)
    *_, a = state_features(y, inst, sset)
    *_, b = state_features(y, big, build_survival(big, sset))
    keep = [0, 1, 2, 3, 5, 6, 7]
    np.testing.assert_allclose(b[..., keep], a[..., keep], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b[..., 4], c * a[..., 4], rtol=1e-12, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 5000))
def test_bottleneck_margin_zero_and_relabel_invariance(seed):
    inst, sset = random_instance(seed)
    rng = np.random.default_rng(seed)
    y = project_gated(LatentState(rng.normal(size=inst.n_pairs), np.zeros(inst.n_tunnels)), inst)
    rec, m, _, s = state_features(y, inst, sset)
    assert np.all(m >= 0)
    assert np.all(m[rec.bottleneck] == 0.0)
    other = shuffled_scenarios(inst, sset, seed)
    *_, s2 = state_features(y, inst, other)
    np.testing.assert_array_equal(s2, s)
