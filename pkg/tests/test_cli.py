import csv
import json

import numpy as np
import pytest

from riskte.cli import MANIFEST, REPORT_COLUMNS, main
from riskte.datasets import gravity_demands
from riskte.network import complete_graph, load_instance
from riskte.scenarios import load_scenarios

TINY = ["--variants", "6", "--epochs", "2", "--patience", "1", "-K", "2", "--batch-size", "4"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def runs(directory):
    return json.loads((directory / MANIFEST).read_text())["runs"]


@pytest.fixture(scope="module")
def fig1_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fig1")
    assert main(["gen", "--topology", "fig1", "--out", str(d)]) == 0
    return d


# -- gravity demands ---------------------------------------------------------------


def test_gravity_equal_weights_are_uniform():
    net = complete_graph(4, 10.0)
    flows = gravity_demands(net, 120.0, {n: 1.0 for n in net.nodes})
    assert len(flows) == 12
    np.testing.assert_allclose([f.demand for f in flows], 10.0)


def test_gravity_scales_linearly():
    net = complete_graph(4, 10.0)
    w = {n: float(i + 1) for i, n in enumerate(net.nodes)}
    one = [f.demand for f in gravity_demands(net, 50.0, w)]
    two = [f.demand for f in gravity_demands(net, 100.0, w)]
    np.testing.assert_allclose(two, 2 * np.array(one))
    assert sum(one) == pytest.approx(50.0)
    # D_sd proportional to w_s * w_d
    assert one[0] / one[1] == pytest.approx((w["n0"] * w["n1"]) / (w["n0"] * w["n2"]))


def test_gravity_rejects_negative():
    net = complete_graph(3, 1.0)
    with pytest.raises(ValueError):
        gravity_demands(net, -1.0)
    with pytest.raises(ValueError):
        gravity_demands(net, 1.0, {n: -1.0 for n in net.nodes})


# -- gen -----------------------------------------------------------------------------


def test_gen_is_reproducible(tmp_path):
    args = ["gen", "--topology", "complete", "--nodes", "4", "--variants", "3", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("instance.json", "scenarios.json", "variants/variant_0002.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    inst = load_instance(tmp_path / "a" / "instance.json")
    assert inst.n_flows == 12
    assert load_scenarios(tmp_path / "a" / "scenarios.json", inst).n >= 1


def test_gen_with_pairs_and_weights(tmp_path):
    assert main(["gen", "--topology", "ring", "--nodes", "6", "--pairs", "n0:n3,n1:n4",
                 "--weights", '{"n0": 1, "n1": 1, "n3": 1, "n4": 1}', "--total-demand", "8",
                 "--out", str(tmp_path)]) == 0
    inst = load_instance(tmp_path / "instance.json")
    assert [f.demand for f in inst.flows] == [4.0, 4.0]


def test_gen_rejects_file_target(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path / "x.json")]) == 2
    assert "directory" in capsys.readouterr().err


# -- end-to-end pipeline ---------------------------------------------------------------


def test_pipeline(fig1_dir, tmp_path, capsys):
    inst, scen = str(fig1_dir / "instance.json"), str(fig1_dir / "scenarios.json")
    pair = ["--instance", inst, "--scenarios", scen, "--objective", "robust"]
    assert main(["oracle", *pair, "--step", "0.05", "--out", str(tmp_path / "jstar.json")]) == 0
    assert json.loads((tmp_path / "jstar.json").read_text())["J"] == pytest.approx(0.7)

    assert main(["train", "--data", str(fig1_dir), "--objective", "robust", *TINY,
                 "--out", str(tmp_path / "model")]) == 0
    params = tmp_path / "model" / "params.json"
    assert params.is_file() and (tmp_path / "model" / "params_log.csv").is_file()

    assert main(["infer", *pair, "--params", str(params), "--out", str(tmp_path / "run"),
                 "--dump-features", str(tmp_path / "run" / "features.csv")]) == 0
    res = rows(tmp_path / "run" / "reservation.csv")
    assert res[0] == ["tunnel", "edge", "y", "x", "bandwidth"]
    assert len(res) - 1 == load_instance(inst).n_pairs
    feats = rows(tmp_path / "run" / "features.csv")
    assert feats[0][:4] == ["k", "tunnel", "edge", "scenario"] and len(feats[0]) == 12

    capsys.readouterr()
    assert main(["eval", *pair, "--params", str(params), "--reference", str(tmp_path / "jstar.json"),
                 "--out", str(tmp_path / "evals")]) == 0
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert list(line) == list(REPORT_COLUMNS)
    assert line["Jstar"] == pytest.approx(0.7) and line["J"] >= 0.7 - 1e-9

    assert main(["report", "--inputs", str(tmp_path / "evals"), "--out", str(tmp_path / "rep")]) == 0
    table = rows(tmp_path / "rep" / "relative_errors.csv")
    assert table[0] == list(REPORT_COLUMNS) and len(table) == 2
    curve = rows(tmp_path / "rep" / "sorted_losses.csv")
    assert len(curve) - 1 == load_scenarios(scen, load_instance(inst)).n
    losses = [float(r[-1]) for r in curve[1:]]
    assert losses == sorted(losses, reverse=True)

    # one manifest per output directory, one entry per run
    assert [r["command"] for r in runs(tmp_path)] == ["oracle"]
    assert [r["command"] for r in runs(tmp_path / "run")] == ["infer"]
    entry = runs(tmp_path / "evals")[0]
    assert set(entry["inputs"]) == {inst, scen, str(params), str(tmp_path / "jstar.json")}
    assert len(entry["config_hash"]) == 64


def test_report_on_empty_directory(tmp_path):
    (tmp_path / "in").mkdir()
    assert main(["report", "--inputs", str(tmp_path / "in"), "--out", str(tmp_path / "rep")]) == 0
    assert rows(tmp_path / "rep" / "relative_errors.csv") == [list(REPORT_COLUMNS)]


def test_ablate_single_variant_and_determinism(fig1_dir, tmp_path):
    args = ["ablate", "--data", str(fig1_dir), "--methods", "GR", *TINY, "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = rows(tmp_path / "a" / "ablation.csv"), rows(tmp_path / "b" / "ablation.csv")
    assert a[0] == ["variant", "J", "direct_ratio", "epochs", "train_s"] and len(a) == 2
    # everything but the wall-clock column is reproducible
    assert [r[:4] for r in a] == [r[:4] for r in b]


def test_export_milp_with_verification(fig1_dir, tmp_path):
    from riskte.datasets import fig1_instance, fig1_scenarios
    from riskte.milp import build_milp, solution_from_allocation, write_solution
    from riskte.risk import RiskSpec

    inst = fig1_instance()
    sset = fig1_scenarios(inst)
    model = build_milp(inst, sset, RiskSpec("cvar", 0.9))
    write_solution(solution_from_allocation(model, inst, sset, np.zeros(inst.n_tunnels)),
                   tmp_path / "sol.txt")
    assert main(["export-milp", "--instance", str(fig1_dir / "instance.json"),
                 "--scenarios", str(fig1_dir / "scenarios.json"), "--objective", "cvar",
                 "--beta", "0.9", "--verify", str(tmp_path / "sol.txt"),
                 "--out", str(tmp_path / "m.lp")]) == 0
    assert (tmp_path / "m.lp").read_text().startswith("\\ risk objective: cvar")
    assert json.loads((tmp_path / "m_verify.json").read_text())["ok"] is True


def test_manifest_appends(fig1_dir, tmp_path):
    pair = ["--instance", str(fig1_dir / "instance.json"), "--scenarios",
            str(fig1_dir / "scenarios.json")]
    for kind in ("robust", "expectation"):
        assert main(["export-milp", *pair, "--objective", kind,
                     "--out", str(tmp_path / f"{kind}.lp")]) == 0
    assert [r["config"]["objective"] for r in runs(tmp_path)] == ["robust", "expectation"]


@pytest.mark.parametrize("argv, needle", [
    (["oracle"], "--instance"),
    (["train"], "--data"),
    (["report", "--inputs", "/nonexistent/dir"], "not a directory"),
    (["oracle", "--threads", "0"], "threads"),
])
def test_errors_exit_with_code_2(argv, needle, capsys):
    assert main(argv) == 2
    assert needle in capsys.readouterr().err


def test_bad_input_file_exits_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["oracle", "--instance", str(tmp_path / "bad.json"),
                 "--scenarios", str(tmp_path / "bad.json")]) == 2
    assert "error" in capsys.readouterr().err
