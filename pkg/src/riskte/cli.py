"""``riskte`` command line: data generation, training, inference, oracles and exports.

Every subcommand accepts ``--seed``, ``--threads`` and ``--out``.  ``--out``
names either a file or a directory (no suffix); a ``manifest.json`` in the
output directory records each run's command line, config hash, seeds and
input digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

MANIFEST = "manifest.json"
REPORT_COLUMNS = ("topology", "objective", "beta", "K1", "J", "Jstar", "rel_err", "wall_ms")


class CliError(Exception):
    pass


# -- manifest ----------------------------------------------------------------------


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict,
                   inputs: list[str], outputs: list[Path], wall_s: float) -> Path:
    """Append this run to the directory's single manifest file."""
    import numpy as np

    from . import __version__

    path = out_dir / MANIFEST
    doc = {"runs": []}
    if path.exists():
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            doc = {"runs": []}
    doc["runs"].append({
        "command": command,
        "argv": argv,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": {"seed": config.get("seed")},
        "inputs": {str(p): file_digest(p) for p in inputs if p and Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "versions": {"riskte": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "wall_clock_s": round(wall_s, 3),
    })
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


def _target(out: str | None, default_name: str) -> Path:
    p = Path(out) if out else Path(".")
    if p.suffix == "" or p.is_dir():
        p.mkdir(parents=True, exist_ok=True)
        return p / default_name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- shared loaders -------------------------------------------------------------------


def _spec(args):
    from .risk import RiskSpec

    return RiskSpec(kind=args.objective, beta=args.beta, granularity=args.granularity)


def _load_pair(args):
    from .network import load_instance
    from .scenarios import load_scenarios

    if not args.instance or not args.scenarios:
        raise CliError("--instance and --scenarios are required")
    inst = load_instance(args.instance, k_sp=getattr(args, "k_sp", None))
    return inst, load_scenarios(args.scenarios, inst)


def _load_dataset(args):
    """(train, validation, base instance, base scenarios) from --data or explicit files."""
    from .datasets import demand_variants, split_dataset
    from .network import load_instance
    from .scenarios import load_scenarios
    from .unroll import Sample

    inputs = []
    if args.data:
        root = Path(args.data)
        inst_path, scen_path = root / "instance.json", root / "scenarios.json"
        if not inst_path.is_file() or not scen_path.is_file():
            raise CliError(f"{root} must contain instance.json and scenarios.json")
    else:
        if not args.instance or not args.scenarios:
            raise CliError("give --data DIR or both --instance and --scenarios")
        inst_path, scen_path = Path(args.instance), Path(args.scenarios)
    inst = load_instance(inst_path)
    sset = load_scenarios(scen_path, inst)
    inputs += [str(inst_path), str(scen_path)]
    samples = [Sample(inst, sset)]
    variant_dir = inst_path.parent / "variants"
    stored = sorted(variant_dir.glob("*.json")) if args.data and variant_dir.is_dir() else []
    if stored:
        for p in stored:
            v = load_instance(p)
            samples.append(Sample(v, load_scenarios(scen_path, v)))
            inputs.append(str(p))
    elif args.variants > 0:
        samples += demand_variants(inst, sset, args.variants, args.sigma, args.seed)
    train, val = split_dataset(samples, args.val_fraction)
    return train, val, inst, sset, inputs


def _train_configs(args, variant: str = "GR"):
    from .unroll import RolloutConfig, TrainConfig

    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                     patience=args.patience, seed=args.seed)
    rc = RolloutConfig(K=args.K, spec=_spec(args), clip=args.clip, variant=variant)
    return tc, rc


# -- commands ---------------------------------------------------------------------------


def cmd_gen(args) -> tuple[list[Path], list[str]]:
    from .datasets import (desk_instance, desk_scenarios, fig1_instance, fig1_scenarios,
                           synthetic_instance)
    from .network import complete_graph, grid_graph, ring_with_chords, save_instance
    from .scenarios import (FailureModel, build_survival, generate_scenarios, perturb_demands,
                            save_scenarios)

    out_dir = Path(args.out or ".")
    if out_dir.suffix:
        raise CliError("gen writes several files; --out must be a directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = json.loads(args.weights) if args.weights else None
    if args.topology == "fig1":
        inst = fig1_instance()
        sset = fig1_scenarios(inst)
    elif args.topology == "desk":
        inst = desk_instance()
        sset = desk_scenarios(inst)
    else:
        if args.topology == "complete":
            net = complete_graph(args.nodes, args.capacity)
        elif args.topology == "ring":
            chords = [(i, (i + args.nodes // 2) % args.nodes) for i in range(0, args.nodes, 3)]
            net = ring_with_chords(args.nodes, chords, args.capacity)
        else:
            net = grid_graph(args.rows, args.cols, args.capacity)
        pairs = None
        if args.pairs:
            pairs = [tuple(p.split(":")) for p in args.pairs.split(",")]
        inst = synthetic_instance(net, args.total_demand, args.k_sp, weights, pairs,
                                  name=args.topology)
        model = FailureModel(args.cutoff_c, args.weibull_s, args.shape, args.max_failures,
                             args.seed)
        sset = build_survival(inst, generate_scenarios(inst.network, model))
    outputs = [out_dir / "instance.json", out_dir / "scenarios.json"]
    save_instance(inst, outputs[0])
    save_scenarios(sset, outputs[1])
    if args.variants:
        vdir = out_dir / "variants"
        vdir.mkdir(exist_ok=True)
        for i in range(args.variants):
            p = vdir / f"variant_{i:04d}.json"
            save_instance(perturb_demands(inst, args.sigma, args.seed * 100003 + i), p)
            outputs.append(p)
    print(json.dumps({"instance": str(outputs[0]), "flows": inst.n_flows,
                      "tunnels": inst.n_tunnels, "scenarios": sset.n,
                      "variants": args.variants}))
    return outputs, []


def cmd_train(args):
    from .policy import save_params
    from .unroll import train, unroll, write_train_log

    train_set, val_set, inst, sset, inputs = _load_dataset(args)
    tc, rc = _train_configs(args, args.variant)
    params, history = train(train_set, val_set, tc, rc)
    target = _target(args.out, "params.json")
    save_params(params, target)
    log_path = target.with_name(target.stem + "_log.csv")
    write_train_log(history, log_path)
    J = unroll(params, inst, sset, rc).J
    print(json.dumps({"params": str(target), "epochs": history[-1].epoch,
                      "best_val_J": params.meta.get("best_val_J"), "J": J}))
    return [target, log_path], inputs


def cmd_infer(args):
    import numpy as np

    from .features import FEATURES, SCALING_FEATURES
    from .policy import load_params
    from .unroll import RolloutConfig, unroll

    inst, sset = _load_pair(args)
    params = load_params(args.params)
    variant = params.meta.get("variant", "GR")
    K = int(params.meta.get("K", args.K1 or 7))
    K1 = args.K1 or K
    cfg = RolloutConfig(K=max(K, K1), K1=K1, spec=_spec(args), variant=variant,
                        record=bool(args.dump_features))
    res = unroll(params, inst, sset, cfg)
    target = _target(args.csv or args.out, "reservation.csv")
    rows = []
    net = inst.network
    for p, (t, e) in enumerate(zip(inst.pair_tunnel, inst.pair_edge)):
        y = "" if res.y is None else repr(float(res.y[p]))
        rows.append([inst.tunnels[t].id, net.edges[e].id, y, repr(float(res.x[t])),
                     repr(float(res.x[t] * inst.demand[inst.tunnel_flow[t]]))])
    _write_rows(target, ["tunnel", "edge", "y", "x", "bandwidth"], rows)
    outputs = [target]
    if args.dump_features:
        fpath = Path(args.dump_features)
        fpath.parent.mkdir(parents=True, exist_ok=True)
        names = FEATURES if variant in ("GR", "BR") else SCALING_FEATURES
        frows = []
        for step in res.trajectory:
            s = step["features"]
            if s is None:
                continue
            units = list(zip(inst.pair_tunnel, inst.pair_edge)) if variant in ("GR", "BR") \
                else [(t, -1) for t in range(inst.n_tunnels)]
            for u, (t, e) in enumerate(units):
                for q in range(sset.n):
                    frows.append([step["k"], inst.tunnels[t].id,
                                  net.edges[e].id if e >= 0 else "", sset.labels[q]]
                                 + [repr(float(v)) for v in np.asarray(s[u, q])])
        _write_rows(fpath, ["k", "tunnel", "edge", "scenario", *names], frows)
        outputs.append(fpath)
    print(json.dumps({"J": res.J, "K1": K1, "csv": str(target)}))
    return outputs, [args.instance, args.scenarios, args.params]


def cmd_eval(args):
    from .oracle import load_reference_J
    from .policy import load_params
    from .unroll import evaluate, write_eval_csv

    inst, sset = _load_pair(args)
    params = load_params(args.params)
    variant = params.meta.get("variant", "GR")
    K = int(params.meta.get("K", args.K1 or 7))
    K1 = args.K1 or K
    J_star = load_reference_J(args.reference) if args.reference else None
    t0 = time.perf_counter()
    rep = evaluate(params, inst, sset, _spec(args), K1, J_star, K=K, variant=variant)
    wall_ms = (time.perf_counter() - t0) * 1e3
    target = _target(args.out, "eval.csv")
    write_eval_csv(rep, inst, sset, target)
    summary = {
        "topology": inst.name, "objective": args.objective, "beta": args.beta, "K1": K1,
        "J": rep.J, "Jstar": J_star, "rel_err": rep.rel_error, "wall_ms": wall_ms,
        "n_scenarios": sset.n, "probs": [float(p) for p in sset.probs],
        "per_scenario": [float(v) for v in rep.per_scenario],
    }
    jpath = target.with_suffix(".json")
    jpath.write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(json.dumps({k: summary[k] for k in REPORT_COLUMNS}))
    inputs = [args.instance, args.scenarios, args.params] + ([args.reference] if args.reference else [])
    return [target, jpath], inputs


def cmd_oracle(args):
    from .oracle import OracleConfig, grid_search, save_result, subgradient_refine

    inst, sset = _load_pair(args)
    spec = _spec(args)
    cfg = OracleConfig(step=args.step, refine_iters=args.refine_iters, restarts=args.restarts,
                       seed=args.seed, search=args.search)
    res = grid_search(inst, sset, spec, cfg)
    if args.refine and res.y is not None:
        refined = subgradient_refine(res.y, inst, sset, spec, cfg)
        if refined.J < res.J:
            res.J, res.x, res.y = refined.J, refined.x, refined.y
    target = _target(args.out, "jstar.json")
    save_result(res, target, spec, cfg)
    print(json.dumps({"J": res.J, "evaluated": res.evaluated, "out": str(target)}))
    return [target], [args.instance, args.scenarios]


def cmd_ablate(args):
    from .unroll import direct_ratio, train, unroll

    train_set, val_set, inst, sset, inputs = _load_dataset(args)
    variants = [v.strip().upper() for v in args.methods.split(",") if v.strip()]
    rows = []
    for v in variants:
        tc, rc = _train_configs(args, v)
        t0 = time.perf_counter()
        params, history = train(train_set, val_set, tc, rc)
        res = unroll(params, inst, sset, rc)
        rows.append([v, repr(res.J), repr(direct_ratio(res.x, inst)), history[-1].epoch,
                     f"{time.perf_counter() - t0:.3f}"])
        print(json.dumps({"variant": v, "J": res.J, "direct_ratio": direct_ratio(res.x, inst)}))
    target = _target(args.out, "ablation.csv")
    _write_rows(target, ["variant", "J", "direct_ratio", "epochs", "train_s"], rows)
    return [target], inputs


def cmd_export_milp(args):
    from .milp import build_milp, verify_solution, write_lp

    inst, sset = _load_pair(args)
    model = build_milp(inst, sset, _spec(args), big_m=args.big_m,
                       strict_clamp=True if args.strict_clamp else None)
    target = _target(args.out, "model.lp")
    write_lp(model, target)
    outputs, inputs = [target], [args.instance, args.scenarios]
    info = {"lp": str(target), "variables": len(model.variables),
            "constraints": len(model.constraints), "binaries": len(model.binaries)}
    if args.verify:
        rep = verify_solution(model, args.verify, inst, sset)
        vpath = target.with_name(target.stem + "_verify.json")
        vpath.write_text(json.dumps({
            "ok": rep.ok, "J_model": rep.J_model, "J_recomputed": rep.J_recomputed,
            "violations": [{"item": v.item, "family": v.family, "amount": v.amount}
                           for v in rep.violations]}, indent=1) + "\n", encoding="utf-8")
        outputs.append(vpath)
        inputs.append(args.verify)
        info.update(verified=rep.ok, J=rep.J_model)
        print(rep.summary(), file=sys.stderr)
    print(json.dumps(info))
    return outputs, inputs


def cmd_report(args):
    root = Path(args.inputs)
    if not root.is_dir():
        raise CliError(f"{root} is not a directory")
    runs = []
    for p in sorted(root.rglob("*.json")):
        try:
            doc = json.loads(p.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(doc, dict) and {"J", "K1", "per_scenario", "probs"} <= doc.keys():
            runs.append((p, doc))
    out = Path(args.out or "report")
    if out.suffix:
        raise CliError("report writes several files; --out must be a directory")
    out.mkdir(parents=True, exist_ok=True)
    rel_rows, curve_rows, time_rows = [], [], []
    for _, d in runs:
        rel_rows.append([d.get("topology"), d.get("objective"), d.get("beta"), d["K1"], d["J"],
                         d.get("Jstar"), d.get("rel_err"), d.get("wall_ms")])
        pairs = sorted(zip(d["per_scenario"], d["probs"]), key=lambda t: -t[0])
        cum = 0.0
        for r, (loss, prob) in enumerate(pairs):
            cum += prob
            curve_rows.append([d.get("topology"), d.get("objective"), d["K1"], r, prob, cum, loss])
        time_rows.append([d.get("topology"), d.get("n_scenarios"), d["K1"], d.get("wall_ms")])
    outputs = [out / "relative_errors.csv", out / "sorted_losses.csv", out / "runtime.csv"]
    _write_rows(outputs[0], REPORT_COLUMNS, rel_rows)
    _write_rows(outputs[1], ["topology", "objective", "K1", "rank", "prob", "cum_prob", "loss"],
                curve_rows)
    _write_rows(outputs[2], ["topology", "n_scenarios", "K1", "wall_ms"], time_rows)
    print(json.dumps({"runs": len(runs), "out": str(out)}))
    return outputs, [str(p) for p, _ in runs]


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "oracle": cmd_oracle, "ablate": cmd_ablate, "export-milp": cmd_export_milp,
    "report": cmd_report,
}


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP threads (applied before numpy loads)")
    common.add_argument("--out", default=None, help="output file or directory")

    risk = argparse.ArgumentParser(add_help=False)
    risk.add_argument("--objective", choices=("robust", "cvar", "quantile", "expectation"),
                      default="expectation")
    risk.add_argument("--beta", type=float, default=0.95)
    risk.add_argument("--granularity", choices=("scenario", "flow"), default=None)

    pair = argparse.ArgumentParser(add_help=False)
    pair.add_argument("--instance")
    pair.add_argument("--scenarios")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="directory with instance.json, scenarios.json [, variants/]")
    data.add_argument("--variants", type=int, default=64,
                      help="demand-perturbed copies to synthesize when the data has none")
    data.add_argument("--sigma", type=float, default=0.01)
    data.add_argument("--val-fraction", type=float, default=0.2)
    data.add_argument("-K", "--K", dest="K", type=int, default=7)
    data.add_argument("--lr", type=float, default=1e-3)
    data.add_argument("--batch-size", type=int, default=16)
    data.add_argument("--epochs", type=int, default=30)
    data.add_argument("--patience", type=int, default=10)
    data.add_argument("--clip", type=float, default=10.0)

    parser = argparse.ArgumentParser(prog="riskte", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write an instance and scenario set")
    g.add_argument("--topology", choices=("complete", "ring", "grid", "fig1", "desk"),
                   default="complete")
    g.add_argument("--nodes", type=int, default=6)
    g.add_argument("--rows", type=int, default=3)
    g.add_argument("--cols", type=int, default=3)
    g.add_argument("--capacity", type=float, default=10.0)
    g.add_argument("--total-demand", type=float, default=100.0)
    g.add_argument("--weights", help='JSON object of gravity weights, default node degree')
    g.add_argument("--pairs", help="comma-separated src:dst pairs, default all pairs")
    g.add_argument("--k-sp", type=int, default=3)
    g.add_argument("--cutoff-c", type=float, default=50.0)
    g.add_argument("--weibull-s", type=float, default=2.0)
    g.add_argument("--shape", type=float, default=0.8)
    g.add_argument("--max-failures", type=int, default=2)
    g.add_argument("--variants", type=int, default=0)
    g.add_argument("--sigma", type=float, default=0.01)

    t = sub.add_parser("train", parents=[common, risk, pair, data], help="train a policy")
    t.add_argument("--variant", choices=("GR", "BR", "GS", "LS"), default="GR")

    for name, helptext in (("infer", "run a trained policy"), ("eval", "score a trained policy")):
        p = sub.add_parser(name, parents=[common, risk, pair], help=helptext)
        p.add_argument("--params", required=True)
        p.add_argument("-K1", "--K1", dest="K1", type=int, default=None)
        if name == "infer":
            p.add_argument("--csv", help="reservation CSV path")
            p.add_argument("--dump-features", help="CSV path for per-step feature tuples")
        else:
            p.add_argument("--reference", help="oracle result JSON holding J*")

    o = sub.add_parser("oracle", parents=[common, risk, pair], help="grid-search reference J*")
    o.add_argument("--step", type=float, default=0.05)
    o.add_argument("--search", choices=("reservation", "gs"), default="reservation")
    o.add_argument("--refine", action="store_true", help="polish with projected subgradient")
    o.add_argument("--refine-iters", type=int, default=200)
    o.add_argument("--restarts", type=int, default=0)

    a = sub.add_parser("ablate", parents=[common, risk, pair, data],
                       help="train each decision space with the same budget")
    a.add_argument("--methods", default="GS,LS,BR,GR")

    e = sub.add_parser("export-milp", parents=[common, risk, pair], help="write the LP model")
    e.add_argument("--big-m", type=float, default=1.0)
    e.add_argument("--strict-clamp", action="store_true")
    e.add_argument("--verify", help="solution file of 'name value' lines to audit")

    r = sub.add_parser("report", parents=[common], help="collect eval outputs into CSV tables")
    r.add_argument("--inputs", required=True)
    return parser


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("riskte: error: --threads must be positive", file=sys.stderr)
        return 2
    _limit_threads(args.threads)
    from .milp import MilpError
    from .network import InstanceError
    from .oracle import OracleError
    from .scenarios import ScenarioError
    from .unroll import RolloutError

    t0 = time.perf_counter()
    try:
        outputs, inputs = COMMANDS[args.command](args)
    except (CliError, InstanceError, ScenarioError, MilpError, OracleError, RolloutError,
            ValueError, FileNotFoundError) as exc:
        print(f"riskte {args.command}: error: {exc}", file=sys.stderr)
        return 2
    config = {k: v for k, v in vars(args).items() if k != "command"}
    if outputs:
        write_manifest(Path(outputs[0]).parent, args.command, argv, config, inputs, outputs,
                       time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
