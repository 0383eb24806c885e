"""Command-line entry point.

Subcommands: stretch-test, gen-dataset, train, eval, ec-study, report.
Every run writes ``config.resolved.json`` next to its outputs.  Values come
from flags, then from ``--config`` (a JSON object), then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, clothsim, eccontext, expbench, gnn
from .clothsim import SimConfig
from .expbench import BenchConfig, StudyConfig, atomic_write_text
from .material import SIGMA_MAX, SampleGeometry, material_family

log = logging.getLogger("ectextile")

OUT_ENV = "ECTEXTILE_OUT"


class UsageError(Exception):
    """Bad configuration: reported with exit code 2."""


# Built-in defaults per subcommand.  Flags use the same names with dashes.
DEFAULTS = {
    "stretch-test": dict(material_id=0, family_size=40, family_seed=0, nonlinear_fraction=0.5,
                         sigma_max=SIGMA_MAX, n_ec=5, n_steps=200, rows=15,
                         rest_length=0.18, cross_section=0.18e-3, trajectory=True),
    "gen-dataset": dict(materials=40, steps=33, sim_rows=15, graph_rows=8, a_max=0.022,
                        nonlinear_fraction=0.5, segments=3, family_seed=0, full_scale=False),
    "train": dict(dataset="dataset", variant="ec", n_ec=1, epochs=None, batch=None, lr=None,
                  split_seed=0, workers=1),
    "eval": dict(dataset="dataset", checkpoint=None, split_seed=0),
    "ec-study": dict(dataset="study_dataset", materials=40, family_seed=1, n_ec_max=5,
                     seeds=6, test_samples=8, epochs=1000, hidden=8, lr=1e-3, batch=32,
                     linear=False),
    "report": dict(input=None, dataset=None, ec_study=None, variants="baseline,ec1,ec2,ec5,oracle",
                   epochs=None, seeds=3, split_seed=0, plots=True),
}
# Types of flags whose default is None; None epochs/batch/lr mean "as in the dataset's bench".
FLAG_TYPES = {"epochs": int, "batch": int, "lr": float}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out", default=None, help=f"output root (default ${OUT_ENV} or .)")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers (default 1)")
    p.add_argument("--config", default=None, help="JSON file of parameter values")


def _flag(p, name, typ, help=None):
    flag = "--" + name.replace("_", "-")
    if typ is bool:
        p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None,
                       help=help)
    else:
        p.add_argument(flag, dest=name, type=typ, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ectextile",
                                     description="Elastic Context textile toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "stretch-test": "stretch one family material to sigma_max; write curve and EC",
        "gen-dataset": "simulate a material family and write a dataset directory",
        "train": "train one GNN variant on the training split",
        "eval": "roll out checkpoints on the test split",
        "ec-study": "EC-dimension study with a small force regressor",
        "report": "render a comparison report (running it first if needed)",
    }
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        _add_common(p)
        for key, value in defaults.items():
            typ = type(value) if value is not None else FLAG_TYPES.get(key, str)
            if key == "checkpoint":
                p.add_argument("--checkpoint", dest="checkpoint", action="append", default=None,
                               help="checkpoint file (repeatable)")
                continue
            _flag(p, key, typ)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over config-file values over defaults; reject unknown keys."""
    defaults = dict(DEFAULTS[args.command], seed=0, jobs=1)
    from_file = {}
    if args.config:
        try:
            with open(args.config) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(from_file) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    cfg = {}
    for key, value in defaults.items():
        flag = getattr(args, key, None)
        cfg[key] = flag if flag is not None else from_file.get(key, value)
    out = args.out or os.environ.get(OUT_ENV) or "."
    cfg["out"] = str(out)
    return cfg


def _out_path(cfg: dict, rel) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(cfg["out"]) / p


def write_snapshot(directory: Path, command: str, cfg: dict) -> None:
    snap = {"command": command, "version": __version__, "config": cfg}
    atomic_write_text(directory / "config.resolved.json",
                      json.dumps(snap, indent=1, sort_keys=True))


def _json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------- subcommands

def cmd_stretch_test(cfg: dict) -> Path:
    laws = material_family(cfg["family_size"], cfg["family_seed"],
                           nonlinear_fraction=cfg["nonlinear_fraction"],
                           sigma_max=cfg["sigma_max"])
    ids = {law.id: law for law in laws}
    if cfg["material_id"] not in ids:
        raise UsageError(f"material id {cfg['material_id']} not in family of {len(laws)}")
    law = ids[cfg["material_id"]]
    geo = SampleGeometry(rest_length=cfg["rest_length"], cross_section=cfg["cross_section"],
                         rows=cfg["rows"], cols=cfg["rows"])
    curve, trace = eccontext.run_stretch_test(law, geo, SimConfig(), cfg["sigma_max"],
                                              cfg["n_steps"], return_trace=True)
    ec = eccontext.compute_ec(curve, cfg["n_ec"], cfg["sigma_max"])
    out = _out_path(cfg, f"stretch/material_{law.id}")
    out.mkdir(parents=True, exist_ok=True)
    _json(out / "curve.json", {"material_id": law.id, "sigma_max": cfg["sigma_max"],
                               "curve": [list(p) for p in curve.points]})
    _json(out / "ec.json", eccontext.ec_to_dict(ec, curve, law.id))
    rows = [["strain", "stress_pa"]] + [[repr(e), repr(s)] for e, s in curve.points]
    atomic_write_text(out / "curve.csv", "".join(",".join(r) + "\n" for r in rows))
    if cfg["trajectory"]:
        n = trace["raw_force"].size
        half = 0.5 * trace["increment"] * geo.rest_length
        actions = np.zeros((n, 3))
        actions[1:, 1] = half  # right gripper displacement per step
        times = np.arange(n) * trace["config"].dt
        rows = clothsim.trajectory_rows(times, actions, trace["raw_force"], trace["positions"])
        atomic_write_text(out / "trajectory.csv", "".join(",".join(r) + "\n" for r in rows))
        _json(out / "run_manifest.json",
              clothsim.run_manifest(trace["config"], geo, law, cfg["seed"]))
    write_snapshot(out, "stretch-test", cfg)
    print(json.dumps({"material_id": law.id, "ec": list(ec.moduli)}))
    return out


def _bench_from(cfg: dict) -> BenchConfig:
    keys = dict(n_materials=cfg["materials"], n_actions=cfg["steps"], sim_rows=cfg["sim_rows"],
                graph_rows=cfg["graph_rows"], a_max=cfg["a_max"],
                nonlinear_fraction=cfg["nonlinear_fraction"], segments=cfg["segments"],
                material_seed=cfg["family_seed"])
    if cfg["full_scale"]:
        return BenchConfig.full_scale(n_materials=cfg["materials"],
                                       material_seed=cfg["family_seed"])
    return BenchConfig(**keys)


def cmd_gen_dataset(cfg: dict) -> Path:
    bench = _bench_from(cfg)
    ds = expbench.generate_dataset(bench, jobs=cfg["jobs"])
    out = _out_path(cfg, "dataset")
    expbench.save_dataset(ds, out)
    write_snapshot(out.parent, "gen-dataset", cfg)
    print(json.dumps({"records": len(ds), "materials": len(ds.material_ids),
                      "skipped": len(ds.manifest["skipped"]), "path": str(out)}))
    return out


def _variant(cfg: dict) -> gnn.Variant:
    kind = cfg["variant"].lower()
    if kind == "ec":
        return gnn.Variant.ec(cfg["n_ec"])
    try:
        return gnn.Variant.parse(kind)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(cfg: dict) -> Path:
    ds = expbench.load_dataset(_out_path(cfg, cfg["dataset"]))
    bench = BenchConfig.from_dict(ds.manifest["bench"])
    overrides = {k: cfg[k] for k in ("epochs", "batch", "lr") if cfg[k] is not None}
    bench = BenchConfig(**{**bench.to_dict(), **overrides})
    variant = _variant(cfg)
    train_ids, test_ids = expbench.split_materials(ds.material_ids, bench.test_fraction,
                                                   cfg["split_seed"])
    result = expbench.train_variant(ds, variant, train_ids, cfg["seed"], bench,
                                    workers=cfg["workers"])
    out = _out_path(cfg, f"train/{variant.label}_seed{cfg['seed']}")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = result.model.to_dict(result.adam)
    ckpt.update({"train_ids": train_ids, "test_ids": test_ids, "split_seed": cfg["split_seed"]})
    atomic_write_text(out / "model.json", json.dumps(ckpt))
    rows = ["epoch,loss\n"] + [f"{k + 1},{v!r}\n" for k, v in enumerate(result.loss_history)]
    atomic_write_text(out / "loss.csv", "".join(rows))
    write_snapshot(out, "train", cfg)
    print(json.dumps({"variant": variant.label, "final_loss": result.loss_history[-1],
                      "checkpoint": str(out / "model.json")}))
    return out


def cmd_eval(cfg: dict) -> Path:
    if not cfg["checkpoint"]:
        raise UsageError("eval needs at least one --checkpoint")
    ds = expbench.load_dataset(_out_path(cfg, cfg["dataset"]))
    bench = BenchConfig.from_dict(ds.manifest["bench"])
    _, test_ids = expbench.split_materials(ds.material_ids, bench.test_fraction,
                                           cfg["split_seed"])
    out = _out_path(cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, expbench.VariantResult] = {}
    seeds = []
    for path in cfg["checkpoint"]:
        model, _ = gnn.GnnModel.load(_out_path(cfg, path))
        res = results.setdefault(model.variant.label, expbench.VariantResult(model.variant.label))
        seeds.append(model.seed)
        per_mat = expbench.evaluate_variant(model, ds, test_ids)
        for mid, r in per_mat.items():
            key = f"{model.seed}/{mid}"
            res.force_mse[key] = r["force_mse"]
            res.graph_mse[key] = r["graph_mse"]
            res.predicted_force[key] = r["force"]
            if r["diverged"]:
                res.diverged.append(key)
            pos, actions, _ = ds.trajectory(mid)
            roll = gnn.rollout(model, pos[0], actions, ds.edge_input(mid, model.variant))
            times = np.arange(1, roll.force.size + 1) * ds.manifest["sim_config"]["dt"]
            rows = clothsim.trajectory_rows(times, actions[:roll.force.size], roll.force,
                                            roll.positions[1:])
            atomic_write_text(out / f"rollout_{model.variant.label}_seed{model.seed}_m{mid}.csv",
                              "".join(",".join(r) + "\n" for r in rows))
    report = expbench.ExperimentReport(
        results, [], test_ids, sorted(set(seeds)),
        {mid: ds.trajectory(mid)[2].tolist() for mid in test_ids},
        expbench.config_hash(ds.manifest["bench"], sorted(cfg["checkpoint"])))
    report.save(out / "report.json")
    metrics = {label: {"force_mse": r.stats("force")[0], "graph_mse": r.stats("graph")[0],
                       "per_material": {k: {"force_mse": r.force_mse[k],
                                            "graph_mse": r.graph_mse[k]} for k in r.force_mse}}
               for label, r in results.items()}
    _json(out / "metrics.json", metrics)
    write_snapshot(out, "eval", cfg)
    print(json.dumps({k: v["force_mse"] for k, v in metrics.items()}))
    return out


def cmd_ec_study(cfg: dict) -> Path:
    path = _out_path(cfg, cfg["dataset"])
    if (path / "manifest.json").exists():
        ds = expbench.load_dataset(path)
    else:
        bench = BenchConfig(n_materials=cfg["materials"], material_seed=cfg["family_seed"],
                            nonlinear_fraction=0.0 if cfg["linear"] else 1.0)
        ds = expbench.generate_dataset(bench, jobs=cfg["jobs"])
        expbench.save_dataset(ds, path)
    study = StudyConfig(n_ec_values=tuple(range(cfg["n_ec_max"] + 1)),
                        seeds=tuple(cfg["seed"] + k for k in range(cfg["seeds"])),
                        test_samples=cfg["test_samples"], epochs=cfg["epochs"],
                        hidden=cfg["hidden"], batch=cfg["batch"], lr=cfg["lr"])
    table = expbench.run_ec_dim_study(ds, study)
    out = _out_path(cfg, "ec_study")
    out.mkdir(parents=True, exist_ok=True)
    _json(out / "ec_study.json", table)
    write_snapshot(out, "ec-study", cfg)
    print(json.dumps({k: v["mean"] for k, v in table["results"].items()}))
    return out


def cmd_report(cfg: dict) -> Path:
    out = _out_path(cfg, "report")
    if cfg["input"]:
        report = expbench.ExperimentReport.load(_out_path(cfg, cfg["input"]))
    elif cfg["dataset"]:
        ds = expbench.load_dataset(_out_path(cfg, cfg["dataset"]))
        bench = BenchConfig.from_dict(ds.manifest["bench"])
        overrides = {"seeds": [cfg["seed"] + k for k in range(cfg["seeds"])]}
        if cfg["epochs"] is not None:
            overrides["epochs"] = cfg["epochs"]
        bench = BenchConfig(**{**bench.to_dict(), **overrides})
        try:
            variants = [gnn.Variant.parse(v) for v in cfg["variants"].split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        report = expbench.run_comparison(ds, variants, bench, cfg["split_seed"], cfg["jobs"])
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report.json")
    else:
        raise UsageError("report needs --input REPORT.json or --dataset DIR")
    if cfg["ec_study"]:
        with open(_out_path(cfg, cfg["ec_study"])) as fh:
            report.ec_study = json.load(fh)
    written = expbench.render_report(report, out, plots=cfg["plots"])
    write_snapshot(out, "report", cfg)
    print(json.dumps({"summary": str(written["summary"]), "files": len(written)}))
    return out


COMMANDS = {"stretch-test": cmd_stretch_test, "gen-dataset": cmd_gen_dataset,
            "train": cmd_train, "eval": cmd_eval, "ec-study": cmd_ec_study,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic for any runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
