"""Command-line entry points binding the library into runnable experiments.

Subcommands: train, eval, audit, theory-check, sweep, ablate, dump-sim.
Every run writes a plain-text manifest with all resolved configuration
values, so outputs are reproducible from their manifest alone.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure,
4 theory-check violation.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
from pathlib import Path

import numpy as np

from fairmp import __version__, backend, data, kernels, metrics, model, theory
from fairmp.errors import DataError, FairmpError, NumericError, TheoryViolation
from fairmp.graph import (SPLIT_TEST, SPLIT_VAL, homophily_ratio,
                          partition_by_sensitive, sensitive_homophily_ratio)
from fairmp.propagation import PropagationConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_THEORY = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="fairmp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", type=Path, default=None,
                       help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="config override, repeatable")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default runs/<command>)")
        p.add_argument("--seed", type=int, default=None,
                       help="override train.seed / theory.seed")
    return parser


def _resolve(args) -> tuple[dict, Path]:
    cfg = data.load_config(args.config, args.set)
    if args.seed is not None:
        cfg["train.seed"] = args.seed
        cfg["theory.seed"] = args.seed
    out = args.out if args.out is not None else Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _load_graph(cfg: dict):
    if not cfg["data.path"]:
        raise DataError("data.path must point to a dataset directory")
    desc = data.DatasetDescriptor(cfg["data.path"], cfg["data.label_col"],
                                  cfg["data.sens_col"], cfg["data.normalize"])
    graph = data.load_dataset(desc)
    n = graph.num_nodes
    train_count = cfg["split.train_count"] or max(1, n // 2)
    val_count = (cfg["split.val_count"] if cfg["split.val_count"] is not None
                 else max(1, n // 4))
    split = data.load_or_make_splits(desc, graph, cfg["train.seed"],
                                     train_count, val_count)
    return graph.with_split(split), desc


def _effective_lambda_f(cfg: dict, part) -> float:
    lf = cfg["prop.lambda_f"]
    if cfg["prop.lambda_f_pairs"]:
        ns = cfg["prop.sample_size"]
        lf *= float(ns * ns) if ns > 0 else float(part.n0 * part.n1)
    return lf


def _train_config(cfg: dict, part, seed: int) -> model.TrainConfig:
    prop = PropagationConfig(
        variant=cfg["prop.variant"], backbone=cfg["prop.backbone"],
        k=cfg["prop.k"], lambda_s=cfg["prop.lambda_s"],
        lambda_f=_effective_lambda_f(cfg, part), alpha=cfg["prop.alpha"],
        kernel_grad=cfg["prop.kernel_grad"],
        gin_epsilon=cfg["prop.gin_epsilon"],
        sample_size=cfg["prop.sample_size"])
    return model.TrainConfig(
        prop=prop, lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
        epochs=cfg["train.epochs"], seed=seed,
        m_layers=cfg["train.m_layers"], hidden=cfg["train.hidden"],
        loss_variant=cfg["train.loss_variant"], ablation=cfg["train.ablation"])


def _manifest(cfg: dict, out: Path, extra: dict) -> None:
    values = {k: v for k, v in cfg.items()}
    values.update({
        "resolved.version": __version__,
        "resolved.backend": backend.BACKEND_NAME,
        "resolved.loss_reduction": "mean",
    })
    values.update({f"resolved.{k}": v for k, v in extra.items()})
    data.write_manifest(values, out / "manifest.txt")


def _final_report(graph, params, tcfg) -> metrics.EvalReport:
    """Deterministic full-coupling evaluation of the returned parameters."""
    prop = model.resolve_ablation(tcfg)
    probs = model.predict(graph, params, prop)
    mask = graph.split_mask(SPLIT_TEST)
    if not mask.any():
        mask = graph.split_mask(SPLIT_VAL)
    return metrics.evaluate(probs, graph.labels, graph.sensitive, mask,
                            lenient=True)


def _run_repetitions(graph, cfg: dict, out: Path | None,
                     save_models: bool = False):
    """Train ``train.repetitions`` seeded runs; returns per-rep final
    reports and the per-epoch record lists."""
    part = partition_by_sensitive(graph)
    reports, all_records = [], []
    for rep in range(cfg["train.repetitions"]):
        tcfg = _train_config(cfg, part, cfg["train.seed"] + rep)
        params, records = model.train(graph, tcfg)
        reports.append(_final_report(graph, params, tcfg))
        all_records.append(records)
        if out is not None:
            data.write_metrics_csv(records, out / f"epochs_rep{rep}.csv")
            if save_models:
                model.save_params(params, model.resolve_ablation(tcfg),
                                  out / f"model_rep{rep}.npz")
    return reports, all_records


def _summary_stats(reports) -> dict:
    return {
        "acc": [r.accuracy for r in reports],
        "f1": [r.f1 for r in reports],
        "auc": [r.auc for r in reports],
        "dp": [r.delta_dp for r in reports],
        "eo": [r.delta_eo for r in reports],
    }


def cmd_train(args) -> int:
    """Train over seeded repetitions; write per-epoch CSVs, a summary CSV,
    saved models, and a manifest."""
    cfg, out = _resolve(args)
    graph, _ = _load_graph(cfg)
    part = partition_by_sensitive(graph)
    reports, _ = _run_repetitions(graph, cfg, out, save_models=True)
    stats = _summary_stats(reports)
    data.write_summary_csv(stats, out / "summary.csv")
    _manifest(cfg, out, {
        "nodes": graph.num_nodes, "edges": graph.num_edges,
        "features": graph.num_features,
        "lambda_f_effective": _effective_lambda_f(cfg, part),
    })
    for name, values in stats.items():
        arr = np.asarray(values)
        print(f"{name}: {100 * arr.mean():.2f} +- {100 * arr.std():.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate a saved model on the configured mask."""
    cfg, out = _resolve(args)
    if not cfg["model.path"]:
        raise DataError("model.path must point to a saved model")
    graph, _ = _load_graph(cfg)
    params, prop = model.load_params(cfg["model.path"])
    probs = model.predict(graph, params, prop)
    tag = SPLIT_VAL if cfg["eval.mask"] == "val" else SPLIT_TEST
    report = metrics.evaluate(probs, graph.labels, graph.sensitive,
                              graph.split_mask(tag), lenient=True)
    _manifest(cfg, out, {"nodes": graph.num_nodes})
    for name, value in (("acc", report.accuracy), ("f1", report.f1),
                        ("auc", report.auc), ("dp", report.delta_dp),
                        ("eo", report.delta_eo)):
        print(f"{name}: {100 * value:.2f}")
    return EXIT_OK


def cmd_audit(args) -> int:
    """Print dataset statistics: sizes, homophily ratios, and the
    feature-level group discrepancy."""
    cfg, out = _resolve(args)
    graph, _ = _load_graph(cfg)
    part = partition_by_sensitive(graph)
    kcfg = kernels.KernelConfig(cfg["prop.alpha"])
    lines = {
        "nodes": graph.num_nodes,
        "edges": graph.num_edges,
        "features": graph.num_features,
        "group0": part.n0,
        "group1": part.n1,
        "homophily": round(homophily_ratio(graph), 6),
        "sensitive_homophily": round(sensitive_homophily_ratio(graph), 6),
        "feature_mmd": float(kernels.mmd(graph.features, part, kcfg)),
    }
    _manifest(cfg, out, {})
    for key, value in lines.items():
        print(f"{key} = {value}")
    return EXIT_OK


def cmd_theory_check(args) -> int:
    """Evaluate both demographic-parity bounds on random instances; write
    one CSV row per instance and fail on any violation."""
    cfg, out = _resolve(args)
    n_inst = cfg["theory.instances"]
    if n_inst == 0:
        raise _UsageError("nothing checked: theory.instances is 0")
    rng = np.random.default_rng(cfg["theory.seed"])
    rows = []
    violations = 0
    for i in range(n_inst):
        x, graph, part = theory.random_instance(
            rng, cfg["theory.nodes"], cfg["theory.dim"],
            cfg["theory.edge_prob"])
        w = rng.uniform(-1.0, 1.0, size=(cfg["theory.dim"], 2))
        pred = theory.check_bound_thm1(x, graph, part, w, cfg["theory.alpha"])
        rep = theory.check_bound_thm2(x, graph, part, cfg["theory.alpha"])
        ok = pred.holds and rep.holds
        violations += 0 if ok else 1
        rows.append([i, repr(pred.lhs), repr(pred.rhs), int(pred.holds),
                     repr(rep.lhs), repr(rep.rhs), int(rep.holds), int(ok)])
    path = out / "bounds.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "thm1_lhs", "thm1_rhs", "thm1_holds",
                    "thm2_lhs", "thm2_rhs", "thm2_holds", "holds"])
        w.writerows(rows)
    _manifest(cfg, out, {"violations": violations})
    print(f"checked {n_inst} instances, {violations} violations -> {path}")
    if violations:
        raise TheoryViolation(f"{violations} bound violations recorded in "
                              f"{path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Train the cartesian product of all sweep.* value lists; flag the
    best row by validation accuracy (ties: lower validation dp)."""
    cfg, out = _resolve(args)
    sweep_keys = sorted(k for k in cfg if k.startswith("sweep."))
    if not sweep_keys:
        raise DataError("no sweep.* keys configured")
    graph, _ = _load_graph(cfg)
    part = partition_by_sensitive(graph)
    base_keys = [k[len("sweep."):] for k in sweep_keys]
    grids = [cfg[k] for k in sweep_keys]
    rows = []
    for combo in itertools.product(*grids):
        combo_cfg = dict(cfg)
        for key, value in zip(base_keys, combo):
            combo_cfg[key] = value
        reports, all_records = _run_repetitions(graph, combo_cfg, None)
        stats = _summary_stats(reports)
        best_val = [max(recs, key=lambda r: (r.val.accuracy, -r.val.delta_dp))
                    for recs in all_records]
        rows.append({
            "combo": combo,
            "val_acc": float(np.mean([r.val.accuracy for r in best_val])),
            "val_dp": float(np.mean([r.val.delta_dp for r in best_val])),
            "stats": {k: (float(np.mean(v)), float(np.std(v)))
                      for k, v in stats.items()},
        })
    best_idx = max(range(len(rows)),
                   key=lambda i: (rows[i]["val_acc"], -rows[i]["val_dp"]))
    path = out / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(base_keys + ["val_acc", "val_dp",
                                "acc_mean", "acc_std", "f1_mean", "f1_std",
                                "auc_mean", "auc_std", "dp_mean", "dp_std",
                                "eo_mean", "eo_std", "best"])
        for i, row in enumerate(rows):
            flat = []
            for name in ("acc", "f1", "auc", "dp", "eo"):
                flat.extend([repr(row["stats"][name][0]),
                             repr(row["stats"][name][1])])
            w.writerow(list(row["combo"])
                       + [repr(row["val_acc"]), repr(row["val_dp"])]
                       + flat + [int(i == best_idx)])
    _manifest(cfg, out, {"combos": len(rows)})
    print(f"swept {len(rows)} configurations -> {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Run every ablation variant with the shared configuration."""
    cfg, out = _resolve(args)
    graph, _ = _load_graph(cfg)
    rows = []
    for ablation in model.ABLATIONS:
        combo_cfg = dict(cfg)
        combo_cfg["train.ablation"] = ablation
        reports, _ = _run_repetitions(graph, combo_cfg, None)
        stats = _summary_stats(reports)
        rows.append((ablation, {k: (float(np.mean(v)), float(np.std(v)))
                                for k, v in stats.items()}))
    path = out / "ablate.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ablation", "acc_mean", "acc_std", "f1_mean", "f1_std",
                    "auc_mean", "auc_std", "dp_mean", "dp_std", "eo_mean",
                    "eo_std"])
        for ablation, stats in rows:
            flat = []
            for name in ("acc", "f1", "auc", "dp", "eo"):
                flat.extend([repr(stats[name][0]), repr(stats[name][1])])
            w.writerow([ablation] + flat)
    _manifest(cfg, out, {})
    print(f"ran {len(rows)} ablations -> {path}")
    return EXIT_OK


def cmd_dump_sim(args) -> int:
    """Dump kernel similarities of sampled cross-group pairs on the
    penultimate representation of a trained model."""
    cfg, out = _resolve(args)
    graph, _ = _load_graph(cfg)
    part = partition_by_sensitive(graph)
    if cfg["model.path"]:
        params, prop = model.load_params(cfg["model.path"])
    else:
        tcfg = _train_config(cfg, part, cfg["train.seed"])
        params, _records = model.train(graph, tcfg)
        prop = model.resolve_ablation(tcfg)
    layers = model.plain_layers(graph, params, prop)
    f_prev = layers[-2] if len(layers) > 1 else layers[-1]
    rng = np.random.default_rng([cfg["train.seed"], 4])
    n_pairs = cfg["sim.pairs"]
    i_idx = rng.choice(part.idx0, size=n_pairs, replace=True)
    j_idx = rng.choice(part.idx1, size=n_pairs, replace=True)
    kcfg = kernels.KernelConfig(cfg["prop.alpha"])
    path = out / "similarity.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "same_label", "kernel"])
        for i, j in zip(i_idx.tolist(), j_idx.tolist()):
            k = kernels.rbf_kernel(f_prev[i], f_prev[j], kcfg)
            w.writerow([i, j, int(graph.labels[i] == graph.labels[j]),
                        repr(k)])
    _manifest(cfg, out, {"pairs": n_pairs})
    print(f"wrote {n_pairs} pair similarities -> {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "theory-check": cmd_theory_check,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "dump-sim": cmd_dump_sim,
}


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except _UsageError as ex:
        print(f"usage error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    except TheoryViolation as ex:
        print(f"theory violation: {ex}", file=sys.stderr)
        return EXIT_THEORY
    except NumericError as ex:
        print(f"numeric failure: {ex}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FairmpError, OSError, ValueError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
