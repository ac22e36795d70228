"""Command-line interface: ``bimp gen-sbm | train | evaluate | benchmark | diagnose``.

Exit codes: 0 on success, 1 on usage or input errors, 2 when training diverges.

Configuration files are flat JSON objects whose keys are the fields of
:class:`~bimp.model.ModelConfig` and :class:`~bimp.training.TrainConfig`.
Command-line flags override file values. Checkpoints are JSON objects with
the model config and the parameter/buffer arrays.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diagnostics import info_gain_profile, layerwise_compare
from .graph import GraphBatch, GraphError, GraphFormatError, SbmSpec, generate_regression_set, generate_sbm, read_graphs, write_graphs
from .heads import TaskKind
from .model import Model, ModelConfig, build_model
from .training import TrainConfig, evaluate, run_benchmark, train

log = logging.getLogger("bimp")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config and checkpoints


def load_config(path: str | None, overrides: dict) -> tuple[dict, dict]:
    """Split a flat config (file plus overrides) into model and train dicts."""
    flat = {}
    if path:
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise UsageError(f"config {path} must be a JSON object")
    flat.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(flat) - MODEL_KEYS - TRAIN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return ({k: v for k, v in flat.items() if k in MODEL_KEYS},
            {k: v for k, v in flat.items() if k in TRAIN_KEYS})


def infer_dims(model_kw: dict, graphs) -> dict:
    """Fill input widths and class count from data unless given."""
    kw = dict(model_kw)
    kw.setdefault("in_dim", int(graphs[0].node_features.shape[1]))
    if graphs[0].edge_features is not None:
        kw.setdefault("edge_in_dim", int(graphs[0].edge_features.shape[1]))
    task = kw.get("task", "node-class")
    if "num_classes" not in kw:
        if task == TaskKind.NODE_CLASS:
            kw["num_classes"] = int(max(g.node_labels.max() for g in graphs if g.num_nodes)) + 1
        elif task == TaskKind.GRAPH_CLASS:
            kw["num_classes"] = int(max(g.graph_target for g in graphs)) + 1
    return kw


def save_checkpoint(path, model: Model) -> None:
    state = {k: v.tolist() for k, v in model.state_dict().items()}
    Path(path).write_text(json.dumps({"config": model.cfg.to_dict(), "state": state}, sort_keys=True))


def load_checkpoint(path) -> Model:
    try:
        blob = json.loads(Path(path).read_text())
        model = build_model(ModelConfig(**blob["config"]), 0)
        model.load_state_dict({k: np.asarray(v, dtype=np.float64) for k, v in blob["state"].items()})
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc
    model.eval()
    return model


def _graphs(path) -> list:
    try:
        graphs = read_graphs(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except GraphFormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if not graphs:
        raise UsageError(f"{path} holds no graphs")
    return graphs


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_sbm(args) -> int:
    lo, hi = (args.nodes[0], args.nodes[-1])
    spec = SbmSpec(num_graphs=args.num_graphs, nodes_per_graph=(lo, hi), num_communities=args.communities,
                   p_in=args.p_in, p_out=args.p_out, corruption=args.corruption)
    try:
        if args.task == "graph-reg":
            graphs = generate_regression_set(args.num_graphs, spec, args.seed)
        else:
            graphs = generate_sbm(spec, args.seed)
    except GraphError as exc:
        raise UsageError(str(exc)) from exc
    write_graphs(args.out, graphs)
    log.info("wrote %d graphs to %s", len(graphs), args.out)
    return EXIT_OK


def _model_overrides(args) -> dict:
    return {
        "layer_kind": args.layer, "depth": args.depth, "hidden": args.hidden, "scheme": args.scheme,
        "lam": args.lam, "sigma_m": args.sigma_m, "clusters": args.clusters, "task": args.task,
        "lr": args.lr, "max_epochs": args.max_epochs, "batch_size": args.batch_size,
    }


def _configs(args, train_graphs) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = load_config(args.config, _model_overrides(args))
    try:
        cfg = ModelConfig(**infer_dims(model_kw, train_graphs))
        cfg.validate()
        tc = TrainConfig(**train_kw)
        tc.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg, tc


def cmd_train(args) -> int:
    train_graphs, val_graphs = _graphs(args.train), _graphs(args.val)
    test_graphs = _graphs(args.test) if args.test else None
    cfg, tc = _configs(args, train_graphs)
    model = build_model(cfg, args.seed)
    rec = train(model, train_graphs, val_graphs, tc, seed=args.seed, test_set=test_graphs)
    if args.out:
        Path(args.out).write_text(rec.to_json() + "\n")
    if args.checkpoint:
        save_checkpoint(args.checkpoint, model)
    print(json.dumps({"seed": rec.seed, "epochs": rec.epochs_run, "best_epoch": rec.best_epoch,
                      "test_metric": rec.test_metric, "diverged": rec.diverged}))
    return EXIT_DIVERGED if rec.diverged else EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.model)
    metric = evaluate(model, _graphs(args.graphs))
    print(json.dumps({"task": model.cfg.task, "metric": metric}))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    splits = (_graphs(args.train), _graphs(args.val), _graphs(args.test))
    cfg, tc = _configs(args, splits[0])
    seeds = args.seeds or tc.seeds
    if len(seeds) < 2:
        raise UsageError("benchmark needs at least two seeds")
    summary, records, states = run_benchmark(cfg, tc, splits, seeds=seeds, out_path=args.out,
                                             workers=args.workers, return_states=True)
    if args.checkpoint_dir:
        out_dir = Path(args.checkpoint_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for rec, state in zip(records, states):
            model = build_model(cfg, rec.seed)
            model.load_state_dict(state)
            save_checkpoint(out_dir / f"seed{rec.seed}.json", model)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_DIVERGED if summary["diverged_seeds"] else EXIT_OK


def _parse_model_arg(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    return (name, path) if sep else (Path(text).stem, text)


def info_gain_samples(model: Model, graphs) -> np.ndarray:
    """(graphs, layers) instance information gain for one model."""
    model.eval()
    rows = []
    with ad.no_grad():
        for g in graphs:
            out = model(GraphBatch([g]), capture=True)
            rows.append(info_gain_profile(g.node_features, out.trace))
    return np.array(rows)


def cmd_diagnose(args) -> int:
    graphs = _graphs(args.graphs)
    groups: dict[str, list[np.ndarray]] = {}
    for spec in args.model:
        name, path = _parse_model_arg(spec)
        groups.setdefault(name, []).append(info_gain_samples(load_checkpoint(path), graphs))
    samples = {name: np.concatenate(parts, axis=0) for name, parts in groups.items()}
    widths = {s.shape[1] for s in samples.values()}
    if len(widths) != 1:
        raise UsageError("models differ in depth; cannot compare layer-wise")
    names = list(samples)
    reference = samples[names[0]]
    rows = []
    for name in names:
        s = samples[name]
        pvals = [None] * s.shape[1]
        if name != names[0]:
            pvals = [c.p_value for c in layerwise_compare(reference, s)]
        for layer in range(s.shape[1]):
            rows.append({"layer": layer, "model": name, "mean_ig": float(s[:, layer].mean()),
                         "std_ig": float(s[:, layer].std(ddof=1)) if len(s) > 1 else 0.0,
                         "corrected_p": "" if pvals[layer] is None else pvals[layer]})
    handle = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(handle, fieldnames=["layer", "model", "mean_ig", "std_ig", "corrected_p"])
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if handle is not sys.stdout:
            handle.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--layer", choices=["gcn", "graphsage", "gat", "gatedgcn"])
    p.add_argument("--depth", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--scheme", choices=["none", "boosting", "interleaved", "dense"])
    p.add_argument("--lam", type=float, help="weight of the unsupervised loss")
    p.add_argument("--sigma-m", type=float, dest="sigma_m")
    p.add_argument("--clusters", type=int)
    p.add_argument("--task", choices=[k.value for k in TaskKind])
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bimp", description="Bilateral message passing on synthetic graph tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-sbm", help="generate stochastic-block-model graphs")
    p.add_argument("--nodes", type=int, nargs="+", required=True, metavar="N",
                   help="node count, or MIN MAX")
    p.add_argument("--communities", type=int, required=True)
    p.add_argument("--p-in", type=float, required=True, dest="p_in")
    p.add_argument("--p-out", type=float, required=True, dest="p_out")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-graphs", type=int, default=100, dest="num_graphs")
    p.add_argument("--corruption", type=float, default=0.8)
    p.add_argument("--task", choices=["node-class", "graph-reg"], default="node-class")
    p.set_defaults(func=cmd_gen_sbm)

    p = sub.add_parser("train", help="train one model")
    _add_model_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="write the run record here")
    p.add_argument("--checkpoint", help="write the trained model here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--graphs", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="train over several seeds and summarise")
    _add_model_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="JSON-lines results file")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("diagnose", help="layer-wise information gain of checkpoints")
    p.add_argument("--model", action="append", required=True,
                   help="checkpoint path or NAME=PATH; repeat a NAME to pool seeds")
    p.add_argument("--graphs", required=True)
    p.add_argument("--out", help="CSV output (default stdout)")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bimp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
