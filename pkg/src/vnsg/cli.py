"""Command-line interface for the full pipeline.

Commands: generate, ingest, train, evaluate, sweep, diagnose,
export-viz. Configuration is TOML; command-line flags override file
values; the fully resolved config is echoed as JSON and written next to
the outputs. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import data as data_mod
from . import diagnostics, evaluation, graph as graph_mod
from .errors import DataError, NumericError, ShapeError, UsageError
from .model import StgcnConfig, adjacency_tensor, load_checkpoint
from .training import TrainConfig


@dataclass
class RunConfig:
    """Everything one experiment needs, resolvable from TOML + flags."""

    kind: str = "semi_adaptive"
    n_virtual: int = 4
    distance_threshold: float = 0.1
    adaptive_threshold: float = 0.1
    embedding_dim: int = 8
    seed: int = 0
    output_dir: str = "out"
    model: StgcnConfig = field(default_factory=StgcnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow_file: str = None
    meta_file: str = None
    edge_file: str = None
    synthetic: data_mod.SyntheticScenario = None

    def validate(self):
        if self.kind not in graph_mod.KINDS:
            raise UsageError(f"unknown adjacency kind {self.kind!r}")
        if self.kind == "distance" and self.n_virtual != 0:
            raise UsageError("kind=distance requires n_virtual = 0")
        if self.kind == "all_ones" and self.n_virtual != 1:
            raise UsageError("kind=all_ones requires n_virtual = 1")
        self.model.validate()
        self.train.validate()
        return self

    def resolved(self) -> dict:
        out = asdict(self)
        return out


def _build_dataclass(cls, table: dict, context: str):
    valid = {f for f in cls.__dataclass_fields__}
    unknown = set(table) - valid
    if unknown:
        raise UsageError(f"unknown key(s) in [{context}]: {', '.join(sorted(unknown))}")
    return cls(**table)


def load_run_config(path=None, overrides=None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"invalid TOML in {path}: {exc}") from exc

    cfg = RunConfig()
    run_table = dict(raw.get("run", {}))
    for key, value in run_table.items():
        if not hasattr(cfg, key) or key in ("model", "train", "synthetic"):
            raise UsageError(f"unknown key in [run]: {key}")
        setattr(cfg, key, value)
    if "model" in raw:
        cfg.model = _build_dataclass(StgcnConfig, dict(raw["model"]), "model")
    if "train" in raw:
        cfg.train = _build_dataclass(TrainConfig, dict(raw["train"]), "train")
    data_table = dict(raw.get("data", {}))
    synth = data_table.pop("synthetic", None)
    for key in ("flow_file", "meta_file", "edge_file"):
        if key in data_table:
            setattr(cfg, key, data_table.pop(key))
    if data_table:
        raise UsageError(f"unknown key(s) in [data]: {', '.join(sorted(data_table))}")
    if synth is not None:
        cfg.synthetic = _build_dataclass(data_mod.SyntheticScenario, dict(synth), "data.synthetic")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        setattr(cfg, key, value)
    # one root seed feeds every subsystem unless set explicitly
    if cfg.synthetic is not None and "seed" not in (raw.get("data", {}).get("synthetic") or {}):
        cfg.synthetic.seed = cfg.seed
    cfg.train.seed = cfg.seed
    return cfg.validate()


def output_dir(cfg: RunConfig) -> Path:
    root = os.environ.get("VNSG_OUT")
    path = Path(root) / cfg.output_dir if root else Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved(cfg: RunConfig, out: Path):
    resolved = json.dumps(cfg.resolved(), indent=2, default=str)
    (out / "resolved_config.json").write_text(resolved + "\n")
    print(resolved)


def load_dataset(cfg: RunConfig):
    if cfg.synthetic is not None:
        return data_mod.generate_synthetic(cfg.synthetic)
    if cfg.flow_file and cfg.meta_file and cfg.edge_file:
        return data_mod.ingest_largest(cfg.flow_file, cfg.meta_file, cfg.edge_file)
    raise UsageError(
        "missing data source: set [data.synthetic] or flow_file/meta_file/edge_file"
    )


# -- commands ----------------------------------------------------------

def cmd_generate(args) -> int:
    scenario = data_mod.SyntheticScenario(
        topology=args.topology, num_nodes=args.nodes, days=args.days,
        incident_rate=args.incident_rate, incident_magnitude=args.incident_magnitude,
        propagation_speed=args.propagation_speed, seed=args.seed,
    )
    graph, series = data_mod.generate_synthetic(scenario)
    out = Path(os.environ.get("VNSG_OUT", ".")) / args.out if not Path(args.out).is_absolute() \
        else Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph_mod.write_road_graph(graph, out / "nodes.csv", out / "edges.csv")
    data_mod.write_flow_csv(series, out / "flow.csv")
    (out / "scenario.json").write_text(json.dumps(asdict(scenario)) + "\n")
    print(json.dumps({
        "nodes": graph.num_nodes,
        "edges": len(graph.distances) // 2,
        "frames": series.num_frames,
        "files": [str(out / f) for f in ("nodes.csv", "edges.csv", "flow.csv")],
    }))
    return 0


def cmd_ingest(args) -> int:
    graph, series = data_mod.ingest_largest(args.flow, args.meta, args.edges)
    summary = {"nodes": graph.num_nodes, "frames": series.num_frames,
               "missing": int(np.isnan(series.values).sum())}
    if args.adjacency_out:
        adj = graph_mod.build_distance_adjacency(graph, args.distance_threshold)
        graph_mod.save_adjacency_csv(adj, args.adjacency_out)
        stats = graph_mod.graph_stats(adj)
        summary.update({"adjacency": args.adjacency_out,
                        "density": stats.density, "mean_degree": stats.mean_degree})
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    out = output_dir(cfg)
    _write_resolved(cfg, out)
    graph, series = load_dataset(cfg)
    ckpt = out / "checkpoint.vnsg"
    _, log, report, adjacency = evaluation.run_experiment(
        cfg.kind, cfg.n_virtual, cfg.seed, graph, series, cfg.model, cfg.train,
        cfg.distance_threshold, cfg.adaptive_threshold, cfg.embedding_dim,
        checkpoint_path=ckpt,
        log_fn=(None if args.quiet else lambda row: print(
            f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}  "
            f"val {row['val_loss']:.4f}", file=sys.stderr)),
    )
    log.save_jsonl(out / "trainlog.jsonl")
    evaluation.write_reports_csv([report], out / "metrics.csv")
    print(json.dumps({
        "checkpoint": str(ckpt),
        "best_epoch": log.best_epoch,
        "best_val_loss": log.best_val_loss,
        "test_avg_rmse": report.avg_rmse,
        "test_longterm_rmse": report.longterm_rmse,
    }))
    return 0


def _load_trained(cfg: RunConfig, checkpoint):
    params, model_cfg, meta = load_checkpoint(checkpoint)
    graph, series = load_dataset(cfg)
    adjacency = evaluation.adjacency_for_kind(
        meta.get("adjacency_kind", cfg.kind), graph,
        int(meta.get("n_virtual", cfg.n_virtual)),
        cfg.distance_threshold,
        float(meta.get("adaptive_threshold", cfg.adaptive_threshold)),
        int(meta.get("embedding_dim", cfg.embedding_dim)) or cfg.embedding_dim,
    )
    emb_dim = int(meta.get("embedding_dim", 0))
    return params, model_cfg, meta, graph, series, adjacency, emb_dim


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    out = output_dir(cfg)
    _write_resolved(cfg, out)
    params, model_cfg, meta, _, series, adjacency, emb_dim = _load_trained(cfg, args.checkpoint)
    _, _, test_set = data_mod.make_windows(
        series, model_cfg.input_window, model_cfg.output_horizons, adjacency.n_virtual)
    report = evaluation.evaluate(params, model_cfg, adjacency, test_set,
                                 seed=int(meta.get("seed", cfg.seed)),
                                 embedding_dim=emb_dim,
                                 adaptive_threshold=cfg.adaptive_threshold)
    evaluation.write_reports_csv([report], out / "metrics.csv")
    print(json.dumps({
        "avg_rmse": report.avg_rmse, "avg_mape": report.avg_mape,
        "longterm_rmse": report.longterm_rmse, "longterm_mape": report.longterm_mape,
        "metrics_csv": str(out / "metrics.csv"),
    }))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    out = output_dir(cfg)
    _write_resolved(cfg, out)
    graph, series = load_dataset(cfg)
    kinds = [k.strip() for k in args.kinds.split(",")]
    for k in kinds:
        if k not in ("adaptive", "semi_adaptive", "distance", "all_ones"):
            raise UsageError(f"unknown sweep kind {k!r}")
    nv_list = [int(v) for v in args.nv.split(",")]
    seeds = list(range(args.seeds))
    csv_path = out / "sweep.csv"
    reports = evaluation.sweep_virtual_nodes(
        graph, series, cfg.model, cfg.train, kinds, nv_list, seeds,
        cfg.distance_threshold, cfg.adaptive_threshold, cfg.embedding_dim,
        csv_path=csv_path)
    print(json.dumps({"cells": len(reports), "results": str(csv_path)}))
    return 0


def cmd_diagnose(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    out = output_dir(cfg)
    _write_resolved(cfg, out)
    params, model_cfg, _, _, series, adjacency, emb_dim = _load_trained(cfg, args.checkpoint)
    _, _, test_set = data_mod.make_windows(
        series, model_cfg.input_window, model_cfg.output_horizons, adjacency.n_virtual)
    report = diagnostics.pairwise_sensitivity(
        params, model_cfg, adjacency, test_set.inputs, max_hops=args.max_hops,
        num_samples=args.samples, seed=cfg.seed, embedding_dim=emb_dim,
        adaptive_threshold=cfg.adaptive_threshold)
    path = out / "sensitivity.json"
    path.write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_export_viz(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    out = output_dir(cfg)
    _write_resolved(cfg, out)
    params, model_cfg, _, graph, _, adjacency, emb_dim = _load_trained(cfg, args.checkpoint)
    snapshot = graph_mod.AdjacencyMatrix(
        adjacency_tensor(params, adjacency, emb_dim, cfg.adaptive_threshold).data,
        adjacency.n_real, adjacency.n_virtual, adjacency.kind,
        learnable_mask=adjacency.learnable_mask.copy(), meta=dict(adjacency.meta))
    diagnostics.export_real_to_virtual_heatmap(
        snapshot, out / "real_to_virtual.csv", out / "real_to_virtual.svg")
    vi = args.virtual_index
    diagnostics.export_node_weight_map(
        snapshot, graph, vi, out / f"virtual_{vi}_weights.csv",
        out / f"virtual_{vi}_weights.svg")
    graph_mod.save_adjacency_csv(snapshot, out / "adjacency.csv")
    print(json.dumps({"outputs": [str(out / n) for n in (
        "real_to_virtual.csv", "real_to_virtual.svg",
        f"virtual_{vi}_weights.csv", f"virtual_{vi}_weights.svg", "adjacency.csv")]}))
    return 0


# -- argument parsing --------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(args) -> dict:
    keys = ("kind", "n_virtual", "seed", "output_dir", "embedding_dim",
            "distance_threshold", "adaptive_threshold")
    return {k: getattr(args, k, None) for k in keys}


def _add_common(p, include_nv=True):
    p.add_argument("--config", help="TOML run configuration file")
    p.add_argument("--kind", choices=graph_mod.KINDS)
    if include_nv:
        p.add_argument("--nv", dest="n_virtual", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--distance-threshold", dest="distance_threshold", type=float)
    p.add_argument("--adaptive-threshold", dest="adaptive_threshold", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="vnsg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--topology", choices=data_mod.TOPOLOGIES, default="two-cluster-bridge")
    p.add_argument("--nodes", type=int, default=24)
    p.add_argument("--days", type=int, default=14)
    p.add_argument("--incident-rate", type=float, default=3.0)
    p.add_argument("--incident-magnitude", type=float, default=0.6)
    p.add_argument("--propagation-speed", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="dataset")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("ingest", help="validate and summarize sensor CSV files")
    p.add_argument("--flow", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--adjacency-out")
    p.add_argument("--distance-threshold", type=float, default=0.1)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train one configuration")
    _add_common(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="virtual-node-count sweep")
    _add_common(p, include_nv=False)
    p.add_argument("--kinds", default="adaptive,semi_adaptive")
    p.add_argument("--nv", default="1,2,5,10,20")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..N-1)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("diagnose", help="pairwise sensitivity diagnostics")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--max-hops", type=int, default=6)
    p.add_argument("--samples", type=int, default=40)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("export-viz", help="export heat map and weight tables")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--virtual-index", type=int, default=0)
    p.set_defaults(fn=cmd_export_viz)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ShapeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
