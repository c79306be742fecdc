"""``hgen`` command line: synth, train, eval, bench.

Run configuration is a flat JSON object; every key has a default (see
``RunConfig``) and unknown keys are rejected. Command-line flags override
the file.

Exit status: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import bench, kernels
from .ensemble import CheckpointError, ModelConfig, TrainConfig, TrainingError, load_checkpoint, save_checkpoint
from .hetgraph import (GraphFormatError, GraphValidationError, SyntheticSpec, generate_synthetic, load_heterograph,
                       save_heterograph, standard_fixture_spec)
from .layers import AlleleConfig
from .metapath import compile_cached
from .metrics import evaluate


class UsageError(Exception):
    """Bad flags or configuration (exit status 2)."""


@dataclass
class RunConfig:
    graph: str = ""
    out: str = "runs"
    mode: str = "hgen"
    seed: int = 0
    seeds: list = field(default_factory=list)  # empty: just ``seed``
    # training
    lr: float = 5e-3
    weight_decay: float = 5e-4
    max_epochs: int = 300
    patience: int = 30
    lam: float = 0.1
    feature_drop: bool = True
    edge_drop: float = 0.0
    regularizer: bool = True
    include_diagonal: bool = True
    # model
    k: int = 3
    attention_dim: int = 16
    projector_init: str = "zeros"
    decoder_hidden: int = 0
    backbone: str = "gcn"
    num_layers: int = 2
    hidden_dim: int = 64
    dropout: float = 0.3
    gat_heads: int = 1
    leaky_slope: float = 0.2
    # bench
    lambdas: list = field(default_factory=lambda: [0.0, 0.1, 0.5])
    ks: list = field(default_factory=lambda: [1, 2, 4, 8])
    benches: list = field(default_factory=lambda: ["runtime", "lambda", "allele"])
    bench_modes: list = field(default_factory=lambda: ["hgen", "naive_weighting", "hard_voting"])
    bench_epochs: int = 10
    bench_warmup: int = 2
    plot: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls()
        for key, value in doc.items():
            default = getattr(cfg, key)
            setattr(cfg, key, _coerce(key, value, default))
        return cfg

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds] if self.seeds else [int(self.seed)]

    def model_config(self) -> ModelConfig:
        allele = AlleleConfig(backbone=self.backbone, num_layers=self.num_layers, hidden_dim=self.hidden_dim,
                              dropout=self.dropout, gat_heads=self.gat_heads, leaky_slope=self.leaky_slope)
        return ModelConfig(mode=self.mode, k=self.k, attention_dim=self.attention_dim, allele=allele,
                           projector_init=self.projector_init, decoder_hidden=self.decoder_hidden)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, max_epochs=self.max_epochs,
                           patience=self.patience, lam=self.lam, feature_drop=self.feature_drop,
                           edge_drop=self.edge_drop, regularizer=self.regularizer,
                           include_diagonal=self.include_diagonal, seed=self.seed if seed is None else seed)


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be true or false")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise UsageError(f"config key {key!r} must be a list")
        return list(value)
    if isinstance(default, (int, float)) and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise UsageError(f"config key {key!r} must be a number")
    if isinstance(default, int) and not isinstance(default, bool):
        if float(value) != int(value):
            raise UsageError(f"config key {key!r} must be an integer")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise UsageError(f"config key {key!r} must be a string")
    return value


def _read_json(path, what="config"):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def _parse_list(text: str, kind, flag: str) -> list:
    items = [s for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError(f"{flag} needs at least one value")
    try:
        return [kind(s) for s in items]
    except ValueError:
        raise UsageError(f"{flag}: cannot parse {text!r}") from None


def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# --------------------------------------------------------------------------
# configuration from file + flags
# --------------------------------------------------------------------------

def run_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(_read_json(args.config)) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "graph": args.graph, "out": args.out, "mode": args.mode, "seed": args.seed, "lam": args.lam,
        "k": args.k, "backbone": args.backbone, "edge_drop": args.edge_drop,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.seeds is not None:
        cfg.seeds = _parse_list(args.seeds, int, "--seeds")
    if args.lambdas is not None:
        cfg.lambdas = _parse_list(args.lambdas, float, "--lambdas")
    if args.ks is not None:
        cfg.ks = _parse_list(args.ks, int, "--ks")
    if args.no_regularizer:
        cfg.regularizer = False
    if args.no_feature_drop:
        cfg.feature_drop = False
    if getattr(args, "plot", False):
        cfg.plot = True
    if getattr(args, "only", None):
        cfg.benches = _parse_list(args.only, str, "--only")
    try:
        cfg.model_config()
        cfg.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _load_graph(path):
    if not path:
        raise UsageError("no graph file given (--graph or config key 'graph')")
    if not Path(path).exists():
        raise UsageError(f"graph file not found: {path}")
    graph = load_heterograph(path)
    return graph, compile_cached(graph, path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = _read_json(args.config, "spec") if args.config else {}
    base = asdict(standard_fixture_spec())
    unknown = sorted(set(doc) - set(base))
    if unknown:
        raise UsageError(f"unknown spec key(s): {', '.join(unknown)}")
    base.update(doc)
    if args.seed is not None:
        base["seed"] = args.seed
    try:
        spec = SyntheticSpec(**base)
        graph = generate_synthetic(spec)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out or "graph.json")
    if out.suffix != ".json" and (out.is_dir() or not out.suffix):
        out = out / "graph.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_heterograph(graph, out)
    summary = graph.summary()
    print(json.dumps({"path": str(out), **summary}, sort_keys=True))
    return 0


def _report_dict(report) -> dict:
    d = report.to_dict()
    d.pop("epoch_time", None)  # timing lives in its own file
    return d


def cmd_train(args) -> int:
    cfg = run_config(args)
    graph, mpgs = _load_graph(cfg.graph)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mc = cfg.model_config()
    reports = {}
    for seed in cfg.seed_list():
        tc = cfg.train_config(seed)
        t0 = time.perf_counter()
        model, result, report = bench.train_and_evaluate(graph, mpgs, mc, tc, seed)
        wall = time.perf_counter() - t0
        save_checkpoint(out / f"checkpoint_seed{seed}.json", model, tc)
        _write_json(out / f"history_seed{seed}.json",
                    {"best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc, "epochs": result.history})
        _write_json(out / f"report_seed{seed}.json", _report_dict(report))
        _write_json(out / f"timing_seed{seed}.json",
                    {"wall_seconds": wall, "epoch_seconds": result.epoch_times,
                     "mean_epoch_seconds": float(np.mean(result.epoch_times)) if result.epoch_times else None,
                     "kernel_backend": kernels.backend})
        reports[seed] = report
        print(f"seed {seed}: test acc {report.accuracy:.4f}  macro AUC {report.macro_auc:.4f}  "
              f"best epoch {result.best_epoch}")
    if len(reports) > 1:
        accs = [r.accuracy for r in reports.values()]
        aucs = [r.macro_auc for r in reports.values() if r.macro_auc is not None]
        agg = {"seeds": list(reports), "mode": cfg.mode,
               "accuracy_mean": float(np.mean(accs)), "accuracy_std": float(np.std(accs)),
               "macro_auc_mean": float(np.mean(aucs)) if aucs else None,
               "macro_auc_std": float(np.std(aucs)) if aucs else None,
               "allele_accuracy_mean": float(np.mean([r.allele_accuracy_mean for r in reports.values()]))}
        _write_json(out / "aggregate.json", agg)
        print(f"aggregate over {len(accs)} seeds: acc {agg['accuracy_mean']:.4f} ± {agg['accuracy_std']:.4f}")
    _write_json(out / "config.json", asdict(cfg))
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    graph_path = args.graph
    if args.config and not graph_path:
        graph_path = RunConfig.from_dict(_read_json(args.config)).graph
    graph, mpgs = _load_graph(graph_path)
    model, _ = load_checkpoint(args.checkpoint, graph, mpgs)
    doc = _report_dict(evaluate(model, graph))
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    _write_json(out / (Path(args.checkpoint).stem + ".eval.json"), doc)
    return 0


def cmd_bench(args) -> int:
    cfg = run_config(args)
    for key in ("lambdas", "ks", "benches"):
        if not getattr(cfg, key):
            raise UsageError(f"sweep list {key!r} is empty")
    unknown = sorted(set(cfg.benches) - {"runtime", "lambda", "allele"})
    if unknown:
        raise UsageError(f"unknown bench(es): {', '.join(unknown)}")
    graph, mpgs = _load_graph(cfg.graph)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mc, tc = cfg.model_config(), cfg.train_config()
    seeds = cfg.seed_list() if cfg.seeds else list(range(5))
    summary = {}
    if "runtime" in cfg.benches:
        if len(cfg.ks) < 2:
            raise UsageError("runtime sweep needs at least two k values")
        rt = bench.runtime_sweep(graph, mc, tc, cfg.ks, epochs=cfg.bench_epochs, warmup=cfg.bench_warmup)
        _write_csv(out / "runtime.csv", [{"k": k, "mean_epoch_seconds": t}
                                         for k, t in zip(rt["k"], rt["mean_epoch_time"])])
        _write_json(out / "runtime_fit.json", {key: rt[key] for key in ("slope", "intercept", "r2")} |
                    {"raw": {str(k): v for k, v in rt["raw"].items()}, "kernel_backend": kernels.backend})
        summary["runtime_r2"] = rt["r2"]
        print(f"runtime: R^2 = {rt['r2']:.4f} over k = {rt['k']}")
    if "lambda" in cfg.benches:
        sweep = bench.lambda_sweep(graph, mpgs, mc, tc, cfg.lambdas, seeds)
        _write_csv(out / "lambda_sweep.csv", sweep["rows"])
        _write_json(out / "lambda_stats.json", {str(k): v for k, v in sweep["stats"].items()})
        for lam, st in sweep["stats"].items():
            print(f"lambda {lam}: solo spread {st['spread_mean']:.4f}  ||S||_1 {st['s_l1_mean']:.4f}")
        summary["lambda"] = {str(k): v["spread_mean"] for k, v in sweep["stats"].items()}
    if "allele" in cfg.benches:
        var = bench.allele_variance(graph, mpgs, mc, tc, seeds, cfg.bench_modes)
        _write_csv(out / "allele_variance.csv", var["rows"])
        _write_json(out / "allele_stats.json", var["stats"])
        for mode, st in var["stats"].items():
            print(f"{mode}: ensemble {st['ensemble']['mean']:.4f}  alleles {st['alleles']['mean']:.4f} "
                  f"(std {st['alleles']['std']:.4f})")
    if cfg.plot:
        _plot(out, cfg)
    _write_json(out / "bench_config.json", asdict(cfg))
    return 0


def _plot(out: Path, cfg: RunConfig):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise UsageError("--plot needs matplotlib (pip install 'artifact[plot]')") from None
    if (out / "runtime.csv").exists():
        rows = list(csv.DictReader(open(out / "runtime.csv")))
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([int(r["k"]) for r in rows], [float(r["mean_epoch_seconds"]) for r in rows], "o-")
        ax.set_xlabel("k (alleles per meta-path)")
        ax.set_ylabel("seconds / epoch")
        fig.tight_layout()
        fig.savefig(out / "runtime.png", dpi=120)
        plt.close(fig)
    if (out / "lambda_sweep.csv").exists():
        rows = list(csv.DictReader(open(out / "lambda_sweep.csv")))
        lams = sorted({float(r["lambda"]) for r in rows})
        data = [[float(r["solo_accuracy"]) for r in rows if float(r["lambda"]) == lam] for lam in lams]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.violinplot(data, showmeans=True)
        ax.set_xticks(range(1, len(lams) + 1), [str(l) for l in lams])
        ax.set_xlabel("lambda")
        ax.set_ylabel("solo meta-path accuracy")
        fig.tight_layout()
        fig.savefig(out / "lambda_sweep.png", dpi=120)
        plt.close(fig)
    if (out / "allele_variance.csv").exists():
        rows = list(csv.DictReader(open(out / "allele_variance.csv")))
        modes = list(dict.fromkeys(r["mode"] for r in rows))
        data, labels = [], []
        for mode in modes:
            for kind in ("ensemble", "allele"):
                data.append([float(r["accuracy"]) for r in rows
                             if r["mode"] == mode and r["learner"].startswith(kind)])
                labels.append(f"{mode}\n{kind}")
        fig, ax = plt.subplots(figsize=(1.6 * len(data), 3))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(data) + 1), labels, fontsize=7)
        ax.set_ylabel("test accuracy")
        fig.tight_layout()
        fig.savefig(out / "allele_variance.png", dpi=120)
        plt.close(fig)


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--graph", help="graph file")
    p.add_argument("--mode", choices=["hgen", "naive_weighting", "hard_voting"])
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.add_argument("--k", type=int)
    p.add_argument("--ks", help="comma-separated k values")
    p.add_argument("--backbone", choices=["gcn", "sage", "gat"])
    p.add_argument("--no-regularizer", action="store_true")
    p.add_argument("--edge-drop", type=float)
    p.add_argument("--no-feature-drop", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgen", description="Heterogeneous-graph ensemble learning")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate a synthetic heterograph")
    p.add_argument("--config", help="JSON synthetic spec (keys override the standard fixture)")
    p.add_argument("--out", help="output graph file or directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("train", help="train and evaluate one model per seed")
    _common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="evaluate a checkpoint on a graph")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("bench", help="runtime, lambda and allele-variance benchmarks")
    _common(p)
    p.add_argument("--only", help="comma-separated subset of runtime,lambda,allele")
    p.add_argument("--plot", action="store_true", help="render PNG figures (needs matplotlib)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, GraphFormatError, GraphValidationError) as exc:
        print(f"hgen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, CheckpointError, OSError, FloatingPointError) as exc:
        print(f"hgen {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
