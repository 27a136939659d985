"""Command line entry point: ``covertnet <subcommand> [options]``.

Every option can also come from a ``--config`` file of ``key = value``
lines (keys are option names, dashes or underscores). Precedence is
command line, then file, then built-in defaults. Unknown keys are errors.

Exit codes: 0 success, 1 user error, 2 internal error, 3 a threshold from
``min_f1`` was missed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import platform
import sys
import time
from datetime import timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .features import FeatureError, FeatureTensor, assemble_features
from .graph import (RULE_PRESETS, ConfigError, NodeTable, SnapshotSeries, WindowSpec, bucket_snapshots, build_nodes,
                    build_series, resolve_rules, union_adjacency)
from .ingest import SOURCE_KINDS, SchemaError, ingest_files, parse_records, parse_timestamp, write_records, write_rejections
from .models import GraphInputs, ModelConfig, ModelError
from .numcore import save_params
from .pipeline import derive_seed
from .synthgen import PRESETS, ScenarioConfig, ScenarioError, generate
from .train_eval import (EvalReport, SplitMask, SuiteResult, TrainingError, evaluate_suite, format_table, run_model,
                         split, summarize)

logger = logging.getLogger("covertnet")

EXIT_OK, EXIT_USER, EXIT_INTERNAL, EXIT_THRESHOLD = 0, 1, 2, 3
LOG_FORMAT = "covertnet %(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{message}\n{self.format_usage().rstrip()}")


# -- option types ------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _name_list(text: str) -> list[str]:
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _thresholds(text: str) -> dict[str, float]:
    out = {}
    for part in _name_list(text):
        model, sep, value = part.partition("=")
        try:
            out[model.strip()] = float(value)
        except ValueError:
            sep = ""
        if not sep:
            raise argparse.ArgumentTypeError(f"expected model=value pairs, got {text!r}")
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file supplying defaults for any option below")
    p.add_argument("--seed", type=int, default=42, help="master seed; module seeds are derived from it (default 42)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="single-worker numeric paths and byte-identical outputs; run timings go to the log "
                        "only (default on)")
    p.add_argument("--jobs", type=int, default=1, help="parallel training runs when not deterministic")
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def _graph_opts(p):
    p.add_argument("--rules", default="relational",
                   help=f"edge rules: a preset ({', '.join(RULE_PRESETS)}) or comma-separated kinds")
    p.add_argument("--window-start", default="auto",
                   help="ISO-8601 start of window 0, or 'auto' for midnight of the earliest record")
    p.add_argument("--window-days", type=float, default=7.0, help="window width in days (default 7)")
    p.add_argument("--windows", type=int, default=None, help="snapshot count T (default: cover all records)")


def _train_opts(p):
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--model-config", help="model key = value file (kind, in_features, hidden, ...)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="covertnet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=version_text())
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic record set with planted motifs")
    _common(p)
    p.add_argument("--preset", default="default", choices=sorted(PRESETS))
    p.add_argument("--scenario", help="key = value overrides of the scenario preset")
    p.add_argument("--out", help="output directory (required)")

    p = sub.add_parser("ingest", help="parse, normalize and de-duplicate record files")
    _common(p)
    p.add_argument("--input", type=_name_list, help="comma-separated record files (required)")
    p.add_argument("--kind", choices=SOURCE_KINDS, help="source kind for rows lacking a source_kind column")
    p.add_argument("--out", help="output directory (required)")

    p = sub.add_parser("build-graph", help="nodes and weekly edge snapshots from canonical records")
    _common(p)
    p.add_argument("--records", help="canonical records file (required)")
    _graph_opts(p)
    p.add_argument("--out", help="output directory (required)")

    p = sub.add_parser("featurize", help="feature tensor and stratified split")
    _common(p)
    p.add_argument("--records", help="canonical records file (required)")
    p.add_argument("--graph", help="directory written by build-graph (required)")
    p.add_argument("--fractions", type=_float_list, default=[0.7, 0.15, 0.15], help="train,val,test fractions")
    p.add_argument("--out", help="output directory (required)")

    p = sub.add_parser("train", help="train one model and score it on the test split")
    _common(p)
    p.add_argument("--features", help="directory written by featurize (required)")
    p.add_argument("--graph", help="directory written by build-graph (required)")
    p.add_argument("--model", default="stgnn", choices=("stgnn", "gcn", "gat"))
    _train_opts(p)
    p.add_argument("--out", help="output directory (required)")

    p = sub.add_parser("evaluate", help="train several model kinds over several seeds and tabulate")
    _common(p)
    p.add_argument("--features", help="directory written by featurize (required)")
    p.add_argument("--graph", help="directory written by build-graph (required)")
    p.add_argument("--models", type=_name_list, default=["gcn", "gat", "stgnn"])
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3], help="replicate ids")
    _train_opts(p)
    p.add_argument("--min-f1", type=_thresholds, default={}, help="e.g. stgnn=0.85; exit 3 when a mean is below")
    p.add_argument("--out", help="output directory (required)")

    p = sub.add_parser("report", help="comparison table from an evaluate output directory")
    _common(p)
    p.add_argument("--runs", help="directory written by evaluate (required)")
    p.add_argument("--out", help="write the table here instead of stdout")

    p = sub.add_parser("pipeline", help="synth or ingest, then build-graph, featurize, evaluate and report")
    _common(p)
    p.add_argument("--preset", default="default", choices=sorted(PRESETS))
    p.add_argument("--scenario", help="key = value overrides of the scenario preset")
    p.add_argument("--input", type=_name_list, help="record files to ingest instead of generating")
    p.add_argument("--kind", choices=SOURCE_KINDS)
    _graph_opts(p)
    p.add_argument("--fractions", type=_float_list, default=[0.7, 0.15, 0.15])
    p.add_argument("--models", type=_name_list, default=["gcn", "gat", "stgnn"])
    p.add_argument("--seeds", type=_int_list, default=[1], help="replicate ids")
    _train_opts(p)
    p.add_argument("--min-f1", type=_thresholds, default={})
    p.add_argument("--out", help="output directory (required)")
    return parser


def version_text() -> str:
    import scipy

    return (f"covertnet {__version__} (python {platform.python_version()}, numpy {np.__version__}, "
            f"scipy {scipy.__version__})")


# -- config files ------------------------------------------------------------


def read_config(path: str) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # scenario keys such as T are case-sensitive
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise UserError(f"cannot parse config {path}: {exc}") from None
    return {k.replace("-", "_"): v for k, v in parser["run"].items()}


def _apply_config(sub: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    first = sub.parse_args(argv)
    if not first.config:
        return first
    values = read_config(first.config)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UserError(f"unknown key(s) in {first.config}: {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        action = actions[key]
        try:
            if isinstance(action, argparse.BooleanOptionalAction):
                defaults[key] = _bool(raw)
            elif action.choices is not None and raw not in action.choices:
                raise argparse.ArgumentTypeError(f"{raw!r} not one of {sorted(action.choices)}")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UserError(f"{first.config}: bad value for {key}: {exc}") from None
    sub.set_defaults(**defaults)
    return sub.parse_args(argv)


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) in (None, "", []):
            raise UserError(f"missing required option --{name.replace('_', '-')}")


# -- steps -------------------------------------------------------------------


def _scenario(args) -> ScenarioConfig:
    base = PRESETS[args.preset](seed=derive_seed(args.seed, "synthgen") % 2**32)
    if not args.scenario:
        return base
    values = {**{k: str(v) for k, v in vars(base).items()}, **read_config(args.scenario)}
    return ScenarioConfig.from_mapping(values)


def _window_spec(args, records) -> WindowSpec:
    width = timedelta(days=args.window_days)
    if args.window_start == "auto":
        return WindowSpec.covering(records, width)
    return WindowSpec(parse_timestamp(args.window_start), width)


def _load_records(path: str):
    records, rejections = parse_records(path)
    if rejections:
        logger.warning("%d rows of %s rejected", len(rejections), path)
    return records


def _write_graph(out: Path, records, args) -> tuple[NodeTable, SnapshotSeries]:
    spec = _window_spec(args, records)
    windows, T_seen = bucket_snapshots(records, spec)
    T = args.windows or T_seen
    if windows.max() >= T:
        raise UserError(f"records extend to window {int(windows.max())} but --windows is {T}")
    nodes = build_nodes(records)
    start = time.perf_counter()
    series = build_series(records, nodes, spec, resolve_rules(args.rules), windows=windows, T=T)
    elapsed = time.perf_counter() - start
    series.save(out, nodes)
    logger.info("graph nodes=%d T=%d edges=%d seconds=%.3f edges_per_second=%.0f", len(nodes), T,
                series.n_edges(), elapsed, series.n_edges() / max(elapsed, 1e-9))
    return nodes, series


def _write_features(out: Path, records, graph_dir: Path, fractions, seed) -> tuple[FeatureTensor, SplitMask]:
    series = SnapshotSeries.load(graph_dir)
    nodes = NodeTable.load(graph_dir / "nodes.csv")
    if nodes.keys != build_nodes(records).keys:
        raise UserError(f"records do not match the node table in {graph_dir}")
    windows, _ = bucket_snapshots(records, series.window_spec)
    try:
        mask = split(nodes.y, fractions, derive_seed(seed, "split") % 2**32)
    except ValueError as exc:
        raise UserError(f"cannot split labeled nodes: {exc}") from None
    tensor = assemble_features(nodes, records, windows, series.T, train_nodes=mask.train)
    out.mkdir(parents=True, exist_ok=True)
    tensor.save(out)
    mask.save(out / "split.csv", len(nodes))
    logger.info("features T=%d N=%d F=%d train=%d val=%d test=%d", *tensor.shape, len(mask.train),
                len(mask.val), len(mask.test))
    return tensor, mask


def _load_inputs(features_dir: Path, graph_dir: Path):
    tensor = FeatureTensor.load(features_dir)
    series = SnapshotSeries.load(graph_dir)
    nodes = NodeTable.load(graph_dir / "nodes.csv")
    mask = SplitMask.load(features_dir / "split.csv")
    inputs = GraphInputs(tensor.values, union_adjacency(series, len(nodes)))
    return inputs, nodes.y, mask


def _model_config(args, kind: str, in_features: int, seed: int) -> ModelConfig:
    if args.model_config:
        text = Path(args.model_config).read_text(encoding="utf-8")
        base = ModelConfig.from_text(text)
        return ModelConfig(**{**vars(base), "kind": kind, "in_features": in_features, "seed": seed})
    return ModelConfig(kind=kind, in_features=in_features, seed=seed)


def replicate_seed(seed: int, replicate: int) -> int:
    return derive_seed(seed, f"model:{replicate}") % 2**32


def _evaluate(args, inputs, y, mask, out: Path) -> int:
    bad = [m for m in args.models if m not in ("stgnn", "gcn", "gat")]
    if bad:
        raise UserError(f"unknown model kind(s): {', '.join(bad)}")
    base = _model_config(args, "stgnn", inputs.features.shape[2], 0)
    seeds = [replicate_seed(args.seed, r) for r in args.seeds]
    suite = evaluate_suite(inputs, y, mask, args.models, seeds, base=base, epochs=args.epochs, lr=args.lr,
                           clip_norm=args.clip_norm, n_jobs=1 if args.deterministic else args.jobs)
    for run in suite.runs:
        logger.info("run model=%s seed=%d status=%s f1=%.4f accuracy=%.4f seconds=%.1f", run.model, run.seed,
                    run.status, run.f1, run.accuracy, run.wall_clock_seconds)
        if args.deterministic:
            run.wall_clock_seconds = None
    suite.write(out)
    table = format_table(suite)
    (out / "table.md").write_text(table + "\n", encoding="utf-8")
    print(table)
    return _check_thresholds(suite, args.min_f1)


def _check_thresholds(suite: SuiteResult, thresholds: dict[str, float]) -> int:
    code = EXIT_OK
    for model, floor in thresholds.items():
        row = suite.summary.get(model)
        mean = row["f1"]["mean"] if row else float("nan")
        ok = row is not None and mean >= floor
        logger.log(logging.INFO if ok else logging.ERROR, "threshold model=%s metric=f1 floor=%.4f mean=%.4f %s",
                   model, floor, mean, "pass" if ok else "MISSED")
        if not ok:
            code = EXIT_THRESHOLD
    failed = [r for r in suite.runs if r.status != "ok"]
    if failed and code == EXIT_OK:
        logger.warning("%d run(s) failed; see runs.jsonl", len(failed))
    return code


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    _require(args, "out")
    config = _scenario(args)
    data = generate(config)
    data.write(args.out)
    logger.info("synth preset=%s nodes=%d records=%d motifs=%d", args.preset, config.n_nodes, len(data.records),
                len(data.motifs))
    return EXIT_OK


def cmd_ingest(args) -> int:
    _require(args, "input", "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, rejections = ingest_files(args.input, [args.kind] * len(args.input))
    write_records(records, out / "records.csv")
    write_rejections(rejections, out / "rejections.csv")
    logger.info("ingest files=%d records=%d rejected=%d", len(args.input), len(records), len(rejections))
    return EXIT_OK


def cmd_build_graph(args) -> int:
    _require(args, "records", "out")
    _write_graph(Path(args.out), _load_records(args.records), args)
    return EXIT_OK


def cmd_featurize(args) -> int:
    _require(args, "records", "graph", "out")
    _write_features(Path(args.out), _load_records(args.records), Path(args.graph), args.fractions, args.seed)
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "features", "graph", "out")
    inputs, y, mask = _load_inputs(Path(args.features), Path(args.graph))
    config = _model_config(args, args.model, inputs.features.shape[2], replicate_seed(args.seed, 1))
    report, result = run_model(config, inputs, y, mask, args.epochs, args.lr, args.clip_norm)
    out = Path(args.out)
    save_params(out / "checkpoint", result.params, seed=config.seed, step=result.best_epoch,
                extra={"model_config": config.to_text()})
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_f1", "grad_norm"])
        for e, row in enumerate(zip(*(result.history[k] for k in ("loss", "val_f1", "grad_norm")))):
            w.writerow([e, *(repr(float(v)) for v in row)])
    logger.info("train model=%s f1=%.4f accuracy=%.4f best_epoch=%d seconds=%.1f", config.kind, report.f1,
                report.accuracy, report.best_epoch, report.wall_clock_seconds)
    if args.deterministic:
        report.wall_clock_seconds = None
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "features", "graph", "out")
    inputs, y, mask = _load_inputs(Path(args.features), Path(args.graph))
    return _evaluate(args, inputs, y, mask, Path(args.out))


def cmd_report(args) -> int:
    _require(args, "runs")
    path = Path(args.runs) / "runs.jsonl"
    with open(path, encoding="utf-8") as fh:
        runs = [EvalReport(**json.loads(line)) for line in fh if line.strip()]
    table = format_table(SuiteResult(runs, summarize(runs)))
    if args.out:
        Path(args.out).write_text(table + "\n", encoding="utf-8")
    else:
        print(table)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    _require(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        records, rejections = ingest_files(args.input, [args.kind] * len(args.input))
        write_rejections(rejections, out / "rejections.csv")
    else:
        config = _scenario(args)
        data = generate(config)
        data.write(out / "synth")
        if args.window_start == "auto":
            args.window_start = config.start
        if args.windows is None:
            args.windows = config.T
        # round-trip through the record file format like a user would
        records, rejections = parse_records(out / "synth" / "records.csv")
        if rejections:
            raise RuntimeError(f"generator wrote {len(rejections)} unreadable rows")
    write_records(records, out / "records.csv")
    _write_graph(out / "graph", records, args)
    _write_features(out / "features", records, out / "graph", args.fractions, args.seed)
    inputs, y, mask = _load_inputs(out / "features", out / "graph")
    resolved = {k: v for k, v in vars(args).items() if k not in ("func",)}
    (out / "run.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")
    return _evaluate(args, inputs, y, mask, out / "eval")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "build-graph": cmd_build_graph,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}

USER_ERRORS = (UserError, SchemaError, ConfigError, ScenarioError, ModelError, FeatureError, TrainingError,
               FileNotFoundError, IsADirectoryError)


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        args = _apply_config(sub, argv[argv.index(ns.command) + 1:])
        logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
        return COMMANDS[ns.command](args)
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except USER_ERRORS as exc:
        print(f"covertnet: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:
        logging.getLogger("covertnet").exception("internal error: %s", exc)
        print(f"covertnet: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())
