"""Command-line front end: scan, series, ablate, train-demo and report."""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import CSV_HEADER, MAPPINGS, ProbeConfig, ablate
from .errors import IngestionError, LayerNotFound, MalformedManifest, NumericalError, TrapNotFound
from .nn import Dataset, TrainConfig, init_mlp, load_model, make_gaussian_clusters, train
from .rmt import BULK_QUANTILE, DEFAULT_C_TW, MIN_FIT_EIGENVALUES
from .self_averaging import DEFAULT_TRIALS, theorem2_bound
from .tensor_store import WeightMatrix, load_checkpoint
from .traps import DEFAULT_REPLICATES, LayerTrapReport, detect_traps, shuffled_matrix_for

EXIT_OK = 0
EXIT_INGESTION = 2
EXIT_NUMERICAL = 3
EXIT_TRAP_NOT_FOUND = 4
EXIT_USAGE = 64
EXIT_INTERNAL = 70

SERIES_COLUMNS = ["step", "layer", "mean_traps", "std_traps", "train_acc", "test_acc"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def thread_count() -> int:
    """Worker count from TRAPSCAN_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("TRAPSCAN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TRAPSCAN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("TRAPSCAN_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def _dump_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _write_csv(header, rows, path: str | None) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if path is None or path == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def _cell(x) -> str:
    if x is None:
        return ""
    return repr(x) if isinstance(x, float) else str(x)


# ---------------------------------------------------------------- scanning


def eligible(W: WeightMatrix) -> str | None:
    """Reason a layer is skipped by spectral analysis, or None if it is analysed."""
    if min(W.shape) < 2:
        return "vector-like tensor (a side is < 2)"
    if min(W.shape) < MIN_FIT_EIGENVALUES:
        return f"short side {min(W.shape)} < {MIN_FIT_EIGENVALUES}, too few eigenvalues for an MP fit"
    return None


def _theorem2_entries(W: WeightMatrix, report: LayerTrapReport, trials: int, seed: int) -> list[dict]:
    out = []
    for replicate in report.replicates:
        for t_index, trap in enumerate(replicate.traps):
            A = shuffled_matrix_for(W, trap)
            M = min(A.shape)
            sizes = sorted({1, max(1, M // 2), M})
            rep = theorem2_bound(A, trap, sizes, trials=trials, seed=seed)
            out.append({"replicate_index": trap.replicate_index, "trap_index": t_index, **rep.to_json()})
    return out


def scan_checkpoint(path: str, args, workers: int) -> dict:
    """Scan every eligible layer of one checkpoint; errors end up in the failures list."""
    entry = {"path": str(path), "model_name": None, "step": None, "metadata": {}, "layers": [], "skipped": [], "failures": []}
    try:
        layers, manifest = load_checkpoint(path)
    except (IngestionError, OSError) as exc:
        entry["failures"].append({"layer_id": None, "kind": "ingestion", "error": f"{type(exc).__name__}: {exc}"})
        return entry
    entry["model_name"] = manifest.model_name
    entry["step"] = manifest.step
    entry["metadata"] = dict(sorted(manifest.metadata.items()))
    for W in layers:
        reason = eligible(W)
        if reason is not None:
            entry["skipped"].append({"layer_id": W.layer_id, "rows": W.rows, "cols": W.cols, "reason": reason})
            continue
        try:
            report = detect_traps(W, args.replicates, args.seed, args.c_tw, workers=workers)
        except NumericalError as exc:
            entry["failures"].append({"layer_id": W.layer_id, "kind": "numerical", "error": f"{type(exc).__name__}: {exc}"})
            continue
        layer = report.to_json(include_vectors=args.vectors)
        for f in report.failures:
            entry["failures"].append({"layer_id": W.layer_id, "kind": "numerical", **f})
        if args.theorem2:
            layer["theorem2"] = _theorem2_entries(W, report, args.trials, args.seed)
        entry["layers"].append(layer)
    return entry


def scan_parameters(args) -> dict:
    params = {
        "replicates": args.replicates,
        "c_tw": args.c_tw,
        "seed": args.seed,
        "theorem2": args.theorem2,
        "bulk_quantile": BULK_QUANTILE,
    }
    if args.theorem2:
        params["trials"] = args.trials
    return params


def exit_code_for(entries: list[dict]) -> int:
    kinds = {f["kind"] for e in entries for f in e["failures"]}
    if "ingestion" in kinds:
        return EXIT_INGESTION
    if "numerical" in kinds:
        return EXIT_NUMERICAL
    return EXIT_OK


def layer_summary(layer: dict) -> dict:
    fits = [f for f in layer["mp_fit"] if f is not None]
    lmax = [x for x in layer["lambda_max"] if x is not None]
    top5 = [t["top_5pct_mass"] for t in layer["traps"]]
    return {
        "layer": layer["layer_id"],
        "mean": layer["mean_count"],
        "std": layer["std_count"],
        "lambda_plus": float(np.mean([f["lambda_plus"] for f in fits])) if fits else None,
        "lambda_max": max(lmax) if lmax else None,
        "top5": max(top5) if top5 else None,
    }


def _fmt(x, spec=".4g") -> str:
    return "-" if x is None else format(x, spec)


def summary_table(entries: list[dict]) -> str:
    lines = []
    for e in entries:
        lines.append(f"{e['path']}  (step {e['step']})")
        lines.append(f"  {'layer':<14} {'traps':>13} {'lambda_plus':>12} {'max lambda':>12} {'top-5% mass':>12}")
        for layer in e["layers"]:
            s = layer_summary(layer)
            traps = f"{_fmt(s['mean'], '.2f')} +- {_fmt(s['std'], '.2f')}"
            lines.append(
                f"  {s['layer']:<14} {traps:>13} {_fmt(s['lambda_plus']):>12} {_fmt(s['lambda_max']):>12} {_fmt(s['top5'], '.3f'):>12}"
            )
        for sk in e["skipped"]:
            lines.append(f"  {sk['layer_id']:<14} skipped: {sk['reason']}")
        for f in e["failures"]:
            lines.append(f"  {f['layer_id'] or '-':<14} FAILED: {f['error']}")
    return "\n".join(lines) + "\n"


def cmd_scan(args) -> int:
    if not args.checkpoints:
        raise UsageError("scan needs at least one checkpoint")
    if args.replicates < 1:
        raise UsageError("--replicates must be >= 1")
    workers = thread_count()
    entries = [scan_checkpoint(p, args, workers) for p in args.checkpoints]
    code = exit_code_for(entries)
    if args.format == "csv":
        rows = []
        for e in entries:
            for layer in e["layers"]:
                s = layer_summary(layer)
                rows.append([e["path"], _cell(e["step"]), s["layer"], _cell(s["mean"]), _cell(s["std"]),
                             _cell(s["lambda_plus"]), _cell(s["lambda_max"]), _cell(s["top5"])])
        header = ["checkpoint", "step", "layer", "mean_traps", "std_traps", "lambda_plus", "lambda_max", "top_5pct_mass"]
        _write_csv(header, rows, args.output)
    else:
        report = {
            "tool": "trapscan",
            "version": __version__,
            "command": "scan",
            "parameters": scan_parameters(args),
            "checkpoints": entries,
            "failures": [{"path": e["path"], **f} for e in entries for f in e["failures"]],
        }
        _dump_json(report, args.output)
    table_stream = sys.stdout if args.output not in (None, "-") else sys.stderr
    table_stream.write(summary_table(entries))
    return code


def _meta_float(meta: dict, key: str):
    try:
        return float(meta[key])
    except (KeyError, ValueError):
        return None


def expand_checkpoints(patterns: list[str]) -> list[str]:
    paths = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        paths.extend(hits if hits else [pat])
    return list(dict.fromkeys(paths))


def cmd_series(args) -> int:
    paths = expand_checkpoints(args.checkpoints)
    if len(paths) < 2:
        raise UsageError(f"series needs at least 2 checkpoints, got {len(paths)}")
    if args.replicates < 1:
        raise UsageError("--replicates must be >= 1")
    args.theorem2 = False
    args.vectors = False
    workers = thread_count()
    entries = [scan_checkpoint(p, args, workers) for p in paths]
    rows = []
    for e in entries:
        if e["step"] is None:
            continue
        meta = e["metadata"]
        for order, layer in enumerate(e["layers"]):
            rows.append((e["step"], order, [e["step"], layer["layer_id"], _cell(_num(layer["mean_count"])),
                                            _cell(_num(layer["std_count"])), _cell(_meta_float(meta, "train_acc")),
                                            _cell(_meta_float(meta, "test_acc"))]))
    rows.sort(key=lambda r: (r[0], r[1]))
    _write_csv(SERIES_COLUMNS, [r[2] for r in rows], args.output)
    for e in entries:
        for f in e["failures"]:
            sys.stderr.write(f"{e['path']}: {f['layer_id'] or '-'}: {f['error']}\n")
    return exit_code_for(entries)


# ---------------------------------------------------------------- ablation


def cmd_ablate(args) -> int:
    try:
        model, manifest = load_model(args.checkpoint)
    except (ValueError, KeyError) as exc:
        raise MalformedManifest(f"{args.checkpoint}: not an MLP checkpoint ({exc})") from exc
    index = model.layer_index(args.layer)
    W = model.weight_matrix(index)
    report = detect_traps(W, args.replicates, args.seed, args.c_tw, workers=thread_count())
    if not 0 <= args.replicate < len(report.replicates):
        raise TrapNotFound(f"replicate {args.replicate} out of range (0..{len(report.replicates) - 1})")
    rep = report.replicates[args.replicate]
    if not rep.ok:
        raise NumericalError(f"replicate {args.replicate} failed: {rep.error}")
    if not 0 <= args.trap < len(rep.traps):
        raise TrapNotFound(f"trap {args.trap} out of range: replicate {args.replicate} of {W.layer_id} has {len(rep.traps)} traps")
    trap = rep.traps[args.trap]

    meta = manifest.metadata
    mean = args.probe_mean if args.probe_mean is not None else _meta_float(meta, "input_mean")
    std = args.probe_std if args.probe_std is not None else _meta_float(meta, "input_std")
    probes = ProbeConfig(
        num_probes=args.probes,
        mean=0.0 if mean is None else mean,
        std=1.0 if std is None else std,
        seed=args.probe_seed,
        temperature=args.temperature,
    )
    eval_data = None
    if args.eval_data:
        try:
            eval_data = Dataset.load(args.eval_data)
        except (OSError, KeyError, ValueError) as exc:
            raise IngestionError(f"cannot read dataset {args.eval_data}: {exc}") from exc
    result, _ = ablate(model, args.layer, trap, args.trap, probes, eval_data, args.seed, args.tau_err, args.mapping)

    if args.csv:
        _write_csv(CSV_HEADER, [result.csv_row()], args.csv)
    if args.format == "csv":
        _write_csv(CSV_HEADER, [result.csv_row()], args.output)
        return EXIT_OK
    out = {
        "tool": "trapscan",
        "version": __version__,
        "command": "ablate",
        "checkpoint": str(args.checkpoint),
        "parameters": {
            "layer": W.layer_id,
            "replicate": args.replicate,
            "trap": args.trap,
            "replicates": args.replicates,
            "c_tw": args.c_tw,
            "seed": args.seed,
            "mapping": args.mapping,
            "tau_err": args.tau_err,
            "eval_data": args.eval_data,
            "probes": {
                "num_probes": probes.num_probes,
                "mean": probes.mean,
                "std": probes.std,
                "seed": probes.seed,
                "temperature": probes.temperature,
                "probe_kind": probes.probe_kind,
            },
        },
        "results": [result.to_json()],
    }
    _dump_json(out, args.output)
    return EXIT_OK


# ---------------------------------------------------------------- training demo


@dataclass
class DemoData:
    num_classes: int = 10
    dim: int = 32
    per_class: int = 100
    test_per_class: int = 100
    noise: float = 1.0
    separation: float = 1.0
    data_seed: int = 0


def load_demo_config(path: str | None) -> tuple[TrainConfig, DemoData]:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestionError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise IngestionError("config must be a JSON object")
    data_keys = {f.name for f in fields(DemoData)}
    train_keys = set(TrainConfig.__dataclass_fields__)
    unknown = set(raw) - data_keys - train_keys
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        data = DemoData(**{k: v for k, v in raw.items() if k in data_keys})
        config = TrainConfig.from_json(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    return config, data


def cmd_train_demo(args) -> int:
    config, data = load_demo_config(args.config)
    if args.steps is not None:
        config.steps = args.steps
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = make_gaussian_clusters(
        data.num_classes, data.dim, data.per_class, data.noise, data.separation, data.data_seed, data.test_per_class
    )
    train_set.save(out / "train.npz")
    if test_set is not None:
        test_set.save(out / "test.npz")
    model = init_mlp([data.dim, *config.hidden, data.num_classes], config.init_scale, config.seed)
    result = train(model, train_set, config, out, test_set)
    last = result.log[-1]
    print(f"wrote {len(result.checkpoints)} checkpoints to {out}")
    print(f"final step {last['step']}: train_acc {last['train_acc']:.4f}, test_acc {_fmt(last['eval_acc'], '.4f')}")
    return EXIT_OK


# ---------------------------------------------------------------- markdown report


def render_markdown(report: dict) -> str:
    command = report.get("command")
    lines = [f"# trapscan {command} report", ""]
    params = report.get("parameters", {})
    lines += ["| parameter | value |", "|---|---|"]
    for key, value in params.items():
        lines.append(f"| {key} | {json.dumps(value) if isinstance(value, (dict, list)) else value} |")
    lines.append("")
    if command == "scan":
        for e in report["checkpoints"]:
            lines.append(f"## {e['path']} (step {e['step']})")
            lines.append("")
            lines += ["| layer | shape | traps (mean +- std) | lambda_plus | max lambda | top-5% mass |", "|---|---|---|---|---|---|"]
            for layer in e["layers"]:
                s = layer_summary(layer)
                lines.append(
                    f"| {s['layer']} | {layer['rows']}x{layer['cols']} | {_fmt(s['mean'], '.2f')} +- {_fmt(s['std'], '.2f')} "
                    f"| {_fmt(s['lambda_plus'])} | {_fmt(s['lambda_max'])} | {_fmt(s['top5'], '.3f')} |"
                )
            for sk in e["skipped"]:
                lines.append(f"| {sk['layer_id']} | {sk['rows']}x{sk['cols']} | skipped | | | |")
            lines.append("")
        failures = report.get("failures", [])
        lines.append("## Failures")
        lines.append("")
        lines += [f"- {f['path']} {f.get('layer_id') or '-'}: {f['error']}" for f in failures] or ["none"]
    elif command == "ablate":
        lines += ["| layer | replicate | trap | lambda | ipr | jsd | delta test error | class |", "|---|---|---|---|---|---|---|---|"]
        for r in report["results"]:
            ref = r["trap_ref"]
            lines.append(
                f"| {ref['layer_id']} | {ref['replicate']} | {ref['trap_index']} | {_fmt(r['lambda_trap'])} | {_fmt(r['ipr'], '.3f')} "
                f"| {_fmt(r['jsd_score'])} | {_fmt(r['delta_test_error'], '+.4f')} | {r['classification']} |"
            )
    else:
        raise IngestionError(f"unknown report command {command!r}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        report = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read report {args.report}: {exc}") from exc
    try:
        text = render_markdown(report)
    except (KeyError, TypeError, AttributeError) as exc:
        raise IngestionError(f"report {args.report} is malformed: {exc}") from exc
    if args.output is None or args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _detection_flags(p) -> None:
    p.add_argument("--replicates", type=int, default=DEFAULT_REPLICATES, help="shuffle replicates per layer (default 5)")
    p.add_argument("--c-tw", dest="c_tw", type=float, default=DEFAULT_C_TW, help="edge threshold multiplier (default 4.0)")
    p.add_argument("--seed", type=int, default=0, help="base seed for shuffles (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trapscan", description="Correlation-trap diagnostics for layer weight matrices.")
    parser.add_argument("--version", action="version", version=f"trapscan {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("scan", help="count traps in every layer of one or more checkpoints")
    p.add_argument("checkpoints", nargs="*", help="checkpoint manifest files")
    _detection_flags(p)
    p.add_argument("--theorem2", action="store_true", help="add mean-instability bounds for every trap")
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS, help="Monte-Carlo trials for --theorem2 (default 10000)")
    p.add_argument("--vectors", action="store_true", help="include trap eigenvectors in the JSON report")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("-o", "--output", help="report path (default: stdout; the summary table then goes to stderr)")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("series", help="trap counts over a sequence of checkpoints, as CSV")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files or glob patterns")
    _detection_flags(p)
    p.add_argument("-o", "--output", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_series)

    p = sub.add_parser("ablate", help="remove one trap and score it with the JSD probe test")
    p.add_argument("checkpoint")
    p.add_argument("--layer", required=True, help="layer id, e.g. fc1 or fc1.weight")
    p.add_argument("--trap", type=int, default=0, help="trap index within the replicate (default 0)")
    p.add_argument("--replicate", type=int, default=0, help="replicate the trap is taken from (default 0)")
    _detection_flags(p)
    p.add_argument("--probes", type=int, default=1024, help="number of Gaussian probes (default 1024)")
    p.add_argument("--probe-mean", type=float, help="probe mean (default: input_mean from checkpoint metadata, else 0)")
    p.add_argument("--probe-std", type=float, help="probe std (default: input_std from checkpoint metadata, else 1)")
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0, help="softmax temperature (default 1.0)")
    p.add_argument("--mapping", choices=MAPPINGS, default="shuffled", help="how a trap is located in the layer")
    p.add_argument("--eval-data", help="npz dataset for the test-error change")
    p.add_argument("--tau-err", type=float, default=0.01, help="harmful threshold on |delta test error| (default 0.01)")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--csv", help="also write the CSV row here")
    p.add_argument("-o", "--output", help="output path (default: stdout)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("train-demo", help="train the toy MLP and write log-spaced checkpoints")
    p.add_argument("config", nargs="?", help="JSON config (training and dataset keys); defaults if omitted")
    p.add_argument("--out-dir", default="trapscan_demo")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("report", help="render a JSON report as markdown")
    p.add_argument("report")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trapscan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LayerNotFound as exc:
        print(f"trapscan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrapNotFound as exc:
        print(f"trapscan: error: {exc}", file=sys.stderr)
        return EXIT_TRAP_NOT_FOUND
    except (IngestionError, OSError) as exc:
        print(f"trapscan: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except NumericalError as exc:
        print(f"trapscan: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001
        print(f"trapscan: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
