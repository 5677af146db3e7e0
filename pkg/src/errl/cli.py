"""Command-line entry point: ``errl generate|train|sweep|eval|curves``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
The ``ERRL_THREADS`` environment variable sets the torch thread count and
the number of evaluation workers.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .heuristics import HEURISTICS, TwoOptConfig, two_opt
from .policy import DecodeDeadEnd, MaskingError
from .routing import FormatError, Instance, Kind, RoutingError, generate_instances, read_instances, write_instances
from .search import SearchConfig, evaluate_gap, optimal_tsp, solve
from .training import CheckpointError, NumericalError, TrainConfig, load_policy, train

log = logging.getLogger("errl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EVAL_COLUMNS = ["instance_id", "method", "length", "gap_pct", "seconds", "candidates_evaluated"]
EXACT_REFERENCE_MAX_N = 9


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("ERRL_THREADS", "1")))
    except ValueError:
        raise UsageError("ERRL_THREADS must be an integer") from None


# --------------------------------------------------------------------------
# Config files: flat ``key = value`` text, '#' comments


def read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected key = value")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(name: str, value: str, default):
    if value.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise DataError(f"{name}: expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    if isinstance(default, int) or name in ("capacity",):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass
class ExperimentSpec:
    name: str
    train: TrainConfig
    search: list[SearchConfig] = field(default_factory=lambda: [SearchConfig()])
    baselines: list[str] = field(default_factory=list)
    out: str = "runs/experiment"

    def __post_init__(self):
        if not self.name:
            raise UsageError("experiment name must be nonempty")
        unknown = [b for b in self.baselines if b not in HEURISTICS]
        if unknown:
            raise UsageError(f"unknown baselines {unknown}; choose from {sorted(HEURISTICS)}")


def build_spec(args) -> ExperimentSpec:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    defaults = TrainConfig()
    train_kw = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in values:
            try:
                train_kw[f.name] = _coerce(f.name, values.pop(f.name), getattr(defaults, f.name))
            except ValueError as e:
                raise DataError(f"config key {f.name}: {e}") from None
    flag_map = {
        "kind": "kind", "n": "n", "seed": "seed", "alpha": "alpha", "lr": "lr", "batch": "batch_size",
        "traj_per_instance": "traj_per_instance", "epochs": "epochs", "steps_per_epoch": "steps_per_epoch",
        "trainer": "trainer", "val_size": "val_size",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            train_kw[key] = v
    name = values.pop("name", None) or getattr(args, "name", None) or "experiment"
    out = getattr(args, "out", None) or values.pop("out", None) or f"runs/{name}"
    values.pop("out", None)
    modes = values.pop("mode", None)
    baselines = values.pop("baselines", None)
    if values:
        raise DataError(f"unknown config keys: {sorted(values)}")
    try:
        cfg = TrainConfig(**train_kw)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    search = [SearchConfig.parse(m) for m in (modes.split(",") if modes else ["greedy"])]
    return ExperimentSpec(name, cfg, search, baselines.split(",") if baselines else [], out)


# --------------------------------------------------------------------------
# Commands


def cmd_generate(kind: str, n: int, count: int, seed: int, out_path: "str | Path", **kw) -> Path:
    as_dir = str(out_path).endswith(("/", os.sep))
    out_path = Path(out_path)
    if as_dir or out_path.is_dir():
        out_path = out_path / f"{Kind.parse(kind).value.lower()}{n}_{count}_seed{seed}.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        insts = generate_instances(kind, n, count, seed, **kw)
    except (RoutingError, ValueError) as e:
        raise UsageError(str(e)) from None
    write_instances(out_path, insts)
    return out_path


def cmd_train(spec: ExperimentSpec):
    return train(spec.train, spec.out)


def _fmt_float(x: float) -> str:
    return format(x, "g")


def cmd_sweep(spec: ExperimentSpec, alphas: list[float], lrs: list[float]) -> Path:
    """One training run per (alpha, lr) pair; table of final validation lengths."""
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lr in lrs:
        for alpha in alphas:
            cfg = dataclasses.replace(spec.train, alpha=alpha, lr=lr)
            run_dir = out / f"alpha{_fmt_float(alpha)}_lr{_fmt_float(lr)}"
            report = train(cfg, run_dir)
            rows.append((alpha, lr, report.final_val_length))
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "lr", "tour_length"])
        for alpha, lr, length in rows:
            w.writerow([_fmt_float(alpha), _fmt_float(lr), repr(length)])
    (out / "sweep.txt").write_text(sweep_table_text(rows, alphas, lrs))
    return path


def sweep_table_text(rows, alphas, lrs) -> str:
    """Learning rate by coefficient grid of TourL values."""
    if not rows:
        return "(empty grid)\n"
    lookup = {(a, lr): v for a, lr, v in rows}
    header = ["Co-efficient"] + [_fmt_float(a) for a in alphas]
    lines = [header]
    for lr in lrs:
        lines.append([f"lr {_fmt_float(lr)}"] + [f"{lookup[(a, lr)]:.2f}" for a in alphas])
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    return "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in lines) + "\n"


@dataclass
class EvalRow:
    instance_id: int
    method: str
    length: float
    seconds: float
    candidates: int
    gap_pct: float = float("nan")


def _run_method(inst: Instance, method: str, policy, search: SearchConfig | None, two_opt_cfg: TwoOptConfig):
    import time

    if search is not None:
        sol, m = solve(inst, policy, search)
        return sol.total_length, m.seconds, m.candidates
    name, post = (method[:-5], True) if method.endswith("+2opt") else (method, False)
    t0 = time.perf_counter()
    sol = HEURISTICS[name](inst)
    if post:
        sol = two_opt(inst, sol, two_opt_cfg)
    return sol.total_length, time.perf_counter() - t0, 1


def cmd_eval(checkpoint, instances_path, searches: list[SearchConfig], baselines: list[str], out_dir,
             two_opt_cfg: TwoOptConfig | None = None) -> tuple[Path, str]:
    """Benchmark methods on an instance file; writes eval.csv, summary.csv, summary.txt."""
    two_opt_cfg = two_opt_cfg or TwoOptConfig()
    insts = read_instances(instances_path)
    if not insts:
        raise DataError(f"no instances in {instances_path}")
    kind = insts[0].kind
    policy = None
    if searches:
        if checkpoint is None:
            raise UsageError("policy search modes need --checkpoint")
        policy = load_policy(checkpoint)
        if policy.cfg.kind is not kind:
            raise DataError(f"checkpoint is for {policy.cfg.kind.value}, instances are {kind.value}")
    if baselines and kind is not Kind.TSP:
        raise DataError("heuristic baselines are TSP-only")
    methods: list[tuple[str, SearchConfig | None]] = [(s.label, s) for s in searches]
    methods += [(b, None) for b in baselines]

    def work(i_inst):
        i, inst = i_inst
        rows = []
        for label, search in methods:
            length, secs, cand = _run_method(inst, label, policy, search, two_opt_cfg)
            rows.append(EvalRow(i, label, length, secs, cand))
        return rows

    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        per_instance = list(pool.map(work, enumerate(insts)))

    exact = kind is Kind.TSP and insts[0].num_nodes <= EXACT_REFERENCE_MAX_N
    ref_label = "optimal" if exact else "best-known-in-run"
    refs = []
    for inst, rows in zip(insts, per_instance):
        ref = optimal_tsp(inst)[1] if exact else min(r.length for r in rows)
        refs.append(ref)
        for r in rows:
            r.gap_pct = (r.length / ref - 1.0) * 100.0

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for rows in per_instance:
            for r in rows:
                w.writerow([r.instance_id, r.method, repr(r.length), repr(r.gap_pct), f"{r.seconds:.6f}", r.candidates])

    summary = []
    for label, _ in methods:
        lengths = [r.length for rows in per_instance for r in rows if r.method == label]
        secs = [r.seconds for rows in per_instance for r in rows if r.method == label]
        summary.append((label, float(np.mean(lengths)), evaluate_gap(lengths, refs), float(np.mean(secs))))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "tour_length", "gap_pct", "seconds_per_instance", "reference"])
        for label, tl, gap, secs in summary:
            w.writerow([label, repr(tl), repr(gap), f"{secs:.6f}", ref_label])
    text = summary_table_text(summary, kind, insts[0].size, len(insts), ref_label)
    (out / "summary.txt").write_text(text)
    return out / "eval.csv", text


def summary_table_text(summary, kind: Kind, n: int, count: int, ref_label: str) -> str:
    head = f"{kind.value}{n}, {count} instances, gap vs {ref_label}"
    rows = [["Method", "TourL", "Gap(%)", "Time(s)"]]
    rows += [[m, f"{tl:.2f}", f"{gap:.2f}", f"{secs:.4f}"] for m, tl, gap, secs in summary]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    body = "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
    return f"{head}\n{body}\n"


def cmd_curves(metric_paths: list, out_path, labels: list[str] | None = None) -> tuple[Path, Path]:
    """Merge per-epoch metrics CSVs into long and wide learning-curve tables."""
    if not metric_paths:
        raise UsageError("curves needs at least one metrics CSV")
    labels = labels or [Path(p).parent.name or Path(p).stem for p in metric_paths]
    if len(labels) != len(metric_paths):
        raise UsageError("one label per metrics file")
    long_rows, header = [], None
    per_run: dict[str, dict[int, str]] = {}
    for label, path in zip(labels, metric_paths):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                hdr = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty metrics file") from None
            if "epoch" not in hdr or "mean_val_length" not in hdr:
                raise DataError(f"{path}: missing epoch/mean_val_length columns")
            if header is None:
                header = hdr
            elif hdr != header:
                raise DataError(f"{path}: columns differ from {metric_paths[0]}")
            curve = per_run.setdefault(label, {})
            for lineno, row in enumerate(reader, 2):
                if len(row) != len(hdr):
                    raise DataError(f"{path}:{lineno}: expected {len(hdr)} fields")
                try:
                    epoch = int(row[hdr.index("epoch")])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad epoch {row[0]!r}") from None
                curve[epoch] = row[hdr.index("mean_val_length")]
                long_rows.append([label, *row])
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", *header])
        w.writerows(long_rows)
    wide = out.with_name(out.stem + "_wide" + out.suffix)
    epochs = sorted({e for c in per_run.values() for e in c})
    with open(wide, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *per_run])
        for e in epochs:
            w.writerow([e, *(per_run[r].get(e, "") for r in per_run)])
    return out, wide


# --------------------------------------------------------------------------
# Argument parsing


def _float_list(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_train_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--name")
    p.add_argument("--kind", choices=[k.value for k in Kind])
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--traj-per-instance", dest="traj_per_instance", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--trainer", choices=["ERRL1", "ERRL2"])
    p.add_argument("--out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="errl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a random instance file")
    g.add_argument("--kind", choices=[k.value for k in Kind], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--capacity", type=int)
    g.add_argument("--out", required=True, help="output file or directory")

    t = sub.add_parser("train", help="train a policy")
    _add_train_flags(t)

    s = sub.add_parser("sweep", help="grid of alpha x learning-rate training runs")
    _add_train_flags(s)
    s.add_argument("--alphas", type=_float_list, default=[0.5, 0.6, 0.7, 0.8, 0.9])
    s.add_argument("--lrs", type=_float_list, default=[1e-4, 1e-5])

    e = sub.add_parser("eval", help="benchmark a checkpoint and/or heuristics")
    e.add_argument("--checkpoint")
    e.add_argument("--instances", required=True)
    e.add_argument("--mode", action="append", default=None,
                   help="greedy | sample:K | beam:W (repeatable)")
    e.add_argument("--two-opt", action="store_true", help="also report each method followed by 2-opt")
    e.add_argument("--baselines", default="", help="comma-separated heuristic names")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)

    c = sub.add_parser("curves", help="merge metrics CSVs into learning-curve tables")
    c.add_argument("metrics", nargs="+")
    c.add_argument("--labels", default="")
    c.add_argument("--out", required=True)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        torch.set_num_threads(num_threads())
        if args.command == "generate":
            kw = {} if args.capacity is None else {"capacity": args.capacity}
            print(cmd_generate(args.kind, args.n, args.count, args.seed, args.out, **kw))
        elif args.command == "train":
            spec = build_spec(args)
            report = cmd_train(spec)
            print(f"final validation length {report.final_val_length:.4f}; checkpoint {report.checkpoint_path}")
        elif args.command == "sweep":
            spec = build_spec(args)
            path = cmd_sweep(spec, args.alphas, args.lrs)
            print((path.parent / "sweep.txt").read_text(), end="")
        elif args.command == "eval":
            searches = [SearchConfig.parse(m, seed=args.seed) for m in (args.mode or [])]
            baselines = [b.strip() for b in args.baselines.split(",") if b.strip()]
            unknown = [b for b in baselines if b not in HEURISTICS]
            if unknown:
                raise UsageError(f"unknown baselines {unknown}; choose from {sorted(HEURISTICS)}")
            if args.two_opt:
                searches += [dataclasses.replace(s, post_2opt=True) for s in searches]
                baselines += [b + "+2opt" for b in baselines if not b.endswith("+2opt")]
            if not searches and not baselines:
                raise UsageError("nothing to evaluate: give --mode and/or --baselines")
            _, text = cmd_eval(args.checkpoint, args.instances, searches, baselines, args.out)
            print(text, end="")
        elif args.command == "curves":
            labels = [x for x in args.labels.split(",") if x] or None
            long_path, wide_path = cmd_curves(args.metrics, args.out, labels)
            print(long_path)
            print(wide_path)
    except UsageError as e:
        print(f"errl: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, DecodeDeadEnd) as e:
        print(f"errl: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, RoutingError, CheckpointError, MaskingError, OSError, ValueError) as e:
        print(f"errl: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
