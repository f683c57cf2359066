"""Command-line entry point: ``negbound <command> [options]``.

Exit codes: 0 ok, 2 usage or input error, 3 numerical failure, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    norm_histogram,
    relative_change_curve,
    shared_norm_range,
    wasserstein1,
    within_class_cosine_histogram,
    within_class_cosines,
)
from .bounds import CSV_COLUMNS, BoundReport, evaluate_bounds
from .datamodel import AugmentationSpec, EmbeddingSet, load_embeddings, save_embeddings
from .errors import DivergenceError, FormatError, NumericalError
from .pipeline import format_value, reports_to_csv, run_sweep
from .plots import upper_bound_chart, histogram_chart, line_chart
from .probkit import (
    DRAWS_CONVENTIONS,
    ClassDistribution,
    all_classes_probability,
    collision_probability,
    draws_for,
    expected_draws,
    expected_draws_ceil,
    expected_draws_closed_form,
    mc_expected_draws,
)
from .rng import default_threads
from .toytrain import TrainConfig, train_encoder

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_DIVERGENCE = 0, 2, 3, 4
UPPER_BOUND_COLUMNS = ("k_plus_1", "tau", "upsilon", "linear_acc", "sup_ub_curl", "sup_ub_proposed")

log = logging.getLogger("negbound")


class UsageError(Exception):
    """Bad flags or unusable inputs detected after argument parsing."""


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: int | None
    threads: int
    out_dir: str | None
    config_path: str | None = None
    config: dict = field(default_factory=dict)
    version: str = __version__
    timings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    status: str = "running"
    exit_code: int | None = None
    error: str | None = None

    def output(self, path: Path) -> Path:
        self.outputs.append(str(path))
        return path

    def write(self) -> None:
        if self.out_dir is None:
            return
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _json_safe(o):
    """Replace non-finite floats by the strings 'inf', '-inf' and 'nan'."""
    if isinstance(o, dict):
        return {k: _json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_safe(v) for v in o]
    if isinstance(o, (float, np.floating)) and not math.isfinite(o):
        return format_value(float(o))
    return o


def _dump(obj) -> str:
    return json.dumps(_json_safe(obj), default=_json_default, indent=2)


# --------------------------------------------------------------------------
# argument parsing


def _common(seed_default: int | None = 0, out: bool = False) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=seed_default, help="global random seed (default %(default)s)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $NEGBOUND_THREADS or cpu count)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if out:
        p.add_argument("--out", type=Path, required=True, help="output directory")
    return p


def _dist_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--classes", type=int, help="uniform distribution over N classes")
    g.add_argument("--probs", type=Path, help="file of class probabilities (JSON list, or comma/whitespace separated)")


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="negbound", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("coupon", parents=[_common()], help="probability that the draws cover every class")
    _dist_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--draws", type=int, help="number of class draws")
    g.add_argument("--k", type=int, help="number of negatives; draws follow --draws-convention")
    p.add_argument("--draws-convention", choices=DRAWS_CONVENTIONS, default="k-plus-1")
    p.add_argument("--method", choices=("auto", "dp", "ie", "mc"), default="auto")
    p.add_argument("--trials", type=_positive_int, default=1_000_000, help="Monte-Carlo trials")
    p.add_argument("--out", type=Path, help="also write the result and a manifest here")

    p = sub.add_parser("tau", parents=[_common()], help="probability that some negative shares the anchor's class")
    _dist_args(p)
    p.add_argument("--k", type=int, required=True, help="number of negatives")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("expected-draws", parents=[_common()], help="expected draws until every class appears")
    _dist_args(p)
    p.add_argument("--method", choices=("auto", "mc"), default="auto", help="auto = quadrature")
    p.add_argument("--trials", type=_positive_int, default=1_000_000)
    p.add_argument("--out", type=Path)

    for name, helptext in (("train", "train a toy encoder"), ("sweep", "train and evaluate over several K+1")):
        p = sub.add_parser(name, parents=[_common(seed_default=None)], help=helptext)
        p.add_argument("--config", type=Path, help="JSON TrainConfig; missing keys take defaults")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (VALUE parsed as JSON when possible)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        p.add_argument("--out", type=Path, help="output directory (required unless --print-config)")
        if name == "train":
            p.add_argument("--k", type=_positive_int, help="negatives per anchor")
            p.add_argument("--format", choices=("tsv", "packed"), default="tsv")
        else:
            p.add_argument("--k-plus-1", type=int, nargs="+", default=[8, 16, 32, 64], dest="k_plus_1")
            p.add_argument("--seeds", type=int, nargs="+", help="training seeds (default: --seed or config seed)")
            p.add_argument("--t", type=float, default=1.0, help="evaluation temperature")
            p.add_argument("--batches", type=_positive_int, help="evaluation tuples per K")

    p = sub.add_parser("evaluate", parents=[_common(out=True)], help="bound report for stored embeddings")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", type=Path, help="directory written by `negbound train`")
    src.add_argument("--embeddings", type=Path, help="evaluation (validation) embeddings")
    p.add_argument("--means", type=Path, help="embeddings for class means (default: --embeddings)")
    p.add_argument("--k", type=_positive_int, nargs="+", required=True, help="numbers of negatives")
    p.add_argument("--t", type=float, default=1.0, help="temperature")
    p.add_argument("--batches", type=_positive_int, help="tuples per K (default: floor(N/(K+1))*(K+1)*10)")
    p.add_argument("--m-aug", type=_positive_int, default=10, help="augmentations per sample for means")
    p.add_argument("--aug-sigma", type=float, default=0.1, help="embedding-space noise scale")
    p.add_argument("--aug-kind", choices=("gaussian_noise", "coordinate_dropout", "compose"), default="gaussian_noise")
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--draws-convention", choices=DRAWS_CONVENTIONS, default="k-plus-1")
    p.add_argument("--no-collision-bound", action="store_true")

    p = sub.add_parser("analyze", parents=[_common(out=True)], help="histograms and W1 curves across embedding sets")
    p.add_argument("--embeddings", type=Path, nargs="+", required=True,
                   help="sets ordered by K; the first is the reference")
    p.add_argument("--unnormalized", type=Path, nargs="+", help="unnormalised sets, same order, for norm histograms")
    p.add_argument("--labels", nargs="+", help="names for the sets (default: file stems)")
    p.add_argument("--classes", type=int, nargs="+", help="class ids to analyse (default: all, at most 20)")
    p.add_argument("--bins", type=_positive_int, help="override the square-root bin rule")

    p = sub.add_parser("plot", parents=[_common(out=True)], help="SVG charts from CSV outputs")
    p.add_argument("--bounds", type=Path, help="bounds CSV -> upper-bound bar chart")
    p.add_argument("--loss-trace", type=Path, help="loss trace CSV -> line chart")
    p.add_argument("--w1", type=Path, help="W1 CSV from analyze -> line chart")
    return parser


# --------------------------------------------------------------------------
# helpers


def _load_dist(args) -> ClassDistribution:
    if args.classes is not None:
        if args.classes < 1:
            raise UsageError("--classes must be >= 1")
        return ClassDistribution.uniform(args.classes)
    text = args.probs.read_text().strip()
    try:
        values = json.loads(text)
    except json.JSONDecodeError:
        values = [float(v) for v in text.replace(",", " ").split()]
    try:
        return ClassDistribution([float(v) for v in values])
    except (TypeError, ValueError) as e:
        raise UsageError(f"{args.probs}: {e}") from e


def _dist_info(dist: ClassDistribution) -> dict:
    return {"classes": dist.n_classes, "uniform": dist.is_uniform}


def _parse_set(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve_config(args, manifest: RunManifest) -> TrainConfig:
    base = {}
    if args.config is not None:
        manifest.config_path = str(args.config)
        try:
            base = json.loads(args.config.read_text())
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON ({e})") from e
        if not isinstance(base, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
    base.update(_parse_set(args.set))
    if args.epochs is not None:
        base["epochs"] = args.epochs
    if getattr(args, "k", None) is not None:
        base["k_negatives"] = args.k
    if args.seed is not None:
        base["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from e
    manifest.config = cfg.to_dict()
    manifest.seed = cfg.seed
    return cfg


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_value(v) for v in r])


def _read_csv(path: Path, required) -> list[dict]:
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, [])
            rows = [dict(zip(header, r)) for r in reader if r]
    except FileNotFoundError as e:
        raise UsageError(f"file not found: {path}") from e
    missing = [c for c in required if c not in header]
    if missing:
        raise UsageError(f"{path}: missing column(s): {', '.join(missing)}")
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return rows


def _load_set(path: Path) -> EmbeddingSet:
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    return load_embeddings(path)


# --------------------------------------------------------------------------
# commands


def cmd_coupon(args, manifest: RunManifest) -> dict:
    dist = _load_dist(args)
    if args.draws is not None:
        draws, extra = args.draws, {}
    else:
        if args.k < 0:
            raise UsageError("--k must be >= 0")
        draws = draws_for(args.k, args.draws_convention)
        extra = {"k": args.k, "draws_convention": args.draws_convention}
    if draws < 0:
        raise UsageError("--draws must be >= 0")
    est = all_classes_probability(dist, draws, args.method, args.trials, args.seed, manifest.threads)
    out = {**est.to_dict(), **_dist_info(dist), "draws": draws, **extra}
    if args.method == "mc":
        out["trials"] = args.trials
    return out


def cmd_tau(args, manifest: RunManifest) -> dict:
    dist = _load_dist(args)
    if args.k < 0:
        raise UsageError("--k must be >= 0")
    return {**collision_probability(dist, args.k).to_dict(), **_dist_info(dist), "k": args.k}


def cmd_expected_draws(args, manifest: RunManifest) -> dict:
    dist = _load_dist(args)
    if args.method == "mc":
        mean, se = mc_expected_draws(dist, args.trials, args.seed, threads=manifest.threads)
        out = {"value": mean, "stderr": se, "method": "monte_carlo", "ceil": math.ceil(mean), "trials": args.trials}
    else:
        out = {"value": expected_draws(dist), "stderr": 0.0, "method": "quadrature", "ceil": expected_draws_ceil(dist)}
    if dist.is_uniform:
        out["closed_form"] = expected_draws_closed_form(dist.n_classes)
    return {**out, **_dist_info(dist)}


def _write_trace(path: Path, trace) -> None:
    _write_csv(path, ("epoch", "loss", "stderr"), trace)


def cmd_train(args, manifest: RunManifest) -> dict:
    cfg = _resolve_config(args, manifest)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest.output(out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    ext = "tsv" if args.format == "tsv" else "bin"
    t0 = time.perf_counter()
    try:
        result = train_encoder(cfg)
    except DivergenceError as e:
        _write_trace(manifest.output(out / "loss_trace.csv"), e.trace)
        raise
    manifest.timings["train_s"] = time.perf_counter() - t0
    _write_trace(manifest.output(out / "loss_trace.csv"), result.loss_trace)
    save_embeddings(result.train_set, manifest.output(out / f"train_embeddings.{ext}"), args.format)
    save_embeddings(result.val_set, manifest.output(out / f"val_embeddings.{ext}"), args.format)
    save_embeddings(result.train_unnormalized, manifest.output(out / f"train_unnormalized.{ext}"), args.format)
    summary = {
        "mean_acc": result.mean_acc,
        "probe_acc": result.probe_acc,
        "mean_train_ce": result.mean_train_ce,
        "probe_train_ce": result.probe_train_ce,
        "final_loss": result.loss_trace[-1][1] if result.loss_trace else None,
        "epochs": cfg.epochs,
        "k_negatives": cfg.k_negatives,
    }
    if result.preprojection_probe_acc is not None:
        summary["preprojection_probe_acc"] = result.preprojection_probe_acc
    manifest.output(out / "summary.json").write_text(_dump(summary) + "\n")
    return summary


def _all_slices_absent(rep: BoundReport) -> bool:
    slices = [rep.curl_terms.conditional[k] for k in ("sup", "sub")]
    slices += [rep.proposed_terms.conditional[k] for k in ("sup", "sub")]
    return all(s is None for s in slices)


def _emit_reports(out: Path, reports, manifest: RunManifest, stem: str = "bounds", extra_columns=None) -> None:
    manifest.output(out / f"{stem}.csv").write_text(reports_to_csv(reports, extra_columns))
    payload = [r.to_dict() for r in reports]
    if extra_columns:
        for i, d in enumerate(payload):
            d.update({k: v[i] for k, v in extra_columns.items()})
    manifest.output(out / f"{stem}.json").write_text(_dump(payload) + "\n")


def cmd_evaluate(args, manifest: RunManifest) -> dict:
    if args.t <= 0:
        raise UsageError("--t must be positive")
    accuracies = None
    if args.run is not None:
        fmt = "tsv" if (args.run / "val_embeddings.tsv").exists() else "bin"
        eval_set = _load_set(args.run / f"val_embeddings.{fmt}")
        means_set = _load_set(args.run / f"train_embeddings.{fmt}")
        summary_path = args.run / "summary.json"
        if summary_path.exists():
            s = json.loads(summary_path.read_text())
            accuracies = (s.get("mean_acc", math.nan), s.get("probe_acc", math.nan))
    else:
        eval_set = _load_set(args.embeddings)
        means_set = _load_set(args.means) if args.means else eval_set
    if eval_set.n_classes != means_set.n_classes:
        raise UsageError("evaluation and class-mean sets disagree on the number of classes")
    try:
        spec = AugmentationSpec(args.aug_kind, sigma=args.aug_sigma, drop_rate=args.drop_rate, renormalize=True)
    except ValueError as e:
        raise UsageError(str(e)) from e
    manifest.config = {
        "k": args.k, "t": args.t, "batches": args.batches, "m_aug": args.m_aug,
        "augmentation": spec.to_dict(), "draws_convention": args.draws_convention,
    }
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for k in args.k:
        t0 = time.perf_counter()
        rep = evaluate_bounds(
            eval_set, means_set, spec, k, t=args.t, n_batches=args.batches, seed=args.seed, m_aug=args.m_aug,
            convention=args.draws_convention, with_collision_bound=not args.no_collision_bound,
            accuracies=accuracies,
        )
        manifest.timings[f"k={k}_s"] = time.perf_counter() - t0
        reports.append(rep)
    _emit_reports(out, reports, manifest)
    empty = [r.k_plus_1 - 1 for r in reports if _all_slices_absent(r)]
    if empty:
        raise NumericalError(f"every conditional slice is empty for k = {empty}; increase --batches")
    return {"rows": len(reports), "csv": str(out / "bounds.csv")}


def cmd_sweep(args, manifest: RunManifest) -> dict:
    cfg = _resolve_config(args, manifest)
    if any(kp < 2 for kp in args.k_plus_1):
        raise UsageError("--k-plus-1 values must be >= 2")
    seeds = args.seeds if args.seeds else [cfg.seed]
    manifest.config.update({"k_plus_1": args.k_plus_1, "seeds": seeds, "eval_t": args.t, "batches": args.batches})
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    runs = run_sweep(cfg, args.k_plus_1, seeds, args.t, args.batches)
    manifest.timings["sweep_s"] = time.perf_counter() - t0
    extra = {
        "seed": [r.seed for r in runs],
        "final_loss": [r.train.loss_trace[-1][1] if r.train.loss_trace else math.nan for r in runs],
        "mean_train_ce": [r.train.mean_train_ce for r in runs],
        "probe_train_ce": [r.train.probe_train_ce for r in runs],
    }
    _emit_reports(out, [r.report for r in runs], manifest, "sweep", extra)
    rows = _read_csv(out / "sweep.csv", UPPER_BOUND_COLUMNS)
    manifest.output(out / "upper_bounds.svg").write_text(_upper_bound_chart_from_rows(rows))
    return {"rows": len(runs), "csv": str(out / "sweep.csv")}


def _upper_bound_chart_from_rows(rows: list[dict]) -> str:
    """Average each column over rows sharing K+1; an infinite entry makes the average infinite."""
    groups: dict[int, list[dict]] = {}
    for r in rows:
        groups.setdefault(int(r["k_plus_1"]), []).append(r)
    ks = sorted(groups)

    def avg(col):
        out = []
        for k in ks:
            vals = [float(r[col]) for r in groups[k]]
            out.append(math.inf if any(math.isinf(v) for v in vals) else float(np.mean(vals)))
        return out

    return upper_bound_chart(ks, avg("sup_ub_curl"), avg("sup_ub_proposed"), avg("linear_acc"))


def cmd_analyze(args, manifest: RunManifest) -> dict:
    sets = [_load_set(p) for p in args.embeddings]
    names = args.labels or [p.stem for p in args.embeddings]
    if len(names) != len(sets):
        raise UsageError("--labels must name every embedding set")
    n_classes = sets[0].n_classes
    if any(s.n_classes != n_classes for s in sets):
        raise UsageError("all sets must share the number of classes")
    classes = args.classes if args.classes is not None else list(range(min(n_classes, 20)))
    if any(not 0 <= c < n_classes for c in classes):
        raise UsageError(f"class ids must lie in [0, {n_classes})")
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    hist_rows, cos_w1 = [], np.zeros((len(classes), len(sets)))
    for ci, c in enumerate(classes):
        n_bins = args.bins or max(1, math.isqrt(within_class_cosines(sets[0], c).size))
        hists = [within_class_cosine_histogram(s, c, n_bins) for s in sets]
        for name, h in zip(names, hists):
            hist_rows += [(name, c, lo, hi, n) for lo, hi, n in h.to_rows()]
        cos_w1[ci] = [wasserstein1(hists[0], h) for h in hists]
        if ci == 0:
            manifest.output(out / f"cosine_hist_class{c}.svg").write_text(
                histogram_chart(hists[0].bin_edges, hists[0].counts, f"within-class cosine, class {c}", "cosine")
            )
    _write_csv(manifest.output(out / "cosine_hist.csv"), ("set", "class", "lo", "hi", "count"), hist_rows)

    mean_cos = cos_w1.mean(axis=0)
    columns = {"set": names, "cosine_w1": list(mean_cos)}
    notes = []
    columns["cosine_relative"], note = _relative(mean_cos)
    notes += note
    if args.unnormalized:
        raw = [_load_set(p) for p in args.unnormalized]
        if len(raw) != len(sets):
            raise UsageError("--unnormalized must list one set per --embeddings entry")
        rng_ = shared_norm_range(raw)
        nh = [norm_histogram(s, rng_, args.bins) for s in raw]
        _write_csv(
            manifest.output(out / "norm_hist.csv"), ("set", "lo", "hi", "count"),
            [(name, lo, hi, n) for name, h in zip(names, nh) for lo, hi, n in h.to_rows()],
        )
        norm_w1 = [wasserstein1(nh[0], h) for h in nh]
        columns["norm_w1"] = norm_w1
        columns["norm_relative"], note = _relative(norm_w1)
        notes += note
    _write_csv(manifest.output(out / "w1.csv"), list(columns), list(zip(*columns.values())))
    series = {"cosine W1": (list(range(len(sets))), list(mean_cos))}
    if "norm_w1" in columns:
        series["norm W1"] = (list(range(len(sets))), columns["norm_w1"])
    manifest.output(out / "w1.svg").write_text(line_chart(series, "W1 to the first set", "set index", "W1"))
    return {"sets": len(sets), "classes": classes, "notes": notes}


def _relative(distances) -> tuple[list[float], list[str]]:
    """Distances relative to the first comparison (set 1 against set 0)."""
    if len(distances) < 2:
        return [math.nan] * len(distances), ["need at least two sets for a relative change"]
    ref = distances[1]
    if ref > 0:
        return [math.nan] + relative_change_curve(ref, distances[1:]), []
    return [math.nan] * len(distances), ["reference W1 distance is zero; relative change undefined"]


def cmd_plot(args, manifest: RunManifest) -> dict:
    if not (args.bounds or args.loss_trace or args.w1):
        raise UsageError("give at least one of --bounds, --loss-trace, --w1")
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    made = []
    if args.bounds:
        rows = _read_csv(args.bounds, UPPER_BOUND_COLUMNS)
        made.append(manifest.output(out / "upper_bounds.svg"))
        made[-1].write_text(_upper_bound_chart_from_rows(rows))
    if args.loss_trace:
        rows = _read_csv(args.loss_trace, ("epoch", "loss"))
        xs = [int(r["epoch"]) for r in rows]
        made.append(manifest.output(out / "loss_trace.svg"))
        made[-1].write_text(line_chart({"loss": (xs, [float(r["loss"]) for r in rows])}, "training loss", "epoch", "loss"))
    if args.w1:
        rows = _read_csv(args.w1, ("set", "cosine_w1"))
        idx = list(range(len(rows)))
        series = {"cosine W1": (idx, [float(r["cosine_w1"]) for r in rows])}
        if "norm_w1" in rows[0]:
            series["norm W1"] = (idx, [float(r["norm_w1"]) for r in rows])
        made.append(manifest.output(out / "w1.svg"))
        made[-1].write_text(line_chart(series, "W1 to the first set", "set index", "W1"))
    return {"plots": [str(p) for p in made]}


COMMANDS = {
    "coupon": cmd_coupon,
    "tau": cmd_tau,
    "expected-draws": cmd_expected_draws,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads if args.threads is not None else default_threads()
    if threads < 1:
        print("negbound: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    if getattr(args, "print_config", False):
        manifest = RunManifest(args.command, argv, args.seed, threads, None)
        try:
            cfg = _resolve_config(args, manifest)
        except UsageError as e:
            print(f"negbound: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK
    if args.command in ("train", "sweep") and args.out is None:
        print("negbound: --out is required", file=sys.stderr)
        return EXIT_USAGE

    out = getattr(args, "out", None)
    manifest = RunManifest(args.command, argv, args.seed, threads, None if out is None else str(out))
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        result = COMMANDS[args.command](args, manifest)
        if out is not None and args.command in ("coupon", "tau", "expected-draws"):
            Path(out).mkdir(parents=True, exist_ok=True)
            manifest.output(Path(out) / "result.json").write_text(_dump(result) + "\n")
        print(_dump(result))
    except DivergenceError as e:
        code, manifest.error = EXIT_DIVERGENCE, str(e)
    except NumericalError as e:
        code, manifest.error = EXIT_NUMERICAL, str(e)
    except (UsageError, FormatError, FileNotFoundError, ValueError) as e:
        code, manifest.error = EXIT_USAGE, str(e)
    finally:
        manifest.timings["total_s"] = time.perf_counter() - t0
        manifest.exit_code = code
        manifest.status = "ok" if code == EXIT_OK else "failed"
        try:
            manifest.write()
        except OSError as e:
            print(f"negbound: could not write manifest: {e}", file=sys.stderr)
    if manifest.error:
        print(f"negbound: {manifest.error}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
