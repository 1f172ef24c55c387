"""Command-line front end.

    ringfed run     --config PATH [--seed-override N] [--workers K] [--out DIR] [--no-plots]
    ringfed sweep   --config PATH [--fractions F ...] [...same flags]
    ringfed compare INPUT [INPUT ...] [--out DIR] [--no-plots]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 input/output failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, encode
from .config import ConfigError, ScenarioConfig, load_config
from .experiment import (SUMMARY_COLUMNS, SWEEP_COLUMNS, SeedResult, run_seed, sweep_seed,
                         sweep_summary)
from .federation import METRIC_COLUMNS
from .nn import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
DEFAULT_OUT = "ringfed_out"
PLOT_COLUMNS = ["series", "cum_epochs", "sensitivity"]


# ---------------------------------------------------------------------------
# atomic file output


def write_atomic(path: Path, data: bytes | str) -> None:
    """Write to a temporary file next to ``path``, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise OSError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def resolve_out(flag: str | None, cfg: ScenarioConfig | None = None) -> Path:
    """--out flag, else the config's output.dir, else $RINGFED_OUT, else ./ringfed_out."""
    if flag:
        return Path(flag)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get("RINGFED_OUT") or DEFAULT_OUT)


# ---------------------------------------------------------------------------
# plots


def plot_curves(series: dict[str, list[tuple[int, float]]], path_png: Path, title: str,
                xlabel: str = "cumulative epochs", ylabel: str = "sensitivity",
                enabled: bool = True) -> Path:
    """Line plot of ``series`` plus its CSV twin; returns the CSV path.

    The twin is always written.  The image is skipped with a warning when
    plotting is disabled or matplotlib is unusable.
    """
    rows = [[name, x, f"{y:.6f}"] for name, pts in series.items() for x, y in pts]
    twin = path_png.with_suffix(".csv")
    write_atomic(twin, csv_text(PLOT_COLUMNS[:1] + [xlabel.replace(" ", "_"), ylabel], rows))
    if not enabled:
        return twin
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception as exc:  # any backend failure degrades to CSV only
        warnings.warn(f"plotting unavailable ({exc}); wrote {twin.name} only")
        return twin
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, pts in series.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", ms=3, lw=1, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_ylim(-0.02, 1.02)
    if len(series) <= 16:
        ax.legend(fontsize=7)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    write_atomic(path_png, buf.getvalue())
    return twin


def _metric_series(rows, key=lambda r: r[0]):
    series: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        series.setdefault(key(r), []).append((int(r[5]), float(r[6])))
    return series


# ---------------------------------------------------------------------------
# workers


def _run_one(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def _sweep_one(args):
    cfg, seed, fractions = args
    return seed, sweep_seed(cfg, seed, fractions)


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _manifest(cfg: ScenarioConfig, command: str, seeds: dict, out: Path, files) -> dict:
    return {
        "tool": "ringfed",
        "version": __version__,
        "command": command,
        "scenario": cfg.name,
        "config_source": cfg.source,
        "config_hash": cfg.hash,
        "config": cfg.resolved,
        "test_hashes": {str(s): h for s, h in seeds.items()},
        "files": {f: sha256_file(out / f) for f in sorted(files)},
    }


def _write_manifest(out: Path, manifest: dict) -> None:
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def execute_run(cfg: ScenarioConfig, out: Path, workers: int = 1,
                plots: bool = True) -> list[SeedResult]:
    """Run every configured schedule for every seed and write the artifacts."""
    results = _map(_run_one, [(cfg, s) for s in cfg.seeds], workers)
    files = ["metrics.csv"]
    rows = [row for res in results for row in res.rows()]
    write_atomic(out / "metrics.csv", csv_text(METRIC_COLUMNS, rows))
    for res in results:
        for rid, h in res.runs:
            name = f"ledger_{rid}.csv"
            write_atomic(out / name, h.ledger.to_csv())
            files.append(name)
            ckpt = f"checkpoints/{rid}.ckpt"
            write_atomic(out / ckpt, encode(h.final_model, h.final_si))
            files.append(ckpt)
    twin = plot_curves(_metric_series(rows), out / "plots" / "sensitivity.png",
                       f"{cfg.name}: global test sensitivity", enabled=plots)
    files.append(str(twin.relative_to(out)))
    _write_manifest(out, _manifest(cfg, "run", {r.seed: r.test_hash for r in results},
                                   out, files))
    return results


def execute_sweep(cfg: ScenarioConfig, out: Path, fractions=None, workers: int = 1,
                  plots: bool = True):
    fractions = tuple(cfg.sweep_fractions if fractions is None else fractions)
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("fractions must be a non-empty subset of (0, 1]")
    done = _map(_sweep_one, [(cfg, s, fractions) for s in cfg.seeds], workers)
    points = [p for _, pts in done for p in pts]
    write_atomic(out / "sweep.csv", csv_text(SWEEP_COLUMNS, [p.row() for p in points]))
    summary = sweep_summary(points)
    write_atomic(out / "sweep_summary.csv", csv_text(SUMMARY_COLUMNS, summary))
    series = {"sensitivity (median)": [(r[1], float(r[2])) for r in summary],
              "small-lesion TP ratio (median)": [(r[1], float(r[3])) for r in summary]}
    twin = plot_curves(series, out / "plots" / "sweep.png",
                       f"{cfg.name}: performance vs training volumes",
                       xlabel="training volumes", ylabel="value", enabled=plots)
    test_hashes = {seed: pts[0].test_hash for seed, pts in done}
    files = ["sweep.csv", "sweep_summary.csv", str(twin.relative_to(out))]
    _write_manifest(out, _manifest(cfg, "sweep", test_hashes, out, files))
    return points, summary


def _load_source(item: str, workers: int):
    """(label, rows, test hashes) from a config file (run now) or an output dir."""
    path = Path(item)
    if path.is_dir():
        manifest_path, metrics_path = path / "manifest.json", path / "metrics.csv"
        if not manifest_path.is_file() or not metrics_path.is_file():
            raise OSError(f"{path}: not a run output (needs manifest.json and metrics.csv)")
        manifest = json.loads(manifest_path.read_text("utf-8"))
        header, rows = read_csv(metrics_path)
        if header != METRIC_COLUMNS:
            raise OSError(f"{metrics_path}: unexpected columns")
        return manifest.get("scenario", path.name), rows, manifest.get("test_hashes", {})
    cfg = load_config(path)
    results = _map(_run_one, [(cfg, s) for s in cfg.seeds], workers)
    rows = [[str(v) for v in row] for res in results for row in res.rows()]
    return cfg.name, rows, {str(r.seed): r.test_hash for r in results}


def execute_compare(inputs, out: Path, workers: int = 1, plots: bool = True):
    sources = [_load_source(i, workers) for i in inputs]
    reference = sources[0][2]
    for label, _, hashes in sources[1:]:
        if hashes != reference:
            raise ConfigError(f"{label}: test set differs from {sources[0][0]}; "
                              "refusing to compare")
    labels, seen = [], {}
    for label, _, _ in sources:
        seen[label] = seen.get(label, 0) + 1
        labels.append(label if seen[label] == 1 else f"{label}#{seen[label]}")
    rows = [[lab] + list(r) for lab, (_, rs, _) in zip(labels, sources) for r in rs]
    write_atomic(out / "compare.csv", csv_text(["source"] + METRIC_COLUMNS, rows))
    series: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        series.setdefault(f"{r[0]}:{r[1]}", []).append((int(r[6]), float(r[7])))
    plot_curves(series, out / "plots" / "compare.png", "sensitivity by strategy",
                enabled=plots)
    return rows


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringfed", description=(
        "Peer-to-peer ring training with continual learning on synthetic "
        "multi-center lesion data."))
    p.add_argument("--version", action="version", version=f"ringfed {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_config=True):
        if with_config:
            sp.add_argument("--config", required=True, metavar="PATH",
                            help="scenario file (TOML)")
            sp.add_argument("--seed-override", type=int, metavar="N",
                            help="replace the configured master seed")
        sp.add_argument("--workers", type=int, default=1, metavar="K",
                        help="parallel worker processes over seeds (default 1)")
        sp.add_argument("--out", metavar="DIR",
                        help="output directory (default: config, $RINGFED_OUT, ./ringfed_out)")
        sp.add_argument("--no-plots", action="store_true", help="write CSV twins only")

    common(sub.add_parser("run", help="train the configured schedules"))
    sp = sub.add_parser("sweep", help="sensitivity against amount of training data")
    common(sp)
    sp.add_argument("--fractions", type=float, nargs="+", metavar="F",
                    help="fractions of the pooled training set (default: from config)")
    sp = sub.add_parser("compare", help="overlay sensitivity curves of several runs")
    sp.add_argument("inputs", nargs="+", metavar="INPUT",
                    help="scenario files to run, or output directories of earlier runs")
    common(sp, with_config=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.command == "compare":
            out = resolve_out(args.out)
            execute_compare(args.inputs, out, args.workers, not args.no_plots)
        else:
            cfg = load_config(args.config)
            if args.seed_override is not None:
                if args.seed_override < 0:
                    raise ConfigError("--seed-override must be non-negative")
                cfg = cfg.with_seed(args.seed_override)
            out = resolve_out(args.out, cfg)
            if args.command == "run":
                execute_run(cfg, out, args.workers, not args.no_plots)
            else:
                execute_sweep(cfg, out, args.fractions, args.workers, not args.no_plots)
    except ConfigError as exc:
        print(f"ringfed: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"ringfed: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"ringfed: i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"ringfed: wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
