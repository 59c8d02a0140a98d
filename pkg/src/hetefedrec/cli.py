"""Command-line experiment runner.

::

    hetefedrec run --config exp.ini --out runs/exp
    hetefedrec run --strategy standalone --epochs 0 --out runs/sa
    hetefedrec run --suite ablation --out runs/ablation
    hetefedrec compare runs/a runs/b
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from hetefedrec import __version__
from hetefedrec.config import ConfigError, ExperimentConfig, Strategy, dumps, loads
from hetefedrec.model import save_checkpoint
from hetefedrec.orchestrator import Federation, load_dataset, run_experiment
from hetefedrec.training import NonFiniteError

log = logging.getLogger("hetefedrec")

METRICS_HEADER = ("epoch", "strategy", "group", "metric", "value")

SUITES = {
    "ablation": [
        ("full", {}),
        ("-KD", {"kd_enabled": False}),
        ("-KD-DDR", {"kd_enabled": False, "alpha": 0.0}),
        ("-KD-DDR-UDL", {"kd_enabled": False, "alpha": 0.0, "udl": False}),
    ],
    "division": [
        ("5:3:2", {"quantiles": (0.5, 0.8)}),
        ("1:1:1", {"quantiles": (1 / 3, 2 / 3)}),
        ("2:3:5", {"quantiles": (0.2, 0.5)}),
        ("all-small", {"strategy": Strategy.ALL_SMALL}),
        ("all-large", {"strategy": Strategy.ALL_LARGE}),
    ],
    "model-size": [
        (f"{s}@{w[0]}-{w[1]}-{w[2]}", {"strategy": s, "widths": w})
        for w in ((2, 4, 8), (8, 16, 32), (32, 64, 128))
        for s in (Strategy.ALL_SMALL, Strategy.ALL_LARGE, Strategy.HETEFEDREC)
    ],
    "alpha": [(f"alpha={a}", {"alpha": a}) for a in (0.5, 1.0, 1.5, 2.0)],
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def run(config: ExperimentConfig, output_dir, config_source: bytes | None = None) -> int:
    """Run one experiment and write its artefacts; returns a process exit status."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = dumps(config)
    manifest = {
        "config": text,
        "config_digest": hashlib.sha256(config_source if config_source is not None else text.encode()).hexdigest(),
        "code_version": __version__,
        "seed": config.seed,
        "strategy": config.strategy.value,
        "started": _now(),
        "finished": None,
    }
    _write_json(out / "manifest.json", manifest)

    ds = load_dataset(config)
    csv_path = out / "metrics.csv"
    checkpoints = set(config.checkpoint_epochs)

    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

        def on_epoch(epoch: int, fed: Federation, report) -> None:
            for row in report.rows():
                writer.writerow([_fmt(v) for v in row])
            fh.flush()
            if epoch in checkpoints:
                (out / "checkpoints").mkdir(exist_ok=True)
                save_checkpoint(out / "checkpoints" / f"epoch_{epoch}.npz", fed.state.params)
            on_epoch.fed = fed

        try:
            reports = run_experiment(config, ds, on_epoch)
        except NonFiniteError as exc:
            log.error("aborting: %s", exc)
            _write_json(out / "diagnostic.json", {"error": str(exc), "config": text, "time": _now()})
            return 1

    fed = on_epoch.fed
    final = reports[-1].to_dict()
    final.update(
        dataset_digest=ds.digest(),
        num_users=ds.num_users,
        num_items=ds.num_items,
        group_counts=list(fed.groups.counts),
        group_cutoffs=list(fed.groups.cutoffs),
        prefix_gap=fed.state.params.prefix_gap(),
        rounds=fed.state.round,
    )
    _write_json(out / "final_report.json", final)
    manifest["finished"] = _now()
    _write_json(out / "manifest.json", manifest)
    return 0


def run_suite(suite: str, config: ExperimentConfig, output_dir) -> int:
    """Run every variant of ``suite`` under ``output_dir`` and write ``<suite>.csv``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    status = 0
    for name, changes in SUITES[suite]:
        sub = out / name.replace(":", "-").replace("@", "_")
        code = run(config.replace(**changes), sub)
        status = status or code
        if code:
            continue
        report = json.loads((sub / "final_report.json").read_text())
        row = {"variant": name, "strategy": report["strategy"]}
        for group in ("overall", "small", "medium", "large"):
            row[f"recall_{group}"] = report["recall"].get(group, "")
            row[f"ndcg_{group}"] = report["ndcg"].get(group, "")
        row["singular_variance_widest"] = report["singular_variance"][-1]
        rows.append(row)
    if rows:
        with open(out / f"{suite.replace('-', '_')}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return status


def _load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "final_report.json"
    return json.loads(path.read_text(encoding="utf-8"))


def compare(report_paths: Sequence) -> list[dict]:
    """Side-by-side final metrics; the best value of each column is flagged.

    Every row also carries its difference to the first report.
    """
    if len(report_paths) < 2:
        raise ValueError("compare needs at least two reports")
    reports = [_load_report(p) for p in report_paths]
    digests = {r.get("dataset_digest") for r in reports}
    if len(digests) != 1:
        raise ValueError("reports were produced on different datasets")
    k = reports[0]["k"]
    columns = [f"recall@{k}", f"ndcg@{k}"]
    rows = []
    for path, r in zip(report_paths, reports):
        rows.append({"report": str(path), "strategy": r["strategy"],
                     columns[0]: r["recall"]["overall"], columns[1]: r["ndcg"]["overall"]})
    for col in columns:
        best = max(row[col] for row in rows)
        for row in rows:
            row[f"{col}_best"] = row[col] == best
            row[f"{col}_delta"] = row[col] - rows[0][col]
    return rows


def format_table(rows: list[dict]) -> str:
    metric_cols = [c for c in rows[0] if c.startswith(("recall@", "ndcg@")) and not c.endswith(("_best", "_delta"))]
    lines = ["report\tstrategy\t" + "\t".join(metric_cols)]
    for row in rows:
        cells = [f"{row[c]:.5f}{'*' if row[c + '_best'] else ''} ({row[c + '_delta']:+.5f})" for c in metric_cols]
        lines.append("\t".join([row["report"], row["strategy"], *cells]))
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetefedrec", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment or a sweep")
    p.add_argument("--config", type=Path)
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--suite", choices=sorted(SUITES))

    c = sub.add_parser("compare", help="compare final reports")
    c.add_argument("reports", nargs="+")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "compare":
        try:
            print(format_table(compare(args.reports)))
        except (ValueError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    source = None
    try:
        if args.config:
            source = args.config.read_bytes()
            config = loads(source.decode("utf-8"))
        else:
            config = ExperimentConfig()
        overrides = {k: v for k, v in (("strategy", args.strategy), ("seed", args.seed),
                                       ("epochs", args.epochs), ("workers", args.workers)) if v is not None}
        config = config.replace(**overrides)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    start = time.perf_counter()
    if args.suite:
        status = run_suite(args.suite, config, args.out)
    else:
        status = run(config, args.out, source if not overrides else None)
    log.info("finished in %.1fs", time.perf_counter() - start)
    return status


if __name__ == "__main__":
    sys.exit(main())
