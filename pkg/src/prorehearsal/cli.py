"""Command-line entry point: ``prorehearsal <subcommand> --config FILE``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import DataError, load_csv
from .dynamics import (DynamicsError, EmbeddingConfig, henon_orbit, logistic_series,
                       lyapunov_eckmann, write_deviation_csv)
from .experiments import (JOBS_ENV, ConfigError, gen_data, load_config, resolve_out,
                          run_experiment)
from .metrics import MetricError, read_records_csv, records_from_json, significance_stars, \
    wilcoxon_signed_rank
from .robustness import write_curve_csv

log = logging.getLogger("prorehearsal")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CompareError(ValueError):
    pass


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = resolve_out(cfg, args.out)
    try:
        paths = gen_data(cfg, out, args.seed_offset)
    except OSError as e:
        raise ConfigError(f"cannot write to {out}: {e}") from None
    print(f"wrote {len(paths)} task files under {out}")
    return EXIT_OK


def _finish(report, out: Path) -> int:
    print(f"report: {out / 'report.json'}")
    if report["status"] != "ok":
        for a in report["aborted"]:
            print(f"aborted {a['run_id']}: {a['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_run(args, battery_overrides: dict | None = None, strategies=None) -> tuple[int, dict, Path]:
    cfg = load_config(args.config)
    if battery_overrides:
        cfg = replace(cfg, evaluation={**cfg.evaluation, **battery_overrides})
    if strategies is not None:
        cfg = replace(cfg, cells=strategies)
    out = resolve_out(cfg, args.out)
    report, _ = run_experiment(cfg, out, args.seed_offset, args.jobs)
    return _finish(report, out), report, out


def _load_records(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    if p.suffix == ".csv":
        return read_records_csv(p)
    with open(p, encoding="utf-8") as fh:
        return records_from_json(json.load(fh)["records"])


def compare_records(rec_a, rec_b, metric: str, pairing: str = "seed") -> list[dict]:
    """Wilcoxon comparisons of ``metric`` between two record sets.

    ``pairing="seed"`` tests each task separately over seeds; ``"seed_task"``
    pools all (seed, task) pairs into one test. p-values are Bonferroni
    corrected by the number of comparisons.
    """
    def index(recs):
        out = {}
        for r in recs:
            if r.metric == metric:
                out[(r.task, r.seed)] = r.value
        return out

    a, b = index(rec_a), index(rec_b)
    if not a or not b:
        raise CompareError(f"metric {metric!r} missing from one of the reports")
    seeds_a = {s for _, s in a}
    seeds_b = {s for _, s in b}
    orphans = sorted(seeds_a ^ seeds_b)
    if orphans:
        raise CompareError(f"unmatched seeds: {orphans}")
    keys = sorted(set(a) & set(b))
    groups: dict = {}
    for task, seed in keys:
        g = task if pairing == "seed" else "pooled"
        groups.setdefault(g, []).append(a[(task, seed)] - b[(task, seed)])
    rows = []
    m = len(groups)
    for g, diffs in sorted(groups.items()):
        diffs = np.asarray(diffs)
        if np.all(diffs == 0):
            p, stat = 1.0, float("nan")
        else:
            try:
                res = wilcoxon_signed_rank(diffs)
                p, stat = res.pvalue, res.statistic
            except MetricError:
                p, stat = float("nan"), float("nan")
        p_adj = min(1.0, p * m) if np.isfinite(p) else p
        rows.append({"group": g, "n": int(len(diffs)), "mean_diff": float(np.mean(diffs)),
                     "W": stat, "p": p, "p_bonferroni": p_adj,
                     "stars": significance_stars(p_adj) if np.isfinite(p_adj) else "n/a"})
    return rows


def cmd_compare(args) -> int:
    if len(args.reports) != 2:
        raise ConfigError("compare takes exactly two report paths")
    try:
        rows = compare_records(_load_records(args.reports[0]), _load_records(args.reports[1]),
                               args.metric, args.pairing)
    except CompareError as e:
        raise ConfigError(str(e)) from None
    fields = ["group", "n", "mean_diff", "W", "p", "p_bonferroni", "stars"]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([r[f] for f in fields])
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "compare.csv", "w", newline="", encoding="utf-8") as fh:
            cw = csv.writer(fh, lineterminator="\n")
            cw.writerow(fields)
            for r in rows:
                cw.writerow([r[f] for f in fields])
    return EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"


def cmd_shift_sweep(args) -> int:
    cfg = load_config(args.config)
    if len(cfg.shift_magnitudes) < 5:
        raise ConfigError("shift sweep needs at least 5 magnitudes")
    a, b = cfg.compare_pair
    cells = [c for c in cfg.cells if c.name in (a, b)]
    if len(cells) != 2:
        raise ConfigError(f"shift sweep needs strategies named {a!r} and {b!r}")
    code, report, out = cmd_run(args, {"shift_sweep": True}, cells)
    summary = report.get("shift_sweep")
    if summary:
        with open(out / "shift_sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["magnitude", "js", "delta_r2"])
            for p in summary["points"]:
                w.writerow([repr(p["magnitude"]), repr(p["js"]), repr(p["delta_r2"])])
        top = summary["largest_shift"]
        print(f"pearson_r={_fmt(summary['pearson_r'])} slope={_fmt(summary['slope'])} "
              f"largest_shift_delta={_fmt(top['mean_delta_r2'])} p={_fmt(top['wilcoxon_p'])}")
    return code


def cmd_robustness(args) -> int:
    code, report, out = cmd_run(args, {"fgsm": True, "noise": True, "probe": True})
    write_curve_csv(report["robustness_curves"], out / "robustness.csv")
    return code


def cmd_closed_loop(args) -> int:
    code, report, out = cmd_run(args, {"closed_loop": True})
    write_deviation_csv(report["closed_loop"], out / "closed_loop.csv",
                        ["strategy", "seed", "task", "step", "deviation"])
    return code


def cmd_lyapunov(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.lyapunov
    source = spec.get("source", "logistic")
    n = int(spec.get("length", 5000))
    if source == "logistic":
        series = logistic_series(n)
    elif source == "henon":
        series = henon_orbit(n)[:, 0]
    elif source == "csv":
        if "path" not in spec:
            raise ConfigError("lyapunov source 'csv' needs a path")
        path = Path(spec["path"])
        if not path.is_absolute():
            path = Path(args.config).parent / path
        try:
            series = load_csv(path).y
        except (OSError, DataError) as e:
            raise ConfigError(str(e)) from None
    else:
        raise ConfigError(f"unknown lyapunov source {source!r}")
    try:
        ecfg = EmbeddingConfig(**spec.get("embedding", {}))
    except (TypeError, DynamicsError) as e:
        raise ConfigError(f"invalid embedding settings: {e}") from None
    l1, l2 = lyapunov_eckmann(series, ecfg)
    out = resolve_out(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "lyapunov.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "lambda1", "lambda2"])
        w.writerow([source, repr(l1), repr(l2)])
    print(f"lambda1={l1:.4f} lambda2={l2:.4f}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": lambda a: cmd_run(a)[0],
    "compare": cmd_compare,
    "shift-sweep": cmd_shift_sweep,
    "robustness": cmd_robustness,
    "lyapunov": cmd_lyapunov,
    "closed-loop": cmd_closed_loop,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prorehearsal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    default_jobs = int(os.environ.get(JOBS_ENV, "1"))
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "compare":
            sp.add_argument("reports", nargs="+", help="two report.json / metrics.csv paths")
            sp.add_argument("--metric", default="nrmse")
            sp.add_argument("--pairing", choices=("seed", "seed_task"), default="seed")
        else:
            sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None)
        sp.add_argument("--seed-offset", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=default_jobs)
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MetricError, DynamicsError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
