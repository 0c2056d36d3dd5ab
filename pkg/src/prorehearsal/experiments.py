"""Config-driven experiment grid: data, training cells, evaluation batteries and reports."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .continual import (STRATEGY_KINDS, StrategyConfig, TaskData, TrainConfig, TrainingError,
                        prepare_task, train_prospective_models, train_task_incremental)
from .data import (DataError, ShiftSpec, TaskSeries, apply_shift, generate_task, load_csv,
                   make_windows, task_suite, write_csv)
from .dynamics import EmbeddingConfig, DynamicsError, closed_loop_eval, lyapunov_eckmann
from .metrics import (MetricError, MetricRecord, bwt, forgetting_ratio, js_distance, pearson_r,
                      r_squared, write_records_csv, dump_json, records_to_json,
                      wilcoxon_signed_rank)
from .models import BACKBONE_KINDS, HEAD_MODES, MultiTaskModel, default_backbone
from .robustness import (FGSM_TAUS, NOISE_LEVELS, ProbeConfig, feature_std, fgsm_perturb,
                         noise_perturb, probe_train_eval)

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
SUITES = ("enabl3s_like", "embry_like", "csv")
BATTERIES = ("shift_sweep", "fgsm", "noise", "probe", "lyapunov", "closed_loop")
OUT_ENV = "PROREHEARSAL_OUT"
JOBS_ENV = "PROREHEARSAL_JOBS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    """One (strategy, head mode) column of the grid."""

    name: str
    kind: str
    head_mode: str


@dataclass
class ExperimentConfig:
    suite: str = "enabl3s_like"
    cells: list = field(default_factory=lambda: [Cell("none", "none", "task_specific")])
    seeds: list = field(default_factory=lambda: [0])
    backbone: str = "tcn"
    task_order: list | None = None
    csv_tasks: list = field(default_factory=list)  # [{"train": path, "test": path, "id": ...}]
    data: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    strategy_params: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    shift: dict = field(default_factory=dict)
    lyapunov: dict = field(default_factory=dict)
    closed_loop: dict = field(default_factory=dict)
    output: str = "runs/experiment"
    raw: dict = field(default_factory=dict)

    # -- derived ----------------------------------------------------------
    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.train)

    def strategy(self, kind: str) -> StrategyConfig:
        return StrategyConfig(kind, **self.strategy_params.get(kind, {}))

    def enabled(self, battery: str) -> bool:
        return bool(self.evaluation.get(battery, False))

    @property
    def window_length(self) -> int:
        return int(self.data.get("window_length", 10))

    @property
    def shift_kind(self) -> str:
        return self.shift.get("kind", "additive_bias")

    @property
    def shift_magnitudes(self) -> list:
        return [float(m) for m in self.shift.get("magnitudes", DEFAULT_SHIFT_MAGNITUDES)]

    @property
    def compare_pair(self) -> tuple[str, str]:
        pair = self.shift.get("compare", ["prospective", "er"])
        return pair[0], pair[1]


DEFAULT_SHIFT_MAGNITUDES = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0)
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_DATA_KEYS = {"samples", "test_samples", "noise", "dim", "window_length", "trial_length",
              "steps_per_cycle", "train_fraction"}
_TOP_KEYS = {"suite", "strategies", "seeds", "backbone", "head_mode", "task_order", "csv",
             "data", "train", "strategy_params", "evaluation", "shift", "lyapunov",
             "closed_loop", "output"}


def _parse_cells(items, head_mode: str) -> list[Cell]:
    if not items:
        raise ConfigError("strategies must be a nonempty list")
    cells = []
    for it in items:
        if isinstance(it, str):
            it = {"kind": it}
        if not isinstance(it, dict) or "kind" not in it:
            raise ConfigError(f"bad strategy entry {it!r}")
        kind = it["kind"]
        if kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {kind!r}")
        hm = it.get("head_mode", head_mode)
        if hm not in HEAD_MODES:
            raise ConfigError(f"unknown head_mode {hm!r}")
        cells.append(Cell(str(it.get("name", kind)), kind, hm))
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ConfigError("strategy names must be unique; set 'name' to disambiguate")
    return cells


def config_from_dict(doc: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    suite = doc.get("suite", "enabl3s_like")
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}")
    seeds = doc.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a nonempty list of integers")
    backbone = doc.get("backbone", "tcn")
    if backbone not in BACKBONE_KINDS:
        raise ConfigError(f"unknown backbone {backbone!r}")
    cells = _parse_cells(doc.get("strategies", ["none"]), doc.get("head_mode", "task_specific"))
    data = dict(doc.get("data") or {})
    if set(data) - _DATA_KEYS:
        raise ConfigError(f"unknown data keys {sorted(set(data) - _DATA_KEYS)}")
    train = dict(doc.get("train") or {})
    if set(train) - _TRAIN_KEYS:
        raise ConfigError(f"unknown train keys {sorted(set(train) - _TRAIN_KEYS)}")
    try:
        TrainConfig(**train)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train settings: {e}") from None
    sp = dict(doc.get("strategy_params") or {})
    for kind, params in sp.items():
        try:
            StrategyConfig(kind, **(params or {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid strategy_params for {kind}: {e}") from None
    ev = dict(doc.get("evaluation") or {})
    if set(ev) - set(BATTERIES):
        raise ConfigError(f"unknown evaluation toggles {sorted(set(ev) - set(BATTERIES))}")
    shift = dict(doc.get("shift") or {})
    try:
        for m in shift.get("magnitudes", DEFAULT_SHIFT_MAGNITUDES):
            ShiftSpec(shift.get("kind", "additive_bias"), float(m))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid shift settings: {e}") from None
    csv_tasks = []
    if suite == "csv":
        base = Path(base_dir)
        entries = doc.get("csv") or []
        if not entries:
            raise ConfigError("suite 'csv' needs a 'csv' list of task files")
        for e in entries:
            e = {"train": e} if isinstance(e, str) else dict(e)
            for role in ("train", "test"):
                if role in e:
                    p = Path(e[role])
                    p = p if p.is_absolute() else base / p
                    if not p.exists():
                        raise ConfigError(f"file not found: {p}")
                    e[role] = str(p)
            if "test" not in e:
                raise ConfigError(f"csv task {e['train']} needs a 'test' file")
            csv_tasks.append(e)
    return ExperimentConfig(suite=suite, cells=cells, seeds=list(seeds), backbone=backbone,
                            task_order=doc.get("task_order"), csv_tasks=csv_tasks, data=data,
                            train=train, strategy_params=sp, evaluation=ev, shift=shift,
                            lyapunov=dict(doc.get("lyapunov") or {}),
                            closed_loop=dict(doc.get("closed_loop") or {}),
                            output=str(doc.get("output", "runs/experiment")), raw=doc)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    return config_from_dict(doc, path.parent)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def build_series(cfg: ExperimentConfig, seed: int) -> list[TaskSeries]:
    if cfg.suite == "csv":
        out = [load_csv(e["train"], task_id=e.get("id"), test_path=e["test"],
                        train_fraction=cfg.data.get("train_fraction", 0.8))
               for e in cfg.csv_tasks]
    else:
        overrides = {k: v for k, v in cfg.data.items()}
        specs = task_suite(cfg.suite, seed=seed, **overrides)
        out = [generate_task(s) for s in specs]
    if cfg.task_order:
        by_id = {s.task_id: s for s in out}
        missing = [t for t in cfg.task_order if t not in by_id]
        if missing:
            raise ConfigError(f"task_order names unknown tasks {missing}")
        out = [by_id[t] for t in cfg.task_order]
    return out


def gen_data(cfg: ExperimentConfig, out_dir: Path, seed_offset: int = 0) -> list[Path]:
    """Write ``<task>.csv`` and ``<task>_test.csv`` per task and seed."""
    paths = []
    for seed in cfg.seeds:
        s = seed + seed_offset
        d = out_dir / f"seed{s}"
        d.mkdir(parents=True, exist_ok=True)
        for series in build_series(cfg, s):
            p = d / f"{series.task_id}.csv"
            write_csv(series, p)
            write_csv(series.test, d / f"{series.task_id}_test.csv")
            paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# one training cell
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    cell: Cell
    seed: int
    records: list = field(default_factory=list)
    eps: dict | None = None
    curves: list = field(default_factory=list)
    shift_points: list = field(default_factory=list)
    closed_loop: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None


def _mean_r2(model, tds: list[TaskData], transform) -> float:
    vals = []
    for td in tds:
        x = transform(td)
        vals.append(r_squared(td.test.targets, model.predict(td.task, x)))
    return float(np.mean(vals))


def train_cell(cfg: ExperimentConfig, cell: Cell, seed: int, tds: list[TaskData] | None = None,
               g_models: dict | None = None):
    """Train one cell; returns ``(model, TrainLog, tasks, g_models)``."""
    tcfg = cfg.train_config(seed)
    if tds is None:
        tds = [prepare_task(s, cfg.window_length) for s in build_series(cfg, seed)]
    if cell.kind == "prospective" and g_models is None:
        g_models = train_prospective_models(tds, tcfg)
    d = tds[0].series.dim
    model = MultiTaskModel(default_backbone(cfg.backbone, d, cfg.window_length), cell.head_mode,
                           seed=seed)
    model, _, tlog = train_task_incremental(model, g_models, None, tds, cfg.strategy(cell.kind), tcfg)
    return model, tlog, tds, g_models


def run_cell(cfg: ExperimentConfig, cell: Cell, seed: int) -> CellResult:
    res = CellResult(cell, seed)
    run_id = f"{cell.name}-s{seed}"

    def rec(task, metric, value):
        res.records.append(MetricRecord(run_id, cell.name, task, metric, float(value), seed))

    try:
        model, tlog, tds, g_models = train_cell(cfg, cell, seed)
    except (TrainingError, DataError, MetricError) as e:
        res.status, res.error = "aborted", str(e)
        return res
    res.eps = tlog.eps.to_dict()
    n = len(tds)
    for j, td in enumerate(tds, start=1):
        rec(td.task, "r2", tlog.r2[(n, j)])
        rec(td.task, "nrmse", tlog.eps.get(n, j))
        if j < n:
            rec(td.task, "fr", forgetting_ratio(tlog.eps, j, n))
    rec("all", "mean_r2", np.mean([tlog.r2[(n, j)] for j in range(1, n + 1)]))
    if n >= 2:
        rec("all", "bwt", bwt(tlog.eps, n))
        rec("all", "mean_fr", np.mean([forgetting_ratio(tlog.eps, j, n) for j in range(1, n)]))

    sigma = {td.task: feature_std(td.test.inputs) for td in tds}
    if cfg.enabled("fgsm"):
        for tau in cfg.evaluation.get("fgsm_taus", FGSM_TAUS):
            v = _mean_r2(model, tds, lambda td: fgsm_perturb(model, td.task, td.test.inputs,
                                                             td.test.targets, tau, sigma[td.task]))
            rec("all", f"fgsm_r2@{tau}", v)
            res.curves.append({"perturbation": "fgsm", "magnitude": tau, "strategy": cell.name,
                               "seed": seed, "mean_r2": v})
    if cfg.enabled("noise"):
        for L in cfg.evaluation.get("noise_levels", NOISE_LEVELS):
            v = _mean_r2(model, tds, lambda td: noise_perturb(
                td.test.inputs, L, np.random.default_rng([seed, 40, tds.index(td)]), sigma[td.task]))
            rec("all", f"noise_r2@{L}", v)
            res.curves.append({"perturbation": "noise", "magnitude": L, "strategy": cell.name,
                               "seed": seed, "mean_r2": v})
    if cfg.enabled("probe") and cell.kind != "pnn":
        x = np.concatenate([td.test.inputs for td in tds])
        labels = np.concatenate([np.full(len(td.test), i) for i, td in enumerate(tds)])
        feats = model.backbone_features(x)
        for kind in ("linear", "mlp"):
            acc = probe_train_eval(model, x, labels, ProbeConfig(kind), seed=seed, features=feats)
            rec("all", f"probe_{kind}", acc)
    if cfg.enabled("lyapunov"):
        ecfg = EmbeddingConfig(**cfg.lyapunov.get("embedding", {}))
        for td in tds:
            pred = model.predict(td.task, td.test.inputs)
            try:
                l1, l2 = lyapunov_eckmann(pred, ecfg)
            except DynamicsError as e:
                log.info("lyapunov skipped for %s: %s", td.task, e)
                continue
            rec(td.task, "lyap_l1", l1)
            rec(td.task, "lyap_l2", l2)
    if cfg.enabled("closed_loop"):
        res.closed_loop = _closed_loop(cfg, model, tds, seed, cell.name, g_models, rec)
    if cfg.enabled("shift_sweep"):
        for m in cfg.shift_magnitudes:
            spec = ShiftSpec(cfg.shift_kind, m)
            for td in tds:
                shifted = apply_shift(td.series.test, spec)
                ws = make_windows(shifted, cfg.window_length)
                r2 = r_squared(ws.targets, model.predict(td.task, ws.inputs))
                js = js_distance(td.series.test.X, shifted.X)
                res.shift_points.append({"magnitude": m, "task": td.task, "seed": seed,
                                         "strategy": cell.name, "r2": r2, "js": js})
                rec(td.task, f"shift_r2@{m}", r2)
    return res


def _closed_loop(cfg, model, tds, seed, name, g_models, rec):
    horizon = int(cfg.closed_loop.get("horizon", 20))
    starts = int(cfg.closed_loop.get("starts", 20))
    shift = cfg.closed_loop.get("shift")
    if g_models is None:
        g_models = train_prospective_models(tds, cfg.train_config(seed))
    rows = []
    T = cfg.window_length
    for i, td in enumerate(tds):
        test = td.series.test
        if shift:
            test = apply_shift(test, ShiftSpec(shift["kind"], float(shift["magnitude"])))
        ws = make_windows(test, T)
        # starting windows whose next `horizon` rows stay in the same trial
        ok = [j for j, k in enumerate(ws.steps)
              if k + horizon < len(test) and test.trial_ids[k + horizon] == test.trial_ids[k]]
        rng = np.random.default_rng([seed, 50, i])
        pick = rng.choice(ok, size=min(starts, len(ok)), replace=False)
        devs = []
        for j in pick:
            k = int(ws.steps[j])
            out = closed_loop_eval(model, td.task, g_models[td.task], ws.inputs[j], horizon,
                                   test.X[k + 1:k + 1 + horizon])
            devs.append(out.deviations)
        devs = np.array(devs)
        mean = np.nanmean(devs, axis=0)
        for h, v in enumerate(mean, start=1):
            rows.append({"strategy": name, "seed": seed, "task": td.task, "step": h,
                         "deviation": float(v)})
        rec(td.task, f"closed_loop_dev@{horizon}", mean[-1])
    return rows


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def _run_cell_args(args):
    cfg, cell, seed = args
    return run_cell(cfg, cell, seed)


def run_grid(cfg: ExperimentConfig, seed_offset: int = 0, jobs: int = 1) -> list[CellResult]:
    work = [(cfg, cell, seed + seed_offset) for cell in cfg.cells for seed in cfg.seeds]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_run_cell_args, work))
    return [_run_cell_args(w) for w in work]


def shift_summary(results: list[CellResult], pair: tuple[str, str]) -> dict:
    """Per-magnitude mean delta-R2 (pair[0] - pair[1]) vs JS, Pearson r and LS slope."""
    a, b = pair
    pts: dict = {}
    for res in results:
        for p in res.shift_points:
            key = (p["magnitude"], p["seed"], p["task"])
            pts.setdefault(key, {})[p["strategy"]] = p
    by_mag: dict = {}
    for (m, seed, task), d in sorted(pts.items()):
        if a in d and b in d:
            by_mag.setdefault(m, []).append((d[a]["r2"] - d[b]["r2"], d[a]["js"], seed, task))
    if not by_mag:
        raise ConfigError(f"shift sweep needs results for both {a!r} and {b!r}")
    points = []
    for m in sorted(by_mag):
        rows = by_mag[m]
        points.append({"magnitude": m, "delta_r2": float(np.mean([r[0] for r in rows])),
                       "js": float(np.mean([r[1] for r in rows])), "n": len(rows)})
    xs = np.array([p["js"] for p in points])
    ys = np.array([p["delta_r2"] for p in points])
    try:
        r = pearson_r(xs, ys)
        slope = float(np.polyfit(xs, ys, 1)[0])
    except (MetricError, np.linalg.LinAlgError, ValueError):
        r, slope = None, None  # undefined, e.g. constant points
    top = by_mag[max(by_mag)]
    diffs = [row[0] for row in top]
    try:
        test = wilcoxon_signed_rank(diffs)
        p_top = test.pvalue
    except MetricError:
        p_top = None  # too few nonzero pairs
    return {"pair": [a, b], "points": points, "pearson_r": r, "slope": slope,
            "largest_shift": {"magnitude": max(by_mag), "mean_delta_r2": float(np.mean(diffs)),
                              "wilcoxon_p": p_top, "n": len(diffs)}}


def build_report(cfg: ExperimentConfig, results: list[CellResult], wall: float) -> dict:
    status = "ok" if all(r.status == "ok" for r in results) else "partial"
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool_version": __version__,
        "status": status,
        "wall_clock_seconds": wall,
        "config": cfg.raw,
        "records": records_to_json(r for res in results for r in res.records),
        "error_matrices": {f"{res.cell.name}-s{res.seed}": res.eps for res in results if res.eps},
        "robustness_curves": [c for res in results for c in res.curves],
        "closed_loop": [c for res in results for c in res.closed_loop],
        "aborted": [{"run_id": f"{res.cell.name}-s{res.seed}", "error": res.error}
                    for res in results if res.status != "ok"],
    }
    if any(res.shift_points for res in results):
        report["shift_sweep"] = shift_summary(results, cfg.compare_pair)
    return report


def write_report(report: dict, results: list[CellResult], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(report, out_dir / "report.json")
    write_records_csv([r for res in results for r in res.records], out_dir / "metrics.csv")


def resolve_out(cfg: ExperimentConfig, cli_out: str | None) -> Path:
    return Path(cli_out or os.environ.get(OUT_ENV) or cfg.output)


def run_experiment(cfg: ExperimentConfig, out_dir: Path, seed_offset: int = 0,
                   jobs: int = 1) -> tuple[dict, list[CellResult]]:
    t0 = time.perf_counter()
    results = run_grid(cfg, seed_offset, jobs)
    report = build_report(cfg, results, time.perf_counter() - t0)
    write_report(report, results, out_dir)
    return report, results


def with_overrides(cfg: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
