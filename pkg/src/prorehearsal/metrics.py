"""Scalar evaluation quantities: R^2, NRMSE, BWT, FR, JS distance, Wilcoxon."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _pair(y_true, y_pred):
    y = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if y.size == 0 or y.shape != p.shape:
        raise MetricError(f"need equal nonzero lengths, got {y.size} and {p.size}")
    return y, p


def r_squared(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise MetricError("R^2 undefined for a constant target")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def nrmse(y_true, y_pred) -> float:
    """RMSE divided by the range of ``y_true``."""
    y, p = _pair(y_true, y_pred)
    rng = y.max() - y.min()
    if rng == 0:
        raise MetricError("NRMSE undefined for a constant target")
    return float(np.sqrt(np.mean((y - p) ** 2)) / rng)


# ---------------------------------------------------------------------------
# forgetting
# ---------------------------------------------------------------------------

@dataclass
class ErrorMatrix:
    """``eps[i][j]``: error on task j after training through task i (1-based)."""

    tasks: list[str]
    values: dict[tuple[int, int], float] = field(default_factory=dict)
    kind: str = "nrmse"

    def set(self, i: int, j: int, value: float):
        if j > i:
            raise MetricError(f"entry ({i}, {j}) lies above the diagonal")
        if not (np.isfinite(value) and value >= 0):
            raise MetricError(f"error entry ({i}, {j}) must be finite and >= 0, got {value}")
        self.values[(i, j)] = float(value)

    def get(self, i: int, j: int) -> float:
        try:
            return self.values[(i, j)]
        except KeyError:
            raise MetricError(f"missing error entry eps_{i}({j})") from None

    def is_complete(self) -> bool:
        n = len(self.tasks)
        return all((i, j) in self.values for i in range(1, n + 1) for j in range(1, i + 1))

    def as_array(self) -> np.ndarray:
        n = len(self.tasks)
        out = np.full((n, n), np.nan)
        for (i, j), v in self.values.items():
            out[i - 1, j - 1] = v
        return out

    def to_dict(self) -> dict:
        return {"tasks": list(self.tasks), "kind": self.kind,
                "entries": [[i, j, v] for (i, j), v in sorted(self.values.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorMatrix":
        m = cls(list(d["tasks"]), kind=d.get("kind", "nrmse"))
        for i, j, v in d["entries"]:
            m.set(int(i), int(j), float(v))
        return m


def bwt(eps: ErrorMatrix, t: int) -> float:
    """Mean over j < t of ``eps_j(j) - eps_t(j)``; negative means forgetting."""
    if t < 2:
        raise MetricError("BWT needs t >= 2")
    return float(sum(eps.get(j, j) - eps.get(t, j) for j in range(1, t)) / (t - 1))


def forgetting_ratio(eps: ErrorMatrix, t: int, T: int | None = None) -> float:
    """``(eps_T(t) - eps_t(t)) / eps_t(t)`` with T the final task by default."""
    T = len(eps.tasks) if T is None else T
    base = eps.get(t, t)
    if base == 0:
        raise MetricError(f"forgetting ratio undefined: eps_{t}({t}) = 0")
    return float((eps.get(T, t) - base) / base)


# ---------------------------------------------------------------------------
# Jensen-Shannon
# ---------------------------------------------------------------------------

def _js_1d(a: np.ndarray, b: np.ndarray, bins: int, smooth: float) -> float:
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        log.info("constant feature in js_distance; contributes 0")
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0] + smooth
    q = np.histogram(b, edges)[0] + smooth
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    div = 0.5 * np.sum(p * np.log2(p / m)) + 0.5 * np.sum(q * np.log2(q / m))
    return float(np.sqrt(max(div, 0.0)))


def js_distance(sample_a, sample_b, bins: int = 50, smooth: float = 1e-10) -> float:
    """Mean over features of the base-2 Jensen-Shannon distance of histograms."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) < 10 or len(b) < 10:
        raise MetricError("js_distance needs at least 10 samples per side")
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"feature count mismatch {a.shape[1]} vs {b.shape[1]}")
    return float(np.mean([_js_1d(a[:, j], b[:, j], bins, smooth) for j in range(a.shape[1])]))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    pvalue: float
    w_plus: float
    w_minus: float
    n: int
    exact: bool


EXACT_MAX_N = 12


def _exact_null(ranks: np.ndarray) -> np.ndarray:
    """W+ under all 2^n sign assignments (ranks may be tied averages)."""
    signs = np.array(list(itertools.product((0, 1), repeat=len(ranks))), dtype=np.float64)
    return signs @ ranks


def wilcoxon_signed_rank(differences: Sequence[float], alternative: str = "two-sided") -> WilcoxonResult:
    """Signed-rank test on paired differences; zeros are dropped.

    ``alternative`` is ``two-sided``, ``greater`` (differences tend positive)
    or ``less``. Exact enumeration up to 12 nonzero differences, otherwise the
    normal approximation with continuity and tie corrections.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise MetricError(f"unknown alternative {alternative!r}")
    d = np.asarray(differences, dtype=np.float64).ravel()
    if not np.isfinite(d).all():
        raise MetricError("non-finite difference")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise MetricError("all differences are zero")
    if n < 5:
        raise MetricError(f"need at least 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    if n <= EXACT_MAX_N:
        null = _exact_null(ranks)
        tol = 1e-9
        p_ge = float(np.mean(null >= w_plus - tol))
        p_le = float(np.mean(null <= w_plus + tol))
        exact = True
    else:
        mu = n * (n + 1) / 4.0
        _, counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
        sd = math.sqrt(var)
        p_ge = float(norm.sf((w_plus - mu - 0.5) / sd))
        p_le = float(norm.cdf((w_plus - mu + 0.5) / sd))
        exact = False
    if alternative == "greater":
        p = p_ge
    elif alternative == "less":
        p = p_le
    else:
        p = min(1.0, 2 * min(p_ge, p_le))
    return WilcoxonResult(min(w_plus, w_minus), p, w_plus, w_minus, n, exact)


def significance_stars(p: float) -> str:
    if p < 1e-4:
        return "****"
    if p < 1e-3:
        return "***"
    if p < 1e-2:
        return "**"
    if p < 5e-2:
        return "*"
    return "ns"


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt(np.sum(xc ** 2) * np.sum(yc ** 2))
    if den == 0:
        raise MetricError("correlation undefined for constant input")
    return float(np.sum(xc * yc) / den)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

RECORD_FIELDS = ("run_id", "strategy", "task", "metric", "value", "seed")


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    strategy: str
    task: str
    metric: str
    value: float
    seed: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise MetricError(f"non-finite metric {self.metric} for {self.task}")


def write_records_csv(records: Iterable[MetricRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.run_id, r.strategy, r.task, r.metric, repr(float(r.value)), int(r.seed)])


def read_records_csv(path: str | Path) -> list[MetricRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricRecord(r["run_id"], r["strategy"], r["task"], r["metric"],
                         float(r["value"]), int(r["seed"])) for r in rows]


def records_to_json(records: Iterable[MetricRecord]) -> list[dict]:
    return [asdict(r) for r in records]


def records_from_json(items: Iterable[dict]) -> list[MetricRecord]:
    return [MetricRecord(**{k: it[k] for k in RECORD_FIELDS}) for it in items]


def dump_json(obj, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
