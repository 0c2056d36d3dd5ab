"""Synthetic gait-like task generation, CSV ingestion, shifts and windowing."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SHIFT_KINDS = ("phase_offset", "amplitude_scale", "additive_bias")


class DataError(ValueError):
    pass


class CsvSchemaError(DataError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class TaskSpec:
    """One synthetic locomotion task.

    ``speed`` is in gait cycles per ``steps_per_cycle`` samples; ``incline``
    shapes the target waveform; ``phase_lag`` shifts the target relative to
    the sensor phase and stands in for a distinct waveform per mode.
    """

    task_id: str
    speed: float = 1.0
    incline: float = 0.0
    dim: int = 6
    samples: int = 6250
    noise: float = 0.05
    seed: int = 0
    phase_lag: float = 0.0
    window_length: int = 10
    trial_length: int = 500
    steps_per_cycle: float = 40.0
    test_samples: int = 1000
    train_fraction: float = 0.8

    def validate(self):
        if not self.speed > 0:
            raise DataError(f"{self.task_id}: speed must be > 0")
        if self.dim < 2:
            raise DataError(f"{self.task_id}: dim must be >= 2")
        if self.samples < 3 * self.window_length:
            raise DataError(f"{self.task_id}: need samples >= 3*T")
        if not 0 < self.train_fraction < 1:
            raise DataError(f"{self.task_id}: train_fraction must be in (0, 1)")
        if self.noise < 0:
            raise DataError(f"{self.task_id}: noise must be >= 0")


@dataclass
class TaskSeries:
    """Aligned sensor states ``X`` (N x d) and targets ``y`` (N,) for one task.

    Steps ``[0, n_train)`` are training data and ``[n_train, N)`` validation.
    ``test`` holds an independently drawn series of the same task.
    """

    task_id: str
    X: np.ndarray
    y: np.ndarray
    trial_ids: np.ndarray
    n_train: int
    mixing: np.ndarray | None = None
    test: "TaskSeries | None" = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.trial_ids = np.asarray(self.trial_ids)
        if self.X.ndim != 2 or len(self.X) != len(self.y) or len(self.y) != len(self.trial_ids):
            raise DataError(f"{self.task_id}: X, y and trial_ids must have equal length")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise DataError(f"{self.task_id}: non-finite values in series")
        if not 0 < self.n_train <= len(self.y):
            raise DataError(f"{self.task_id}: invalid n_train {self.n_train}")

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def _slice(self, a: int, b: int) -> "TaskSeries":
        return TaskSeries(self.task_id, self.X[a:b], self.y[a:b], self.trial_ids[a:b],
                          n_train=b - a, mixing=self.mixing, meta={**self.meta, "offset": a})

    @property
    def train(self) -> "TaskSeries":
        return self._slice(0, self.n_train)

    @property
    def validation(self) -> "TaskSeries":
        if self.n_train >= len(self):
            raise DataError(f"{self.task_id}: no validation split")
        return self._slice(self.n_train, len(self))

    def trial_segments(self) -> Iterator[tuple[int, int]]:
        """Half-open index ranges of consecutive equal trial ids."""
        ids = self.trial_ids
        if len(ids) == 0:
            return
        cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        bounds = np.concatenate([[0], cuts, [len(ids)]])
        for a, b in zip(bounds[:-1], bounds[1:]):
            yield int(a), int(b)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def phase_features(theta: np.ndarray, dim: int) -> np.ndarray:
    """``[sin t, cos t, sin 2t, cos 2t, ...]`` truncated to ``dim`` columns."""
    cols = []
    h = 1
    while len(cols) < dim:
        cols.append(np.sin(h * theta))
        if len(cols) < dim:
            cols.append(np.cos(h * theta))
        h += 1
    return np.stack(cols, axis=-1)


def target_profile(theta: np.ndarray, incline: float, phase_lag: float = 0.0) -> np.ndarray:
    th = theta + phase_lag
    return (1 + 0.3 * incline) * np.sin(th) + 0.2 * incline * np.sin(2 * th)


def _mixing_matrix(dim: int, seed: int, max_cond: float = 1e3) -> np.ndarray:
    attempt = seed
    while True:
        rng = np.random.default_rng([attempt, 7919])
        M = rng.normal(size=(dim, dim)) / np.sqrt(dim) + np.eye(dim)
        if np.linalg.matrix_rank(M) == dim and np.linalg.cond(M) < max_cond:
            return M
        log.info("mixing matrix for seed %d rank-deficient/ill-conditioned; resampling", attempt)
        attempt += 1


def _simulate(spec: TaskSpec, M: np.ndarray, n: int, rng: np.random.Generator):
    trials = -(-n // spec.trial_length)
    X, y, tid, th = [], [], [], []
    step = 2 * np.pi * spec.speed / spec.steps_per_cycle
    for i in range(trials):
        m = min(spec.trial_length, n - i * spec.trial_length)
        theta = rng.uniform(0, 2 * np.pi) + step * np.arange(m)
        X.append(phase_features(theta, spec.dim) @ M.T)
        y.append(target_profile(theta, spec.incline, spec.phase_lag))
        tid.append(np.full(m, i))
        th.append(theta)
    X = np.concatenate(X)
    if spec.noise > 0:
        X = X + rng.normal(0, spec.noise, size=X.shape)
    return X, np.concatenate(y), np.concatenate(tid), np.concatenate(th)


def generate_task(spec: TaskSpec) -> TaskSeries:
    """Deterministic series for ``spec`` plus an independent test series."""
    spec.validate()
    M = _mixing_matrix(spec.dim, spec.seed)
    X, y, tid, theta = _simulate(spec, M, spec.samples, np.random.default_rng([spec.seed, 1]))
    Xt, yt, tidt, thetat = _simulate(spec, M, spec.test_samples, np.random.default_rng([spec.seed, 2]))
    n_train = int(round(spec.train_fraction * spec.samples))
    test = TaskSeries(spec.task_id, Xt, yt, tidt, n_train=len(yt), mixing=M,
                      meta={"theta": thetat, "split": "test"})
    return TaskSeries(spec.task_id, X, y, tid, n_train=n_train, mixing=M, test=test,
                      meta={"theta": theta, "spec": spec})


ENABL3S_LIKE = (
    # (task id, speed, incline, phase lag)
    ("LW", 1.0, 0.0, 0.0),
    ("RA", 0.9, 1.0, 0.4),
    ("RD", 1.1, -1.0, -0.4),
    ("SA", 0.8, 1.5, 0.9),
    ("SD", 1.2, -1.5, -0.9),
)


def task_suite(name: str, seed: int = 0, **overrides) -> list[TaskSpec]:
    """``embry_like`` (3 speeds x 3 inclines) or ``enabl3s_like`` (5 modes)."""
    if name == "embry_like":
        rows = [(f"s{s}_a{a:+d}", s, float(a), 0.0)
                for s in (0.8, 1.0, 1.2) for a in (-1, 0, 1)]
    elif name == "enabl3s_like":
        rows = list(ENABL3S_LIKE)
    else:
        raise DataError(f"unknown suite {name!r}")
    return [TaskSpec(task_id=tid, speed=s, incline=a, phase_lag=lag,
                     seed=seed * 1000 + i, **overrides)
            for i, (tid, s, a, lag) in enumerate(rows)]


# ---------------------------------------------------------------------------
# shifts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "additive_bias"
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise DataError(f"unknown shift kind {self.kind!r}")
        if not np.isfinite(self.magnitude):
            raise DataError("shift magnitude must be finite")


def _lag_within_trials(series: TaskSeries, lag: float) -> np.ndarray:
    X = series.X.copy()
    for a, b in series.trial_segments():
        idx = np.arange(b - a, dtype=np.float64)
        src = np.clip(idx + lag, 0, b - a - 1)
        for j in range(X.shape[1]):
            X[a:b, j] = np.interp(src, idx, series.X[a:b, j])
    return X


def apply_shift(series: TaskSeries, shift: ShiftSpec) -> TaskSeries:
    """Controlled covariate shift of a series (its ``test`` member is dropped).

    * ``additive_bias``: every latent coordinate moves by ``magnitude`` and is
      mixed into sensor space, so feature means move by ``M @ (b * 1)``.
    * ``amplitude_scale``: gait amplitude grows by ``1 + magnitude``; X and y scale.
    * ``phase_offset``: sensors lead the target by ``magnitude`` samples
      (linear interpolation inside each trial).
    """
    if shift.magnitude == 0:
        return replace(series, test=None)
    X, y = series.X, series.y
    if shift.kind == "additive_bias":
        b = np.full(series.dim, shift.magnitude)
        offset = series.mixing @ b if series.mixing is not None else b
        X = X + offset
    elif shift.kind == "amplitude_scale":
        X = X * (1 + shift.magnitude)
        y = y * (1 + shift.magnitude)
    else:
        X = _lag_within_trials(series, shift.magnitude)
    return replace(series, X=X, y=y, test=None,
                   meta={**series.meta, "shift": (shift.kind, shift.magnitude)})


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass
class Window:
    inputs: np.ndarray
    target: float
    task: str
    step: int


@dataclass
class WindowSet:
    """Batch of windows: ``inputs`` (n, T, d), ``targets`` (n,), end ``steps`` (n,)."""

    inputs: np.ndarray
    targets: np.ndarray
    task: str
    steps: np.ndarray

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Window(self.inputs[i], float(self.targets[i]), self.task, int(self.steps[i]))
        return WindowSet(self.inputs[i], self.targets[i], self.task, self.steps[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def make_windows(series: TaskSeries, T: int) -> WindowSet:
    """All length-``T`` windows that stay inside one trial; window ``i`` ends at ``steps[i]``."""
    if T < 1:
        raise DataError("window length must be >= 1")
    ins, tgt, steps = [], [], []
    for a, b in series.trial_segments():
        n = b - a - T + 1
        if n <= 0:
            continue
        view = np.lib.stride_tricks.sliding_window_view(series.X[a:b], T, axis=0)
        ins.append(np.ascontiguousarray(view.transpose(0, 2, 1)))
        end = np.arange(a + T - 1, b)
        tgt.append(series.y[end])
        steps.append(end)
    d = series.dim
    if not ins:
        warnings.warn(f"{series.task_id}: window length {T} exceeds every trial; no windows",
                      RuntimeWarning, stacklevel=2)
        return WindowSet(np.zeros((0, T, d)), np.zeros(0), series.task_id, np.zeros(0, dtype=int))
    return WindowSet(np.concatenate(ins), np.concatenate(tgt), series.task_id,
                     np.concatenate(steps))


# ---------------------------------------------------------------------------
# csv
# ---------------------------------------------------------------------------

def write_csv(series: TaskSeries, path: str | Path) -> None:
    """Header ``feature_0..feature_{d-1},target,trial_id``; floats written with ``repr``."""
    d = series.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{i}" for i in range(d)] + ["target", "trial_id"])
        for x, yv, t in zip(series.X, series.y, series.trial_ids):
            w.writerow([repr(float(v)) for v in x] + [repr(float(yv)), str(int(t))])


def load_csv(path: str | Path, schema: dict | None = None, task_id: str | None = None,
             train_fraction: float = 0.8, test_path: str | Path | None = None) -> TaskSeries:
    """Parse a task file.

    ``schema`` maps roles to column names: ``{"features": [...], "target": ...,
    "trial_id": ...}``; by default ``feature_*`` columns, ``target`` and
    ``trial_id`` are used.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvSchemaError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    if schema is None:
        feats = [h for h in header if h.startswith("feature_")]
        schema = {"features": feats, "target": "target", "trial_id": "trial_id"}
    if not schema.get("features"):
        raise CsvSchemaError("no feature columns", 1)
    cols = {}
    for role in ("target", "trial_id"):
        name = schema[role]
        if name not in header:
            raise CsvSchemaError(f"missing column {name!r} (role {role})", 1)
        cols[role] = header.index(name)
    fidx = []
    for name in schema["features"]:
        if name not in header:
            raise CsvSchemaError(f"missing column {name!r} (role feature)", 1)
        fidx.append(header.index(name))
    X, y, tid = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvSchemaError(f"expected {len(header)} cells, found {len(row)}", lineno)
        try:
            X.append([float(row[i]) for i in fidx])
            y.append(float(row[cols["target"]]))
        except ValueError as e:
            raise CsvSchemaError(f"non-numeric cell ({e})", lineno) from None
        tid.append(row[cols["trial_id"]].strip())
    if not y:
        raise CsvSchemaError("no data rows", 2)
    tid_arr = np.asarray(tid)
    codes = np.concatenate([[0], np.cumsum(tid_arr[1:] != tid_arr[:-1])])
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise CsvSchemaError("non-finite value in file")
    task_id = task_id or path.stem
    n_train = max(1, min(len(y), int(round(train_fraction * len(y)))))
    test = None
    if test_path is not None:
        test = load_csv(test_path, schema, task_id, train_fraction=1.0 - 1e-12)
        test.n_train = len(test)
    return TaskSeries(task_id, X, y, codes, n_train=n_train, test=test,
                      meta={"source": str(path)})


def split_indices(series: TaskSeries) -> tuple[np.ndarray, np.ndarray]:
    n = len(series)
    return np.arange(series.n_train), np.arange(series.n_train, n)


def standardize_stats(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([a.reshape(-1, a.shape[-1]) for a in arrays])
    sd = X.std(axis=0)
    return X.mean(axis=0), np.where(sd > 0, sd, 1.0)
