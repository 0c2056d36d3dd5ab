"""Task-incremental training, prospective-model training, rehearsal generation and joint training."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..data import TaskSeries, WindowSet, make_windows
from ..metrics import ErrorMatrix, nrmse, r_squared
from ..models import MultiTaskModel, ProspectiveModel
from ..ndkernel import KernelError, SgdState, Tape, Tensor, sgd_step, tsum
from .buffer import RehearsalBuffer, TaskEntries, balanced_quota
from .strategies import (EwcState, ProgressiveNet, SiState, StrategyConfig, empirical_fisher,
                         noise_augment, strategy_ewc, strategy_gem, strategy_si)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted (empty split, non-finite loss, missing models)."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 100
    patience: int = 10
    max_epochs: int = 200
    capacity: int = 3000
    imagination_horizon: int = 1
    seed: int = 0
    g_hidden: int = 64
    g_max_epochs: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.imagination_horizon < 1:
            raise ValueError("imagination_horizon must be >= 1")


@dataclass
class TaskData:
    """Windows of one task: train/validation from the series, test from its held-out series."""

    task: str
    series: TaskSeries
    train: WindowSet
    val: WindowSet
    test: WindowSet

    @property
    def window_length(self) -> int:
        return self.train.inputs.shape[1]


def prepare_task(series: TaskSeries, T: int, test: TaskSeries | None = None) -> TaskData:
    train = make_windows(series.train, T)
    val = make_windows(series.validation, T)
    val.steps = val.steps + series.n_train
    test_series = test if test is not None else series.test
    if test_series is None:
        raise TrainingError(f"{series.task_id}: no test series")
    return TaskData(series.task_id, series, train, val, make_windows(test_series, T))


def prepare_tasks(series_list: Sequence[TaskSeries], T: int) -> list[TaskData]:
    return [prepare_task(s, T) for s in series_list]


# ---------------------------------------------------------------------------
# generic optimisation loop
# ---------------------------------------------------------------------------

@dataclass
class FitHistory:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    patience_counter: int = 0
    epochs: int = 0

    def summary(self) -> dict:
        return {"best_val": self.best_val, "best_epoch": self.best_epoch,
                "patience_counter": self.patience_counter, "epochs": self.epochs}


def fit(params: dict[str, np.ndarray], trainable: Sequence[str],
        loss_fn: Callable[[Mapping, object], Tensor], val_fn: Callable[[Mapping], float],
        next_batch: Callable[[], object], steps_per_epoch: int, cfg: TrainConfig,
        grad_hook: Callable | None = None, step_hook: Callable | None = None,
        max_epochs: int | None = None, label: str = "fit") -> tuple[dict, FitHistory]:
    """Momentum SGD with early stopping on ``val_fn``; returns the best parameters seen."""
    params = dict(params)
    trainable = list(trainable)
    state = SgdState(cfg.learning_rate, cfg.momentum)
    hist = FitHistory()
    best = {k: params[k] for k in trainable}
    max_epochs = max_epochs or cfg.max_epochs
    for epoch in range(max_epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            batch = next_batch()
            try:
                with Tape() as tape:
                    pv = dict(params)
                    for k in trainable:
                        pv[k] = tape.watch(params[k], k)
                    loss = loss_fn(pv, batch)
                    value = float(loss.data)
                    grads = tape.backward(loss)
            except KernelError as e:
                raise TrainingError(f"{label}: epoch {epoch}: {e}") from e
            if not math.isfinite(value):
                raise TrainingError(f"{label}: non-finite loss at epoch {epoch}")
            total += value
            if grad_hook is not None:
                grads = grad_hook(grads, params)
            new = sgd_step({k: params[k] for k in trainable}, grads, state)
            if step_hook is not None:
                step_hook(grads, params, new)
            params.update(new)
        val = float(val_fn(params))
        if not math.isfinite(val):
            raise TrainingError(f"{label}: non-finite validation loss at epoch {epoch}")
        hist.train_losses.append(total / steps_per_epoch)
        hist.val_losses.append(val)
        hist.epochs = epoch + 1
        if val < hist.best_val:
            hist.best_val, hist.best_epoch, hist.patience_counter = val, epoch, 0
            best = {k: params[k] for k in trainable}
        else:
            hist.patience_counter += 1
            if hist.patience_counter >= cfg.patience:
                break
    params.update(best)
    return params, hist


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Source:
    """A pool of windows for one task; ``provenance`` is None for current-task training data."""

    task: str
    inputs: np.ndarray
    targets: np.ndarray
    provenance: np.ndarray | None = None


class BalancedSampler:
    """Minibatches split evenly across sources; the first source is walked by a running permutation."""

    def __init__(self, sources: Sequence[Source], batch_size: int, rng: np.random.Generator):
        if not sources or len(sources[0].targets) == 0:
            raise TrainingError("empty training split")
        self.sources = [s for s in sources if len(s.targets)]
        self.rng = rng
        k = len(self.sources)
        base, extra = divmod(batch_size, k)
        self.sizes = [base + (1 if i < extra else 0) for i in range(k)]
        self.perm = rng.permutation(len(self.sources[0].targets))
        self.cursor = 0

    def _take_first(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self.cursor >= len(self.perm):
                self.perm = self.rng.permutation(len(self.perm))
                self.cursor = 0
            chunk = self.perm[self.cursor:self.cursor + n]
            self.cursor += len(chunk)
            n -= len(chunk)
            out.append(chunk)
        return np.concatenate(out)

    def __call__(self):
        xs, ys, groups, prov = [], [], [], []
        start = 0
        for i, (src, n) in enumerate(zip(self.sources, self.sizes)):
            if n == 0:
                continue
            if i == 0:
                idx = self._take_first(n)
            else:
                idx = self.rng.choice(len(src.targets), size=n, replace=n > len(src.targets))
            xs.append(src.inputs[idx])
            ys.append(src.targets[idx])
            groups.append((src.task, start, start + n))
            prov.append(("train", n) if src.provenance is None
                        else tuple(Counter(src.provenance[idx]).items()))
            start += n
        return np.concatenate(xs), np.concatenate(ys), _merge_groups(groups), prov


def _merge_groups(groups):
    # consecutive sources of the same task share one head call
    out = []
    for t, a, b in groups:
        if out and out[-1][0] == t and out[-1][2] == a:
            out[-1] = (t, out[-1][1], b)
        else:
            out.append((t, a, b))
    return out


def sse(pred: Tensor, target: np.ndarray) -> Tensor:
    return tsum((pred - target) ** 2)


def _model_loss(model: MultiTaskModel):
    def loss_fn(pv, batch):
        x, y, groups, _ = batch
        preds = model.predict_groups(pv, x, groups)
        total = None
        for p, (_, a, b) in zip(preds, groups):
            term = sse(p, y[a:b])
            total = term if total is None else total + term
        return total
    return loss_fn


def _val_mse(model: MultiTaskModel, datasets: Sequence[tuple[str, WindowSet]]):
    def val_fn(params):
        errs = []
        for task, ws in datasets:
            pred = model.predict_groups(params, ws.inputs, [(task, 0, len(ws))])[0].data
            errs.append(np.mean((pred - ws.targets) ** 2))
        return float(np.mean(errs))
    return val_fn


# ---------------------------------------------------------------------------
# prospective model
# ---------------------------------------------------------------------------

def transition_pairs(series: TaskSeries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(x_k, y_k, x_{k+1})`` for consecutive steps inside one trial."""
    same = series.trial_ids[1:] == series.trial_ids[:-1]
    return series.X[:-1][same], series.y[:-1][same], series.X[1:][same]


def train_prospective(g: ProspectiveModel, series: TaskSeries, cfg: TrainConfig = TrainConfig(),
                      history: dict | None = None) -> ProspectiveModel:
    """Fit ``g(x_k, y_k) ~ x_{k+1}`` on the training split; early stopping on validation pairs."""
    xk, yk, xn = transition_pairs(series.train)
    if len(xk) == 0:
        raise TrainingError(f"{series.task_id}: no consecutive same-trial steps for the prospective model")
    try:
        vk, vy, vn = transition_pairs(series.validation)
    except Exception:
        vk = vy = vn = np.zeros((0,))
    if len(vk) == 0:
        vk, vy, vn = xk, yk, xn
    rng = np.random.default_rng([cfg.seed, 20])
    order = {"perm": rng.permutation(len(xk)), "cursor": 0}

    def next_batch():
        if order["cursor"] >= len(order["perm"]):
            order["perm"], order["cursor"] = rng.permutation(len(xk)), 0
        idx = order["perm"][order["cursor"]:order["cursor"] + cfg.batch_size]
        order["cursor"] += len(idx)
        return idx

    def loss_fn(pv, idx):
        return sse(g.forward_with(pv, xk[idx], yk[idx]), xn[idx])

    def val_fn(p):
        return float(np.mean((g.forward_with(p, vk, vy).data - vn) ** 2))

    params, hist = fit(g.parameters(), list(g.params), loss_fn, val_fn, next_batch,
                       math.ceil(len(xk) / cfg.batch_size), cfg,
                       max_epochs=cfg.g_max_epochs or cfg.max_epochs,
                       label=f"prospective[{series.task_id}]")
    g.load_parameters(params)
    if history is not None:
        history[series.task_id] = hist.summary()
    return g


def train_prospective_models(tasks: Sequence[TaskData], cfg: TrainConfig = TrainConfig()) -> dict:
    """One ``g_t`` per task; depends only on the data and the seed."""
    out = {}
    for i, td in enumerate(tasks):
        g = ProspectiveModel(td.series.dim, cfg.g_hidden, seed=cfg.seed * 1000 + i)
        out[td.task] = train_prospective(g, td.series, cfg)
    return out


# ---------------------------------------------------------------------------
# rehearsal generation
# ---------------------------------------------------------------------------

def eligible_steps(td: TaskData, horizon: int = 1) -> np.ndarray:
    """Validation steps k whose windows ending at k-horizon..k all exist inside one trial."""
    val = td.val
    known = set(val.steps.tolist())
    tid = td.series.trial_ids
    keep = [k for k in val.steps.tolist()
            if (k - horizon) in known and tid[k - horizon] == tid[k]]
    return np.asarray(keep, dtype=np.int64)


def selection_order(td: TaskData, seed: int, task_index: int, horizon: int = 1) -> np.ndarray:
    """Fixed random order of eligible steps; prefixes nest as the quota shrinks."""
    steps = eligible_steps(td, horizon)
    rng = np.random.default_rng([seed, 11, task_index])
    return steps[rng.permutation(len(steps))]


def _val_index(td: TaskData) -> dict[int, int]:
    return {int(k): i for i, k in enumerate(td.val.steps)}


def original_entries(td: TaskData, steps: np.ndarray) -> TaskEntries:
    pos = _val_index(td)
    idx = np.array([pos[int(k)] for k in steps], dtype=np.int64)
    return TaskEntries(td.val.inputs[idx], td.val.targets[idx], ["original"] * len(idx), steps)


def build_prospective_rehearsal(model, g: ProspectiveModel, td: TaskData, n_pairs: int,
                                order: np.ndarray | None = None, horizon: int = 1) -> TaskEntries:
    """Interleaved (original, imagined) entries for ``n_pairs`` validation steps.

    The imagined window ends at the same step k as the original; its last
    ``horizon`` rows are rolled out with ``x_{j+1} = g(x_j, f(window ending j))``
    from the window ending at ``k - horizon``. Targets are the true ``y_k``.
    """
    if order is None:
        order = eligible_steps(td, horizon)
    steps = np.asarray(order[:n_pairs], dtype=np.int64)
    if len(steps) < n_pairs:
        log.info("%s: only %d eligible validation steps for %d pairs", td.task, len(steps), n_pairs)
    pos = _val_index(td)
    idx = np.array([pos[int(k)] for k in steps], dtype=np.int64)
    start = np.array([pos[int(k) - horizon] for k in steps], dtype=np.int64)
    W = td.val.inputs[start].copy() if len(steps) else np.zeros((0,) + td.val.inputs.shape[1:])
    for _ in range(horizon):
        if not len(W):
            break
        y_hat = model.predict(td.task, W)
        x_next = g.prospect(W[:, -1], y_hat)
        W = np.concatenate([W[:, 1:], x_next[:, None, :]], axis=1)
    n = len(steps)
    inputs = np.empty((2 * n,) + td.val.inputs.shape[1:])
    inputs[0::2] = td.val.inputs[idx]
    inputs[1::2] = W
    prov = np.empty(2 * n, dtype=object)
    prov[0::2], prov[1::2] = "original", "prospective"
    return TaskEntries(inputs, np.repeat(td.val.targets[idx], 2), prov, np.repeat(steps, 2))


def rehearsal_entries(kind: str, model, td: TaskData, quota: int, order: np.ndarray,
                      g: ProspectiveModel | None, cfg: TrainConfig, strategy: StrategyConfig,
                      rng: np.random.Generator) -> TaskEntries:
    """``quota`` entries of one task for ``er``, ``prospective`` or ``noise_aug``."""
    if kind == "er":
        return original_entries(td, order[:quota])
    if kind == "prospective":
        if g is None:
            raise TrainingError(f"prospective rehearsal needs a trained g for task {td.task!r}")
        return build_prospective_rehearsal(model, g, td, quota // 2, order, cfg.imagination_horizon)
    if kind == "noise_aug":
        base = original_entries(td, order[:quota // 2])
        return noise_augment(base, strategy.noise_level, rng)
    raise TrainingError(f"{kind!r} does not use a rehearsal buffer")


def update_buffer(buffer: RehearsalBuffer, model, tasks: Sequence[TaskData], kind: str,
                  g_models: Mapping | None, cfg: TrainConfig, strategy: StrategyConfig,
                  update_index: int = 0) -> RehearsalBuffer:
    """Regenerate the entries of every task seen so far with the current model."""
    orders = [selection_order(td, cfg.seed, i, cfg.imagination_horizon) for i, td in enumerate(tasks)]
    avail = min(len(o) for o in orders)
    q = balanced_quota(buffer.capacity, len(tasks), available=avail)
    new = {}
    for i, (td, order) in enumerate(zip(tasks, orders)):
        rng = np.random.default_rng([cfg.seed, 12, i, update_index])
        g = g_models.get(td.task) if g_models else None
        new[td.task] = rehearsal_entries(kind, model, td, q, order, g, cfg, strategy, rng)
    buffer.replace_all(new)
    return buffer


# ---------------------------------------------------------------------------
# evaluation and logs
# ---------------------------------------------------------------------------

def evaluate(model, td: TaskData, windows: WindowSet | None = None) -> tuple[float, float]:
    ws = windows if windows is not None else td.test
    pred = model.predict(td.task, ws.inputs)
    return nrmse(ws.targets, pred), r_squared(ws.targets, pred)


@dataclass
class TrainLog:
    strategy: str
    tasks: list = field(default_factory=list)
    epoch_losses: dict = field(default_factory=dict)
    val_losses: dict = field(default_factory=dict)
    early_stopping: dict = field(default_factory=dict)
    eps: ErrorMatrix | None = None
    r2: dict = field(default_factory=dict)
    buffer_counts: dict = field(default_factory=dict)
    provenance_seen: dict = field(default_factory=dict)
    g_history: dict = field(default_factory=dict)

    def final_r2(self) -> dict[str, float]:
        n = len(self.tasks)
        return {t: self.r2[(n, j + 1)] for j, t in enumerate(self.tasks)}


# ---------------------------------------------------------------------------
# task-incremental training
# ---------------------------------------------------------------------------

def _per_sample_grads(model: MultiTaskModel, names: Sequence[str], td: TaskData, n: int, seed: int):
    rng = np.random.default_rng([seed, 13])
    idx = rng.choice(len(td.train), size=min(n, len(td.train)), replace=False)
    params = model.parameters()
    for i in idx:
        with Tape() as tape:
            pv = dict(params)
            for k in names:
                pv[k] = tape.watch(params[k], k)
            pred = model.predict_groups(pv, td.train.inputs[i:i + 1], [(td.task, 0, 1)])[0]
            grads = tape.backward(sse(pred, td.train.targets[i:i + 1]))
        yield grads


def _flat(grads: Mapping[str, np.ndarray], names: Sequence[str], shapes: Mapping) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) if k in grads else np.zeros(int(np.prod(shapes[k])))
                           for k in names])


def _gem_hook(model: MultiTaskModel, names: Sequence[str], memories: Mapping[str, tuple]):
    def hook(grads, params):
        shapes = {k: params[k].shape for k in names}
        mem = []
        for task, (x, y) in memories.items():
            with Tape() as tape:
                pv = dict(params)
                for k in names:
                    pv[k] = tape.watch(params[k], k)
                pred = model.predict_groups(pv, x, [(task, 0, len(y))])[0]
                mg = tape.backward(sse(pred, y))
            mem.append(_flat(mg, names, shapes))
        g = _flat(grads, names, shapes)
        gp = strategy_gem(g, np.array(mem))
        out, a = {}, 0
        for k in names:
            n = params[k].size
            out[k] = gp[a:a + n].reshape(params[k].shape)
            a += n
        return out
    return hook


def _train_pnn(net: ProgressiveNet, td: TaskData, task_index: int, cfg: TrainConfig, tlog: TrainLog):
    net.register_task(td.task)
    col = net.column(td.task)
    prior_train = net.prior_features(td.task, td.train.inputs)
    prior_val = net.prior_features(td.task, td.val.inputs)
    rng = np.random.default_rng([cfg.seed, 10, task_index])
    perm = {"p": rng.permutation(len(td.train)), "c": 0}

    def next_batch():
        if perm["c"] >= len(perm["p"]):
            perm["p"], perm["c"] = rng.permutation(len(td.train)), 0
        idx = perm["p"][perm["c"]:perm["c"] + cfg.batch_size]
        perm["c"] += len(idx)
        return idx

    def loss_fn(pv, idx):
        prior = {t: f[idx] for t, f in prior_train.items()}
        return sse(net.forward_with(td.task, pv, td.train.inputs[idx], prior), td.train.targets[idx])

    def val_fn(p):
        pred = net.forward_with(td.task, p, td.val.inputs, prior_val).data
        return float(np.mean((pred - td.val.targets) ** 2))

    params = net.parameters(td.task)
    params, hist = fit(params, list(params), loss_fn, val_fn, next_batch,
                       math.ceil(len(td.train) / cfg.batch_size), cfg, label=f"pnn[{td.task}]")
    net.load_parameters(td.task, params)
    assert col is net.column(td.task)
    return hist


def train_task_incremental(model, g_models: Mapping | None, buffer: RehearsalBuffer | None,
                           task_data: Sequence[TaskData], strategy: StrategyConfig | str,
                           cfg: TrainConfig = TrainConfig()):
    """Train on ``task_data`` in order; returns ``(model, buffer, TrainLog)``.

    ``model`` is a :class:`MultiTaskModel`; for the ``pnn`` strategy it only
    supplies the backbone config and a :class:`ProgressiveNet` is returned.
    """
    if isinstance(strategy, str):
        strategy = StrategyConfig(strategy)
    kind = strategy.kind
    if buffer is None:
        buffer = RehearsalBuffer(cfg.capacity)
    if kind == "prospective" and g_models is None:
        g_models = train_prospective_models(task_data, cfg)
    tlog = TrainLog(kind, [td.task for td in task_data])
    tlog.eps = ErrorMatrix(list(tlog.tasks))
    if kind == "pnn":
        model = ProgressiveNet(model.config, model.head_hidden, model.seed)
    ewc, si = EwcState(), SiState()
    memories: dict[str, tuple] = {}
    lam = strategy.lam

    for i, td in enumerate(task_data, start=1):
        if len(td.train) == 0:
            raise TrainingError(f"{td.task}: empty training split")
        if kind == "pnn":
            hist = _train_pnn(model, td, i, cfg, tlog)
        else:
            model.register_task(td.task)
            buffered = [t for t in buffer.task_ids() if t != td.task] if strategy.uses_buffer else []
            head_keys = {model.head_key(td.task)} | {model.head_key(t) for t in buffered}
            if kind == "gem":
                head_keys |= {model.head_key(t) for t in memories}
            trainable = model.backbone_param_names() + [
                f"head/{h}/{k}" for h in sorted(head_keys) for k in model.heads[h]]
            sources = [Source(td.task, td.train.inputs, td.train.targets)]
            for t in buffered:
                e = buffer.entries(t)
                sources.append(Source(t, e.inputs, e.targets, e.provenance))
            sampler = BalancedSampler(sources, cfg.batch_size, np.random.default_rng([cfg.seed, 10, i]))
            seen: Counter = Counter()
            base_loss = _model_loss(model)

            def loss_fn(pv, batch, base_loss=base_loss, seen=seen):
                for item in batch[3]:
                    if item and item[0] == "train":
                        seen["train"] += item[1]
                    else:
                        seen.update(dict(item))
                loss = base_loss(pv, batch)
                if kind == "ewc":
                    loss = strategy_ewc(loss, pv, ewc, lam)
                elif kind == "si":
                    loss = strategy_si(loss, pv, si, lam)
                return loss

            grad_hook = step_hook = None
            if kind == "gem" and memories:
                grad_hook = _gem_hook(model, trainable, memories)
            if kind == "si":
                si.begin_task(model.parameters())
                step_hook = si.accumulate
            params, hist = fit(model.parameters(), trainable, loss_fn,
                               _val_mse(model, [(td.task, td.val)]), sampler,
                               math.ceil(len(td.train) / cfg.batch_size), cfg,
                               grad_hook=grad_hook, step_hook=step_hook,
                               label=f"{kind}[{td.task}]")
            model.load_parameters(params)
            tlog.provenance_seen[td.task] = dict(seen)

            if kind == "ewc":
                names = model.backbone_param_names() + model.head_param_names(td.task)
                fisher = empirical_fisher(_per_sample_grads(model, names, td,
                                                            strategy.fisher_samples, cfg.seed * 100 + i))
                params_now = model.parameters()
                ewc.consolidate({k: params_now[k] for k in names}, fisher)
            elif kind == "si":
                si.consolidate(model.parameters(), strategy.si_xi)
            elif kind == "gem":
                rng = np.random.default_rng([cfg.seed, 14, i])
                idx = rng.choice(len(td.train), size=min(strategy.gem_memory, len(td.train)),
                                 replace=False)
                memories[td.task] = (td.train.inputs[idx], td.train.targets[idx])
            elif strategy.uses_buffer:
                update_buffer(buffer, model, task_data[:i], kind, g_models, cfg, strategy, i)
                tlog.buffer_counts[i] = buffer.counts()

        tlog.epoch_losses[td.task] = hist.train_losses
        tlog.val_losses[td.task] = hist.val_losses
        tlog.early_stopping[td.task] = hist.summary()
        for j, tj in enumerate(task_data[:i], start=1):
            e, r2 = evaluate(model, tj)
            tlog.eps.set(i, j, e)
            tlog.r2[(i, j)] = r2
        log.info("%s: task %d/%d (%s) done after %d epochs", kind, i, len(task_data),
                 td.task, hist.epochs)
    return model, buffer, tlog


# ---------------------------------------------------------------------------
# joint training
# ---------------------------------------------------------------------------

JOINT_MODES = ("none", "conventional", "prospective")


@dataclass
class JointLog:
    mode: str
    phase_history: list = field(default_factory=list)
    rehearsal_budget: int = 0
    training_samples: int = 0
    r2: dict = field(default_factory=dict)
    nrmse: dict = field(default_factory=dict)


class _JointSampler:
    """Round-robin over tasks; each task contributes its train windows plus its rehearsal entries."""

    def __init__(self, pools: Sequence[Source], batch_size: int, rng):
        self.pools = pools
        self.rng = rng
        k = len(pools)
        base, extra = divmod(batch_size, k)
        self.sizes = [base + (1 if i < extra else 0) for i in range(k)]

    def __call__(self):
        xs, ys, groups = [], [], []
        a = 0
        for src, n in zip(self.pools, self.sizes):
            if n == 0:
                continue
            idx = self.rng.choice(len(src.targets), size=n, replace=n > len(src.targets))
            xs.append(src.inputs[idx])
            ys.append(src.targets[idx])
            groups.append((src.task, a, a + n))
            a += n
        return np.concatenate(xs), np.concatenate(ys), _merge_groups(groups), []


def train_joint(model: MultiTaskModel, task_data: Sequence[TaskData], mode: str = "none",
                g_models: Mapping | None = None, cfg: TrainConfig = TrainConfig()):
    """Multitask training on the union of all tasks' training windows.

    With ``conventional`` or ``prospective`` a second phase continues training
    on the training windows plus rehearsal entries built from every task's
    validation windows; both modes use the same rehearsal budget.
    """
    if mode not in JOINT_MODES:
        raise TrainingError(f"unknown joint mode {mode!r}")
    if mode == "prospective" and g_models is None:
        g_models = train_prospective_models(task_data, cfg)
    for td in task_data:
        if len(td.train) == 0:
            raise TrainingError(f"{td.task}: empty training split")
        model.register_task(td.task)
    jlog = JointLog(mode)
    names = list(model.parameters())
    val_fn = _val_mse(model, [(td.task, td.val) for td in task_data])
    n_train = sum(len(td.train) for td in task_data)
    steps = math.ceil(n_train / cfg.batch_size)

    def run(pools, phase):
        sampler = _JointSampler(pools, cfg.batch_size, np.random.default_rng([cfg.seed, 15, phase]))
        params, hist = fit(model.parameters(), names, _model_loss(model), val_fn, sampler, steps, cfg,
                           label=f"joint[{mode}:{phase}]")
        model.load_parameters(params)
        jlog.phase_history.append(hist.summary())

    run([Source(td.task, td.train.inputs, td.train.targets) for td in task_data], 1)
    jlog.training_samples = n_train
    if mode != "none":
        kind = "er" if mode == "conventional" else "prospective"
        buf = update_buffer(RehearsalBuffer(cfg.capacity), model, task_data, kind, g_models, cfg,
                            StrategyConfig(kind))
        jlog.rehearsal_budget = len(buf)
        pools = []
        for td in task_data:
            e = buf.entries(td.task)
            pools.append(Source(td.task, np.concatenate([td.train.inputs, e.inputs]),
                                np.concatenate([td.train.targets, e.targets])))
        run(pools, 2)
    for td in task_data:
        e, r2 = evaluate(model, td)
        jlog.nrmse[td.task], jlog.r2[td.task] = e, r2
    return model, jlog
