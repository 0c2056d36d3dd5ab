"""Adversarial and noise perturbations, and task-identity probes on frozen backbones."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ndkernel import SgdState, Tape, Tensor, log_softmax, relu, sgd_step, kaiming_uniform, tsum

FGSM_TAUS = (0.0, 0.01, 0.02, 0.05, 0.1)
NOISE_LEVELS = (0.0, 0.1, 0.2, 0.4)


class RobustnessError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbSpec:
    kind: str = "fgsm"
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fgsm", "gaussian"):
            raise RobustnessError(f"unknown perturbation {self.kind!r}")
        if not self.magnitude >= 0:
            raise RobustnessError("perturbation magnitude must be >= 0")


def feature_std(windows: np.ndarray) -> np.ndarray:
    """Per-feature std over every row of a ``(n, T, d)`` batch (zeros replaced by 1)."""
    x = np.asarray(windows, dtype=np.float64)
    sd = x.reshape(-1, x.shape[-1]).std(axis=0)
    return np.where(sd > 0, sd, 1.0)


def input_gradient(model, task: str | None, windows: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """``d/dx sum (f(x) - y)^2``; ``model`` is a MultiTaskModel or a Tensor -> Tensor callable."""
    x = np.asarray(windows, dtype=np.float64)
    with Tape() as tape:
        xt = tape.watch(x, "x")
        if hasattr(model, "predict_groups"):
            pred = model.predict_groups(model.parameters(), xt, [(task, 0, len(x))])[0]
        elif hasattr(model, "forward_with"):
            pred = model.forward_with(task, model.parameters(task), xt)
        else:
            pred = model(xt)
        loss = tsum((pred - np.asarray(targets, dtype=np.float64)) ** 2)
        return tape.backward(loss)["x"]


def fgsm_perturb(model, task: str | None, windows, targets, tau: float,
                 sigma: np.ndarray | None = None) -> np.ndarray:
    """``x + tau * sigma * sign(grad_x J)`` over every step of every window.

    ``sigma`` expresses ``tau`` in per-feature std units; without it ``tau`` is
    in raw units.
    """
    if tau < 0:
        raise RobustnessError("tau must be >= 0")
    x = np.asarray(windows, dtype=np.float64)
    if tau == 0:
        return x.copy()
    scale = tau if sigma is None else tau * np.asarray(sigma)
    return x + scale * np.sign(input_gradient(model, task, x, targets))


def noise_perturb(windows, level: float, rng: np.random.Generator,
                  sigma: np.ndarray | None = None) -> np.ndarray:
    """Adds white noise with per-feature std ``level * sigma`` (sigma from the clean inputs)."""
    if level < 0:
        raise RobustnessError("noise level must be >= 0")
    x = np.asarray(windows, dtype=np.float64)
    if level == 0:
        return x.copy()
    sigma = feature_std(x) if sigma is None else np.asarray(sigma)
    return x + rng.normal(size=x.shape) * (level * sigma)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    kind: str = "linear"
    hidden: int = 32
    epochs: int = 50
    learning_rate: float = 1e-2
    batch_size: int = 100
    test_fraction: float = 0.3

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise RobustnessError(f"unknown probe {self.kind!r}")


def _probe_forward(p, x, kind):
    if kind == "linear":
        return x @ p["W"] + p["b"]
    return relu(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def train_probe(features: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeConfig,
                rng: np.random.Generator) -> dict:
    d = features.shape[1]
    if cfg.kind == "linear":
        p = {"W": np.zeros((d, n_classes)), "b": np.zeros(n_classes)}
    else:
        p = {"W1": kaiming_uniform(rng, (d, cfg.hidden), d), "b1": np.zeros(cfg.hidden),
             "W2": kaiming_uniform(rng, (cfg.hidden, n_classes), cfg.hidden),
             "b2": np.zeros(n_classes)}
    onehot = np.eye(n_classes)[labels]
    state = SgdState(cfg.learning_rate, 0.0)
    n = len(labels)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for a in range(0, n, cfg.batch_size):
            idx = perm[a:a + cfg.batch_size]
            with Tape() as tape:
                pv = {k: tape.watch(v, k) for k, v in p.items()}
                logits = _probe_forward(pv, features[idx], cfg.kind)
                loss = -tsum(log_softmax(logits, axis=1) * onehot[idx]) * (1.0 / len(idx))
                grads = tape.backward(loss)
            p = sgd_step(p, grads, state)
    return p


def probe_predict(p: dict, features: np.ndarray, kind: str) -> np.ndarray:
    return np.argmax(_probe_forward(p, Tensor(features), kind).data, axis=1)


def _fingerprint(model) -> str:
    h = hashlib.sha256()
    if hasattr(model, "columns"):
        arrays = [(f"{c.task}/{k}", v) for c in model.columns for k, v in c.backbone.items()]
    else:
        arrays = sorted(model.backbone.items())
    for k, v in arrays:
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def probe_train_eval(model, windows: np.ndarray, labels: Sequence[int], cfg: ProbeConfig = ProbeConfig(),
                     seed: int = 0, features: np.ndarray | None = None) -> float:
    """Held-out accuracy of a probe predicting ``labels`` from frozen backbone features."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise RobustnessError("probing needs at least two classes")
    before = _fingerprint(model) if model is not None else None
    if features is None:
        features = model.backbone_features(windows)
    features = np.asarray(features, dtype=np.float64)
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels])
    rng = np.random.default_rng([seed, 30])
    # stratified hold-out split
    test = np.zeros(len(y), dtype=bool)
    for c in range(len(classes)):
        idx = rng.permutation(np.flatnonzero(y == c))
        test[idx[:max(1, int(round(cfg.test_fraction * len(idx))))]] = True
    mu = features[~test].mean(axis=0)
    sd = features[~test].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    z = (features - mu) / sd
    p = train_probe(z[~test], y[~test], len(classes), cfg, rng)
    acc = float(np.mean(probe_predict(p, z[test], cfg.kind) == y[test]))
    if model is not None and _fingerprint(model) != before:
        raise RobustnessError("probe training modified the backbone")
    return acc


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

CURVE_FIELDS = ("perturbation", "magnitude", "strategy", "seed", "mean_r2")


def write_curve_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([r["perturbation"], repr(float(r["magnitude"])), r["strategy"],
                        int(r["seed"]), repr(float(r["mean_r2"]))])
