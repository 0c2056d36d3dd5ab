"""Regularisation, projection and architectural baselines, plus noise augmentation."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..models import (BackboneConfig, backbone_forward, backbone_out_dim, head_forward,
                      init_backbone, init_head, _as_batch)
from ..ndkernel import Tensor, kaiming_uniform, tsum
from .buffer import TaskEntries

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("none", "er", "prospective", "noise_aug", "ewc", "si", "gem", "pnn")
REHEARSAL_KINDS = ("er", "prospective", "noise_aug")
DEFAULT_STRENGTH = {"ewc": 100.0, "si": 1.0}


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "none"
    strength: float | None = None
    gem_memory: int = 256
    noise_level: float = 0.1
    fisher_samples: int = 1000
    si_xi: float = 0.1

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise StrategyError(f"unknown strategy {self.kind!r}")
        if self.strength is not None and self.strength < 0:
            raise StrategyError(f"strength must be >= 0, got {self.strength}")
        if self.noise_level < 0:
            raise StrategyError("noise level must be >= 0")
        if self.gem_memory < 1:
            raise StrategyError("gem memory must be >= 1")

    @property
    def lam(self) -> float:
        return DEFAULT_STRENGTH.get(self.kind, 0.0) if self.strength is None else self.strength

    @property
    def uses_buffer(self) -> bool:
        return self.kind in REHEARSAL_KINDS


def _quadratic(pv: Mapping, anchor: Mapping[str, np.ndarray], weight: Mapping[str, np.ndarray]):
    total = None
    for name, star in anchor.items():
        if name not in pv:
            continue
        w = weight[name]
        if not np.any(w):
            continue
        term = tsum(((pv[name] - star) ** 2) * w)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# EWC
# ---------------------------------------------------------------------------

@dataclass
class EwcState:
    """One (optimum, diagonal Fisher) pair per consolidated task."""

    anchors: list = field(default_factory=list)

    def consolidate(self, params: Mapping[str, np.ndarray], fisher: Mapping[str, np.ndarray]):
        self.anchors.append(({k: v.copy() for k, v in params.items()},
                             {k: np.asarray(fisher[k]) for k in params}))


def empirical_fisher(sample_grads) -> dict[str, np.ndarray]:
    """Mean of squared per-sample gradients; ``sample_grads`` yields dicts."""
    acc: dict[str, np.ndarray] = {}
    n = 0
    for g in sample_grads:
        for k, v in g.items():
            acc[k] = acc.get(k, 0.0) + v * v
        n += 1
    if n == 0:
        raise StrategyError("Fisher estimate needs at least one sample")
    return {k: v / n for k, v in acc.items()}


def ewc_penalty(pv: Mapping, state: EwcState, lam: float):
    """``lam/2 * sum_i F_i (theta_i - theta*_i)^2`` over consolidated tasks, or None."""
    if lam == 0:
        return None
    total = None
    for anchor, fisher in state.anchors:
        q = _quadratic(pv, anchor, fisher)
        if q is not None:
            total = q if total is None else total + q
    return None if total is None else total * (lam / 2.0)


def strategy_ewc(loss, pv: Mapping, state: EwcState, lam: float):
    if lam < 0:
        raise StrategyError("EWC strength must be >= 0")
    pen = ewc_penalty(pv, state, lam)
    return loss if pen is None else loss + pen


# ---------------------------------------------------------------------------
# SI
# ---------------------------------------------------------------------------

@dataclass
class SiState:
    omega: dict = field(default_factory=dict)  # running path integral for the current task
    importance: dict = field(default_factory=dict)  # accumulated Omega
    anchor: dict = field(default_factory=dict)  # theta* at the end of the previous task
    start: dict = field(default_factory=dict)  # theta at the start of the current task

    def begin_task(self, params: Mapping[str, np.ndarray]):
        self.start = {k: v.copy() for k, v in params.items()}
        self.omega = {k: np.zeros_like(v) for k, v in params.items()}

    def accumulate(self, grads: Mapping[str, np.ndarray], old: Mapping, new: Mapping):
        for k, g in grads.items():
            if k in self.omega:
                self.omega[k] -= g * (new[k] - old[k])

    def consolidate(self, params: Mapping[str, np.ndarray], xi: float = 0.1):
        for k, v in params.items():
            delta = v - self.start.get(k, v)
            add = self.omega.get(k, np.zeros_like(v)) / (delta ** 2 + xi)
            self.importance[k] = self.importance.get(k, 0.0) + add
            self.anchor[k] = v.copy()


def si_penalty(pv: Mapping, state: SiState, lam: float):
    if lam == 0 or not state.anchor:
        return None
    q = _quadratic(pv, state.anchor, state.importance)
    return None if q is None else q * lam


def strategy_si(loss, pv: Mapping, state: SiState, lam: float):
    if lam < 0:
        raise StrategyError("SI strength must be >= 0")
    pen = si_penalty(pv, state, lam)
    return loss if pen is None else loss + pen


# ---------------------------------------------------------------------------
# GEM
# ---------------------------------------------------------------------------

def _nnls_polish(A: np.ndarray, b: np.ndarray, v0: np.ndarray, tol: float = 1e-12,
                 max_iter: int | None = None) -> np.ndarray:
    """Active-set refinement of ``min ||A v - b||`` s.t. ``v >= 0`` from a warm start."""
    n = A.shape[1]
    passive = v0 > tol
    v = np.where(passive, v0, 0.0)
    for _ in range(max_iter or 3 * n + 10):
        # solve on the passive set, stepping back if a coordinate goes negative
        while True:
            z = np.zeros(n)
            if passive.any():
                z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if np.all(z[passive] > tol):
                v = z
                break
            neg = passive & (z <= tol)
            alpha = np.min(v[neg] / np.maximum(v[neg] - z[neg], 1e-300))
            v = v + alpha * (z - v)
            passive &= v > tol
            v[~passive] = 0.0
        w = A.T @ (b - A @ v)
        cand = (~passive) & (w > tol)
        if not cand.any():
            return v
        passive[np.argmax(np.where(cand, w, -np.inf))] = True
    return v


def strategy_gem(grad: np.ndarray, memory_grads: np.ndarray, max_iter: int = 500,
                 tol: float = 1e-8) -> np.ndarray:
    """Project ``grad`` so its inner product with every memory gradient is non-negative.

    Solves the dual ``min_v 1/2 v'GG'v + g'G'v, v >= 0`` with accelerated
    projected gradient, then polishes the active set; returns ``g + G'v``.
    """
    g = np.asarray(grad, dtype=np.float64).ravel()
    G = np.atleast_2d(np.asarray(memory_grads, dtype=np.float64))
    if G.size == 0:
        return g.copy()
    if G.shape[1] != g.size:
        raise StrategyError(f"memory gradient length {G.shape[1]} != gradient length {g.size}")
    norms = np.linalg.norm(G, axis=1)
    if np.any(norms == 0):
        log.info("dropping %d all-zero memory gradient(s) in GEM", int(np.sum(norms == 0)))
        G = G[norms > 0]
        if len(G) == 0:
            return g.copy()
    if np.all(G @ g >= 0):
        return g.copy()
    P = G @ G.T
    q = G @ g
    L = np.linalg.eigvalsh(P)[-1]
    v = np.zeros(len(G))
    y = v.copy()
    t = 1.0
    for _ in range(max_iter):
        v_new = np.maximum(0.0, y - (P @ y + q) / L)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = v_new + ((t - 1) / t_new) * (v_new - v)
        done = np.max(np.abs(v_new - v)) < tol
        v, t = v_new, t_new
        if done:
            break
    v = _nnls_polish(G.T, -g, v)
    return g + G.T @ v


# ---------------------------------------------------------------------------
# PNN
# ---------------------------------------------------------------------------

@dataclass
class PnnColumn:
    task: str
    backbone: dict
    head: dict
    lateral: dict  # prior task -> (features, head_hidden) adapter


@dataclass
class ProgressiveNet:
    """One backbone+head column per task with linear lateral adapters from prior columns."""

    config: BackboneConfig
    head_hidden: int = 32
    seed: int = 0
    columns: list = field(default_factory=list)

    @property
    def tasks(self) -> list[str]:
        return [c.task for c in self.columns]

    def column(self, task: str) -> PnnColumn:
        for c in self.columns:
            if c.task == task:
                return c
        raise StrategyError(f"no PNN column for task {task!r}")

    def add_column(self, task: str) -> PnnColumn:
        if task in self.tasks:
            raise StrategyError(f"column for {task!r} already exists")
        i = len(self.columns)
        rng = np.random.default_rng([self.seed, 3, i])
        feat = backbone_out_dim(self.config)
        lateral = {c.task: kaiming_uniform(rng, (feat, self.head_hidden), feat) * 0.1
                   for c in self.columns}
        col = PnnColumn(task, init_backbone(self.config, rng),
                        init_head(feat, self.head_hidden, rng), lateral)
        self.columns.append(col)
        return col

    def register_task(self, task: str):
        if task not in self.tasks:
            self.add_column(task)

    def parameters(self, task: str) -> dict[str, np.ndarray]:
        c = self.column(task)
        out = {f"bb/{k}": v for k, v in c.backbone.items()}
        out.update({f"head/{k}": v for k, v in c.head.items()})
        out.update({f"lat/{t}": v for t, v in c.lateral.items()})
        return out

    def load_parameters(self, task: str, flat: Mapping[str, np.ndarray]):
        c = self.column(task)
        for name, v in flat.items():
            kind, rest = name.split("/", 1)
            {"bb": c.backbone, "head": c.head, "lat": c.lateral}[kind][rest] = v

    def prior_features(self, task: str, x) -> dict[str, np.ndarray]:
        c = self.column(task)
        return {t: backbone_forward(self.config, self.column(t).backbone, x).data for t in c.lateral}

    def forward_with(self, task: str, pv: Mapping, x, prior: Mapping[str, np.ndarray] | None = None):
        if prior is None:
            prior = self.prior_features(task, x)
        bb = {k[3:]: v for k, v in pv.items() if k.startswith("bb/")}
        hd = {k[5:]: v for k, v in pv.items() if k.startswith("head/")}
        h = backbone_forward(self.config, bb, x)
        lat = None
        for t, f in prior.items():
            term = Tensor(f) @ pv[f"lat/{t}"]
            lat = term if lat is None else lat + term
        return head_forward(hd, h, lat)

    def predict(self, task: str, windows) -> np.ndarray:
        x = _as_batch(windows)
        return self.forward_with(task, self.parameters(task), x).data

    def backbone_features(self, windows, task: str | None = None) -> np.ndarray:
        c = self.column(task) if task else self.columns[-1]
        return backbone_forward(self.config, c.backbone, _as_batch(windows)).data

    def clone(self) -> "ProgressiveNet":
        return copy.deepcopy(self)


def strategy_pnn(net: ProgressiveNet, task: str, windows) -> np.ndarray:
    """Prediction for ``task`` through its own column."""
    return net.predict(task, windows)


# ---------------------------------------------------------------------------
# noise augmentation
# ---------------------------------------------------------------------------

def noise_augment(entries: TaskEntries, level: float, rng: np.random.Generator,
                  sigma: np.ndarray | None = None) -> TaskEntries:
    """Gaussian copies of every entry, interleaved as (original, noisy) pairs.

    Per-feature noise std is ``level * sigma`` with ``sigma`` the feature std
    over the entries' windows unless given.
    """
    if level < 0:
        raise StrategyError("noise level must be >= 0")
    x = entries.inputs
    if sigma is None:
        sigma = x.reshape(-1, x.shape[-1]).std(axis=0)
    noisy = x + rng.normal(size=x.shape) * (level * sigma)
    n = len(entries)
    inputs = np.empty((2 * n,) + x.shape[1:])
    inputs[0::2], inputs[1::2] = x, noisy
    prov = np.empty(2 * n, dtype=object)
    prov[0::2], prov[1::2] = entries.provenance, "noise"
    return TaskEntries(inputs, np.repeat(entries.targets, 2), prov, np.repeat(entries.steps, 2))
