"""Lyapunov exponents by local tangent maps, compounding-error rollouts and closed-loop evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    """Delay embedding of dimension ``m`` with delay ``delay``; tangent maps act on
    ``matrix_dim`` consecutive delay coordinates and advance ``evolution_step`` samples."""

    m: int = 5
    delay: int = 1
    min_neighbors: int = 15
    radius: float | None = None
    matrix_dim: int = 2
    evolution_step: int = 1
    min_length: int = 500
    # relative singular-value cutoff; neighbourhoods that span fewer than
    # matrix_dim directions otherwise produce spurious exponents
    rcond: float = 1e-3

    def __post_init__(self):
        if self.m < 1 or self.delay < 1:
            raise DynamicsError("embedding dimension and delay must be >= 1")
        if not 1 <= self.matrix_dim <= self.m:
            raise DynamicsError("matrix_dim must be in [1, m]")
        if self.evolution_step < 1 or self.min_neighbors < self.matrix_dim:
            raise DynamicsError("evolution_step >= 1 and min_neighbors >= matrix_dim required")


def delay_embed(x: np.ndarray, m: int, delay: int) -> np.ndarray:
    n = len(x) - (m - 1) * delay
    if n <= 0:
        raise DynamicsError("series too short for the embedding")
    return np.stack([x[i * delay:i * delay + n] for i in range(m)], axis=1)


def lyapunov_eckmann(series, cfg: EmbeddingConfig = EmbeddingConfig(), n_exponents: int = 2,
                     return_spectrum: bool = False):
    """Largest ``n_exponents`` Lyapunov exponents (per sample), sorted descending.

    Neighbours are found in the ``m``-dimensional embedding. At each point the
    map ``u_i -> u_{i+s}`` on ``matrix_dim`` delay coordinates is linearised by
    least squares over neighbour differences, written in companion form, and an
    orthonormal frame is carried along the orbit with QR re-orthonormalisation.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    if not np.isfinite(x).all():
        raise DynamicsError("non-finite values in series")
    E = delay_embed(x, cfg.m, cfg.delay)
    if len(E) < cfg.min_length:
        raise DynamicsError(f"need at least {cfg.min_length} embedded points, got {len(E)}")
    dm, tau, s = cfg.matrix_dim, cfg.delay, cfg.evolution_step
    # u_i = (x_i, x_{i+tau}, ..., x_{i+(dm-1)tau}); its image after s steps must exist
    span = (dm - 1) * tau + s
    n_pts = min(len(E), len(x) - span)
    U = np.stack([x[i * tau:i * tau + n_pts] for i in range(dm)], axis=1)
    U_next = np.stack([x[i * tau + s:i * tau + s + n_pts] for i in range(dm)], axis=1)
    tree = cKDTree(E[:n_pts])
    scale = np.ptp(x) or 1.0

    Q = np.eye(dm)
    logs = np.zeros(dm)
    steps = 0
    starved = 0
    k = cfg.min_neighbors + 1
    # with a step of s the frame advances along i, i+s, i+2s, ...
    for i in range(0, n_pts, s):
        if cfg.radius is None:
            _, nb = tree.query(E[i], k=k)
            nb = np.asarray(nb)[1:]
        else:
            nb = np.asarray(tree.query_ball_point(E[i], cfg.radius * scale))
            nb = nb[nb != i]
            if len(nb) < cfg.min_neighbors:
                starved += 1
                continue
        dU = U[nb] - U[i]
        dV = U_next[nb] - U_next[i]
        J, *_ = np.linalg.lstsq(dU, dV, rcond=cfg.rcond)
        J = J.T
        if s == tau:
            # image coordinates shift by one delay slot; only the last row is new
            J[:-1] = np.eye(dm)[1:]
        Q, R = np.linalg.qr(J @ Q)
        d = np.abs(np.diag(R))
        if np.any(d == 0):
            continue
        logs += np.log(d)
        steps += 1
    if cfg.radius is not None and starved > 0.2 * (n_pts // s):
        raise DynamicsError(f"{starved} points lack {cfg.min_neighbors} neighbours within the "
                            "radius; use a larger radius or a longer series")
    if steps == 0:
        raise DynamicsError("no tangent maps could be fitted")
    spectrum = np.sort(logs / (steps * s))[::-1]
    out = tuple(float(v) for v in spectrum[:n_exponents])
    return (out, spectrum) if return_spectrum else out


def logistic_series(n: int, x0: float = 0.3, r: float = 4.0, burn: int = 100) -> np.ndarray:
    x = np.empty(n + burn)
    x[0] = x0
    for i in range(1, n + burn):
        x[i] = r * x[i - 1] * (1 - x[i - 1])
    return x[burn:]


def henon_orbit(n: int, a: float = 1.4, b: float = 0.3, burn: int = 100) -> np.ndarray:
    """``(n, 2)`` orbit of the Henon map starting near the attractor."""
    xy = np.empty((n + burn, 2))
    xy[0] = (0.1, 0.1)
    for i in range(1, n + burn):
        x, y = xy[i - 1]
        xy[i] = (1 - a * x * x + y, b * x)
    return xy[burn:]


# ---------------------------------------------------------------------------
# compounding error
# ---------------------------------------------------------------------------

def euclidean(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


@dataclass
class CompoundingScenario:
    """Reference states ``x_1..x_N``, predictor ``f``, dynamics ``g(x, y)`` and a start ``x'_1``."""

    reference: np.ndarray
    f: Callable
    g: Callable
    C: float
    x1_prime: np.ndarray
    metric: Callable = euclidean

    def __post_init__(self):
        if not self.C > 0:
            raise DynamicsError("Lipschitz constant C must be > 0")
        self.reference = np.asarray(self.reference, dtype=np.float64)


@dataclass
class RolloutResult:
    states: np.ndarray
    deviations: np.ndarray
    bound: np.ndarray
    truncated: bool = False


def compounding_rollout(sc: CompoundingScenario) -> RolloutResult:
    """Roll ``x'_{k+1} = g(x'_k, f(x'_k))`` and compare with the bound ``C^(k-1) d(x'_1, x_1)``."""
    ref = sc.reference
    n = len(ref)
    states = [np.asarray(sc.x1_prime, dtype=np.float64)]
    truncated = False
    for _ in range(1, n):
        x = states[-1]
        nxt = np.asarray(sc.g(x, sc.f(x)), dtype=np.float64)
        if not np.isfinite(nxt).all():
            truncated = True
            log.info("rollout truncated at step %d: non-finite state", len(states) + 1)
            break
        states.append(nxt)
    states = np.array(states)
    dev = np.array([sc.metric(s, r) for s, r in zip(states, ref)])
    d1 = sc.metric(sc.x1_prime, ref[0])
    bound = d1 * sc.C ** np.arange(len(states), dtype=np.float64)
    return RolloutResult(states, dev, bound, truncated)


def check_lipschitz(sc: CompoundingScenario, n_samples: int = 10_000, spread: float = 1.0,
                    rng: np.random.Generator | None = None) -> tuple[bool, float]:
    """Sample states near the reference and test ``d(g[x, f(x)], x_{k+1}) <= C d(x, x_k)``.

    Returns ``(holds, worst ratio)``.
    """
    rng = rng or np.random.default_rng(0)
    ref = sc.reference
    if len(ref) < 2:
        raise DynamicsError("need at least two reference states")
    worst = 0.0
    for _ in range(n_samples):
        k = int(rng.integers(0, len(ref) - 1))
        x = ref[k] + rng.normal(scale=spread, size=np.shape(ref[k]))
        den = sc.metric(x, ref[k])
        if den == 0:
            continue
        worst = max(worst, sc.metric(sc.g(x, sc.f(x)), ref[k + 1]) / den)
    return worst <= sc.C * (1 + 1e-12), worst


def tightness_scenario(kappa: float = 0.5, n: int = 20, x1: float = 1.0) -> CompoundingScenario:
    """Reference ``x_k = 0`` with ``g(x, f(x)) = (1 + kappa) x``; the bound is attained."""
    return CompoundingScenario(np.zeros((n, 1)), f=lambda x: np.zeros(1),
                               g=lambda x, y: x + kappa * x, C=1 + kappa,
                               x1_prime=np.array([x1]), metric=lambda a, b: float(np.abs(a - b).sum()))


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

@dataclass
class ClosedLoopResult:
    states: np.ndarray  # imagined x_hat_{k+1..k+H}
    predictions: np.ndarray  # y_hat used at each step
    deviations: np.ndarray  # ||x_hat - x|| per step (nan when no ground truth)
    truncated: bool = False


def closed_loop_eval(model, task: str, g, window: np.ndarray, horizon: int,
                     truth: np.ndarray | None = None) -> ClosedLoopResult:
    """Alternate ``y = f(window)``, ``x_next = g(x_last, y)`` and slide the window.

    ``truth`` holds the true states following the window (at least ``horizon`` rows).
    """
    if horizon < 1:
        raise DynamicsError("horizon must be >= 1")
    W = np.asarray(window, dtype=np.float64).copy()
    states, preds = [], []
    truncated = False
    for _ in range(horizon):
        y = float(np.ravel(model.predict(task, W[None]))[0])
        x_next = np.asarray(g.prospect(W[-1], y), dtype=np.float64)
        if not (np.isfinite(x_next).all() and np.isfinite(y)):
            truncated = True
            break
        states.append(x_next)
        preds.append(y)
        W = np.vstack([W[1:], x_next])
    states = np.array(states).reshape(len(states), -1)
    dev = np.full(len(states), np.nan)
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        m = min(len(states), len(truth))
        dev[:m] = np.linalg.norm(states[:m] - truth[:m], axis=1)
    return ClosedLoopResult(states, np.array(preds), dev, truncated)


def write_deviation_csv(rows: Sequence[dict], path: str | Path, fields: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(r[f]) if isinstance(r[f], float) else r[f] for f in fields])
