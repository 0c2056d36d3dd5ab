"""Backbones, task heads, the composed multitask predictor and prospective models.

All forward functions take a parameter mapping whose values may be plain
arrays or tape-watched :class:`Tensor` objects, so the same code serves
evaluation and training.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ndkernel import Tensor, concat, kaiming_uniform, relu, temporal_conv1d

CHECKPOINT_VERSION = 1
BACKBONE_KINDS = ("linear", "mlp", "tcn")
HEAD_MODES = ("shared", "task_specific")
SHARED_HEAD = "__shared__"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "tcn"
    input_dim: int = 6
    window_length: int = 10
    hidden_channels: int = 32
    depth: int = 3
    kernel_size: int = 3
    dilation_schedule: tuple = (1, 2, 4)

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ModelError(f"unknown backbone kind {self.kind!r}")
        if self.window_length < 1 or self.input_dim < 1:
            raise ModelError("window_length and input_dim must be >= 1")
        object.__setattr__(self, "dilation_schedule", tuple(int(d) for d in self.dilation_schedule))
        if self.kind == "tcn" and len(self.dilation_schedule) != self.depth:
            raise ModelError("tcn needs one dilation per layer")

    @property
    def receptive_field(self) -> int:
        if self.kind != "tcn":
            return self.window_length
        return 1 + sum((self.kernel_size - 1) * d for d in self.dilation_schedule)

    @property
    def output_dim(self) -> int:
        return backbone_out_dim(self)


def default_backbone(kind: str, input_dim: int = 6, window_length: int = 10) -> BackboneConfig:
    """Shipped configs: linear and mlp widths are solved to match the TCN's parameter count."""
    tcn = BackboneConfig("tcn", input_dim, window_length)
    if kind == "tcn":
        return tcn
    target = count_backbone_params(tcn)
    best = None
    for width in range(1, 4096):
        cfg = BackboneConfig(kind, input_dim, window_length, hidden_channels=width,
                             depth=1 if kind == "linear" else 2, kernel_size=1,
                             dilation_schedule=())
        gap = abs(count_backbone_params(cfg) - target)
        if best is None or gap < best[0]:
            best = (gap, cfg)
        if count_backbone_params(cfg) > target:
            break
    return best[1]


def _mlp_widths(cfg: BackboneConfig) -> list[int]:
    # hidden layers of the mlp backbone; the last one is fixed at 32 features
    return [cfg.hidden_channels] * (cfg.depth - 1) + [32]


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    d, T = cfg.input_dim, cfg.window_length
    if cfg.kind == "tcn":
        c_in = d
        for i in range(cfg.depth):
            k = cfg.kernel_size
            p[f"conv{i}.W"] = kaiming_uniform(rng, (k, c_in, cfg.hidden_channels), k * c_in)
            p[f"conv{i}.b"] = np.zeros(cfg.hidden_channels)
            c_in = cfg.hidden_channels
    elif cfg.kind == "linear":
        p["W"] = kaiming_uniform(rng, (T * d, cfg.hidden_channels), T * d)
        p["b"] = np.zeros(cfg.hidden_channels)
    else:
        fan = T * d
        for i, w in enumerate(_mlp_widths(cfg)):
            p[f"fc{i}.W"] = kaiming_uniform(rng, (fan, w), fan)
            p[f"fc{i}.b"] = np.zeros(w)
            fan = w
    return p


def backbone_out_dim(cfg: BackboneConfig) -> int:
    return 32 if cfg.kind == "mlp" else cfg.hidden_channels


def count_backbone_params(cfg: BackboneConfig) -> int:
    return sum(a.size for a in init_backbone(cfg, np.random.default_rng(0)).values())


def backbone_forward(cfg: BackboneConfig, p: Mapping, x) -> Tensor:
    """``x`` is ``(B, T, d)``; returns ``(B, features)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.window_length, cfg.input_dim):
        raise ModelError(f"backbone expects (B, {cfg.window_length}, {cfg.input_dim}), got {x.shape}")
    if cfg.kind == "tcn":
        h = x
        for i, dil in enumerate(cfg.dilation_schedule):
            h = relu(temporal_conv1d(h, p[f"conv{i}.W"], dil) + p[f"conv{i}.b"])
        return h[:, -1, :]
    flat = x.reshape(x.shape[0], -1)
    if cfg.kind == "linear":
        return flat @ p["W"] + p["b"]
    h = flat
    for i in range(len(_mlp_widths(cfg))):
        h = relu(h @ p[f"fc{i}.W"] + p[f"fc{i}.b"])
    return h


def init_head(in_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "W1": kaiming_uniform(rng, (in_dim, hidden), in_dim),
        "b1": np.zeros(hidden),
        "W2": kaiming_uniform(rng, (hidden, 1), hidden),
        "b2": np.zeros(1),
    }


def head_forward(p: Mapping, h, lateral=None) -> Tensor:
    """Two-layer feed-forward head; returns ``(B,)``."""
    z = h @ p["W1"] + p["b1"]
    if lateral is not None:
        z = z + lateral
    return (relu(z) @ p["W2"] + p["b2"]).reshape(-1)


def _as_batch(windows) -> np.ndarray:
    arr = getattr(windows, "inputs", windows)
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


@dataclass
class MultiTaskModel:
    """Shared backbone ``f^s`` followed by a head ``f_t`` per task (or one shared head)."""

    config: BackboneConfig
    head_mode: str = "task_specific"
    head_hidden: int = 32
    seed: int = 0
    backbone: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)
    tasks: list = field(default_factory=list)

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ModelError(f"unknown head_mode {self.head_mode!r}")
        if not self.backbone:
            self.backbone = init_backbone(self.config, np.random.default_rng([self.seed, 0]))
        if self.head_mode == "shared" and not self.heads:
            self.heads[SHARED_HEAD] = init_head(backbone_out_dim(self.config), self.head_hidden,
                                                np.random.default_rng([self.seed, 1, 0]))

    # -- structure --------------------------------------------------------
    def add_task_head(self, task: str) -> "MultiTaskModel":
        if self.head_mode == "shared":
            raise ModelError("shared-head model has a single head; add_task_head is not allowed")
        if task in self.heads:
            raise ModelError(f"task {task!r} already has a head")
        rng = np.random.default_rng([self.seed, 1, len(self.heads) + 1])
        self.heads[task] = init_head(backbone_out_dim(self.config), self.head_hidden, rng)
        self.tasks.append(task)
        return self

    def register_task(self, task: str) -> None:
        """Make ``task`` known; adds a head in task-specific mode."""
        if self.head_mode == "task_specific":
            if task not in self.heads:
                self.add_task_head(task)
        elif task not in self.tasks:
            self.tasks.append(task)

    def head_key(self, task: str) -> str:
        if self.head_mode == "shared":
            return SHARED_HEAD
        if task not in self.heads:
            raise ModelError(f"no head for task {task!r}")
        return task

    # -- parameters -------------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        flat = {f"bb/{k}": v for k, v in self.backbone.items()}
        for t, hp in self.heads.items():
            flat.update({f"head/{t}/{k}": v for k, v in hp.items()})
        return flat

    def load_parameters(self, flat: Mapping[str, np.ndarray]) -> None:
        for name, v in flat.items():
            kind, rest = name.split("/", 1)
            if kind == "bb":
                self.backbone[rest] = v
            else:
                t, k = rest.rsplit("/", 1)
                self.heads[t][k] = v

    def head_param_names(self, task: str) -> list[str]:
        key = self.head_key(task)
        return [f"head/{key}/{k}" for k in self.heads[key]]

    def backbone_param_names(self) -> list[str]:
        return [f"bb/{k}" for k in self.backbone]

    def clone(self) -> "MultiTaskModel":
        return copy.deepcopy(self)

    # -- forward ----------------------------------------------------------
    def features_with(self, pv: Mapping, x) -> Tensor:
        return backbone_forward(self.config, {k[3:]: v for k, v in pv.items() if k.startswith("bb/")}, x)

    def head_with(self, pv: Mapping, task: str, h) -> Tensor:
        key = self.head_key(task)
        prefix = f"head/{key}/"
        return head_forward({k[len(prefix):]: v for k, v in pv.items() if k.startswith(prefix)}, h)

    def backbone_features(self, windows) -> np.ndarray:
        return backbone_forward(self.config, self.backbone, _as_batch(windows)).data

    def head_output(self, task: str, features) -> np.ndarray:
        return head_forward(self.heads[self.head_key(task)], Tensor(features)).data

    def predict(self, task: str, windows) -> np.ndarray:
        """``f_t(f^s(window))`` for a window or a batch of windows."""
        key = self.head_key(task)
        h = backbone_forward(self.config, self.backbone, _as_batch(windows))
        return head_forward(self.heads[key], h).data

    def predict_groups(self, pv: Mapping, x, groups: Sequence[tuple]) -> list[Tensor]:
        """Per-group predictions for a batch sorted by task: ``groups`` = [(task, start, stop)]."""
        h = self.features_with(pv, x)
        return [self.head_with(pv, t, h[a:b]) for t, a, b in groups]


@dataclass
class ProspectiveModel:
    """Forward-dynamics MLP ``g_t(x_k, y_k) -> x_{k+1}``."""

    input_dim: int
    hidden: int = 64
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            rng = np.random.default_rng([self.seed, 2])
            d = self.input_dim
            self.params = {
                "W1": kaiming_uniform(rng, (d + 1, self.hidden), d + 1),
                "b1": np.zeros(self.hidden),
                "W2": kaiming_uniform(rng, (self.hidden, d), self.hidden),
                "b2": np.zeros(d),
            }

    def forward_with(self, p: Mapping, x, y) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        y = y if isinstance(y, Tensor) else Tensor(y)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ModelError(f"prospective model expects x of dim {self.input_dim}, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ModelError(f"prospective model expects one y per state, got {y.shape}")
        z = concat([x, y.reshape(-1, 1)], axis=1)
        return relu(z @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]

    def prospect(self, x, y) -> np.ndarray:
        """Imagined next state(s); accepts a single state or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        yb = np.atleast_1d(np.asarray(y, dtype=np.float64))
        out = self.forward_with(self.params, xb, yb).data
        return out[0] if single else out

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    def load_parameters(self, flat: Mapping[str, np.ndarray]) -> None:
        self.params.update(flat)

    def clone(self) -> "ProspectiveModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MultiTaskModel, path: str | Path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "head_mode": model.head_mode,
        "head_hidden": model.head_hidden,
        "seed": model.seed,
        "tasks": list(model.tasks),
        "heads": list(model.heads),
    }
    arrays = {f"p:{k}": v for k, v in model.parameters().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> MultiTaskModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = meta["config"]
        cfg["dilation_schedule"] = tuple(cfg["dilation_schedule"])
        flat = {k[2:]: z[k].copy() for k in z.files if k.startswith("p:")}
    backbone = {k[3:]: v for k, v in flat.items() if k.startswith("bb/")}
    heads: dict = {h: {} for h in meta["heads"]}
    for k, v in flat.items():
        if k.startswith("head/"):
            t, name = k[5:].rsplit("/", 1)
            heads[t][name] = v
    return MultiTaskModel(BackboneConfig(**cfg), meta["head_mode"], meta["head_hidden"],
                          meta["seed"], backbone, heads, list(meta["tasks"]))
