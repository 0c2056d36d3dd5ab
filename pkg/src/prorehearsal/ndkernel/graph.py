"""Function-style entry points over the tape: ``forward`` and ``backward``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tape, Tensor, UsageError


@dataclass
class Graph:
    """A callable built from primitive ops with declared input shapes.

    ``None`` inside a declared shape matches any size on that axis.
    """

    fn: Callable[..., Tensor]
    input_shapes: Sequence[tuple] | None = None
    name: str = "graph"

    def check(self, inputs: Sequence[Tensor]):
        if self.input_shapes is None:
            return
        if len(inputs) != len(self.input_shapes):
            raise ShapeError(self.name, *[t.shape for t in inputs],
                             detail=f"expected {len(self.input_shapes)} inputs")
        for i, (t, want) in enumerate(zip(inputs, self.input_shapes)):
            ok = len(t.shape) == len(want) and all(
                w is None or w == s for w, s in zip(want, t.shape))
            if not ok:
                raise ShapeError(f"{self.name}[input {i}]", t.shape, want)


def forward(graph: Graph | Callable[..., Tensor], inputs: Sequence,
            names: Sequence[str] | None = None) -> Tensor:
    """Evaluate ``graph`` on ``inputs`` while recording onto a fresh tape.

    Inputs are watched under ``names`` (default ``input0``, ``input1``...). The
    tape is reachable as ``result.tape``.
    """
    if not isinstance(graph, Graph):
        graph = Graph(graph)
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    graph.check(tensors)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(tensors))]
    tape = Tape()
    with tape:
        watched = [tape.watch(t, n) for t, n in zip(tensors, names)]
        out = graph.fn(*watched)
    if not isinstance(out, Tensor) or out.tape is not tape:
        # graph ignored its inputs; record a passthrough so backward has an output node
        with tape:
            out = tape._record("const", (), np.asarray(out.data if isinstance(out, Tensor) else out,
                                                        dtype=np.float64), lambda g: ())
    return out


def backward(tape: Tape | None, seed=None) -> dict[str, np.ndarray]:
    """Gradients of the tape's last recorded value w.r.t. every watched leaf."""
    if tape is None:
        raise UsageError("backward called without a tape; run forward first")
    return tape.backward(None, seed)
