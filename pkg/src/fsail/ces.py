"""Task relation graph and similarity-weighted head fusion.

Each learned task is a node holding its mean prompt output and its freshly
trained head vector.  A new task's serving head mixes the similarity
weighted mean of earlier heads, its own head, and the base-session head:

    W_hat_j = lam1 * (mean_i(s_ij * W_i) + W_j) + lam2 * W_base
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

GRAPH_FORMAT = "fsail-graph"
GRAPH_VERSION = 1


class DegeneracyError(ValueError):
    """A zero-norm prompt vector has no direction to compare."""


class FusionError(ValueError):
    pass


class GraphError(ValueError):
    pass


def _vector(v, name="vector") -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise DegeneracyError(f"{name} contains non-finite entries")
    return arr


def relation_coefficient(p_i, p_j) -> float:
    """Cosine similarity of two prompt vectors, clamped below at zero."""
    a, b = _vector(p_i, "p_i"), _vector(p_j, "p_j")
    if a.shape != b.shape:
        raise DegeneracyError(f"prompt lengths differ: {a.size} vs {b.size}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegeneracyError("cannot relate a zero-norm prompt vector")
    if a is b or np.array_equal(a, b):
        return 1.0
    s = float(a @ b) / (na * nb)
    return min(1.0, max(0.0, s))


@dataclass(frozen=True)
class CESConfig:
    lam1: float = 0.2
    lam2: float = 0.8
    include_base_nodes: bool = True

    def __post_init__(self):
        if not (self.lam1 >= 0 and self.lam2 >= 0):
            raise FusionError(f"fusion coefficients must be non-negative, got ({self.lam1}, {self.lam2})")


@dataclass(frozen=True, eq=False)
class TaskNode:
    task_id: str
    prompt_embedding: np.ndarray
    head_weights: np.ndarray
    session_index: int

    def __post_init__(self):
        p = _vector(self.prompt_embedding, "prompt_embedding")
        w = _vector(self.head_weights, "head_weights")
        if not np.linalg.norm(p) > 0:
            raise DegeneracyError(f"node {self.task_id!r} has a zero-norm prompt embedding")
        p.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "prompt_embedding", p)
        object.__setattr__(self, "head_weights", w)

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "session_index": int(self.session_index),
            "prompt": self.prompt_embedding.tolist(),
            "head": self.head_weights.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskNode":
        return cls(rec["task_id"], np.asarray(rec["prompt"], dtype=np.float64),
                   np.asarray(rec["head"], dtype=np.float64), int(rec["session_index"]))


@dataclass
class RelationGraph:
    """Append-only store of task nodes with a cached coefficient matrix.

    Nodes from session 0 are the per-base-task specialists; whether they
    take part in fusion is controlled by ``config.include_base_nodes``.
    """

    base_weights: np.ndarray
    config: CESConfig = field(default_factory=CESConfig)
    _nodes: list = field(default_factory=list, repr=False)
    _s: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), repr=False)

    def __post_init__(self):
        w = _vector(self.base_weights, "base_weights")
        w.setflags(write=False)
        self.base_weights = w

    @property
    def nodes(self) -> tuple:
        return tuple(self._nodes)

    @property
    def coefficients(self) -> np.ndarray:
        out = self._s.copy()
        out.setflags(write=False)
        return out

    @property
    def task_ids(self) -> list:
        return [n.task_id for n in self._nodes]

    def __len__(self):
        return len(self._nodes)

    def index_of(self, task_id: str) -> int:
        for i, n in enumerate(self._nodes):
            if n.task_id == task_id:
                return i
        raise KeyError(task_id)

    def add_node(self, node: TaskNode) -> "RelationGraph":
        if any(n.task_id == node.task_id for n in self._nodes):
            raise GraphError(f"task {node.task_id!r} is already in the graph")
        if node.head_weights.shape != self.base_weights.shape:
            raise GraphError(f"head length {node.head_weights.size} does not match "
                             f"base head length {self.base_weights.size}")
        if self._nodes and node.prompt_embedding.shape != self._nodes[0].prompt_embedding.shape:
            raise GraphError("prompt embedding length differs from existing nodes")
        k = len(self._nodes)
        s = np.eye(k + 1)
        s[:k, :k] = self._s
        for i, other in enumerate(self._nodes):
            s[i, k] = s[k, i] = relation_coefficient(other.prompt_embedding, node.prompt_embedding)
        self._nodes.append(node)
        self._s = s
        return self

    def predecessors(self, j: int) -> list:
        """Indices of the nodes that feed the mean term for node ``j``."""
        return [i for i in range(j)
                if self.config.include_base_nodes or self._nodes[i].session_index > 0]

    def fuse(self, j: int, w_j=None) -> np.ndarray:
        """Serving head for node ``j``; ``w_j`` defaults to its stored head."""
        if not 0 <= j < len(self._nodes):
            raise GraphError(f"node index {j} out of range for {len(self._nodes)} nodes")
        w = self._nodes[j].head_weights if w_j is None else w_j
        preds = self.predecessors(j)
        return fuse_weights([self._nodes[i].head_weights for i in preds],
                            [self._s[i, j] for i in preds],
                            w, self.base_weights, self.config.lam1, self.config.lam2)

    def similarity_report(self) -> dict:
        if len(self._nodes) < 2:
            raise GraphError("a similarity report needs at least two nodes")
        return {"task_ids": self.task_ids, "matrix": self._s.tolist()}

    def to_record(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "config": {"lam1": self.config.lam1, "lam2": self.config.lam2,
                       "include_base_nodes": self.config.include_base_nodes},
            "base_weights": self.base_weights.tolist(),
            "nodes": [n.to_record() for n in self._nodes],
            "coefficients": self._s.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict, atol: float = 1e-12) -> "RelationGraph":
        if rec.get("format") != GRAPH_FORMAT or rec.get("version") != GRAPH_VERSION:
            raise GraphError(f"not a {GRAPH_FORMAT} v{GRAPH_VERSION} record")
        g = cls(np.asarray(rec["base_weights"], dtype=np.float64), CESConfig(**rec["config"]))
        for n in rec["nodes"]:
            g.add_node(TaskNode.from_record(n))
        stored = np.asarray(rec["coefficients"], dtype=np.float64).reshape(g._s.shape)
        if not np.allclose(stored, g._s, rtol=0, atol=atol):
            raise GraphError("stored coefficient matrix disagrees with the recomputed one")
        return g

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_record()))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "RelationGraph":
        return cls.from_record(json.loads(Path(path).read_text()))


def fuse_weights(prev_weights: Iterable, coefficients: Iterable, w_j, w_base,
                 lam1: float = 0.2, lam2: float = 0.8) -> np.ndarray:
    """``lam1 * (mean(s_i * W_i) + W_j) + lam2 * W_base``.

    The mean over an empty predecessor list is the zero vector, so the
    degenerate cases ``lam1 = 0`` and "no predecessors" come out exact.
    """
    if lam1 < 0 or lam2 < 0:
        raise FusionError(f"fusion coefficients must be non-negative, got ({lam1}, {lam2})")
    w_j = np.asarray(w_j, dtype=np.float64)
    w_base = np.asarray(w_base, dtype=np.float64)
    if w_j.shape != w_base.shape:
        raise FusionError(f"head length {w_j.shape} does not match base head {w_base.shape}")
    prev = [np.asarray(w, dtype=np.float64) for w in prev_weights]
    coeff = [float(c) for c in coefficients]
    if len(prev) != len(coeff):
        raise FusionError(f"{len(prev)} predecessor heads but {len(coeff)} coefficients")
    for w in prev:
        if w.shape != w_j.shape:
            raise FusionError(f"predecessor head shape {w.shape} does not match {w_j.shape}")
    if lam1 == 0.0:
        return lam2 * w_base if lam2 != 1.0 else w_base.copy()
    if prev:
        agg = np.zeros_like(w_j)
        for c, w in zip(coeff, prev):
            agg += c * w
        agg /= len(prev)
        mixed = agg + w_j
    else:
        mixed = w_j
    if lam2 == 0.0:
        return mixed * lam1 if lam1 != 1.0 else mixed.copy()
    return lam1 * mixed + lam2 * w_base


def fuse_serving_head(graph: RelationGraph, task_id: Optional[str] = None) -> np.ndarray:
    """Fused head for ``task_id`` (the newest node when omitted)."""
    j = len(graph) - 1 if task_id is None else graph.index_of(task_id)
    return graph.fuse(j)
