"""Temporal causal graphs: representation, random generators, acyclicity.

A temporal causal graph over d variables with maximum lag L is a stack of
L+1 binary adjacency matrices; entry [tau, i, j] = 1 means variable i at
time t-tau causes variable j at time t.  The instantaneous slice (tau=0)
must be a DAG with an empty diagonal; lagged slices are unconstrained
because time already orders their edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GraphCycleError, NumericError

SERIES_TOL = 1e-12
SERIES_CAP = 64


@dataclass
class TemporalCausalGraph:
    d: int
    L: int
    adjacency: np.ndarray  # (L+1, d, d) with entries in {0, 1}

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64)
        if self.adjacency.shape != (self.L + 1, self.d, self.d):
            raise ConfigError(
                f"adjacency shape {self.adjacency.shape} != {(self.L + 1, self.d, self.d)}")
        if not np.isin(self.adjacency, (0, 1)).all():
            raise ConfigError("adjacency entries must be 0 or 1")
        if np.trace(self.adjacency[0]) != 0:
            raise ConfigError("instantaneous slice must have a zero diagonal")

    @property
    def instantaneous(self) -> np.ndarray:
        return self.adjacency[0]

    @property
    def lagged(self) -> np.ndarray:
        return self.adjacency[1:]

    def validate_dag(self):
        if not is_dag(self.adjacency[0]):
            raise GraphCycleError("instantaneous slice contains a directed cycle")

    def edge_count(self) -> int:
        return int(self.adjacency.sum())

    def __eq__(self, other):
        return (isinstance(other, TemporalCausalGraph) and self.d == other.d
                and self.L == other.L and np.array_equal(self.adjacency, other.adjacency))

    def to_json_obj(self) -> dict:
        return {"d": self.d, "L": self.L, "adjacency": self.adjacency.tolist()}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TemporalCausalGraph":
        return cls(d=int(obj["d"]), L=int(obj["L"]), adjacency=np.asarray(obj["adjacency"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "TemporalCausalGraph":
        with open(path) as fh:
            return cls.from_json_obj(json.load(fh))

    def to_dot(self, name="g") -> str:
        """DOT rendering; lag-tau edges carry a lag=tau label."""
        lines = [f"digraph {name} {{"]
        for i in range(self.d):
            lines.append(f'  x{i + 1};')
        for tau in range(self.L + 1):
            for i, j in zip(*np.nonzero(self.adjacency[tau])):
                attr = "" if tau == 0 else f' [label="lag={tau}", style=dashed]'
                lines.append(f"  x{i + 1} -> x{j + 1}{attr};")
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass
class SummaryGraph:
    """d x d union of edges over all lags and all regimes, zero diagonal."""

    adjacency: np.ndarray

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64)
        if not np.isin(self.adjacency, (0, 1)).all():
            raise ConfigError("summary entries must be 0 or 1")


def erdos_renyi_lagged(d: int, L: int, mean_degree: float, rng) -> np.ndarray:
    """Lag slices with i.i.d. Bernoulli(mean_degree/d) entries."""
    if d < 2 or L < 1 or mean_degree < 0:
        raise ConfigError("need d >= 2, L >= 1, mean_degree >= 0")
    p = mean_degree / d
    if p > 1.0:
        raise ConfigError(f"edge probability {p} > 1")
    return (rng.random((L, d, d)) < p).astype(np.int64)


def barabasi_albert_instantaneous(d: int, degree: int, rng) -> np.ndarray:
    """Preferential-attachment DAG.

    Starts from `degree` seed nodes; every later node attaches `degree`
    edges to existing nodes with probability proportional to current
    degree (uniform while all degrees are zero).  Edges are oriented
    along a uniformly random node permutation, so the result is acyclic
    with a zero diagonal.
    """
    if not (d > degree >= 1):
        raise ConfigError("need d > degree >= 1")
    undirected = np.zeros((d, d), dtype=np.int64)
    deg = np.zeros(d)
    for new in range(degree, d):
        weights = deg[:new].copy()
        total = weights.sum()
        probs = np.full(new, 1.0 / new) if total == 0 else weights / total
        n_pick = min(degree, new)
        targets = rng.choice(new, size=n_pick, replace=False, p=probs)
        for t in targets:
            undirected[new, t] = undirected[t, new] = 1
            deg[new] += 1
            deg[t] += 1
    order = rng.permutation(d)
    rank = np.empty(d, dtype=np.int64)
    rank[order] = np.arange(d)
    g0 = np.zeros((d, d), dtype=np.int64)
    for i in range(d):
        for j in range(i + 1, d):
            if undirected[i, j]:
                if rank[i] < rank[j]:
                    g0[i, j] = 1
                else:
                    g0[j, i] = 1
    return g0


def acyclicity_penalty(weights: np.ndarray) -> float:
    """h(W) = trace(exp(W o W)) - d via a truncated power series.

    Zero exactly when the support of W is acyclic.  The series stops
    once the additive term's max-norm drops below 1e-12 (cap 64 terms);
    failure to decay within the cap raises NumericError.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ConfigError("acyclicity penalty needs a square matrix")
    if not np.isfinite(w).all():
        raise ConfigError("acyclicity penalty needs finite entries")
    m = w * w
    d = w.shape[0]
    term = np.eye(d)
    h = 0.0  # trace(I) - d
    for k in range(1, SERIES_CAP + 1):
        term = term @ m / k
        h += np.trace(term)
        if np.abs(term).max() < SERIES_TOL:
            return float(h)
    raise NumericError("acyclicity series did not converge within the term cap")


def is_dag(g0: np.ndarray) -> bool:
    """Cycle detection by iterative depth-first search."""
    g = np.asarray(g0)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ConfigError("is_dag needs a square matrix")
    d = g.shape[0]
    color = np.zeros(d, dtype=np.int8)  # 0 white, 1 in-stack, 2 done
    adj = [np.nonzero(g[i])[0] for i in range(d)]
    for start in range(d):
        if color[start]:
            continue
        stack = [(start, 0)]
        color[start] = 1
        while stack:
            node, ptr = stack[-1]
            if ptr < len(adj[node]):
                stack[-1] = (node, ptr + 1)
                child = adj[node][ptr]
                if color[child] == 1:
                    return False
                if color[child] == 0:
                    color[child] = 1
                    stack.append((child, 0))
            else:
                color[node] = 2
                stack.pop()
    return True


def topological_order(g0: np.ndarray) -> np.ndarray:
    """Ancestral ordering of a DAG (Kahn's algorithm)."""
    g = np.asarray(g0)
    d = g.shape[0]
    indeg = g.sum(axis=0).astype(np.int64)
    ready = sorted(np.nonzero(indeg == 0)[0].tolist())
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for child in np.nonzero(g[node])[0]:
            indeg[child] -= 1
            if indeg[child] == 0:
                ready.append(int(child))
    if len(order) != d:
        raise GraphCycleError("topological order requested for a cyclic graph")
    return np.asarray(order, dtype=np.int64)


def summary_graph(graph_list) -> SummaryGraph:
    """Entry-wise OR over all lags of all graphs, diagonal forced to 0."""
    if not graph_list:
        raise ConfigError("summary_graph needs at least one graph")
    d = graph_list[0].d
    if any(g.d != d for g in graph_list):
        raise ConfigError("summary_graph inputs must share the variable count")
    acc = np.zeros((d, d), dtype=np.int64)
    for g in graph_list:
        acc |= (g.adjacency.sum(axis=0) > 0).astype(np.int64)
    np.fill_diagonal(acc, 0)
    return SummaryGraph(acc)
