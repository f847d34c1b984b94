"""Accuracy, flat hit@K and hierarchy-aware precision@K."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

from zslmap.errors import DatasetError, DimensionError


def multiclass_accuracy(predicted, truth) -> float:
    predicted = np.asarray(predicted).ravel()
    truth = np.asarray(truth).ravel()
    if predicted.size != truth.size:
        raise DimensionError(f"{predicted.size} predictions for {truth.size} labels")
    if truth.size == 0:
        raise ValueError("accuracy of an empty label list is undefined")
    return float(np.mean(predicted == truth))


def top_k(scores, K: int) -> np.ndarray:
    """Column indices of the ``K`` best scores per row, best first, lower index on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DimensionError("scores must be a 2-D matrix")
    if not 1 <= K <= scores.shape[1]:
        raise ValueError(f"K must be in [1, {scores.shape[1]}], got {K}")
    return np.argsort(-scores, axis=1, kind="stable")[:, :K]


def _check_truth(scores, truth) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if truth.size != scores.shape[0]:
        raise DimensionError(f"{truth.size} labels for {scores.shape[0]} score rows")
    if truth.size == 0:
        raise ValueError("no instances to evaluate")
    if truth.min() < 0 or truth.max() >= scores.shape[1]:
        raise ValueError("label out of range")
    return truth


def flat_hit_at_k(scores, truth, K: int) -> float:
    """Fraction of rows whose true column is among the top ``K``."""
    scores = np.asarray(scores, dtype=np.float64)
    top = top_k(scores, K)
    truth = _check_truth(scores, truth)
    return float(np.mean(np.any(top == truth[:, None], axis=1)))


@dataclass(frozen=True)
class LabelHierarchy:
    """Directed acyclic parent -> child graph with a set of test-category nodes."""

    edges: tuple
    test_categories: frozenset

    def __post_init__(self):
        edges = tuple((str(p), str(c)) for p, c in self.edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "test_categories", frozenset(str(t) for t in self.test_categories))
        sorter = TopologicalSorter()
        for parent, child in edges:
            sorter.add(child, parent)
        try:
            sorter.prepare()
        except CycleError as exc:
            raise DatasetError(f"label hierarchy has a cycle through {exc.args[1]}") from None
        absent = sorted(self.test_categories - set(self.nodes))
        if absent:
            raise DatasetError(f"test categories missing from the hierarchy: {', '.join(absent)}")

    @property
    def nodes(self) -> tuple:
        return tuple(dict.fromkeys(n for edge in self.edges for n in edge))

    def neighbours(self) -> dict:
        adj = {n: set() for n in self.nodes}
        for p, c in self.edges:
            adj[p].add(c)
            adj[c].add(p)
        return adj

    def feasible_set(self, category: str, K: int, adjacency=None) -> frozenset:
        """Test categories within the smallest hop radius holding at least ``K`` of them.

        Hops ignore edge direction. Every test category at the final radius is
        included, so the set may exceed ``K``; it is smaller than ``K`` only
        when the connected component runs out.
        """
        category = str(category)
        adj = self.neighbours() if adjacency is None else adjacency
        if category not in adj:
            raise DatasetError(f"category {category} is not in the hierarchy")
        found = {category} if category in self.test_categories else set()
        visited = {category}
        frontier = deque([category])
        while len(found) < K and frontier:
            nxt = deque()
            for node in frontier:
                for nb in sorted(adj[node]):
                    if nb not in visited:
                        visited.add(nb)
                        nxt.append(nb)
                        if nb in self.test_categories:
                            found.add(nb)
            frontier = nxt
        return frozenset(found)


def load_hierarchy(edge_path, test_path) -> LabelHierarchy:
    """Read ``parent child`` lines and a one-per-line test-category list.

    Blank lines and lines starting with ``#`` are ignored in both files.
    """
    edges = []
    for lineno, line in enumerate(_lines(edge_path), 1):
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{edge_path}:{lineno}: expected 'parent child'")
        edges.append((parts[0], parts[1]))
    tests = [line.split()[0] for line in _lines(test_path)]
    return LabelHierarchy(edges=tuple(edges), test_categories=frozenset(tests))


def _lines(path):
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            yield line


def hierarchical_precision_at_k(scores, truth, K: int, hierarchy: LabelHierarchy, categories) -> float:
    """Mean over rows of ``|top-K columns in the true category's feasible set| / K``.

    ``categories[j]`` names the hierarchy node of score column ``j``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    categories = [str(c) for c in categories]
    if len(categories) != scores.shape[1]:
        raise DimensionError(f"{len(categories)} category names for {scores.shape[1]} score columns")
    top = top_k(scores, K)
    truth = _check_truth(scores, truth)
    adj = hierarchy.neighbours()
    missing = sorted({categories[t] for t in truth} - set(adj))
    if missing:
        raise DatasetError(f"true categories missing from the hierarchy: {', '.join(missing)}")
    column = {name: j for j, name in enumerate(categories)}
    cache = {}
    total = 0.0
    for row, t in zip(top, truth):
        if t not in cache:
            feas = hierarchy.feasible_set(categories[t], K, adj)
            cache[t] = {column[n] for n in feas if n in column}
        total += sum(1 for j in row if j in cache[t]) / K
    return total / truth.size
