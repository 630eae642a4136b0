"""Spatial hierarchies from data: Ward clustering and dendrogram cutting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import linkage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .hierarchy import Tree, build_tree

log = logging.getLogger(__name__)

ROOT_LABEL = "total"


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    distance: float
    new_id: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge list; ids below ``N`` are series, merge ``i`` creates id ``N + i``."""

    labels: tuple
    merges: tuple

    @property
    def size(self) -> int:
        return len(self.labels)

    def members(self, cid: int) -> list[int]:
        N = self.size
        stack, out = [cid], []
        while stack:
            c = stack.pop()
            if c < N:
                out.append(c)
            else:
                mg = self.merges[c - N]
                stack += [mg.b, mg.a]
        return out

    def first_merge_step(self) -> dict:
        """Merge step at which each series first joins a cluster."""
        step = {}
        for i, mg in enumerate(self.merges):
            for c in (mg.a, mg.b):
                if c < self.size:
                    step.setdefault(self.labels[c], i)
        return step

    def dumps(self) -> str:
        lines = ["# a\tb\tdistance\tnew_id\tsize"]
        for mg in self.merges:
            lines.append(f"{mg.a}\t{mg.b}\t{mg.distance!r}\t{mg.new_id}\t{len(self.members(mg.new_id))}")
        lines.append("# leaves\t" + "\t".join(str(x) for x in self.labels))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Dendrogram":
        labels, merges = None, []
        for line in text.splitlines():
            if line.startswith("# leaves"):
                labels = tuple(line.split("\t")[1:])
            elif line.strip() and not line.startswith("#"):
                a, b, d, new_id = line.split("\t")[:4]
                merges.append(Merge(int(a), int(b), float(d), int(new_id)))
        if labels is None:
            raise ValueError("dendrogram text lacks a '# leaves' line")
        return cls(labels, tuple(merges))


def ward_cluster(series, labels: Sequence | None = None) -> Dendrogram:
    """Ward agglomerative clustering of ``N x T`` series on Euclidean distance.

    Heights follow the Lance-Williams Ward recurrence; the height of a merge
    equals ``sqrt(2 * increase in within-cluster sum of squares)``.
    """
    try:
        X = np.asarray(series, dtype=float)
    except ValueError as exc:
        raise ValueError("ragged input: all series need the same length") from exc
    if X.ndim != 2:
        raise ValueError("ragged input: expected an N x T matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("series contain missing or non-finite values")
    N = X.shape[0]
    labels = tuple(range(N)) if labels is None else tuple(labels)
    if len(labels) != N or N < 1:
        raise ValueError("need one label per series and at least one series")
    if N == 1:
        return Dendrogram(labels, ())
    Z = linkage(X, method="ward", metric="euclidean")
    merges = tuple(Merge(int(a), int(b), float(d), N + i) for i, (a, b, d, _) in enumerate(Z))
    dists = [mg.distance for mg in merges]
    if any(y < x - 1e-12 * max(1.0, abs(x)) for x, y in zip(dists, dists[1:])):
        raise RuntimeError("Ward merge distances are not monotone")
    return Dendrogram(labels, merges)


def _node_label(cid: int) -> str:
    return f"c{cid}"


def cut(dendrogram: Dendrogram, threshold: float) -> Tree:
    """Collapse merges below ``threshold`` into flat multi-child nodes.

    Merges at or above the threshold stay binary. The root is always labelled
    :data:`ROOT_LABEL`.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    N = dendrogram.size
    labels = dendrogram.labels
    if N == 1:
        return build_tree([], root=labels[0])
    edges: list[tuple] = []

    def visit(cid: int, name) -> None:
        mg = dendrogram.merges[cid - N]
        if mg.distance < threshold:
            for leaf in sorted(dendrogram.members(cid)):
                edges.append((name, labels[leaf]))
            return
        for child in (mg.a, mg.b):
            if child < N:
                edges.append((name, labels[child]))
            else:
                cname = _node_label(child)
                edges.append((name, cname))
                visit(child, cname)

    visit(2 * N - 2, ROOT_LABEL)
    return build_tree(edges, list(labels))


def default_threshold(dendrogram: Dendrogram, clusters: int | None = None) -> float:
    """Cut distance leaving ``clusters`` groups (default ``ceil(sqrt(N))``)."""
    N = dendrogram.size
    if N <= 1:
        return 0.0
    c = clusters or math.ceil(math.sqrt(N))
    c = min(max(c, 1), N)
    d = sorted(mg.distance for mg in dendrogram.merges)
    if c == 1:
        return d[-1] * 1.5 + 1.0
    lo = d[N - c - 1] if N - c - 1 >= 0 else 0.0
    hi = d[N - c]
    return 0.5 * (lo + hi) if hi > lo else hi


def cap_leaves(tree: Tree, max_leaves: int, dendrogram: Dendrogram | None = None) -> Tree:
    """Keep at most ``max_leaves`` series, spread across the root's subtrees.

    Subtrees of the root are visited round-robin; each contributes its
    earliest-merged remaining series (ties by label order). Emptied aggregates
    are dropped and single-child roots re-rooted.
    """
    if max_leaves < 1:
        raise ValueError("max_leaves must be at least 1")
    if tree.m <= max_leaves:
        return tree
    step = dendrogram.first_merge_step() if dendrogram is not None else {}
    big = len(step) + 1

    def rank(leaf):
        return (step.get(leaf, big), str(leaf))

    groups = [sorted(tree.descendant_leaves(c), key=rank) for c in tree.children[tree.root]]
    keep: list = []
    while len(keep) < max_leaves:
        for g in groups:
            if g and len(keep) < max_leaves:
                keep.append(g.pop(0))
    return restrict(tree, keep)


def restrict(tree: Tree, keep: Sequence) -> Tree:
    """Subtree spanning the leaves in ``keep``, re-rooted past single-child roots."""
    keep = set(keep)
    alive = set()
    for leaf in keep:
        alive.update(tree.ancestors(leaf))
    root = tree.root
    while len([c for c in tree.children[root] if c in alive]) == 1 and root not in keep:
        (root,) = [c for c in tree.children[root] if c in alive]
    if root in keep:
        return build_tree([], root=root)
    edges = []
    stack = [root]
    while stack:
        v = stack.pop()
        for c in tree.children[v]:
            if c in alive:
                edges.append((v, c))
                stack.append(c)
    edges.sort(key=lambda e: tree.nodes.index(e[1]))
    order = [leaf for leaf in tree.leaf_order if leaf in keep]
    return build_tree(edges, order)


class WardTreeBuilder(BaseEstimator):
    """Fit a spatial tree to series with the scikit-learn estimator protocol.

    Parameters
    ----------
    threshold : float or None
        Cut distance; None picks :func:`default_threshold`.
    max_leaves : int or None
        Leaf cap applied after cutting.
    """

    def __init__(self, threshold: float | None = None, max_leaves: int | None = None):
        self.threshold = threshold
        self.max_leaves = max_leaves

    def fit(self, X, y=None, labels: Sequence | None = None):
        """``X`` holds one series per row."""
        X = check_array(X, ensure_all_finite=True)
        self.dendrogram_ = ward_cluster(X, labels)
        self.threshold_ = default_threshold(self.dendrogram_) if self.threshold is None else float(self.threshold)
        log.info("ward dendrogram:\n%s", self.dendrogram_.dumps())
        tree = cut(self.dendrogram_, self.threshold_)
        if self.max_leaves is not None:
            tree = cap_leaves(tree, self.max_leaves, self.dendrogram_)
        self.tree_ = tree
        return self

    @property
    def leaves_(self) -> tuple:
        check_is_fitted(self, "tree_")
        return self.tree_.leaf_order
