"""Hierarchy structures, summation matrices and coherency algebra.

A :class:`Tree` is the structural source of truth. Its :class:`SummationMatrix`
maps the ``m`` leaf values onto all ``n`` node values (``y = S b``). Matrices
of two trees compose through the Kronecker product, which yields the
spatio-temporal structures used elsewhere in the package.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Sequence

import numpy as np
from scipy import sparse

DENSE_ENTRY_LIMIT = 10**6
COMPOSE_ENTRY_CAP = 10**8


class HierarchyError(ValueError):
    """Raised for malformed trees, layouts and summation matrices."""


@dataclass(frozen=True)
class Tree:
    """Rooted hierarchy of labeled nodes with a fixed leaf order.

    ``level`` is 1 for the root and grows by one per edge. ``nodes`` keeps the
    order in which labels were first seen, which fixes the row order of
    aggregates sharing a level.
    """

    nodes: tuple
    parent: dict
    level: dict
    leaf_order: tuple
    children: dict = field(repr=False)

    @property
    def root(self) -> Hashable:
        return self.nodes[0]

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> int:
        return len(self.leaf_order)

    @property
    def depth(self) -> int:
        return max(self.level.values())

    def is_leaf(self, label) -> bool:
        return not self.children[label]

    def edges(self) -> list[tuple]:
        return [(self.parent[c], c) for c in self.nodes if c in self.parent]

    def ancestors(self, label) -> list:
        """Ancestors of ``label`` including itself, nearest first."""
        out = [label]
        while out[-1] in self.parent:
            out.append(self.parent[out[-1]])
        return out

    def descendant_leaves(self, label) -> list:
        stack, found = [label], []
        while stack:
            node = stack.pop()
            kids = self.children[node]
            if not kids:
                found.append(node)
            stack.extend(reversed(kids))
        order = {leaf: i for i, leaf in enumerate(self.leaf_order)}
        return sorted(found, key=order.__getitem__)

    def redundant_nodes(self) -> list:
        """Aggregates with a single child; their S row duplicates the child's."""
        return [v for v in self.nodes if len(self.children[v]) == 1]


def build_tree(edges: Iterable[tuple], leaf_order: Sequence | None = None, root=None) -> Tree:
    """Build a :class:`Tree` from ``(parent, child)`` pairs.

    ``root`` is only needed for the single-node tree, where ``edges`` is empty.
    When ``leaf_order`` is omitted the childless nodes are taken in the order
    they were first seen.
    """
    edges = [tuple(e) for e in edges]
    if not edges:
        if root is None:
            if leaf_order is None or len(leaf_order) != 1:
                raise HierarchyError("an empty edge list needs exactly one root label")
            root = leaf_order[0]
        if leaf_order is not None and list(leaf_order) != [root]:
            raise HierarchyError("leaf_order must be the root for a single-node tree")
        return Tree((root,), {}, {root: 1}, (root,), {root: []})

    seen: dict = {}
    parent: dict = {}
    children: dict = {}
    for p, c in edges:
        for label in (p, c):
            if label not in seen:
                seen[label] = len(seen)
                children[label] = []
        if c in parent:
            if parent[c] == p:
                raise HierarchyError(f"duplicate edge {p!r} -> {c!r}")
            raise HierarchyError(f"node {c!r} has two parents: {parent[c]!r} and {p!r}")
        if p == c:
            raise HierarchyError(f"cycle detected: self-loop on {p!r}")
        parent[c] = p
        children[p].append(c)

    roots = [v for v in seen if v not in parent]
    if not roots:
        raise HierarchyError("cycle detected: every node has a parent")
    if len(roots) > 1:
        raise HierarchyError(f"multiple roots: {roots!r}")
    (top,) = roots
    if root is not None and root != top:
        raise HierarchyError(f"declared root {root!r} differs from edge root {top!r}")

    level = {top: 1}
    queue = deque([top])
    while queue:
        v = queue.popleft()
        for c in children[v]:
            level[c] = level[v] + 1
            queue.append(c)
    if len(level) != len(seen):
        unreachable = [v for v in seen if v not in level]
        raise HierarchyError(f"cycle detected among nodes {unreachable!r}")

    childless = [v for v in seen if not children[v]]
    if leaf_order is None:
        leaf_order = childless
    leaf_order = tuple(leaf_order)
    if len(set(leaf_order)) != len(leaf_order) or set(leaf_order) != set(childless):
        raise HierarchyError(
            f"leaf_order mismatch: expected a permutation of {childless!r}, got {list(leaf_order)!r}"
        )
    nodes = tuple(sorted(seen, key=seen.__getitem__))
    # root first keeps Tree.root trivial
    nodes = (top,) + tuple(v for v in nodes if v != top)
    return Tree(nodes, parent, level, leaf_order, children)


@dataclass(frozen=True)
class YLayout:
    """Stacking order of the ``y`` vector; labels are pairs for composed trees."""

    labels: tuple

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __getitem__(self, i):
        return self.labels[i]

    def index(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}


@dataclass(frozen=True, eq=False)
class SummationMatrix:
    """``n x m`` 0/1 matrix with its row layout, leaf labels and row levels.

    ``matrix`` is a dense integer array for small structures and a CSR matrix
    once ``n * m`` exceeds :data:`DENSE_ENTRY_LIMIT`.
    """

    matrix: Any
    layout: YLayout
    leaves: tuple
    levels: tuple

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.matrix)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else np.asarray(self.matrix)

    def leaf_positions(self) -> np.ndarray:
        """Row index of every leaf, in column order."""
        idx = self.layout.index()
        return np.array([idx[leaf] for leaf in self.leaves], dtype=int)

    def level_of(self) -> dict:
        return dict(zip(self.layout.labels, self.levels))

    def redundant_rows(self) -> list[tuple]:
        """Pairs ``(aggregate, leaf)`` whose rows coincide (single-child chains)."""
        dense = self.dense() if self.n * self.m <= DENSE_ENTRY_LIMIT else None
        if dense is None:
            rows = [frozenset(self.matrix.getrow(i).indices) for i in range(self.n)]
        else:
            rows = [frozenset(np.flatnonzero(dense[i])) for i in range(self.n)]
        by_leaf = {rows[p]: self.layout[p] for p in self.leaf_positions()}
        leafset = set(self.leaves)
        return [
            (lab, by_leaf[r])
            for lab, r in zip(self.layout.labels, rows)
            if lab not in leafset and r in by_leaf
        ]


def _as_storage(mat, dense_limit: int):
    if mat.shape[0] * mat.shape[1] > dense_limit:
        return sparse.csr_matrix(mat, dtype=np.int8)
    if sparse.issparse(mat):
        return mat.toarray().astype(np.int64)
    return np.asarray(mat, dtype=np.int64)


def summation_matrix(tree: Tree, dense_limit: int = DENSE_ENTRY_LIMIT) -> SummationMatrix:
    """Summation matrix of ``tree``: aggregates by level, then leaves in order."""
    leaves = tree.leaf_order
    leafset = set(leaves)
    aggregates = sorted(
        (v for v in tree.nodes if v not in leafset),
        key=lambda v: tree.level[v],
    )
    rows = list(aggregates) + list(leaves)
    row_idx = {v: i for i, v in enumerate(rows)}
    r, c = [], []
    for j, leaf in enumerate(leaves):
        for anc in tree.ancestors(leaf):
            r.append(row_idx[anc])
            c.append(j)
    mat = sparse.csr_matrix(
        (np.ones(len(r), dtype=np.int8), (r, c)), shape=(len(rows), len(leaves))
    )
    return SummationMatrix(
        _as_storage(mat, dense_limit),
        YLayout(tuple(rows)),
        tuple(leaves),
        tuple(tree.level[v] for v in rows),
    )


def temporal_summation(m: int, ks: Sequence[int], unit: str = "") -> SummationMatrix:
    """Stack ``I_{m/k} (x) 1_k^T`` for every block size ``k`` in ``ks``.

    Labels read ``"{k}{unit}_{j}"`` with ``j`` counted from 1 within a level.
    """
    ks = [int(k) for k in ks]
    if not ks:
        raise HierarchyError("ks must not be empty")
    bad = [k for k in ks if k <= 0 or m % k]
    if bad:
        raise HierarchyError(f"block sizes {bad} do not divide m={m}")
    if ks[0] != m or ks[-1] != 1:
        raise HierarchyError(f"ks must start at m={m} and end at 1, got {ks}")
    if any(a <= b for a, b in zip(ks, ks[1:])):
        raise HierarchyError(f"ks must be strictly descending, got {ks}")
    blocks = [np.kron(np.eye(m // k, dtype=np.int64), np.ones((1, k), dtype=np.int64)) for k in ks]
    labels, levels = [], []
    for lvl, k in enumerate(ks, start=1):
        labels += [f"{k}{unit}_{j}" for j in range(1, m // k + 1)]
        levels += [lvl] * (m // k)
    return SummationMatrix(
        np.vstack(blocks), YLayout(tuple(labels)), tuple(labels[-m:]), tuple(levels)
    )


def temporal_tree(m: int, ks: Sequence[int], unit: str = "") -> Tree:
    """Tree form of :func:`temporal_summation`; needs nested block sizes."""
    ks = [int(k) for k in ks]
    temporal_summation(m, ks, unit)  # validates
    if any(a % b for a, b in zip(ks, ks[1:])):
        raise HierarchyError(f"block sizes {ks} are not nested; no tree exists")
    if len(ks) == 1:
        return build_tree([], root=f"{ks[0]}{unit}_1")
    edges = []
    for hi, lo in zip(ks, ks[1:]):
        for j in range(1, m // lo + 1):
            edges.append((f"{hi}{unit}_{(j - 1) * lo // hi + 1}", f"{lo}{unit}_{j}"))
    return build_tree(edges, [f"1{unit}_{j}" for j in range(1, m + 1)])


def _check_len(vec: np.ndarray, expected: int, what: str) -> None:
    if vec.shape[-1] != expected:
        raise HierarchyError(f"{what} has length {vec.shape[-1]}, expected {expected}")


def aggregate(S: SummationMatrix, b) -> np.ndarray:
    """``y = S b``. ``b`` may also be ``(h, m)``, giving ``(h, n)``."""
    b = np.asarray(b, dtype=float)
    _check_len(b, S.m, "leaf vector")
    return np.asarray(S.matrix @ b.T).T


def bottom_extractor(S: SummationMatrix) -> np.ndarray:
    """``m x n`` selector of the leaf rows, so that ``G S = I_m``."""
    G = np.zeros((S.m, S.n), dtype=np.int64)
    G[np.arange(S.m), S.leaf_positions()] = 1
    if S.is_sparse:
        return sparse.csr_matrix(G)
    return G


def structural_vector(S: SummationMatrix) -> np.ndarray:
    """Number of leaves under each node (row sums of S)."""
    return np.asarray(S.matrix.sum(axis=1)).ravel().astype(float)


def coherency_residual(S: SummationMatrix, G, y) -> np.ndarray:
    """``y - S G y``; zero exactly when ``y`` is coherent."""
    y = np.asarray(y, dtype=float)
    _check_len(y, S.n, "forecast vector")
    leaves = np.asarray(G @ y.T).T
    return y - np.asarray(S.matrix @ leaves.T).T


def compose(
    S_A: SummationMatrix,
    S_B: SummationMatrix,
    layout_A: YLayout | None = None,
    layout_B: YLayout | None = None,
    cap: int = COMPOSE_ENTRY_CAP,
    dense_limit: int = DENSE_ENTRY_LIMIT,
) -> SummationMatrix:
    """Kronecker composition ``S_A (x) S_B`` with pair labels ``(a, b)``.

    The second factor varies fastest in rows and columns, matching
    ``vec(Y^T)`` with ``Y`` indexed ``[a, b]``.
    """
    layout_A = layout_A or S_A.layout
    layout_B = layout_B or S_B.layout
    if len(layout_A) != S_A.n or len(layout_B) != S_B.n:
        raise HierarchyError("layout length does not match matrix rows")
    n, m = S_A.n * S_B.n, S_A.m * S_B.m
    if n * m > cap:
        raise HierarchyError(f"composed matrix {n}x{m} exceeds the cap of {cap} entries")
    if n * m > dense_limit or S_A.is_sparse or S_B.is_sparse:
        mat = sparse.kron(sparse.csr_matrix(S_A.matrix), sparse.csr_matrix(S_B.matrix), format="csr")
    else:
        mat = np.kron(S_A.dense(), S_B.dense())
    labels = tuple((a, b) for a in layout_A for b in layout_B)
    leaves = tuple((a, b) for a in S_A.leaves for b in S_B.leaves)
    levels = tuple((ka, kb) for ka in S_A.levels for kb in S_B.levels)
    return SummationMatrix(_as_storage(mat, dense_limit), YLayout(labels), leaves, levels)


def layout_permutation(layout_AoB: YLayout, layout_BoA: YLayout) -> np.ndarray:
    """Permutation ``p`` with ``layout_AoB[i] == swap(layout_BoA[p[i]])``.

    Hence ``y_AoB = y_BoA[p]`` for the same underlying observations.
    """
    where = {(a, b): i for i, (b, a) in enumerate(layout_BoA)}
    if len(layout_AoB) != len(layout_BoA):
        raise HierarchyError("layouts differ in length")
    try:
        return np.array([where[lab] for lab in layout_AoB], dtype=int)
    except KeyError as exc:
        raise HierarchyError(f"label {exc.args[0]!r} missing from the swapped layout") from None


def leaf_permutation(S_AoB: SummationMatrix, S_BoA: SummationMatrix) -> np.ndarray:
    """Column analogue of :func:`layout_permutation`."""
    return layout_permutation(YLayout(S_AoB.leaves), YLayout(S_BoA.leaves))


def prune(S: SummationMatrix, drop: Iterable) -> SummationMatrix:
    """Remove the rows of the aggregate labels in ``drop``."""
    drop = set(drop)
    leafset = set(S.leaves)
    bad = drop & leafset
    if bad:
        raise HierarchyError(f"cannot drop leaves: {sorted(map(str, bad))}")
    unknown = drop - set(S.layout.labels)
    if unknown:
        raise HierarchyError(f"unknown labels: {sorted(map(str, unknown))}")
    keep = [i for i, lab in enumerate(S.layout.labels) if lab not in drop]
    mat = S.matrix[keep]
    return SummationMatrix(
        mat,
        YLayout(tuple(S.layout[i] for i in keep)),
        S.leaves,
        tuple(S.levels[i] for i in keep),
    )


# -- text serialization -------------------------------------------------------


def _fmt(label) -> str:
    text = str(label)
    if "\t" in text or "\n" in text:
        raise HierarchyError(f"label {label!r} contains a tab or newline")
    return text


def dump_tree(tree: Tree) -> str:
    lines = [f"#root:\t{_fmt(tree.root)}"]
    lines += [f"{_fmt(p)}\t{_fmt(c)}" for p, c in tree.edges()]
    lines.append("#leaves:\t" + "\t".join(_fmt(v) for v in tree.leaf_order))
    return "\n".join(lines) + "\n"


def _parse_tree_block(lines: list[str]) -> Tree:
    edges, leaves, root = [], None, None
    for raw in lines:
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#leaves:"):
            leaves = [x for x in line.split("\t")[1:] if x]
        elif line.startswith("#root:"):
            root = line.split("\t", 1)[1].strip()
        elif line.startswith("#"):
            continue
        else:
            parts = line.split("\t")
            if len(parts) != 2:
                raise HierarchyError(f"bad edge line {line!r}; expected parent<TAB>child")
            edges.append((parts[0], parts[1]))
    return build_tree(edges, leaves, root=root)


def loads_tree(text: str) -> Tree:
    return _parse_tree_block(text.splitlines())


def dump_composed(tree_A: Tree, tree_B: Tree, order: str = "SoT") -> str:
    """Both factors plus the composition order tag (``SoT`` or ``ToS``)."""
    if order not in ("SoT", "ToS"):
        raise HierarchyError(f"order must be 'SoT' or 'ToS', got {order!r}")
    return (
        f"#order:\t{order}\n#tree:\tA\n{dump_tree(tree_A)}#tree:\tB\n{dump_tree(tree_B)}"
    )


def loads_composed(text: str) -> tuple[Tree, Tree, str]:
    order, blocks, current = None, {}, None
    for line in text.splitlines():
        if line.startswith("#order:"):
            order = line.split("\t", 1)[1].strip()
        elif line.startswith("#tree:"):
            current = line.split("\t", 1)[1].strip()
            blocks[current] = []
        elif current is not None:
            blocks[current].append(line)
    if order not in ("SoT", "ToS") or set(blocks) != {"A", "B"}:
        raise HierarchyError("composed tree text needs an #order tag and trees A and B")
    return _parse_tree_block(blocks["A"]), _parse_tree_block(blocks["B"]), order
