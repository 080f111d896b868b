"""Group structures: partitions, overlapping spatial families, trees, and powerset DAGs.

A group structure is a family of index sets over ``{0..p-1}`` together with a
positive weight per group and the inner-norm exponent ``q``.  The generators
below produce the families whose unions-of-groups zero patterns carve out
contiguous intervals, axis-aligned rectangles, rooted subtrees, and
subset-closed selections.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ValidationError

Q_L2 = 2.0
Q_LINF = math.inf

_KINDS = ("partition", "overlap", "tree", "dag")


def default_group_weights(groups, q, power=None):
    """Default weight scheme d_g = |g| ** power.

    ``power`` defaults to 1/2 for q=2 and 1 for q=inf; pass an explicit value
    (including 0 for unit weights) to override.
    """
    if power is None:
        power = 0.5 if q == Q_L2 else 1.0
    return np.array([float(len(g)) ** power for g in groups])


@dataclass(frozen=True)
class TreeStructure:
    """Parent-pointer encoding of a tree or forest; -1 marks a root."""

    parent: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "parent", tuple(int(v) for v in self.parent))
        p = len(self.parent)
        if p == 0:
            raise ValidationError("tree must have at least one node")
        roots = 0
        for i, par in enumerate(self.parent):
            if par == -1:
                roots += 1
            elif not 0 <= par < p:
                raise ValidationError(f"node {i} has parent {par} outside [0, {p})")
            elif par == i:
                raise ValidationError(f"node {i} is its own parent")
        if roots == 0:
            raise ValidationError("no root: every node has a parent (cycle)")
        # walk each node to a root; revisiting a node on the current walk is a cycle
        state = [0] * p  # 0 unseen, 1 on stack, 2 done
        for i in range(p):
            path = []
            j = i
            while state[j] == 0:
                state[j] = 1
                path.append(j)
                if self.parent[j] == -1:
                    break
                j = self.parent[j]
                if state[j] == 1:
                    raise ValidationError(f"cycle detected through node {j}")
            for k in path:
                state[k] = 2

    @property
    def p(self) -> int:
        return len(self.parent)

    def roots(self) -> list[int]:
        return [i for i, par in enumerate(self.parent) if par == -1]

    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.p)]
        for i, par in enumerate(self.parent):
            if par != -1:
                out[par].append(i)
        return out

    def descendants(self, node: int) -> list[int]:
        """Node plus everything below it, in preorder."""
        kids = self.children()
        out, stack = [], [node]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(reversed(kids[j]))
        return out

    def depths(self) -> list[int]:
        d = [0] * self.p
        for i in range(self.p):
            j, depth = i, 0
            while self.parent[j] != -1:
                j = self.parent[j]
                depth += 1
            d[i] = depth
        return d


@dataclass(frozen=True)
class GridShape:
    """rows x cols grid of variables, row-major indexing."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"grid shape must be positive, got {self.rows}x{self.cols}")

    @property
    def p(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col


@dataclass(frozen=True)
class GroupStructure:
    """A weighted family of index groups with inner exponent q in {2, inf}."""

    p: int
    groups: tuple[tuple[int, ...], ...]
    weights: np.ndarray
    q: float
    kind: str
    tree: TreeStructure | None = None

    def __post_init__(self):
        if self.p < 1:
            raise ValidationError("dimension p must be >= 1 (empty-dimension)")
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown structure kind {self.kind!r}")
        if self.q not in (Q_L2, Q_LINF):
            raise ValidationError(f"inner exponent q must be 2 or inf, got {self.q}")
        norm_groups = tuple(tuple(sorted(int(j) for j in g)) for g in self.groups)
        object.__setattr__(self, "groups", norm_groups)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.shape != (len(norm_groups),):
            raise ValidationError(
                f"expected {len(norm_groups)} weights, got shape {w.shape}"
            )
        if len(norm_groups) and not np.all(w > 0):
            bad = int(np.flatnonzero(~(w > 0))[0])
            raise ValidationError(f"weight of group {bad} is not strictly positive")
        seen_any = False
        for gi, g in enumerate(norm_groups):
            if not g:
                raise ValidationError(f"group {gi} is empty")
            if len(set(g)) != len(g):
                raise ValidationError(f"group {gi} has repeated indices")
            if g[0] < 0 or g[-1] >= self.p:
                bad = g[0] if g[0] < 0 else g[-1]
                raise ValidationError(f"group {gi} contains index {bad} outside [0, {self.p})")
            seen_any = True
        if self.kind == "partition":
            counts = np.zeros(self.p, dtype=int)
            for g in norm_groups:
                for j in g:
                    counts[j] += 1
            if np.any(counts > 1):
                dup = int(np.flatnonzero(counts > 1)[0])
                raise ValidationError(f"index {dup} duplicated across partition blocks")
            if np.any(counts == 0):
                miss = int(np.flatnonzero(counts == 0)[0])
                raise ValidationError(f"index {miss} missing from partition blocks")
        if self.kind == "tree":
            if self.tree is None:
                raise ValidationError("tree kind requires the tree field")
            expected = {tuple(sorted(self.tree.descendants(v))) for v in range(self.tree.p)}
            if set(norm_groups) != expected:
                raise ValidationError("groups do not match node-plus-descendants of the tree")
        del seen_any

    def __len__(self) -> int:
        return len(self.groups)

    def member_arrays(self) -> list[np.ndarray]:
        return [np.array(g, dtype=np.intp) for g in self.groups]

    def covers(self) -> np.ndarray:
        """Boolean mask of coordinates covered by at least one group."""
        mask = np.zeros(self.p, dtype=bool)
        for g in self.groups:
            mask[list(g)] = True
        return mask

    def is_disjoint(self) -> bool:
        total = sum(len(g) for g in self.groups)
        union = set()
        for g in self.groups:
            union.update(g)
        return total == len(union)


@dataclass(frozen=True)
class CoefficientWeights:
    """Optional per-coefficient positive multipliers inside each group."""

    per_group: tuple[np.ndarray, ...] = field(default_factory=tuple)

    def __post_init__(self):
        arrs = tuple(np.asarray(a, dtype=float) for a in self.per_group)
        object.__setattr__(self, "per_group", arrs)
        for gi, a in enumerate(arrs):
            if a.ndim != 1 or not np.all(a > 0):
                raise ValidationError(f"coefficient weights of group {gi} must be positive 1-d")

    def validate_against(self, structure: GroupStructure) -> None:
        if len(self.per_group) != len(structure.groups):
            raise ValidationError(
                f"expected {len(structure.groups)} weight vectors, got {len(self.per_group)}"
            )
        for gi, (a, g) in enumerate(zip(self.per_group, structure.groups)):
            if len(a) != len(g):
                raise ValidationError(
                    f"group {gi} has {len(g)} members but {len(a)} coefficient weights"
                )


def uniform_coefficient_weights(structure: GroupStructure) -> CoefficientWeights:
    return CoefficientWeights(tuple(np.ones(len(g)) for g in structure.groups))


def make_partition(p, blocks, q=Q_L2, weight_power=None) -> GroupStructure:
    """Disjoint groups covering {0..p-1}."""
    groups = tuple(tuple(sorted(int(j) for j in b)) for b in blocks)
    counts = np.zeros(p, dtype=int)
    for g in groups:
        for j in g:
            if not 0 <= j < p:
                raise ValidationError(f"index {j} outside [0, {p})")
            counts[j] += 1
    if np.any(counts > 1):
        dup = int(np.flatnonzero(counts > 1)[0])
        raise ValidationError(f"index {dup} duplicated across blocks")
    if np.any(counts == 0):
        miss = int(np.flatnonzero(counts == 0)[0])
        raise ValidationError(f"index {miss} missing from blocks")
    weights = default_group_weights(groups, q, weight_power)
    return GroupStructure(p=p, groups=groups, weights=weights, q=q, kind="partition")


def make_intervals(p, q=Q_L2, weight_power=None) -> GroupStructure:
    """Prefix and suffix groups whose union-complements are contiguous intervals.

    For p >= 2 the family has 2p - 2 members: prefixes {0..k} for k < p-1 and
    suffixes {k..p-1} for k > 0.  The full index set is never a group.  p = 1
    yields an empty family (every pattern allowed).
    """
    if p < 1:
        raise ValidationError("dimension p must be >= 1 (empty-dimension)")
    groups = []
    for k in range(p - 1):
        groups.append(tuple(range(0, k + 1)))
    for k in range(1, p):
        groups.append(tuple(range(k, p)))
    groups = tuple(groups)
    weights = default_group_weights(groups, q, weight_power)
    return GroupStructure(p=p, groups=groups, weights=weights, q=q, kind="overlap")


def make_rectangles(shape: GridShape, with_diagonals=False, q=Q_L2, weight_power=None) -> GroupStructure:
    """Half-plane groups on a grid; union-complements are axis-aligned rectangles.

    Proper row and column prefix/suffix bands give 2(rows-1) + 2(cols-1)
    groups.  With ``with_diagonals``, bands of constant (row+col) and
    (row-col) are added in both directions so diamond-like convex patterns
    become reachable.
    """
    rows, cols = shape.rows, shape.cols
    groups: list[tuple[int, ...]] = []

    def band(pred):
        cells = tuple(
            shape.index(r, c) for r in range(rows) for c in range(cols) if pred(r, c)
        )
        if 0 < len(cells) < shape.p:
            groups.append(cells)

    for k in range(rows):
        band(lambda r, c, k=k: r <= k)
        band(lambda r, c, k=k: r >= k)
    for k in range(cols):
        band(lambda r, c, k=k: c <= k)
        band(lambda r, c, k=k: c >= k)
    if with_diagonals:
        for k in range(rows + cols - 1):
            band(lambda r, c, k=k: r + c <= k)
            band(lambda r, c, k=k: r + c >= k)
        for k in range(-(cols - 1), rows):
            band(lambda r, c, k=k: r - c <= k)
            band(lambda r, c, k=k: r - c >= k)
    uniq = tuple(dict.fromkeys(groups))
    weights = default_group_weights(uniq, q, weight_power)
    return GroupStructure(p=shape.p, groups=uniq, weights=weights, q=q, kind="overlap")


def make_tree_groups(tree: TreeStructure, q=Q_L2, weight_power=None) -> GroupStructure:
    """One group per node: the node together with all of its descendants.

    Zero patterns of the induced norm are unions of such subtrees, so
    surviving supports are rooted connected subtrees (per root, for forests).
    """
    groups = tuple(tuple(sorted(tree.descendants(v))) for v in range(tree.p))
    weights = default_group_weights(groups, q, weight_power)
    return GroupStructure(
        p=tree.p, groups=groups, weights=weights, q=q, kind="tree", tree=tree
    )


MAX_POWERSET_P = 16


def powerset_nodes(p, max_order) -> tuple[tuple[int, ...], ...]:
    """All subsets of {0..p-1} with size <= max_order, ordered by (size, lex)."""
    nodes: list[tuple[int, ...]] = []
    for size in range(max_order + 1):
        nodes.extend(itertools.combinations(range(p), size))
    return tuple(nodes)


def make_powerset_dag(p, max_order, weight_power=0.0) -> GroupStructure:
    """Descendant groups on the powerset DAG of {0..p-1}, truncated at max_order.

    The returned structure lives on node indices (one variable per subset);
    group(J) collects every node H with H >= J.  Weights default to 1 for all
    groups; pass ``weight_power`` to scale by group size instead.
    """
    if p > MAX_POWERSET_P:
        raise CapacityError(f"powerset DAG limited to p <= {MAX_POWERSET_P}, got {p}")
    if not 0 <= max_order <= p:
        raise CapacityError(f"max_order must be in [0, {p}], got {max_order}")
    nodes = powerset_nodes(p, max_order)
    index = {J: i for i, J in enumerate(nodes)}
    groups = []
    for J in nodes:
        sj = set(J)
        members = tuple(index[H] for H in nodes if sj.issubset(H))
        groups.append(members)
    groups = tuple(groups)
    weights = default_group_weights(groups, Q_L2, weight_power)
    return GroupStructure(
        p=len(nodes), groups=groups, weights=weights, q=Q_L2, kind="dag"
    )
