"""Hard symbolic trees: heap-ordered skeletons, pruning, evaluation, printing.

A skeleton is a full depth-D binary tree with per-node labels (expansion
bit, operator index, feature index).  Pruning turns it into a valid
expression tree: unexpanded nodes become feature leaves, unary operators
keep only their left child.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "OperatorSet",
    "DEFAULT_OPERATORS",
    "Topology",
    "HardSkeleton",
    "Feature",
    "Unary",
    "Binary",
    "SymbolicTree",
    "prune",
    "surviving_nodes",
    "eval_tree",
    "eval_tree_columns",
    "design_matrix",
    "canonicalize",
    "infix",
]

UNARY_NAMES = ("exp", "log", "sin", "cos", "sq")
BINARY_NAMES = ("add", "mul", "sub", "div")

# exp arguments are capped so one saturated mixture component cannot flood
# the soft gate with overflow; log and div stay raw by design.
EXP_ARG_MAX = 50.0


@dataclass(frozen=True)
class OperatorSet:
    unary: tuple[str, ...]
    binary: tuple[str, ...]

    def __post_init__(self):
        if set(self.unary) & set(self.binary):
            raise ValueError("unary and binary operator lists must be disjoint")
        unknown = (set(self.unary) - set(UNARY_NAMES)) | (set(self.binary) - set(BINARY_NAMES))
        if unknown:
            raise ValueError(f"unknown operators: {sorted(unknown)}")

    @property
    def members(self) -> tuple[str, ...]:
        """Combined operator order used for categorical indexing."""
        return self.unary + self.binary

    @property
    def size(self) -> int:
        return len(self.unary) + len(self.binary)

    def is_unary(self, op_index: int) -> bool:
        return op_index < len(self.unary)

    @classmethod
    def from_names(cls, names) -> "OperatorSet":
        names = tuple(names)
        return cls(
            unary=tuple(n for n in names if n in UNARY_NAMES),
            binary=tuple(n for n in names if n in BINARY_NAMES),
        )


DEFAULT_OPERATORS = OperatorSet(unary=("exp", "log", "sin", "cos", "sq"), binary=BINARY_NAMES)


@dataclass(frozen=True)
class Topology:
    """Heap-ordered full binary tree of maximum depth ``depth``."""

    depth: int

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.depth + 1) - 1

    @property
    def n_internal(self) -> int:
        """Nodes above maximum depth, the only ones that may expand."""
        return 2**self.depth - 1

    @staticmethod
    def left(zeta: int) -> int:
        return 2 * zeta + 1

    @staticmethod
    def right(zeta: int) -> int:
        return 2 * zeta + 2

    def node_depth(self, zeta: int) -> int:
        return int(math.floor(math.log2(zeta + 1)))

    def is_max_depth(self, zeta: int) -> bool:
        return zeta >= self.n_internal

    def depths(self) -> np.ndarray:
        return np.floor(np.log2(np.arange(self.n_nodes) + 1)).astype(int)


@dataclass
class HardSkeleton:
    """Per-node labels in heap order; expansion forced to 0 at maximum depth."""

    expand: np.ndarray  # (N,) 0/1
    op: np.ndarray  # (N,) indices into OperatorSet.members
    feat: np.ndarray  # (N,) feature indices

    def validate(self, topo: Topology, ops: OperatorSet, n_features: int):
        n = topo.n_nodes
        if not (len(self.expand) == len(self.op) == len(self.feat) == n):
            raise ValueError("skeleton arrays must have one entry per node")
        if np.any(self.expand[topo.n_internal :] != 0):
            raise ValueError("maximum-depth nodes must not expand")
        if np.any((self.op < 0) | (self.op >= ops.size)):
            raise ValueError("operator index out of range")
        if np.any((self.feat < 0) | (self.feat >= n_features)):
            raise ValueError("feature index out of range")


@dataclass(frozen=True)
class Feature:
    index: int
    zeta: int = -1


@dataclass(frozen=True)
class Unary:
    op: str
    child: "SymbolicTree"
    zeta: int = -1


@dataclass(frozen=True)
class Binary:
    op: str
    left: "SymbolicTree"
    right: "SymbolicTree"
    zeta: int = -1


SymbolicTree = Union[Feature, Unary, Binary]


def prune(skeleton: HardSkeleton, topo: Topology, ops: OperatorSet) -> SymbolicTree:
    """Deterministic pruning of a skeleton into a valid symbolic tree."""

    def build(zeta: int) -> SymbolicTree:
        if topo.is_max_depth(zeta) or skeleton.expand[zeta] == 0:
            return Feature(int(skeleton.feat[zeta]), zeta)
        op_index = int(skeleton.op[zeta])
        name = ops.members[op_index]
        left = build(topo.left(zeta))
        if ops.is_unary(op_index):
            return Unary(name, left, zeta)
        return Binary(name, left, build(topo.right(zeta)), zeta)

    return build(0)


def surviving_nodes(tree: SymbolicTree) -> set[int]:
    """Skeleton node ids retained by pruning (for structural checks)."""
    out: set[int] = set()

    def walk(node: SymbolicTree):
        out.add(node.zeta)
        if isinstance(node, Unary):
            walk(node.child)
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)

    walk(tree)
    return out


def _apply_unary(name: str, v):
    if name == "exp":
        return np.exp(np.minimum(v, EXP_ARG_MAX))
    if name == "log":
        return np.log(v)
    if name == "sin":
        return np.sin(v)
    if name == "cos":
        return np.cos(v)
    if name == "sq":
        return v * v
    raise ValueError(f"unknown unary operator {name!r}")


def _apply_binary(name: str, a, b):
    if name == "add":
        return a + b
    if name == "mul":
        return a * b
    if name == "sub":
        return a - b
    if name == "div":
        return a / b
    raise ValueError(f"unknown binary operator {name!r}")


def eval_tree_columns(tree: SymbolicTree, x_matrix: np.ndarray) -> np.ndarray:
    """Evaluate a tree on every row of an (n, p) matrix at once."""
    with np.errstate(all="ignore"):
        return _eval_rows(tree, x_matrix)


def _eval_rows(tree: SymbolicTree, x_matrix):
    if isinstance(tree, Feature):
        return x_matrix[:, tree.index]
    if isinstance(tree, Unary):
        return _apply_unary(tree.op, _eval_rows(tree.child, x_matrix))
    return _apply_binary(tree.op, _eval_rows(tree.left, x_matrix), _eval_rows(tree.right, x_matrix))


def eval_tree(tree: SymbolicTree, x) -> float:
    """Single-row evaluation; non-finite results are returned as-is."""
    return float(eval_tree_columns(tree, np.asarray(x, dtype=float)[None, :])[0])


def design_matrix(trees, x_matrix: np.ndarray) -> np.ndarray:
    """Intercept column of ones followed by one column per tree.

    Entries may be non-finite; callers decide whether to discard the
    candidate (np.isfinite(T).all() is the flag).
    """
    x_matrix = np.asarray(x_matrix, dtype=float)
    n = x_matrix.shape[0]
    cols = [np.ones(n)]
    cols.extend(eval_tree_columns(tree, x_matrix) for tree in trees)
    return np.column_stack(cols)


def canonicalize(tree: SymbolicTree) -> str:
    """Stable prefix-notation form.

    Commutative operands (add, mul) are sorted lexicographically and
    ``mul(t, t)`` collapses to ``sq(t)``; no deeper algebraic rewriting so
    recovery checks stay auditable.
    """
    if isinstance(tree, Feature):
        return f"x{tree.index}"
    if isinstance(tree, Unary):
        return f"({tree.op} {canonicalize(tree.child)})"
    left = canonicalize(tree.left)
    right = canonicalize(tree.right)
    if tree.op == "mul" and left == right:
        return f"(sq {left})"
    if tree.op in ("add", "mul") and right < left:
        left, right = right, left
    return f"({tree.op} {left} {right})"


_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/"}


def infix(tree: SymbolicTree, feature_names=None) -> str:
    """Human-readable rendering used in reports."""
    if isinstance(tree, Feature):
        return feature_names[tree.index] if feature_names else f"x{tree.index}"
    if isinstance(tree, Unary):
        inner = infix(tree.child, feature_names)
        return f"({inner})^2" if tree.op == "sq" else f"{tree.op}({inner})"
    left = infix(tree.left, feature_names)
    right = infix(tree.right, feature_names)
    return f"({left} {_INFIX[tree.op]} {right})"
