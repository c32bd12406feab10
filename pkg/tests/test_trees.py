import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symvi.trees import (
    BINARY_NAMES,
    DEFAULT_OPERATORS,
    Binary,
    Feature,
    HardSkeleton,
    OperatorSet,
    Topology,
    Unary,
    canonicalize,
    design_matrix,
    eval_tree,
    eval_tree_columns,
    infix,
    prune,
    surviving_nodes,
)

OPS = DEFAULT_OPERATORS
OP_INDEX = {name: i for i, name in enumerate(OPS.members)}


def make_skeleton(topo, expand, op_names, feats):
    n = topo.n_nodes
    op = np.zeros(n, dtype=int)
    for zeta, name in op_names.items():
        op[zeta] = OP_INDEX[name]
    e = np.zeros(n, dtype=np.int8)
    for zeta in expand:
        e[zeta] = 1
    feat = np.zeros(n, dtype=int)
    for zeta, idx in feats.items():
        feat[zeta] = idx
    return HardSkeleton(expand=e, op=op, feat=feat)


def test_topology_heap_indexing():
    topo = Topology(3)
    assert topo.n_nodes == 15
    assert topo.n_internal == 7
    assert topo.left(0) == 1 and topo.right(0) == 2
    assert topo.node_depth(0) == 0
    assert topo.node_depth(6) == 2
    assert [topo.node_depth(z) for z in range(7)] == [0, 1, 1, 2, 2, 2, 2]
    assert list(topo.depths()[:3]) == [0, 1, 1]


def test_operator_set_validation():
    with pytest.raises(ValueError):
        OperatorSet(unary=("exp",), binary=("exp",))
    with pytest.raises(ValueError):
        OperatorSet(unary=("tan",), binary=())
    subset = OperatorSet.from_names(["add", "mul", "sin", "cos"])
    assert subset.unary == ("sin", "cos")
    assert subset.binary == ("add", "mul")


def test_prune_reproduces_expected_node_set():
    # depth-2 skeleton with a pruned left subtree: root and node 2 expand
    # with binary operators, node 1 stays a leaf, so nodes 3, 4 are dropped
    topo = Topology(2)
    skel = make_skeleton(
        topo,
        expand=[0, 2],
        op_names={0: "add", 2: "mul"},
        feats={1: 0, 5: 1, 6: 2},
    )
    tree = prune(skel, topo, OPS)
    assert surviving_nodes(tree) == {0, 1, 2, 5, 6}


def test_prune_all_leaves_gives_single_feature():
    topo = Topology(2)
    skel = make_skeleton(topo, expand=[], op_names={}, feats={0: 2})
    tree = prune(skel, topo, OPS)
    assert tree == Feature(2, 0)


def test_prune_unary_drops_right_subtree():
    topo = Topology(1)
    skel = make_skeleton(topo, expand=[0], op_names={0: "exp"}, feats={1: 0, 2: 1})
    tree = prune(skel, topo, OPS)
    assert isinstance(tree, Unary) and tree.op == "exp"
    assert tree.child == Feature(0, 1)
    assert eval_tree(tree, [0.0, 99.0]) == pytest.approx(1.0)
    assert 2 not in surviving_nodes(tree)


def test_eval_add():
    tree = Binary("add", Feature(0), Feature(1))
    assert eval_tree(tree, [1.0, 2.0]) == pytest.approx(3.0)


def test_eval_sim_polynomial_with_coefficients():
    trees = [
        Unary("sq", Feature(0)),
        Feature(1),
        Unary("sq", Feature(2)),
    ]
    x = np.array([[0.5, 2.5, 4.5]])
    t_matrix = design_matrix(trees, x)
    value = t_matrix[0] @ np.array([0.0, 1.0, -1.0, 0.5])
    assert value == pytest.approx(7.875)


def test_eval_raw_log_and_div_escape():
    tree = Unary("log", Feature(0))
    assert not np.isfinite(eval_tree(tree, [-1.0]))
    tree = Binary("div", Feature(0), Feature(1))
    assert not np.isfinite(eval_tree(tree, [1.0, 0.0]))


def test_eval_exp_clamp():
    tree = Unary("exp", Feature(0))
    assert eval_tree(tree, [1000.0]) == pytest.approx(math.exp(50.0))


def test_design_matrix_shapes_and_flag():
    x = np.array([[2.0], [3.0]])
    t0 = design_matrix([], x)
    assert t0.shape == (2, 1) and np.all(t0 == 1.0)
    t1 = design_matrix([Feature(0)], x)
    assert np.array_equal(t1, np.array([[1.0, 2.0], [1.0, 3.0]]))
    bad = design_matrix([Unary("log", Feature(0))], np.array([[-1.0]]))
    assert not np.all(np.isfinite(bad))


def test_canonicalize_examples():
    assert canonicalize(Binary("mul", Feature(1), Feature(0))) == "(mul x0 x1)"
    assert canonicalize(Binary("mul", Feature(0), Feature(0))) == "(sq x0)"
    assert canonicalize(Unary("exp", Feature(2))) == "(exp x2)"
    assert canonicalize(Binary("sub", Feature(1), Feature(0))) == "(sub x1 x0)"


def test_infix_rendering():
    tree = Binary("mul", Unary("sin", Feature(0)), Unary("sq", Feature(1)))
    assert infix(tree) == "(sin(x0) * (x1)^2)"
    assert infix(tree, ["a", "b"]) == "(sin(a) * (b)^2)"


@st.composite
def random_trees(draw, max_depth=3):
    if max_depth == 0 or draw(st.booleans()):
        return Feature(draw(st.integers(0, 2)))
    if draw(st.booleans()):
        return Unary(draw(st.sampled_from(OPS.unary)), draw(random_trees(max_depth=max_depth - 1)))
    return Binary(
        draw(st.sampled_from(BINARY_NAMES)),
        draw(random_trees(max_depth=max_depth - 1)),
        draw(random_trees(max_depth=max_depth - 1)),
    )


def swap_commutative(tree):
    if isinstance(tree, Feature):
        return tree
    if isinstance(tree, Unary):
        return Unary(tree.op, swap_commutative(tree.child))
    left = swap_commutative(tree.left)
    right = swap_commutative(tree.right)
    if tree.op in ("add", "mul"):
        return Binary(tree.op, right, left)
    return Binary(tree.op, left, right)


@given(random_trees())
@settings(max_examples=200, deadline=None)
def test_canonicalize_invariant_under_commutative_swaps(tree):
    assert canonicalize(tree) == canonicalize(swap_commutative(tree))


def reference_eval(tree, x):
    """Independent plain-recursion oracle for tree evaluation."""
    if isinstance(tree, Feature):
        return x[tree.index]
    if isinstance(tree, Unary):
        v = reference_eval(tree.child, x)
        return {
            "exp": lambda z: math.exp(min(z, 50.0)),
            "log": lambda z: math.log(z) if z > 0 else float("nan"),
            "sin": math.sin,
            "cos": math.cos,
            "sq": lambda z: z * z,
        }[tree.op](v)
    a = reference_eval(tree.left, x)
    b = reference_eval(tree.right, x)
    if tree.op == "div" and b == 0:
        return float("nan")
    return {"add": a + b, "mul": a * b, "sub": a - b, "div": a / b if b != 0 else float("nan")}[
        tree.op
    ]


def test_eval_matches_reference_on_random_pairs():
    rng = np.random.default_rng(2024)
    topo = Topology(3)
    checked = 0
    while checked < 1000:
        skel = HardSkeleton(
            expand=np.concatenate(
                [rng.integers(0, 2, topo.n_internal).astype(np.int8), np.zeros(8, dtype=np.int8)]
            ),
            op=rng.integers(0, OPS.size, topo.n_nodes),
            feat=rng.integers(0, 3, topo.n_nodes),
        )
        tree = prune(skel, topo, OPS)
        x = rng.uniform(0.2, 3.0, size=3)
        mine = eval_tree(tree, x)
        ref = reference_eval(tree, x)
        if not (np.isfinite(mine) and np.isfinite(ref)):
            assert np.isfinite(mine) == np.isfinite(ref)
            continue
        assert mine == pytest.approx(ref, abs=1e-12 * max(1.0, abs(ref)))
        checked += 1


def test_pruned_tree_never_reads_dropped_labels():
    # poison the labels of dropped nodes; evaluation must not change
    rng = np.random.default_rng(99)
    topo = Topology(3)
    for _ in range(50):
        expand = np.concatenate(
            [rng.integers(0, 2, topo.n_internal).astype(np.int8), np.zeros(8, dtype=np.int8)]
        )
        op = rng.integers(0, OPS.size, topo.n_nodes)
        feat = rng.integers(0, 3, topo.n_nodes)
        skel = HardSkeleton(expand.copy(), op.copy(), feat.copy())
        tree = prune(skel, topo, OPS)
        kept = surviving_nodes(tree)
        poisoned = HardSkeleton(expand.copy(), op.copy(), feat.copy())
        for zeta in range(topo.n_nodes):
            if zeta not in kept:
                poisoned.op[zeta] = (poisoned.op[zeta] + 1) % OPS.size
                poisoned.feat[zeta] = (poisoned.feat[zeta] + 1) % 3
        x = rng.uniform(0.5, 2.0, size=(5, 3))
        a = eval_tree_columns(tree, x)
        b = eval_tree_columns(prune(poisoned, topo, OPS), x)
        assert np.array_equal(a, b, equal_nan=True)


def test_full_binary_skeleton_reaches_max_depth():
    topo = Topology(3)
    skel = make_skeleton(
        topo,
        expand=list(range(topo.n_internal)),
        op_names={z: "add" for z in range(topo.n_internal)},
        feats={z: 0 for z in range(topo.n_nodes)},
    )
    tree = prune(skel, topo, OPS)

    def depth(node):
        if isinstance(node, Feature):
            return 0
        if isinstance(node, Unary):
            return 1 + depth(node.child)
        return 1 + max(depth(node.left), depth(node.right))

    assert depth(tree) == 3
