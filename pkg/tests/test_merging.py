import numpy as np
import pytest

from zeroguide.encoders import PatchFeatures
from zeroguide.labeling import LabeledSegment, TextLabel
from zeroguide.merging import FrontierMismatch, merge_up_tree, score_pair
from zeroguide.oversegmentation import replay_history


def label(text, joint):
    return TextLabel(text=text, joint=np.asarray(joint, float), sentence=np.zeros(0), decoder="test", score=1.0)


def seg(node, mask, emb, text, joint):
    return LabeledSegment(node_id=node, mask=mask, embedding=np.asarray(emb, float), label=label(text, joint))


def column_masks(n, width=1):
    out = []
    for k in range(n):
        m = np.zeros((2, n * width), dtype=bool)
        m[:, k * width:(k + 1) * width] = True
        out.append(m)
    return out


def test_score_pair_examples():
    m = column_masks(2)
    a = seg(0, m[0], [1, 0], "cat", [0, 1])
    assert score_pair(a, seg(1, m[1], [1, 0], "cat", [0, 1])).combined == pytest.approx(1.0)
    b = seg(1, m[1], [0, 1], "cat", [0, 1])
    d = score_pair(a, b)
    assert (d.visual, d.text, d.combined) == pytest.approx((0.0, 1.0, 0.5))
    assert not d.merged


def test_score_pair_arithmetic_mean():
    m = column_masks(2)
    # visual cos 0.9, text cos 0.7
    a = seg(0, m[0], [1, 0], "x", [1, 0])
    b = seg(1, m[1], [0.9, np.sqrt(1 - 0.81)], "y", [0.7, np.sqrt(1 - 0.49)])
    d = score_pair(a, b, 0.8)
    assert d.visual == pytest.approx(0.9) and d.text == pytest.approx(0.7)
    assert d.combined == pytest.approx(0.8) and d.merged


def test_score_pair_requires_embeddings():
    m = column_masks(2)
    with pytest.raises(ValueError):
        score_pair(LabeledSegment(0, m[0], None, label("a", [1])), seg(1, m[1], [1], "b", [1]))


def four_leaf_tree():
    # ((0, 1) -> 4, 2) -> 5, 3) -> 6
    x = np.eye(4)
    return replay_history(PatchFeatures((1, 4), x), [(0, 1, 4), (4, 2, 5), (5, 3, 6)], [0, 1, 2, 3])


def never(mask):
    raise AssertionError("no merge expected")


def test_all_below_threshold_is_noop():
    m = column_masks(4)
    segs = [seg(i, m[i], np.eye(4)[i], f"s{i}", np.eye(4)[i]) for i in range(4)]
    out = merge_up_tree(four_leaf_tree(), segs, 0.8, never)
    assert [s.node_id for s in out] == [0, 1, 2, 3]


def test_identical_siblings_merge_to_exact_union():
    x = np.eye(2)
    tree = replay_history(PatchFeatures((1, 2), x), [(0, 1, 2)], [0, 1])
    m = column_masks(2)
    segs = [seg(0, m[0], [1, 0], "cat", [1, 0]), seg(1, m[1], [1, 0], "cat", [1, 0])]
    calls = []

    def relabel(mask):
        calls.append(mask.copy())
        return np.array([1.0, 0.0]), label("cat", [1, 0])

    out = merge_up_tree(tree, segs, 0.8, relabel)
    assert len(out) == 1 and out[0].node_id == 2
    np.testing.assert_array_equal(out[0].mask, m[0] | m[1])
    assert len(calls) == 1


def test_cascade_matches_hand_simulation():
    """Hand simulation:
    (0,1): visual 1.0, text 1.0 -> 1.0 >= 0.8, merge into node 4, relabel gives e4 = [1, 1, 0, 0]/sqrt2
    (4,2): leaf 2 = [1, 1, 0.2, 0] -> visual ~0.990, text "red" vs "red" = 1 -> merge into node 5
    (5,3): leaf 3 orthogonal, text orthogonal -> 0.0 < 0.8, stop
    Final segments: node 3 and node 5.
    """
    m = column_masks(4)
    segs = [
        seg(0, m[0], [1, 1, 0, 0], "red", [1, 0]),
        seg(1, m[1], [1, 1, 0, 0], "red", [1, 0]),
        seg(2, m[2], [1, 1, 0.2, 0], "red", [1, 0]),
        seg(3, m[3], [0, 0, 0, 1], "blue", [0, 1]),
    ]

    def relabel(mask):
        cols = tuple(np.flatnonzero(mask[0]))
        emb = {(0, 1): [1, 1, 0, 0], (0, 1, 2): [1, 1, 0.1, 0]}[cols]
        return np.asarray(emb, float), label("red", [1, 0])

    decisions = []
    out = merge_up_tree(four_leaf_tree(), segs, 0.8, relabel, decisions)
    assert [s.node_id for s in out] == [3, 5]
    np.testing.assert_array_equal(out[1].mask, m[0] | m[1] | m[2])
    assert [(d.a, d.b, d.merged) for d in decisions] == [(0, 1, True), (4, 2, True), (5, 3, False)]
    assert decisions[1].visual == pytest.approx(2 / np.sqrt(2) / np.sqrt(2.04), abs=1e-9)


def test_frontier_mismatch():
    m = column_masks(4)
    with pytest.raises(FrontierMismatch):
        merge_up_tree(four_leaf_tree(), [seg(4, m[0], [1], "a", [1])], 0.8, never)
    with pytest.raises(FrontierMismatch):
        merge_up_tree(four_leaf_tree(), [seg(0, m[0], [1], "a", [1]), seg(0, m[1], [1], "a", [1])], 0.8, never)


def test_missing_leaf_is_bridged_by_its_sibling():
    m = column_masks(4)
    segs = [seg(0, m[0] | m[1], [1, 0], "a", [1, 0]), seg(2, m[2], [1, 0], "a", [1, 0]),
            seg(3, m[3], [0, 1], "b", [0, 1])]
    relabels = []

    def relabel(mask):
        relabels.append(tuple(np.flatnonzero(mask[0])))
        return np.array([1.0, 0.0]), label("a", [1, 0])

    out = merge_up_tree(four_leaf_tree(), segs, 0.8, relabel)
    # leaf 1 absent: leaf 0 stands in for node 4, then merges with leaf 2
    assert [s.node_id for s in out] == [3, 5]
    assert relabels == [(0, 1, 2)]


def test_promoted_but_unmerged_segment_keeps_its_id():
    m = column_masks(4)
    # leaf 1 dropped: leaf 0 is lifted to node 4 internally, then fails to merge with leaf 2
    segs = [seg(0, m[0] | m[1], [1, 0], "a", [1, 0]), seg(2, m[2], [0, 1], "b", [0, 1]),
            seg(3, m[3], [0, 1], "b", [0, 1])]
    out = merge_up_tree(four_leaf_tree(), segs, 0.8, never)
    assert [s.node_id for s in out] == [0, 2, 3]
    assert [s.node_id for s in merge_up_tree(four_leaf_tree(), segs, 1.01, never)] == [0, 2, 3]
