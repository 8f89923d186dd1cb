import numpy as np
import pytest

from airwaytopo.phantom import PhantomSpec, generate_phantom
from airwaytopo.skeleton import (
    SkeletonError,
    SkeletonTree,
    branch_ownership,
    nearest_owner,
    parse_branches,
    propagate_labels,
    skeleton_length_inside,
    skeleton_mask,
    skeletonize,
)
from airwaytopo.volume import Volume, VolumeError

from shapes import tube, y_shape


def _is_tree(tree: SkeletonTree) -> bool:
    seen = set()
    for b in tree.branches:
        assert b.parent is None or b.parent < b.id  # BFS numbering
        seen.add(b.id)
    return len([b for b in tree.branches if b.parent is None]) == 1 and seen == set(range(len(tree.branches)))


def test_straight_tube_axis():
    v = tube(length=30, radius=3.0)
    tree = skeletonize(v)
    assert len(tree.branches) == 1
    vox = tree.branches[0].voxels
    # away from the flat end cap the centerline sits on the analytic axis (x = y = 7)
    body = vox[vox[:, 2] >= 3]
    assert np.abs(body[:, :2] - 7).max() <= 1
    # root is the deepest interior voxel in the top slab, not the border slice
    assert tree.root[:2] == (7, 7) and tree.root[2] >= 26
    assert tree.total_length_mm == pytest.approx(29.0, abs=2.0)
    assert tree.branches[0].mean_radius_mm == pytest.approx(3.0, abs=1.0)


def test_anisotropic_tube_length_in_mm():
    v = tube(length=20, radius=3.0, spacing=(1.0, 1.0, 2.0))
    tree = skeletonize(v)
    assert len(tree.branches) == 1
    assert tree.total_length_mm == pytest.approx(38.0, abs=4.0)


def test_y_shape_three_branches():
    tree = skeletonize(y_shape())
    assert len(tree.branches) == 3
    assert _is_tree(tree)
    root = tree.branch(tree.root_branch_id)
    assert root.generation == 0
    kids = tree.children(root.id)
    assert len(kids) == 2
    assert {tree.branch(k).generation for k in kids} == {1}
    assert sorted(tree.leaves()) == sorted(kids)
    # children start at the parent's last voxel
    for k in kids:
        np.testing.assert_array_equal(tree.branch(k).voxels[0], root.voxels[-1])
        assert len(tree.branch(k).own_voxels) == len(tree.branch(k).voxels) - 1


@pytest.mark.parametrize("generations,expected", [(1, 1), (4, 15), (6, 63)])
def test_phantom_topology_recovered(generations, expected):
    ph = generate_phantom(PhantomSpec(generations=generations, seed=3))
    tree = skeletonize(ph.gt_mask)
    assert len(tree.branches) == expected == len(ph.gt_tree.branches)
    assert _is_tree(tree)
    assert max(b.generation for b in tree.branches) == generations - 1


def test_root_hint():
    v = tube(length=20, radius=2.0)
    tree = skeletonize(v, root_hint=(6, 6, 0))
    assert tree.root == (6, 6, 0)
    with pytest.raises(SkeletonError):
        skeletonize(v, root_hint=(0, 0, 0))


def test_skeletonize_errors():
    with pytest.raises(SkeletonError):
        skeletonize(Volume(np.zeros((4, 4, 4), np.uint8)))


def test_single_voxel():
    m = np.zeros((3, 3, 3), np.uint8)
    m[1, 1, 1] = 1
    tree = skeletonize(Volume(m))
    assert len(tree.branches) == 1 and tree.total_length_mm == 0.0


def test_parse_straight_path_and_junction():
    s = np.zeros((12, 12, 3), np.uint8)
    s[1:11, 5, 1] = 1
    tree = parse_branches(Volume(s), (1, 5, 1))
    assert len(tree.branches) == 1
    assert tree.total_length_mm == pytest.approx(9.0)
    s[5, 6:11, 1] = 1
    tree = parse_branches(Volume(s), (1, 5, 1))
    assert len(tree.branches) == 3
    # the side arm attaches diagonally one voxel before the corner
    assert tree.total_length_mm == pytest.approx(9.0 + 4.0 + np.sqrt(2))
    assert tree.branch(0).voxels[-1].tolist() == [4, 5, 1]


def test_parse_two_wide_staircase_is_one_branch():
    s = np.zeros((10, 10, 3), np.uint8)
    for i in range(9):
        s[i, i, 1] = s[i + 1, i, 1] = 1
    tree = parse_branches(Volume(s), (0, 0, 1))
    assert len(tree.branches) == 1
    assert tree.branch(0).voxels[-1].tolist() in ([9, 8, 1], [8, 8, 1])


def test_parse_errors():
    s = np.zeros((6, 6, 6), np.uint8)
    with pytest.raises(SkeletonError):
        parse_branches(Volume(s), (0, 0, 0))
    s[0, 0, 0] = s[4, 4, 4] = 1
    with pytest.raises(SkeletonError, match="disconnected"):
        parse_branches(Volume(s), (0, 0, 0))
    with pytest.raises(SkeletonError, match="not a skeleton voxel"):
        parse_branches(Volume(s), (1, 1, 1))


def test_tree_round_trip(tmp_path, phantom4):
    tree = phantom4.gt_tree
    tree.save(tmp_path / "t.json")
    back = SkeletonTree.load(tmp_path / "t.json")
    assert back.to_dict() == tree.to_dict()


def test_nearest_owner_tie_goes_to_smaller_index():
    fg = np.zeros((3, 1, 1), bool)
    fg[1, 0, 0] = True
    pts = np.array([[2, 0, 0], [0, 0, 0]])
    _, owner = nearest_owner(fg, pts, (1, 1, 1))
    assert owner.tolist() == [0]
    _, owner = nearest_owner(fg, pts[::-1], (1, 1, 1))
    assert owner.tolist() == [0]


def test_propagate_partitions_mask(phantom4):
    tree = phantom4.gt_tree
    classes = {b.id: 1 + (b.id % 3) for b in tree.branches}
    lab = propagate_labels(tree, classes, phantom4.gt_mask)
    fg = phantom4.gt_mask.data.astype(bool)
    assert ((lab.data > 0) == fg).all()
    own = branch_ownership(tree, phantom4.gt_mask)
    assert ((own >= 0) == fg).all()
    expected = np.zeros_like(lab.data)
    expected[fg] = [classes[b] for b in own[fg]]
    np.testing.assert_array_equal(lab.data, expected)


def test_propagate_requires_every_class(phantom4):
    with pytest.raises(SkeletonError):
        propagate_labels(phantom4.gt_tree, {0: 1}, phantom4.gt_mask)


def test_length_inside(phantom4):
    tree = phantom4.gt_tree
    full = skeleton_length_inside(tree, phantom4.gt_mask)
    np.testing.assert_allclose(full, [b.length_mm for b in tree.branches])
    assert skeleton_length_inside(tree, np.zeros(phantom4.gt_mask.dims, bool)).sum() == 0
    with pytest.raises(VolumeError):
        skeleton_length_inside(tree, np.zeros((3, 3, 3), bool))
    assert skeleton_mask(tree).sum() == len(tree.nodes)
