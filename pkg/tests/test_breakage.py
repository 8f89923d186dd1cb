import json

import numpy as np
import pytest

from airwaytopo.breakage import (
    PATCH_SIZE,
    ConnectorPatchRequest,
    breakage_attention,
    connect_breakages,
    connect_geometric,
    crop_patch,
    naive_second_nearest,
    refine_pseudo_label,
    refine_with_details,
    sample_patches,
    second_nearest_distance,
    simulate_breakage,
)
from airwaytopo.skeleton import branch_ownership
from airwaytopo.volume import Volume, connected_components, largest_component

from oracles import flood_fill_labels, second_min_component_distance
from shapes import tube


def _gapped_tube(gap=(18, 22), length=40, radius=2.5):
    full = tube(length=length, radius=radius)
    broken = full.data.copy()
    broken[:, :, gap[0]:gap[1]] = 0
    ct = full.like(np.where(full.data > 0, -1000, -100).astype(np.int16))
    return full, full.like(broken), ct


# --------------------------------------------------------------- attention

@pytest.mark.parametrize("seed", range(6))
def test_fast_second_nearest_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((9, 8, 7)) < 0.06
    labels, n = flood_fill_labels(m)
    spacing = (1.0, 0.8, 1.6)
    fast = second_nearest_distance(labels, n, spacing)
    if n >= 2:
        np.testing.assert_allclose(fast, second_min_component_distance(labels, n, spacing), atol=1e-9)
        np.testing.assert_allclose(fast, naive_second_nearest(labels, n, spacing), atol=1e-9)


def test_midpoint_is_one_half():
    m = np.zeros((11, 3, 3), np.uint8)
    m[0, 1, 1] = m[10, 1, 1] = 1
    att = breakage_attention(Volume(m), gamma_mm=5.0)
    assert att.raw.data[5, 1, 1] == pytest.approx(5.0, abs=1e-6)
    assert att.normalized.data[5, 1, 1] == pytest.approx(0.5, abs=1e-6)
    assert att.breakage_centers == [(5, 1, 1)]


def test_sigmoid_offset():
    m = np.zeros((17, 3, 3), np.uint8)
    m[0, 1, 1] = m[16, 1, 1] = 1
    att = breakage_attention(Volume(m), gamma_mm=5.0)
    # at x = 8 both components are 8 mm away
    assert att.normalized.data[8, 1, 1] == pytest.approx(1.0 / (1.0 + np.exp(3.0)), abs=1e-6)
    assert att.breakage_centers == []


def test_single_component_has_no_centers():
    att = breakage_attention(tube(length=10))
    assert att.n_components == 1 and att.breakage_centers == []
    assert att.normalized.data.max() < 1e-6
    with pytest.raises(ValueError):
        breakage_attention(Volume(np.zeros((3, 3, 3), np.uint8)))


def test_gap_center_lies_in_the_gap():
    _, broken, _ = _gapped_tube()
    att = breakage_attention(broken)
    assert len(att.breakage_centers) >= 1
    assert all(17 <= c[2] <= 22 for c in att.breakage_centers)


# ----------------------------------------------------------------- patches

def test_crop_patch_pads_outside():
    arr = np.arange(27).reshape(3, 3, 3)
    out = crop_patch(arr, (-1, -1, -1), 4, -5)
    assert out[0, 0, 0] == -5
    np.testing.assert_array_equal(out[1:, 1:, 1:], arr)
    assert (crop_patch(arr, (10, 0, 0), 2, 9) == 9).all()


def test_patches_centered_on_breakages():
    _, broken, ct = _gapped_tube()
    att = breakage_attention(broken)
    reqs = sample_patches(att, ct, broken, jitter_vox=0)
    assert len(reqs) == len(att.breakage_centers)
    for req, c in zip(reqs, att.breakage_centers):
        assert req.patch_origin == tuple(v - PATCH_SIZE // 2 for v in c)
        assert req.ct_patch.dims == (PATCH_SIZE,) * 3
        local = tuple(np.asarray(c) - np.asarray(req.patch_origin))
        assert req.attention_patch.data[local] == att.normalized.data[c]
        assert req.ct_patch.data[0, 0, 0] == -1024  # padded corner
    jittered = sample_patches(att, ct, broken, jitter_vox=4, seed=1)
    for req, c in zip(jittered, att.breakage_centers):
        assert np.abs(np.asarray(req.patch_origin) + PATCH_SIZE // 2 - c).max() <= 4


# --------------------------------------------------------------- connector

def test_connector_bridges_gap():
    full, broken, ct = _gapped_tube()
    fill, att, n = connect_breakages(broken, ct)
    assert n >= 1
    merged = broken.data.astype(bool) | fill
    assert connected_components(merged).count == 1
    assert not (fill & broken.data.astype(bool)).any()
    # the bridge stays near the lumen
    assert (fill & ~full.data.astype(bool)).sum() <= 0.25 * fill.sum()


def test_connector_without_two_components_is_empty():
    v = tube(length=10)
    req = ConnectorPatchRequest(v, v.like(np.zeros(v.dims, np.float32)), v, (0, 0, 0))
    assert not connect_geometric(req).any()


def test_connect_threads_do_not_matter():
    _, broken, ct = _gapped_tube()
    a, _, _ = connect_breakages(broken, ct, threads=1)
    b, _, _ = connect_breakages(broken, ct, threads=3)
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------ refine

def test_refine_fixed_point(phantom4):
    out = refine_pseudo_label(phantom4.gt_mask, phantom4.gt_mask, phantom4.ct)
    np.testing.assert_array_equal(out.data, phantom4.gt_mask.data)


def test_refine_drops_far_island_and_keeps_attached_blob():
    t = tube(length=40, radius=2.5).data
    full = Volume(np.pad(t, ((12, 0), (0, 0), (0, 0))))
    ct = full.like(np.where(full.data > 0, -1000, -100).astype(np.int16))
    pred = full.data.copy()
    pred[0, 0, 0] = 1  # island beyond gamma of the tube: never bridged
    pred[19, 10, 10] = 1  # touches the tube wall
    out = refine_pseudo_label(full.like(pred), full, ct)
    assert out.data[0, 0, 0] == 0 and out.data[19, 10, 10] == 1
    assert (out.data >= full.data).all()
    assert connected_components(out.data).count == 1


def test_refine_bridges_broken_reference():
    full, broken, ct = _gapped_tube()
    r = refine_with_details(broken, broken, ct)
    assert r.n_patches >= 1
    assert (r.mask.data >= broken.data).all()
    assert connected_components(r.mask.data).count == 1


def test_refine_empty_warns():
    z = Volume(np.zeros((4, 4, 4), np.uint8))
    with pytest.warns(UserWarning):
        out = refine_pseudo_label(z, z, z.like(np.zeros((4, 4, 4), np.int16)))
    assert not out.data.any()


# -------------------------------------------------------------- simulation

def test_simulation_contract(phantom6):
    tree = phantom6.gt_tree
    s = simulate_breakage(phantom6.gt_mask, seed=11, tree=tree)
    fg = phantom6.gt_mask.data.astype(bool)
    broken, gt = s.broken_mask.data.astype(bool), s.breakage_gt.data.astype(bool)
    assert ((broken | gt) == fg).all() and not (broken & gt).any()
    assert len(s.removed_branches) == int(np.ceil(0.5 * len(tree.leaves())))
    leaves = set(tree.leaves())
    owner = branch_ownership(tree, phantom6.gt_mask)
    for r in s.removed_branches:
        assert r.branch_id in leaves
        assert 0.10 <= r.removed_fraction <= 0.30
        assert r.start + r.n_removed < r.n_branch_voxels  # tip kept
        assert (gt & (owner == r.branch_id)).any()
    assert set(np.unique(owner[gt])) <= {r.branch_id for r in s.removed_branches}


def test_simulation_is_seeded(phantom4, tmp_path):
    a = simulate_breakage(phantom4.gt_mask, seed=5, tree=phantom4.gt_tree)
    b = simulate_breakage(phantom4.gt_mask, seed=5, tree=phantom4.gt_tree)
    c = simulate_breakage(phantom4.gt_mask, seed=6, tree=phantom4.gt_tree)
    assert a.manifest() == b.manifest()
    assert a.broken_mask == b.broken_mask
    assert a.manifest() != c.manifest()
    a.save(tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 5
    assert (tmp_path / "broken.mhd").exists() and (tmp_path / "breakage_gt.mhd").exists()


def test_simulation_validation(phantom4):
    with pytest.raises(ValueError):
        simulate_breakage(phantom4.gt_mask, removal_range=(0.3, 0.1))
    with pytest.raises(ValueError):
        simulate_breakage(phantom4.gt_mask, branch_fraction=1.5)
    with pytest.raises(ValueError):
        simulate_breakage(tube(length=10))
    s = simulate_breakage(phantom4.gt_mask, branch_fraction=0.0, tree=phantom4.gt_tree)
    assert s.removed_branches == [] and not s.breakage_gt.data.any()
