import numpy as np
import pytest

from airwaytopo.losses import ProbVolume
from airwaytopo.metrics import evaluate
from airwaytopo.phantom import PhantomSpec, generate_phantom
from airwaytopo.segmenter import (
    ClassicalSegmenter,
    DegenerateLabelsError,
    GaussianSnapshot,
    binarize,
    segment,
    voxel_features,
)
from airwaytopo.volume import Volume


@pytest.fixture(scope="module")
def clean():
    return generate_phantom(PhantomSpec(generations=4, noise_sigma_hu=0.0, seed=2))


@pytest.fixture(scope="module")
def trained(phantom4):
    seg = ClassicalSegmenter(seed=0)
    return seg, seg.train([(phantom4.ct, phantom4.gt_mask)])


def test_features_shape(phantom4):
    f = voxel_features(phantom4.ct)
    assert f.shape == (int(np.prod(phantom4.ct.dims)), 3)
    assert np.isfinite(f).all()


def test_single_class_labels_rejected(phantom4):
    seg = ClassicalSegmenter()
    empty = phantom4.gt_mask.like(np.zeros(phantom4.gt_mask.dims, np.uint8))
    with pytest.raises(DegenerateLabelsError):
        seg.train([(phantom4.ct, empty)])
    full = phantom4.gt_mask.like(np.ones(phantom4.gt_mask.dims, np.uint8))
    with pytest.raises(DegenerateLabelsError):
        seg.train([(phantom4.ct, full)])
    with pytest.raises(ValueError):
        seg.train([])


def test_probabilities_are_normalized(trained, phantom4):
    seg, snap = trained
    prob = seg.predict(phantom4.ct, snap)
    assert prob.n_classes == 4
    np.testing.assert_allclose(prob.probs.sum(axis=0), 1.0, atol=1e-9)


def test_training_is_deterministic(phantom4, trained):
    _, snap = trained
    again = ClassicalSegmenter(seed=0).train([(phantom4.ct, phantom4.gt_mask)])
    assert again.id == snap.id


def test_warm_start_increments_iteration(phantom4, trained):
    seg, snap = trained
    nxt = seg.train([(phantom4.ct, phantom4.gt_mask)], init=snap)
    assert nxt.iteration == 2
    assert nxt.means.shape == snap.means.shape


def test_snapshot_round_trip(tmp_path, trained):
    _, snap = trained
    snap.save(tmp_path / "s.json")
    back = GaussianSnapshot.load(tmp_path / "s.json")
    assert back.id == snap.id
    np.testing.assert_array_equal(back.covs, snap.covs)


def test_binary_mode(phantom4):
    seg = ClassicalSegmenter(multiclass=False)
    snap = seg.train([(phantom4.ct, phantom4.gt_mask)])
    assert seg.predict(phantom4.ct, snap).n_classes == 2


def test_noiseless_phantom_is_recovered(clean):
    seg = ClassicalSegmenter(seed=0)
    snap = seg.train([(clean.ct, clean.gt_mask)])
    pred = segment(seg, clean.ct, snap)
    rep = evaluate(pred, clean.gt_mask, clean.gt_tree)
    assert rep.tld_pct >= 95.0
    assert rep.precision_pct >= 90.0


def test_binarize_threshold():
    probs = np.zeros((2, 2, 1, 1))
    probs[1] = [[[0.4]], [[0.6]]]
    probs[0] = 1 - probs[1]
    like = Volume(np.zeros((2, 1, 1), np.uint8))
    assert binarize(ProbVolume(probs), like).data.ravel().tolist() == [0, 1]
    assert binarize(ProbVolume(probs), like, 0.3).data.ravel().tolist() == [1, 1]
