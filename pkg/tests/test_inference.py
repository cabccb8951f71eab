import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evl.backbone import Backbone, BackboneConfig
from evl.decoder import DecoderConfig, EVLDecoder
from evl.errors import ParameterError
from evl.model import EVLModel
from evl.pipeline.data import VideoClip
from evl.pipeline.inference import accuracy, ensemble, predict_dataset, predict_video, softmax
from evl.pipeline.sampling import SamplingSpec, sample_frames

BB = BackboneConfig(image_size=16, patch_size=4, depth=2, width=16, heads=2, mlp_factor=2)


@pytest.fixture(scope="module")
def model():
    dec = DecoderConfig(num_blocks=2, feature_layers=(-2, -1), width=16, heads=2, mlp_factor=2,
                        num_classes=4, max_frames=4, grid=(4, 4))
    m = EVLModel(Backbone.random(BB, seed=0), EVLDecoder(dec, seed=0))
    rng = np.random.default_rng(1)
    for p in m.decoder.parameters():
        p.assign(p.data + 0.2 * rng.normal(size=p.shape))
    return m


def clip(length, seed=0):
    return VideoClip(np.random.default_rng(seed).random((length, 16, 16, 3)).astype(np.float32), 0)


def test_single_view_is_softmax_of_forward(model):
    c = clip(4)
    p = predict_video(model, c, SamplingSpec("segment", 4))
    vols = {n: v.select([0, 1, 2, 3]) for n, v in model.encode(c.frames).items()}
    direct = softmax(model.forward([vols]).logits.data[0])
    np.testing.assert_allclose(p, direct, atol=1e-6)
    assert abs(p.sum() - 1) < 1e-6


def test_duplicate_views_equal_single(model):
    c = clip(4, seed=2)
    # a 4-frame clip with 4 segments yields the same frames for every view
    three = SamplingSpec("segment", 4, views=3)
    assert len({tuple(v) for v in sample_frames(4, three)}) == 1
    np.testing.assert_allclose(predict_video(model, c, three),
                               predict_video(model, c, SamplingSpec("segment", 4)), atol=1e-7)


def test_three_views_manual_mean(model):
    c = clip(12, seed=3)
    spec = SamplingSpec("segment", 4, views=3)
    views = sample_frames(12, spec)
    assert len({tuple(v) for v in views}) == 3
    full = model.encode(c.frames)
    manual = np.mean([softmax(model.forward([{n: v.select(ix) for n, v in full.items()}]).logits.data[0])
                      for ix in views], axis=0)
    np.testing.assert_allclose(predict_video(model, c, spec), manual, atol=1e-6)


def test_dataset_batching_matches_per_clip(model):
    clips = [clip(6, seed=s) for s in range(5)]
    spec = SamplingSpec("strided", 2, stride=2, views=2)
    batched = predict_dataset(model, clips, spec, batch=3)
    single = np.stack([predict_video(model, c, spec) for c in clips])
    np.testing.assert_allclose(batched, single, atol=1e-6)
    np.testing.assert_allclose(batched.sum(-1), 1.0, atol=1e-6)


def test_ensemble_identical_members_prefer_half():
    rng = np.random.default_rng(0)
    a = softmax(rng.normal(size=(20, 3)))
    res = ensemble(a, a, rng.integers(0, 3, 20))
    assert res.alpha == 0.5
    assert len({acc for _, acc in res.curve}) == 1


def test_ensemble_dominance():
    # a always right by a thin margin, b guesses one-hot at random
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 4, 50)
    a = np.full((50, 4), 0.74 / 3)
    a[np.arange(50), labels] = 0.26
    b = np.eye(4)[rng.integers(0, 4, 50)]
    assert accuracy(b, labels) < 0.5
    assert ensemble(a, b, labels).alpha == 1.0
    assert ensemble(b, a, labels).alpha == 0.0


def test_complementary_fixture_selects_half():
    a = np.array([[1.0, 0.0], [0.05, 0.95], [0.45, 0.55]])
    b = np.array([[0.05, 0.95], [1.0, 0.0], [0.45, 0.55]])
    labels = [0, 0, 1]
    res = ensemble(a, b, labels)
    assert res.alpha == 0.5 and res.accuracy == 1.0
    curve = dict(res.curve)
    assert all(acc < 1.0 for al, acc in curve.items() if al != 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30))
def test_ensemble_never_worse_than_members(seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, n)
    a, b = softmax(rng.normal(size=(n, 3))), softmax(rng.normal(size=(n, 3)))
    res = ensemble(a, b, labels)
    assert res.accuracy >= max(accuracy(a, labels), accuracy(b, labels))
    np.testing.assert_allclose(res.scores, res.alpha * a + (1 - res.alpha) * b)


def test_ensemble_errors():
    with pytest.raises(ParameterError):
        ensemble(np.zeros((0, 2)), np.zeros((0, 2)), [])
