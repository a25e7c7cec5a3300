import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from camrel.estimators import CameraModelClassifier, ReliabilityEstimator, ReliabilityMapper
from camrel.models import build_mc
from camrel.pipeline import attribute_patches, build_map, extract_patches, score_patches
from camrel.synth import SynthConfig, generate_dataset
from camrel.training import load_patch_set, split_dataset


@pytest.fixture(scope="module")
def patches(tmp_path_factory):
    cat = generate_dataset(SynthConfig(scenes=4, images_per_scene=2, size=128, seed=5), tmp_path_factory.mktemp("e"))
    split = split_dataset(cat, 0)
    data = load_patch_set(cat, split.tcam + split.tip, 4, 0)
    names = np.array(["alpha", "beta", "gamma", "delta"])
    return data.patches, names[data.labels]


@pytest.fixture(scope="module")
def classifier(patches):
    X, y = patches
    return CameraModelClassifier(epochs=2, batch_size=16).fit(X, y)


class TestCameraModelClassifier:
    def test_string_labels_roundtrip(self, classifier, patches):
        X, y = patches
        assert list(classifier.classes_) == ["alpha", "beta", "delta", "gamma"]
        pred = classifier.predict(X[:10])
        assert set(pred) <= set(y)
        assert len(classifier.history_) == 2

    def test_proba_rows_sum_to_one(self, classifier, patches):
        p = classifier.predict_proba(patches[0][:5])
        assert p.shape == (5, 4)
        np.testing.assert_allclose(p.sum(axis=1), 1)

    def test_predict_is_argmax_of_network(self, classifier, patches):
        X = patches[0][:8]
        idx = attribute_patches(classifier.network_, X.astype(np.float32) / 255)
        assert (classifier.predict(X) == classifier.classes_[idx]).all()

    def test_from_network(self):
        est = CameraModelClassifier.from_network(build_mc(3, 0))
        assert list(est.classes_) == [0, 1, 2]
        assert est.predict(np.zeros((2, 64, 64, 3), np.uint8)).shape == (2,)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            CameraModelClassifier().predict(np.zeros((1, 64, 64, 3), np.uint8))

    def test_wrong_shape(self, classifier):
        with pytest.raises(ValueError):
            classifier.predict(np.zeros((2, 32, 32, 3), np.uint8))

    def test_single_class_rejected(self, patches):
        X, _ = patches
        with pytest.raises(ValueError):
            CameraModelClassifier(epochs=1).fit(X[:6], ["a"] * 6)

    def test_clone_keeps_params(self):
        est = clone(CameraModelClassifier(epochs=3, seed=4))
        assert est.get_params()["epochs"] == 3 and est.seed == 4


@pytest.fixture(scope="module")
def reliability(classifier, patches):
    X, y = patches
    return ReliabilityEstimator(classifier, strategy="pretrained", md_widths=(32, 2), epochs=1,
                                batch_size=16).fit(X, y)


class TestReliabilityEstimator:
    def test_scores_match_network(self, reliability, patches):
        X = patches[0][:6]
        g = reliability.score_samples(X)
        np.testing.assert_array_equal(g, score_patches(reliability.network_, X.astype(np.float32) / 255))
        np.testing.assert_allclose(reliability.predict_proba(X)[:, 1], g)
        assert ((reliability.predict(X) == 1) == (g > 0.5)).all()

    def test_labels_follow_attribution(self, reliability, classifier, patches):
        X, y = patches
        r = reliability.reliability_labels(X, y)
        assert (r == (classifier.predict(X) == y)).all()

    def test_attribution_untouched(self, reliability, classifier):
        for layer in reliability.network_.param_layers():
            if layer.part == "mc":
                np.testing.assert_array_equal(layer.params["weights"], classifier.network_[layer.name].params["weights"])

    @pytest.mark.parametrize("kwargs", [dict(strategy="bogus"), dict(gamma=1.5), dict(md_widths=(32, 3))])
    def test_bad_params(self, classifier, patches, kwargs):
        with pytest.raises(ValueError):
            ReliabilityEstimator(classifier, **kwargs).fit(*patches)

    def test_needs_attribution(self, patches):
        with pytest.raises(ValueError, match="CameraModelClassifier"):
            ReliabilityEstimator().fit(*patches)

    def test_mapper(self, reliability):
        img = (np.arange(128 * 96 * 3) % 251).reshape(128, 96, 3).astype(np.uint8)
        maps = ReliabilityMapper(reliability, stride=32).fit().transform([img])
        grid = extract_patches(img, 32)
        expected = build_map(reliability.score_samples(grid.patches), grid).values
        np.testing.assert_array_equal(maps[0], expected)

    def test_mapper_stride_checked(self, reliability):
        with pytest.raises(ValueError):
            ReliabilityMapper(reliability, stride=0).fit()
