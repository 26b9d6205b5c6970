import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_blobs
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.estimator_checks import parametrize_with_checks

from sigquant.core import PRESETS, ideal_quantize
from sigquant.estimators import QuantizationNetworkClassifier, SoftQuantizer


@parametrize_with_checks([SoftQuantizer(), QuantizationNetworkClassifier(pretrain_epochs=2, epochs=2)])
def test_sklearn_contract(estimator, check):
    check(estimator)


class TestSoftQuantizer:
    def test_hard_output_on_grid(self, rng):
        X = rng.normal(size=(40, 3))
        sq = SoftQuantizer("3bit±4").fit(X)
        codes = sq.transform(X) / sq.params_.alpha
        assert set(np.round(np.unique(codes), 9)) <= set(map(float, PRESETS["3bit±4"].levels))
        np.testing.assert_array_equal(sq.transform(X), ideal_quantize(X, sq.levels_, sq.params_))

    def test_soft_approaches_hard(self, rng):
        X = rng.normal(size=(200, 1))
        hard = SoftQuantizer("ternary").fit(X).transform(X)
        soft = SoftQuantizer("ternary", temperature=1e7, output="soft").fit(X).transform(X)
        near = np.abs(np.abs(X) * SoftQuantizer("ternary").fit(X).params_.beta - 0.05) < 1e-5
        np.testing.assert_allclose(soft[~near], hard[~near], atol=1e-6)

    def test_get_params_roundtrip(self):
        sq = SoftQuantizer("binary", temperature=3.0)
        assert clone(sq).get_params() == sq.get_params()

    def test_bad_output(self, rng):
        with pytest.raises(ValueError):
            SoftQuantizer(output="bits").fit(rng.normal(size=(5, 2)))


class TestClassifier:
    def test_learns_blobs(self):
        X, y = make_blobs(400, n_features=6, centers=3, random_state=0, cluster_std=1.5)
        labels = np.array(["a", "b", "c"])[y]
        clf = QuantizationNetworkClassifier(pretrain_epochs=5, epochs=5).fit(X[:300], labels[:300])
        assert clf.score(X[300:], labels[300:]) > 0.9
        assert set(clf.predict(X[:5])) <= {"a", "b", "c"}
        np.testing.assert_allclose(clf.predict_proba(X[:5]).sum(axis=1), 1.0)
        assert clf.model_.has_quantizers

    def test_pipeline_and_image_shape(self, rng):
        X, y = make_blobs(200, n_features=16, centers=2, random_state=1)
        clf = QuantizationNetworkClassifier(arch="conv:2:3:1,relu,flatten,linear:8,relu,linear:{classes}",
                                            input_shape=(1, 4, 4), pretrain_epochs=3, epochs=3)
        pipe = make_pipeline(StandardScaler(), clf).fit(X, y)
        assert pipe.score(X, y) > 0.9

    def test_input_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            QuantizationNetworkClassifier(input_shape=(1, 3, 3)).fit(rng.normal(size=(10, 4)), np.arange(10) % 2)
