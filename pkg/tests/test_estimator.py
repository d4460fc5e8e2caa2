import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from layerfuse.estimator import FusionProbeClassifier, check_labels, check_stacked_features


def _separable_arrays(rng, n=80, R=3, d=8, classes=(0, 1)):
    y = np.array([classes[i % len(classes)] for i in range(n)])
    means = np.eye(len(classes), d)
    X = means[[list(classes).index(v) for v in y]][:, None, :] + rng.normal(size=(n, R, d)) * 0.05
    return X, y


class TestValidationHelpers:
    def test_promotes_2d_to_single_row(self):
        X = check_stacked_features(np.ones((4, 6)))
        assert X.shape == (4, 1, 6)

    def test_rejects_non_finite(self):
        bad = np.ones((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            check_stacked_features(bad)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            check_stacked_features(np.ones(5))

    def test_shape_expectations(self):
        with pytest.raises(ValueError, match="rows"):
            check_stacked_features(np.ones((2, 3, 4)), expected_rows=2)

    def test_labels_length(self):
        with pytest.raises(ValueError):
            check_labels(np.ones(3), 4)


class TestFusionProbeClassifier:
    def test_sklearn_params_roundtrip(self):
        est = FusionProbeClassifier(kind="linear", learning_rate=0.1)
        params = est.get_params()
        assert params["kind"] == "linear" and params["learning_rate"] == 0.1
        est2 = clone(est)
        assert est2.get_params() == params

    def test_fit_predict_attentive(self, rng):
        X, y = _separable_arrays(rng)
        est = FusionProbeClassifier(kind="attentive", random_state=0).fit(X, y)
        assert est.score(X, y) >= 0.99
        proba = est.predict_proba(X[:5])
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        assert est.config_.num_heads >= 1

    def test_fit_predict_linear_2d_input(self, rng):
        X, y = _separable_arrays(rng, R=1)
        est = FusionProbeClassifier(kind="linear", random_state=0).fit(X[:, 0, :], y)
        assert est.config_.kind == "linear_cls"
        assert est.score(X[:, 0, :], y) >= 0.99

    def test_string_class_labels(self, rng):
        X, y = _separable_arrays(rng, classes=("cat", "dog"))
        est = FusionProbeClassifier(kind="linear", random_state=0).fit(X, y)
        preds = est.predict(X)
        assert set(preds) <= {"cat", "dog"}
        assert est.score(X, y) >= 0.99

    def test_not_fitted_error(self):
        with pytest.raises(NotFittedError):
            FusionProbeClassifier().predict(np.ones((2, 2, 2)))

    def test_deterministic_given_random_state(self, rng):
        X, y = _separable_arrays(rng)
        a = FusionProbeClassifier(random_state=3).fit(X, y)
        b = FusionProbeClassifier(random_state=3).fit(X, y)
        for k in a.probe_.params:
            np.testing.assert_array_equal(a.probe_.params[k], b.probe_.params[k])

    def test_row_mismatch_at_predict_rejected(self, rng):
        X, y = _separable_arrays(rng, R=3)
        est = FusionProbeClassifier(kind="linear").fit(X, y)
        with pytest.raises(ValueError, match="rows"):
            est.predict(np.ones((2, 2, 8)))

    def test_unknown_kind_rejected(self, rng):
        X, y = _separable_arrays(rng)
        with pytest.raises(ValueError, match="kind"):
            FusionProbeClassifier(kind="magic").fit(X, y)

    def test_single_class_rejected(self, rng):
        X, _ = _separable_arrays(rng)
        with pytest.raises(ValueError, match="classes"):
            FusionProbeClassifier().fit(X, np.zeros(len(X)))
