import numpy as np
import pytest
from sklearn.base import clone

from lhuc import LHUCClassifier, LHUCRegressor
from lhuc.adapter import AdaptConfig, two_pass_adapt
from lhuc.synth import BumpSpec, ClusterTaskSpec, gen_bump, gen_multicluster

SPEC = ClusterTaskSpec(n_speakers=8, n_test_speakers=3, frames_per_speaker_per_env=60, seed=3)


@pytest.fixture(scope="module")
def data():
    return gen_multicluster(SPEC)


@pytest.fixture(scope="module")
def fitted(data):
    train, _ = data
    return LHUCClassifier(hidden_sizes=(32, 32), max_epochs=20).fit(train.features, train.labels)


def test_get_params_and_clone():
    est = LHUCClassifier(hidden_sizes=(16,), sat_gamma=0.5, kind="sigmoid2")
    params = est.get_params()
    assert params["hidden_sizes"] == (16,) and params["sat_gamma"] == 0.5 and params["kind"] == "sigmoid2"
    assert clone(est).get_params() == params
    assert est.set_params(adapt_lr=0.4).adapt_lr == 0.4


def test_fit_scores_above_chance(fitted, data):
    _, test = data
    assert fitted.score(test.features, test.labels) > 0.7
    proba = fitted.predict_proba(test.features)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert fitted.n_features_in_ == data[0].dim and len(fitted.training_curve_) >= 1


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        LHUCClassifier().predict(np.zeros((2, 3)))


@pytest.mark.parametrize("X,y", [
    (np.zeros((5, 3)), np.zeros(4)),
    (np.array([[np.nan, 1.0]] * 4), np.arange(4)),
    (np.zeros(5), np.arange(5)),
])
def test_input_validation(X, y):
    with pytest.raises(ValueError):
        LHUCClassifier(max_epochs=1).fit(X, y)


def test_feature_count_checked(fitted):
    with pytest.raises(ValueError, match="features"):
        fitted.predict(np.zeros((3, 21)))


def test_string_labels():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2))
    y = np.where(X[:, 0] > 0, "pos", "neg")
    est = LHUCClassifier(hidden_sizes=(8,), max_epochs=10).fit(X, y)
    assert set(est.predict(X)) <= {"pos", "neg"} and est.score(X, y) > 0.8
    with pytest.raises(ValueError, match="not seen"):
        est.adapt(X[:10], 1, y=np.array(["maybe"] * 10))


def test_sat_needs_speakers(data):
    train, _ = data
    with pytest.raises(ValueError, match="speaker"):
        LHUCClassifier(sat_gamma=0.5, max_epochs=1).fit(train.features, train.labels)
    with pytest.raises(ValueError, match="shape"):
        LHUCClassifier(sat_gamma=0.5, max_epochs=1).fit(train.features, train.labels, speakers=[1, 2])


def test_sat_fit_has_bank(data):
    train, _ = data
    est = LHUCClassifier(hidden_sizes=(16, 16), sat_gamma=0.5, max_epochs=2).fit(
        train.features, train.labels, speakers=train.speakers)
    assert est.bank_.cluster_ids == [0, *train.speaker_ids()]


def fitted_copy(fitted):
    est = clone(fitted)
    est.__dict__.update({k: v for k, v in fitted.__dict__.items() if k.endswith("_")})
    est.transforms_ = {}
    return est


def test_unsupervised_adapt_matches_two_pass(fitted, data):
    _, test = data
    est = fitted_copy(fitted)
    for s in SPEC.test_speakers:
        part = test.where(speaker=s)
        est.adapt(part.features, s)
        ref, _ = two_pass_adapt(fitted.params_, None, part, AdaptConfig())
        assert all(a.tobytes() == b.tobytes() for a, b in zip(est.transforms_[s].r, ref.r))


def test_supervised_adapt_improves(fitted, data):
    _, test = data
    est = fitted_copy(fitted)
    for s in SPEC.test_speakers:
        part = test.where(speaker=s)
        before = est.score(part.features, part.labels)
        est.adapt(part.features, s, y=part.labels)
        assert np.mean(est.predict(part.features, clusters=np.full(len(part), s)) == part.labels) > before
    assert sorted(est.transforms_) == sorted(SPEC.test_speakers)


def test_unknown_cluster_routes_to_si(fitted, data):
    _, test = data
    X = test.features[:20]
    np.testing.assert_array_equal(fitted.predict_proba(X, clusters=np.full(20, 999)), fitted.predict_proba(X))


def test_cluster_zero_not_adaptable(fitted, data):
    with pytest.raises(ValueError, match="cluster 0"):
        clone(fitted).fit(data[0].features[:50], data[0].labels[:50]).adapt(data[0].features[:5], 0)


def test_clusters_shape_checked(fitted):
    with pytest.raises(ValueError, match="clusters"):
        fitted.predict(np.zeros((4, 20)), clusters=[1, 2])


def test_deterministic(data):
    train, _ = data
    a = LHUCClassifier(hidden_sizes=(8,), max_epochs=2, random_state=5).fit(train.features, train.labels)
    b = LHUCClassifier(hidden_sizes=(8,), max_epochs=2, random_state=5).fit(train.features, train.labels)
    assert a.predict_proba(train.features).tobytes() == b.predict_proba(train.features).tobytes()


def smooth_task(seed, shift=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(1000, 4))
    y = np.sin(X[:, 0] - shift) + 0.5 * X[:, 1] * X[:, 2]
    return X, y


class TestRegressor:
    @pytest.fixture(scope="class")
    @staticmethod
    def reg():
        X, y = smooth_task(0)
        return LHUCRegressor(hidden_sizes=(32, 32), learning_rate=0.3, batch_size=8, max_epochs=60).fit(X, y)

    def test_fit_predict_1d(self, reg):
        X, y = smooth_task(1)
        assert reg.predict(X).shape == (len(X),) and reg.score(X, y) > 0.5

    def test_multi_output_shape(self):
        f1, _ = gen_bump(BumpSpec(n_points=100))
        y = np.hstack([f1.labels, -f1.labels])
        est = LHUCRegressor(hidden_sizes=(8,), max_epochs=2).fit(f1.features, y)
        assert est.predict(f1.features).shape == (len(f1), 2)

    def test_adapt_needs_targets(self, reg):
        with pytest.raises(ValueError, match="targets"):
            reg.adapt(smooth_task(1)[0], 1)

    def test_supervised_adapt_reduces_error(self, reg):
        est = clone(reg)
        est.__dict__.update({k: v for k, v in reg.__dict__.items() if k.endswith("_")})
        est.transforms_ = {}
        X, y = smooth_task(2, shift=0.7)
        before = np.mean((est.predict(X) - y) ** 2)
        est.set_params(adapt_sweeps=5).adapt(X, 1, y=y)
        after = np.mean((est.predict(X, clusters=np.ones(len(X))) - y) ** 2)
        assert after < before
        assert np.array_equal(est.predict(X), reg.predict(X))
