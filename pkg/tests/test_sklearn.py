import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fgrad.data import synth_blobs
from fgrad.sklearn import ForwardGradientClassifier


@pytest.fixture(scope="module")
def blobs():
    train = synth_blobs(3, (1, 8, 8), 150, seed=0)
    test = synth_blobs(3, (1, 8, 8), 60, seed=0, split="test")
    names = np.array(["ant", "bee", "cat"])
    return train.images, names[train.labels], test.images, names[test.labels]


def test_fit_predict_with_string_labels(blobs):
    X, y, Xt, yt = blobs
    clf = ForwardGradientClassifier(guess="exact", epochs=4, batch_size=30, h_chan=3, n_depth=2).fit(X, y)
    assert set(clf.classes_) == {"ant", "bee", "cat"}
    pred = clf.predict(Xt)
    assert pred.shape == (60,) and set(pred) <= set(clf.classes_)
    proba = clf.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert clf.score(Xt, yt) > 0.5
    assert len(clf.loss_curve_) == 4 and clf.n_features_in_ == 64


def test_flat_input_needs_image_shape(blobs):
    X, y, _, _ = blobs
    flat = X.reshape(len(X), -1)
    with pytest.raises(ValueError):
        ForwardGradientClassifier(epochs=1).fit(flat, y)
    clf = ForwardGradientClassifier(epochs=1, image_shape=(1, 8, 8), h_chan=3, n_depth=2).fit(flat, y)
    assert clf.predict(flat[:5]).shape == (5,)


def test_params_roundtrip_and_clone():
    clf = ForwardGradientClassifier(guess="ntk", lr=0.01)
    params = clf.get_params()
    assert params["guess"] == "ntk" and params["lr"] == 0.01
    twin = clone(clf)
    assert twin.get_params() == params
    assert clf.set_params(lr=0.1).lr == 0.1


def test_validation(blobs):
    X, y, _, _ = blobs
    with pytest.raises(NotFittedError):
        ForwardGradientClassifier().predict(X)
    with pytest.raises(ValueError):
        ForwardGradientClassifier(epochs=1).fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        ForwardGradientClassifier(epochs=1).fit(X[:10], y[:9])
    with pytest.raises(ValueError):
        ForwardGradientClassifier(epochs=1, guess="nope").fit(X, y)
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        ForwardGradientClassifier(epochs=1).fit(bad, y)


def test_same_random_state_same_model(blobs):
    X, y, Xt, _ = blobs
    a = ForwardGradientClassifier(guess="gaussian", epochs=1, h_chan=3, n_depth=2, random_state=3).fit(X, y)
    b = ForwardGradientClassifier(guess="gaussian", epochs=1, h_chan=3, n_depth=2, random_state=3).fit(X, y)
    np.testing.assert_array_equal(a.decision_function(Xt), b.decision_function(Xt))
