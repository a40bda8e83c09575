import numpy as np
import pytest
from sklearn.base import clone

from dcct import ConditionalColorModel, DCCTClassifier, OneClassDCCT, synthdata as sd
from dcct.validation import check_image, check_images, check_labels

FAST = dict(steps=3, patches=2, batch_size=4)


@pytest.fixture(scope="module")
def corpus():
    photo, _ = sd.make_corpus("photographic", 4, seed=11, size=40)
    gen, _ = sd.make_corpus("generated", 4, seed=11, size=40, mode="upsampled")
    return photo, gen


@pytest.mark.parametrize("cls", [ConditionalColorModel, DCCTClassifier, OneClassDCCT])
def test_params_and_clone(cls):
    est = cls(seed=3, t=3)
    params = est.get_params()
    assert params["seed"] == 3 and params["t"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(k=2)
    assert est.k == 2
    assert est._config().patch_size == 32


def test_unfitted_raises(corpus):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        DCCTClassifier().predict(corpus[0])
    with pytest.raises(NotFittedError):
        OneClassDCCT().anomaly_score(corpus[0])


def test_conditional_transform(corpus):
    m = ConditionalColorModel(**FAST).fit(corpus[0])
    out = m.transform(corpus[1])
    assert out.shape == (4, 3)
    np.testing.assert_allclose(out[:, 2], out[:, 0] - out[:, 1], atol=1e-9)
    np.testing.assert_allclose(m.score_samples(corpus[1]), out[:, 2], atol=1e-4)


def test_classifier_fit_predict(corpus):
    X = corpus[0] + corpus[1]
    y = [0] * 4 + [1] * 4
    clf = DCCTClassifier(cls_steps=3, **FAST).fit(X, y)
    proba = clf.predict_proba(X)
    assert proba.shape == (8, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    pred = clf.predict(X)
    assert set(pred) <= {0, 1}
    np.testing.assert_array_equal(pred, (proba[:, 1] > 0.5).astype(int))
    assert 0.0 <= clf.score(X, y) <= 1.0


def test_one_class_fit_predict(corpus):
    oc = OneClassDCCT(**FAST).fit(corpus[0])
    # nearest-rank 95th percentile of 4 training scores is the maximum
    assert oc.threshold_ == oc.train_scores_.max()
    assert (oc.predict(corpus[0]) == 1).all()
    assert set(oc.predict(corpus[1])) <= {-1, 1}


def test_uint8_input_accepted(corpus):
    img8 = np.round(corpus[0][0] * 255).astype(np.uint8)
    np.testing.assert_allclose(check_image(img8), corpus[0][0], atol=1e-9)


@pytest.mark.parametrize("bad", [np.zeros((8, 8)), np.full((8, 8, 3), 1.5), np.full((8, 8, 3), np.nan),
                                 np.zeros((8, 8, 4))])
def test_bad_images_rejected(bad):
    with pytest.raises(ValueError):
        check_image(bad)


def test_image_list_checks():
    with pytest.raises(ValueError):
        check_images([])
    with pytest.raises(ValueError):
        check_images([np.zeros((8, 8, 3))], min_size=16)
    assert len(check_images(np.zeros((8, 8, 3)))) == 1


def test_label_checks():
    assert check_labels([0, 1, 1], 3).tolist() == [0, 1, 1]
    with pytest.raises(ValueError):
        check_labels([0, 1], 3)
    with pytest.raises(ValueError):
        check_labels([0, 2], 2)
    with pytest.raises(ValueError):
        check_labels([1, 1], 2)
    assert check_labels([1, 1], 2, require_both=False).tolist() == [1, 1]


def test_classifier_rejects_single_class(corpus):
    with pytest.raises(ValueError):
        DCCTClassifier(**FAST).fit(corpus[0], [0] * 4)
