import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from david.estimators import (
    BackboneDeblurrer,
    DavidDeblurrer,
    InternalAttentionDeblurrer,
    check_frame_stack,
)


def data(n=4, t=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.random((n, 3, size, size)).astype(np.float32)
    X = np.clip(y[:, None] + 0.05 * rng.normal(size=(n, t, 3, size, size)), 0, 1).astype(np.float32)
    return X, y


def test_check_frame_stack():
    X, _ = data()
    assert check_frame_stack(X).dtype == np.float32
    with pytest.raises(ValueError, match="n, T, 3, H, W"):
        check_frame_stack(X[0])
    with pytest.raises(ValueError, match="multiple of 16"):
        check_frame_stack(X[..., :8])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        check_frame_stack(X + 2)
    with pytest.raises(ValueError, match="odd"):
        check_frame_stack(X, min_frames=5)


def test_params_and_clone():
    est = BackboneDeblurrer(frames=3, epochs=2, lr=1e-3)
    assert est.get_params()["frames"] == 3
    c = clone(est).set_params(epochs=5)
    assert c.epochs == 5 and est.epochs == 2


def test_backbone_fit_predict_score():
    X, y = data()
    est = BackboneDeblurrer(frames=3, channel_scale="1/16", epochs=3, batch_size=2, crop=16, flips=False)
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X, y)
    pred = est.predict(X)
    assert pred.shape == y.shape and 0 <= pred.min() and pred.max() <= 1
    assert np.isfinite(est.score(X, y)) and len(est.losses_) == 6


def test_pipeline_of_estimators():
    X, y = data(t=3)
    backs = [BackboneDeblurrer(frames=f, channel_scale="1/32", epochs=1, crop=16).fit(X, y) for f in (1, 3)]
    internal = InternalAttentionDeblurrer(2, "1/32", backbones=backs, freeze_epochs=1, epochs=2, crop=16).fit(X, y)
    assert internal.model_.branches[0] is backs[0].model_
    other = InternalAttentionDeblurrer(2, "1/32", freeze_epochs=1, epochs=2, crop=16, seed=1).fit(X, y)
    dual = DavidDeblurrer((3, 7), 2, "1/32", internals=[internal, other], freeze_epochs=1, epochs=2,
                          crop=16).fit(X, y)
    assert dual.predict(X).shape == y.shape
