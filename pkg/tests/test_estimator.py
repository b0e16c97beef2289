import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from disentangle_reid import DisentangledReIDEncoder
from disentangle_reid.engine import fit, TrainConfig


def _train_arrays(ds):
    tr = ds.part("train")
    return tr.inputs, tr.pids, tr.camids, tr.text_features


FAST = dict(epochs=4, base_lr=0.01, warmup_initial_lr=0.00421, warmup_epochs=1, triplet_reduction="mean",
            factors=("clothing", "hair"))


def test_get_set_params_and_clone():
    est = DisentangledReIDEncoder(epochs=3, lambda_n=0.5)
    params = est.get_params()
    assert params["epochs"] == 3 and params["lambda_n"] == 0.5
    c = clone(est).set_params(epochs=7)
    assert c.epochs == 7 and est.epochs == 3


def test_fit_transform_predict(tiny_synth):
    X, y, cam, text = _train_arrays(tiny_synth)
    est = DisentangledReIDEncoder(**{**FAST, "epochs": 20}).fit(X, y + 100, camids=cam, text_features=text)
    feats = est.transform(X, camids=cam)
    assert feats.shape == (len(X), 64)
    assert est.n_features_in_ == 64
    assert set(est.predict(X, camids=cam)) <= set(y + 100)
    assert est.score(X, y + 100, camids=cam) > 0.5
    assert len(est.history_) > 0
    with pytest.raises(ValueError):
        est.transform(X[:, :10])


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        DisentangledReIDEncoder().transform(np.zeros((2, 64)))


def test_fit_is_deterministic(tiny_synth):
    X, y, cam, text = _train_arrays(tiny_synth)
    a = DisentangledReIDEncoder(**FAST).fit(X, y, camids=cam, text_features=text).transform(X, camids=cam)
    b = DisentangledReIDEncoder(**FAST).fit(X, y, camids=cam, text_features=text).transform(X, camids=cam)
    np.testing.assert_array_equal(a, b)


def test_from_checkpoint(tmp_path, tiny_synth):
    cfg = TrainConfig(epochs=2, base_lr=0.01, warmup_initial_lr=0.00421, warmup_epochs=1,
                      triplet_reduction="mean", factors=["clothing", "hair"])
    tr = tiny_synth.part("train")
    res = fit(cfg, tr, out_dir=tmp_path)
    est = DisentangledReIDEncoder.from_checkpoint(res.final_checkpoint)
    assert est.base_lr == 0.01 and est.epochs == 2
    np.testing.assert_array_equal(np.sort(est.classes_), np.unique(tr.pids))
    assert est.transform(tr.inputs, camids=tr.camids).shape == (len(tr), 64)
