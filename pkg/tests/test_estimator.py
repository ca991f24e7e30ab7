import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cezsl.estimator import ZeroShotEmbedding


def split(ds):
    return (ds.visual[ds.seen_train], ds.labels[ds.seen_train], ds.visual[ds.unseen_test],
            ds.labels[ds.unseen_test])


def test_params_round_trip():
    est = ZeroShotEmbedding(latent_dim=12, relabel_gate=0.5)
    params = est.get_params()
    assert params["latent_dim"] == 12 and params["relabel_gate"] == 0.5
    assert clone(est).get_params() == params
    assert est.set_params(epochs=3).epochs == 3


def test_inductive_fit_predict(small_ds):
    X, y, Xu, yu = split(small_ds)
    est = ZeroShotEmbedding(latent_dim=16, semantic_hidden=12, epochs=5).fit(X, y, small_ds.prototypes)
    assert est.transform(Xu).shape == (len(Xu), 16)
    pred = est.predict(Xu)
    assert set(pred) <= set(range(small_ds.s + small_ds.u))
    restricted = est.predict(Xu, candidates=small_ds.unseen_classes)
    assert set(restricted) <= set(small_ds.unseen_classes)
    assert 0.0 <= est.score(Xu, yu) <= 1.0
    np.testing.assert_array_equal(est.seen_classes_, small_ds.seen_classes)


def test_transductive_fit(small_ds):
    X, y, Xu, _ = split(small_ds)
    est = ZeroShotEmbedding(mode="transductive", latent_dim=16, semantic_hidden=12, epochs=3,
                            cvae_epochs=3, cvae_hidden=8)
    est.fit(X, y, small_ds.prototypes, X_unlabeled=Xu)
    assert est.model_.n_outputs == small_ds.s + small_ds.u
    assert (est.pseudo_state_.labels >= small_ds.s).all()
    with pytest.raises(ValueError):
        clone(est).fit(X, y, small_ds.prototypes)


def test_validation_errors(small_ds):
    X, y, _, _ = split(small_ds)
    with pytest.raises(NotFittedError):
        ZeroShotEmbedding().predict(X)
    with pytest.raises(ValueError):
        ZeroShotEmbedding(epochs=1).fit(X, y + 100, small_ds.prototypes)
    with pytest.raises(ValueError):
        ZeroShotEmbedding(epochs=1).fit(X, y.astype(float) + 0.5, small_ds.prototypes)
    with pytest.raises(ValueError):
        ZeroShotEmbedding(mode="other", epochs=1).fit(X, y, small_ds.prototypes)
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        ZeroShotEmbedding(epochs=1).fit(X, y, small_ds.prototypes)


def test_matches_library_training(small_ds):
    from cezsl.embednet import EmbedModel, TrainConfig, train_inductive
    X, y, _, _ = split(small_ds)
    est = ZeroShotEmbedding(latent_dim=16, semantic_hidden=12, epochs=4, random_state=3)
    est.fit(X, y, small_ds.prototypes)
    m = EmbedModel.init(small_ds.d, small_ds.k, small_ds.s, 16, 12, seed=3)
    m, _ = train_inductive(m, small_ds, TrainConfig(epochs=4, latent_dim=16, semantic_hidden=12,
                                                    seed=3))
    for k, v in m.params.items():
        np.testing.assert_array_equal(est.model_.params[k], v)
