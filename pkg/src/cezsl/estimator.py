"""scikit-learn wrapper around the embedding model.

Class labels index rows of a prototype matrix. Classes that occur in ``y`` are
seen; in transductive mode every remaining prototype row is an unseen class
and ``X_unlabeled`` supplies its unlabelled visual samples.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cvae import CvaeConfig, CvaeModel, fit_cvae
from .embednet import EmbedModel, LossWeights, TrainConfig, encode_visual, fit_embedding
from .evalkit import per_class_accuracy, predict
from .transduce import cluster_pool, fit_transductive


class ZeroShotEmbedding(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Latent-space nearest-prototype classifier for (generalised) zero-shot learning.

    ``transform`` maps visual rows into the latent space; ``predict`` returns
    the class whose encoded prototype is nearest, searching every prototype
    row unless ``candidates`` narrows the set.
    """

    def __init__(self, mode="inductive", latent_dim=1000, semantic_hidden=750, epochs=200,
                 batch_size=64, learning_rate=1e-4, loss_weights=None, relabel_gate=0.95,
                 cvae_epochs=300, cvae_learning_rate=1e-3, cvae_hidden=512,
                 metric="euclidean", random_state=0):
        self.mode = mode
        self.latent_dim = latent_dim
        self.semantic_hidden = semantic_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.loss_weights = loss_weights
        self.relabel_gate = relabel_gate
        self.cvae_epochs = cvae_epochs
        self.cvae_learning_rate = cvae_learning_rate
        self.cvae_hidden = cvae_hidden
        self.metric = metric
        self.random_state = random_state

    def _config(self):
        weights = self.loss_weights if self.loss_weights is not None else LossWeights()
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.random_state,
                           loss_weights=weights, mode=self.mode, latent_dim=self.latent_dim,
                           semantic_hidden=self.semantic_hidden, relabel_gate=self.relabel_gate)

    def fit(self, X, y, prototypes, X_unlabeled=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        prototypes = check_array(prototypes, dtype=np.float64)
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be integer rows of the prototype matrix")
        if y.min() < 0 or y.max() >= len(prototypes):
            raise ValueError(f"labels must lie in [0, {len(prototypes)})")
        cfg = self._config()
        self.seen_classes_ = np.unique(y)
        self.unseen_classes_ = np.setdiff1d(np.arange(len(prototypes)), self.seen_classes_)
        self.classes_ = np.arange(len(prototypes))
        self.prototypes_ = prototypes
        self.n_features_in_ = X.shape[1]
        slots = np.searchsorted(self.seen_classes_, y)
        proto_seen = prototypes[self.seen_classes_]
        s, u = len(self.seen_classes_), len(self.unseen_classes_)

        if self.mode == "inductive":
            m = EmbedModel.init(X.shape[1], prototypes.shape[1], s, cfg.latent_dim,
                                cfg.semantic_hidden, cfg.seed)
            self.model_, self.history_ = fit_embedding(m, X, slots, proto_seen, cfg)
            return self
        if self.mode != "transductive":
            raise ValueError(f"unknown mode {self.mode!r}")
        if X_unlabeled is None or u == 0:
            raise ValueError("transductive mode needs X_unlabeled and at least one unseen class")
        X_unlabeled = check_array(X_unlabeled, dtype=np.float64)
        if X_unlabeled.shape[1] != X.shape[1]:
            raise ValueError("X_unlabeled must have the same columns as X")
        ccfg = CvaeConfig(epochs=self.cvae_epochs, batch_size=self.batch_size,
                          learning_rate=self.cvae_learning_rate, hidden=self.cvae_hidden,
                          seed=self.random_state)
        cvae = CvaeModel.init(X.shape[1], prototypes.shape[1], ccfg.hidden, ccfg.seed)
        self.cvae_, self.cvae_history_ = fit_cvae(cvae, X, prototypes[y], ccfg)
        state = cluster_pool(X_unlabeled, s, u, self.cvae_, seed=cfg.seed)
        m = EmbedModel.init(X.shape[1], prototypes.shape[1], s + u, cfg.latent_dim,
                            cfg.semantic_hidden, cfg.seed)
        self.model_, self.pseudo_state_, self.history_ = fit_transductive(
            m, X, slots, proto_seen, X_unlabeled, state, cfg)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return encode_visual(self.model_, X)

    def predict(self, X, candidates=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        cands = self.classes_ if candidates is None else candidates
        return predict(self.model_, X, cands, self.prototypes_, self.metric)

    def score(self, X, y, sample_weight=None):
        """Macro per-class accuracy over the classes present in ``y``."""
        if sample_weight is not None:
            raise ValueError("sample weights are not supported")
        y = np.asarray(y)
        acc = per_class_accuracy(self.predict(X), y, np.unique(y))
        return float(np.mean(list(acc.values())))
