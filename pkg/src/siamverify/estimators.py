"""scikit-learn style front ends for the pipeline stages.

``CNNEmbedder`` turns images into embeddings, ``PairMiner`` mines training
pairs from two embedding sets, ``SiameseVerifier`` trains and scores image
pairs, and ``SupervisedBaseline`` is the labelled comparison system. All of
them support ``get_params``/``set_params`` and ``sklearn.base.clone``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_labels, check_images, check_pair_images
from .embeddings import EmbeddingStore
from .encoder import EncoderConfig, HeadConfig, ModelParams, encoder_forward, params_init, params_load, params_save
from .mining import MiningConfig, PairSet, mine
from .siamese import verification_score
from .trainer import TrainConfig, train_baseline, train_pairs, train_siamese


def _encoder_config(est, seed) -> EncoderConfig:
    h, w, c = est.input_shape
    return EncoderConfig(h, w, c, tuple(est.block_channels), est.fc1_units, est.embedding_dim, seed)


def _train_config(est, seed) -> TrainConfig:
    return TrainConfig(epochs=est.epochs, batch_size=est.batch_size, momentum=est.momentum,
                       weight_decay=est.weight_decay, lr_start=est.lr_start, lr_end=est.lr_end,
                       early_stop_patience=est.early_stop_patience,
                       validation_fraction=est.validation_fraction, seed=seed, optimizer=est.optimizer)


def _embed(params: ModelParams, X, batch_size):
    out = [encoder_forward(params, X[s:s + batch_size]) for s in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.encoder.embedding_dim), np.float32)


class CNNEmbedder(TransformerMixin, BaseEstimator):
    """Maps image batches ``(n, H, W, C)`` to embeddings with a randomly
    initialised (or loaded) encoder.

    ``fit`` only draws the seeded initial weights; it does not look at ``X``
    beyond checking its shape.
    """

    def __init__(self, input_shape=(64, 64, 3), block_channels=(32, 64, 128), fc1_units=1024,
                 embedding_dim=300, random_state=0, batch_size=128):
        self.input_shape = input_shape
        self.block_channels = block_channels
        self.fc1_units = fc1_units
        self.embedding_dim = embedding_dim
        self.random_state = random_state
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if X is not None:
            check_images(X, self.input_shape)
        self.params_ = params_init(_encoder_config(self, self.random_state))
        return self

    @classmethod
    def from_params(cls, params: ModelParams, batch_size=128) -> "CNNEmbedder":
        enc = params.encoder
        est = cls(enc.input_shape, enc.block_channels, enc.fc1_units, enc.embedding_dim,
                  enc.seed, batch_size)
        est.params_ = params
        return est

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.params_.encoder.input_shape).astype(np.float32, copy=False)
        return _embed(self.params_, X, self.batch_size)


class PairMiner(BaseEstimator):
    """Mine positive pairs inside ``X`` and hard negatives from ``Y``.

    After ``fit`` the result is in ``pairs_`` (a :class:`PairSet`).
    """

    def __init__(self, k=10, pos_threshold=0.3, neg_threshold=0.1, pos_mode="below",
                 neg_mode="below", bidirectional=False):
        self.k = k
        self.pos_threshold = pos_threshold
        self.neg_threshold = neg_threshold
        self.pos_mode = pos_mode
        self.neg_mode = neg_mode
        self.bidirectional = bidirectional

    def _config(self) -> MiningConfig:
        return MiningConfig(self.k, self.pos_threshold, self.neg_threshold, self.pos_mode,
                            self.neg_mode, self.bidirectional)

    @staticmethod
    def _store(values, ids, prefix):
        if isinstance(values, EmbeddingStore):
            return values
        values = np.asarray(values)
        if ids is None:
            ids = [f"{prefix}{i}" for i in range(len(values))]
        return EmbeddingStore.from_arrays(list(ids), values)

    def fit(self, X, Y, x_ids=None, y_ids=None):
        """``X``/``Y`` are EmbeddingStores or ``(n, dim)`` arrays with optional ids."""
        self.config_ = self._config()
        self.pairs_ = mine(self._store(X, x_ids, "x"), self._store(Y, y_ids, "y"), self.config_)
        return self

    def fit_mine(self, X, Y, x_ids=None, y_ids=None) -> PairSet:
        return self.fit(X, Y, x_ids, y_ids).pairs_


class SiameseVerifier(ClassifierMixin, BaseEstimator):
    """Two-branch shared-weight verifier trained with binary cross-entropy.

    ``X`` passed to ``fit``/``predict`` holds image pairs shaped
    ``(n_pairs, 2, H, W, C)``; ``y`` is 1 for same identity, 0 otherwise.
    ``decision_function`` returns the order-free match probability.
    """

    def __init__(self, input_shape=(64, 64, 3), block_channels=(32, 64, 128), fc1_units=1024,
                 embedding_dim=300, hidden_units=256, epochs=300, batch_size=64, momentum=0.91,
                 weight_decay=1e-5, lr_start=1e-2, lr_end=1e-8, early_stop_patience=10,
                 validation_fraction=0.1, optimizer="sgd", random_state=0, threshold=0.5):
        self.input_shape = input_shape
        self.block_channels = block_channels
        self.fc1_units = fc1_units
        self.embedding_dim = embedding_dim
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.optimizer = optimizer
        self.random_state = random_state
        self.threshold = threshold

    def _seeds(self):
        ss = np.random.SeedSequence(self.random_state).generate_state(2, np.uint32)
        return int(ss[0]), int(ss[1])

    def _init(self):
        enc_seed, train_seed = self._seeds()
        params = params_init(_encoder_config(self, enc_seed), HeadConfig(hidden_units=self.hidden_units))
        return params, _train_config(self, train_seed)

    def fit(self, X, y):
        a, b = check_pair_images(X, self.input_shape)
        y = check_binary_labels(y, a.shape[0])
        params, cfg = self._init()
        n = a.shape[0]
        images = np.concatenate([a, b]).astype(np.float32)
        self.params_, self.train_log_ = train_pairs(params, images, np.arange(n), np.arange(n, 2 * n), y, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def fit_pairs(self, pairs: PairSet, images):
        """Train from mined pairs; ``images`` is an ImageBank or id -> image mapping."""
        params, cfg = self._init()
        self.params_, self.train_log_ = train_siamese(pairs, images, cfg, params=params)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        a, b = check_pair_images(X, self.params_.encoder.input_shape)
        return verification_score(self.params_, a.astype(np.float32), b.astype(np.float32))

    def predict_proba(self, X):
        s = self.decision_function(X)
        return np.column_stack([1 - s, s])

    def predict(self, X):
        return (self.decision_function(X) >= self.threshold).astype(np.int64)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        params_save(self.params_, path)

    @classmethod
    def load(cls, path) -> "SiameseVerifier":
        params = params_load(path)
        if params.head is None or params.head.kind != "siamese":
            raise ValueError(f"{path} is not a siamese checkpoint")
        enc = params.encoder
        est = cls(enc.input_shape, enc.block_channels, enc.fc1_units, enc.embedding_dim,
                  params.head.hidden_units)
        est.params_ = params
        est.classes_ = np.array([0, 1])
        return est


class SupervisedBaseline(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Encoder + softmax identity classifier, trained with labels.

    ``transform`` gives encoder embeddings; ``score_pairs`` compares two
    image batches by cosine similarity of those embeddings.
    """

    def __init__(self, input_shape=(64, 64, 3), block_channels=(32, 64, 128), fc1_units=1024,
                 embedding_dim=300, epochs=300, batch_size=64, momentum=0.91, weight_decay=1e-5,
                 lr_start=1e-2, lr_end=1e-8, early_stop_patience=10, validation_fraction=0.1,
                 optimizer="sgd", random_state=0):
        self.input_shape = input_shape
        self.block_channels = block_channels
        self.fc1_units = fc1_units
        self.embedding_dim = embedding_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X, self.input_shape)
        y = np.asarray(y).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"expected {X.shape[0]} labels, got {y.shape[0]}")
        enc_seed, train_seed = np.random.SeedSequence(self.random_state).generate_state(2, np.uint32)
        params, log, classes = train_baseline(X, list(y), _train_config(self, int(train_seed)),
                                              _encoder_config(self, int(enc_seed)))
        self.params_, self.train_log_ = params, log
        self.classes_ = np.array(classes)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.params_.encoder.input_shape).astype(np.float32, copy=False)
        return _embed(self.params_, X, 128)

    def predict(self, X):
        emb = self.transform(X)
        logits = emb @ self.params_["cls.W"] + self.params_["cls.b"]
        return self.classes_[logits.argmax(axis=1)]

    def score_pairs(self, Xa, Xb):
        ea, eb = self.transform(Xa), self.transform(Xb)
        return np.einsum("ij,ij->i", _unit(ea), _unit(eb))


def _unit(e):
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e, axis=1, keepdims=True)
    return np.divide(e, n, out=np.zeros_like(e), where=n > 0)

