"""scikit-learn style wrapper around :class:`InvertibleNet`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import Dataset
from .explain import explain_decision, feature_importance
from .network import NetworkSpec, build_network
from .training import TrainConfig, train


class InvertibleNetClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Invertible classifier with a linear head on an exactly invertible feature map.

    ``transform`` returns the feature vectors ``T(x)``; ``inverse_transform``
    maps feature vectors back to inputs.  ``X`` may be ``N x d`` or
    ``N x C x H x W`` (set ``initial_pool`` for images that start pooled).
    """

    def __init__(self, stages=(8,), hidden=None, initial_bn=True, initial_pool=False, dtype="float32",
                 epochs=200, batch_size=64, learning_rate=0.05, momentum=0.9, lr_schedule="constant",
                 lr_decay=0.1, lr_every=50, random_state=0):
        self.stages = stages
        self.hidden = hidden
        self.initial_bn = initial_bn
        self.initial_pool = initial_pool
        self.dtype = dtype
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.lr_schedule = lr_schedule
        self.lr_decay = lr_decay
        self.lr_every = lr_every
        self.random_state = random_state

    def _check_X(self, X):
        X = check_array(X, allow_nd=True, dtype=np.dtype(self.dtype))
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has sample shape {X.shape[1:]}, estimator was fit on {self.input_shape_}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.dtype(self.dtype))
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.input_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(self.input_shape_))
        seed = 0 if self.random_state is None else int(self.random_state)
        spec = NetworkSpec(self.input_shape_, list(self.stages), len(self.classes_), initial_bn=self.initial_bn,
                           initial_pool=self.initial_pool, dtype=self.dtype, hidden=self.hidden)
        self.network_ = build_network(spec, seed=seed)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                          momentum=self.momentum, seed=seed, lr_schedule=self.lr_schedule,
                          lr_decay=self.lr_decay, lr_every=self.lr_every)
        data = Dataset(X, self._encoder.transform(y), len(self.classes_))
        self.train_report_ = train(self.network_, data, cfg)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return self.network_(self._check_X(X)).data.astype(np.float64)

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_proba(self._check_X(X))

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        check_is_fitted(self, "network_")
        return self.network_.forward_features(self._check_X(X)).data

    def inverse_transform(self, T):
        check_is_fitted(self, "network_")
        T = check_array(T, dtype=np.dtype(self.dtype))
        return self.network_.inverse_features(T).data

    def _pair(self, class_pair):
        if class_pair is None:
            return None
        return tuple(int(k) for k in self._encoder.transform(list(class_pair)))

    def explain(self, x, class_pair=None):
        """Boundary projection report for one sample; ``class_pair`` uses original labels."""
        check_is_fitted(self, "network_")
        return explain_decision(self.network_, x, self._pair(class_pair))

    def feature_importances(self, X, class_pair=None):
        """``N x d`` matrix of per-sample importances for vector inputs."""
        check_is_fitted(self, "network_")
        X = self._check_X(X)
        pair = self._pair(class_pair)
        return np.stack([feature_importance(self.network_, x, pair).values for x in X])
