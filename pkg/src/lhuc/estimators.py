"""scikit-learn style wrappers.

``fit`` trains a speaker-independent network, or a SAT-LHUC network when
``sat_gamma`` is set and speaker ids are passed. ``adapt`` estimates a
transform for one cluster; ``predict`` routes each row through its cluster's
transform when ``clusters`` is given.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adapter import AdaptConfig, adapt, pseudo_label
from .model import SI_CLUSTER, LhucTransform, NetworkParams, TransformBank, forward
from .synth import FrameDataset
from .tensor import softmax
from .trainer import SatConfig, TrainConfig, train_sat, train_si

__all__ = ["LHUCClassifier", "LHUCRegressor"]


class _LHUCBase(BaseEstimator):
    _output_kind = "softmax_classifier"

    def __init__(
        self,
        hidden_sizes=(64, 64),
        learning_rate=0.08,
        batch_size=32,
        max_epochs=20,
        sat_gamma=None,
        kind="exp",
        adapt_lr=0.8,
        adapt_sweeps=1,
        adapt_batch_size=32,
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.sat_gamma = sat_gamma
        self.kind = kind
        self.adapt_lr = adapt_lr
        self.adapt_sweeps = adapt_sweeps
        self.adapt_batch_size = adapt_batch_size
        self.random_state = random_state

    # subclasses map targets to and from the network's label space
    def _fit_targets(self, y):
        raise NotImplementedError

    def _encode(self, y):
        raise NotImplementedError

    def _n_outputs(self, y_enc):
        raise NotImplementedError

    def _dataset(self, X, y_enc, speakers):
        n_classes = len(self.classes_) if self._output_kind == "softmax_classifier" else None
        return FrameDataset(X, y_enc, speakers, None, None, n_classes)

    def fit(self, X, y, speakers=None):
        X, y = check_X_y(X, y, multi_output=self._output_kind == "linear_regressor", y_numeric=True
                         if self._output_kind == "linear_regressor" else False)
        self._fit_targets(y)
        y_enc = self._encode(y)
        seed = 0 if self.random_state is None else int(self.random_state)
        sizes = [X.shape[1], *[int(h) for h in self.hidden_sizes], self._n_outputs(y_enc)]
        p0 = NetworkParams.initialize(sizes, self._output_kind, seed=seed)
        cfg = TrainConfig(initial_lr=self.learning_rate, batch_size=self.batch_size,
                          max_epochs=self.max_epochs, seed=seed)
        self.n_features_in_ = X.shape[1]
        self.transforms_ = {}
        if self.sat_gamma is not None:
            if speakers is None:
                raise ValueError("SAT training (sat_gamma set) needs per-row speaker ids")
            speakers = np.asarray(speakers, dtype=np.int64)
            if speakers.shape != (X.shape[0],):
                raise ValueError(f"speakers has shape {speakers.shape}, expected ({X.shape[0]},)")
            data = self._dataset(X, y_enc, speakers)
            self.params_, self.bank_, self.training_curve_ = train_sat(
                data, p0, cfg, SatConfig(gamma=self.sat_gamma, seed=seed), kind=self.kind)
        else:
            data = self._dataset(X, y_enc, np.zeros(X.shape[0], dtype=np.int64))
            self.params_, self.training_curve_ = train_si(data, p0, cfg)
            self.bank_ = None
        return self

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return X

    def _routing(self, n, clusters):
        """Bank and per-row routes; unknown clusters fall back to cluster 0."""
        bank = TransformBank(self.kind, {SI_CLUSTER: LhucTransform.identity(self.params_, self.kind)})
        if self.bank_ is not None:
            for cid in self.bank_.cluster_ids:
                bank[cid] = self.bank_[cid]
        for cid, t in self.transforms_.items():
            bank[cid] = t
        if clusters is None:
            return bank, np.full(n, SI_CLUSTER, dtype=np.int64)
        clusters = np.asarray(clusters, dtype=np.int64)
        if clusters.shape != (n,):
            raise ValueError(f"clusters has shape {clusters.shape}, expected ({n},)")
        known = np.isin(clusters, bank.cluster_ids)
        return bank, np.where(known, clusters, SI_CLUSTER)

    def _outputs(self, X, clusters=None):
        X = self._check_X(X)
        bank, routes = self._routing(X.shape[0], clusters)
        return forward(self.params_, bank, routes, X).output

    def adapt(self, X, cluster, y=None):
        """Estimate and store a transform for ``cluster`` from rows ``X``.

        Without ``y`` (classifier only) first-pass predictions serve as targets.
        """
        X = self._check_X(X)
        cluster = int(cluster)
        if cluster == SI_CLUSTER:
            raise ValueError("cluster 0 is the speaker-independent transform and cannot be adapted")
        if y is None:
            if self._output_kind != "softmax_classifier":
                raise ValueError("regression adaptation needs targets y")
            labels = pseudo_label(self.params_, self.bank_, FrameDataset(X, np.zeros(len(X)), np.zeros(len(X))))
        else:
            labels = self._encode(np.asarray(y))
        data = FrameDataset(X, labels, np.full(len(X), cluster),
                            n_classes=len(self.classes_) if self._output_kind == "softmax_classifier" else None)
        cfg = AdaptConfig(lr=self.adapt_lr, sweeps=self.adapt_sweeps, kind=self.kind,
                          batch_size=self.adapt_batch_size, supervised=y is not None)
        self.transforms_[cluster] = adapt(self.params_, data, data.labels, cfg)
        return self


class LHUCClassifier(ClassifierMixin, _LHUCBase):
    """Sigmoid MLP classifier with per-cluster hidden-unit amplitudes."""

    _output_kind = "softmax_classifier"

    def _fit_targets(self, y):
        self.classes_ = np.unique(y)

    def _encode(self, y):
        y = np.asarray(y)
        idx = np.clip(np.searchsorted(self.classes_, y), 0, len(self.classes_) - 1)
        if np.any(self.classes_[idx] != y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    def _n_outputs(self, y_enc):
        return max(2, len(self.classes_))

    def predict_proba(self, X, clusters=None):
        out = self._outputs(X, clusters)
        return softmax(out)[:, : len(self.classes_)]

    def predict(self, X, clusters=None):
        out = self._outputs(X, clusters)
        return self.classes_[np.argmax(out[:, : len(self.classes_)], axis=1)]


class LHUCRegressor(RegressorMixin, _LHUCBase):
    """Sigmoid MLP regressor with per-cluster hidden-unit amplitudes."""

    _output_kind = "linear_regressor"

    def _fit_targets(self, y):
        self.single_output_ = np.ndim(y) == 1

    def _encode(self, y):
        y = np.asarray(y, dtype=np.float64)
        return y.reshape(len(y), -1)

    def _n_outputs(self, y_enc):
        return y_enc.shape[1]

    def predict(self, X, clusters=None):
        out = self._outputs(X, clusters)
        return out[:, 0] if self.single_output_ else out
