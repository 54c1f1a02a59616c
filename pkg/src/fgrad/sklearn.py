"""scikit-learn style estimator around the block trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import AugmentSpec, Dataset, iterate_minibatches
from .estimators import EstimatorConfig
from .guesses import GuessSpec, TargetSpec
from .layers import log_softmax
from .models import attach_auxiliaries, build_backbone
from .trainer import RunPlan, Schedule, Trainer, spawn_streams


class ForwardGradientClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained block by block with forward-gradient updates.

    ``X`` is ``[n, C, H, W]``, ``[n, H, W]`` or ``[n, d]`` together with
    ``image_shape``. Inputs are standardized per channel with statistics of
    the training data.
    """

    def __init__(self, preset="micro4", guess="local", target="global", space="weight", path="two_pass",
                 aux_kind="cnn", h_chan=None, n_depth=None, lr=0.05, momentum=0.9, weight_decay=5e-4,
                 epochs=5, batch_size=64, image_shape=None, random_state=0):
        self.preset = preset
        self.guess = guess
        self.target = target
        self.space = space
        self.path = path
        self.aux_kind = aux_kind
        self.h_chan = h_chan
        self.n_depth = n_depth
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.image_shape = image_shape
        self.random_state = random_state

    def _images(self, X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2:
            if self.image_shape is None:
                raise ValueError("2-D input needs image_shape=(C, H, W)")
            X = X.reshape((len(X),) + tuple(self.image_shape))
        elif X.ndim == 3:
            X = X[:, None]
        elif X.ndim != 4:
            raise ValueError(f"expected 2-D, 3-D or 4-D input, got {X.ndim}-D")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        X = self._images(X)
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        labels = self._le.transform(y)
        seed = 0 if self.random_state is None else int(self.random_state)
        ds = Dataset(X, labels, "train", len(self.classes_), augment=AugmentSpec.none())
        self.mean_, self.std_ = ds.compute_stats()
        ds = ds.with_stats(self.mean_, self.std_)
        net = build_backbone(self.preset, input_shape=X.shape[1:], class_count=len(self.classes_), seed=seed)
        if self.aux_kind is not None:
            attach_auxiliaries(net, self.aux_kind, self.h_chan, self.n_depth, seed=seed)
        random_guess = self.guess in ("gaussian", "rademacher", "exact")
        plan = RunPlan(EstimatorConfig(GuessSpec(self.guess), TargetSpec(self.target), self.space, path=self.path),
                       Schedule(self.lr), epochs=self.epochs, batch_size=self.batch_size, seed=seed,
                       aux_training="detached_logging" if random_guess else "co_trained",
                       momentum=self.momentum, weight_decay=self.weight_decay, diagnostics="off")
        rngs = spawn_streams(seed)
        trainer = Trainer(net, plan, rngs)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            trainer.set_epoch(epoch)
            losses = [trainer.train_step(xb, yb).get("loss", np.nan)
                      for xb, yb in iterate_minibatches(ds, self.batch_size, rngs["data"])]
            self.loss_curve_.append(float(np.nanmean(losses)))
        self.network_ = net
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _standardize(self, X):
        return ((X - self.mean_[None, :, None, None]) / self.std_[None, :, None, None]).astype(np.float32)

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = self._images(check_array(X, allow_nd=True, dtype=np.float32))
        return self.network_.predict_logits(self._standardize(X))

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X).astype(np.float64)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
