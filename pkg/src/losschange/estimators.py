"""scikit-learn style wrapper: train an MLP while recording its trajectory, then allocate loss changes."""
import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .analysis import helping_stats, layer_totals
from .lca import DEFAULT_MAX_DEPTH, DEFAULT_TOL, compute_lca
from .nn import Dataset, LayerLayout, MLPObjective, init_params, predict_proba
from .optim import OptimConfig
from .trajectory import record


class LcaMLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP with softmax output, trained by minibatch SGD/Adam.

    After ``fit`` the recorded trajectory is in ``trajectory_`` and, unless
    ``allocate=False``, the per-parameter per-iteration loss change allocation
    in ``lca_``. The trajectory file goes to ``trajectory_path`` or a temporary
    directory owned by the estimator.
    """

    def __init__(self, hidden=(100, 50), optimizer="sgd", lr=0.05, momentum=0.9,
                 batch_size=256, n_iter=880, seed=0, allocate=True, tol=DEFAULT_TOL,
                 max_depth=DEFAULT_MAX_DEPTH, trajectory_path=None):
        self.hidden = hidden
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.seed = seed
        self.allocate = allocate
        self.tol = tol
        self.max_depth = max_depth
        self.trajectory_path = trajectory_path

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        data = Dataset(X, codes, self.classes_.size, "fit")
        arch = [X.shape[1], *[int(h) for h in self.hidden], self.classes_.size]
        self.layout_ = LayerLayout.from_arch(arch)
        objective = MLPObjective(self.layout_, data)
        cfg = OptimConfig(kind=self.optimizer, lr=self.lr, momentum=self.momentum,
                          adam_beta1=self.momentum if self.optimizer == "adam" else 0.9,
                          batch_size=min(self.batch_size, X.shape[0]))
        path = self.trajectory_path
        if path is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="lca-")
            path = Path(self._tmp.name) / "trajectory.lcat"
        self.trajectory_ = record(path, objective, init_params(arch, self.seed), cfg,
                                  self.layout_, self.n_iter, self.seed, loss_every=0)
        self.theta_ = self.trajectory_.snapshot(self.trajectory_.n_steps)
        self.lca_ = (compute_lca(self.trajectory_, objective, self.tol, self.max_depth)
                     if self.allocate else None)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_proba(self.theta_, self.layout_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def layer_totals(self):
        check_is_fitted(self, "lca_")
        if self.lca_ is None:
            raise ValueError("fitted with allocate=False")
        return layer_totals(self.lca_, self.layout_).as_dict()

    def helping_stats(self):
        check_is_fitted(self, "lca_")
        if self.lca_ is None:
            raise ValueError("fitted with allocate=False")
        return helping_stats(self.lca_, self.layout_)
