"""scikit-learn style wrappers around sign estimation, transport and subset selection."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import FeatureSet, LabeledDataset
from .model import ModelSpec, predict
from .param_space import ParamVector, TaskVector, sign_of
from .selection import HEURISTICS, flatten_selection, select
from .signs import estimate_signs
from .transport import TransportConfig, build_delta, build_mask, transport

__all__ = ["GradFixTransporter", "SubsetSelector"]


class GradFixTransporter(ClassifierMixin, BaseEstimator):
    """Transport ``tau_A`` onto ``theta_B`` using signs estimated from ``(X, y)``.

    ``fit`` takes the labeled supervision subset; afterwards the estimator
    predicts with the transported parameters ``theta_``.
    """

    def __init__(self, spec: ModelSpec | None = None, theta_B: ParamVector | None = None, tau_A: TaskVector | None = None, alpha=1.0, mask_strategy="agreement", aggregation="majority", zero_tol=0.0, seed=None):
        self.spec = spec
        self.theta_B = theta_B
        self.tau_A = tau_A
        self.alpha = alpha
        self.mask_strategy = mask_strategy
        self.aggregation = aggregation
        self.zero_tol = zero_tol
        self.seed = seed

    def fit(self, X, y):
        if self.spec is None or self.theta_B is None or self.tau_A is None:
            raise ValueError("spec, theta_B and tau_A must be set before fit")
        X, y = check_X_y(X, y, dtype=np.float64)
        cfg = TransportConfig(self.alpha, self.mask_strategy, "gradient_signs", self.aggregation, self.seed)
        data = LabeledDataset(X, y.astype(np.int64), split="support", num_classes=self.spec.num_classes)
        self.estimate_ = estimate_signs(self.theta_B, data, self.spec, cfg.aggregation, self.zero_tol)
        self.mask_ = build_mask(cfg.mask_strategy, sign_of(self.tau_A, self.zero_tol), self.estimate_.signs, seed=cfg.seed)
        self.delta_ = build_delta(self.mask_, self.tau_A, cfg.alpha)
        self.theta_ = transport(self.theta_B, self.delta_, cfg.reference)
        self.classes_ = np.arange(self.spec.num_classes)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        return predict(self.theta_, X, self.spec)


class SubsetSelector(TransformerMixin, BaseEstimator):
    """Pick ``budget`` rows per class from embeddings ``X`` with labels ``y``.

    Rows are L2-normalized before structured heuristics run.  ``support_``
    holds the selected row indices grouped by class; ``transform`` returns
    those rows of its input.
    """

    def __init__(self, heuristic="random", budget=1, seed=None, coverage=False):
        self.heuristic = heuristic
        self.budget = budget
        self.seed = seed
        self.coverage = coverage

    def fit(self, X, y):
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"heuristic must be one of {HEURISTICS}")
        if self.heuristic == "random" and self.seed is None:
            raise ValueError("random selection needs a seed")
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        valid = norms[:, 0] > 0
        Z = np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)
        features = FeatureSet(Z, y, np.arange(len(y)), valid)
        data = LabeledDataset(X, y, split="pool")
        self.selection_ = select(self.heuristic, self.budget, data=data, features=features, seed=self.seed, coverage=self.coverage)
        self.support_ = np.array(flatten_selection(self.selection_), dtype=np.int64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "support_")
        X = check_array(X)
        return X[self.support_]
