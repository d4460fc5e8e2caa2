"""Scikit-learn style facade over the probe trainer.

:class:`FusionProbeClassifier` exposes the attentive and linear probes as a
``fit``/``predict``/``predict_proba`` estimator on in-memory arrays, so the
method composes with sklearn pipelines and model-selection utilities.  ``X``
is either ``[N, R, d]`` (R stacked representations per sample, already
normalized/padded) or ``[N, d]`` (treated as a single-row stack).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .analysis import balanced_accuracy
from .probes import ProbeConfig, probe_forward, resolve_heads
from .reprstore import LayerScheme, StackedBatch
from .trainer import build_plan, train_on_arrays

__all__ = ["FusionProbeClassifier", "check_stacked_features", "check_labels"]


def check_stacked_features(X, *, expected_rows: int | None = None, expected_dim: int | None = None):
    """Validate and coerce features to a float64 [N, R, d] stack."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ValueError(f"expected [N, d] or [N, R, d] features, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty feature array")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if expected_rows is not None and X.shape[1] != expected_rows:
        raise ValueError(f"expected {expected_rows} stacked rows, got {X.shape[1]}")
    if expected_dim is not None and X.shape[2] != expected_dim:
        raise ValueError(f"expected feature width {expected_dim}, got {X.shape[2]}")
    return X


def check_labels(y, n_samples: int):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"labels must be a length-{n_samples} vector, got shape {y.shape}")
    return y


class FusionProbeClassifier(BaseEstimator, ClassifierMixin):
    """Attentive or linear probe over stacked frozen representations.

    Parameters
    ----------
    kind : "attentive" or "linear"
        Attention-based fusion with a learned query, or a plain linear
        classifier on the concatenated rows.
    heads : "auto" or int
        Head count for the attentive probe; "auto" matches the number of
        stacked rows (falling back to the largest divisor of 2d below it).
    learning_rate, weight_decay, attn_dropout, epochs, batch_size :
        Optimization hyperparameters; the schedule is stretched so every
        run performs at least 1000 updates with at least 5 batches/epoch.
    jitter_sigma, jitter_prob, grad_clip :
        Train-time regularization (Gaussian feature jitter, global-norm
        gradient clipping).
    random_state : int
        Seed for initialization, shuffling, dropout, and jitter streams.
    """

    def __init__(
        self,
        kind: str = "attentive",
        heads="auto",
        learning_rate: float = 0.01,
        weight_decay: float = 1e-4,
        attn_dropout: float = 0.0,
        epochs: int = 40,
        batch_size: int = 2048,
        jitter_sigma: float = 0.05,
        jitter_prob: float = 0.5,
        grad_clip: float = 5.0,
        random_state: int = 0,
    ):
        self.kind = kind
        self.heads = heads
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.attn_dropout = attn_dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.jitter_sigma = jitter_sigma
        self.jitter_prob = jitter_prob
        self.grad_clip = grad_clip
        self.random_state = random_state

    def _build_config(self, R: int, d: int, K: int) -> ProbeConfig:
        if self.kind == "attentive":
            probe_kind = "attentive_fusion"
            num_heads, fallback = resolve_heads(self.heads, R, d)
        elif self.kind == "linear":
            probe_kind = "linear_concat" if R > 1 else "linear_cls"
            num_heads, fallback = 1, False
        else:
            raise ValueError(f"kind must be 'attentive' or 'linear', got {self.kind!r}")
        return ProbeConfig(
            kind=probe_kind,
            layers=LayerScheme("custom", tuple(range(1, R + 1))),
            tokens=("CLS",),
            resolved_layers=tuple(range(1, R + 1)),
            num_rows=R,
            d_model=d,
            num_classes=K,
            num_heads=num_heads,
            heads_fallback=fallback,
            attn_dropout=self.attn_dropout,
        )

    def _batch(self, X: np.ndarray, y: np.ndarray | None = None) -> StackedBatch:
        tags = [("CLS", r + 1) for r in range(X.shape[1])]
        labels = y if y is not None else np.zeros(X.shape[0], dtype=np.int64)
        return StackedBatch(X, tags, labels)

    def fit(self, X, y):
        X = check_stacked_features(X)
        y = check_labels(y, X.shape[0])
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        _, R, d = X.shape
        self.n_features_in_ = R * d
        cfg = self._build_config(R, d, len(self.classes_))
        plan = build_plan(
            X.shape[0],
            lr_max=self.learning_rate,
            weight_decay=self.weight_decay,
            attn_dropout=self.attn_dropout,
            batch_size=self.batch_size,
            epochs=self.epochs,
            grad_clip=self.grad_clip,
            jitter_sigma=self.jitter_sigma,
            jitter_prob=self.jitter_prob,
            seed=self.random_state,
        )
        self.probe_, self.history_ = train_on_arrays(cfg, plan, self._batch(X, y_enc))
        self.config_ = cfg
        return self

    def _check_fitted(self):
        if not hasattr(self, "probe_"):
            raise NotFittedError("call fit before predict")

    def decision_function(self, X):
        self._check_fitted()
        X = check_stacked_features(
            X, expected_rows=self.config_.num_rows, expected_dim=self.config_.d_model
        )
        logits, _, _ = probe_forward(self.probe_, self._batch(X), train=False)
        return logits

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def score(self, X, y, sample_weight=None):
        """Balanced accuracy (mean per-class recall), the package's metric."""
        preds = self.predict(X)
        index = {c: i for i, c in enumerate(self.classes_)}
        try:
            enc_true = np.array([index[v] for v in np.asarray(y)])
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} was not seen during fit") from None
        enc_pred = np.array([index[v] for v in preds])
        return balanced_accuracy(enc_pred, enc_true, len(self.classes_))
