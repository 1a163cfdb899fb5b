"""scikit-learn classifier around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .costmodel import CostParams
from .data import Dataset
from .feedback import FeedbackMode, init_feedback
from .network import LayerSpec, NetworkConfig, build_network, forward
from .pruner import PruneConfig
from .trainer import EVAL_BATCH, TrainConfig, train

__all__ = ["EfficientGradClassifier", "mlp_layers", "small_cnn_layers"]


def mlp_layers(hidden: tuple[int, ...], batch_norm: bool = False) -> list[dict]:
    layers: list[dict] = []
    for h in hidden:
        layers.append({"kind": "Linear", "out_features": int(h)})
        if batch_norm:
            layers.append({"kind": "BatchNorm"})
        layers.append({"kind": "ReLU"})
    return layers


def small_cnn_layers(channels: tuple[int, ...] = (16, 32)) -> list[dict]:
    """conv3x3-BN-ReLU-maxpool blocks; the classifier head is appended by the estimator."""
    layers: list[dict] = []
    for c in channels:
        layers += [
            {"kind": "Conv2d", "out_channels": int(c), "kernel_size": 3, "pad": 1},
            {"kind": "BatchNorm"},
            {"kind": "ReLU"},
            {"kind": "MaxPool2d", "kernel_size": 2},
        ]
    return layers


class EfficientGradClassifier(ClassifierMixin, BaseEstimator):
    """Neural-network classifier trained with a selectable feedback rule.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of hidden fully-connected layers, used when ``layers`` is None.
    layers : list of dict or None
        Explicit hidden layer specs (``LayerSpec`` fields). A final
        ``Linear`` head and softmax cross-entropy loss are always appended.
    input_shape : tuple of int or None
        Per-sample shape; defaults to the shape of ``X`` without its first axis.
    feedback : {"bp", "fa", "signsym", "binarysign"}
    feedback_overrides : dict or None
        Per-layer mode overrides keyed by layer index.
    prune_rate : float
        Target fraction of errors inside the pruning band; 0 disables pruning.
    """

    def __init__(
        self,
        hidden_layer_sizes=(100,),
        layers=None,
        input_shape=None,
        feedback="signsym",
        feedback_overrides=None,
        prune_rate=0.0,
        lr=0.05,
        momentum=0.9,
        batch_size=64,
        epochs=5,
        dtype="float32",
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.layers = layers
        self.input_shape = input_shape
        self.feedback = feedback
        self.feedback_overrides = feedback_overrides
        self.prune_rate = prune_rate
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.dtype = dtype
        self.random_state = random_state

    def _reshape(self, X: np.ndarray) -> np.ndarray:
        shape = tuple(self.input_shape) if self.input_shape is not None else X.shape[1:]
        return X.reshape((X.shape[0],) + shape)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        X = self._reshape(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        hidden = self.layers if self.layers is not None else mlp_layers(tuple(self.hidden_layer_sizes))
        specs = [LayerSpec.from_dict(dict(l)) for l in hidden]
        specs += [LayerSpec("Linear", out_features=len(self.classes_)), LayerSpec("SoftmaxCrossEntropy")]
        seed = 0 if self.random_state is None else int(self.random_state)
        self.network_ = build_network(NetworkConfig(X.shape[1:], specs, self.dtype), seed)
        overrides = {int(k): v for k, v in (self.feedback_overrides or {}).items()}
        cfg = TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr=self.lr,
            momentum=self.momentum,
            feedback=FeedbackMode(self.feedback, overrides),
            prune=PruneConfig(rate=self.prune_rate, enabled=self.prune_rate > 0),
            cost=CostParams(),
            seed=seed,
        )
        self.feedback_state_ = init_feedback(self.network_, cfg.feedback, seed)
        ds = Dataset(X, y_idx, len(self.classes_))
        self.report_ = train(self.network_, ds, cfg, feedback=self.feedback_state_)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        X = self._reshape(X)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}")
        out = [forward(self.network_, X[s : s + EVAL_BATCH], training=False)[2] for s in range(0, len(X), EVAL_BATCH)]
        return np.concatenate(out).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
