"""scikit-learn front ends: a quantizer transformer and a quantized-network classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .core import QuantLevels, ideal_quantize, quantize_codes, soft_quantize
from .datasets import Dataset, normalize
from .exceptions import ConfigurationError
from .initializers import initialize_quantizer
from .nn import SGD, Network
from .training import (
    PhasePlan,
    StepLR,
    TemperatureSchedule,
    build_quantized_network,
    finalize,
    train,
    train_float,
)


class SoftQuantizer(TransformerMixin, BaseEstimator):
    """Fit quantizer scales and biases to data, then map values onto the level grid.

    ``output="soft"`` applies the sigmoid relaxation at ``temperature``,
    ``"hard"`` the step form, ``"codes"`` the integer level index values.
    Every entry of ``X`` shares one quantizer.
    """

    def __init__(self, levels="ternary", temperature=10.0, output="hard", kind="weight",
                 bias_init="kmeans", seed=0):
        self.levels = levels
        self.temperature = temperature
        self.output = output
        self.kind = kind
        self.bias_init = bias_init
        self.seed = seed

    def fit(self, X, y=None):
        X = validate_data(self, X, ensure_all_finite=True)
        if self.output not in ("soft", "hard", "codes"):
            raise ConfigurationError(f"output must be soft, hard or codes, got {self.output!r}")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        self.levels_ = QuantLevels.from_spec(self.levels)
        params, self.report_ = initialize_quantizer(self.levels_, X, kind=self.kind,
                                                    method=self.bias_init, seed=self.seed)
        self.params_ = params.replace(temperature=float(self.temperature))
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, reset=False)
        if self.output == "soft":
            return soft_quantize(X, self.levels_, self.params_)
        if self.output == "codes":
            return quantize_codes(X, self.levels_, self.params_)
        return ideal_quantize(X, self.levels_, self.params_)


class QuantizationNetworkClassifier(ClassifierMixin, BaseEstimator):
    """Float pre-training followed by annealed quantization-aware training.

    ``input_shape`` reshapes each row (e.g. ``(1, 8, 8)`` for image tasks);
    ``arch`` may contain ``{classes}``. After ``fit``, ``predict`` runs the
    finalized hard-quantized model.
    """

    def __init__(self, arch="linear:32,relu,linear:32,relu,linear:{classes}", input_shape=None,
                 weight_levels="ternary", activation_levels=None, pretrain_epochs=10, epochs=10, temperature_rate=20.0,
                 pretrain_lr=0.05, lr=0.01, momentum=0.9, weight_decay=5e-4, batch_size=64, seed=0):
        self.arch = arch
        self.input_shape = input_shape
        self.weight_levels = weight_levels
        self.activation_levels = activation_levels
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.temperature_rate = temperature_rate
        self.pretrain_lr = pretrain_lr
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    def _shape(self, X):
        shape = tuple(self.input_shape) if self.input_shape else (X.shape[1],)
        if int(np.prod(shape)) != X.shape[1]:
            raise ConfigurationError(f"input_shape {shape} does not match {X.shape[1]} features")
        return shape

    def fit(self, X, y):
        X, y = validate_data(self, X, y, ensure_all_finite=True)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigurationError("need at least two classes; got 1 class")
        shape = self._shape(X)
        Xn, self.mean_, self.std_ = normalize(X.astype(np.float64))
        data = Dataset(Xn.reshape((-1, *shape)), codes, shape, len(self.classes_))
        net = Network.from_arch(self.arch.replace("{classes}", str(len(self.classes_))), shape, self.seed)
        if self.pretrain_epochs:
            net, _ = train_float(net, data, data, self.pretrain_epochs, self.seed, lr=self.pretrain_lr,
                                 momentum=self.momentum, weight_decay=self.weight_decay,
                                 batch_size=self.batch_size)
        net = build_quantized_network(net, self.weight_levels, self.activation_levels, data.X, self.seed)
        plan = PhasePlan.default(self.epochs, with_activations=self.activation_levels is not None)
        opt = SGD(self.lr, self.momentum, self.weight_decay, 5.0)
        milestones = tuple(m for m in (int(self.epochs * 0.6), int(self.epochs * 0.85)) if m > 1)
        self.network_, self.metrics_ = train(net, data, data, plan, TemperatureSchedule(self.temperature_rate),
                                             opt, self.epochs, self.seed, batch_size=self.batch_size,
                                             lr_schedule=StepLR(self.lr, milestones))
        self.model_ = finalize(self.network_)
        return self

    def _prepare(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False)
        Xn, _, _ = normalize(check_array(X, dtype=np.float64), self.mean_, self.std_)
        return Xn.reshape((-1, *self.model_.input_shape))

    def predict(self, X):
        X = self._prepare(X)
        return self.classes_[self.model_.predict(X)]

    def predict_proba(self, X):
        X = self._prepare(X)
        logits = self.model_.forward(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)
