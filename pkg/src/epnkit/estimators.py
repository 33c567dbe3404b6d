"""Scikit-learn style estimators wrapping the equivariant networks.

Both estimators take lists of (N, 3) point clouds as X. They follow the
fit/predict/get_params conventions so they compose with model selection
and pipeline tooling; all randomness is owned by the `seed` parameter and
training is bit-reproducible for a fixed configuration.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .geom import angles_to
from .group import build_group
from .train.config import TrainConfig
from .train.network import ClassifierNetwork, PoseNetwork
from .train.optim import Adam, decayed_learning_rate
from .validation import as_cloud_list, as_rotation_stack

_GROUP_CACHE: dict = {}


def _cached_group(kind: str):
    if kind not in _GROUP_CACHE:
        _GROUP_CACHE[kind] = build_group(kind)
    return _GROUP_CACHE[kind]


class _TrainLoopMixin:
    def _train(self, network, samples, rng):
        """Minibatch Adam loop over (cloud, target) pairs; accumulated
        gradients are averaged over the batch. Single-threaded, in-order
        reduction, so results are reproducible bit for bit."""
        params = network.params()
        adam = Adam(params, self.learning_rate, self.beta1, self.beta2)
        history = []
        n = len(samples)
        for it in range(self.n_iterations):
            idx = rng.integers(0, n, self.batch_size)
            network.zero_grads()
            losses = []
            for i in idx:
                cloud, target = samples[i]
                loss, _ = network.loss_and_grads(cloud, target, update_stats=True)
                losses.append(loss)
            mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise RuntimeError(
                    f"training diverged (non-finite loss) at iteration {it}; seed={self.seed}"
                )
            grads = {k: g / len(idx) for k, g in network.grads().items()}
            adam.step(grads, decayed_learning_rate(self.learning_rate, it, self.lr_half_every))
            history.append(mean_loss)
        return history

    def _config(self, **extra) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            batch_size=self.batch_size,
            iterations=self.n_iterations,
            lr_half_every=self.lr_half_every,
            group=self.group,
            levels=len(self.channels),
            stride=self.stride,
            radii=tuple(self.radii),
            k_max=tuple(self.k_max),
            channels=tuple(self.channels),
            kernel_points=self.kernel_points,
            group_neighbors=self.group_neighbors,
            sigma_scale=self.sigma_scale,
            **extra,
        )

    def _check_fitted(self):
        if getattr(self, "network_", None) is None:
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")


class EquivariantPoseEstimator(_TrainLoopMixin, BaseEstimator):
    """Predicts the rotation applied to a point cloud.

    head="detection" classifies the nearest group element and regresses a
    small residual from that anchor; head="quaternion" is a plain direct
    regression baseline on the same backbone.
    """

    def __init__(
        self,
        group="icosahedral",
        head="detection",
        channels=(8, 16),
        kernel_points=8,
        group_neighbors=6,
        radii=(0.4, 0.8),
        k_max=(16, 16),
        stride=2,
        head_hidden=32,
        rotation_weight=1.0,
        sigma_scale=0.7,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        batch_size=8,
        n_iterations=500,
        lr_half_every=200,
        seed=0,
    ):
        self.group = group
        self.head = head
        self.channels = channels
        self.kernel_points = kernel_points
        self.group_neighbors = group_neighbors
        self.radii = radii
        self.k_max = k_max
        self.stride = stride
        self.head_hidden = head_hidden
        self.rotation_weight = rotation_weight
        self.sigma_scale = sigma_scale
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.n_iterations = n_iterations
        self.lr_half_every = lr_half_every
        self.seed = seed

    def fit(self, X, y):
        clouds = as_cloud_list(X)
        rotations = as_rotation_stack(y)
        if len(clouds) != rotations.shape[0]:
            raise ValueError("X and y must have the same length")
        cfg = self._config(
            head=self.head, rotation_weight=self.rotation_weight, head_hidden=self.head_hidden
        )
        rng = np.random.default_rng(self.seed)
        self.group_ = _cached_group(self.group)
        self.network_ = PoseNetwork(self.group_, cfg, rng)
        samples = list(zip(clouds, rotations))
        self.loss_history_ = self._train(self.network_, samples, rng)
        return self

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        clouds = as_cloud_list(X)
        return np.stack([self.network_.predict(c) for c in clouds])

    def angular_errors(self, X, y) -> np.ndarray:
        """Per-sample angular error in degrees between predictions and y."""
        predictions = self.predict(X)
        rotations = as_rotation_stack(y)
        return np.array(
            [angles_to(p[None], r)[0] for p, r in zip(predictions, rotations)]
        )

    def score(self, X, y) -> float:
        """Negative median angular error (degrees), so larger is better."""
        return -float(np.median(self.angular_errors(X, y)))

    def parameter_arrays(self) -> dict:
        self._check_fitted()
        return self.network_.params()


class EquivariantCloudClassifier(_TrainLoopMixin, BaseEstimator, ClassifierMixin):
    """Rotation-invariant point cloud classification via group pooling."""

    def __init__(
        self,
        group="icosahedral",
        pooling="attentive",
        temperature=1.0,
        attention_hidden=16,
        channels=(8, 16),
        kernel_points=8,
        group_neighbors=6,
        radii=(0.4, 0.8),
        k_max=(16, 16),
        stride=2,
        sigma_scale=0.7,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        batch_size=8,
        n_iterations=300,
        lr_half_every=150,
        seed=0,
    ):
        self.group = group
        self.pooling = pooling
        self.temperature = temperature
        self.attention_hidden = attention_hidden
        self.channels = channels
        self.kernel_points = kernel_points
        self.group_neighbors = group_neighbors
        self.radii = radii
        self.k_max = k_max
        self.stride = stride
        self.sigma_scale = sigma_scale
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.n_iterations = n_iterations
        self.lr_half_every = lr_half_every
        self.seed = seed

    def fit(self, X, y):
        clouds = as_cloud_list(X)
        labels = np.asarray(y, dtype=np.int64)
        if labels.shape != (len(clouds),):
            raise ValueError("y must hold one integer label per cloud")
        self.classes_ = np.unique(labels)
        index_of = {c: i for i, c in enumerate(self.classes_.tolist())}
        encoded = np.array([index_of[c] for c in labels.tolist()])
        cfg = self._config(temperature=self.temperature, attention_hidden=self.attention_hidden)
        rng = np.random.default_rng(self.seed)
        self.group_ = _cached_group(self.group)
        self.network_ = ClassifierNetwork(
            self.group_, cfg, rng, n_classes=len(self.classes_), pooling=self.pooling
        )
        samples = list(zip(clouds, encoded))
        self.loss_history_ = self._train(self.network_, samples, rng)
        return self

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        clouds = as_cloud_list(X)
        return np.stack([self.network_.forward_logits(c) for c in clouds])

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """Invariant pooled descriptors, one row per cloud."""
        self._check_fitted()
        return np.stack([self.network_.descriptor(c) for c in as_cloud_list(X)])

    def attention_confidence(self, X) -> np.ndarray:
        """Max attention weight per cloud (attentive pooling only)."""
        self._check_fitted()
        return np.array(
            [float(np.max(self.network_.attention_weights(c))) for c in as_cloud_list(X)]
        )

    def parameter_arrays(self) -> dict:
        self._check_fitted()
        return self.network_.params()
