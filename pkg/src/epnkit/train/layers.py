"""Parameter-owning layers wrapping the pure operators with caches for
analytic reverse-mode gradients.

The operator set is small and closed, so there is no autodiff tape: each
layer records its forward pass and `backward` consumes the recorded cache.
Gradients accumulate across calls until `zero_grads`; calling backward
without a recorded forward raises.
"""

import numpy as np

from ..conv import (
    BatchNormState,
    ExplicitKernel,
    _batch_norm_backward,
    _batch_norm_forward,
    _group_conv_backward,
    _group_conv_forward,
    _implicit_conv_backward,
    _implicit_conv_forward,
    _leaky_relu_backward,
    _leaky_relu_forward,
    _point_conv_backward,
    _point_conv_forward,
    group_gather_table,
    make_kernel_points,
)
from ..heads import _ga_pooling_forward, _ga_pooling_grads, _pool_max_forward, _pool_max_grads


class Layer:
    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0

    def _recorded(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward requested but no forward was recorded")
        return self._cache


class Dense(Layer):
    """Affine map along the last axis; shared across all leading axes."""

    def __init__(self, name, c_in, c_out, rng, weight_scale=None, bias_init=None):
        super().__init__(name)
        scale = weight_scale if weight_scale is not None else 1.0 / np.sqrt(c_in)
        self.weights = rng.standard_normal((c_in, c_out)) * scale
        self.bias = np.zeros(c_out) if bias_init is None else np.array(bias_init, dtype=np.float64)
        self.g_weights = np.zeros_like(self.weights)
        self.g_bias = np.zeros_like(self.bias)

    def params(self):
        return {f"{self.name}.weights": self.weights, f"{self.name}.bias": self.bias}

    def grads(self):
        return {f"{self.name}.weights": self.g_weights, f"{self.name}.bias": self.g_bias}

    def forward(self, x):
        self._cache = x
        return x @ self.weights + self.bias

    def backward(self, grad_out):
        x = self._recorded()
        flat_x = x.reshape(-1, x.shape[-1])
        flat_g = grad_out.reshape(-1, grad_out.shape[-1])
        self.g_weights += flat_x.T @ flat_g
        self.g_bias += flat_g.sum(axis=0)
        return grad_out @ self.weights.T


class LeakyReLULayer(Layer):
    def __init__(self, name, slope=0.01):
        super().__init__(name)
        self.slope = slope

    def forward(self, x):
        out, self._cache = _leaky_relu_forward(x, self.slope)
        return out

    def backward(self, grad_out):
        return _leaky_relu_backward(self._recorded(), grad_out)

    def preactivation(self):
        """Last recorded input; used by gradient checks to exclude kinks."""
        return self._recorded()["values"]


class BatchNormLayer(Layer):
    """Always normalizes with the current population's statistics (keeps the
    forward pass equivariant and removes train/eval shift); `update_running`
    controls whether the checkpointed running averages track them."""

    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        super().__init__(name)
        self.state = BatchNormState(
            gamma=np.ones(channels), beta=np.zeros(channels), eps=eps, momentum=momentum
        )
        self.g_gamma = np.zeros(channels)
        self.g_beta = np.zeros(channels)

    def params(self):
        return {f"{self.name}.gamma": self.state.gamma, f"{self.name}.beta": self.state.beta}

    def grads(self):
        return {f"{self.name}.gamma": self.g_gamma, f"{self.name}.beta": self.g_beta}

    def forward(self, x, update_running):
        out, self._cache = _batch_norm_forward(
            x, self.state, use_batch_stats=True, update_running=update_running
        )
        return out

    def backward(self, grad_out):
        grad_x, g_gamma, g_beta = _batch_norm_backward(self._recorded(), grad_out)
        self.g_gamma += g_gamma
        self.g_beta += g_beta
        return grad_x


class PointConvLayer(Layer):
    """Spatial stage: explicit kernel points with learned per-point weights."""

    def __init__(self, name, group, c_in, c_out, n_kernel_points, radius, rng,
                 sigma=None, correlation_kind="linear"):
        super().__init__(name)
        self.group = group
        self.kernel_points = make_kernel_points(n_kernel_points, radius)
        self.radius = radius
        self.sigma = sigma if sigma is not None else 0.7 * radius
        self.correlation_kind = correlation_kind
        scale = 1.0 / np.sqrt(n_kernel_points * c_in)
        self.weights = rng.standard_normal((n_kernel_points, c_in, c_out)) * scale
        self.g_weights = np.zeros_like(self.weights)

    def params(self):
        return {f"{self.name}.weights": self.weights}

    def grads(self):
        return {f"{self.name}.weights": self.g_weights}

    def kernel(self) -> ExplicitKernel:
        return ExplicitKernel(
            self.kernel_points, self.weights, sigma=self.sigma, radius=self.radius,
            correlation_kind=self.correlation_kind,
        )

    def forward(self, coords, values, nbr, counter=None):
        out, self._cache = _point_conv_forward(
            coords, values, self.group.elements, nbr, self.kernel(), counter
        )
        return out

    def backward(self, grad_out):
        grad_values, g_w = _point_conv_backward(self._recorded(), grad_out)
        self.g_weights += g_w
        return grad_values


class GroupConvLayer(Layer):
    """Group-axis stage: gather by precomputed right-translation tables."""

    def __init__(self, name, group, c_in, c_out, k_g, rng):
        super().__init__(name)
        self.gather = group_gather_table(group, k_g)
        scale = 1.0 / np.sqrt(k_g * c_in)
        self.weights = rng.standard_normal((k_g, c_in, c_out)) * scale
        self.g_weights = np.zeros_like(self.weights)

    def params(self):
        return {f"{self.name}.weights": self.weights}

    def grads(self):
        return {f"{self.name}.weights": self.g_weights}

    def forward(self, values, counter=None):
        out, self._cache = _group_conv_forward(values, self.gather, self.weights, counter)
        return out

    def backward(self, grad_out):
        grad_values, g_w = _group_conv_backward(self._recorded(), grad_out)
        self.g_weights += g_w
        return grad_values


class ImplicitConvLayer(Layer):
    def __init__(self, name, group, c_in, c_out, rng):
        super().__init__(name)
        self.group = group
        self.weights = rng.standard_normal((c_in + 3, c_out)) / np.sqrt(c_in + 3)
        self.g_weights = np.zeros_like(self.weights)

    def params(self):
        return {f"{self.name}.weights": self.weights}

    def grads(self):
        return {f"{self.name}.weights": self.g_weights}

    def forward(self, coords, values, nbr, counter=None):
        from ..conv import ImplicitKernelParams

        out, self._cache = _implicit_conv_forward(
            coords, values, self.group.elements, nbr, ImplicitKernelParams(self.weights), counter
        )
        return out

    def backward(self, grad_out):
        grad_values, g_w = _implicit_conv_backward(self._recorded(), grad_out)
        self.g_weights += g_w
        return grad_values


class SPConvBlockLayer(Layer):
    """point conv -> BN -> leaky ReLU -> group conv -> BN -> leaky ReLU."""

    def __init__(self, name, group, c_in, c_out, n_kernel_points, radius, k_g, rng,
                 sigma=None, correlation_kind="linear"):
        super().__init__(name)
        self.point = PointConvLayer(
            f"{name}.point", group, c_in, c_out, n_kernel_points, radius, rng,
            sigma=sigma, correlation_kind=correlation_kind,
        )
        self.bn1 = BatchNormLayer(f"{name}.bn1", c_out)
        self.act1 = LeakyReLULayer(f"{name}.act1")
        self.group_conv = GroupConvLayer(f"{name}.group", group, c_out, c_out, k_g, rng)
        self.bn2 = BatchNormLayer(f"{name}.bn2", c_out)
        self.act2 = LeakyReLULayer(f"{name}.act2")
        self.children = [self.point, self.bn1, self.act1, self.group_conv, self.bn2, self.act2]

    def params(self):
        out = {}
        for child in self.children:
            out.update(child.params())
        return out

    def grads(self):
        out = {}
        for child in self.children:
            out.update(child.grads())
        return out

    def forward(self, coords, values, nbr, update_stats, counter=None):
        x = self.point.forward(coords, values, nbr, counter)
        x = self.act1.forward(self.bn1.forward(x, update_stats))
        x = self.group_conv.forward(x, counter)
        return self.act2.forward(self.bn2.forward(x, update_stats))

    def backward(self, grad_out):
        g = self.bn2.backward(self.act2.backward(grad_out))
        g = self.group_conv.backward(g)
        g = self.bn1.backward(self.act1.backward(g))
        return self.point.backward(g)

    def preactivations(self):
        return [self.act1.preactivation(), self.act2.preactivation()]


class SpatialMeanPool(Layer):
    """(M, |G|, C) -> (|G|, C) channelwise mean over the point axis."""

    def forward(self, values):
        self._cache = values.shape[0]
        return values.mean(axis=0)

    def backward(self, grad_out):
        m = self._recorded()
        return np.broadcast_to(grad_out / m, (m,) + grad_out.shape).copy()


class SoftmaxLayer(Layer):
    def forward(self, logits):
        z = logits - logits.max()
        p = np.exp(z)
        p /= p.sum()
        self._cache = p
        return p

    def backward(self, grad_out):
        p = self._recorded()
        return p * (grad_out - p @ grad_out)


class GAPoolLayer(Layer):
    """Group attentive pooling of (|G|, C) features with (|G|,) attention."""

    def __init__(self, name, temperature=1.0):
        super().__init__(name)
        self.temperature = temperature

    def forward(self, values_g, attention):
        out, self._cache = _ga_pooling_forward(values_g, attention, self.temperature)
        return out

    def backward(self, grad_out):
        return _ga_pooling_grads(self._recorded(), grad_out)


class GroupMaxPool(Layer):
    def forward(self, values_g):
        out, self._cache = _pool_max_forward(values_g)
        return out

    def backward(self, grad_out):
        return _pool_max_grads(self._recorded(), grad_out)


class GroupMeanPool(Layer):
    def forward(self, values_g):
        self._cache = values_g.shape[0]
        return values_g.mean(axis=0)

    def backward(self, grad_out):
        a = self._recorded()
        return np.broadcast_to(grad_out / a, (a,) + grad_out.shape).copy()
