"""Core operators on rotation-group-indexed point features.

A feature map attaches an (n_points, |G|, channels) value array to point
coordinates: slot (i, a) holds the feature of point i evaluated in the
frame of group element a. Two separable convolutions act on it:

- point convolution: spatial correlation against explicit kernel points,
  evaluated per group element in that element's rotated frame;
- group convolution: a gather along the group axis by right translation
  (slot a reads slot index(g_a @ tap^-1)) followed by per-tap weights.

A naive joint operator over (kernel point) x (kernel rotation) pairs is
kept as the oracle for separability checks and as the benchmark baseline.

Every operator is a pure function; the module-private ``*_forward`` /
``*_backward`` pairs carry caches for analytic reverse-mode gradients and
are shared with the training layers.
"""

from dataclasses import dataclass, field

import numpy as np

from .group import FiniteRotationGroup
from .geom import angles_to
from .validation import as_points, as_rotation

LEAKY_SLOPE = 0.01

_KERNEL_REPULSION_ITERS = 200
_KERNEL_INIT_SHELL = 0.7
_KERNEL_STEP = 0.01


class MacCounter:
    """Exact multiply-accumulate bookkeeping for the weight stage of each
    convolution (the channel-bearing contractions; correlation arithmetic
    is not counted)."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


@dataclass
class FeatureMap:
    """Features F(x_i, g_a): an (N, |G|, D) array attached to N coordinates."""

    coords: np.ndarray
    values: np.ndarray
    group: FiniteRotationGroup

    def __post_init__(self) -> None:
        self.coords = as_points(self.coords, "coords")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"values must be (N, |G|, D), got shape {self.values.shape}")
        n, a, d = self.values.shape
        if n != self.coords.shape[0]:
            raise ValueError("values and coords disagree on the number of points")
        if a != len(self.group):
            raise ValueError(f"group axis {a} does not match group order {len(self.group)}")
        if d < 1:
            raise ValueError("feature dimension must be >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values contain non-finite entries")

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def ones_feature_map(coords, group: FiniteRotationGroup) -> FeatureMap:
    """Scalar input lifting: F(x, g) = 1 for every point and group element."""
    coords = as_points(coords)
    return FeatureMap(coords, np.ones((coords.shape[0], len(group), 1)), group)


@dataclass(frozen=True)
class ExplicitKernel:
    """Kernel points inside a radius-`radius` ball with per-point weights."""

    points: np.ndarray  # (K, 3)
    weights: np.ndarray  # (K, C_in, C_out)
    sigma: float
    radius: float
    correlation_kind: str = "linear"

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("kernel points must be (K, 3)")
        if self.weights.shape[0] != self.points.shape[0] or self.weights.ndim != 3:
            raise ValueError("weights must be (K, C_in, C_out) matching the kernel points")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if np.max(np.linalg.norm(self.points, axis=1)) > self.radius + 1e-9:
            raise ValueError("kernel points must lie inside the ball")
        if self.correlation_kind not in ("linear", "gaussian"):
            raise ValueError(f"unknown correlation kind {self.correlation_kind!r}")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.weights))):
            raise ValueError("kernel contains non-finite entries")


@dataclass(frozen=True)
class GroupKernel:
    """Weights for the K_g group-neighborhood taps nearest the identity."""

    weights: np.ndarray  # (K_g, C_in, C_out)

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if self.weights.ndim != 3 or self.weights.shape[0] < 1:
            raise ValueError("weights must be (K_g, C_in, C_out)")

    @property
    def neighbor_size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ImplicitKernelParams:
    """Single weight matrix applied to [feature ; local frame coords]."""

    weights: np.ndarray  # (C_in + 3, C_out)

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if self.weights.ndim != 2 or self.weights.shape[0] < 4:
            raise ValueError("weights must be (C_in + 3, C_out)")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights contain non-finite entries")


@dataclass(frozen=True)
class SixDimKernel:
    """Joint kernel over (kernel point, kernel rotation) pairs.

    rotation_indices picks the tap elements out of the group; weights[k, l]
    is the matrix applied where the spatial correlation meets tap l.
    """

    points: np.ndarray  # (K_p, 3)
    rotation_indices: np.ndarray  # (K_g,) indices into the group
    weights: np.ndarray  # (K_p, K_g, C_in, C_out)
    sigma: float
    radius: float
    correlation_kind: str = "linear"

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "rotation_indices", np.asarray(self.rotation_indices, dtype=np.int64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        if self.weights.ndim != 4 or self.weights.shape[:2] != (
            self.points.shape[0],
            self.rotation_indices.shape[0],
        ):
            raise ValueError("weights must be (K_p, K_g, C_in, C_out)")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def make_kernel_points(k: int, radius: float) -> np.ndarray:
    """Deterministic layout of k kernel points inside the radius ball.

    One point sits at the origin. The remaining k-1 start on a Fibonacci
    spiral at 0.7 * radius and take 200 fixed steps of 0.01 * radius along
    the net pairwise inverse-square repulsion direction, re-projected into
    the ball after every step. Deterministic given (k, radius).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.zeros((k, 3))
    if k == 1:
        return pts
    pts[1:] = _fibonacci_sphere(k - 1) * (_KERNEL_INIT_SHELL * radius)
    step = _KERNEL_STEP * radius
    for _ in range(_KERNEL_REPULSION_ITERS):
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        np.fill_diagonal(d2, np.inf)
        force = np.sum(diff / (d2**1.5)[:, :, None], axis=1)
        norms = np.linalg.norm(force, axis=1, keepdims=True)
        move = np.where(norms > 0, force / np.maximum(norms, 1e-300), 0.0) * step
        pts[1:] += move[1:]  # the origin point stays fixed
        r = np.linalg.norm(pts[1:], axis=1)
        over = r > radius
        if np.any(over):
            pts[1:][over] *= (radius / r[over])[:, None]
    return pts


def _fibonacci_sphere(m: int) -> np.ndarray:
    i = np.arange(m, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / m
    r_xy = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r_xy * np.cos(theta), r_xy * np.sin(theta), z], axis=1)


def correlation(y, y_k, sigma: float, kind: str = "linear") -> float:
    """Proximity of displacement y to kernel point y_k, in [0, 1].

    linear:   max(0, 1 - |y - y_k| / sigma)
    gaussian: exp(-|y - y_k|^2 / (2 sigma^2))
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = float(np.linalg.norm(np.asarray(y, dtype=np.float64) - np.asarray(y_k, dtype=np.float64)))
    return float(_correlation_from_distance(np.array(d), sigma, kind))


def _correlation_from_distance(dist: np.ndarray, sigma: float, kind: str) -> np.ndarray:
    if kind == "linear":
        return np.maximum(0.0, 1.0 - dist / sigma)
    if kind == "gaussian":
        return np.exp(-(dist * dist) / (2.0 * sigma * sigma))
    raise ValueError(f"unknown correlation kind {kind!r}")


def _correlation_from_sq_distance_inplace(d2: np.ndarray, sigma: float, kind: str) -> np.ndarray:
    """Same map as `_correlation_from_distance` but from squared distances,
    reusing the input buffer (hot path)."""
    if kind == "linear":
        np.sqrt(d2, out=d2)
        d2 *= -1.0 / sigma
        d2 += 1.0
        return np.maximum(d2, 0.0, out=d2)
    if kind == "gaussian":
        d2 *= -1.0 / (2.0 * sigma * sigma)
        return np.exp(d2, out=d2)
    raise ValueError(f"unknown correlation kind {kind!r}")


def _spatial_correlations(coords, nbr, elements, kernel_points, sigma, kind):
    """kappa[m, j, a, k] = correlation of the center-to-neighbor displacement
    of slot (m, j), viewed in element a's frame, against kernel point k.

    Uses kappa(g^-1 d, y_k) = kappa(d, g y_k): the kernel points are rotated
    once per group element instead of rotating every displacement. Shadow
    slots are forced to zero.
    """
    ext = np.vstack([coords, np.zeros((1, 3))])
    d = nbr.centers[:, None, :] - ext[nbr.neighbor_indices]  # (M, K, 3)
    rot_y = np.einsum("aij,kj->aki", elements, kernel_points)  # (A, K_p, 3)
    d2 = np.einsum("mjx,akx->mjak", d, rot_y, optimize=True)
    d2 *= -2.0
    d2 += np.sum(d * d, axis=2)[:, :, None, None]
    d2 += np.sum(rot_y * rot_y, axis=2)[None, None, :, :]
    np.maximum(d2, 0.0, out=d2)
    kappa = _correlation_from_sq_distance_inplace(d2, sigma, kind)
    kappa[nbr.shadow_mask] = 0.0
    return kappa


def _point_conv_forward(coords, values, elements, nbr, kernel: ExplicitKernel, counter=None):
    n, a, c_in = values.shape
    if kernel.weights.shape[1] != c_in:
        raise ValueError(
            f"kernel expects {kernel.weights.shape[1]} input channels, feature map has {c_in}"
        )
    k_p, _, c_out = kernel.weights.shape
    kappa = _spatial_correlations(
        coords, nbr, elements, kernel.points, kernel.sigma, kernel.correlation_kind
    )
    ext_vals = np.concatenate([values, np.zeros((1, a, c_in))], axis=0)
    gathered = ext_vals[nbr.neighbor_indices]  # (M, K, A, C_in)
    m = nbr.centers.shape[0]
    # batched matmul over (m, a): aggregate neighbors per kernel point, then
    # apply the flattened (K_p * C_in, C_out) weight block
    kap_t = np.ascontiguousarray(kappa.transpose(0, 2, 3, 1))  # (M, A, K_p, K)
    gat_t = np.ascontiguousarray(gathered.transpose(0, 2, 1, 3))  # (M, A, K, C_in)
    agg = kap_t @ gat_t  # (M, A, K_p, C_in)
    out = (agg.reshape(m * a, k_p * c_in) @ kernel.weights.reshape(k_p * c_in, c_out)).reshape(
        m, a, c_out
    )
    if counter is not None:
        counter.add(m * a * k_p * c_in * c_out)
    cache = {
        "kap_t": kap_t,
        "agg": agg,
        "weights": kernel.weights,
        "neighbor_indices": nbr.neighbor_indices,
        "shape": values.shape,
    }
    return out, cache


def _point_conv_backward(cache, grad_out):
    weights = cache["weights"]
    n, a, c_in = cache["shape"]
    k_p, _, c_out = weights.shape
    m = grad_out.shape[0]
    flat_g = grad_out.reshape(m * a, c_out)
    flat_agg = cache["agg"].reshape(m * a, k_p * c_in)
    grad_weights = (flat_agg.T @ flat_g).reshape(k_p, c_in, c_out)
    grad_agg = (flat_g @ weights.reshape(k_p * c_in, c_out).T).reshape(m, a, k_p, c_in)
    # (M, A, K, K_p) @ (M, A, K_p, C) -> (M, A, K, C)
    grad_gathered = (cache["kap_t"].transpose(0, 1, 3, 2) @ grad_agg).transpose(0, 2, 1, 3)
    grad_values_ext = np.zeros((n + 1, a, c_in))
    np.add.at(
        grad_values_ext,
        cache["neighbor_indices"].reshape(-1),
        grad_gathered.reshape(-1, a, c_in),
    )
    return grad_values_ext[:n], grad_weights


def se3_point_conv(fmap: FeatureMap, kernel: ExplicitKernel, nbr, counter: MacCounter | None = None) -> FeatureMap:
    """Spatial convolution per group element.

    out(x_m, g) = sum over neighbors x_i and kernel points k of
    kappa(g^-1 (x_m - x_i), y_k) * F(x_i, g) @ W_k. Output coordinates are
    the neighborhood centers; shadow slots contribute nothing.
    """
    out, _ = _point_conv_forward(
        fmap.coords, fmap.values, fmap.group.elements, nbr, kernel, counter
    )
    return FeatureMap(nbr.centers, out, fmap.group)


def _implicit_conv_forward(coords, values, elements, nbr, params: ImplicitKernelParams, counter=None):
    n, a, c_in = values.shape
    if params.weights.shape[0] != c_in + 3:
        raise ValueError(
            f"implicit kernel expects {params.weights.shape[0] - 3} input channels, got {c_in}"
        )
    ext_coords = np.vstack([coords, np.zeros((1, 3))])
    e = ext_coords[nbr.neighbor_indices] - nbr.centers[:, None, :]  # x_i - x, (M, K, 3)
    local = np.einsum("ayx,mjy->mjax", elements, e, optimize=True)  # g^-1 (x_i - x)
    ext_vals = np.concatenate([values, np.zeros((1, a, c_in))], axis=0)
    gathered = ext_vals[nbr.neighbor_indices]  # (M, K, A, C_in)
    feat = np.concatenate([gathered, local], axis=3)  # (M, K, A, C_in + 3)
    feat[nbr.shadow_mask] = 0.0
    # the weight matrix is shared across neighbor slots: sum over j first
    feat_sum = feat.sum(axis=1)  # (M, A, C_in + 3)
    m = nbr.centers.shape[0]
    f, c_out = params.weights.shape
    out = (feat_sum.reshape(m * a, f) @ params.weights).reshape(m, a, c_out)
    if counter is not None:
        k = nbr.neighbor_indices.shape[1]
        counter.add(m * k * a * f * c_out)
    cache = {
        "feat_sum": feat_sum,
        "weights": params.weights,
        "neighbor_indices": nbr.neighbor_indices,
        "shadow_mask": nbr.shadow_mask,
        "shape": values.shape,
    }
    return out, cache


def _implicit_conv_backward(cache, grad_out):
    n, a, c_in = cache["shape"]
    f, c_out = cache["weights"].shape
    m = grad_out.shape[0]
    flat_g = grad_out.reshape(m * a, c_out)
    grad_weights = cache["feat_sum"].reshape(m * a, f).T @ flat_g
    grad_feat = (flat_g @ cache["weights"].T).reshape(m, a, f)  # same for every slot j
    k = cache["neighbor_indices"].shape[1]
    grad_feat = np.repeat(grad_feat[:, None, :, :c_in], k, axis=1)
    grad_feat[cache["shadow_mask"]] = 0.0
    grad_values_ext = np.zeros((n + 1, a, c_in))
    np.add.at(grad_values_ext, cache["neighbor_indices"].reshape(-1), grad_feat.reshape(-1, a, c_in))
    return grad_values_ext[:n], grad_weights


def implicit_point_conv(
    fmap: FeatureMap, params: ImplicitKernelParams, nbr, counter: MacCounter | None = None
) -> FeatureMap:
    """Parameter-free-kernel convolution: concatenate each neighbor's feature
    with its displacement in the element's frame, then apply one matrix.

    out(x, g) = sum over neighbors of [F(x_i, g) ; g^-1 (x_i - x)] @ W.
    """
    out, _ = _implicit_conv_forward(
        fmap.coords, fmap.values, fmap.group.elements, nbr, params, counter
    )
    return FeatureMap(nbr.centers, out, fmap.group)


def group_gather_table(group: FiniteRotationGroup, k_g: int) -> np.ndarray:
    """(K_g, |G|) gather indices: row j maps output slot a to input slot
    index(g_a @ tap_j^-1), where the taps are the K_g elements nearest the
    identity in ascending angle order."""
    base = group.identity_neighborhood(k_g)
    return np.stack([group.right_inverse_translation(int(j)) for j in base])


def _group_conv_forward(values, gather: np.ndarray, weights: np.ndarray, counter=None):
    n, a, c_in = values.shape
    if weights.shape[1] != c_in:
        raise ValueError(f"group kernel expects {weights.shape[1]} input channels, got {c_in}")
    k_g, _, c_out = weights.shape
    # (N, K_g, A, C) gather, rearranged so taps and channels flatten together
    gathered = np.ascontiguousarray(values[:, gather, :].transpose(0, 2, 1, 3))  # (N, A, K_g, C)
    flat = gathered.reshape(n * a, k_g * c_in)
    out = (flat @ weights.reshape(k_g * c_in, c_out)).reshape(n, a, c_out)
    if counter is not None:
        counter.add(n * a * k_g * c_in * c_out)
    cache = {"flat": flat, "gather": gather, "weights": weights, "shape": values.shape}
    return out, cache


def _group_conv_backward(cache, grad_out):
    weights = cache["weights"]
    n, a, c_in = cache["shape"]
    k_g, _, c_out = weights.shape
    flat_g = grad_out.reshape(n * a, c_out)
    grad_weights = (cache["flat"].T @ flat_g).reshape(k_g, c_in, c_out)
    grad_flat = (flat_g @ weights.reshape(k_g * c_in, c_out).T).reshape(n, a, k_g, c_in)
    grad_values = np.zeros(cache["shape"])
    for j in range(k_g):
        inv = np.argsort(cache["gather"][j])
        grad_values += grad_flat[:, inv, j, :]
    return grad_values, grad_weights


def se3_group_conv(
    fmap: FeatureMap, kernel: GroupKernel, counter: MacCounter | None = None
) -> FeatureMap:
    """Convolution along the group axis.

    out(x, g) = sum over taps j of F(x, index(g @ tap_j^-1)) @ W_j, realized
    as a gather by precomputed permutation tables followed by the weight
    multiply. The tap set is the K_g elements nearest the identity.
    """
    k_g = kernel.neighbor_size
    if k_g > len(fmap.group):
        raise ValueError(f"kernel has {k_g} taps but the group only has {len(fmap.group)} elements")
    gather = group_gather_table(fmap.group, k_g)
    out, _ = _group_conv_forward(fmap.values, gather, kernel.weights, counter)
    return FeatureMap(fmap.coords, out, fmap.group)


def naive_se3_conv(
    fmap: FeatureMap, kernel6d: SixDimKernel, nbr, counter: MacCounter | None = None
) -> FeatureMap:
    """Direct joint convolution over neighbor points and the full group.

    out(x_m, g) = sum over neighbors i, group elements h, kernel points k,
    and taps l of kappa(g^-1 (x_m - x_i), y_k) [h^-1 g = tap_l]
    F(x_i, h) @ W[k, l]. Oracle for the separability reductions and the
    benchmark baseline; the weight stage costs K_p * K_g MACs per channel
    pair per output slot.
    """
    values = fmap.values
    n, a, c_in = values.shape
    if kernel6d.weights.shape[2] != c_in:
        raise ValueError("kernel6d input channels do not match the feature map")
    kappa = _spatial_correlations(
        fmap.coords, nbr, fmap.group.elements, kernel6d.points, kernel6d.sigma, kernel6d.correlation_kind
    )
    ext_vals = np.concatenate([values, np.zeros((1, a, c_in))], axis=0)
    m = nbr.centers.shape[0]
    k_p = kernel6d.points.shape[0]
    c_out = kernel6d.weights.shape[3]
    kap_t = np.ascontiguousarray(kappa.transpose(0, 2, 3, 1))  # (M, A, K_p, K)
    neighbor_vals = ext_vals[nbr.neighbor_indices]  # (M, K, A, C_in)
    out = np.zeros((m, a, c_out))
    for l, tap in enumerate(kernel6d.rotation_indices):
        tau = fmap.group.right_inverse_translation(int(tap))  # h = g_a @ tap^-1
        gat_t = np.ascontiguousarray(neighbor_vals[:, :, tau, :].transpose(0, 2, 1, 3))
        agg = kap_t @ gat_t  # (M, A, K_p, C_in)
        out += (
            agg.reshape(m * a, k_p * c_in) @ kernel6d.weights[:, l].reshape(k_p * c_in, c_out)
        ).reshape(m, a, c_out)
        if counter is not None:
            counter.add(m * a * k_p * c_in * c_out)
    return FeatureMap(nbr.centers, out, fmap.group)


@dataclass
class BatchNormState:
    """Per-channel affine normalization state.

    Training mode normalizes with batch statistics pooled over the point and
    group axes (which keeps the operator equivariant) and updates the
    running estimates; inference mode uses the stored running statistics.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self) -> None:
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.running_mean is None:
            self.running_mean = np.zeros_like(self.gamma)
        if self.running_var is None:
            self.running_var = np.ones_like(self.gamma)

    @classmethod
    def identity(cls, channels: int) -> "BatchNormState":
        return cls(gamma=np.ones(channels), beta=np.zeros(channels))


def _batch_norm_forward(values, state: BatchNormState, use_batch_stats: bool, update_running=None):
    if values.shape[0] * values.shape[1] == 0:
        raise ValueError("batch normalization over an empty population")
    update = use_batch_stats if update_running is None else update_running
    if use_batch_stats:
        mean = values.mean(axis=(0, 1))
        var = values.var(axis=(0, 1))
        if update:
            state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
            state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (values - mean) * inv_std
    out = state.gamma * xhat + state.beta
    cache = {
        "xhat": xhat,
        "inv_std": inv_std,
        "gamma": state.gamma,
        "training": use_batch_stats,
        "population": values.shape[0] * values.shape[1],
    }
    return out, cache


def _batch_norm_backward(cache, grad_out):
    gamma = cache["gamma"]
    xhat = cache["xhat"]
    grad_gamma = np.sum(grad_out * xhat, axis=(0, 1))
    grad_beta = np.sum(grad_out, axis=(0, 1))
    grad_xhat = grad_out * gamma
    if not cache["training"]:
        return grad_xhat * cache["inv_std"], grad_gamma, grad_beta
    m = cache["population"]
    grad_values = (
        cache["inv_std"]
        / m
        * (
            m * grad_xhat
            - np.sum(grad_xhat, axis=(0, 1))
            - xhat * np.sum(grad_xhat * xhat, axis=(0, 1))
        )
    )
    return grad_values, grad_gamma, grad_beta


def batch_norm(values, state: BatchNormState, training: bool = False) -> np.ndarray:
    out, _ = _batch_norm_forward(np.asarray(values, dtype=np.float64), state, training)
    return out


def _leaky_relu_forward(values, slope: float = LEAKY_SLOPE):
    out = np.where(values > 0, values, slope * values)
    return out, {"values": values, "slope": slope}


def _leaky_relu_backward(cache, grad_out):
    return grad_out * np.where(cache["values"] > 0, 1.0, cache["slope"])


def leaky_relu(values, slope: float = LEAKY_SLOPE) -> np.ndarray:
    out, _ = _leaky_relu_forward(np.asarray(values, dtype=np.float64), slope)
    return out


def spconv_block(
    fmap: FeatureMap,
    kernel: ExplicitKernel,
    gkernel: GroupKernel,
    bn1: BatchNormState,
    bn2: BatchNormState,
    nbr,
    training: bool = False,
    counter: MacCounter | None = None,
) -> FeatureMap:
    """Point conv -> batch norm -> leaky ReLU -> group conv -> batch norm ->
    leaky ReLU, the basic block of the separable stack."""
    stage = se3_point_conv(fmap, kernel, nbr, counter)
    x = leaky_relu(batch_norm(stage.values, bn1, training))
    stage = se3_group_conv(FeatureMap(stage.coords, x, fmap.group), gkernel, counter)
    x = leaky_relu(batch_norm(stage.values, bn2, training))
    return FeatureMap(stage.coords, x, fmap.group)


def spherical_interpolation_weights(
    group: FiniteRotationGroup, r_query: np.ndarray, k: int, sharpness: float
) -> tuple[np.ndarray, np.ndarray]:
    """Indices and normalized weights of the k group elements nearest the
    query rotation; weight_j = exp(sharpness * (cos(angle_j) - 1)).

    An exact hit (angle below 1e-9 degrees) short-circuits to that element.
    """
    if k < 1 or k > len(group):
        raise ValueError(f"k must be in [1, {len(group)}]")
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    r_query = as_rotation(r_query, "r_query")
    angles = angles_to(group.elements, r_query)
    order = np.lexsort((np.arange(len(group)), angles))[:k]
    if angles[order[0]] < 1e-9:
        return order[:1], np.array([1.0])
    w = np.exp(sharpness * (np.cos(np.radians(angles[order])) - 1.0))
    return order, w / w.sum()


def spherical_interpolate(
    values_g: np.ndarray,
    group: FiniteRotationGroup,
    r_query: np.ndarray,
    k: int,
    sharpness: float,
) -> np.ndarray:
    """Interpolate per-group-element features at an arbitrary rotation by a
    normalized Gaussian-on-the-rotation-angle average of the k nearest
    elements."""
    values_g = np.asarray(values_g, dtype=np.float64)
    if values_g.shape[0] != len(group):
        raise ValueError("values_g must have one row per group element")
    idx, w = spherical_interpolation_weights(group, r_query, k, sharpness)
    return np.einsum("j,j...->...", w, values_g[idx])
