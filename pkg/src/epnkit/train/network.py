"""Network assembly: the strided separable-convolution backbone and the
pose / classification models built on it, each exposing loss_and_grads for
the analytic training loop.

Cloud handling: inputs are centered and scaled to unit max radius before
the hierarchy is built, so the configured radii are in normalized units.
Normalization layers use the per-cloud population statistics (points x
group elements) at both fit and predict time, which removes any train/eval
statistics shift and keeps every forward pass equivariant; running
averages are still tracked for checkpointing.
"""

import numpy as np

from ..geom import quaternion_from_rotation
from ..heads import _anchor_frame_detection_grads, _cross_entropy_grads
from ..sampling import build_hierarchy
from ..validation import as_points, as_rotation
from .config import TrainConfig
from .layers import (
    Dense,
    GAPoolLayer,
    GroupMaxPool,
    GroupMeanPool,
    LeakyReLULayer,
    SoftmaxLayer,
    SpatialMeanPool,
    SPConvBlockLayer,
)


def normalize_cloud(points) -> np.ndarray:
    """Center at the centroid and scale the max radius to 1."""
    pts = as_points(points)
    centered = pts - pts.mean(axis=0)
    scale = np.max(np.linalg.norm(centered, axis=1))
    if scale == 0:
        raise ValueError("degenerate cloud: all points coincide")
    return centered / scale


def collect_params(layers) -> dict:
    out = {}
    for layer in layers:
        out.update(layer.params())
    return out


def collect_grads(layers) -> dict:
    out = {}
    for layer in layers:
        out.update(layer.grads())
    return out


class Backbone:
    """Strided hierarchy of separable convolution blocks ending in a spatial
    mean pool; output is one feature row per group element."""

    def __init__(self, group, cfg: TrainConfig, rng):
        self.group = group
        self.cfg = cfg
        self.blocks = []
        c_in = 1
        for i in range(cfg.levels):
            block = SPConvBlockLayer(
                f"level{i}",
                group,
                c_in,
                cfg.channels[i],
                cfg.kernel_points,
                cfg.radii[i],
                cfg.group_neighbors,
                rng,
                sigma=cfg.sigma_scale * cfg.radii[i],
            )
            self.blocks.append(block)
            c_in = cfg.channels[i]
        self.spatial_pool = SpatialMeanPool("spatial_pool")
        self.out_channels = c_in

    def layers(self):
        return [*self.blocks, self.spatial_pool]

    def forward(self, coords, update_stats: bool):
        coords = normalize_cloud(coords)
        hierarchy = build_hierarchy(
            coords, self.cfg.levels, self.cfg.stride, self.cfg.radii, self.cfg.k_max
        )
        values = np.ones((coords.shape[0], len(self.group), 1))
        src = coords
        for block, level in zip(self.blocks, hierarchy):
            values = block.forward(src, values, level.table, update_stats)
            src = level.points
        return self.spatial_pool.forward(values)  # (|G|, C)

    def backward(self, grad_pooled):
        g = self.spatial_pool.backward(grad_pooled)
        for block in reversed(self.blocks):
            g = block.backward(g)
        return g


class _MLPBranch:
    """Dense -> leaky ReLU -> Dense applied along the last axis."""

    def __init__(self, name, c_in, hidden, c_out, rng, out_scale=None, bias_init=None):
        self.d1 = Dense(f"{name}.d1", c_in, hidden, rng)
        self.act = LeakyReLULayer(f"{name}.act")
        self.d2 = Dense(f"{name}.d2", hidden, c_out, rng, weight_scale=out_scale, bias_init=bias_init)

    def layers(self):
        return [self.d1, self.act, self.d2]

    def forward(self, x):
        return self.d2.forward(self.act.forward(self.d1.forward(x)))

    def backward(self, grad_out):
        return self.d1.backward(self.act.backward(self.d2.backward(grad_out)))


class PoseNetwork:
    """Rotation prediction on a single cloud.

    head="detection": per-anchor logits plus per-anchor residual quaternion,
    trained with the multi-task anchor loss. head="quaternion": a direct
    regression baseline reading the flattened (|G| x C) feature block.
    """

    def __init__(self, group, cfg: TrainConfig, rng):
        self.group = group
        self.cfg = cfg
        self.backbone = Backbone(group, cfg, rng)
        c = self.backbone.out_channels
        h = cfg.head_hidden
        self.head = cfg.head
        if cfg.head == "detection":
            self.logit_branch = _MLPBranch("head.logit", c, h, 1, rng)
            self.quat_branch = _MLPBranch(
                "head.quat", c, h, 4, rng, out_scale=0.01, bias_init=(1.0, 0.0, 0.0, 0.0)
            )
            self._head_layers = [*self.logit_branch.layers(), *self.quat_branch.layers()]
        elif cfg.head == "quaternion":
            self.quat_branch = _MLPBranch(
                "head.direct", c * len(group), h, 4, rng, out_scale=0.01,
                bias_init=(1.0, 0.0, 0.0, 0.0),
            )
            self._head_layers = self.quat_branch.layers()
        else:
            raise ValueError(f"unknown head {cfg.head!r}")

    def layers(self):
        return [*self.backbone.layers(), *self._head_layers]

    def params(self):
        return collect_params(self.layers())

    def grads(self):
        return collect_grads(self.layers())

    def zero_grads(self):
        for layer in self.layers():
            layer.zero_grads()

    def _forward_heads(self, coords, update_stats):
        pooled = self.backbone.forward(coords, update_stats)  # (|G|, C)
        if self.head == "detection":
            logits = self.logit_branch.forward(pooled)[:, 0]
            raw_quats = self.quat_branch.forward(pooled)
            return pooled, logits, raw_quats
        flat = pooled.reshape(1, -1)
        raw_quat = self.quat_branch.forward(flat)[0]
        return pooled, None, raw_quat

    def loss_and_grads(self, coords, r_gt, update_stats=True):
        """Forward, loss, and a full backward pass accumulating parameter
        gradients. Returns (loss, parts)."""
        r_gt = as_rotation(r_gt, "r_gt")
        pooled, logits, raw = self._forward_heads(coords, update_stats)
        if self.head == "detection":
            loss, parts, g_logits, g_quats = _anchor_frame_detection_grads(
                logits, raw, r_gt, self.group, self.cfg.rotation_weight
            )
            g_pooled = self.logit_branch.backward(g_logits[:, None])
            g_pooled = g_pooled + self.quat_branch.backward(g_quats)
        else:
            loss, parts, g_raw = _quaternion_regression_grads(raw, r_gt)
            g_flat = self.quat_branch.backward(g_raw[None, :])
            g_pooled = g_flat.reshape(pooled.shape)
        self.backbone.backward(g_pooled)
        return loss, parts

    def predict(self, coords) -> np.ndarray:
        _, logits, raw = self._forward_heads(coords, update_stats=False)
        if self.head == "detection":
            u = int(np.argmax(logits))
            q = raw[u] / np.linalg.norm(raw[u])
            return self.group.elements[u] @ _quat_to_matrix(q)
        q = raw / np.linalg.norm(raw)
        return _quat_to_matrix(q)

    def leaky_preactivations(self):
        out = []
        for block in self.backbone.blocks:
            out.extend(block.preactivations())
        return out


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _quaternion_regression_grads(raw, r_gt):
    """Direct quaternion regression loss with the sign ambiguity resolved by
    taking the closer of +-q_gt; returns (loss, parts, grad_raw)."""
    q_gt = quaternion_from_rotation(r_gt)
    norm = np.linalg.norm(raw)
    if norm < 1e-12:
        raise ValueError("regressed quaternion collapsed to zero")
    qhat = raw / norm
    sign = 1.0 if np.dot(qhat, q_gt) >= 0 else -1.0
    diff = qhat - sign * q_gt
    loss = float(np.dot(diff, diff))
    grad_qhat = 2.0 * diff
    grad_raw = (grad_qhat - qhat * np.dot(qhat, grad_qhat)) / norm
    return loss, {"quaternion": loss}, grad_raw


class ClassifierNetwork:
    """Invariant classification: backbone features pooled over the group
    axis (attentive, max, or mean) then a fully connected layer."""

    def __init__(self, group, cfg: TrainConfig, rng, n_classes: int, pooling: str):
        if pooling not in ("attentive", "max", "mean"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.group = group
        self.cfg = cfg
        self.pooling = pooling
        self.backbone = Backbone(group, cfg, rng)
        c = self.backbone.out_channels
        self._pool_layers = []
        if pooling == "attentive":
            self.att_branch = _MLPBranch("att", c, cfg.attention_hidden, 1, rng)
            self.att_softmax = SoftmaxLayer("att.softmax")
            self.ga_pool = GAPoolLayer("ga_pool", temperature=cfg.temperature)
            self._pool_layers = [*self.att_branch.layers(), self.att_softmax, self.ga_pool]
        elif pooling == "max":
            self.group_pool = GroupMaxPool("group_max")
            self._pool_layers = [self.group_pool]
        else:
            self.group_pool = GroupMeanPool("group_mean")
            self._pool_layers = [self.group_pool]
        self.fc = Dense("fc", c, n_classes, rng)

    def layers(self):
        return [*self.backbone.layers(), *self._pool_layers, self.fc]

    def params(self):
        return collect_params(self.layers())

    def grads(self):
        return collect_grads(self.layers())

    def zero_grads(self):
        for layer in self.layers():
            layer.zero_grads()

    def _pool(self, pooled_g):
        if self.pooling == "attentive":
            att_logits = self.att_branch.forward(pooled_g)[:, 0]
            attention = self.att_softmax.forward(att_logits)
            self._last_att_logits = att_logits
            self._last_attention = attention
            return self.ga_pool.forward(pooled_g, attention)
        return self.group_pool.forward(pooled_g)

    def _pool_backward(self, grad_desc):
        if self.pooling == "attentive":
            g_values, g_attention = self.ga_pool.backward(grad_desc)
            g_att_logits = self.att_softmax.backward(g_attention)
            return g_values + self.att_branch.backward(g_att_logits[:, None])
        return self.group_pool.backward(grad_desc)

    def forward_logits(self, coords, update_stats=False):
        pooled_g = self.backbone.forward(coords, update_stats)
        return self.fc.forward(self._pool(pooled_g))

    def descriptor(self, coords) -> np.ndarray:
        """Invariant pooled feature vector."""
        return self._pool(self.backbone.forward(coords, update_stats=False))

    def attention_weights(self, coords) -> np.ndarray:
        if self.pooling != "attentive":
            raise RuntimeError("attention weights only exist for attentive pooling")
        self.descriptor(coords)
        return self._last_attention

    def loss_and_grads(self, coords, label: int, update_stats=True, anchor_label=None):
        """Cross-entropy task loss; when `anchor_label` is given and pooling
        is attentive, adds rotation_weight * CE(attention logits, anchor)."""
        pooled_g = self.backbone.forward(coords, update_stats)
        desc = self._pool(pooled_g)
        logits = self.fc.forward(desc)
        loss, g_logits = _cross_entropy_grads(logits, int(label))
        parts = {"classification": loss}
        g_desc = self.fc.backward(g_logits)
        g_pooled = self._pool_backward(g_desc)
        if anchor_label is not None and self.pooling == "attentive":
            sa_loss, g_sa = _cross_entropy_grads(self._last_att_logits, int(anchor_label))
            parts["attention_supervision"] = sa_loss
            loss = loss + self.cfg.rotation_weight * sa_loss
            g_pooled = g_pooled + self.att_branch.backward(
                self.cfg.rotation_weight * g_sa[:, None]
            )
        self.backbone.backward(g_pooled)
        return loss, parts

    def predict_label(self, coords) -> int:
        return int(np.argmax(self.forward_logits(coords)))
