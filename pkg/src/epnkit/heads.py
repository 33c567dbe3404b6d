"""Output heads and losses: group attentive pooling, max/mean pooling over
the group axis, the rotation detection head with its multi-task loss, the
batch-hard triplet loss, and softmax classification.

The module-private ``*_grads`` companions return analytic gradients and are
shared with the training layers.
"""

from dataclasses import dataclass

import numpy as np

from .geom import rotation_from_quaternion
from .group import FiniteRotationGroup, nearest_group_element
from .validation import as_rotation


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def ga_pooling(values_g: np.ndarray, attention: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Attention-weighted average over the group axis.

    out = sum_g exp(a_g / T) F(g) / sum_g exp(a_g / T). Sharper for smaller
    temperatures; uniform attention reduces to the mean.
    """
    out, _ = _ga_pooling_forward(values_g, attention, temperature)
    return out


def _ga_pooling_forward(values_g, attention, temperature):
    values_g = np.asarray(values_g, dtype=np.float64)
    attention = np.asarray(attention, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if values_g.ndim != 2 or attention.shape != (values_g.shape[0],):
        raise ValueError("expected (|G|, D) features and (|G|,) attention")
    if not np.all(np.isfinite(attention)):
        raise ValueError("attention weights are not finite; increase the temperature")
    z = attention / temperature
    p = softmax(z)
    out = p @ values_g
    return out, {"p": p, "values_g": values_g, "temperature": temperature}


def _ga_pooling_grads(cache, grad_out):
    p = cache["p"]
    values_g = cache["values_g"]
    grad_values = p[:, None] * grad_out[None, :]
    inner = values_g @ grad_out  # (|G|,)
    grad_attention = p * (inner - p @ inner) / cache["temperature"]
    return grad_values, grad_attention


def pool_max(values_g: np.ndarray) -> np.ndarray:
    """Channelwise maximum over the group axis."""
    values_g = np.asarray(values_g, dtype=np.float64)
    return values_g.max(axis=0)


def _pool_max_forward(values_g):
    arg = np.argmax(values_g, axis=0)
    return values_g[arg, np.arange(values_g.shape[1])], {"arg": arg, "shape": values_g.shape}


def _pool_max_grads(cache, grad_out):
    grad = np.zeros(cache["shape"])
    grad[cache["arg"], np.arange(cache["shape"][1])] = grad_out
    return grad


def pool_mean(values_g: np.ndarray) -> np.ndarray:
    """Channelwise mean over the group axis."""
    return np.asarray(values_g, dtype=np.float64).mean(axis=0)


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Softmax cross-entropy of a single logit vector against an integer label."""
    loss, _ = _cross_entropy_grads(logits, label)
    return loss


def _cross_entropy_grads(logits, label):
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    log_z = np.log(np.sum(np.exp(z)))
    loss = float(log_z - z[label])
    grad = np.exp(z - log_z)
    grad[label] -= 1.0
    return loss, grad


def classify(pooled: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine class logits from a pooled descriptor."""
    pooled = np.asarray(pooled, dtype=np.float64)
    logits = pooled @ weights
    if bias is not None:
        logits = logits + bias
    return logits


@dataclass
class DetectionOutput:
    """Per-anchor rotation detection: one logit and one residual unit
    quaternion for every group element."""

    logits: np.ndarray  # (|G|,)
    residual_quats: np.ndarray  # (|G|, 4), unit rows

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.residual_quats = np.asarray(self.residual_quats, dtype=np.float64)
        if self.residual_quats.shape != (self.logits.shape[0], 4):
            raise ValueError("residual_quats must be (|G|, 4)")
        norms = np.linalg.norm(self.residual_quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("residual quaternions must be normalized")


def detection_loss(
    out: DetectionOutput,
    r_gt: np.ndarray,
    group: FiniteRotationGroup,
    rotation_weight: float = 1.0,
) -> tuple[float, dict]:
    """Multi-task anchor loss: cross-entropy on the anchor logits against the
    nearest group element to the target, plus a squared-Frobenius rotation
    term applied only at that labeled anchor.

    L = CE(softmax(logits), u) + w * |R(q_u) g_u - R_gt|_F^2
    """
    r_gt = as_rotation(r_gt, "r_gt")
    u, _ = nearest_group_element(group, r_gt)
    cls_loss, _ = _cross_entropy_grads(out.logits, u)
    predicted = rotation_from_quaternion(out.residual_quats[u]) @ group.elements[u]
    rot_loss = float(np.sum((predicted - r_gt) ** 2))
    total = cls_loss + rotation_weight * rot_loss
    return total, {"classification": cls_loss, "rotation": rot_loss, "label_index": u}


def predict_rotation(out: DetectionOutput, group: FiniteRotationGroup) -> np.ndarray:
    """Compose the winning anchor with its regressed residual."""
    u = int(np.argmax(out.logits))
    return rotation_from_quaternion(out.residual_quats[u]) @ group.elements[u]


def _quat_rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """(4, 3, 3) partials of the quaternion-to-matrix map at unit q."""
    w, x, y, z = q
    jac = np.empty((4, 3, 3))
    jac[0] = [[0, -2 * z, 2 * y], [2 * z, 0, -2 * x], [-2 * y, 2 * x, 0]]
    jac[1] = [[0, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]]
    jac[2] = [[-4 * y, 2 * x, 2 * w], [2 * x, 0, 2 * z], [-2 * w, 2 * z, -4 * y]]
    jac[3] = [[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, 0]]
    return jac


def _detection_loss_grads(logits, raw_quats, r_gt, group, rotation_weight):
    """Loss plus gradients w.r.t. the logits and the raw (unnormalized)
    per-anchor quaternion outputs; the rotation term touches only the
    labeled anchor's row."""
    u, _ = nearest_group_element(group, r_gt)
    cls_loss, grad_logits = _cross_entropy_grads(logits, u)

    raw = np.asarray(raw_quats, dtype=np.float64)
    norm = np.linalg.norm(raw[u])
    if norm < 1e-12:
        raise ValueError("residual quaternion collapsed to zero")
    qhat = raw[u] / norm
    rot = _quat_matrix(qhat)
    anchor = group.elements[u]
    diff = rot @ anchor - r_gt
    rot_loss = float(np.sum(diff * diff))
    grad_rot = 2.0 * diff @ anchor.T  # dL/dR
    grad_qhat = np.einsum("qij,ij->q", _quat_rotation_jacobian(qhat), grad_rot)
    grad_raw_u = (grad_qhat - qhat * np.dot(qhat, grad_qhat)) / norm

    grad_quats = np.zeros_like(raw)
    grad_quats[u] = rotation_weight * grad_raw_u
    total = cls_loss + rotation_weight * rot_loss
    parts = {"classification": cls_loss, "rotation": rot_loss, "label_index": u}
    return total, parts, grad_logits, grad_quats


def _anchor_frame_detection_grads(logits, raw_quats, r_gt, group, rotation_weight):
    """Detection loss with the residual regressed in the anchor's own frame.

    The equivariant feature row at anchor u is a function of the right-side
    residual T = g_u^-1 R_gt alone (the left-side residual appears conjugated
    by the anchor, which an anchor-shared regressor cannot resolve), so the
    network predicts T and composes g_u @ R(q_u). The Frobenius rotation term
    |g_u R(q_u) - R_gt|_F^2 equals |R(q_u) - g_u^T R_gt|_F^2 by unitary
    invariance, which is the form evaluated here.
    """
    u, _ = nearest_group_element(group, r_gt)
    cls_loss, grad_logits = _cross_entropy_grads(logits, u)

    raw = np.asarray(raw_quats, dtype=np.float64)
    norm = np.linalg.norm(raw[u])
    if norm < 1e-12:
        raise ValueError("residual quaternion collapsed to zero")
    qhat = raw[u] / norm
    rot = _quat_matrix(qhat)
    target = group.elements[u].T @ r_gt  # T = g_u^-1 R_gt
    diff = rot - target
    rot_loss = float(np.sum(diff * diff))
    grad_rot = 2.0 * diff
    grad_qhat = np.einsum("qij,ij->q", _quat_rotation_jacobian(qhat), grad_rot)
    grad_raw_u = (grad_qhat - qhat * np.dot(qhat, grad_qhat)) / norm

    grad_quats = np.zeros_like(raw)
    grad_quats[u] = rotation_weight * grad_raw_u
    total = cls_loss + rotation_weight * rot_loss
    parts = {"classification": cls_loss, "rotation": rot_loss, "label_index": u}
    return total, parts, grad_logits, grad_quats


def _quat_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def batch_hard_triplet(anchors: np.ndarray, positives: np.ndarray, margin: float) -> float:
    """Hardest-in-batch triplet loss.

    Per sample i the positive is its own pair and the negative is the
    closest non-corresponding positive in the batch:
    mean_i max(0, |a_i - p_i| - min_{j != i} |a_i - p_j| + margin).
    """
    loss, _, _ = _batch_hard_triplet_grads(anchors, positives, margin)
    return loss


def _batch_hard_triplet_grads(anchors, positives, margin):
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    if a.shape != p.shape:
        raise ValueError("anchors and positives must have matching shapes")
    b = a.shape[0]
    if b < 2:
        raise ValueError("batch-hard triplet needs at least 2 samples to mine negatives")
    diff = a[:, None, :] - p[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    pos = dist[np.arange(b), np.arange(b)]
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    neg_idx = np.argmin(masked, axis=1)
    neg = masked[np.arange(b), neg_idx]
    hinge = pos - neg + margin
    active = hinge > 0
    loss = float(np.mean(np.maximum(0.0, hinge)))

    grad_a = np.zeros_like(a)
    grad_p = np.zeros_like(p)
    for i in np.nonzero(active)[0]:
        j = neg_idx[i]
        if pos[i] > 1e-12:
            unit = (a[i] - p[i]) / pos[i]
            grad_a[i] += unit / b
            grad_p[i] -= unit / b
        unit_n = (a[i] - p[j]) / neg[i]
        grad_a[i] -= unit_n / b
        grad_p[j] += unit_n / b
    return loss, grad_a, grad_p
