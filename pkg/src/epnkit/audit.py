"""Executable equivariance and invariance audit.

Each check sets up a randomized instance, measures a max-abs deviation, and
compares it against the check's tolerance. Rotation-equivariance checks run
over every element of the group with shared neighborhood indices (rotation
preserves distances, so the index tables of a rotated cloud are identical;
sharing them keeps tie-flips out of the measurement).

Translation checks demand bitwise equality, so their clouds and the
translation are drawn on a dyadic grid (multiples of 2^-20): coordinate
sums are then exact in float64 and the displacement arithmetic cancels the
translation without rounding.
"""

from dataclasses import dataclass

import numpy as np

from .conv import (
    BatchNormState,
    ExplicitKernel,
    FeatureMap,
    GroupKernel,
    SixDimKernel,
    make_kernel_points,
    naive_se3_conv,
    se3_group_conv,
    se3_point_conv,
    spconv_block,
    spherical_interpolation_weights,
)
from .geom import random_rotation
from .group import build_group, canonical_kind
from .heads import (
    DetectionOutput,
    _cross_entropy_grads,
    batch_hard_triplet,
    ga_pooling,
    predict_rotation,
    softmax,
)
from .sampling import NeighborhoodTable, ball_query

GRID = 2.0**-20


@dataclass
class CheckResult:
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_abs_deviation": float(self.deviation),
            "tolerance": float(self.tolerance),
            "pass": self.passed,
        }


def dyadic_cloud(rng, n: int) -> np.ndarray:
    """Random cloud on the 2^-20 grid in [-1, 1); sums with dyadic shifts
    of moderate magnitude are exact in float64."""
    return rng.integers(-(2**20), 2**20, size=(n, 3)).astype(np.float64) * GRID


def rotate_table(nbr: NeighborhoodTable, r: np.ndarray) -> NeighborhoodTable:
    """Same neighborhood indices, centers carried to the rotated frame."""
    return NeighborhoodTable(
        centers=nbr.centers @ r.T,
        neighbor_indices=nbr.neighbor_indices,
        counts=nbr.counts,
        radius=nbr.radius,
        n_source=nbr.n_source,
        center_indices=nbr.center_indices,
    )


def translate_table(nbr: NeighborhoodTable, t: np.ndarray) -> NeighborhoodTable:
    return NeighborhoodTable(
        centers=nbr.centers + t,
        neighbor_indices=nbr.neighbor_indices,
        counts=nbr.counts,
        radius=nbr.radius,
        n_source=nbr.n_source,
        center_indices=nbr.center_indices,
    )


class _Setup:
    def __init__(self, group_kind: str, n_points: int, channels: int, seed: int):
        self.group = build_group(group_kind)
        self.rng = np.random.default_rng(seed)
        self.n = n_points
        self.c = channels
        self.coords = dyadic_cloud(self.rng, n_points)
        self.values = self.rng.standard_normal((n_points, len(self.group), channels))
        self.fmap = FeatureMap(self.coords, self.values, self.group)
        self.radius = 0.9
        self.k_max = 12
        centers = self.coords[: max(4, n_points // 2)]
        self.nbr = ball_query(self.coords, centers, self.radius, self.k_max)
        self.kernel = ExplicitKernel(
            make_kernel_points(6, 0.8),
            self.rng.standard_normal((6, channels, channels)),
            sigma=0.6,
            radius=0.8,
        )
        self.gkernel = GroupKernel(self.rng.standard_normal((4, channels, channels)))


def run_audit(
    group_kind: str = "tetrahedral",
    n_points: int = 64,
    channels: int = 8,
    seed: int = 0,
    corrupt: str | None = None,
) -> dict:
    """Run every invariant check; `corrupt` deliberately breaks one named
    mechanism so the negative control can verify the audit catches it."""
    group_kind = canonical_kind(group_kind)
    s = _Setup(group_kind, n_points, channels, seed)
    checks = [
        _check_point_conv_rotation(s, corrupt),
        _check_group_conv_rotation(s, corrupt),
        _check_spconv_stack_rotation(s, corrupt),
        _check_point_conv_translation(s),
        _check_spconv_stack_translation(s),
        _check_point_conv_linearity(s),
        _check_group_conv_linearity(s),
        _check_naive_rotation_delta(s),
        _check_naive_spatial_delta(s),
        _check_shadow_neutrality(s),
        _check_interpolation_weights(s),
        _check_ga_pooling_invariance(s),
        _check_logit_shift_invariance(s),
        _check_triplet_permutation(s),
        _check_loss_gradients(s),
    ]
    return {
        "environment": {
            "group": group_kind,
            "group_order": len(s.group),
            "n_points": n_points,
            "channels": channels,
            "seed": seed,
            "corrupt": corrupt,
        },
        "checks": [c.to_dict() for c in checks],
        "passed": all(c.passed for c in checks),
    }


def _permutation(s: _Setup, r_index: int, corrupt) -> np.ndarray:
    perm = s.group.left_translation_permutation(r_index)
    if corrupt == "rotation_permutation" and r_index != 0:
        perm = perm.copy()
        perm[0], perm[1] = perm[1], perm[0]
    return perm


def _check_point_conv_rotation(s: _Setup, corrupt) -> CheckResult:
    base = se3_point_conv(s.fmap, s.kernel, s.nbr)
    worst = 0.0
    for r_index in range(len(s.group)):
        r = s.group.elements[r_index]
        perm = _permutation(s, r_index, corrupt)
        rotated = FeatureMap(s.coords @ r.T, s.values[:, perm, :], s.group)
        got = se3_point_conv(rotated, s.kernel, rotate_table(s.nbr, r))
        worst = max(worst, float(np.max(np.abs(got.values - base.values[:, perm, :]))))
    return CheckResult("point_conv_rotation_equivariance", worst, 1e-9)


def _check_group_conv_rotation(s: _Setup, corrupt) -> CheckResult:
    base = se3_group_conv(s.fmap, s.gkernel)
    worst = 0.0
    for r_index in range(len(s.group)):
        r = s.group.elements[r_index]
        perm = _permutation(s, r_index, corrupt)
        rotated = FeatureMap(s.coords @ r.T, s.values[:, perm, :], s.group)
        got = se3_group_conv(rotated, s.gkernel)
        worst = max(worst, float(np.max(np.abs(got.values - base.values[:, perm, :]))))
    return CheckResult("group_conv_rotation_equivariance", worst, 1e-9)


def _check_spconv_stack_rotation(s: _Setup, corrupt) -> CheckResult:
    # second block operates on the first block's centers
    s.kernel2 = ExplicitKernel(
        make_kernel_points(5, 0.9), s.rng.standard_normal((5, s.c, s.c)), sigma=0.7, radius=0.9
    )
    s.gkernel2 = GroupKernel(s.rng.standard_normal((3, s.c, s.c)))
    bn = [
        BatchNormState(
            gamma=s.rng.random(s.c) + 0.5,
            beta=s.rng.standard_normal(s.c),
            running_mean=s.rng.standard_normal(s.c) * 0.1,
            running_var=s.rng.random(s.c) + 0.5,
        )
        for _ in range(4)
    ]
    nbr1 = s.nbr
    centers2 = nbr1.centers[: max(2, nbr1.centers.shape[0] // 2)]
    nbr2 = ball_query(nbr1.centers, centers2, s.radius, s.k_max)

    def stack(fmap, n1, n2):
        out = spconv_block(fmap, s.kernel, s.gkernel, bn[0], bn[1], n1, training=False)
        return spconv_block(out, s.kernel2, s.gkernel2, bn[2], bn[3], n2, training=False)

    base = stack(s.fmap, nbr1, nbr2)
    worst = 0.0
    for r_index in range(len(s.group)):
        r = s.group.elements[r_index]
        perm = _permutation(s, r_index, corrupt)
        rotated = FeatureMap(s.coords @ r.T, s.values[:, perm, :], s.group)
        got = stack(rotated, rotate_table(nbr1, r), rotate_table(nbr2, r))
        worst = max(worst, float(np.max(np.abs(got.values - base.values[:, perm, :]))))
    return CheckResult("spconv_stack_rotation_equivariance", worst, 1e-9)


def _check_point_conv_translation(s: _Setup) -> CheckResult:
    t = np.array([0.5, -0.25, 3.0])  # dyadic, keeps coordinate sums exact
    base = se3_point_conv(s.fmap, s.kernel, s.nbr)
    shifted = FeatureMap(s.coords + t, s.values, s.group)
    got = se3_point_conv(shifted, s.kernel, translate_table(s.nbr, t))
    dev = 0.0 if np.array_equal(got.values, base.values) else float(
        np.max(np.abs(got.values - base.values))
    )
    return CheckResult("point_conv_translation_equivariance", dev, 0.0)


def _check_spconv_stack_translation(s: _Setup) -> CheckResult:
    t = np.array([-1.5, 0.75, 0.125])
    bn = [BatchNormState.identity(s.c) for _ in range(2)]
    base = spconv_block(s.fmap, s.kernel, s.gkernel, bn[0], bn[1], s.nbr, training=False)
    shifted = FeatureMap(s.coords + t, s.values, s.group)
    got = spconv_block(shifted, s.kernel, s.gkernel, bn[0], bn[1], translate_table(s.nbr, t), training=False)
    dev = 0.0 if np.array_equal(got.values, base.values) else float(
        np.max(np.abs(got.values - base.values))
    )
    return CheckResult("spconv_stack_translation_equivariance", dev, 0.0)


def _check_point_conv_linearity(s: _Setup) -> CheckResult:
    other = s.rng.standard_normal(s.values.shape)
    mixed = FeatureMap(s.coords, 1.7 * s.values - 0.4 * other, s.group)
    lhs = se3_point_conv(mixed, s.kernel, s.nbr).values
    rhs = (
        1.7 * se3_point_conv(s.fmap, s.kernel, s.nbr).values
        - 0.4 * se3_point_conv(FeatureMap(s.coords, other, s.group), s.kernel, s.nbr).values
    )
    return CheckResult("point_conv_linearity", float(np.max(np.abs(lhs - rhs))), 1e-12)


def _check_group_conv_linearity(s: _Setup) -> CheckResult:
    other = s.rng.standard_normal(s.values.shape)
    mixed = FeatureMap(s.coords, 0.3 * s.values + 2.1 * other, s.group)
    lhs = se3_group_conv(mixed, s.gkernel).values
    rhs = (
        0.3 * se3_group_conv(s.fmap, s.gkernel).values
        + 2.1 * se3_group_conv(FeatureMap(s.coords, other, s.group), s.gkernel).values
    )
    return CheckResult("group_conv_linearity", float(np.max(np.abs(lhs - rhs))), 1e-12)


def _check_naive_rotation_delta(s: _Setup) -> CheckResult:
    taps = s.group.identity_neighborhood(4)
    weights = np.zeros((6, 4, s.c, s.c))
    weights[:, 0] = s.kernel.weights
    kernel6d = SixDimKernel(s.kernel.points, taps, weights, sigma=s.kernel.sigma, radius=0.8)
    got = naive_se3_conv(s.fmap, kernel6d, s.nbr)
    want = se3_point_conv(s.fmap, s.kernel, s.nbr)
    return CheckResult(
        "naive_reduces_to_point_conv", float(np.max(np.abs(got.values - want.values))), 1e-12
    )


def _check_naive_spatial_delta(s: _Setup) -> CheckResult:
    taps = s.group.identity_neighborhood(4)
    self_nbr = ball_query(s.coords, s.coords, 1e-9, 1)
    kernel6d = SixDimKernel(
        np.zeros((1, 3)), taps, s.gkernel.weights[None], sigma=1e-9, radius=0.8
    )
    got = naive_se3_conv(s.fmap, kernel6d, self_nbr)
    want = se3_group_conv(s.fmap, s.gkernel)
    return CheckResult(
        "naive_reduces_to_group_conv", float(np.max(np.abs(got.values - want.values))), 1e-12
    )


def _check_shadow_neutrality(s: _Setup) -> CheckResult:
    padded = NeighborhoodTable(
        centers=s.nbr.centers,
        neighbor_indices=np.concatenate(
            [s.nbr.neighbor_indices, np.full((s.nbr.centers.shape[0], 3), s.nbr.sentinel)], axis=1
        ),
        counts=s.nbr.counts,
        radius=s.nbr.radius,
        n_source=s.nbr.n_source,
    )
    base = se3_point_conv(s.fmap, s.kernel, s.nbr)
    got = se3_point_conv(s.fmap, s.kernel, padded)
    return CheckResult(
        "shadow_slot_neutrality", float(np.max(np.abs(got.values - base.values))), 1e-12
    )


def _check_interpolation_weights(s: _Setup) -> CheckResult:
    worst = 0.0
    for _ in range(8):
        _, w = spherical_interpolation_weights(s.group, random_rotation(s.rng), k=5, sharpness=3.0)
        worst = max(worst, abs(float(w.sum()) - 1.0), float(max(0.0, -w.min())))
    return CheckResult("interpolation_weights_normalized", worst, 1e-12)


def _check_ga_pooling_invariance(s: _Setup) -> CheckResult:
    a = len(s.group)
    values = s.rng.standard_normal((a, s.c))
    attention = softmax(s.rng.standard_normal(a))
    perm = s.rng.permutation(a)
    base = ga_pooling(values, attention, 0.8)
    permuted = ga_pooling(values[perm], attention[perm], 0.8)
    return CheckResult(
        "ga_pooling_permutation_invariance", float(np.max(np.abs(base - permuted))), 1e-12
    )


def _check_logit_shift_invariance(s: _Setup) -> CheckResult:
    a = len(s.group)
    logits = s.rng.standard_normal(a)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (a, 1))
    r1 = predict_rotation(DetectionOutput(logits, quats), s.group)
    r2 = predict_rotation(DetectionOutput(logits + 11.25, quats), s.group)
    return CheckResult("detection_logit_shift_invariance", float(np.max(np.abs(r1 - r2))), 0.0)


def _check_triplet_permutation(s: _Setup) -> CheckResult:
    anchors = s.rng.standard_normal((6, 5))
    positives = anchors + 0.2 * s.rng.standard_normal((6, 5))
    perm = s.rng.permutation(6)
    base = batch_hard_triplet(anchors, positives, margin=0.8)
    permuted = batch_hard_triplet(anchors[perm], positives[perm], margin=0.8)
    return CheckResult("triplet_pair_permutation_invariance", abs(base - permuted), 1e-12)


def _check_loss_gradients(s: _Setup) -> CheckResult:
    logits = s.rng.standard_normal(len(s.group))
    label = int(s.rng.integers(0, len(s.group)))
    _, grad = _cross_entropy_grads(logits, label)
    worst = 0.0
    step = 1e-6
    for i in range(logits.shape[0]):
        orig = logits[i]
        logits[i] = orig + step
        hi, _ = _cross_entropy_grads(logits, label)
        logits[i] = orig - step
        lo, _ = _cross_entropy_grads(logits, label)
        logits[i] = orig
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-5))
    return CheckResult("loss_gradient_finite_difference", worst, 1e-4)
