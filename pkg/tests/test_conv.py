import numpy as np
import pytest

from epnkit.conv import (
    BatchNormState,
    ExplicitKernel,
    FeatureMap,
    GroupKernel,
    ImplicitKernelParams,
    MacCounter,
    SixDimKernel,
    batch_norm,
    correlation,
    group_gather_table,
    implicit_point_conv,
    leaky_relu,
    make_kernel_points,
    naive_se3_conv,
    ones_feature_map,
    se3_group_conv,
    se3_point_conv,
    spconv_block,
    spherical_interpolate,
)
from epnkit.geom import angles_to, random_rotation
from epnkit.sampling import NeighborhoodTable, ball_query

# First-run output of the deterministic repulsion layout, pinned.
KERNEL_13_MIN_PAIRWISE = 0.9187377690939373


def identity_table(coords, radius=10.0, k_max=None, extra_shadow=0):
    """Every point is a center; neighborhoods cover the whole cloud."""
    k = coords.shape[0] if k_max is None else k_max
    table = ball_query(coords, coords, radius, k + extra_shadow)
    return table


def random_fmap(rng, group, n, c):
    coords = rng.standard_normal((n, 3))
    values = rng.standard_normal((n, len(group), c))
    return FeatureMap(coords, values, group)


def oracle_point_conv(fmap, kernel, nbr):
    """Literal triple loop: centers x group elements x neighbors x kernel
    points, with the displacement rotated into each element's frame."""
    m = nbr.centers.shape[0]
    a = len(fmap.group)
    c_out = kernel.weights.shape[2]
    out = np.zeros((m, a, c_out))
    for mi in range(m):
        for ai in range(a):
            g = fmap.group.elements[ai]
            for slot in range(nbr.neighbor_indices.shape[1]):
                i = nbr.neighbor_indices[mi, slot]
                if i == nbr.sentinel:
                    continue
                y = g.T @ (nbr.centers[mi] - fmap.coords[i])
                for k in range(kernel.points.shape[0]):
                    kap = correlation(y, kernel.points[k], kernel.sigma, kernel.correlation_kind)
                    out[mi, ai] += kap * (fmap.values[i, ai] @ kernel.weights[k])
    return out


def oracle_implicit_conv(fmap, params, nbr):
    m = nbr.centers.shape[0]
    a = len(fmap.group)
    c_in = fmap.channels
    out = np.zeros((m, a, params.weights.shape[1]))
    for mi in range(m):
        for ai in range(a):
            g = fmap.group.elements[ai]
            for slot in range(nbr.neighbor_indices.shape[1]):
                i = nbr.neighbor_indices[mi, slot]
                if i == nbr.sentinel:
                    continue
                local = g.T @ (fmap.coords[i] - nbr.centers[mi])
                stacked = np.concatenate([fmap.values[i, ai], local])
                out[mi, ai] += stacked @ params.weights
    return out


def oracle_group_conv(fmap, kernel):
    """Table-free double loop: the gather index is found by forming the
    matrix product g_a @ tap^-1 and looking up the nearest element."""
    group = fmap.group
    a = len(group)
    angles = group.element_angles_deg()
    taps = np.lexsort((np.arange(a), angles))[: kernel.neighbor_size]
    out = np.zeros((fmap.values.shape[0], a, kernel.weights.shape[2]))
    for ai in range(a):
        for j, tap in enumerate(taps):
            target = group.elements[ai] @ group.elements[tap].T
            idx = int(np.argmin(angles_to(group.elements, target)))
            out[:, ai] += fmap.values[:, idx] @ kernel.weights[j]
    return out


class TestKernelPoints:
    def test_single_point_is_origin(self):
        np.testing.assert_array_equal(make_kernel_points(1, 0.5), np.zeros((1, 3)))

    @pytest.mark.parametrize("k", [2, 5, 8, 13])
    def test_points_stay_in_ball_and_apart(self, k):
        pts = make_kernel_points(k, 0.8)
        assert np.all(np.linalg.norm(pts, axis=1) <= 0.8 + 1e-12)
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 0

    def test_layout_regression_k13(self):
        pts = make_kernel_points(13, 1.0)
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() == pytest.approx(KERNEL_13_MIN_PAIRWISE, abs=1e-9)

    def test_deterministic(self):
        np.testing.assert_array_equal(make_kernel_points(7, 0.4), make_kernel_points(7, 0.4))


class TestCorrelation:
    def test_coincident_points(self):
        assert correlation([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], 0.5, "linear") == 1.0
        assert correlation([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], 0.5, "gaussian") == 1.0

    def test_linear_half_sigma(self):
        assert correlation([0.25, 0, 0], [0, 0, 0], 0.5, "linear") == pytest.approx(0.5)

    def test_linear_clamps_to_zero(self):
        assert correlation([0.5, 0, 0], [0, 0, 0], 0.5, "linear") == 0.0
        assert correlation([0.9, 0, 0], [0, 0, 0], 0.5, "linear") == 0.0

    def test_gaussian_form(self):
        assert correlation([0.3, 0, 0], [0, 0, 0], 0.5, "gaussian") == pytest.approx(
            np.exp(-0.09 / (2 * 0.25))
        )


class TestPointConv:
    def test_single_point_single_kernel(self, tetra, rng):
        coords = np.zeros((1, 3))
        values = rng.standard_normal((1, 12, 3))
        fmap = FeatureMap(coords, values, tetra)
        w = rng.standard_normal((1, 3, 2))
        kernel = ExplicitKernel(np.zeros((1, 3)), w, sigma=0.5, radius=1.0)
        nbr = identity_table(coords, radius=0.1, k_max=1)
        out = se3_point_conv(fmap, kernel, nbr)
        np.testing.assert_allclose(out.values, values @ w[0], atol=1e-15)

    def test_shadow_only_rows_are_zero(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 5, 4)
        far = np.array([[50.0, 0, 0]])
        nbr = ball_query(fmap.coords, far, radius=0.5, k_max=3)
        kernel = ExplicitKernel(
            make_kernel_points(4, 0.5), rng.standard_normal((4, 4, 2)), sigma=0.3, radius=0.5
        )
        out = se3_point_conv(fmap, kernel, nbr)
        np.testing.assert_array_equal(out.values, np.zeros((1, 12, 2)))

    @pytest.mark.parametrize("kind", ["linear", "gaussian"])
    def test_matches_triple_loop_oracle(self, tetra, rng, kind):
        fmap = random_fmap(rng, tetra, 16, 3)
        nbr = ball_query(fmap.coords, fmap.coords[:6], radius=2.0, k_max=8)
        kernel = ExplicitKernel(
            make_kernel_points(4, 1.0),
            rng.standard_normal((4, 3, 5)),
            sigma=0.8,
            radius=1.0,
            correlation_kind=kind,
        )
        got = se3_point_conv(fmap, kernel, nbr)
        np.testing.assert_allclose(got.values, oracle_point_conv(fmap, kernel, nbr), atol=1e-12)

    def test_rotation_equivariance(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 12, 4)
        nbr = ball_query(fmap.coords, fmap.coords[:5], radius=1.5, k_max=6)
        kernel = ExplicitKernel(
            make_kernel_points(5, 0.9), rng.standard_normal((5, 4, 4)), sigma=0.7, radius=0.9
        )
        base = se3_point_conv(fmap, kernel, nbr)
        for r_index in range(len(tetra)):
            r = tetra.elements[r_index]
            perm = tetra.left_translation_permutation(r_index)
            rotated = FeatureMap(fmap.coords @ r.T, fmap.values[:, perm, :], tetra)
            nbr_rot = NeighborhoodTable(
                centers=nbr.centers @ r.T,
                neighbor_indices=nbr.neighbor_indices,
                counts=nbr.counts,
                radius=nbr.radius,
                n_source=nbr.n_source,
            )
            got = se3_point_conv(rotated, kernel, nbr_rot)
            assert np.max(np.abs(got.values - base.values[:, perm, :])) < 1e-9

    def test_linearity(self, tetra, rng):
        f1 = random_fmap(rng, tetra, 8, 3)
        f2 = FeatureMap(f1.coords, rng.standard_normal(f1.values.shape), tetra)
        nbr = identity_table(f1.coords, radius=3.0)
        kernel = ExplicitKernel(
            make_kernel_points(3, 1.0), rng.standard_normal((3, 3, 3)), sigma=1.0, radius=1.0
        )
        mixed = FeatureMap(f1.coords, 2.0 * f1.values - 0.5 * f2.values, tetra)
        lhs = se3_point_conv(mixed, kernel, nbr).values
        rhs = 2.0 * se3_point_conv(f1, kernel, nbr).values - 0.5 * se3_point_conv(f2, kernel, nbr).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_dimension_mismatch_raises(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 4, 3)
        nbr = identity_table(fmap.coords)
        kernel = ExplicitKernel(
            make_kernel_points(2, 1.0), rng.standard_normal((2, 5, 2)), sigma=0.5, radius=1.0
        )
        with pytest.raises(ValueError):
            se3_point_conv(fmap, kernel, nbr)


class TestImplicitConv:
    def test_zero_features_self_neighbor(self, tetra):
        coords = np.zeros((1, 3))
        fmap = FeatureMap(coords, np.zeros((1, 12, 2)), tetra)
        params = ImplicitKernelParams(np.ones((5, 3)))
        nbr = identity_table(coords, radius=0.1, k_max=1)
        out = implicit_point_conv(fmap, params, nbr)
        np.testing.assert_array_equal(out.values, np.zeros((1, 12, 3)))

    def test_single_displacement_reads_coordinate_rows(self, tetra, rng):
        coords = np.array([[0.0, 0, 0], [0.2, -0.1, 0.4]])
        fmap = FeatureMap(coords, np.zeros((2, 12, 2)), tetra)
        w = rng.standard_normal((5, 3))
        params = ImplicitKernelParams(w)
        nbr = NeighborhoodTable(
            centers=coords[:1],
            neighbor_indices=np.array([[1]]),
            counts=np.array([1]),
            radius=1.0,
            n_source=2,
        )
        out = implicit_point_conv(fmap, params, nbr)
        d = coords[1] - coords[0]
        np.testing.assert_allclose(out.values[0, 0], d @ w[2:], atol=1e-15)

    def test_matches_loop_oracle(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 10, 3)
        nbr = ball_query(fmap.coords, fmap.coords[:4], radius=2.5, k_max=6)
        params = ImplicitKernelParams(rng.standard_normal((6, 4)))
        got = implicit_point_conv(fmap, params, nbr)
        np.testing.assert_allclose(got.values, oracle_implicit_conv(fmap, params, nbr), atol=1e-12)


class TestGroupConv:
    def test_single_tap_is_pointwise_linear(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 6, 3)
        w = rng.standard_normal((1, 3, 4))
        out = se3_group_conv(fmap, GroupKernel(w))
        np.testing.assert_allclose(out.values, fmap.values @ w[0], atol=1e-14)

    def test_averaging_kernel(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 5, 3)
        k_g = 4
        w = np.stack([np.eye(3) / k_g] * k_g)
        out = se3_group_conv(fmap, GroupKernel(w))
        gather = group_gather_table(tetra, k_g)
        expected = np.mean([fmap.values[:, gather[j], :] for j in range(k_g)], axis=0)
        np.testing.assert_allclose(out.values, expected, atol=1e-14)

    def test_matches_table_free_oracle(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 7, 3)
        kernel = GroupKernel(rng.standard_normal((4, 3, 5)))
        got = se3_group_conv(fmap, kernel)
        np.testing.assert_allclose(got.values, oracle_group_conv(fmap, kernel), atol=1e-12)

    def test_rotation_equivariance(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 6, 4)
        kernel = GroupKernel(rng.standard_normal((5, 4, 3)))
        base = se3_group_conv(fmap, kernel)
        for r_index in range(len(tetra)):
            perm = tetra.left_translation_permutation(r_index)
            rotated = FeatureMap(
                fmap.coords @ tetra.elements[r_index].T, fmap.values[:, perm, :], tetra
            )
            got = se3_group_conv(rotated, kernel)
            assert np.max(np.abs(got.values - base.values[:, perm, :])) < 1e-12


class TestNaiveConv:
    def _setup(self, group, rng, k_p=3, k_g=4, c_in=3, c_out=4, n=10):
        fmap = random_fmap(rng, group, n, c_in)
        nbr = ball_query(fmap.coords, fmap.coords, radius=2.0, k_max=6)
        points = make_kernel_points(k_p, 1.0)
        taps = group.identity_neighborhood(k_g)
        return fmap, nbr, points, taps

    def test_rotational_delta_reduces_to_point_conv(self, tetra, rng):
        fmap, nbr, points, taps = self._setup(tetra, rng)
        w_spatial = rng.standard_normal((3, 3, 4))
        weights = np.zeros((3, len(taps), 3, 4))
        weights[:, 0] = w_spatial  # tap 0 is the identity
        assert taps[0] == 0
        kernel6d = SixDimKernel(points, taps, weights, sigma=0.8, radius=1.0)
        explicit = ExplicitKernel(points, w_spatial, sigma=0.8, radius=1.0)
        got = naive_se3_conv(fmap, kernel6d, nbr)
        want = se3_point_conv(fmap, explicit, nbr)
        np.testing.assert_allclose(got.values, want.values, atol=1e-12)

    def test_spatial_delta_reduces_to_group_conv(self, tetra, rng):
        fmap, nbr, _, taps = self._setup(tetra, rng)
        w_group = rng.standard_normal((len(taps), 3, 4))
        kernel6d = SixDimKernel(
            np.zeros((1, 3)), taps, w_group[None], sigma=1e-9, radius=1.0
        )
        got = naive_se3_conv(fmap, kernel6d, nbr)
        want = se3_group_conv(fmap, GroupKernel(w_group))
        np.testing.assert_allclose(got.values, want.values, atol=1e-12)

    def test_mac_ratio_at_8_8(self, tetra, rng):
        c = 4
        fmap = random_fmap(rng, tetra, 8, c)
        nbr = ball_query(fmap.coords, fmap.coords, radius=2.0, k_max=4)
        points = make_kernel_points(8, 1.0)
        taps = tetra.identity_neighborhood(8)
        naive_counter = MacCounter()
        naive_se3_conv(
            fmap,
            SixDimKernel(points, taps, rng.standard_normal((8, 8, c, c)), sigma=0.8, radius=1.0),
            nbr,
            counter=naive_counter,
        )
        sep_counter = MacCounter()
        se3_point_conv(
            fmap,
            ExplicitKernel(points, rng.standard_normal((8, c, c)), sigma=0.8, radius=1.0),
            nbr,
            counter=sep_counter,
        )
        se3_group_conv(fmap, GroupKernel(rng.standard_normal((8, c, c))), counter=sep_counter)
        n_slots = 8 * len(tetra)
        assert naive_counter.count == 64 * c * c * n_slots
        assert sep_counter.count == 16 * c * c * n_slots
        assert naive_counter.count / sep_counter.count == 4.0


class TestSPConvBlock:
    def test_negative_values_through_leaky_relu(self):
        v = np.array([-2.0, -0.5, 0.0, 1.5])
        np.testing.assert_allclose(leaky_relu(v), [-0.02, -0.005, 0.0, 1.5])

    def test_identity_configuration_passes_through_to_group_stage(self, tetra, rng):
        coords = rng.standard_normal((6, 3))
        values = np.abs(rng.standard_normal((6, 12, 3)))  # nonnegative
        fmap = FeatureMap(coords, values, tetra)
        nbr = ball_query(coords, coords, radius=1e-6, k_max=1)
        kernel = ExplicitKernel(np.zeros((1, 3)), np.eye(3)[None], sigma=1e-9, radius=1.0)
        gkernel = GroupKernel(rng.standard_normal((3, 3, 2)))
        # eps = 0 makes inference-mode BN with unit/zero stats an exact identity
        bn1 = BatchNormState(gamma=np.ones(3), beta=np.zeros(3), eps=0.0)
        bn2 = BatchNormState(gamma=np.ones(2), beta=np.zeros(2), eps=0.0)
        got = spconv_block(fmap, kernel, gkernel, bn1, bn2, nbr, training=False)
        want = leaky_relu(se3_group_conv(fmap, gkernel).values)
        np.testing.assert_allclose(got.values, want, atol=1e-12)

    def test_block_equals_composition_exactly(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 8, 3)
        nbr = ball_query(fmap.coords, fmap.coords[:4], radius=2.0, k_max=5)
        kernel = ExplicitKernel(
            make_kernel_points(4, 1.0), rng.standard_normal((4, 3, 4)), sigma=0.8, radius=1.0
        )
        gkernel = GroupKernel(rng.standard_normal((3, 4, 4)))
        bn1 = BatchNormState(gamma=rng.random(4) + 0.5, beta=rng.standard_normal(4))
        bn2 = BatchNormState(gamma=rng.random(4) + 0.5, beta=rng.standard_normal(4))
        got = spconv_block(fmap, kernel, gkernel, bn1, bn2, nbr, training=False)
        stage = se3_point_conv(fmap, kernel, nbr)
        x = leaky_relu(batch_norm(stage.values, bn1, training=False))
        stage2 = se3_group_conv(FeatureMap(stage.coords, x, tetra), gkernel)
        want = leaky_relu(batch_norm(stage2.values, bn2, training=False))
        np.testing.assert_array_equal(got.values, want)

    def test_empty_population_raises(self, tetra):
        with pytest.raises(ValueError):
            batch_norm(np.zeros((0, 12, 3)), BatchNormState.identity(3), training=True)


class TestShadowNeutrality:
    def test_appending_shadow_slots_changes_nothing(self, tetra, rng):
        fmap = random_fmap(rng, tetra, 10, 3)
        kernel = ExplicitKernel(
            make_kernel_points(4, 1.0), rng.standard_normal((4, 3, 4)), sigma=0.8, radius=1.0
        )
        base_nbr = ball_query(fmap.coords, fmap.coords[:5], radius=1.0, k_max=4)
        padded = NeighborhoodTable(
            centers=base_nbr.centers,
            neighbor_indices=np.concatenate(
                [base_nbr.neighbor_indices, np.full((5, 3), base_nbr.sentinel)], axis=1
            ),
            counts=base_nbr.counts,
            radius=base_nbr.radius,
            n_source=base_nbr.n_source,
        )
        a = se3_point_conv(fmap, kernel, base_nbr)
        b = se3_point_conv(fmap, kernel, padded)
        assert np.max(np.abs(a.values - b.values)) < 1e-12


class TestSphericalInterpolation:
    def test_exact_match_short_circuits(self, icosa, rng):
        values = rng.standard_normal((60, 5))
        out = spherical_interpolate(values, icosa, icosa.elements[13], k=4, sharpness=3.0)
        np.testing.assert_array_equal(out, values[13])

    def test_constant_features_reproduce_constant(self, icosa, rng):
        values = np.full((60, 3), 1.75)
        out = spherical_interpolate(values, icosa, random_rotation(rng), k=6, sharpness=2.0)
        np.testing.assert_allclose(out, 1.75, atol=1e-12)

    def test_full_neighborhood_matches_softmax_oracle(self, icosa, rng):
        values = rng.standard_normal((60, 4))
        query = random_rotation(rng)
        lam = 4.0
        angles = np.radians(angles_to(icosa.elements, query))
        w = np.exp(lam * (np.cos(angles) - 1.0))
        expected = (w[:, None] * values).sum(axis=0) / w.sum()
        out = spherical_interpolate(values, icosa, query, k=60, sharpness=lam)
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestFeatureMap:
    def test_ones_lifting(self, tetra, rng):
        coords = rng.standard_normal((5, 3))
        fmap = ones_feature_map(coords, tetra)
        assert fmap.values.shape == (5, 12, 1)
        assert np.all(fmap.values == 1.0)

    def test_rejects_group_axis_mismatch(self, tetra, rng):
        with pytest.raises(ValueError):
            FeatureMap(rng.standard_normal((4, 3)), rng.standard_normal((4, 11, 2)), tetra)

    def test_rejects_non_finite(self, tetra, rng):
        values = rng.standard_normal((4, 12, 2))
        values[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            FeatureMap(rng.standard_normal((4, 3)), values, tetra)
