"""Tests for the scene parametrization and generator-side shaping ops."""

import numpy as np
import pytest

from softmesh.scene import (
    Background,
    ShapeImage,
    apply_generator_head,
    apply_generator_head_vjp,
    build_topology,
    crop_background,
    gaussian_blur,
    gaussian_blur_vjp,
    initial_sphere,
    shape_pyramid,
    size_constraint,
    size_constraint_vjp,
)

from _oracles import scipy_blur


def brute_force_topology_count(n):
    """Independent scan of all 2*(n-1)^2 grid triangles with the radius test."""
    c = (n - 1) / 2.0
    inside = lambda i, j: (i - c) ** 2 + (j - c) ** 2 <= c**2
    count = 0
    for i in range(n - 1):
        for j in range(n - 1):
            if inside(i, j) and inside(i + 1, j) and inside(i, j + 1):
                count += 1
            if inside(i + 1, j) and inside(i + 1, j + 1) and inside(i, j + 1):
                count += 1
    return count


class TestBuildTopology:
    def test_rejects_tiny_grid(self):
        with pytest.raises(ValueError):
            build_topology(3)

    def test_n4_corners_excluded(self):
        topo = build_topology(4)
        c = 1.5
        for tri in topo.triangles:
            for vid in tri:
                i, j = divmod(int(vid), 4)
                assert (i - c) ** 2 + (j - c) ** 2 <= c**2
        corner_ids = {0, 3, 12, 15}
        assert not corner_ids & set(topo.triangles.ravel().tolist())

    @pytest.mark.parametrize("n", [4, 7, 16, 33])
    def test_count_matches_brute_force(self, n):
        assert len(build_topology(n).triangles) == brute_force_topology_count(n)

    @pytest.mark.parametrize("n", [4, 16, 32])
    def test_no_duplicate_or_degenerate_triangles(self, n):
        tris = build_topology(n).triangles
        seen = {tuple(sorted(t)) for t in tris.tolist()}
        assert len(seen) == len(tris)
        for t in tris.tolist():
            assert len(set(t)) == 3

    def test_deterministic(self):
        a = build_topology(16)
        b = build_topology(16)
        assert np.array_equal(a.triangles, b.triangles)
        assert np.array_equal(a.uv, b.uv)

    def test_consistent_winding(self):
        # In grid-plane coordinates (x=col, y=row) all signed areas share a sign.
        n = 16
        topo = build_topology(n)
        ij = np.stack([np.arange(n * n) // n, np.arange(n * n) % n], axis=1)
        xy = np.stack([ij[:, 1], ij[:, 0]], axis=1).astype(float)
        tv = xy[topo.triangles]
        area2 = (tv[:, 1, 0] - tv[:, 0, 0]) * (tv[:, 2, 1] - tv[:, 0, 1]) - (
            tv[:, 1, 1] - tv[:, 0, 1]
        ) * (tv[:, 2, 0] - tv[:, 0, 0])
        assert np.all(area2 < 0) or np.all(area2 > 0)

    def test_uv_formula(self):
        n = 9
        topo = build_topology(n)
        vid = 3 * n + 5
        assert np.allclose(topo.uv[vid], [3 / (n - 1), 5 / (n - 1)])


class TestInitialSphere:
    def test_in_region_norms(self):
        n = 16
        shape = initial_sphere(n, 0.5)
        c = (n - 1) / 2.0
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        in_region = (ii - c) ** 2 + (jj - c) ** 2 <= c**2
        norms = np.sqrt((shape.data**2).sum(axis=0))
        assert np.allclose(norms[in_region], 0.5, atol=1e-6)

    def test_center_vertex_front_pole(self):
        shape = initial_sphere(17, 0.5)
        assert np.allclose(shape.data[:, 8, 8], [0.0, 0.0, 0.5], atol=1e-12)

    def test_radius_homogeneity(self):
        a = initial_sphere(12, 0.5)
        b = initial_sphere(12, 1.0)
        assert np.array_equal(b.data, 2.0 * a.data)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            initial_sphere(2, 0.5)
        with pytest.raises(ValueError):
            initial_sphere(8, 0.0)


class TestShapePyramid:
    def test_single_level_is_sigma1_blur(self):
        rng = np.random.default_rng(7)
        s = ShapeImage(rng.normal(size=(3, 12, 12)), 12)
        out = shape_pyramid([s])
        assert np.allclose(out.data, scipy_blur(s.data, 1.0), rtol=1e-12, atol=1e-12)

    def test_constant_image_factor(self):
        c = 0.37
        levels = [ShapeImage(np.full((3, 16, 16), c), 16) for _ in range(4)]
        out = shape_pyramid(levels)
        assert np.allclose(out.data, 1.875 * c, rtol=1e-12)

    def test_matches_independent_blur(self):
        rng = np.random.default_rng(11)
        levels = [ShapeImage(rng.normal(size=(3, 16, 16)), 16) for _ in range(2)]
        out = shape_pyramid(levels)
        expected = scipy_blur(levels[0].data, 1.0) + scipy_blur(levels[1].data, 2.0) / 2.0
        assert np.allclose(out.data, expected, rtol=1e-5, atol=1e-8)

    def test_linear(self):
        rng = np.random.default_rng(3)
        s1 = [ShapeImage(rng.normal(size=(3, 10, 10)), 10) for _ in range(3)]
        s2 = [ShapeImage(rng.normal(size=(3, 10, 10)), 10) for _ in range(3)]
        a, b = 1.7, -0.4
        mixed = [ShapeImage(a * x.data + b * y.data, 10) for x, y in zip(s1, s2)]
        lhs = shape_pyramid(mixed).data
        rhs = a * shape_pyramid(s1).data + b * shape_pyramid(s2).data
        assert np.allclose(lhs, rhs, atol=1e-6)

    def test_mismatched_sides_rejected(self):
        with pytest.raises(ValueError):
            shape_pyramid([
                ShapeImage(np.zeros((3, 8, 8)), 8),
                ShapeImage(np.zeros((3, 12, 12)), 12),
            ])

    def test_blur_adjoint_identity(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 14, 14))
        y = rng.normal(size=(3, 14, 14))
        for sigma in (1.0, 2.0, 4.0):
            lhs = (gaussian_blur(x, sigma) * y).sum()
            rhs = (x * gaussian_blur_vjp(y, sigma)).sum()
            assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


class TestSizeConstraint:
    def test_zero_stays_zero(self):
        s = ShapeImage(np.zeros((3, 8, 8)), 8)
        assert np.array_equal(size_constraint(s, 1.3).data, np.zeros((3, 8, 8)))

    def test_norm_asymptote(self):
        data = np.zeros((3, 8, 8))
        data[0] = 1e6
        out = size_constraint(ShapeImage(data, 8), 1.3)
        norms = np.sqrt((out.data**2).sum(axis=0))
        assert np.allclose(norms, 1.3, atol=1e-9)
        # Strictness holds for all inputs where float64 tanh has not yet
        # saturated to 1.0 (roughly |s| < 18.4); beyond that the output
        # norm equals s_max exactly in IEEE arithmetic.
        data[0] = 18.0
        norms = np.sqrt((size_constraint(ShapeImage(data, 8), 1.3).data ** 2).sum(axis=0))
        assert np.all(norms < 1.3)

    def test_scalar_case(self):
        data = np.zeros((3, 4, 4))
        data[0] = 0.1
        out = size_constraint(ShapeImage(data, 4), 1.3)
        assert np.allclose(out.data[0], 0.12957, atol=5e-6)
        assert np.allclose(out.data[1:], 0.0)

    def test_norm_bounded_and_direction_preserving(self):
        rng = np.random.default_rng(13)
        data = rng.normal(scale=3.0, size=(3, 16, 16))
        out = size_constraint(ShapeImage(data, 16), 1.3).data
        norms = np.sqrt((out**2).sum(axis=0))
        assert np.all(norms < 1.3)
        in_norms = np.sqrt((data**2).sum(axis=0))
        ratio = out / np.where(np.abs(data) > 1e-12, data, 1.0)
        # per-vertex the three channel ratios agree and are nonnegative
        mask = in_norms > 1e-6
        assert np.all(ratio[:, mask] >= 0)
        assert np.allclose(ratio[0, mask], ratio[1, mask], rtol=1e-9, atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        vertices = rng.normal(scale=1.5, size=(100, 3))
        vertices[0] = 0.0  # include the series branch
        vertices[1] = [1e-5, 0, 0]
        h = 1e-6
        for v in vertices:
            single = lambda x: size_constraint(
                ShapeImage(x.reshape(3, 1, 1) * np.ones((3, 4, 4)), 4), 1.3
            ).data[:, 0, 0]
            jac_fd = np.zeros((3, 3))
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                jac_fd[:, i] = (single(v + e) - single(v - e)) / (2 * h)
            jac_an = np.zeros((3, 3))
            for i in range(3):
                cot = np.zeros((3, 1, 1))
                cot[i] = 1.0
                row = size_constraint_vjp(v.reshape(3, 1, 1), cot, 1.3)
                jac_an[i] = row[:, 0, 0]
            assert np.allclose(jac_an, jac_fd, rtol=1e-5, atol=1e-7)


class TestGeneratorHead:
    def test_zero_raw_gives_constrained_sphere(self):
        s0 = initial_sphere(12, 0.5)
        raw = [ShapeImage(np.zeros((3, 12, 12)), 12) for _ in range(4)]
        out = apply_generator_head(raw, scale=0.002, s0=s0, s_max=1.3)
        assert np.allclose(out.data, size_constraint(s0, 1.3).data)

    def test_zero_scale_ignores_raw(self):
        rng = np.random.default_rng(23)
        s0 = initial_sphere(12, 0.5)
        raw = [ShapeImage(rng.normal(size=(3, 12, 12)), 12) for _ in range(4)]
        out = apply_generator_head(raw, scale=0.0, s0=s0, s_max=1.3)
        assert np.allclose(out.data, size_constraint(s0, 1.3).data)

    def test_matches_manual_composition(self):
        rng = np.random.default_rng(29)
        s0 = initial_sphere(10, 0.5)
        raw = [ShapeImage(rng.normal(size=(3, 10, 10)), 10) for _ in range(3)]
        out = apply_generator_head(raw, scale=0.002, s0=s0, s_max=1.3)
        manual = size_constraint(
            ShapeImage(s0.data + 0.002 * shape_pyramid(raw).data, 10), 1.3
        )
        assert np.allclose(out.data, manual.data, atol=1e-7)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        s0 = initial_sphere(8, 0.5)
        raw = [ShapeImage(rng.normal(size=(3, 8, 8)), 8) for _ in range(2)]
        cot = rng.normal(size=(3, 8, 8))
        grads = apply_generator_head_vjp(raw, cot, scale=0.002, s0=s0, s_max=1.3)
        direction = [rng.normal(size=(3, 8, 8)) for _ in range(2)]
        analytic = sum((g * d).sum() for g, d in zip(grads, direction))
        h = 1e-5
        def value(sign):
            moved = [ShapeImage(r.data + sign * h * d, 8) for r, d in zip(raw, direction)]
            return (apply_generator_head(moved, 0.002, s0, 1.3).data * cot).sum()
        fd = (value(+1) - value(-1)) / (2 * h)
        assert np.isclose(analytic, fd, rtol=1e-6, atol=1e-9)


class TestCropBackground:
    def test_corner_windows(self):
        rng = np.random.default_rng(37)
        data = rng.uniform(size=(3, 16, 16))
        b = Background(data)
        assert np.array_equal(crop_background(b, (0, 0), 8), data[:, :8, :8])
        assert np.array_equal(crop_background(b, (8, 8), 8), data[:, 8:, 8:])

    def test_constant_and_affine_commute(self):
        data = np.full((3, 12, 12), 0.6)
        assert np.allclose(crop_background(Background(data), (2, 5), 6), 0.6)
        rng = np.random.default_rng(41)
        raw = rng.uniform(size=(3, 12, 12))
        crop_then_map = 2.0 * crop_background(Background(raw), (3, 1), 6) + 0.1
        map_then_crop = crop_background(Background(2.0 * raw + 0.1), (3, 1), 6)
        assert np.allclose(crop_then_map, map_then_crop)

    def test_out_of_range_offset_rejected(self):
        b = Background(np.zeros((3, 16, 16)))
        with pytest.raises(ValueError):
            crop_background(b, (9, 0), 8)
        with pytest.raises(ValueError):
            crop_background(b, (0, -1), 8)
