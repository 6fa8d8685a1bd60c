import numpy as np
import pytest

from oracles import naive_template_scores
from ribgraph.coarse import (
    REFINEMENT_PASSES,
    BinaryImage,
    CoarseParams,
    FeaturePlane,
    SternumPose,
    analyze_cloud,
    coarse_align,
    find_sternum_boundaries,
    flood_fill,
    make_rotated_masks,
    match_template,
    normalize_angle_deg,
    project_to_feature_plane,
    rasterize,
    refine_sternum,
    segment_cartilage,
)
from ribgraph.core import LABEL_STERNUM, LABEL_UNASSIGNED, Basis3, PointCloud, RigidTransform, kabsch_fit
from ribgraph.errors import BoundaryNotFoundError, SegmentationError
from ribgraph.synthetic import RibcageParams, RigidField, apply_deformation, generate_ribcage


def flat_plane(points2d, depths=None) -> FeaturePlane:
    """Feature plane in identity coordinates, for raster-level fixtures."""
    pts = np.asarray(points2d, dtype=np.float64)
    d = np.zeros(len(pts)) if depths is None else np.asarray(depths, dtype=np.float64)
    return FeaturePlane(Basis3(np.zeros(3), np.eye(3)), pts, d)


def solid_rect_points(w=30.0, h=90.0, spacing=1.0):
    xs = np.arange(-w / 2, w / 2 + 1e-9, spacing)
    ys = np.arange(-h / 2, h / 2 + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


class TestFeaturePlane:
    def test_planar_cloud_zero_depth(self, rng):
        pts = np.column_stack([rng.uniform(-30, 30, 300), rng.uniform(-10, 10, 300), np.zeros(300)])
        plane = project_to_feature_plane(PointCloud(pts))
        assert np.allclose(plane.depths, 0.0, atol=1e-9)

    def test_reconstruction_round_trip(self, default_cage):
        cloud, _ = default_cage
        plane = project_to_feature_plane(cloud)
        assert np.abs(plane.reconstruct() - cloud.points).max() < 1e-9

    def test_front_view_has_least_variance(self, default_cage):
        cloud, _ = default_cage
        plane = project_to_feature_plane(cloud)
        extent2d = plane.points2d.max(axis=0) - plane.points2d.min(axis=0)
        depth_range = plane.depths.max() - plane.depths.min()
        assert depth_range < 0.5 * extent2d.min()

    def test_rotated_cloud_same_projection_up_to_2d_rigid(self, default_cage):
        from oracles import random_rotation
        cloud, _ = default_cage
        rot = random_rotation(np.random.default_rng(17))
        moved = PointCloud(cloud.points @ rot.T + [4.0, -2.0, 9.0])
        p1 = project_to_feature_plane(cloud).points2d
        p2 = project_to_feature_plane(moved).points2d
        # 3D Kabsch on the zero-padded 2D sets measures the residual 2D rigid mismatch
        fit = kabsch_fit(np.column_stack([p1, np.zeros(len(p1))]),
                         np.column_stack([p2, np.zeros(len(p2))]))
        moved_p1 = fit.apply(np.column_stack([p1, np.zeros(len(p1))]))[:, :2]
        assert np.abs(moved_p1 - p2).max() < 1e-6

    def test_basis_right_handed_front_positive(self, default_cage, default_us_cage):
        for cloud in (default_cage[0], default_us_cage[0]):
            plane = project_to_feature_plane(cloud)
            assert np.linalg.det(plane.basis.axes) > 0
            assert np.sum(plane.depths > 0) >= np.sum(plane.depths < 0)


class TestRasterize:
    def test_single_point_single_pixel(self):
        img = rasterize(flat_plane([[3.0, 4.0]]), scale=5.0)
        assert int(img.bits.sum()) == 1

    def test_rect_block_size(self):
        img = rasterize(flat_plane(solid_rect_points()), scale=5.0)
        rows = np.nonzero(img.bits.any(axis=1))[0]
        cols = np.nonzero(img.bits.any(axis=0))[0]
        # 30x90 mm at 5 mm/px: 6x18 block, boundary rounding +-1 px per side
        assert abs(len(cols) - 6) <= 2
        assert abs(len(rows) - 18) <= 2
        filled = img.bits[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        assert filled.all()

    def test_halved_scale_non_decreasing_count(self, default_cage):
        plane = project_to_feature_plane(default_cage[0])
        coarse = rasterize(plane, 5.0)
        fine = rasterize(plane, 2.5)
        assert fine.bits.sum() >= coarse.bits.sum()

    def test_every_point_lands_on_set_pixel(self, default_cage):
        plane = project_to_feature_plane(default_cage[0])
        img = rasterize(plane, 2.0)
        idx = img.pixel_of(plane.points2d)
        assert img.bits[idx[:, 1], idx[:, 0]].all()

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError):
            rasterize(flat_plane([[0.0, 0.0]]), scale=0.0)


class TestMasks:
    def test_mask_edge_is_18_at_5mm(self):
        masks = make_rotated_masks((30.0, 90.0), 5.0, [0.0])
        assert masks[0].bits.shape == (18, 18)

    def test_zero_angle_band(self):
        mask = make_rotated_masks((30.0, 90.0), 5.0, [0.0])[0].bits
        cols = np.nonzero(mask.any(axis=0))[0]
        assert list(cols) == [6, 7, 8, 9, 10, 11]
        assert mask[:, 6:12].all()

    def test_ninety_degrees_is_transpose(self):
        m0 = make_rotated_masks((30.0, 90.0), 5.0, [0.0])[0].bits
        m90 = make_rotated_masks((30.0, 90.0), 5.0, [90.0])[0].bits
        assert np.array_equal(m90, m0.T)

    def test_area_roughly_preserved_across_angles(self):
        masks = make_rotated_masks((30.0, 90.0), 5.0, np.arange(-90, 90, 10))
        counts = np.array([m.bits.sum() for m in masks])
        assert counts.max() <= 1.05 * counts.min()


class TestMatchTemplate:
    def test_recovers_planted_mask(self):
        masks = make_rotated_masks((30.0, 90.0), 5.0, [-20.0, 0.0, 20.0])
        planted = masks[2]
        bits = np.zeros((40, 50), dtype=bool)
        bits[7:7 + 18, 11:11 + 18] = planted.bits.astype(bool)
        img = BinaryImage(bits, 5.0, np.zeros(2))
        pose = match_template(img, masks)
        assert pose.angle_deg == 20.0
        expected_center = np.array([11 + 9, 7 + 9]) * 5.0
        assert np.allclose(pose.center2d, expected_center)
        assert pose.score == int(planted.bits.sum())

    def test_all_ones_tie_break(self):
        masks = make_rotated_masks((30.0, 90.0), 5.0, [10.0, 0.0, -10.0])
        img = BinaryImage(np.ones((30, 30), dtype=bool), 5.0, np.zeros(2))
        pose = match_template(img, masks)
        assert pose.angle_deg == 0.0  # lowest angle magnitude wins
        assert pose.score == int(masks[1].bits.sum())
        assert np.allclose(pose.center2d, [9 * 5.0, 9 * 5.0])  # top-left placement

    def test_all_zero_errors(self):
        img = BinaryImage(np.zeros((30, 30), dtype=bool), 5.0, np.zeros(2))
        with pytest.raises(ValueError):
            match_template(img, make_rotated_masks((30.0, 90.0), 5.0, [0.0]))

    def test_matches_naive_scores(self, rng):
        img_bits = rng.random((40, 36)) < 0.3
        img = BinaryImage(img_bits, 5.0, np.zeros(2))
        masks = make_rotated_masks((30.0, 90.0), 5.0, [-30.0, 0.0, 45.0])
        pose = match_template(img, masks)
        best = -1
        for mask in masks:
            best = max(best, int(naive_template_scores(img_bits.astype(np.int64),
                                                       mask.bits.astype(np.int64)).max()))
        assert pose.score == best

    def test_synthetic_cage_found(self, default_cage):
        cloud, _ = default_cage
        plane = project_to_feature_plane(cloud)
        img = rasterize(plane, 5.0)
        masks = make_rotated_masks((30.0, 90.0), 5.0, np.arange(-90, 90, 10))
        pose = match_template(img, masks)
        true_center = plane.basis.to_local(np.zeros((1, 3)))[0, :2]
        assert np.linalg.norm(pose.center2d - true_center) < 10.0
        assert min(abs(pose.angle_deg), 180 - abs(pose.angle_deg)) < 10.0


class TestRefineSternum:
    def test_schedule_constants(self):
        assert REFINEMENT_PASSES == ((3.0, 15.0, 2.0), (2.0, 7.0, 1.0))

    def test_fixed_point_on_exact_rect(self):
        plane = flat_plane(solid_rect_points())
        img = rasterize(plane, 5.0)
        masks = make_rotated_masks((30.0, 90.0), 5.0, np.arange(-90, 90, 10))
        initial = match_template(img, masks)
        refined = refine_sternum(plane, initial)
        assert np.linalg.norm(refined.center2d - [0.0, 0.0]) <= 2.0
        assert min(abs(refined.angle_deg), 180 - abs(refined.angle_deg)) <= 1.0

    def test_synthetic_cage_accuracy(self, default_cage):
        cloud, _ = default_cage
        plane = project_to_feature_plane(cloud)
        img = rasterize(plane, 5.0)
        masks = make_rotated_masks((30.0, 90.0), 5.0, np.arange(-90, 90, 10))
        pose = refine_sternum(plane, match_template(img, masks))
        true_center = plane.basis.to_local(np.zeros((1, 3)))[0, :2]
        assert np.linalg.norm(pose.center2d - true_center) < 4.0
        assert min(abs(pose.angle_deg), 180 - abs(pose.angle_deg)) < 2.0


class TestBoundaries:
    def make_rect_image(self, extra=None, scale=2.0):
        pts = solid_rect_points()
        if extra is not None:
            pts = np.vstack([pts, extra])
        plane = flat_plane(pts)
        return rasterize(plane, scale)

    def pose(self):
        return SternumPose(np.zeros(2), 0.0, 0, (30.0, 90.0))

    def test_exact_rect_boundaries(self):
        img = self.make_rect_image()
        left, right = find_sternum_boundaries(img, self.pose())
        assert abs(-left - 15.0) <= 2.0 + 1e-9
        assert abs(right - 15.0) <= 2.0 + 1e-9

    def test_thin_branch_lines_ignored(self):
        lines = []
        for y0 in (-30.0, -10.0, 10.0, 30.0):
            xs = np.arange(17.0, 60.0, 1.0)
            lines.append(np.column_stack([xs, np.full(len(xs), y0)]))
            lines.append(np.column_stack([-xs, np.full(len(xs), y0)]))
        img = self.make_rect_image(np.vstack(lines))
        left, right = find_sternum_boundaries(img, self.pose())
        assert abs(-left - 15.0) <= 2.0 + 1e-9
        assert abs(right - 15.0) <= 2.0 + 1e-9

    def test_all_set_image_errors(self):
        img = BinaryImage(np.ones((120, 120), dtype=bool), 2.0, np.array([-120.0, -120.0]))
        with pytest.raises(BoundaryNotFoundError):
            find_sternum_boundaries(img, self.pose())


class TestFloodFill:
    def test_fills_component(self):
        bits = np.zeros((5, 7), dtype=bool)
        bits[1, 1:4] = True
        bits[2, 3] = True
        bits[4, 6] = True  # disconnected
        region = flood_fill(bits, np.zeros_like(bits), (1, 1))
        assert len(region) == 4
        assert (6, 4) not in {tuple(p) for p in region}

    def test_seed_in_masked_region_errors(self):
        bits = np.ones((4, 4), dtype=bool)
        blocked = np.zeros_like(bits)
        blocked[2, 2] = True
        with pytest.raises(SegmentationError):
            flood_fill(bits, blocked, (2, 2))

    def test_diagonal_not_connected(self):
        bits = np.zeros((3, 3), dtype=bool)
        bits[0, 0] = bits[1, 1] = True
        region = flood_fill(bits, np.zeros_like(bits), (0, 0))
        assert len(region) == 1


class TestSegmentCartilage:
    def test_synthetic_cage_labels(self, default_cage):
        cloud, truth = default_cage
        res = analyze_cloud(cloud)
        assert len(res.seg.branch_pixels) == 8
        cart = truth.labels != LABEL_STERNUM
        acc = np.mean(res.seg.labels[cart] == truth.labels[cart])
        assert acc >= 0.95
        for side in (1, 2):
            levels = sorted(code % 10 for code in res.seg.branch_pixels if code // 10 == side)
            assert levels == [2, 3, 4, 5]

    def test_mask_safety_no_branch_label_on_sternum(self, default_cage):
        cloud, truth = default_cage
        res = analyze_cloud(cloud)
        sternum = truth.labels == LABEL_STERNUM
        got = res.seg.labels[sternum]
        assert not np.any((got != LABEL_STERNUM) & (got != LABEL_UNASSIGNED))

    def test_mirrored_cage_swaps_sides_not_levels(self, default_cage):
        cloud, truth = default_cage
        mirrored = PointCloud(cloud.points * [-1.0, 1.0, 1.0], cloud.labels)
        res_m = analyze_cloud(mirrored)
        res_o = analyze_cloud(cloud)
        cart = truth.labels != LABEL_STERNUM
        orig, mirr = res_o.seg.labels[cart], res_m.seg.labels[cart]
        both = (orig != LABEL_UNASSIGNED) & (mirr != LABEL_UNASSIGNED)
        swapped = (orig // 10).astype(int), (mirr // 10).astype(int)
        assert np.mean(swapped[0][both] + swapped[1][both] == 3) > 0.95  # sides 1<->2
        assert np.mean((orig % 10)[both] == (mirr % 10)[both]) > 0.95    # levels equal

    def test_incomplete_side_errors(self):
        # a sternum with branches on the right side only
        pts = [solid_rect_points()]
        for y0 in (-30.0, -10.0, 10.0, 30.0):
            xs = np.arange(17.0, 60.0, 0.8)
            band = np.column_stack([xs, np.full(len(xs), y0)])
            pts.append(np.vstack([band + [0, dy] for dy in (-2.0, -1.0, 0.0, 1.0, 2.0)]))
        plane = flat_plane(np.vstack(pts))
        img = rasterize(plane, 2.0)
        pose = SternumPose(np.zeros(2), 0.0, 0, (30.0, 90.0))
        bounds = find_sternum_boundaries(img, pose)
        with pytest.raises(SegmentationError, match="left"):
            segment_cartilage(plane, img, pose, bounds)


class TestCoarseAlign:
    def test_identity(self, default_cage):
        res = analyze_cloud(default_cage[0])
        t = coarse_align(res, res)
        assert t.rotation_angle_deg() < 1e-9
        assert np.linalg.norm(t.translation) < 1e-9

    def test_recovers_rigid_copy(self, default_cage):
        cloud, truth = default_cage
        rng = np.random.default_rng(5)
        ang = np.radians(33.0)
        rot = np.array([[np.cos(ang), -np.sin(ang), 0], [np.sin(ang), np.cos(ang), 0], [0, 0, 1]])
        t_true = RigidTransform(rot, np.array([22.0, -14.0, 3.0]))
        moved, _ = apply_deformation(cloud, truth, RigidField(t_true))
        t_hat = coarse_align(analyze_cloud(cloud), analyze_cloud(moved))
        rel = t_hat.compose(t_true.inverse())
        assert rel.rotation_angle_deg() < 2.0
        centroid = cloud.points.mean(axis=0)
        assert np.linalg.norm(t_hat.apply(centroid) - t_true.apply(centroid)) < 2.0

    def test_half_turn_disambiguated(self, default_cage):
        cloud, truth = default_cage
        t_true = RigidTransform(np.diag([-1.0, -1.0, 1.0]), np.zeros(3))
        moved, _ = apply_deformation(cloud, truth, RigidField(t_true))
        t_hat = coarse_align(analyze_cloud(cloud), analyze_cloud(moved))
        assert abs(t_hat.rotation_angle_deg() - 180.0) < 2.0
        rel = t_hat.compose(t_true.inverse())
        assert rel.rotation_angle_deg() < 2.0

    def test_always_proper_rigid(self, default_cage, default_us_cage):
        t = coarse_align(analyze_cloud(default_cage[0]), analyze_cloud(default_us_cage[0]))
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9


def test_normalize_angle():
    assert normalize_angle_deg(90.0) == -90.0
    assert normalize_angle_deg(170.0) == -10.0
    assert normalize_angle_deg(-95.0) == 85.0
    assert normalize_angle_deg(45.0) == 45.0
