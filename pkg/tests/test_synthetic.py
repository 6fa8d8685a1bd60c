import numpy as np
import pytest

from ribgraph.core import LABEL_STERNUM, LEVELS, PointCloud, RigidTransform, branch_label
from ribgraph.synthetic import (
    AffineShearField,
    RibcageParams,
    RigidField,
    SmoothBumpField,
    apply_deformation,
    generate_ribcage,
    load_ground_truth,
    random_bump_field,
    save_ground_truth,
    us_like,
)
from oracles import random_rotation


def kasa_radius(xy):
    a = np.column_stack([2 * xy[:, 0], 2 * xy[:, 1], np.ones(len(xy))])
    sol, *_ = np.linalg.lstsq(a, (xy ** 2).sum(axis=1), rcond=None)
    return float(np.sqrt(max(sol[2] + sol[0] ** 2 + sol[1] ** 2, 0.0)))


def binned_circle_radius(xy, n_bins=10):
    c = xy - xy.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    order = np.argsort(c @ vecs[:, -1])
    centroids = np.vstack([xy[chunk].mean(axis=0) for chunk in np.array_split(order, n_bins)])
    return kasa_radius(centroids)


class TestGenerate:
    def test_nine_parts(self, default_cage):
        cloud, _ = default_cage
        expected = {LABEL_STERNUM} | {branch_label(s, lv) for s in (1, 2) for lv in LEVELS}
        assert set(cloud.labels.tolist()) == expected

    def test_density_scales_point_count(self):
        base = generate_ribcage(RibcageParams(rng_seed=3))[0]
        dense = generate_ribcage(RibcageParams(rng_seed=3, point_density=1.0))[0]
        assert 1.8 <= len(dense) / len(base) <= 2.2

    def test_deterministic(self):
        a, ta = generate_ribcage(RibcageParams(rng_seed=7))
        b, tb = generate_ribcage(RibcageParams(rng_seed=7))
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(ta.corr_ids, tb.corr_ids)
        assert np.array_equal(ta.waypoints, tb.waypoints)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            RibcageParams(point_density=-1)
        with pytest.raises(ValueError):
            RibcageParams(branch_curvatures=(0.02, 0.01, 0.009, 0.008))

    def test_curvature_ordering_of_circle_fits(self, default_cage):
        cloud, _ = default_cage
        for side in (1, 2):
            r2 = binned_circle_radius(cloud.points[cloud.labels == branch_label(side, 2)][:, :2])
            r5 = binned_circle_radius(cloud.points[cloud.labels == branch_label(side, 5)][:, :2])
            assert r2 > r5

    def test_waypoints_sit_between_consecutive_levels(self, default_cage):
        cloud, truth = default_cage
        branch_mask = cloud.labels != LABEL_STERNUM
        pts = cloud.points[branch_mask]
        lbl = cloud.labels[branch_mask]
        for w in truth.waypoints:
            d = np.linalg.norm(pts - w, axis=1)
            order = np.argsort(d)
            nearest: list[int] = []
            for j in order:
                code = int(lbl[j])
                if code not in nearest:
                    nearest.append(code)
                if len(nearest) == 2:
                    break
            sides = {c // 10 for c in nearest}
            levels = sorted(c % 10 for c in nearest)
            assert len(sides) == 1
            assert levels[1] - levels[0] == 1

    def test_waypoint_protocol_counts(self, default_cage):
        _, truth = default_cage
        assert len(truth.waypoints) == 20
        for side in (1, 2):
            per_space = [int(np.sum((truth.waypoint_sides == side) & (truth.waypoint_spaces == sp)))
                         for sp in (1, 2, 3)]
            assert per_space == [3, 3, 4]


class TestUsLike:
    def test_subset_with_preserved_ids(self, default_cage, default_us_cage):
        cloud, truth = default_cage
        us, ut = default_us_cage
        assert 0.5 < len(us) / len(cloud) < 0.95
        assert set(ut.corr_ids.tolist()) <= set(truth.corr_ids.tolist())
        # labels still agree with the source points through the id mapping
        src = {int(c): int(l) for c, l in zip(truth.corr_ids, truth.labels)}
        assert all(src[int(c)] == int(l) for c, l in zip(ut.corr_ids, ut.labels))


class TestDeformation:
    def test_rigid_identity_unchanged(self, default_cage):
        cloud, truth = default_cage
        out, _ = apply_deformation(cloud, truth, RigidField(RigidTransform.identity()))
        assert np.array_equal(out.points, cloud.points)

    def test_rigid_translation_exact(self, default_cage):
        cloud, truth = default_cage
        field = RigidField(RigidTransform(np.eye(3), [0.0, 0.0, 7.0]))
        out, otruth = apply_deformation(cloud, truth, field)
        assert np.array_equal(out.points, cloud.points + [0.0, 0.0, 7.0])
        assert np.array_equal(otruth.waypoints, truth.waypoints + [0.0, 0.0, 7.0])

    def test_labels_and_ids_preserved(self, default_cage, rng):
        cloud, truth = default_cage
        field = random_bump_field(cloud.points.min(0), cloud.points.max(0), 8.0, rng_seed=4)
        out, otruth = apply_deformation(cloud, truth, field)
        assert np.array_equal(otruth.labels, truth.labels)
        assert np.array_equal(otruth.corr_ids, truth.corr_ids)
        assert np.array_equal(out.labels, cloud.labels)

    def test_bump_respects_amplitude_bound(self, default_cage):
        cloud, truth = default_cage
        field = random_bump_field(cloud.points.min(0), cloud.points.max(0), 8.0, rng_seed=9)
        out, _ = apply_deformation(cloud, truth, field)
        moved = np.linalg.norm(out.points - cloud.points, axis=1)
        assert moved.max() <= 8.0 + 1e-9
        assert moved.mean() > 0.0

    def test_bump_bound_validated_at_construction(self):
        with pytest.raises(ValueError):
            SmoothBumpField(centers=np.zeros((1, 3)), amplitudes=np.array([[9.0, 0, 0]]),
                            length_scales=np.array([10.0]), amplitude=8.0)

    def test_shear_field_applies_linear_map(self, rng):
        shear = np.zeros((3, 3))
        shear[0, 1] = 0.05
        field = AffineShearField(shear=shear, offset=np.array([1.0, 0.0, 0.0]))
        pts = rng.normal(size=(10, 3))
        expected = pts @ (np.eye(3) + shear).T + [1.0, 0.0, 0.0]
        assert np.allclose(field.apply(pts), expected)

    def test_displace_matches_apply(self, default_cage):
        cloud, _ = default_cage
        field = random_bump_field(cloud.points.min(0), cloud.points.max(0), 5.0, rng_seed=11)
        assert np.allclose(cloud.points + field.displace(cloud.points), field.apply(cloud.points))

    def test_rigid_rotation_rotates_normals(self, default_cage):
        cloud, truth = default_cage
        rot = random_rotation(np.random.default_rng(3))
        out, otruth = apply_deformation(cloud, truth, RigidField(RigidTransform(rot, np.zeros(3))))
        assert np.allclose(otruth.normals, truth.normals @ rot.T)


class TestSidecar:
    def test_round_trip(self, tmp_path, default_us_cage):
        _, truth = default_us_cage
        path = tmp_path / "truth.csv"
        save_ground_truth(truth, path)
        corr, labels = load_ground_truth(path)
        assert np.array_equal(corr, truth.corr_ids)
        assert np.array_equal(labels, truth.labels)
