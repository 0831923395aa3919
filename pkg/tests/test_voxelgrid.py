import itertools

import numpy as np
import pytest

from volpose.errors import DegenerateInput, NonPositiveDepth
from volpose.skeleton import Skeleton, make_toy_skeleton, project_pose, sample_pose
from volpose.voxelgrid import (
    LADDER_DEPTHS,
    VoxelGrid,
    clip_to_grid,
    estimate_root_depth,
    lift_to_3d,
    metric_to_voxel,
    root_depth_objective,
    voxel_to_metric,
)

F, PP = 1000.0, (500.0, 500.0)


@pytest.fixture
def grid64():
    return VoxelGrid(64, 64, 64, (0.0, 0.0, 256.0, 256.0), z_center=3000.0, z_half_range=1000.0)


def test_midpoint_maps_to_grid_midpoint(grid64):
    assert np.allclose(metric_to_voxel(grid64, (128.0, 128.0), 3000.0), (32.0, 32.0, 32.0))


def test_lower_corner(grid64):
    assert np.allclose(metric_to_voxel(grid64, (0.0, 0.0), 2000.0), (0.0, 0.0, 0.0))


def test_hand_evaluated_point(grid64):
    # 64/256*64 = 16, 192/256*64 = 48, (3500-2000)/2000*64 = 48
    assert np.allclose(metric_to_voxel(grid64, (64.0, 192.0), 3500.0), (16.0, 48.0, 48.0))


def test_inverse_midpoint_and_upper_depth_edge(grid64):
    uv, z = voxel_to_metric(grid64, (32.0, 32.0, 32.0))
    assert np.allclose(uv, (128.0, 128.0)) and z == pytest.approx(3000.0)
    uv, z = voxel_to_metric(grid64, (0.0, 0.0, 64.0))
    assert np.allclose(uv, (0.0, 0.0)) and z == pytest.approx(4000.0)


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1.0)


def test_roundtrip_random(grid64):
    rng = np.random.default_rng(0)
    uv = rng.uniform(-200, 500, size=(1000, 2))
    z = rng.uniform(1000, 5000, size=1000)
    uv2, z2 = voxel_to_metric(grid64, metric_to_voxel(grid64, uv, z))
    assert _rel(uv2, uv).max() < 1e-9
    assert _rel(z2, z).max() < 1e-9


@pytest.mark.parametrize("d", LADDER_DEPTHS)
def test_roundtrip_every_supported_shape(d):
    rng = np.random.default_rng(d)
    for w, h in itertools.product(LADDER_DEPTHS, LADDER_DEPTHS):
        grid = VoxelGrid(w, h, d, (13.0, -7.0, 211.0, 97.0), z_center=4100.0)
        vc = rng.uniform(-1, 1, size=(50, 3)) * [w, h, d] + [w / 2, h / 2, d / 2]
        uv, z = voxel_to_metric(grid, vc)
        assert _rel(metric_to_voxel(grid, uv, z), vc).max() < 1e-9


def test_metric_to_voxel_is_affine(grid64):
    rng = np.random.default_rng(1)
    for _ in range(50):
        p, a, b = rng.uniform(0, 300, size=(3, 2))
        z, za, zb = rng.uniform(1000, 4000, size=3)
        f = lambda uv, zz: metric_to_voxel(grid64, uv, zz)
        lhs = f(p + a + b, z + za + zb) - f(p, z)
        rhs = (f(p + a, z + za) - f(p, z)) + (f(p + b, z + zb) - f(p, z))
        assert np.allclose(lhs, rhs, atol=1e-9)


def test_lift_on_axis():
    grid = VoxelGrid(16, 16, 16, (PP[0] - 8, PP[1] - 8, 16.0, 16.0), z_center=2000.0)
    assert np.allclose(lift_to_3d(grid, (8.0, 8.0, 8.0), F, PP), (0.0, 0.0, 2000.0))


def test_lift_inverts_projection_example():
    # u = 200 with cx = 100, f = 1000, z = 2000 -> x = 200 mm
    grid = VoxelGrid(10, 10, 10, (0.0, 0.0, 400.0, 400.0), z_center=2000.0)
    vc = metric_to_voxel(grid, (200.0, 100.0), 2000.0)
    xyz = lift_to_3d(grid, vc, 1000.0, (100.0, 100.0))
    assert xyz[0] == pytest.approx(200.0)
    assert xyz[1] == pytest.approx(0.0, abs=1e-12)


def test_lift_rejects_nonpositive_depth():
    grid = VoxelGrid(4, 4, 4, (0.0, 0.0, 4.0, 4.0), z_center=1000.0, z_half_range=1000.0)
    with pytest.raises(NonPositiveDepth):
        lift_to_3d(grid, (1.0, 1.0, 0.0), F, PP)


def test_clip_to_grid_moves_outliers_to_boundary_centers():
    grid = VoxelGrid(4, 4, 4)
    vc, n = clip_to_grid(grid, [[-0.1, 2.0, 4.0], [1.0, 1.0, 1.0]])
    assert n == 1
    assert np.allclose(vc, [[0.5, 2.0, 3.5], [1.0, 1.0, 1.0]])


def _exact_inputs(skel, pose):
    p2 = project_pose(pose, F, PP)
    rel = pose.coords[:, 2] - pose.coords[skel.root_index, 2]
    return p2, rel


def test_root_depth_recovery_on_sampled_poses():
    toy = make_toy_skeleton()
    for seed in range(20):
        pose = sample_pose(toy, seed)
        p2, rel = _exact_inputs(toy, pose)
        z = estimate_root_depth(p2, rel, toy, F, PP)
        assert abs(z - pose.coords[0, 2]) < 25.0


def test_root_depth_scales_with_camera_distance():
    toy = make_toy_skeleton()
    pose = sample_pose(toy, 5)
    far = pose.coords.copy()
    far[:, 2] += far[0, 2]  # root twice as far, same relative depths
    z1 = estimate_root_depth(*_exact_inputs(toy, pose), toy, F, PP)
    z2 = estimate_root_depth(*_exact_inputs(toy, type(pose)(far)), toy, F, PP)
    assert z2 / z1 == pytest.approx(2.0, rel=0.05)


def test_single_limb_matches_brute_force_scan():
    skel = Skeleton(parent=[-1, 0], limb_length=[0.0, 400.0])
    rng = np.random.default_rng(3)
    for _ in range(5):
        root = np.array([rng.uniform(-300, 300), rng.uniform(-300, 300), rng.uniform(1500, 6000)])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        pose = type(sample_pose(skel, 0))(np.stack([root, root + 400.0 * direction]))
        p2, rel = _exact_inputs(skel, pose)
        z = estimate_root_depth(p2, rel, skel, F, PP)
        grid = np.arange(500.0, 10000.0, 1.0)
        scan = grid[np.argmin([root_depth_objective(g, p2, rel, skel, F, PP) for g in grid])]
        assert abs(z - root[2]) <= 1.0
        assert abs(z - scan) <= 1.0


def test_golden_section_agrees_with_dense_scan():
    toy = make_toy_skeleton()
    grid = np.arange(500.0, 10000.0, 1.0)
    for seed in range(50):
        pose = sample_pose(toy, 1000 + seed)
        p2, rel = _exact_inputs(toy, pose)
        # perturb the relative depths so the optimum is not trivially exact
        rel = rel + np.random.default_rng(seed).normal(scale=30.0, size=rel.shape)
        z = estimate_root_depth(p2, rel, toy, F, PP)
        objective = np.array([root_depth_objective(g, p2, rel, toy, F, PP) for g in grid])
        assert abs(z - grid[np.argmin(objective)]) <= 2.0


def test_root_depth_degenerate_input():
    toy = make_toy_skeleton()
    with pytest.raises(DegenerateInput):
        estimate_root_depth(np.full((12, 2), 10.0), np.zeros(12), toy, F, PP)
