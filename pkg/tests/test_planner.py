import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvf import planner
from nvf import uncertainty as unc
from nvf.config import RunConfig
from nvf.errors import PlanningError
from nvf.field import VoxelField, inverse_softplus, logit, train_visibility_head
from nvf.geometry import CameraIntrinsics, camera_rays, clip_rays_to_box, look_at
from nvf.render import alpha_weights, sample_depths, spacings

from conftest import facing_x


def gt_field(scene, variance=1e-3):
    """Field whose density and colour grids equal the scene's node values."""
    f = VoxelField(scene.grid, background=scene.background, variance_init=variance)
    f.raw_density[:] = inverse_softplus(np.maximum(scene.density_grid.reshape(-1), 1e-6))
    f.raw_color[:] = logit(np.clip(scene.color_grid.reshape(-1, 3), 1e-4, 1 - 1e-4))
    return f


def room_center(scene, name):
    lo, hi = scene.regions[name]
    return 0.5 * (lo + hi)


def context(field, method="nvf", intr=None, n_samples=32, beta=0.5):
    intr = intr or CameraIntrinsics(16, 16, np.deg2rad(70.0))
    lo, hi = field.bounds
    priors = unc.UncertaintyPriors(sigma0=unc.UncertaintyPriors.sigma0_for_spacing(np.linalg.norm(hi - lo) / n_samples),
                                   beta=beta)
    corr = unc.CorrelationConfig(0.25, float(np.linalg.norm(hi - lo)), intr.delta_phi)
    return planner.EntropyContext(method, priors, corr, intr, n_samples)


def room_a_views(scene):
    """Views from around room A's centre facing every direction except the shared wall."""
    c = room_center(scene, "room_a")
    dirs = [(-1, 0, 0), (0, 1, 0), (0, -1, 0), (-1, 1, -0.5), (-1, -1, -0.5), (0.3, 0.2, -1), (0.3, -0.2, 1)]
    views = []
    for d in dirs:
        d = np.array(d, dtype=float)
        views.append(look_at(c - 0.2 * d / np.linalg.norm(d), c + d))
    return views


def room_a_field(scene, seed=0):
    """Exact geometry, visibility head fitted to views taken inside room A."""
    f = gt_field(scene)
    poses = room_a_views(scene)
    intr = CameraIntrinsics(16, 16, np.deg2rad(70.0))
    train_visibility_head(f, poses, intr, RunConfig().field, np.random.default_rng(seed), iterations=300)
    return f, poses


@pytest.fixture(scope="module")
def room_a(two_room):
    return room_a_field(two_room)


# -- candidates and feasibility ------------------------------------------------


def test_collision_density_matches_alpha():
    vs = 0.0625
    sigma = planner.collision_density(vs, 0.1)
    assert 1.0 - np.exp(-sigma * vs) == pytest.approx(0.1, abs=1e-12)


def test_empty_field_all_candidates_feasible(rng):
    f = VoxelField.for_box(np.array([[0, 0, 0], [1, 1, 1.0]]), 8, density_init=-30.0)
    sampler = planner.pose_sampler(f.bounds, None, 0.5, np.deg2rad(30))
    current = look_at(np.array([0.5, 0.5, 2.0]), np.array([0.5, 0.5, 0.5]))
    cands = planner.sample_candidates(f, sampler, current, 32, rng, planner.collision_density(f.voxel_size), True)
    assert len(cands) == 32 and cands.n_rejected == 0 and cands.feasible.all()
    assert np.all(np.isfinite(cands.entropies))


def test_candidate_inside_block_is_rejected(two_room):
    f = gt_field(two_room)
    thr = planner.collision_density(f.voxel_size)
    inside_wall = facing_x([1.0, 0.9, 0.9])
    free = facing_x(room_center(two_room, "room_a"))
    assert not planner.is_feasible(f, inside_wall, None, thr, False)
    assert planner.is_feasible(f, free, None, thr, False)


def test_path_through_wall_is_rejected(two_room):
    f = gt_field(two_room)
    thr = planner.collision_density(f.voxel_size)
    a = facing_x([0.5, 0.8, 0.5])
    b = facing_x([1.5, 0.8, 0.5])  # same height, far from the doorway
    assert planner.is_feasible(f, b, None, thr, False)
    assert not planner.is_feasible(f, b, a, thr, True)
    assert planner.is_feasible(f, b, a, thr, False)


def test_room_b_reachable_from_room_a(two_room):
    f = gt_field(two_room)
    thr = planner.collision_density(f.voxel_size)
    sampler = planner.pose_sampler(two_room.bounds, two_room.regions, 0.5, np.deg2rad(30))
    current = facing_x(room_center(two_room, "room_a"))
    counts = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        n = 0
        for _ in range(512):
            pose = sampler(rng)
            if pose.translation[0] > 1.0 and planner.is_feasible(f, pose, current, thr, True):
                n += 1
        counts.append(n)
    assert np.mean(counts) >= 1.0


def test_zero_feasible_raises(two_room):
    f = gt_field(two_room)
    thr = planner.collision_density(f.voxel_size)
    wall = facing_x([1.0, 0.9, 0.9])
    with pytest.raises(PlanningError):
        planner.sample_candidates(f, lambda rng: wall, None, 4, np.random.default_rng(0), thr, False)
    with pytest.raises(ValueError):
        planner.sample_candidates(f, lambda rng: wall, None, 0, np.random.default_rng(0), thr, False)


def test_shortfall_is_counted(two_room):
    f = gt_field(two_room)
    thr = planner.collision_density(f.voxel_size)
    good, bad = facing_x(room_center(two_room, "room_a")), facing_x([1.0, 0.9, 0.9])
    seq = iter([good] + [bad] * 1000)
    cands = planner.sample_candidates(f, lambda rng: next(seq), None, 4, np.random.default_rng(0), thr, False)
    assert len(cands) == 1 and cands.shortfall == 3 and cands.n_rejected == 79


# -- selection ------------------------------------------------------------------


def test_single_candidate_is_selected(room_a, two_room):
    f, _ = room_a
    pose = facing_x(room_center(two_room, "room_a"))
    cands = planner.CandidateSet([pose], np.zeros(1), np.ones(1, bool))
    idx, table = planner.select_nbv(f, cands, context(f))
    assert idx == 0 and np.isfinite(table[0])


def test_empty_selection_raises(room_a):
    f, _ = room_a
    with pytest.raises(PlanningError):
        planner.select_nbv(f, planner.CandidateSet([], np.zeros(0), np.zeros(0, bool)), context(f))
    with pytest.raises(PlanningError):
        planner.select_random(planner.CandidateSet([], np.zeros(0), np.zeros(0, bool)), np.random.default_rng(0))


def test_duplicate_of_best_keeps_index(room_a, two_room):
    f, _ = room_a
    rng = np.random.default_rng(5)
    sampler = planner.pose_sampler(two_room.bounds, two_room.regions, 0.5, np.deg2rad(30))
    poses = [sampler(rng) for _ in range(5)]
    cands = planner.CandidateSet(list(poses), np.zeros(5), np.ones(5, bool))
    ctx = context(f)
    idx, table = planner.select_nbv(f, cands, ctx)
    cands.append(poses[idx])
    idx2, table2 = planner.select_nbv(f, cands, ctx)
    assert idx2 == idx and table2[-1] == table2[idx]


def test_infeasible_candidates_never_selected(room_a, two_room):
    f, _ = room_a
    rng = np.random.default_rng(6)
    sampler = planner.pose_sampler(two_room.bounds, two_room.regions, 0.5, np.deg2rad(30))
    poses = [sampler(rng) for _ in range(4)]
    ctx = context(f)
    _, table = planner.select_nbv(f, planner.CandidateSet(poses, np.zeros(4), np.ones(4, bool)), ctx)
    best = int(np.argmax(table))
    feasible = np.ones(4, bool)
    feasible[best] = False
    idx, _ = planner.select_nbv(f, planner.CandidateSet(poses, np.zeros(4), feasible), ctx)
    assert idx != best
    assert planner.select_random(planner.CandidateSet(poses, np.zeros(4), feasible), rng) != best


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.integers(-20, 20))
def test_argmax_invariant_to_positive_scaling(values, k):
    # Powers of two scale exactly, so no new ties appear from rounding.
    v = np.array(values)
    assert planner.argmax_first(v * 2.0**k) == planner.argmax_first(v)


def test_argmax_ties_pick_lowest_index():
    assert planner.argmax_first([1.0, 3.0, 2.0, 3.0]) == 1


def test_nvf_prefers_view_into_room_b(room_a, two_room):
    f, _ = room_a
    rng = np.random.default_rng(11)
    sampler = planner.pose_sampler(two_room.bounds, two_room.regions, 0.5, np.deg2rad(30))
    cands = planner.CandidateSet([sampler(rng) for _ in range(24)], np.zeros(24), np.ones(24, bool))
    ctx = context(f)
    idx, _ = planner.select_nbv(f, cands, ctx)
    pose = cands.poses[idx]
    # March the chosen frustum against the true geometry and look for samples past the shared wall.
    rays = clip_rays_to_box(camera_rays(pose, ctx.intr), two_room.bounds).flatten()
    t = sample_depths(rays.near, rays.far, 128)
    pts = rays.at(t)
    w = alpha_weights(two_room.density(pts.reshape(-1, 3)).reshape(t.shape), spacings(t, rays.near, rays.far))
    trans = np.cumprod(np.concatenate([np.ones((len(t), 1)), 1.0 - w.alpha[:, :-1]], axis=1), axis=1)
    in_b = (pts[..., 0] > 1.0 + two_room.grid.voxel_size) & (trans > 0.5)
    assert in_b.any()


# -- refinement -------------------------------------------------------------------


def test_refine_zero_steps_is_identity(room_a, two_room):
    f, _ = room_a
    pose = facing_x(room_center(two_room, "room_a"))
    res = planner.refine_pose(f, pose, context(f), 0, 0.01, 64, np.random.default_rng(0))
    assert res.pose is pose and res.trace == [res.entropy] and res.accepted == 0


def test_refine_from_infeasible_start_raises(room_a):
    f, _ = room_a
    with pytest.raises(PlanningError):
        planner.refine_pose(f, facing_x([1.0, 0.9, 0.9]), context(f), 3, 0.01, 64, np.random.default_rng(0),
                            feasible=lambda p: False)


def test_refine_trace_non_decreasing_and_feasible(room_a, two_room):
    f, _ = room_a
    thr = planner.collision_density(f.voxel_size)
    start = facing_x(room_center(two_room, "room_a"))

    def feasible(p):
        return planner.is_feasible(f, p, start, thr, True)

    res = planner.refine_pose(f, start, context(f), 4, 0.02, 64, np.random.default_rng(1), feasible)
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    assert len(res.trace) == res.accepted + 1
    assert res.entropy >= res.trace[0]
    assert feasible(res.pose)


def test_refine_topk_properties(room_a, two_room):
    f, _ = room_a
    ctx = context(f)
    rng = np.random.default_rng(2)
    sampler = planner.pose_sampler(two_room.bounds, two_room.regions, 0.5, np.deg2rad(30))
    cands = planner.CandidateSet([sampler(rng) for _ in range(3)], np.zeros(3), np.ones(3, bool))
    idx0, table = planner.select_nbv(f, cands, ctx)
    # k = 1 is refine_pose of the argmax with the same generator state.
    i1, r1 = planner.refine_topk(f, cands, table, 1, ctx, 2, 0.02, 32, np.random.default_rng(9))
    direct = planner.refine_pose(f, cands.poses[idx0], ctx, 2, 0.02, 32, np.random.default_rng(9))
    assert i1 == idx0 and r1.entropy == direct.entropy
    np.testing.assert_array_equal(r1.pose.flat(), direct.pose.flat())
    # k larger than the set refines every candidate; the winner beats the unrefined winner.
    iall, rall = planner.refine_topk(f, cands, table, 10, ctx, 2, 0.02, 32, np.random.default_rng(9))
    assert 0 <= iall < 3
    assert rall.entropy >= table[idx0]


# -- mapping loop ---------------------------------------------------------------------


def tiny_config(**planner_over):
    p = {"horizon": 2, "n_candidates": 4, "image_width": 8, "image_height": 8, "samples_per_ray": 16,
         "initial_views": 3}
    p.update(planner_over)
    return RunConfig().replace(
        camera={"width": 12, "height": 12, "gt_samples": 32},
        field={"backbone_iterations": 15, "variance_iterations": 5, "visibility_iterations": 5, "batch_rays": 128,
               "samples_per_ray": 16, "visibility_pool": 512, "visibility_batch": 256, "visibility_samples": 16},
        planner=p,
        eval={"n_test_poses": 2, "image_width": 12, "image_height": 12},
    )


def test_horizon_zero_returns_initial_views():
    cfg = tiny_config(horizon=0)
    run = planner.run_active_mapping(cfg)
    assert run.steps == [] and len(run.training) == cfg.planner.initial_views
    assert len(run.metrics) == 1 and len(run.coverage_trace) == 1


def test_horizon_two_is_deterministic_and_grows_by_one():
    cfg = tiny_config()
    a = planner.run_active_mapping(cfg)
    b = planner.run_active_mapping(cfg)
    assert len(a.steps) == 2 and len(a.training) == cfg.planner.initial_views + 2
    for sa, sb in zip(a.steps, b.steps):
        np.testing.assert_array_equal(sa.pose.flat(), sb.pose.flat())
        np.testing.assert_array_equal(sa.candidates.entropies, sb.candidates.entropies)
    assert [m.row() for m in a.metrics] == [m.row() for m in b.metrics]
    assert [m.n_views for m in a.metrics] == [3, 4, 5]
    assert all(np.diff(a.coverage_trace) >= 0)
    assert set(a.timings) >= {"train_backbone", "plan", "observe", "evaluate"}


def test_selected_poses_are_feasible_at_selection_time():
    cfg = tiny_config()
    run = planner.run_active_mapping(cfg)
    for rec in run.steps:
        assert rec.candidates.feasible[rec.selected]
        assert rec.pose is rec.candidates.poses[rec.selected]


def test_random_method_runs_and_refinement_is_recorded():
    run = planner.run_active_mapping(tiny_config(method="random", horizon=1))
    assert len(run.steps) == 1 and run.steps[0].entropy_image is None
    run = planner.run_active_mapping(tiny_config(refine=True, refine_k=1, refine_steps=1, pixel_subset=16, horizon=1))
    assert run.steps[0].refined


def test_unknown_method_is_a_config_error():
    from nvf.errors import ConfigError

    with pytest.raises(ConfigError):
        planner.check_planner_method("greedy")
