"""Next-best-view selection and the active mapping loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

from . import uncertainty as unc
from .config import RunConfig
from .errors import EvaluationError, PlanningError
from .evaluation import MetricsRecord, geometry_metrics, image_metrics, observed_elements, reconstruct_points
from .field import TrainingSet, VoxelField, new_field, train_backbone, train_variance_head, train_visibility_head
from .geometry import CameraIntrinsics, Pose, perturb_pose, sample_pose_interior, sample_pose_shell
from .render import render_image
from .scene import GroundTruthScene, build_scene, extract_surface

log = logging.getLogger(__name__)

RANDOM = "random"
PLANNER_METHODS = unc.METHODS + (RANDOM,)
# Heads trained for each planning method; the rest stay at initialisation.
TRAINED_HEADS = {
    "nvf": ("variance", "visibility"),
    "nvf-loose": ("variance", "visibility"),
    "no-vis": ("variance",),
    "no-var": ("visibility",),
    "activenerf": ("variance",),
    "wd": (),
    "activermap": (),
    "air": (),
    RANDOM: (),
}

_STREAMS = {"scene": 1, "initial": 2, "training": 3, "planner": 4, "eval": 5, "refine": 6}


def substream(seed: int, name: str, step: int = 0) -> np.random.Generator:
    """Independent generator for a named component of a run."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _STREAMS[name], int(step)])


def check_planner_method(method: str) -> None:
    if method not in PLANNER_METHODS:
        from .errors import ConfigError

        raise ConfigError(f"unknown method {method!r}; valid tags: {', '.join(PLANNER_METHODS)}")


# ---------------------------------------------------------------------------
# Candidates and feasibility


def collision_density(voxel_size: float, alpha: float = 0.1) -> float:
    """Density whose opacity over one voxel equals ``alpha``."""
    return float(-np.log1p(-alpha) / voxel_size)


def segment_max_density(field, a, b, spacing: float, skip_start: float = 0.0) -> float:
    """Largest density on the segment a-b, ignoring points within ``skip_start`` of a."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    length = np.linalg.norm(b - a)
    n = max(2, int(np.ceil(length / spacing)) + 1)
    frac = np.linspace(0.0, 1.0, n)
    frac = frac[frac * length >= skip_start]
    if len(frac) == 0:
        return 0.0
    pts = a + frac[:, None] * (b - a)
    return float(np.max(field.density(pts)))


FREE_RADIUS_VOXELS = 2.0


def is_feasible(field, pose: Pose, current: Optional[Pose], threshold: float, path_check: bool = True) -> bool:
    """Pose lies in free space and, optionally, is reachable in a straight line.

    The camera's own surroundings are known to be free, so the path check
    ignores a small ball around the current position.
    """
    if field.density(pose.translation[None])[0] >= threshold:
        return False
    if path_check and current is not None:
        vs = field.voxel_size
        peak = segment_max_density(field, current.translation, pose.translation, 0.5 * vs, FREE_RADIUS_VOXELS * vs)
        return peak < threshold
    return True


@dataclass
class CandidateSet:
    poses: list
    entropies: np.ndarray
    feasible: np.ndarray
    seed: int = 0
    n_rejected: int = 0
    shortfall: int = 0

    def __len__(self):
        return len(self.poses)

    def append(self, pose: Pose, entropy: float = 0.0, feasible: bool = True) -> None:
        self.poses.append(pose)
        self.entropies = np.append(self.entropies, entropy)
        self.feasible = np.append(self.feasible, feasible)


def pose_sampler(scene_bounds, regions: Optional[dict], look_at_jitter: float, max_pitch: float):
    """Candidate pose prior: inside the named regions when given, else around the box."""
    if regions:
        boxes = [np.asarray(r, dtype=np.float64) for r in regions.values()]
        vols = np.array([np.prod(b[1] - b[0]) for b in boxes])
        probs = vols / vols.sum()

        def draw(rng):
            b = boxes[rng.choice(len(boxes), p=probs)]
            return sample_pose_interior(b, rng, max_pitch)

        return draw
    return lambda rng: sample_pose_shell(scene_bounds, rng, look_at_jitter)


def sample_candidates(field, sampler: Callable, current: Optional[Pose], n: int, rng: np.random.Generator,
                      threshold: float, path_check: bool = True, seed: int = 0) -> CandidateSet:
    """Draw until ``n`` feasible poses are found or 20 n attempts are spent."""
    if n < 1:
        raise ValueError("need at least one candidate")
    poses, rejected = [], 0
    for _ in range(20 * n):
        pose = sampler(rng)
        if is_feasible(field, pose, current, threshold, path_check):
            poses.append(pose)
            if len(poses) == n:
                break
        else:
            rejected += 1
    if not poses:
        raise PlanningError(f"no feasible candidate in {20 * n} draws")
    if len(poses) < n:
        log.warning("only %d of %d candidates feasible", len(poses), n)
    return CandidateSet(poses, np.zeros(len(poses)), np.ones(len(poses), dtype=bool), seed, rejected, n - len(poses))


@dataclass
class EntropyContext:
    """Everything needed to score a view besides the field and the pose."""

    method: str
    priors: unc.UncertaintyPriors
    corr: unc.CorrelationConfig
    intr: CameraIntrinsics
    n_samples: int
    correlated: bool = True
    no_var_variance: float = 1e-4

    def score(self, field, pose: Pose, pixels=None) -> unc.ImageEntropy:
        return unc.image_entropy(field, pose, self.intr, self.method, self.priors, self.corr, self.n_samples,
                                 self.correlated, self.no_var_variance, pixels)


def select_nbv(field, candidates: CandidateSet, ctx: EntropyContext):
    """Index of the feasible candidate with the largest image entropy, and the table."""
    if len(candidates) == 0 or not np.any(candidates.feasible):
        raise PlanningError("no feasible candidates to select from")
    table = np.full(len(candidates), -np.inf)
    for i, pose in enumerate(candidates.poses):
        if candidates.feasible[i]:
            table[i] = ctx.score(field, pose).total
    candidates.entropies = np.where(candidates.feasible, table, 0.0)
    return argmax_first(table), table


def argmax_first(values) -> int:
    """Index of the maximum, the lowest index among ties."""
    return int(np.argmax(np.asarray(values)))


def select_random(candidates: CandidateSet, rng: np.random.Generator) -> int:
    idx = np.flatnonzero(candidates.feasible)
    if len(idx) == 0:
        raise PlanningError("no feasible candidates to select from")
    return int(rng.choice(idx))


# ---------------------------------------------------------------------------
# Gradient-based refinement


@dataclass
class RefineResult:
    pose: Pose
    entropy: float  # full-image entropy of the returned pose
    trace: list  # full-image entropy after each accepted step, starting value first
    accepted: int = 0


def _pose_at(start: Pose, x: np.ndarray, scale: float) -> Pose:
    delta = np.concatenate([x[:3], scale * x[3:]])
    return perturb_pose(start, delta)


def refine_pose(field, pose: Pose, ctx: EntropyContext, steps: int, lr: float, pixel_subset: int,
                rng: np.random.Generator, feasible: Optional[Callable] = None, fd_step: float = 1e-3,
                beta1: float = 0.9, beta2: float = 0.999) -> RefineResult:
    """Adam ascent on the pose with central finite-difference gradients.

    Gradients come from a fixed random pixel subset; a step is kept only if
    the full-image entropy does not decrease and the new pose is feasible.
    Rejected steps halve the learning rate. The translation part of the
    6-vector is scaled by the scene diameter.
    """
    if feasible is not None and not feasible(pose):
        raise PlanningError("refinement started from an infeasible pose")
    best = ctx.score(field, pose).total
    trace = [best]
    if steps <= 0:
        return RefineResult(pose, best, trace)
    h, w = ctx.intr.height, ctx.intr.width
    k = min(pixel_subset, h * w)
    flat = rng.choice(h * w, size=k, replace=False)
    pixels = (flat // w, flat % w)
    scale = ctx.corr.diameter
    x = np.zeros(6)
    m = np.zeros(6)
    v = np.zeros(6)
    accepted = 0
    current = pose
    for t in range(1, steps + 1):
        grad = np.empty(6)
        for i in range(6):
            e = np.zeros(6)
            e[i] = fd_step
            hi = ctx.score(field, _pose_at(pose, x + e, scale), pixels).total
            lo = ctx.score(field, _pose_at(pose, x - e, scale), pixels).total
            grad[i] = (hi - lo) / (2.0 * fd_step)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        step = lr * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + 1e-8)
        trial = _pose_at(pose, x + step, scale)
        ok = feasible is None or feasible(trial)
        value = ctx.score(field, trial).total if ok else -np.inf
        if ok and value >= best:
            x = x + step
            best = value
            current = trial
            trace.append(value)
            accepted += 1
        else:
            lr *= 0.5
    return RefineResult(current, best, trace, accepted)


def refine_topk(field, candidates: CandidateSet, table, k: int, ctx: EntropyContext, steps: int, lr: float,
                pixel_subset: int, rng: np.random.Generator, feasible: Optional[Callable] = None):
    """Refine the k best candidates; return the index and result of the best refined pose."""
    table = np.asarray(table, dtype=np.float64)
    order = np.argsort(-table, kind="stable")
    order = [i for i in order if candidates.feasible[i]][: max(1, k)]
    results = [refine_pose(field, candidates.poses[i], ctx, steps, lr, pixel_subset, rng, feasible) for i in order]
    best = argmax_first([r.entropy for r in results])
    return order[best], results[best]


# ---------------------------------------------------------------------------
# Active mapping


@dataclass
class StepRecord:
    step: int
    candidates: CandidateSet
    selected: int
    pose: Pose
    entropy_image: Optional[np.ndarray] = None
    observation: Optional[np.ndarray] = None
    refined: bool = False


@dataclass
class MappingRun:
    seed: int
    config_hash: str
    scene: GroundTruthScene
    training: TrainingSet
    initial_count: int
    steps: list = dc_field(default_factory=list)
    metrics: list = dc_field(default_factory=list)
    timings: dict = dc_field(default_factory=dict)
    field: Optional[VoxelField] = None
    failure_step: Optional[int] = None
    failure: Optional[str] = None
    coverage_trace: list = dc_field(default_factory=list)

    @property
    def selected_poses(self) -> list:
        return [s.pose for s in self.steps]

    @property
    def final_coverage(self) -> float:
        return self.coverage_trace[-1] if self.coverage_trace else 0.0


class _Timer:
    def __init__(self, store: dict):
        self.store = store

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.store[name] = timer.store.get(name, 0.0) + time.perf_counter() - self.t

        return _Ctx()


def scene_from_config(cfg: RunConfig) -> GroundTruthScene:
    s = cfg.scene
    seed = s.seed if s.seed >= 0 else int(substream(cfg.run.seed, "scene").integers(0, 2**31))
    return build_scene(s.generator, s.resolution, seed, s.n_blocks, s.occupied_density, s.door_width,
                       s.door_height, s.background)


def observation_intrinsics(cfg: RunConfig) -> CameraIntrinsics:
    return CameraIntrinsics(cfg.camera.width, cfg.camera.height, np.deg2rad(cfg.camera.fov_deg))


def planning_intrinsics(cfg: RunConfig) -> CameraIntrinsics:
    return CameraIntrinsics(cfg.planner.image_width, cfg.planner.image_height, np.deg2rad(cfg.camera.fov_deg))


def eval_intrinsics(cfg: RunConfig) -> CameraIntrinsics:
    return CameraIntrinsics(cfg.eval.image_width, cfg.eval.image_height, np.deg2rad(cfg.camera.fov_deg))


def initial_poses(scene: GroundTruthScene, cfg: RunConfig) -> list:
    """Starting views: inside the first region for interior scenes, around the box otherwise."""
    rng = substream(cfg.run.seed, "initial")
    if scene.regions:
        first = next(iter(scene.regions.values()))
        return [sample_pose_interior(first, rng, np.deg2rad(cfg.planner.max_pitch_deg))
                for _ in range(cfg.planner.initial_views)]
    return [sample_pose_shell(scene.bounds, rng, cfg.planner.look_at_jitter) for _ in range(cfg.planner.initial_views)]


def test_poses(scene: GroundTruthScene, cfg: RunConfig) -> list:
    """Fixed evaluation viewpoints drawn from the eval substream."""
    rng = substream(cfg.run.seed, "eval")
    sampler = pose_sampler(scene.bounds, scene.regions, cfg.planner.look_at_jitter, np.deg2rad(cfg.planner.max_pitch_deg))
    return [sampler(rng) for _ in range(cfg.eval.n_test_poses)]


def observe(scene: GroundTruthScene, pose: Pose, intr: CameraIntrinsics, n_samples: int) -> np.ndarray:
    rgb, _, _ = render_image(scene, pose, intr, n_samples)
    return np.clip(rgb, 0.0, 1.0)


def make_priors(cfg: RunConfig, field: VoxelField) -> unc.UncertaintyPriors:
    lo, hi = field.bounds
    mean_spacing = float(np.linalg.norm(hi - lo)) / cfg.planner.samples_per_ray
    return unc.UncertaintyPriors.from_config(cfg.priors, mean_spacing)


def train_field(training: TrainingSet, scene: GroundTruthScene, cfg: RunConfig, method: str, seed: int,
                step: int, timer=None) -> VoxelField:
    """Fit a fresh field to the collected views and the heads ``method`` needs."""
    timer = timer or _Timer({})
    rng = substream(seed, "training", step)
    field = new_field(scene.bounds, cfg.field, scene.background)
    with timer("train_backbone"):
        train_backbone(field, training, cfg.field, rng)
    heads = TRAINED_HEADS[method]
    if "variance" in heads:
        with timer("train_variance"):
            train_variance_head(field, training, cfg.field, rng)
    if "visibility" in heads:
        with timer("train_visibility"):
            train_visibility_head(field, training.poses, training.intr, cfg.field, rng)
    return field


def cr_threshold(scene: GroundTruthScene, cfg: RunConfig) -> float:
    ratio = cfg.eval.cr_ratio if cfg.eval.cr_ratio > 0 else (0.1 if scene.interior else 0.01)
    return ratio * scene.diameter


def evaluate_step(field, scene, training: TrainingSet, tests, cfg: RunConfig, gt_points, step: int,
                  coverage: float) -> MetricsRecord:
    e_intr = eval_intrinsics(cfg)
    p, s, m = image_metrics(field, scene, tests, e_intr, cfg.field.samples_per_ray, cfg.camera.gt_samples)
    recon = reconstruct_points(field, training.poses, training.intr, cfg.field.samples_per_ray,
                               cfg.eval.recon_min_weight)
    thr = cr_threshold(scene, cfg)
    if len(recon) == 0:
        raise EvaluationError("reconstruction produced no points")
    acc, comp, cr = geometry_metrics(recon, gt_points, thr)
    return MetricsRecord(step, len(training), p, s, m, acc, comp, cr, thr, coverage)


def run_active_mapping(cfg: RunConfig, progress: Optional[Callable] = None) -> MappingRun:
    """Greedy next-best-view loop.

    Each step retrains a field from scratch on all views so far, scores
    candidates with the configured method, observes the winner and appends
    it. Metrics are computed after every step or only at the end.
    """
    method = cfg.planner.method
    check_planner_method(method)
    seed = cfg.run.seed
    timings: dict = {}
    timer = _Timer(timings)
    with timer("setup"):
        scene = scene_from_config(cfg)
        o_intr = observation_intrinsics(cfg)
        p_intr = planning_intrinsics(cfg)
        poses = initial_poses(scene, cfg)
        images = [observe(scene, p, o_intr, cfg.camera.gt_samples) for p in poses]
        training = TrainingSet(poses, images, o_intr)
        elements = extract_surface(scene, cfg.eval.surface_density)
        seen = np.zeros(len(elements), dtype=bool)
        for p in poses:
            seen |= observed_elements(scene, elements, p, o_intr, cfg.eval.coverage_transmittance)
        tests = test_poses(scene, cfg)
    run = MappingRun(seed, cfg.hash(), scene, training, len(poses), timings=timings)
    run.coverage_trace.append(float(seen.mean()) if len(elements) else 0.0)
    sampler = pose_sampler(scene.bounds, scene.regions, cfg.planner.look_at_jitter,
                           np.deg2rad(cfg.planner.max_pitch_deg))
    horizon = cfg.planner.horizon
    step = 0
    try:
        for step in range(horizon + 1):
            field = train_field(training, scene, cfg, method, seed, step, timer)
            run.field = field
            if cfg.eval.every_step or step == horizon:
                with timer("evaluate"):
                    run.metrics.append(evaluate_step(field, scene, training, tests, cfg, elements.positions, step,
                                                     run.coverage_trace[-1]))
            if step == horizon:
                break
            with timer("plan"):
                record = plan_step(field, training, scene, cfg, method, sampler, p_intr, seed, step)
            with timer("observe"):
                obs = observe(scene, record.pose, o_intr, cfg.camera.gt_samples)
                record.observation = obs
                training.poses.append(record.pose)
                training.images.append(obs)
                seen |= observed_elements(scene, elements, record.pose, o_intr, cfg.eval.coverage_transmittance)
                run.coverage_trace.append(float(seen.mean()))
            run.steps.append(record)
            if progress is not None:
                progress(run)
    except (PlanningError, EvaluationError) as exc:
        run.failure_step = step
        run.failure = str(exc)
        raise
    return run


def plan_step(field, training: TrainingSet, scene, cfg: RunConfig, method: str, sampler, p_intr, seed: int,
              step: int) -> StepRecord:
    pc = cfg.planner
    rng = substream(seed, "planner", step)
    current = training.poses[-1]
    threshold = collision_density(field.voxel_size, pc.collision_alpha)
    cands = sample_candidates(field, sampler, current, pc.n_candidates, rng, threshold, pc.path_check, step)
    if method == RANDOM:
        idx = select_random(cands, rng)
        return StepRecord(step, cands, idx, cands.poses[idx])
    ctx = EntropyContext(method, make_priors(cfg, field),
                         unc.CorrelationConfig(cfg.correlation.k, scene.diameter, p_intr.delta_phi),
                         p_intr, pc.samples_per_ray, cfg.correlation.correlated, pc.no_var_variance)
    idx, table = select_nbv(field, cands, ctx)
    pose = cands.poses[idx]
    refined = False
    if pc.refine:

        def feasible(p):
            return is_feasible(field, p, current, threshold, pc.path_check)

        idx, result = refine_topk(field, cands, table, pc.refine_k, ctx, pc.refine_steps, pc.refine_lr,
                                  pc.pixel_subset, substream(seed, "refine", step), feasible)
        pose = result.pose
        refined = True
    image = ctx.score(field, pose).pixels
    return StepRecord(step, cands, idx, pose, image, refined=refined)
