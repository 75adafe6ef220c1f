"""Incremental calibration of a rotating camera from verified matches.

The reconstruction grows from a seed pair: the best-connected frame plus its
strongest neighbor are initialized from the focal heuristic (1.2 x the larger
image side) and the homography-derived relative rotation, their shared tracks
become ray landmarks, and a bundle adjustment polishes the pair. The main
loop then registers the unregistered view with the most verified matches into
the registered set, triangulates newly-covered tracks by averaging per-view
rays, and runs a global bundle adjustment whenever the registered count has
grown by ``ba_growth_factor`` since the last one (and once more at the end).
Views that fail registration are retried on later sweeps and dropped for good
after ``max_register_attempts`` failures. If a seed pair cannot be
initialized at all, the next-best seed frame is tried.

The local frame is pinned by holding the first registered view's rotation
fixed through every bundle adjustment (the objective is invariant to a global
rotation); the shared projection center stays at the origin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .correspondence import MatchGraph, MatchSet, Track, build_tracks, filter_tracks
from .geometry import (
    Intrinsics,
    K_RADIAL_MAX,
    P_TANGENTIAL_MAX,
    Pose,
    ViewParams,
    normalize_rays,
    pixel_to_ray,
    project_rays,
    project_rays_with_jacobians,
    rotation_from_homography,
)
from .rotation import quat_multiply, quat_normalize
from .solver import (
    EUCLIDEAN,
    FIXED,
    ROTATION_TANGENT,
    ParameterBlock,
    Problem,
    SolveReport,
    SolverOptions,
    huber,
    solve,
)

logger = logging.getLogger(__name__)

FOCAL_BOUNDS = (1.0, 1e6)
DIST_LOWER = np.array([-K_RADIAL_MAX, -K_RADIAL_MAX, -P_TANGENTIAL_MAX, -P_TANGENTIAL_MAX])
DIST_UPPER = -DIST_LOWER


class ReconstructionError(RuntimeError):
    pass


class RegistrationError(ReconstructionError):
    pass


class TriangulationError(ReconstructionError):
    pass


@dataclass(frozen=True)
class ReconstructionConfig:
    ba_growth_factor: float = 1.3
    max_register_attempts: int = 3
    min_inlier_landmarks: int = 12
    focal_init_multiplier: float = 1.2
    huber_delta_px: float = 4.0
    min_track_len: int = 2            # tracks entering the pipeline
    retain_track_len: int = 2         # landmark retention at the final stage
    triangulation_max_angle_deg: float = 2.0
    closure_triangulation_angle_deg: float = 20.0  # loose gate for seam bridges
    landmark_prune_factor: float = 3.0     # x huber delta, final stage
    growth_prune_factor: float = 25.0      # loose mid-run limit; keeps closure tracks
    rescue_ba_budget: int = 3              # stall-recovery bundle adjustments per seed
    closure_anneal: tuple[float, ...] = (64.0, 16.0, 4.0, 2.0)  # wide passes before settling
    share_distortion: bool = False
    ba_max_iterations: int = 100
    register_max_iterations: int = 40

    def validate(self) -> None:
        if self.ba_growth_factor <= 1.0:
            raise ValueError("ba_growth_factor must exceed 1")
        if self.max_register_attempts < 1:
            raise ValueError("max_register_attempts must be >= 1")


@dataclass
class Reconstruction:
    """Registered views, ray landmarks and their observation bindings."""

    views: dict[str, ViewParams] = field(default_factory=dict)
    landmarks: dict[int, np.ndarray] = field(default_factory=dict)
    tracks: dict[int, Track] = field(default_factory=dict)
    registered: list[str] = field(default_factory=list)
    failed_attempts: dict[str, int] = field(default_factory=dict)
    discarded: set[str] = field(default_factory=set)
    log: list[dict] = field(default_factory=list)
    shared_distortion: np.ndarray | None = None

    def landmark_observations(self, view_id: str) -> list[tuple[int, np.ndarray]]:
        """(track_id, pixel) pairs binding this view to existing landmarks."""
        out = []
        for tid in sorted(self.landmarks):
            pix = self.tracks[tid].observations.get(view_id)
            if pix is not None:
                out.append((tid, pix))
        return out

    def observations_map(self) -> dict[int, dict[str, np.ndarray]]:
        """track_id -> {view_id -> pixel} over registered views, landmarks only."""
        reg = set(self.registered)
        return {
            tid: {v: p for v, p in self.tracks[tid].observations.items() if v in reg}
            for tid in sorted(self.landmarks)
        }

    def validate(self, min_track_len: int = 2) -> None:
        reg = set(self.registered)
        if len(reg) != len(self.registered):
            raise ReconstructionError("duplicate registrations")
        for vid in self.registered:
            view = self.views[vid]
            view.validate()
            if np.any(view.pose.center != 0.0):
                raise ReconstructionError(f"view {vid} center off the shared origin")
        used: dict[str, int] = {vid: 0 for vid in reg}
        for tid, direction in self.landmarks.items():
            if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
                raise ReconstructionError(f"landmark {tid} not unit norm")
            observers = [v for v in self.tracks[tid].observations if v in reg]
            if len(observers) < min_track_len:
                raise ReconstructionError(f"landmark {tid} has {len(observers)} registered observers")
            for v in observers:
                used[v] += 1
        for vid, count in used.items():
            if count == 0:
                raise ReconstructionError(f"registered view {vid} observes no landmark")


# ---------------------------------------------------------------------------
# Frame selection
# ---------------------------------------------------------------------------


def select_initial_frame(graph: MatchGraph, exclude: set[str] | None = None) -> str:
    """Non-excluded view with the largest total verified-match weight."""
    exclude = exclude or set()
    totals: dict[str, int] = {vid: 0 for vid in graph.views if vid not in exclude}
    if not totals:
        raise ReconstructionError("all views excluded")
    for (a, b), w in graph.edge_weights().items():
        if a in totals:
            totals[a] += w
        if b in totals:
            totals[b] += w
    best = max(totals.items(), key=lambda kv: (kv[1], ))
    # ties break toward the smallest id
    top = best[1]
    if top == 0:
        raise ReconstructionError("no verified edges among candidate seed frames")
    return min(vid for vid, w in totals.items() if w == top)


def next_best_view(recon: Reconstruction, graph: MatchGraph,
                   config: ReconstructionConfig,
                   exclude: set[str] | None = None) -> str | None:
    """Unregistered view with the most verified matches into the registered set."""
    exclude = exclude or set()
    reg = set(recon.registered)
    scores: dict[str, int] = {}
    for (a, b), w in graph.edge_weights().items():
        for cand, other in ((a, b), (b, a)):
            if cand in reg or cand in exclude or cand in recon.discarded:
                continue
            if recon.failed_attempts.get(cand, 0) >= config.max_register_attempts:
                continue
            if other in reg:
                scores[cand] = scores.get(cand, 0) + w
    if not scores:
        return None
    top = max(scores.values())
    return min(vid for vid, w in scores.items() if w == top)


# ---------------------------------------------------------------------------
# Residual groups
# ---------------------------------------------------------------------------


def make_ray_group(problem: Problem, qblock, fblock, dblock, cx, cy,
                   observed: np.ndarray, loss,
                   ray_blocks=None, fixed_rays: np.ndarray | None = None):
    """Reprojection group for one view over many rays.

    Rays come either as solver blocks (bundle adjustment) or as a fixed array
    (registration / relocalization). Rays behind the camera get a large
    constant residual with zero Jacobian so they cannot attract the solve.
    """
    n = len(observed)
    behind_penalty = 1e4

    def fn(shared, chunk, want_jac):
        q, fv, dv = shared
        rays = chunk if chunk is not None else fixed_rays
        pix, front, jac = project_rays_with_jacobians(
            q, fv[0], dv, cx, cy, rays, want_jac=want_jac)
        res = pix - observed
        res[~front] = behind_penalty
        if not want_jac:
            return res, None, None
        for key in ("q", "f", "dist", "ray"):
            jac[key][~front] = 0.0
        js = [jac["q"], jac["f"][:, :, None], jac["dist"]]
        jc = jac["ray"] if chunk is not None else None
        return res, js, jc

    return problem.add_group(fn, [qblock, fblock, dblock], ray_blocks,
                             n_chunks=n, chunk_dim=2, loss=loss)


def _view_blocks(view: ViewParams, fix_rotation=False, fix_focal=False, fix_distortion=False):
    intr = view.intrinsics
    qb = ParameterBlock(view.pose.q, kind=FIXED if fix_rotation else ROTATION_TANGENT, name="q")
    fb = ParameterBlock([intr.f], kind=FIXED if fix_focal else EUCLIDEAN,
                        lower=[FOCAL_BOUNDS[0]], upper=[FOCAL_BOUNDS[1]], name="f")
    db = ParameterBlock(intr.distortion, kind=FIXED if fix_distortion else EUCLIDEAN,
                        lower=DIST_LOWER, upper=DIST_UPPER, name="dist")
    return qb, fb, db


def _view_from_blocks(intr: Intrinsics, qb, fb, db) -> ViewParams:
    return ViewParams(
        intrinsics=intr.replace(f=float(fb.values[0]), k1=float(db.values[0]),
                                k2=float(db.values[1]), p1=float(db.values[2]),
                                p2=float(db.values[3])),
        pose=Pose(q=quat_normalize(qb.values)),
    )


def solve_single_view(view: ViewParams, rays: np.ndarray, observed: np.ndarray,
                      huber_delta: float, max_iterations: int = 40,
                      fix_distortion: bool = False,
                      anneal: tuple[float, ...] = (8.0, 1.0),
                      trim_gates: tuple[float, ...] = (8.0, 2.0),
                      min_keep: int = 12):
    """Minimize robust reprojection error of fixed rays over one view's
    rotation, focal and distortion. Returns (refined view, inlier mask, report).

    Two safeguards against inconsistent ray fields (drift at the loop-closure
    seam leaves rays split into clusters hundreds of pixels apart): the robust
    scale is annealed down to huber_delta, and the estimate is then re-solved
    on the near cluster only (trim gates, multiples of huber_delta). A Huber
    solve alone equilibrates between clusters because far residuals never
    stop pulling; trimming lets the consistent cluster win.
    """

    def run_solve(cur, ray_set, obs_set, delta):
        problem = Problem()
        qb, fb, db = _view_blocks(cur, fix_distortion=fix_distortion)
        make_ray_group(problem, qb, fb, db, view.intrinsics.cx, view.intrinsics.cy,
                       obs_set, huber(delta), fixed_rays=ray_set)
        rep = solve(problem, SolverOptions(max_iterations=max_iterations,
                                           huber_delta_px=delta))
        return _view_from_blocks(cur.intrinsics, qb, fb, db), rep

    def errors(cur):
        pix, front = project_rays(cur, rays)
        err = np.linalg.norm(pix - observed, axis=1)
        err[~front] = np.inf
        return err

    current = view
    report = None
    for mult in anneal:
        current, report = run_solve(current, rays, observed, mult * huber_delta)
        if report.termination == "failure":
            break
    err = errors(current)
    for gate in trim_gates:
        keep = err < gate * huber_delta
        if int(keep.sum()) < max(min_keep, 8) or keep.all():
            break
        current, report = run_solve(current, rays[keep], observed[keep], huber_delta)
        if report.termination == "failure":
            break
        err = errors(current)
    inliers = err < huber_delta
    return current, inliers, report


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def triangulate_rays(recon: Reconstruction, track: Track,
                     max_angle_deg: float = 2.0) -> np.ndarray:
    """Average the per-view unit rays of a track into one landmark direction.

    Rejects tracks whose rays disagree with the mean by more than
    max_angle_deg (mismatched merges), and antipodal degenerate sets.
    """
    reg = set(recon.registered)
    rays = []
    for vid, pix in sorted(track.observations.items()):
        if vid not in reg:
            continue
        ray, ok = pixel_to_ray(recon.views[vid], pix)
        if ok:
            rays.append(ray)
    if len(rays) < 2:
        raise TriangulationError("needs two registered observers")
    rays = np.asarray(rays)
    mean = rays.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-6:
        raise TriangulationError("degenerate antipodal rays")
    mean = mean / norm
    worst = np.min(rays @ mean)
    if worst < np.cos(np.deg2rad(max_angle_deg)):
        raise TriangulationError("ray spread exceeds consistency gate")
    return mean


def _triangulate_new_tracks(recon: Reconstruction, candidates: dict[int, Track],
                            config: ReconstructionConfig,
                            max_angle_deg: float | None = None) -> int:
    angle = max_angle_deg if max_angle_deg is not None else config.triangulation_max_angle_deg
    reg = set(recon.registered)
    added = 0
    for tid in sorted(candidates):
        if tid in recon.landmarks:
            continue
        track = candidates[tid]
        observers = sum(1 for v in track.observations if v in reg)
        if observers < config.min_track_len:
            continue
        try:
            direction = triangulate_rays(recon, track, angle)
        except TriangulationError:
            continue
        recon.landmarks[tid] = direction
        recon.tracks[tid] = track
        added += 1
    return added


# ---------------------------------------------------------------------------
# Bundle adjustment
# ---------------------------------------------------------------------------


def _build_ba_problem(recon: Reconstruction, config: ReconstructionConfig,
                      gauge_view: str | None, refine_distortion: bool,
                      huber_delta: float | None = None):
    problem = Problem()
    loss = huber(huber_delta if huber_delta is not None else config.huber_delta_px)
    obs = recon.observations_map()
    ray_blocks = {
        tid: ParameterBlock(recon.landmarks[tid], eliminate=True, name=f"ray{tid}")
        for tid in sorted(recon.landmarks)
    }
    shared_db = None
    if config.share_distortion:
        dist = recon.shared_distortion
        if dist is None:
            dist = recon.views[recon.registered[0]].intrinsics.distortion
        shared_db = ParameterBlock(dist, kind=EUCLIDEAN if refine_distortion else FIXED,
                                   lower=DIST_LOWER, upper=DIST_UPPER, name="dist-shared")
    view_blocks = {}
    for vid in recon.registered:
        view = recon.views[vid]
        qb, fb, db = _view_blocks(view, fix_rotation=(vid == gauge_view),
                                  fix_distortion=not refine_distortion)
        if shared_db is not None:
            db = shared_db
        view_blocks[vid] = (qb, fb, db)
        tids = [tid for tid in sorted(recon.landmarks) if vid in obs[tid]]
        if not tids:
            continue
        observed = np.array([obs[tid][vid] for tid in tids])
        make_ray_group(problem, qb, fb, db, view.intrinsics.cx, view.intrinsics.cy,
                       observed, loss, ray_blocks=[ray_blocks[t] for t in tids])
    return problem, view_blocks, ray_blocks


def _apply_ba_result(recon: Reconstruction, view_blocks, ray_blocks,
                     shared: bool) -> None:
    for vid, (qb, fb, db) in view_blocks.items():
        recon.views[vid] = _view_from_blocks(recon.views[vid].intrinsics, qb, fb, db)
    if shared:
        any_db = next(iter(view_blocks.values()))[2]
        recon.shared_distortion = any_db.values.copy()
    for tid, rb in ray_blocks.items():
        recon.landmarks[tid] = normalize_rays(rb.values)


def _prune_landmarks(recon: Reconstruction, config: ReconstructionConfig,
                     min_obs: int | None = None,
                     prune_factor: float | None = None) -> list[int]:
    """Drop landmarks with gross residuals (and optionally too few observers),
    never orphaning a registered view."""
    factor = prune_factor if prune_factor is not None else config.landmark_prune_factor
    obs = recon.observations_map()
    counts = {vid: 0 for vid in recon.registered}
    worst = {tid: 0.0 for tid in obs}
    for vid in recon.registered:
        tids = [tid for tid in sorted(recon.landmarks) if vid in obs[tid]]
        if not tids:
            continue
        rays = np.array([recon.landmarks[t] for t in tids])
        observed = np.array([obs[t][vid] for t in tids])
        pred, front = project_rays(recon.views[vid], rays)
        err = np.linalg.norm(pred - observed, axis=1)
        err[~front] = np.inf
        counts[vid] = len(tids)
        for t, e in zip(tids, err):
            if e > worst[t]:
                worst[t] = float(e)
    limit = factor * config.huber_delta_px
    removed = []
    for tid in sorted(recon.landmarks):
        per_view = obs[tid]
        too_thin = min_obs is not None and len(per_view) < min_obs
        if worst[tid] <= limit and not too_thin:
            continue
        if any(counts[vid] <= 1 for vid in per_view):
            continue  # removing it would orphan a view
        for vid in per_view:
            counts[vid] -= 1
        del recon.landmarks[tid]
        del recon.tracks[tid]
        removed.append(tid)
    return removed


def global_bundle_adjust(recon: Reconstruction, config: ReconstructionConfig,
                         refine_distortion: bool = True,
                         prune_min_obs: int | None = None,
                         prune_factor: float | None = None,
                         huber_scale: float = 1.0) -> SolveReport:
    """Joint solve over all registered views and all landmarks.

    The first registered view's rotation is held fixed (global-rotation
    gauge). Landmarks are renormalized afterwards and gross-residual ones
    pruned (limit prune_factor x huber delta; callers loosen this mid-run so
    loop-closure tracks survive until the geometry has settled).
    """
    if len(recon.registered) < 2:
        raise ReconstructionError("bundle adjustment needs two registered views")
    gauge = recon.registered[0]
    problem, view_blocks, ray_blocks = _build_ba_problem(
        recon, config, gauge_view=gauge, refine_distortion=refine_distortion,
        huber_delta=huber_scale * config.huber_delta_px)
    report = solve(problem, SolverOptions(max_iterations=config.ba_max_iterations,
                                          huber_delta_px=config.huber_delta_px))
    if report.termination == "failure":
        recon.log.append({"event": "bundle_adjust_failed", "message": report.message})
        raise ReconstructionError(f"bundle adjustment failed: {report.message}")
    _apply_ba_result(recon, view_blocks, ray_blocks, config.share_distortion)
    removed = _prune_landmarks(recon, config, min_obs=prune_min_obs,
                               prune_factor=prune_factor)
    recon.log.append({
        "event": "bundle_adjust",
        "num_views": len(recon.registered),
        "num_landmarks": len(recon.landmarks),
        "initial_cost": report.initial_cost,
        "final_cost": report.final_cost,
        "iterations": report.iterations,
        "termination": report.termination,
        "pruned_landmarks": len(removed),
    })
    return report


# ---------------------------------------------------------------------------
# Initialization and registration
# ---------------------------------------------------------------------------


def _initial_intrinsics(graph: MatchGraph, vid: str, config: ReconstructionConfig) -> Intrinsics:
    w, h = graph.views[vid]
    return Intrinsics(f=config.focal_init_multiplier * max(w, h), width=w, height=h)


def initialize_pair(graph: MatchGraph, frame0: str, frame1: str,
                    tracks: list[Track], config: ReconstructionConfig) -> Reconstruction:
    """Seed a reconstruction from one verified pair.

    frame0 sits at the identity rotation; frame1 receives the rotation
    extracted from the pair homography. Both start at the focal heuristic
    with zero distortion; shared tracks are triangulated and a pair bundle
    adjustment (rotation + focal only) cleans up the estimates.
    """
    m = graph.find_match_set(frame0, frame1)
    if m is None or m.homography is None or len(m) < 40:
        raise ReconstructionError(f"no verified edge between {frame0} and {frame1}")
    intr0 = _initial_intrinsics(graph, frame0, config)
    intr1 = _initial_intrinsics(graph, frame1, config)
    h_01 = m.homography if m.view_a == frame0 else np.linalg.inv(m.homography)
    # h_01 maps frame0 pixels to frame1 pixels, so with R0 = I it equals
    # K1 R1 K0^-1 and the calibrated rotation is R1 directly
    q1 = rotation_from_homography(intr1, h_01, intr0)
    recon = Reconstruction()
    recon.views[frame0] = ViewParams(intr0, Pose())
    recon.views[frame1] = ViewParams(intr1, Pose(q=q1))
    recon.registered = [frame0, frame1]
    recon.log.append({"event": "initialize_pair", "views": [frame0, frame1], "matches": len(m)})

    candidates = {t.track_id: t for t in tracks
                  if frame0 in t.observations and frame1 in t.observations}
    added = _triangulate_new_tracks(recon, candidates, config)
    if added < config.min_inlier_landmarks:
        raise ReconstructionError(
            f"pair {frame0},{frame1} triangulated only {added} landmarks")
    # distortion stays frozen at zero here: a single pair cannot separate
    # distortion from focal reliably
    global_bundle_adjust(recon, config, refine_distortion=False)
    return recon


def registration_rays(recon: Reconstruction, view_id: str,
                      track_map: dict[int, Track]):
    """Ray/pixel correspondences binding an unregistered view to the model.

    Every track with an observation in view_id and at least one registered
    observer contributes: the stored landmark direction when the track is
    already triangulated, otherwise the average of the registered observers'
    unprojected rays (for a single observer this is exactly the reference
    image's ray).
    """
    reg = set(recon.registered)
    per_view: dict[str, list] = {}
    order = []
    for tid in sorted(track_map):
        track = track_map[tid]
        pix = track.observations.get(view_id)
        if pix is None:
            continue
        if tid in recon.landmarks:
            order.append((tid, pix, recon.landmarks[tid]))
            continue
        observers = [v for v in sorted(track.observations) if v in reg]
        if not observers:
            continue
        order.append((tid, pix, None))
        for v in observers:
            per_view.setdefault(v, []).append((tid, track.observations[v]))
    # unproject per view in one batch, then average per track
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for v, items in per_view.items():
        pix_arr = np.array([p for _, p in items])
        rays, ok = pixel_to_ray(recon.views[v], pix_arr)
        for (tid, _), ray, good in zip(items, rays, ok):
            if not good:
                continue
            sums[tid] = sums.get(tid, 0.0) + ray
            counts[tid] = counts.get(tid, 0) + 1
    tids, pixels, rays = [], [], []
    for tid, pix, ray in order:
        if ray is None:
            if tid not in sums:
                continue
            acc = sums[tid]
            norm = np.linalg.norm(acc)
            if norm < 1e-6:
                continue
            ray = acc / norm
        tids.append(tid)
        pixels.append(pix)
        rays.append(ray)
    if not tids:
        return [], np.zeros((0, 2)), np.zeros((0, 3))
    return tids, np.array(pixels), np.array(rays)


def register_image(recon: Reconstruction, view_id: str, graph: MatchGraph,
                   config: ReconstructionConfig,
                   track_map: dict[int, Track] | None = None) -> ViewParams:
    """Estimate one new view against rays from the current model (rays fixed).

    Initialization comes from the best-connected registered neighbor plus the
    homography-derived relative rotation. Acceptance requires at least
    ``min_inlier_landmarks`` observations reprojecting under the robust-loss
    scale; on failure the caller increments failed_attempts.
    """
    if track_map is None:
        track_map = recon.tracks
    tids, observed, rays = registration_rays(recon, view_id, track_map)
    if len(tids) < config.min_inlier_landmarks:
        raise RegistrationError(
            f"{view_id}: only {len(tids)} ray correspondences")

    # strongest verified edge into the registered set
    reg = set(recon.registered)
    best_edge = None
    for m in graph.match_sets:
        for cand, other in ((m.view_a, m.view_b), (m.view_b, m.view_a)):
            if cand == view_id and other in reg:
                if best_edge is None or len(m) > len(best_edge[0]):
                    best_edge = (m, other)
    if best_edge is None:
        raise RegistrationError(f"{view_id}: no verified edge to a registered view")
    m, neighbor = best_edge
    nview = recon.views[neighbor]
    w, h = graph.views[view_id]
    intr = Intrinsics(f=nview.intrinsics.f, width=w, height=h,
                      k1=nview.intrinsics.k1, k2=nview.intrinsics.k2,
                      p1=nview.intrinsics.p1, p2=nview.intrinsics.p2)
    h_ni = m.homography if m.view_a == neighbor else np.linalg.inv(m.homography)
    q_rel = rotation_from_homography(intr, h_ni, nview.intrinsics)
    q0 = quat_normalize(quat_multiply(q_rel, nview.pose.q))

    start = ViewParams(intr, Pose(q=q0))
    refined, inliers, report = solve_single_view(
        start, rays, observed, config.huber_delta_px,
        max_iterations=config.register_max_iterations,
        fix_distortion=config.share_distortion,
        min_keep=config.min_inlier_landmarks)
    if config.share_distortion and recon.shared_distortion is not None:
        d = recon.shared_distortion
        refined = ViewParams(
            refined.intrinsics.replace(k1=d[0], k2=d[1], p1=d[2], p2=d[3]),
            refined.pose)
    n_in = int(inliers.sum())
    if report.termination == "failure" or n_in < config.min_inlier_landmarks:
        raise RegistrationError(f"{view_id}: {n_in} inliers after refinement")
    recon.views[view_id] = refined
    recon.registered.append(view_id)
    recon.log.append({"event": "register", "view": view_id, "inliers": n_in,
                      "observations": len(tids),
                      "final_cost": report.final_cost})
    return refined


def guided_rebind(recon: Reconstruction, raw_graph: MatchGraph,
                  config: ReconstructionConfig) -> int:
    """Re-verify raw matches with the calibrated imaging model and rebuild
    the track/landmark set from what passes.

    Homography verification between distorted images systematically discards
    peripheral pairs (the distortion differential is not a homography), which
    starves the distortion estimate. Once views are calibrated, pair
    geometry can be checked exactly: unproject in one view, project into the
    other, keep pairs within guided_threshold in both directions. Returns the
    number of landmarks after rebinding.
    """
    reg = set(recon.registered)
    threshold = config.landmark_prune_factor * config.huber_delta_px
    guided = MatchGraph()
    guided.views = dict(raw_graph.views)
    guided.keypoints = dict(raw_graph.keypoints)
    for m in raw_graph.match_sets:
        if m.view_a not in reg or m.view_b not in reg or len(m) == 0:
            continue
        va, vb = recon.views[m.view_a], recon.views[m.view_b]
        rays_a, ok_a = pixel_to_ray(va, m.pts_a)
        rays_b, ok_b = pixel_to_ray(vb, m.pts_b)
        pred_b, front_b = project_rays(vb, rays_a)
        pred_a, front_a = project_rays(va, rays_b)
        err_f = np.linalg.norm(pred_b - m.pts_b, axis=1)
        err_b = np.linalg.norm(pred_a - m.pts_a, axis=1)
        keep = ok_a & ok_b & front_a & front_b & (np.maximum(err_f, err_b) <= threshold)
        if int(keep.sum()) < config.min_track_len:
            continue
        guided.match_sets.append(MatchSet(
            m.view_a, m.view_b, m.pairs[keep].copy(),
            m.pts_a[keep].copy(), m.pts_b[keep].copy()))
    tracks = filter_tracks(build_tracks(guided), config.min_track_len)
    track_map = {t.track_id: t for t in tracks}
    old_landmarks = dict(recon.landmarks)
    old_tracks = dict(recon.tracks)
    recon.landmarks.clear()
    recon.tracks.clear()
    _triangulate_new_tracks(recon, track_map, config)
    counts = {vid: 0 for vid in recon.registered}
    for tid in recon.landmarks:
        for vid in recon.tracks[tid].observations:
            if vid in counts:
                counts[vid] += 1
    if any(c == 0 for c in counts.values()) or len(recon.landmarks) < len(reg):
        # guided pass failed to cover every view; keep the original binding
        recon.landmarks = old_landmarks
        recon.tracks = old_tracks
        recon.log.append({"event": "guided_rebind_skipped"})
        return len(recon.landmarks)
    recon.log.append({"event": "guided_rebind", "landmarks": len(recon.landmarks)})
    return len(recon.landmarks)


def run_reconstruction(graph: MatchGraph, config: ReconstructionConfig | None = None,
                       raw_graph: MatchGraph | None = None,
                       iteration_callback=None) -> Reconstruction:
    """Full incremental pipeline over a verified match graph.

    When raw_graph (the pre-verification matches) is supplied, a guided
    re-matching pass rebuilds tracks with the calibrated model and the bundle
    is re-adjusted, recovering peripheral observations that homography
    verification cannot keep on distorted images."""
    config = config or ReconstructionConfig()
    config.validate()
    if len(graph.views) < 2 or not graph.match_sets:
        raise ReconstructionError("need at least two views and one verified edge")

    all_tracks = filter_tracks(build_tracks(graph), config.min_track_len)
    track_map = {t.track_id: t for t in all_tracks}
    failed_seeds: set[str] = set()

    while True:
        try:
            seed = select_initial_frame(graph, exclude=failed_seeds)
        except ReconstructionError as exc:
            raise ReconstructionError(f"no viable seed frame: {exc}") from exc
        neighbors = graph.neighbor_weights(seed)
        if not neighbors:
            failed_seeds.add(seed)
            continue
        top = max(neighbors.values())
        partner = min(v for v, w in neighbors.items() if w == top)
        try:
            recon = initialize_pair(graph, seed, partner, all_tracks, config)
        except ReconstructionError as exc:
            logger.info("seed %s failed: %s", seed, exc)
            failed_seeds.add(seed)
            continue

        count_at_last_ba = len(recon.registered)
        rescue_budget = config.rescue_ba_budget
        while True:
            tried: set[str] = set()
            progressed = False
            while True:
                cand = next_best_view(recon, graph, config, exclude=tried)
                if cand is None:
                    break
                try:
                    register_image(recon, cand, graph, config, track_map)
                    progressed = True
                    break
                except RegistrationError as exc:
                    logger.debug("registration failed: %s", exc)
                    tried.add(cand)
                    recon.failed_attempts[cand] = recon.failed_attempts.get(cand, 0) + 1
                    if recon.failed_attempts[cand] >= config.max_register_attempts:
                        recon.discarded.add(cand)
                        recon.log.append({"event": "discard", "view": cand})
            if not progressed:
                # stalled: re-optimize and grant a fresh epoch of attempts, in
                # case failures were caused by drift the adjustment removes
                remaining = set(graph.views) - set(recon.registered)
                if rescue_budget > 0 and remaining and len(recon.registered) >= 2:
                    rescue_budget -= 1
                    _triangulate_new_tracks(
                        recon, track_map, config,
                        max_angle_deg=config.closure_triangulation_angle_deg)
                    for scale in config.closure_anneal:
                        global_bundle_adjust(recon, config, huber_scale=scale,
                                             prune_factor=config.growth_prune_factor)
                    global_bundle_adjust(recon, config,
                                         prune_factor=config.growth_prune_factor)
                    count_at_last_ba = len(recon.registered)
                    recon.failed_attempts.clear()
                    recon.discarded.clear()
                    recon.log.append({"event": "rescue", "remaining": sorted(remaining)})
                    continue
                break
            candidates = {
                tid: t for tid, t in track_map.items()
                if tid not in recon.landmarks and recon.registered[-1] in t.observations
            }
            _triangulate_new_tracks(recon, candidates, config)
            if len(recon.registered) >= config.ba_growth_factor * count_at_last_ba:
                # previously-rejected tracks may pass the consistency gate now
                _triangulate_new_tracks(recon, track_map, config)
                global_bundle_adjust(recon, config,
                                     prune_factor=config.growth_prune_factor)
                count_at_last_ba = len(recon.registered)
                recon.failed_attempts.clear()
            if iteration_callback is not None:
                iteration_callback(recon)

        # end stage: wide-scale passes let loop-closure tension pull the
        # chain together (quadratic over the seam misfit), then the standard
        # scale settles and prunes
        _triangulate_new_tracks(recon, track_map, config,
                                max_angle_deg=config.closure_triangulation_angle_deg)
        for scale in config.closure_anneal:
            global_bundle_adjust(recon, config, huber_scale=scale,
                                 prune_factor=config.growth_prune_factor)
        min_obs = config.retain_track_len if len(recon.registered) >= 3 else None
        for _ in range(3):
            report = global_bundle_adjust(recon, config, prune_min_obs=min_obs)
            last = recon.log[-1]
            if last["pruned_landmarks"] == 0 and report.iterations <= 2:
                break
        if raw_graph is not None and len(recon.registered) >= 3:
            guided_rebind(recon, raw_graph, config)
            for _ in range(3):
                report = global_bundle_adjust(recon, config, prune_min_obs=min_obs)
                last = recon.log[-1]
                if last["pruned_landmarks"] == 0 and report.iterations <= 2:
                    break
        if iteration_callback is not None:
            iteration_callback(recon)
        if len(recon.registered) >= 2:
            recon.log.append({
                "event": "done",
                "registered": len(recon.registered),
                "total_views": len(graph.views),
                "landmarks": len(recon.landmarks),
            })
            return recon
        failed_seeds.add(seed)
