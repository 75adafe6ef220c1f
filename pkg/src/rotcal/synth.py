"""Synthetic rotating-camera scenes with exact ground truth.

A scene is one camera at a fixed center sweeping a full pan circle while
tilt and zoom vary smoothly. 3D points live on a spherical shell around the
center, inside the elevation band the sweep can see. Observations are true
projections plus zero-mean Gaussian pixel noise; the same noisy pixel is
reused wherever a (view, point) pair appears, which is how matches chain into
multi-view tracks. Pairwise matches are emitted only between views that
co-observe at least ``min_pair_points`` points.

The local frame has the camera center at the origin with z up; the geographic
(world) frame is related to it by a rigid transform sampled per scene, placing
the camera a few tens of meters above the world ground plane z = 0. Ground
truth carries both local and world poses, the transform, the shell points and
every noisy observation keyed by hidden point ids (the match files never
mention point ids).

Everything is deterministic in the seed: one generator drives sampling, and
all emitted files order records by id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .geometry import Intrinsics, Pose, RigidTransform, ViewParams, pixel_to_ray, project_points
from .rotation import matrix_to_quat, quat_conjugate, quat_multiply, quat_normalize, quat_to_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    num_points: int = 2600
    shell_radius: tuple[float, float] = (20.0, 100.0)
    num_views: int = 180
    num_ref_views: int = 30
    pan_range_deg: tuple[float, float] = (0.0, 360.0)
    tilt_base_deg: float = -8.0
    tilt_amp_deg: float = 6.0
    tilt_cycles: int = 3
    focal_mid_scale: tuple[float, float] = (1.0, 1.3)   # x max(width, height)
    zoom_amp: float = 0.12
    zoom_cycles: int = 2
    noise_sigma_px: float = 3.0
    k1_range: tuple[float, float] = (-0.2, 0.2)
    k2_range: tuple[float, float] = (-0.05, 0.05)
    p_range: tuple[float, float] = (-0.01, 0.01)
    width: int = 1920
    height: int = 1080
    num_annotated_views: int = 2
    annotations_per_view: int = 30
    min_pair_points: int = 40
    camera_height_range: tuple[float, float] = (20.0, 40.0)

    def validate(self) -> None:
        if self.noise_sigma_px < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.num_ref_views < 2:
            raise ValueError("need at least 2 reference views")
        if self.num_ref_views > self.num_views:
            raise ValueError("more reference views than views")
        lo, hi = self.pan_range_deg
        if not 0 < hi - lo <= 360.0:
            raise ValueError("pan coverage must be in (0, 360] degrees")


@dataclass
class GroundTruth:
    config: SceneConfig
    local_views: dict[str, ViewParams]
    world_views: dict[str, ViewParams]
    transform: RigidTransform                      # world -> local
    points_world: np.ndarray                       # (n, 3)
    points_local: np.ndarray
    observations: dict[str, list[tuple[int, np.ndarray]]]
    annotations: list[dict]
    ref_ids: list[str]
    query_ids: list[str]

    def view_point_ids(self, view_id: str) -> set[int]:
        return {pid for pid, _ in self.observations[view_id]}


def holdout_views(view_ids, num_refs: int):
    """Deterministic uniform split into (reference ids, query ids)."""
    ids = list(view_ids)
    if not 0 < num_refs < len(ids) + 1:
        raise ValueError("reference count out of range")
    stride = max(1, len(ids) // num_refs)
    refs = ids[::stride][:num_refs]
    ref_set = set(refs)
    queries = [v for v in ids if v not in ref_set]
    return refs, queries


def _pan_tilt_to_quat(pan_deg: float, tilt_deg: float) -> np.ndarray:
    """World->camera quaternion for a camera panned/tilted in a z-up frame."""
    pan, tilt = np.deg2rad(pan_deg), np.deg2rad(tilt_deg)
    forward = np.array([np.cos(tilt) * np.cos(pan), np.cos(tilt) * np.sin(pan), np.sin(tilt)])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return matrix_to_quat(np.stack([right, down, forward]))


def generate_ground_truth(cfg: SceneConfig) -> GroundTruth:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    maxwh = max(cfg.width, cfg.height)

    # per-view schedule, smooth in pan order so neighboring views look alike
    n = cfg.num_views
    pan_lo, pan_hi = cfg.pan_range_deg
    pans = pan_lo + (pan_hi - pan_lo) * np.arange(n) / n
    phase_t, phase_z = rng.uniform(0, 2 * np.pi, size=2)
    tilts = cfg.tilt_base_deg + cfg.tilt_amp_deg * np.sin(
        2 * np.pi * cfg.tilt_cycles * np.arange(n) / n + phase_t)
    f_mid = rng.uniform(*cfg.focal_mid_scale) * maxwh
    focals = f_mid * (1.0 + cfg.zoom_amp * np.sin(
        2 * np.pi * cfg.zoom_cycles * np.arange(n) / n + phase_z))

    view_ids = [f"v{k:03d}" for k in range(n)]
    local_views: dict[str, ViewParams] = {}
    for k, vid in enumerate(view_ids):
        intr = Intrinsics(
            f=float(focals[k]), width=cfg.width, height=cfg.height,
            k1=float(rng.uniform(*cfg.k1_range)),
            k2=float(rng.uniform(*cfg.k2_range)),
            p1=float(rng.uniform(*cfg.p_range)),
            p2=float(rng.uniform(*cfg.p_range)),
        )
        pose = Pose(q=_pan_tilt_to_quat(pans[k], tilts[k]))
        local_views[vid] = ViewParams(intr, pose)

    # shell points inside the elevation band the sweep can reach
    vfov_half = np.rad2deg(np.arctan(cfg.height / (2 * focals.min())))
    band_lo = np.deg2rad(cfg.tilt_base_deg - cfg.tilt_amp_deg - vfov_half - 1.0)
    band_hi = np.deg2rad(cfg.tilt_base_deg + cfg.tilt_amp_deg + vfov_half + 1.0)
    az = rng.uniform(np.deg2rad(pan_lo), np.deg2rad(pan_hi), cfg.num_points)
    el = rng.uniform(band_lo, band_hi, cfg.num_points)
    radius = rng.uniform(*cfg.shell_radius, cfg.num_points)
    points_local = np.stack([
        radius * np.cos(el) * np.cos(az),
        radius * np.cos(el) * np.sin(az),
        radius * np.sin(el),
    ], axis=1)

    # geographic frame: camera sits above the z=0 ground plane; the local
    # frame is a yawed, slightly tipped copy of it
    yaw = rng.uniform(0, 2 * np.pi)
    tip = np.deg2rad(rng.uniform(-2.0, 2.0, size=2))
    q_yaw = np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
    q_tip = quat_normalize(np.array([1.0, tip[0] / 2, tip[1] / 2, 0.0]))
    q_t = quat_normalize(quat_multiply(q_yaw, q_tip))
    center_world = np.array([
        rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(*cfg.camera_height_range)
    ])
    transform = RigidTransform(q=q_t, t=-(quat_to_matrix(q_t) @ center_world))
    inv = transform.inverse()
    points_world = inv.apply(points_local)

    world_views = {
        vid: ViewParams(
            v.intrinsics,
            Pose(q=quat_normalize(quat_multiply(v.pose.q, q_t)), center=center_world.copy()),
        )
        for vid, v in local_views.items()
    }

    # noisy observations, one pixel per (view, point)
    observations: dict[str, list[tuple[int, np.ndarray]]] = {}
    for vid in view_ids:
        view = local_views[vid]
        pix, front = project_points(view, points_local)
        noisy = pix + rng.normal(scale=cfg.noise_sigma_px, size=pix.shape) \
            if cfg.noise_sigma_px > 0 else pix
        keep = front & (noisy[:, 0] >= 0) & (noisy[:, 0] < cfg.width) \
            & (noisy[:, 1] >= 0) & (noisy[:, 1] < cfg.height) \
            & (pix[:, 0] >= 0) & (pix[:, 0] < cfg.width) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < cfg.height)
        ids = np.flatnonzero(keep)
        observations[vid] = [(int(i), noisy[i].copy()) for i in ids]
        if len(ids) < cfg.min_pair_points:
            logger.warning("view %s observes only %d points", vid, len(ids))

    ref_ids, query_ids = holdout_views(view_ids, cfg.num_ref_views)

    # fresh annotation points unprojected from annotated reference pixels
    ann_views = [ref_ids[0]]
    if cfg.num_annotated_views > 1:
        step = len(ref_ids) // cfg.num_annotated_views
        ann_views = [ref_ids[(i * step) % len(ref_ids)] for i in range(cfg.num_annotated_views)]
    annotations = []
    for vid in ann_views:
        view = local_views[vid]
        pix = np.stack([
            rng.uniform(40, cfg.width - 40, cfg.annotations_per_view),
            rng.uniform(40, cfg.height - 40, cfg.annotations_per_view),
        ], axis=1)
        rays, ok = pixel_to_ray(view, pix)
        depth = rng.uniform(*cfg.shell_radius, cfg.annotations_per_view)
        pts_local = rays * depth[:, None]
        pts_world = inv.apply(pts_local)
        noisy = pix + rng.normal(scale=cfg.noise_sigma_px, size=pix.shape) \
            if cfg.noise_sigma_px > 0 else pix
        for j in range(cfg.annotations_per_view):
            if not ok[j]:
                continue
            annotations.append({
                "view_id": vid,
                "u": float(noisy[j, 0]), "v": float(noisy[j, 1]),
                "X": float(pts_world[j, 0]), "Y": float(pts_world[j, 1]),
                "Z": float(pts_world[j, 2]),
            })

    return GroundTruth(
        config=cfg,
        local_views=local_views,
        world_views=world_views,
        transform=transform,
        points_world=points_world,
        points_local=points_local,
        observations=observations,
        annotations=annotations,
        ref_ids=ref_ids,
        query_ids=query_ids,
    )


def _pair_records(gt: GroundTruth, pairs: list[tuple[str, str]]) -> list[dict]:
    obs_map = {vid: dict(gt.observations[vid]) for vid in gt.local_views}
    records = []
    for a, b in pairs:
        shared = sorted(set(obs_map[a]) & set(obs_map[b]))
        if len(shared) < gt.config.min_pair_points:
            continue
        rows = [[*obs_map[a][pid], *obs_map[b][pid]] for pid in shared]
        records.append({"view_a": a, "view_b": b, "pairs": rows})
    return records


def offline_match_records(gt: GroundTruth) -> list[dict]:
    refs = gt.ref_ids
    pairs = [(refs[i], refs[j]) for i in range(len(refs)) for j in range(i + 1, len(refs))]
    return _pair_records(gt, pairs)


def online_match_records(gt: GroundTruth) -> list[dict]:
    """Edges from every query to overlapping references plus the previous query."""
    pairs = []
    for i, q in enumerate(gt.query_ids):
        for r in gt.ref_ids:
            pairs.append((q, r))
        if i > 0:
            pairs.append((gt.query_ids[i - 1], q))
    return _pair_records(gt, pairs)


def write_scene(gt: GroundTruth, out_dir) -> dict[str, str]:
    """Emit the four scene files; returns their paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wh = (gt.config.width, gt.config.height)
    paths = {
        "matches_offline": str(out / "matches_offline.json"),
        "matches_online": str(out / "matches_online.json"),
        "annotations": str(out / "annotations.json"),
        "ground_truth": str(out / "ground_truth.json"),
    }
    fileio.write_match_file(
        paths["matches_offline"], {vid: wh for vid in gt.ref_ids}, offline_match_records(gt))
    fileio.write_match_file(
        paths["matches_online"], {vid: wh for vid in gt.local_views}, online_match_records(gt))
    fileio.write_annotation_file(paths["annotations"], gt.annotations)
    fileio.write_ground_truth_file(
        paths["ground_truth"], gt.world_views, gt.transform, gt.points_world,
        {vid: obs for vid, obs in gt.observations.items()})
    return paths


def generate_scene(cfg: SceneConfig, out_dir) -> tuple[GroundTruth, dict[str, str]]:
    gt = generate_ground_truth(cfg)
    return gt, write_scene(gt, out_dir)


def noise_free(cfg: SceneConfig) -> SceneConfig:
    return replace(cfg, noise_sigma_px=0.0)
