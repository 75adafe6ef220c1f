"""Shared on-disk formats (JSON).

All pipeline artifacts are self-describing JSON with a top-level "format"
tag. View records use one schema everywhere:

    {view_id, f, cx, cy, k1, k2, p1, p2, width, height,
     quaternion_wxyz: [w,x,y,z], center_xyz: [x,y,z]}

Match interchange files carry a view header plus pairwise pixel matches;
coordinates are pixels with the origin at the top-left corner. Unknown keys
are ignored on read so producers may attach extra metadata. Writers emit keys
in sorted order with no timestamps, so identical inputs give byte-identical
files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, RigidTransform, ViewParams


class ParseError(ValueError):
    """Malformed input file; message carries the offending record context."""


def _dump(payload: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc


def _finite_floats(values, context: str) -> list[float]:
    out = []
    for v in values:
        try:
            f = float(v)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{context}: non-numeric value {v!r}") from exc
        if not np.isfinite(f):
            raise ParseError(f"{context}: non-finite value {v!r}")
        out.append(f)
    return out


# ---------------------------------------------------------------------------
# View records
# ---------------------------------------------------------------------------


def view_record(view_id: str, view: ViewParams) -> dict:
    intr, pose = view.intrinsics, view.pose
    return {
        "view_id": view_id,
        "f": float(intr.f),
        "cx": float(intr.cx),
        "cy": float(intr.cy),
        "k1": float(intr.k1),
        "k2": float(intr.k2),
        "p1": float(intr.p1),
        "p2": float(intr.p2),
        "width": int(intr.width),
        "height": int(intr.height),
        "quaternion_wxyz": [float(x) for x in pose.q],
        "center_xyz": [float(x) for x in pose.center],
    }


def parse_view_record(rec: dict, context: str = "view record") -> tuple[str, ViewParams]:
    try:
        view_id = str(rec["view_id"])
        intr = Intrinsics(
            f=float(rec["f"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
            k1=float(rec.get("k1", 0.0)),
            k2=float(rec.get("k2", 0.0)),
            p1=float(rec.get("p1", 0.0)),
            p2=float(rec.get("p2", 0.0)),
        )
        q = np.array(_finite_floats(rec["quaternion_wxyz"], context))
        center = np.array(_finite_floats(rec["center_xyz"], context))
    except KeyError as exc:
        raise ParseError(f"{context}: missing field {exc}") from exc
    if q.shape != (4,) or center.shape != (3,):
        raise ParseError(f"{context}: bad quaternion/center shape")
    view = ViewParams(intrinsics=intr, pose=Pose(q=q, center=center))
    view.validate()
    return view_id, view


def transform_record(t: RigidTransform) -> dict:
    return {
        "quaternion_wxyz": [float(x) for x in t.q],
        "translation_xyz": [float(x) for x in t.t],
    }


def parse_transform_record(rec: dict, context: str = "transform") -> RigidTransform:
    q = np.array(_finite_floats(rec["quaternion_wxyz"], context))
    t = np.array(_finite_floats(rec["translation_xyz"], context))
    out = RigidTransform(q=q, t=t)
    out.validate()
    return out


def write_camera_file(path, views: dict[str, ViewParams], extra: dict | None = None) -> None:
    payload = {
        "format": "camera-parameters",
        "views": [view_record(vid, views[vid]) for vid in sorted(views)],
    }
    if extra:
        payload.update(extra)
    _dump(payload, path)


def read_camera_file(path) -> tuple[dict[str, ViewParams], dict]:
    data = _load(path)
    if "views" not in data:
        raise ParseError(f"{path}: missing 'views'")
    views = {}
    for i, rec in enumerate(data["views"]):
        vid, view = parse_view_record(rec, context=f"{path}: views[{i}]")
        views[vid] = view
    return views, data


# ---------------------------------------------------------------------------
# Match interchange
# ---------------------------------------------------------------------------


def write_match_file(path, views: dict[str, tuple[int, int]], matches: list[dict]) -> None:
    """views: id -> (width, height); matches: [{view_a, view_b, pairs}]."""
    payload = {
        "format": "matches",
        "views": [
            {"id": vid, "width": int(views[vid][0]), "height": int(views[vid][1])}
            for vid in sorted(views)
        ],
        "matches": [
            {
                "view_a": m["view_a"],
                "view_b": m["view_b"],
                "pairs": [[float(x) for x in row] for row in m["pairs"]],
            }
            for m in matches
        ],
    }
    _dump(payload, path)


def read_match_file(path) -> tuple[dict[str, tuple[int, int]], list[dict]]:
    """Returns (views, matches) with pairs as (n,4) float arrays [xa ya xb yb]."""
    data = _load(path)
    for key in ("views", "matches"):
        if key not in data:
            raise ParseError(f"{path}: missing '{key}'")
    views: dict[str, tuple[int, int]] = {}
    for i, rec in enumerate(data["views"]):
        try:
            vid = str(rec["id"])
            wh = (int(rec["width"]), int(rec["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: views[{i}] malformed ({exc})") from exc
        if wh[0] <= 0 or wh[1] <= 0:
            raise ParseError(f"{path}: views[{i}] non-positive size")
        if vid in views:
            raise ParseError(f"{path}: duplicate view id {vid!r}")
        views[vid] = wh
    matches = []
    for i, rec in enumerate(data["matches"]):
        ctx = f"{path}: matches[{i}]"
        try:
            a, b = str(rec["view_a"]), str(rec["view_b"])
            raw = rec["pairs"]
        except KeyError as exc:
            raise ParseError(f"{ctx}: missing field {exc}") from exc
        if a not in views or b not in views:
            raise ParseError(f"{ctx}: unknown view reference {a!r}/{b!r}")
        if a == b:
            raise ParseError(f"{ctx}: self-match {a!r}")
        pairs = np.zeros((len(raw), 4))
        for j, row in enumerate(raw):
            if len(row) != 4:
                raise ParseError(f"{ctx}: pairs[{j}] needs 4 coordinates")
            pairs[j] = _finite_floats(row, f"{ctx}: pairs[{j}]")
        matches.append({"view_a": a, "view_b": b, "pairs": pairs})
    return views, matches


# ---------------------------------------------------------------------------
# Annotations (2D-3D correspondences)
# ---------------------------------------------------------------------------


def write_annotation_file(path, annotations: list[dict]) -> None:
    """annotations: [{view_id, u, v, X, Y, Z}]."""
    payload = {
        "format": "annotations",
        "annotations": [
            {
                "view_id": a["view_id"],
                "u": float(a["u"]),
                "v": float(a["v"]),
                "X": float(a["X"]),
                "Y": float(a["Y"]),
                "Z": float(a["Z"]),
            }
            for a in annotations
        ],
    }
    _dump(payload, path)


def read_annotation_file(path) -> list[dict]:
    data = _load(path)
    if "annotations" not in data:
        raise ParseError(f"{path}: missing 'annotations'")
    out = []
    for i, rec in enumerate(data["annotations"]):
        ctx = f"{path}: annotations[{i}]"
        try:
            vid = str(rec["view_id"])
            u, v = _finite_floats([rec["u"], rec["v"]], ctx)
            xyz = _finite_floats([rec["X"], rec["Y"], rec["Z"]], ctx)
        except KeyError as exc:
            raise ParseError(f"{ctx}: missing field {exc}") from exc
        out.append({"view_id": vid, "pixel": np.array([u, v]), "world": np.array(xyz)})
    return out


# ---------------------------------------------------------------------------
# Reconstruction files
# ---------------------------------------------------------------------------


def write_reconstruction_file(path, views: dict[str, ViewParams],
                              landmarks: dict[int, np.ndarray],
                              observations: dict[int, dict[str, np.ndarray]],
                              log: list[dict],
                              transform: RigidTransform | None = None,
                              status: str = "complete") -> None:
    payload = {
        "format": "reconstruction",
        "status": status,
        "views": [view_record(vid, views[vid]) for vid in sorted(views)],
        "landmarks": [
            {"track_id": int(tid), "dir_xyz": [float(x) for x in landmarks[tid]]}
            for tid in sorted(landmarks)
        ],
        "observations": [
            {
                "track_id": int(tid),
                "view_id": vid,
                "pixel": [float(x) for x in observations[tid][vid]],
            }
            for tid in sorted(observations)
            for vid in sorted(observations[tid])
        ],
        "registration_log": log,
    }
    if transform is not None:
        payload["transform"] = transform_record(transform)
        inv = transform.inverse()
        payload["world_center"] = [float(x) for x in inv.t]
    _dump(payload, path)


def read_reconstruction_file(path):
    """Returns (views, landmarks, observations, log, transform-or-None, raw)."""
    data = _load(path)
    for key in ("views", "landmarks", "observations"):
        if key not in data:
            raise ParseError(f"{path}: missing '{key}'")
    views = {}
    for i, rec in enumerate(data["views"]):
        vid, view = parse_view_record(rec, context=f"{path}: views[{i}]")
        views[vid] = view
    landmarks = {}
    for i, rec in enumerate(data["landmarks"]):
        ctx = f"{path}: landmarks[{i}]"
        d = np.array(_finite_floats(rec["dir_xyz"], ctx))
        if d.shape != (3,):
            raise ParseError(f"{ctx}: direction needs 3 components")
        landmarks[int(rec["track_id"])] = d
    observations: dict[int, dict[str, np.ndarray]] = {}
    for i, rec in enumerate(data["observations"]):
        ctx = f"{path}: observations[{i}]"
        tid = int(rec["track_id"])
        vid = str(rec["view_id"])
        if vid not in views:
            raise ParseError(f"{ctx}: unknown view {vid!r}")
        pix = np.array(_finite_floats(rec["pixel"], ctx))
        observations.setdefault(tid, {})[vid] = pix
    transform = None
    if "transform" in data:
        transform = parse_transform_record(data["transform"], context=f"{path}: transform")
    return views, landmarks, observations, data.get("registration_log", []), transform, data


# ---------------------------------------------------------------------------
# Ground truth (synthetic scenes)
# ---------------------------------------------------------------------------


def write_ground_truth_file(path, views: dict[str, ViewParams],
                            transform: RigidTransform,
                            points: np.ndarray,
                            view_points: dict[str, list[tuple[int, np.ndarray]]]) -> None:
    """views hold world-frame poses; points are world-frame (n,3); view_points
    map view_id -> [(point_id, observed pixel)]."""
    payload = {
        "format": "ground-truth",
        "views": [view_record(vid, views[vid]) for vid in sorted(views)],
        "transform": transform_record(transform),
        "points": [
            {"id": i, "xyz": [float(x) for x in p]} for i, p in enumerate(np.asarray(points))
        ],
        "view_points": [
            {"view_id": vid, "point_id": int(pid), "pixel": [float(x) for x in pix]}
            for vid in sorted(view_points)
            for pid, pix in view_points[vid]
        ],
    }
    _dump(payload, path)


def read_ground_truth_file(path):
    data = _load(path)
    for key in ("views", "transform", "points"):
        if key not in data:
            raise ParseError(f"{path}: missing '{key}'")
    views = {}
    for i, rec in enumerate(data["views"]):
        vid, view = parse_view_record(rec, context=f"{path}: views[{i}]")
        views[vid] = view
    transform = parse_transform_record(data["transform"], context=f"{path}: transform")
    points = np.array([rec["xyz"] for rec in data["points"]], dtype=float).reshape(-1, 3)
    view_points: dict[str, list[tuple[int, np.ndarray]]] = {}
    for rec in data.get("view_points", []):
        view_points.setdefault(str(rec["view_id"]), []).append(
            (int(rec["point_id"]), np.array(rec["pixel"], dtype=float))
        )
    return views, transform, points, view_points


def write_metrics_file(path, table: dict) -> None:
    _dump({"format": "metrics", **table}, path)


def read_metrics_file(path) -> dict:
    return _load(path)
