"""Pairwise match ingestion, RANSAC homography verification, track building.

A MatchGraph holds per-view keypoint arrays plus pairwise match sets. After
verification each surviving match set keeps only its homography inliers and
the edge weight equals the inlier count; edges with fewer than
``min_inliers`` (default 40) are dropped entirely. Tracks are the connected
components of the keypoint-match relation, built with union-find; components
touching one view twice are conflicted and removed by filter_tracks.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import fileio

RANSAC_MAX_ITERATIONS = 2000
RANSAC_CONFIDENCE = 0.999
MIN_EDGE_INLIERS = 40


class CorrespondenceError(ValueError):
    pass


@dataclass
class MatchSet:
    """Verified or raw matches between two views.

    pairs index into the owning graph's per-view keypoint arrays; pts_a/pts_b
    are the resolved pixel coordinates (kept denormalized so a MatchSet is
    self-contained for verification).
    """

    view_a: str
    view_b: str
    pairs: np.ndarray      # (n, 2) int
    pts_a: np.ndarray      # (n, 2) float
    pts_b: np.ndarray      # (n, 2) float
    homography: np.ndarray | None = None

    def __len__(self):
        return len(self.pairs)


@dataclass
class Track:
    track_id: int
    observations: dict[str, np.ndarray]            # view_id -> pixel
    members: list[tuple[str, int]] = field(default_factory=list)
    conflicted: bool = False

    def __len__(self):
        return len(self.members) if self.conflicted else len(self.observations)


class MatchGraph:
    def __init__(self):
        self.views: dict[str, tuple[int, int]] = {}        # id -> (width, height)
        self.keypoints: dict[str, np.ndarray] = {}         # id -> (n, 2)
        self.match_sets: list[MatchSet] = []

    def add_view(self, view_id: str, width: int, height: int) -> None:
        self.views[view_id] = (width, height)
        self.keypoints.setdefault(view_id, np.zeros((0, 2)))

    def edge_weights(self) -> dict[tuple[str, str], int]:
        """Symmetric edge weights keyed by sorted view-id pairs."""
        out: dict[tuple[str, str], int] = {}
        for m in self.match_sets:
            key = tuple(sorted((m.view_a, m.view_b)))
            out[key] = out.get(key, 0) + len(m)
        return out

    def neighbor_weights(self, view_id: str) -> dict[str, int]:
        out: dict[str, int] = {}
        for (a, b), w in self.edge_weights().items():
            if a == view_id:
                out[b] = out.get(b, 0) + w
            elif b == view_id:
                out[a] = out.get(a, 0) + w
        return out

    def find_match_set(self, view_a: str, view_b: str) -> MatchSet | None:
        for m in self.match_sets:
            if {m.view_a, m.view_b} == {view_a, view_b}:
                return m
        return None


def load_matches(path) -> MatchGraph:
    """Read a match interchange file into a graph, deduplicating keypoints."""
    views, matches = fileio.read_match_file(path)
    graph = MatchGraph()
    for vid, (w, h) in views.items():
        graph.add_view(vid, w, h)
    index: dict[str, dict[tuple[float, float], int]] = {vid: {} for vid in views}
    pts: dict[str, list] = {vid: [] for vid in views}

    def intern(vid, xy, ctx):
        w, h = views[vid]
        if not (0 <= xy[0] < w and 0 <= xy[1] < h):
            raise fileio.ParseError(f"{ctx}: pixel {xy} outside {vid!r} bounds {w}x{h}")
        key = (xy[0], xy[1])
        got = index[vid].get(key)
        if got is None:
            got = len(pts[vid])
            index[vid][key] = got
            pts[vid].append(xy)
        return got

    for mi, m in enumerate(matches):
        a, b = m["view_a"], m["view_b"]
        seen = set()
        rows = []
        for j, (xa, ya, xb, yb) in enumerate(m["pairs"]):
            ctx = f"{path}: matches[{mi}].pairs[{j}]"
            ia = intern(a, (xa, ya), ctx)
            ib = intern(b, (xb, yb), ctx)
            if (ia, ib) in seen:
                continue
            seen.add((ia, ib))
            rows.append((ia, ib))
        pairs = np.array(rows, dtype=int).reshape(-1, 2)
        pa = np.array([pts[a][i] for i in pairs[:, 0]], dtype=float).reshape(-1, 2)
        pb = np.array([pts[b][i] for i in pairs[:, 1]], dtype=float).reshape(-1, 2)
        graph.match_sets.append(MatchSet(a, b, pairs, pa, pb))
    for vid in views:
        graph.keypoints[vid] = np.array(pts[vid], dtype=float).reshape(-1, 2)
    return graph


# ---------------------------------------------------------------------------
# Homography estimation
# ---------------------------------------------------------------------------


def _normalize_points(pts):
    c = pts.mean(axis=0)
    scale = np.sqrt(2) / (np.mean(np.linalg.norm(pts - c, axis=1)) + 1e-12)
    T = np.array([[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1.0]])
    pn = (pts - c) * scale
    return pn, T


def _fit_homographies_batch(pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Normalized DLT on a batch of point sets: (batch, n, 2) x2 -> (batch, 3, 3).

    Degenerate samples come back as all-NaN matrices.
    """
    pa, pb = np.asarray(pts_a, float), np.asarray(pts_b, float)
    bsz, n = pa.shape[0], pa.shape[1]
    ca = pa.mean(axis=1, keepdims=True)
    cb = pb.mean(axis=1, keepdims=True)
    sa = np.sqrt(2) / (np.linalg.norm(pa - ca, axis=2).mean(axis=1) + 1e-12)
    sb = np.sqrt(2) / (np.linalg.norm(pb - cb, axis=2).mean(axis=1) + 1e-12)
    qa = (pa - ca) * sa[:, None, None]
    qb = (pb - cb) * sb[:, None, None]
    A = np.zeros((bsz, 2 * n, 9))
    x, y = qa[:, :, 0], qa[:, :, 1]
    u, v = qb[:, :, 0], qb[:, :, 1]
    A[:, 0::2, 0] = x
    A[:, 0::2, 1] = y
    A[:, 0::2, 2] = 1
    A[:, 0::2, 6] = -u * x
    A[:, 0::2, 7] = -u * y
    A[:, 0::2, 8] = -u
    A[:, 1::2, 3] = x
    A[:, 1::2, 4] = y
    A[:, 1::2, 5] = 1
    A[:, 1::2, 6] = -v * x
    A[:, 1::2, 7] = -v * y
    A[:, 1::2, 8] = -v
    if n == 4:
        # minimal sample: fix h9 = 1 in the normalized frame and LU-solve the
        # 8x8 system; far cheaper than SVD at RANSAC volumes. Collinear
        # samples make the matrix singular and are flagged via |det|.
        M8 = A[:, :, :8]
        rhs = -A[:, :, 8]
        dets = np.linalg.det(M8)
        bad = np.abs(dets) < 1e-10
        M8 = M8.copy()
        M8[bad] = np.eye(8)
        h8 = np.linalg.solve(M8, rhs[:, :, None])[:, :, 0]
        Hn = np.concatenate([h8, np.ones((bsz, 1))], axis=1).reshape(bsz, 3, 3)
    else:
        try:
            _, s, vt = np.linalg.svd(A, full_matrices=True)
        except np.linalg.LinAlgError:
            return np.full((bsz, 3, 3), np.nan)
        Hn = vt[:, -1, :].reshape(bsz, 3, 3)
        bad = np.zeros(bsz, bool)
    # denormalize: H = Tb^-1 Hn Ta
    Ta = np.zeros((bsz, 3, 3))
    Ta[:, 0, 0] = sa
    Ta[:, 1, 1] = sa
    Ta[:, 2, 2] = 1.0
    Ta[:, 0, 2] = -sa * ca[:, 0, 0]
    Ta[:, 1, 2] = -sa * ca[:, 0, 1]
    Tb_inv = np.zeros((bsz, 3, 3))
    Tb_inv[:, 0, 0] = 1.0 / sb
    Tb_inv[:, 1, 1] = 1.0 / sb
    Tb_inv[:, 2, 2] = 1.0
    Tb_inv[:, 0, 2] = cb[:, 0, 0]
    Tb_inv[:, 1, 2] = cb[:, 0, 1]
    H = Tb_inv @ Hn @ Ta
    scale = H[:, 2, 2].copy()
    bad |= np.abs(scale) < 1e-12
    scale[bad] = 1.0
    H = H / scale[:, None, None]
    H[bad] = np.nan
    return H


def fit_homography(pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray | None:
    """Normalized DLT mapping a-pixels to b-pixels; None when degenerate."""
    if len(pts_a) < 4:
        return None
    H = _fit_homographies_batch(np.asarray(pts_a, float)[None], np.asarray(pts_b, float)[None])[0]
    return None if np.any(np.isnan(H)) else H


def symmetric_transfer_error(H: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Root-mean of forward and backward squared transfer distances, pixels."""

    def transfer(M, src, dst):
        ph = np.concatenate([src, np.ones((len(src), 1))], axis=1) @ M.T
        w = ph[:, 2]
        bad = np.abs(w) < 1e-12
        w = np.where(bad, 1e-12, w)
        d2 = np.sum((ph[:, :2] / w[:, None] - dst) ** 2, axis=1)
        return np.where(bad, np.inf, d2)

    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(len(pts_a), np.inf)
    fwd = transfer(H, pts_a, pts_b)
    bwd = transfer(Hinv, pts_b, pts_a)
    return np.sqrt(0.5 * (fwd + bwd))


def _edge_rng(seed: int, view_a: str, view_b: str) -> np.random.Generator:
    # stable per-edge stream: results do not depend on edge processing order
    tag = zlib.crc32(f"{view_a}|{view_b}".encode())
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _transfer_d2(M: np.ndarray, src_h: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared transfer distances for a homography batch: -> (batch, n)."""
    b = len(M)
    # one GEMM for the whole batch: W[j, 3b+i] = M[b, i, j]
    W = np.ascontiguousarray(M.transpose(2, 0, 1)).reshape(3, b * 3)
    q = np.ascontiguousarray((src_h @ W).reshape(len(src_h), b, 3).transpose(1, 0, 2))
    w = q[:, :, 2]
    bad = np.abs(w) < 1e-12
    w[bad] = 1e-12
    diff = q[:, :, :2] / w[:, :, None] - dst
    d = diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2
    d[bad] = np.inf
    return d


def _count_symmetric_inliers(Hs: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray,
                             threshold_px: float, floor: int):
    """Per-model symmetric-error inlier masks with forward prescreening.

    The backward pass runs only on models whose forward-error bound could
    still beat `floor` inliers. Returns (counts (batch,), masks (batch, n))
    with pruned models at count -1.
    """
    bsz, n = len(Hs), len(pts_a)
    counts = np.full(bsz, -1, dtype=int)
    masks = np.zeros((bsz, n), dtype=bool)
    valid = ~np.isnan(Hs[:, 0, 0])
    if not valid.any():
        return counts, masks
    Hv = Hs[valid]
    dets = np.linalg.det(Hv)
    ok = np.abs(dets) > 1e-15
    if not ok.any():
        return counts, masks
    idx = np.flatnonzero(valid)[ok]
    Hv = Hv[ok]
    pha = np.concatenate([pts_a, np.ones((n, 1))], axis=1)
    t2 = threshold_px * threshold_px
    fwd = _transfer_d2(Hv, pha, pts_b)
    # symmetric err <= t needs forward d2 <= 2 t^2
    bound = (fwd <= 2.0 * t2).sum(axis=1)
    srv = bound > floor
    if not srv.any():
        return counts, masks
    idx = idx[srv]
    Hv = Hv[srv]
    fwd = fwd[srv]
    phb = np.concatenate([pts_b, np.ones((n, 1))], axis=1)
    bwd = _transfer_d2(np.linalg.inv(Hv), phb, pts_a)
    mask = 0.5 * (fwd + bwd) <= t2
    counts[idx] = mask.sum(axis=1)
    masks[idx] = mask
    return counts, masks


RANSAC_BATCH = 256


def verify_homography(m: MatchSet, threshold_px: float = 4.0, seed: int = 0,
                      min_inliers: int = MIN_EDGE_INLIERS,
                      max_iterations: int = RANSAC_MAX_ITERATIONS):
    """RANSAC + homography verification of one match set.

    Minimal samples are drawn and fitted in batches; the adaptive stopping
    rule (99.9% confidence of one all-inlier sample) is evaluated between
    batches. Returns (H, inlier MatchSet) or None when the edge must be
    discarded (under min_inliers surviving pairs, or nothing but degenerate
    samples).
    """
    n = len(m)
    if n < 4 or n < min_inliers:
        return None
    rng = _edge_rng(seed, m.view_a, m.view_b)
    best_count = 0
    best_mask = None
    needed = max_iterations
    it = 0
    while it < min(max_iterations, needed):
        bsz = min(RANSAC_BATCH, max_iterations - it)
        it += bsz
        idx = rng.random((bsz, n)).argsort(axis=1)[:, :4]
        Hs = _fit_homographies_batch(m.pts_a[idx], m.pts_b[idx])
        counts, masks = _count_symmetric_inliers(Hs, m.pts_a, m.pts_b, threshold_px, best_count)
        j = int(counts.argmax())
        if counts[j] > best_count:
            best_count = int(counts[j])
            best_mask = masks[j]
            # local refinement: a least-squares refit on the inliers usually
            # reaches the model's inlier ceiling at once, shrinking `needed`
            refit = fit_homography(m.pts_a[best_mask], m.pts_b[best_mask])
            if refit is not None:
                mask2 = symmetric_transfer_error(refit, m.pts_a, m.pts_b) <= threshold_px
                if int(mask2.sum()) > best_count:
                    best_count = int(mask2.sum())
                    best_mask = mask2
            ratio = best_count / n
            if ratio >= 1.0:
                break
            # samples needed for one all-inlier draw at the target confidence
            denom = np.log(max(1e-12, 1.0 - ratio ** 4))
            needed = int(np.ceil(np.log(1.0 - RANSAC_CONFIDENCE) / denom)) if denom < 0 else max_iterations
    if best_mask is None or best_count < 4:
        return None

    # refit on inliers, then re-derive the retained set under the refit H
    # (twice, so the returned pairs are consistent with the returned H)
    mask = best_mask
    H = None
    for _ in range(2):
        refit = fit_homography(m.pts_a[mask], m.pts_b[mask])
        if refit is None:
            break
        err = symmetric_transfer_error(refit, m.pts_a, m.pts_b)
        new_mask = err <= threshold_px
        if new_mask.sum() < 4:
            break
        H, mask = refit, new_mask
    if H is None:
        # fall back to the minimal-sample model
        H = fit_homography(m.pts_a[mask], m.pts_b[mask])
        if H is None:
            return None
        mask = symmetric_transfer_error(H, m.pts_a, m.pts_b) <= threshold_px
    if int(mask.sum()) < min_inliers:
        return None
    inlier = MatchSet(
        m.view_a, m.view_b,
        pairs=m.pairs[mask].copy(),
        pts_a=m.pts_a[mask].copy(),
        pts_b=m.pts_b[mask].copy(),
        homography=H,
    )
    return H, inlier


def verify_graph(graph: MatchGraph, threshold_px: float = 4.0, seed: int = 0,
                 min_inliers: int = MIN_EDGE_INLIERS) -> MatchGraph:
    """Verify every edge; drop edges that fail. Keypoint arrays are shared."""
    out = MatchGraph()
    out.views = dict(graph.views)
    out.keypoints = dict(graph.keypoints)
    for m in graph.match_sets:
        got = verify_homography(m, threshold_px=threshold_px, seed=seed, min_inliers=min_inliers)
        if got is not None:
            out.match_sets.append(got[1])
    return out


# ---------------------------------------------------------------------------
# Track building (union-find)
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}
        self.size: dict = {}

    def find(self, x):
        root = x
        while self.parent.setdefault(root, root) != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size.setdefault(ra, 1) < self.size.setdefault(rb, 1):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] = self.size.get(ra, 1) + self.size.get(rb, 1)


def build_tracks(graph: MatchGraph) -> list[Track]:
    """Connected components of the match relation, one Track per component.

    Components are canonically ordered by their smallest (view_id, keypoint)
    member, so track ids are independent of match-set processing order.
    """
    uf = _UnionFind()
    for m in graph.match_sets:
        for ia, ib in m.pairs:
            uf.union((m.view_a, int(ia)), (m.view_b, int(ib)))
    components: dict = {}
    for node in list(uf.parent):
        components.setdefault(uf.find(node), []).append(node)
    ordered = sorted((sorted(members) for members in components.values()), key=lambda ms: ms[0])
    tracks = []
    for tid, members in enumerate(ordered):
        obs: dict[str, np.ndarray] = {}
        conflicted = False
        for vid, kp in members:
            if vid in obs:
                conflicted = True
            obs[vid] = graph.keypoints[vid][kp]
        tracks.append(Track(track_id=tid, observations=obs, members=members, conflicted=conflicted))
    return tracks


def filter_tracks(tracks: list[Track], min_track_len: int = 2) -> list[Track]:
    """Drop conflicted tracks and tracks shorter than min_track_len."""
    return [t for t in tracks if not t.conflicted and len(t.observations) >= min_track_len]
