"""Camera model for rotation-only (pan-tilt-zoom) rigs.

Imaging chain, applied in this fixed order:

1. rigid transform into the camera frame:  v = R (X - C)
2. perspective divide:                     (x', y') = (v_x / v_z, v_y / v_z)
3. lens distortion (Brown, two radial + two tangential terms):
       x'' = x'(1 + k1 r^2 + k2 r^4) + 2 p1 x' y' + p2 (r^2 + 2 x'^2)
       y'' = y'(1 + k1 r^2 + k2 r^4) + p1 (r^2 + 2 y'^2) + 2 p2 x' y'
   with r^2 = x'^2 + y'^2
4. intrinsics:                             pixel = (f x'' + cx, f y'' + cy)

Frames and conventions:

- World frame: right-handed; the "local" frame of a reconstruction places the
  shared projection center C at the origin.
- Camera frame: x right, y down, z forward (along the optical axis).
- Rotations are unit quaternions (wxyz) mapping world vectors into the camera
  frame; see rotation.py for tangent-update conventions.
- Pixels: origin at the top-left corner, u right, v down. The principal point
  sits at the image center; pixels are square and skew-free.
- A scene feature is represented by a ray landmark: a unit 3-vector in the
  world frame, pointing from C toward the feature. Projection of a ray is
  invariant to positive rescaling of the vector.

Points whose camera-frame depth is <= EPS_Z are behind the camera (or too
close to the principal plane to divide safely); projection functions report
them through a boolean mask instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotation import (
    IDENTITY_QUAT,
    matrix_to_quat,
    nearest_rotation,
    quat_conjugate,
    quat_normalize,
    quat_to_matrix,
)

# Camera-frame depth below which a point counts as behind the camera.
EPS_Z = 1e-6

# Sanity boxes for distortion coefficients; realistic lenses live well inside.
K_RADIAL_MAX = 1.0
P_TANGENTIAL_MAX = 0.1

UNIT_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (non-finite values, broken invariants)."""


@dataclass(frozen=True)
class Intrinsics:
    """Per-view internal parameters; cx, cy are pinned to the image center."""

    f: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def distortion(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.p1, self.p2])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])

    def validate(self) -> None:
        if not (self.f > 0 and self.width > 0 and self.height > 0):
            raise GeometryError(f"focal/size must be positive, got f={self.f}")
        coeffs = self.distortion
        if not np.all(np.isfinite(coeffs)) or not np.isfinite(self.f):
            raise GeometryError("non-finite intrinsics")
        if abs(self.k1) > K_RADIAL_MAX or abs(self.k2) > K_RADIAL_MAX:
            raise GeometryError(f"radial coefficients out of sanity bounds: {self.k1}, {self.k2}")
        if abs(self.p1) > P_TANGENTIAL_MAX or abs(self.p2) > P_TANGENTIAL_MAX:
            raise GeometryError(f"tangential coefficients out of sanity bounds: {self.p1}, {self.p2}")

    def replace(self, **kw) -> "Intrinsics":
        d = dict(f=self.f, width=self.width, height=self.height, k1=self.k1, k2=self.k2, p1=self.p1, p2=self.p2)
        d.update(kw)
        return Intrinsics(**d)


@dataclass(frozen=True)
class Pose:
    """Orientation (world->camera unit quaternion) plus projection center."""

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def validate(self) -> None:
        if abs(np.linalg.norm(self.q) - 1.0) > UNIT_TOL:
            raise GeometryError(f"quaternion norm {np.linalg.norm(self.q)} not unit")
        if not np.all(np.isfinite(self.center)):
            raise GeometryError("non-finite center")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)


@dataclass(frozen=True)
class ViewParams:
    intrinsics: Intrinsics
    pose: Pose

    def validate(self) -> None:
        self.intrinsics.validate()
        self.pose.validate()


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) map: apply(X) = R X + t. Used world->local in georeferencing."""

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def validate(self) -> None:
        if abs(np.linalg.norm(self.q) - 1.0) > UNIT_TOL:
            raise GeometryError("transform quaternion not unit")
        if not np.all(np.isfinite(self.t)):
            raise GeometryError("non-finite translation")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ quat_to_matrix(self.q).T + self.t

    def inverse(self) -> "RigidTransform":
        qi = quat_conjugate(self.q)
        return RigidTransform(q=qi, t=-(quat_to_matrix(qi) @ self.t))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self of other: apply(X) = self.apply(other.apply(X))."""
        from .rotation import quat_multiply

        q = quat_normalize(quat_multiply(self.q, other.q))
        t = quat_to_matrix(self.q) @ other.t + self.t
        return RigidTransform(q=q, t=t)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)


# ---------------------------------------------------------------------------
# Distortion
# ---------------------------------------------------------------------------


def distort(xn: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Apply lens distortion to normalized coordinates. Shape (2,) or (n, 2)."""
    xd, _, _ = distort_with_jacobians(np.atleast_2d(xn), intr.distortion, want_jac=False)
    return xd[0] if np.asarray(xn).ndim == 1 else xd


def distort_with_jacobians(xn: np.ndarray, coeffs: np.ndarray, want_jac: bool = True):
    """Distortion with analytic derivatives.

    Returns (xd (n,2), J_x (n,2,2), J_coeffs (n,2,4)); Jacobians are None when
    want_jac is false.
    """
    xn = np.asarray(xn, dtype=float)
    x, y = xn[:, 0], xn[:, 1]
    k1, k2, p1, p2 = coeffs
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = np.empty_like(xn)
    xd[:, 0] = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    xd[:, 1] = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    if not want_jac:
        return xd, None, None
    dr = k1 + 2 * k2 * r2  # d(radial)/d(r2)
    jx = np.empty((len(xn), 2, 2))
    jx[:, 0, 0] = radial + 2 * x * x * dr + 2 * p1 * y + 6 * p2 * x
    jx[:, 0, 1] = 2 * x * y * dr + 2 * p1 * x + 2 * p2 * y
    jx[:, 1, 0] = 2 * x * y * dr + 2 * p1 * x + 2 * p2 * y
    jx[:, 1, 1] = radial + 2 * y * y * dr + 6 * p1 * y + 2 * p2 * x
    jc = np.empty((len(xn), 2, 4))
    jc[:, 0, 0] = x * r2
    jc[:, 0, 1] = x * r2 * r2
    jc[:, 0, 2] = 2 * x * y
    jc[:, 0, 3] = r2 + 2 * x * x
    jc[:, 1, 0] = y * r2
    jc[:, 1, 1] = y * r2 * r2
    jc[:, 1, 2] = r2 + 2 * y * y
    jc[:, 1, 3] = 2 * x * y
    return xd, jx, jc


UNDISTORT_MAX_ITER = 20
UNDISTORT_TOL = 1e-12


def undistort(xd: np.ndarray, intr: Intrinsics):
    """Invert the distortion polynomial by fixed-point iteration.

    x_{k+1} = (xd - tangential(x_k)) / radial(x_k), starting from xd. Returns
    (xn, converged mask); callers decide whether to drop non-converged points.
    Accepts (2,) or (n, 2).
    """
    single = np.asarray(xd).ndim == 1
    pts = np.atleast_2d(np.asarray(xd, dtype=float))
    k1, k2, p1, p2 = intr.k1, intr.k2, intr.p1, intr.p2
    x = pts[:, 0].copy()
    y = pts[:, 1].copy()
    converged = np.zeros(len(pts), dtype=bool)
    for _ in range(UNDISTORT_MAX_ITER):
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        tx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        ty = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        xn = (pts[:, 0] - tx) / radial
        yn = (pts[:, 1] - ty) / radial
        step = np.maximum(np.abs(xn - x), np.abs(yn - y))
        x, y = xn, yn
        converged = step < UNDISTORT_TOL
        if converged.all():
            break
    out = np.stack([x, y], axis=1)
    if single:
        return out[0], bool(converged[0])
    return out, converged


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def _camera_frame_to_pixel(v: np.ndarray, f: float, coeffs: np.ndarray, cx: float, cy: float,
                           want_jac: bool = False):
    """Steps 2-4 of the chain on camera-frame vectors v (n,3).

    Returns (pix (n,2), front (n,), jac dict or None). Behind-camera rows get
    their depth clamped so outputs stay finite; the mask is authoritative.
    """
    v = np.asarray(v, dtype=float)
    z = v[:, 2]
    front = z > EPS_Z
    zs = np.where(front, z, EPS_Z)
    xn = np.stack([v[:, 0] / zs, v[:, 1] / zs], axis=1)
    xd, jxx, jc = distort_with_jacobians(xn, coeffs, want_jac=want_jac)
    pix = np.empty_like(xd)
    pix[:, 0] = f * xd[:, 0] + cx
    pix[:, 1] = f * xd[:, 1] + cy
    if not want_jac:
        return pix, front, None
    # d(xn)/d(v): rows [1/z, 0, -x/z^2], [0, 1/z, -y/z^2]
    n = len(v)
    jnv = np.zeros((n, 2, 3))
    inv_z = 1.0 / zs
    jnv[:, 0, 0] = inv_z
    jnv[:, 1, 1] = inv_z
    jnv[:, 0, 2] = -v[:, 0] * inv_z * inv_z
    jnv[:, 1, 2] = -v[:, 1] * inv_z * inv_z
    j_pix_v = f * np.einsum("nij,njk->nik", jxx, jnv)
    jac = {
        "v": j_pix_v,            # (n,2,3)
        "f": xd.copy(),          # (n,2)  d(pix)/d(f)
        "dist": f * jc,          # (n,2,4)
    }
    return pix, front, jac


def project_points(view: ViewParams, points: np.ndarray):
    """Project world point(s) through the full chain.

    Returns (pixels, in_front). Accepts (3,) -> ((2,), bool) or (n,3).
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite input point")
    R = view.pose.rotation_matrix
    v = (pts - view.pose.center) @ R.T
    pix, front, _ = _camera_frame_to_pixel(
        v, view.intrinsics.f, view.intrinsics.distortion, view.intrinsics.cx, view.intrinsics.cy
    )
    if single:
        return pix[0], bool(front[0])
    return pix, front


def project_rays(view: ViewParams, rays: np.ndarray):
    """Project ray landmark(s); identical to project_points at X = C + ray."""
    r = np.asarray(rays, dtype=float)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    if not np.all(np.isfinite(r)):
        raise GeometryError("non-finite ray")
    R = view.pose.rotation_matrix
    v = r @ R.T
    pix, front, _ = _camera_frame_to_pixel(
        v, view.intrinsics.f, view.intrinsics.distortion, view.intrinsics.cx, view.intrinsics.cy
    )
    if single:
        return pix[0], bool(front[0])
    return pix, front


def pixel_to_ray(view: ViewParams, pixels: np.ndarray):
    """Invert the imaging chain: pixel -> unit ray in the world frame.

    Returns (rays, ok). ok is False where undistortion failed to converge.
    Accepts (2,) -> ((3,), bool) or (n,2).
    """
    pix = np.asarray(pixels, dtype=float)
    single = pix.ndim == 1
    pix = np.atleast_2d(pix)
    if not np.all(np.isfinite(pix)):
        raise GeometryError("non-finite pixel")
    intr = view.intrinsics
    xd = np.stack([(pix[:, 0] - intr.cx) / intr.f, (pix[:, 1] - intr.cy) / intr.f], axis=1)
    xn, ok = undistort(xd, intr)
    ok = np.atleast_1d(ok)
    dirs_cam = np.concatenate([xn, np.ones((len(xn), 1))], axis=1)
    R = view.pose.rotation_matrix
    dirs = dirs_cam @ R  # R^-1 = R^T applied to each row
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if single:
        return dirs[0], bool(ok[0])
    return dirs, ok


def project_rays_with_jacobians(q: np.ndarray, f: float, coeffs: np.ndarray,
                                cx: float, cy: float, rays: np.ndarray,
                                want_jac: bool = True):
    """Vectorized ray projection with derivatives for the solver.

    Returns (pix (n,2), front (n,), jac) where jac holds:
      'q'    (n,2,3)  w.r.t. the right-multiplied rotation tangent
      'f'    (n,2)
      'dist' (n,2,4)
      'ray'  (n,2,3)  w.r.t. the ray vector components
    """
    from .rotation import skew

    R = quat_to_matrix(q)
    rays = np.atleast_2d(np.asarray(rays, dtype=float))
    v = rays @ R.T
    pix, front, jac_core = _camera_frame_to_pixel(v, f, coeffs, cx, cy, want_jac=want_jac)
    if not want_jac:
        return pix, front, None
    # v(delta) = R (I + [delta]x) r  =>  dv/d(delta) = -R [r]x
    dv_dq = -np.einsum("ab,nbc->nac", R, skew(rays))
    jac = {
        "q": np.einsum("nij,njk->nik", jac_core["v"], dv_dq),
        "f": jac_core["f"],
        "dist": jac_core["dist"],
        "ray": np.einsum("nij,jk->nik", jac_core["v"], R),
        "v": jac_core["v"],
    }
    return pix, front, jac


# ---------------------------------------------------------------------------
# Rotation from homography
# ---------------------------------------------------------------------------


def rotation_from_homography(k_i: Intrinsics, h_ij: np.ndarray, k_j: Intrinsics) -> np.ndarray:
    """Relative rotation of a pure-rotation pair from their homography.

    h_ij maps homogeneous pixels of view j to view i. The calibrated matrix
    M = K_i^-1 H K_j equals a rotation up to scale; the returned unit
    quaternion is its nearest rotation (polar factor, det forced to +1).
    """
    h = np.asarray(h_ij, dtype=float)
    if h.shape != (3, 3) or not np.all(np.isfinite(h)):
        raise GeometryError("homography must be a finite 3x3 matrix")
    sv = np.linalg.svd(h, compute_uv=False)
    if sv[-1] < 1e-9 * sv[0]:
        raise GeometryError("rank-deficient homography")
    m = np.linalg.inv(k_i.matrix) @ h @ k_j.matrix
    # fix the projective sign so m ~ +s R (det(sR) = s^3 > 0)
    det = np.linalg.det(m)
    if det < 0:
        m = -m
    elif det == 0:
        raise GeometryError("degenerate calibrated homography")
    return matrix_to_quat(nearest_rotation(m))


def normalize_rays(rays: np.ndarray) -> np.ndarray:
    """Renormalize ray landmark vectors to unit length."""
    rays = np.asarray(rays, dtype=float)
    if rays.ndim == 1:
        n = np.linalg.norm(rays)
        if n < 1e-15:
            raise GeometryError("zero-norm ray")
        return rays / n
    norms = np.linalg.norm(rays, axis=1, keepdims=True)
    if np.any(norms < 1e-15):
        raise GeometryError("zero-norm ray")
    return rays / norms
