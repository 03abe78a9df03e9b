"""Rigid/similarity transforms, the pinhole+Brown camera, and sphere/conic algebra.

Conventions: lengths in millimetres, image coordinates in pixels with pixel
centres at integer coordinates, angles in radians.  A ``RigidTransform``
maps points from its source frame to its target frame, ``x' = R x + t``.
Conic matrices are plain 3x3 ``numpy`` arrays, homogeneous (defined up to
scale); use :func:`normalize_conic` before comparing or evaluating them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .errors import DegenerateConic, NotAnEllipse, PointBehindCamera

_ORTHO_TOL = 1e-9


def _frozen(a: ArrayLike, shape: tuple[int, ...]) -> NDArray[np.float64]:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


def skew(v: ArrayLike) -> NDArray[np.float64]:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(rotvec: ArrayLike) -> NDArray[np.float64]:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def matrix_to_rotvec(R: ArrayLike) -> NDArray[np.float64]:
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def rotation_angle_between(Ra: ArrayLike, Rb: ArrayLike) -> float:
    """Geodesic angle (rad) of ``Ra^T Rb``."""
    d = np.asarray(Ra).T @ np.asarray(Rb)
    c = np.clip((np.trace(d) - 1.0) / 2.0, -1.0, 1.0)
    # arccos is ill-conditioned near 0; use the skew part there
    s = np.linalg.norm([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]]) / 2.0
    return float(math.atan2(s, c))


@dataclass(frozen=True)
class RigidTransform:
    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.linalg.norm(R.T @ R - np.eye(3)) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike, translation: ArrayLike = (0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_matrix(cls, T: ArrayLike) -> RigidTransform:
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> NDArray[np.float64]:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        if "matrix" in d:
            return cls.from_matrix(d["matrix"])
        return cls(d["rotation"], d["translation"])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a . b``: the transform that applies ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    # re-orthonormalise so long chains stay within the invariant tolerance
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class SimilarityTransform:
    rigid: RigidTransform
    scale: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rotation(self) -> NDArray[np.float64]:
        return self.rigid.rotation

    @property
    def translation(self) -> NDArray[np.float64]:
        return self.rigid.translation

    @property
    def matrix(self) -> NDArray[np.float64]:
        T = self.rigid.matrix
        T[:3, :3] *= self.scale
        return T

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rigid.rotation.T) + self.rigid.translation

    def apply_marker(self, m: SphereMarker) -> SphereMarker:
        return SphereMarker(self.apply(m.center), m.radius * self.scale)

    def to_dict(self) -> dict:
        d = self.rigid.to_dict()
        d["scale"] = self.scale
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimilarityTransform:
        return cls(RigidTransform.from_dict(d), d.get("scale", 1.0))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with two radial and two tangential distortion terms.

    The distortion follows the usual Brown-Conrady layout on normalised
    coordinates ``(x, y) = (X/Z, Y/Z)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> NDArray[np.float64]:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> NDArray[np.float64]:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def has_distortion(self) -> bool:
        return any(v != 0.0 for v in (self.k1, self.k2, self.p1, self.p2))

    def scaled(self, factor: float) -> CameraModel:
        """The same lens at a different sensor sampling (e.g. a downscaled image)."""
        return CameraModel(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)),
            self.k1, self.k2, self.p1, self.p2,
        )

    def projection_matrix(self, pose_world_to_cam: RigidTransform) -> NDArray[np.float64]:
        Rt = np.hstack([pose_world_to_cam.rotation, pose_world_to_cam.translation[:, None]])
        return self.K @ Rt

    # --- distortion on normalised coordinates ---------------------------------

    def distort_normalized(self, xy: ArrayLike) -> NDArray[np.float64]:
        xy = np.asarray(xy, dtype=np.float64)
        x, y = xy[..., 0], xy[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def undistort_normalized(self, xy_d: ArrayLike, iterations: int = 50) -> NDArray[np.float64]:
        xy_d = np.asarray(xy_d, dtype=np.float64)
        if not self.has_distortion:
            return xy_d.copy()
        k1, k2, p1, p2 = self.k1, self.k2, self.p1, self.p2
        xy = xy_d.copy()
        for _ in range(iterations):
            x, y = xy[..., 0], xy[..., 1]
            r2 = x * x + y * y
            radial = 1.0 + k1 * r2 + k2 * r2 * r2
            dr = 2.0 * (k1 + 2.0 * k2 * r2)
            f = self.distort_normalized(xy) - xy_d
            j00 = radial + x * x * dr + 2.0 * p1 * y + 6.0 * p2 * x
            j01 = x * y * dr + 2.0 * p1 * x + 2.0 * p2 * y
            j10 = j01
            j11 = radial + y * y * dr + 6.0 * p1 * y + 2.0 * p2 * x
            det = j00 * j11 - j01 * j10
            dx = (j11 * f[..., 0] - j01 * f[..., 1]) / det
            dy = (-j10 * f[..., 0] + j00 * f[..., 1]) / det
            xy = xy - np.stack([dx, dy], axis=-1)
            if np.max(np.abs(f)) < 1e-15:
                break
        return xy

    # --- pixel-space helpers ---------------------------------------------------

    def pixels_to_normalized(self, uv: ArrayLike) -> NDArray[np.float64]:
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def normalized_to_pixels(self, xy: ArrayLike) -> NDArray[np.float64]:
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([xy[..., 0] * self.fx + self.cx, xy[..., 1] * self.fy + self.cy], axis=-1)

    def distort_pixels(self, uv: ArrayLike) -> NDArray[np.float64]:
        """Map ideal (undistorted) pixel coordinates to observed pixel coordinates."""
        return self.normalized_to_pixels(self.distort_normalized(self.pixels_to_normalized(uv)))

    def undistort_pixels(self, uv: ArrayLike) -> NDArray[np.float64]:
        """Map observed pixel coordinates to ideal pinhole pixel coordinates."""
        if not self.has_distortion:
            return np.array(uv, dtype=np.float64)
        return self.normalized_to_pixels(self.undistort_normalized(self.pixels_to_normalized(uv)))

    def backproject(self, uv: ArrayLike) -> NDArray[np.float64]:
        """Unit ray directions in the camera frame for observed pixels."""
        xy = self.undistort_normalized(self.pixels_to_normalized(uv))
        d = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "k1": self.k1, "k2": self.k2, "p1": self.p1, "p2": self.p2,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraModel:
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            k1=float(d.get("k1", 0.0)), k2=float(d.get("k2", 0.0)),
            p1=float(d.get("p1", 0.0)), p2=float(d.get("p2", 0.0)),
        )


def project_point(cam: CameraModel, pose_world_to_cam: RigidTransform, x_world: ArrayLike) -> NDArray[np.float64]:
    """Project world point(s) to observed (distorted) pixel coordinates."""
    Xc = pose_world_to_cam.apply(x_world)
    z = Xc[..., 2]
    if np.any(z <= 1e-9):
        raise PointBehindCamera(f"camera-frame depth {np.min(z):.3g} mm is not positive")
    xy = Xc[..., :2] / z[..., None]
    return cam.normalized_to_pixels(cam.distort_normalized(xy))


@dataclass(frozen=True)
class SphereMarker:
    center: NDArray[np.float64]
    radius: float
    frame: str = field(default="S", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, (3,)))
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    def dual_quadric(self) -> NDArray[np.float64]:
        return sphere_dual_quadric(self)


def sphere_dual_quadric(m: SphereMarker) -> NDArray[np.float64]:
    """Dual quadric ``Q^-1`` of a sphere; tangent planes satisfy ``pi^T Q^-1 pi = 0``."""
    c = m.center
    Q = np.empty((4, 4))
    Q[:3, :3] = np.outer(c, c) - m.radius**2 * np.eye(3)
    Q[:3, 3] = c
    Q[3, :3] = c
    Q[3, 3] = 1.0
    return Q


def normalize_conic(E: ArrayLike) -> NDArray[np.float64]:
    """Scale a conic to unit Frobenius norm with a positive leading 2x2 trace."""
    E = np.asarray(E, dtype=np.float64)
    E = 0.5 * (E + E.T)
    n = np.linalg.norm(E)
    if n == 0.0:
        raise DegenerateConic("zero conic")
    E = E / n
    if E[0, 0] + E[1, 1] < 0:
        E = -E
    return E


def project_sphere(P: ArrayLike, m: SphereMarker) -> NDArray[np.float64]:
    """Image conic of a sphere: ``E = (P Q^-1 P^T)^-1``, symmetrised and normalised."""
    P = np.asarray(P, dtype=np.float64)
    C_dual = P @ sphere_dual_quadric(m) @ P.T
    # Judge singularity with the left 3x3 block factored out, where the
    # eigenvalues are (-r^2, -r^2, d^2 - r^2) and pixel scaling does not
    # masquerade as degeneracy.
    M_inv = np.linalg.inv(P[:, :3])
    A = M_inv @ C_dual @ M_inv.T
    A = 0.5 * (A + A.T)
    w = np.abs(np.linalg.eigvalsh(A))
    if w.max() == 0.0 or w.min() < 1e-12 * w.max():
        raise DegenerateConic("P Q^-1 P^T is singular (camera centre on the sphere hull)")
    return normalize_conic(M_inv.T @ np.linalg.inv(A) @ M_inv)


def sphere_cone(center_cam: ArrayLike, radius: float) -> NDArray[np.float64]:
    """Conic of a sphere's silhouette in normalised image coordinates.

    Closed form of the inverse dual projection for ``P = [I | 0]``:
    ``(|X|^2 - r^2) I - X X^T`` (unnormalised).
    """
    X = np.asarray(center_cam, dtype=np.float64)
    return (X @ X - radius * radius) * np.eye(3) - np.outer(X, X)


def conic_point_residual(E: ArrayLike, x: ArrayLike) -> NDArray[np.float64] | float:
    """Normalised bilinear form ``x^T E x`` for pixel point(s) ``x``."""
    En = normalize_conic(E)
    x = np.asarray(x, dtype=np.float64)
    xh = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    r = np.einsum("...i,ij,...j->...", xh, En, xh)
    return float(r) if r.ndim == 0 else r


def sphere_center_from_conic(E: ArrayLike, cam: CameraModel, radius: float) -> NDArray[np.float64]:
    """Recover the camera-frame centre of a sphere of known radius from its image conic.

    The silhouette cone of a sphere is circular: its axis is the eigenvector
    of ``K^T E K`` with the odd-signed eigenvalue, and the half-angle ``a``
    obeys ``sin a = r / d``.
    """
    C = cam.K.T @ np.asarray(E, dtype=np.float64) @ cam.K
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    if w[0] < 0 < w[1]:
        odd, others = 0, (1, 2)
    elif w[1] < 0 < w[2]:
        odd, others = 2, (0, 1)
    else:
        raise NotAnEllipse("cone signature is not (+,+,-)")
    axis = V[:, odd]
    if axis[2] < 0:
        axis = -axis
    lam_axis = w[odd]
    lam_perp = 0.5 * (w[others[0]] + w[others[1]])
    # in the axis-aligned frame the cone is  lam_perp (u^2 + v^2) + lam_axis w^2 = 0
    tan2 = -lam_axis / lam_perp
    sin_a = math.sqrt(tan2 / (1.0 + tan2))
    return axis * (radius / sin_a)


@dataclass(frozen=True)
class Ellipse:
    """Centre, semi-axes ``a >= b > 0`` and orientation of the major axis in ``[0, pi)``."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        a, b, th = float(self.a), float(self.b), float(self.theta)
        if not (a > 0 and b > 0):
            raise ValueError("semi-axes must be positive")
        if b > a:
            a, b = b, a
            th += math.pi / 2
        th = math.fmod(th, math.pi)
        if th < 0:
            th += math.pi
        if th >= math.pi:
            th = 0.0
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "theta", th)

    @property
    def center(self) -> NDArray[np.float64]:
        return np.array([self.cx, self.cy])

    def point_at(self, t: ArrayLike) -> NDArray[np.float64]:
        """Points at eccentric anomaly ``t``."""
        t = np.asarray(t, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = self.a * np.cos(t)
        v = self.b * np.sin(t)
        return np.stack([self.cx + c * u - s * v, self.cy + s * u + c * v], axis=-1)

    def to_conic(self) -> NDArray[np.float64]:
        return ellipse_to_conic(self)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "a": self.a, "b": self.b, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> Ellipse:
        return cls(d["cx"], d["cy"], d["a"], d["b"], d["theta"])


def ellipse_to_conic(e: Ellipse) -> NDArray[np.float64]:
    c, s = math.cos(e.theta), math.sin(e.theta)
    Rm = np.array([[c, -s], [s, c]])
    M = Rm @ np.diag([1.0 / e.a**2, 1.0 / e.b**2]) @ Rm.T
    x0 = e.center
    E = np.empty((3, 3))
    E[:2, :2] = M
    E[:2, 2] = E[2, :2] = -M @ x0
    E[2, 2] = x0 @ M @ x0 - 1.0
    return normalize_conic(E)


def conic_to_ellipse(E: ArrayLike) -> Ellipse:
    E = np.asarray(E, dtype=np.float64)
    E = 0.5 * (E + E.T)
    n = np.linalg.norm(E)
    if n == 0 or not np.all(np.isfinite(E)):
        raise NotAnEllipse("zero or non-finite conic")
    E = E / n
    M = E[:2, :2]
    w2 = np.linalg.eigvalsh(M)
    if w2[0] * w2[1] <= 0 or min(abs(w2)) < 1e-13 * max(abs(w2)):
        raise NotAnEllipse("leading 2x2 block is not definite")
    if M[0, 0] < 0:
        E, M = -E, -M
    x0 = -np.linalg.solve(M, E[:2, 2])
    g = E[2, 2] + E[:2, 2] @ x0
    if g >= 0:
        raise NotAnEllipse("imaginary or point conic")
    w, V = np.linalg.eigh(M)
    a = math.sqrt(-g / w[0])
    b = math.sqrt(-g / w[1])
    major = V[:, 0]
    theta = math.atan2(major[1], major[0])
    return Ellipse(x0[0], x0[1], a, b, theta)


def fit_conic_direct(points: ArrayLike) -> NDArray[np.float64]:
    """Direct least-squares ellipse fit (Halir-Flusser form of Fitzgibbon's method).

    Coordinates are centred and scaled before fitting; the returned conic is
    expressed in the original pixel frame.
    """
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 5:
        raise ValueError("a conic needs at least 5 points")
    mu = p.mean(axis=0)
    sc = math.sqrt(2.0) / max(np.sqrt(((p - mu) ** 2).sum(axis=1)).mean(), 1e-300)
    x = (p[:, 0] - mu[0]) * sc
    y = (p[:, 1] - mu[1]) * sc
    D1 = np.stack([x * x, x * y, y * y], axis=1)
    D2 = np.stack([x, y, np.ones_like(x)], axis=1)
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    T = -np.linalg.lstsq(S3, S2.T, rcond=None)[0]
    Mred = S1 + S2 @ T
    Mred = np.array([Mred[2] / 2.0, -Mred[1], Mred[0] / 2.0])
    w, V = np.linalg.eig(Mred)
    V = np.real(V)
    cond = 4 * V[0] * V[2] - V[1] ** 2
    ok = np.where(cond > 0)[0]
    if len(ok) == 0:
        raise NotAnEllipse("no elliptical solution")
    a1 = V[:, ok[np.argmin(np.abs(np.real(w[ok])))]]
    A, B, C = a1
    Dd, Ee, F = T @ a1
    En = np.array([[A, B / 2, Dd / 2], [B / 2, C, Ee / 2], [Dd / 2, Ee / 2, F]])
    # undo the normalisation x_n = H x
    H = np.array([[sc, 0.0, -sc * mu[0]], [0.0, sc, -sc * mu[1]], [0.0, 0.0, 1.0]])
    return normalize_conic(H.T @ En @ H)


def sampson_distance(E: ArrayLike, points: ArrayLike) -> NDArray[np.float64]:
    """First-order geometric distance of points to a conic (pixels)."""
    E = np.asarray(E, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    xh = np.concatenate([p, np.ones((len(p), 1))], axis=1)
    Ex = xh @ E
    alg = np.einsum("ij,ij->i", Ex, xh)
    grad = 2.0 * Ex[:, :2]
    return np.abs(alg) / np.maximum(np.linalg.norm(grad, axis=1), 1e-300)


def _robust_root(r0: NDArray, z0: NDArray, z1: NDArray, g: NDArray, iters: int = 160) -> NDArray:
    n0 = r0 * z0
    s0 = z1 - 1.0
    s1 = np.where(g < 0, 0.0, np.hypot(n0, z1) - 1.0)
    s = 0.5 * (s0 + s1)
    for _ in range(iters):
        s = 0.5 * (s0 + s1)
        ratio0 = n0 / (s + r0)
        ratio1 = z1 / (s + 1.0)
        gs = ratio0 * ratio0 + ratio1 * ratio1 - 1.0
        pos = gs > 0
        s0 = np.where(pos, s, s0)
        s1 = np.where(pos, s1, s)
        if np.all(s1 - s0 <= 1e-15 * np.maximum(1.0, np.abs(s))):
            break
    return 0.5 * (s0 + s1)


def point_ellipse_distance(e: Ellipse, points: ArrayLike) -> NDArray[np.float64]:
    """Exact Euclidean distance from points to the ellipse curve.

    Uses Eberly's bisection on the nearest-point equation; converges to
    machine precision, well below 1e-9 px.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - e.center
    c, s = math.cos(e.theta), math.sin(e.theta)
    y0 = np.abs(c * p[:, 0] + s * p[:, 1])
    y1 = np.abs(-s * p[:, 0] + c * p[:, 1])
    e0, e1 = e.a, e.b
    out = np.empty(len(p))

    both = (y1 > 0) & (y0 > 0)
    if np.any(both):
        z0 = y0[both] / e0
        z1 = y1[both] / e1
        g = z0 * z0 + z1 * z1 - 1.0
        r0 = (e0 / e1) ** 2
        sbar = _robust_root(r0, z0, z1, g)
        x0 = r0 * y0[both] / (sbar + r0)
        x1 = y1[both] / (sbar + 1.0)
        d = np.hypot(x0 - y0[both], x1 - y1[both])
        out[both] = np.where(g == 0, 0.0, d)

    on_minor = (y1 > 0) & (y0 == 0)
    out[on_minor] = np.abs(y1[on_minor] - e1)

    on_major = y1 == 0
    if np.any(on_major):
        yy = y0[on_major]
        denom = e0 * e0 - e1 * e1
        inside = yy < denom / e0 if denom > 0 else np.zeros_like(yy, dtype=bool)
        xde0 = np.where(inside, e0 * yy / max(denom, 1e-300), 0.0)
        x0 = e0 * xde0
        x1 = e1 * np.sqrt(np.clip(1.0 - xde0 * xde0, 0.0, None))
        out[on_major] = np.where(inside, np.hypot(x0 - yy, x1), np.abs(yy - e0))
    return out


def ray_line_distance(origins: ArrayLike, dirs: ArrayLike, point: ArrayLike) -> NDArray[np.float64]:
    """Distance from ``point`` to the lines ``origin + t dir`` (dirs unit length)."""
    v = np.asarray(point, dtype=np.float64) - np.asarray(origins, dtype=np.float64)
    return np.linalg.norm(np.cross(v, np.asarray(dirs, dtype=np.float64)), axis=-1)

