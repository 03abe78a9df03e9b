"""Scene registration from sphere outlines seen in posed images.

The unknown is the similarity ``T_S^W`` taking mesh-frame marker centres into
the world frame of the cameras: ``X_W = s R c + t`` with radius ``s r``.
It is initialised by PnP on sphere-centre image points with an exhaustive
search over correspondences, then refined by Levenberg-Marquardt on the
normalised point-on-conic residuals of every outline point.

Residuals are evaluated in normalised camera coordinates ``K^-1 x`` of the
undistorted outline points.  There the silhouette conic of a sphere with
camera-frame centre ``X`` has the closed form ``(|X|^2 - rho^2) I - X X^T``,
which keeps both the conic and its derivatives well conditioned.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .detect import EllipseDetection
from .errors import (
    DegenerateConic,
    MissingControlDetections,
    NoConsistentMatch,
    NotAnEllipse,
    NotConverged,
    PnpDegenerate,
    SingularNormalEquations,
)
from .geometry import (
    CameraModel,
    RigidTransform,
    SimilarityTransform,
    SphereMarker,
    compose,
    conic_to_ellipse,
    fit_conic_direct,
    point_ellipse_distance,
    project_sphere,
    ray_line_distance,
    rotvec_to_matrix,
    skew,
    sphere_center_from_conic,
)

log = logging.getLogger(__name__)

POSE_SOURCES = ("robot", "sfm-low", "sfm-mid", "sfm-high", "synthetic")


@dataclass(frozen=True)
class PosedImage:
    image_id: int
    camera: CameraModel
    pose_world_to_cam: RigidTransform
    detections: tuple[EllipseDetection, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        ids = [d.marker_id for d in self.detections if d.marker_id is not None]
        if len(ids) != len(set(ids)):
            raise ValueError(f"image {self.image_id} has several detections of one marker")

    def detection_of(self, marker_id: int) -> EllipseDetection | None:
        for d in self.detections:
            if d.marker_id == marker_id:
                return d
        return None


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    initial_lambda: float = 1e-3
    huber_delta: float | None = None  # residual units; None = plain least squares
    strict: bool = False  # raise NotConverged instead of flagging it

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RegistrationProblem:
    images: tuple[PosedImage, ...]
    markers: dict[int, SphereMarker]  # centres in S
    estimate_scale: bool = False
    registration_ids: tuple[int, ...] | None = None  # None: every marker takes part

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if len(self.images) < 1:
            raise ValueError("need at least one posed image")
        if len(self.markers) < 4:
            raise ValueError("need at least four markers")
        if self.registration_ids is not None:
            object.__setattr__(self, "registration_ids", tuple(self.registration_ids))
            missing = set(self.registration_ids) - set(self.markers)
            if missing:
                raise ValueError(f"unknown registration marker ids {sorted(missing)}")

    @property
    def active_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.markers)) if self.registration_ids is None else self.registration_ids


@dataclass(frozen=True)
class RegistrationSolution:
    transform: SimilarityTransform
    final_cost: float
    per_image_reproj_error: dict[int, float]
    iterations: int
    converged: bool
    gradient_norm: float = 0.0
    cost_trace: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "final_cost": self.final_cost,
            "per_image_reproj_error": {str(k): v for k, v in sorted(self.per_image_reproj_error.items())},
            "iterations": self.iterations,
            "converged": self.converged,
            "gradient_norm": self.gradient_norm,
            "cost_trace": list(self.cost_trace),
        }


@dataclass(frozen=True)
class EvaluationReport:
    mean_radial_error: float  # mm
    mean_reproj_error: float  # px
    per_marker: dict[int, dict[str, float]]
    pose_source: str = "synthetic"
    n_radial_samples: int = 0
    n_reproj_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "pose_source": self.pose_source,
            "mean_radial_error_mm": self.mean_radial_error,
            "mean_reproj_error_px": self.mean_reproj_error,
            "n_radial_samples": self.n_radial_samples,
            "n_reproj_samples": self.n_reproj_samples,
            "per_marker": {str(k): v for k, v in sorted(self.per_marker.items())},
        }

    def table_row(self) -> str:
        return f"{self.pose_source:<10} | radial {self.mean_radial_error:.4g} mm | reprojection {self.mean_reproj_error:.4g} px"


@dataclass(frozen=True)
class MatchResult:
    correspondence: dict[int, int | None]  # detection index -> marker id
    camera_pose: RigidTransform  # S -> camera, metric
    transform: SimilarityTransform  # initial T_S^W
    score: float  # mean px distance of detected to nearest projected centre


# --- forward kinematics ---------------------------------------------------------------------

def poses_from_forward_kinematics(t_ee_b: list[RigidTransform], t_c_ee: RigidTransform) -> list[RigidTransform]:
    """World(base)-to-camera poses from end-effector poses and the hand-eye transform."""
    return [compose(t, t_c_ee).inverse() for t in t_ee_b]


# --- outline preparation ----------------------------------------------------------------------

def undistorted_outline(cam: CameraModel, det: EllipseDetection) -> NDArray[np.float64]:
    return cam.undistort_pixels(det.outline)


def normalized_outline(cam: CameraModel, det: EllipseDetection) -> NDArray[np.float64]:
    xy = cam.pixels_to_normalized(np.asarray(det.outline, dtype=np.float64))
    return cam.undistort_normalized(xy)


def detection_conic(cam: CameraModel, det: EllipseDetection) -> NDArray[np.float64]:
    """Pixel conic of a detection on the undistorted image plane."""
    if not cam.has_distortion:
        return det.ellipse.to_conic()
    return fit_conic_direct(undistorted_outline(cam, det))


def sphere_center_image_point(cam: CameraModel, det: EllipseDetection) -> NDArray[np.float64]:
    """Undistorted pixel where the sphere centre projects (not the ellipse centre)."""
    X = sphere_center_from_conic(detection_conic(cam, det), cam, 1.0)
    return cam.K[:2, :2] @ (X[:2] / X[2]) + cam.K[:2, 2]


# --- PnP ------------------------------------------------------------------------------------------

def _check_not_collinear(pts: NDArray, what: str) -> None:
    c = pts - pts.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] == 0 or s[1] < 1e-9 * s[0]:
        raise PnpDegenerate(f"{what} points are collinear")


def pnp_pose(
    points2d: ArrayLike, points3d: ArrayLike, cam: CameraModel, refine: bool = True
) -> RigidTransform:
    """World-to-camera pose from undistorted pixel / 3D point correspondences."""
    p2 = np.ascontiguousarray(points2d, dtype=np.float64).reshape(-1, 2)
    p3 = np.ascontiguousarray(points3d, dtype=np.float64).reshape(-1, 3)
    if len(p2) != len(p3) or len(p2) < 4:
        raise ValueError("PnP needs at least four matching 2D/3D points")
    _check_not_collinear(p3, "3D")
    _check_not_collinear(p2, "image")
    K = cam.K
    ok, rvec, tvec = cv2.solvePnP(p3, p2, K, None, flags=cv2.SOLVEPNP_SQPNP)
    if not ok:
        raise PnpDegenerate("PnP solver found no pose")
    if refine:
        rvec, tvec = cv2.solvePnPRefineLM(p3, p2, K, None, rvec, tvec,
                                          (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_COUNT, 50, 1e-15))
    return RigidTransform(rotvec_to_matrix(rvec.ravel()), tvec.ravel())


def _project_centers(cam: CameraModel, pose: RigidTransform, centers: NDArray) -> NDArray:
    Xc = pose.apply(centers)
    z = np.where(Xc[:, 2] > 1e-9, Xc[:, 2], np.nan)
    return (Xc[:, :2] / z[:, None]) * [cam.fx, cam.fy] + [cam.cx, cam.cy]


def pnp_reprojection_rms(points2d: ArrayLike, points3d: ArrayLike, cam: CameraModel, pose: RigidTransform) -> float:
    uv = _project_centers(cam, pose, np.asarray(points3d, dtype=np.float64))
    return float(np.sqrt(np.mean(np.sum((uv - np.asarray(points2d)) ** 2, axis=1))))


# --- correspondence search -------------------------------------------------------------------

def _mutual_nearest(dist: NDArray, gate: float) -> dict[int, int]:
    """Greedy one-to-one pairing by increasing distance, keeping pairs under ``gate``."""
    out: dict[int, int] = {}
    used_c: set[int] = set()
    order = np.argsort(dist, axis=None, kind="stable")
    for flat in order:
        r, c = np.unravel_index(flat, dist.shape)
        if not dist[r, c] <= gate:
            break
        if r in out or c in used_c:
            continue
        out[int(r)] = int(c)
        used_c.add(int(c))
    return out


def _similarity_from_camera(world_pose: RigidTransform, cam_pose: RigidTransform, scale: float) -> SimilarityTransform:
    # world pose in SfM units, cam_pose metric: R_i(s R c + t) + t_i = s (R_p c + t_p)
    Ri, ti = world_pose.rotation, world_pose.translation
    R = Ri.T @ cam_pose.rotation
    t = Ri.T @ (scale * cam_pose.translation - ti)
    return SimilarityTransform(RigidTransform(R, t), scale)


def match_markers(
    image: PosedImage,
    markers: dict[int, SphereMarker],
    cam: CameraModel | None = None,
    scale: float = 1.0,
    accept_px: float = 2.0,
    reject_px: float = 50.0,
    distance_tolerance: tuple[float, float] = (0.15, 15.0),
) -> MatchResult:
    """Exhaustive PnP over 4-point correspondences between detections and markers.

    Every ordered assignment of four detections to four markers that survives a
    pairwise-distance check (camera-frame centres recovered from the cone
    half-angle must be as far apart as the markers are) is solved by PnP and
    scored by the mean distance from every detected sphere centre to its
    nearest projected marker centre.  The search stops at the first score below
    ``accept_px``; otherwise the lowest score wins, ties going to the
    lexicographically first assignment.
    """
    cam = cam or image.camera
    dets = image.detections
    D = len(dets)
    if D < 4:
        raise ValueError("matching needs at least four detections")
    ids = sorted(markers)
    C = np.array([markers[k].center for k in ids])
    radii = np.array([markers[k].radius for k in ids])
    M = len(ids)

    uv = np.array([sphere_center_image_point(cam, d) for d in dets])
    # canonical detection order makes the search independent of input order
    canon = np.lexsort((uv[:, 1], uv[:, 0]))
    uv_c = uv[canon]
    conics = [detection_conic(cam, dets[k]) for k in canon]
    r_ref = float(np.median(radii))
    Xd = np.array([sphere_center_from_conic(E, cam, r_ref) for E in conics])

    dm = np.linalg.norm(C[:, None] - C[None], axis=2)
    dd = np.linalg.norm(Xd[:, None] - Xd[None], axis=2)
    rel, absol = distance_tolerance

    def consistent(da, db, ma, mb):
        return abs(dd[da, db] - dm[ma, mb]) <= rel * dm[ma, mb] + absol

    quads = list(itertools.combinations(range(D), 4))
    # well-spread quadruples first: a larger image footprint constrains PnP better
    def spread(q):
        p = uv_c[list(q)]
        return -np.linalg.svd(p - p.mean(axis=0), compute_uv=False).prod()

    quads.sort(key=lambda q: (spread(q), q))

    best = (math.inf, None, None)
    n_solved = 0
    for q in quads:
        q = list(q)
        for m0 in range(M):
            for m1 in range(M):
                if m1 == m0 or not consistent(q[0], q[1], m0, m1):
                    continue
                for m2 in range(M):
                    if m2 in (m0, m1) or not (consistent(q[0], q[2], m0, m2) and consistent(q[1], q[2], m1, m2)):
                        continue
                    for m3 in range(M):
                        if m3 in (m0, m1, m2):
                            continue
                        if not (consistent(q[0], q[3], m0, m3) and consistent(q[1], q[3], m1, m3)
                                and consistent(q[2], q[3], m2, m3)):
                            continue
                        assign = [m0, m1, m2, m3]
                        try:
                            pose = pnp_pose(uv_c[q], C[assign], cam, refine=False)
                        except PnpDegenerate:
                            continue
                        n_solved += 1
                        proj = _project_centers(cam, pose, C)
                        if np.isnan(proj).any():
                            continue
                        dist = np.linalg.norm(uv_c[:, None] - proj[None], axis=2)
                        score = float(dist.min(axis=1).mean())
                        if score < best[0]:
                            best = (score, pose, (tuple(q), tuple(assign)))
                        if score < accept_px:
                            break
                    if best[0] < accept_px:
                        break
                if best[0] < accept_px:
                    break
            if best[0] < accept_px:
                break
        if best[0] < accept_px:
            break
    log.debug("matching: %d PnP solves, best score %.3g px", n_solved, best[0])
    if best[1] is None or not best[0] <= reject_px:
        raise NoConsistentMatch(f"best correspondence hypothesis scores {best[0]:.3g} px (> {reject_px} px)", best[0])

    # extend to all detections, then re-solve PnP on the full set
    pose = best[1]
    gate = max(reject_px, 4 * accept_px)
    pairs: dict[int, int] = {}
    for _ in range(3):
        proj = _project_centers(cam, pose, C)
        dist = np.linalg.norm(uv_c[:, None] - proj[None], axis=2)
        pairs = _mutual_nearest(np.nan_to_num(dist, nan=np.inf), gate)
        if len(pairs) < 4:
            break
        rows = sorted(pairs)
        pose = pnp_pose(uv_c[rows], C[[pairs[r] for r in rows]], cam)
    proj = _project_centers(cam, pose, C)
    score = float(np.linalg.norm(uv_c[:, None] - proj[None], axis=2).min(axis=1).mean())
    if not score <= reject_px:
        raise NoConsistentMatch(f"extended correspondence scores {score:.3g} px (> {reject_px} px)", score)
    corr = {int(canon[r]): (ids[pairs[r]] if r in pairs else None) for r in range(D)}
    return MatchResult(corr, pose, _similarity_from_camera(image.pose_world_to_cam, pose, scale), score)


def assign_by_projection(image: PosedImage, markers: dict[int, SphereMarker], transform: SimilarityTransform,
                         gate_px: float = 50.0) -> PosedImage:
    """Label an image's detections with the marker whose projected centre is mutually nearest."""
    cam = image.camera
    if not image.detections:
        return image
    ids = sorted(markers)
    Cw = transform.apply(np.array([markers[k].center for k in ids]))
    proj = _project_centers(cam, image.pose_world_to_cam, Cw)
    uv = np.array([sphere_center_image_point(cam, d) for d in image.detections])
    dist = np.nan_to_num(np.linalg.norm(uv[:, None] - proj[None], axis=2), nan=np.inf)
    pairs = _mutual_nearest(dist, gate_px)
    dets = tuple(replace(d, marker_id=ids[pairs[k]] if k in pairs else None) for k, d in enumerate(image.detections))
    return replace(image, detections=dets)


def initial_scale(images: list[PosedImage], markers: dict[int, SphereMarker], first: int, first_match: MatchResult) -> float:
    """World units per millimetre from the camera baseline seen by two matched images."""
    c0_w = images[first].pose_world_to_cam.inverse().translation
    c0_s = first_match.camera_pose.inverse().translation
    best = None
    for k, im in enumerate(images):
        if k == first or len(im.detections) < 4:
            continue
        ck_w = im.pose_world_to_cam.inverse().translation
        base = np.linalg.norm(ck_w - c0_w)
        key = (len(im.detections), base)
        if best is None or key > best[0]:
            best = (key, k, ck_w)
    if best is None:
        raise ValueError("scale estimation needs a second image with at least four detections")
    _, k, ck_w = best
    mk = match_markers(images[k], markers)
    ck_s = mk.camera_pose.inverse().translation
    return float(np.linalg.norm(ck_w - c0_w) / np.linalg.norm(ck_s - c0_s))


# --- residuals and Jacobian ------------------------------------------------------------------------

@dataclass(frozen=True)
class _Block:
    image_id: int
    marker_id: int
    R_i: NDArray
    t_i: NDArray
    center: NDArray  # in S
    radius: float
    x: NDArray  # (L, 3) homogeneous normalised outline points


def _blocks(problem: RegistrationProblem) -> list[_Block]:
    active = set(problem.active_ids)
    out = []
    for im in problem.images:
        for d in im.detections:
            if d.marker_id is None or d.marker_id not in active:
                continue
            m = problem.markers[d.marker_id]
            xy = normalized_outline(im.camera, d)
            x = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
            out.append(_Block(im.image_id, d.marker_id, im.pose_world_to_cam.rotation,
                              im.pose_world_to_cam.translation, m.center, m.radius, x))
    return out


def _block_residuals(b: _Block, T: SimilarityTransform, with_jac: bool, estimate_scale: bool):
    s, R, t = T.scale, T.rotation, T.translation
    sRc = s * (R @ b.center)
    X = b.R_i @ (sRc + t) + b.t_i
    rho = s * b.radius
    x = b.x
    XX = X @ X
    Cm = (XX - rho * rho) * np.eye(3) - np.outer(X, X)
    N = np.linalg.norm(Cm)
    xx = np.einsum("ij,ij->i", x, x)
    # |X|^2 |x|^2 - (X.x)^2 = |X x x|^2; the cross form avoids cancelling two ~|X|^2 terms
    Xcx = np.cross(X, x)
    q = np.einsum("ij,ij->i", Xcx, Xcx) - rho * rho * xx
    r = q / N
    if not with_jac:
        return r, None
    trC = np.trace(Cm)
    dq_dX = 2.0 * np.cross(x, Xcx)
    dq_drho = -2.0 * rho * xx
    dN_dX = (2.0 * trC * X - 2.0 * Cm @ X) / N
    dN_drho = -2.0 * rho * trC / N
    dr_dX = dq_dX / N - np.outer(q, dN_dX) / (N * N)
    dr_drho = dq_drho / N - q * dN_drho / (N * N)
    # parameters: left rotation increment, translation, log scale
    dX_dw = -b.R_i @ skew(sRc)
    dX_dt = b.R_i
    cols = [dr_dX @ dX_dw, dr_dX @ dX_dt]
    if estimate_scale:
        cols.append((dr_dX @ (b.R_i @ sRc) + dr_drho * rho)[:, None])
    return r, np.hstack(cols)


def apply_increment(T: SimilarityTransform, delta: ArrayLike, estimate_scale: bool) -> SimilarityTransform:
    """``R <- exp(w) R``, ``t <- t + dt``, ``log s <- log s + ds``."""
    delta = np.asarray(delta, dtype=np.float64)
    R = rotvec_to_matrix(delta[:3]) @ T.rotation
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    s = T.scale * math.exp(delta[6]) if estimate_scale else T.scale
    return SimilarityTransform(RigidTransform(R, T.translation + delta[3:6]), s)


def residual_vector(problem: RegistrationProblem, T: SimilarityTransform, blocks: list[_Block] | None = None) -> NDArray:
    blocks = _blocks(problem) if blocks is None else blocks
    if not blocks:
        return np.zeros(0)
    return np.concatenate([_block_residuals(b, T, False, problem.estimate_scale)[0] for b in blocks])


def residual_jacobian(
    problem: RegistrationProblem, T: SimilarityTransform, blocks: list[_Block] | None = None
) -> tuple[NDArray, NDArray]:
    """Residuals and their Jacobian with respect to the increment of :func:`apply_increment`."""
    blocks = _blocks(problem) if blocks is None else blocks
    n_par = 7 if problem.estimate_scale else 6
    if not blocks:
        return np.zeros(0), np.zeros((0, n_par))
    parts = [_block_residuals(b, T, True, problem.estimate_scale) for b in blocks]
    return np.concatenate([p[0] for p in parts]), np.vstack([p[1] for p in parts])


def _huber_weights(r: NDArray, delta: float | None) -> NDArray:
    if delta is None:
        return np.ones_like(r)
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _robust_cost(r: NDArray, delta: float | None) -> float:
    if delta is None:
        return float(r @ r)
    a = np.abs(r)
    return float(np.sum(np.where(a <= delta, a * a, 2.0 * delta * a - delta * delta)))


def refine_registration(
    problem: RegistrationProblem, init: SimilarityTransform, config: SolverConfig = SolverConfig()
) -> RegistrationSolution:
    """Levenberg-Marquardt on the point-on-conic residuals of all registration markers."""
    blocks = _blocks(problem)
    if not blocks:
        raise ValueError("no detections of registration markers")
    est = problem.estimate_scale
    n_par = 7 if est else 6
    T = init if est else SimilarityTransform(init.rigid, init.scale)
    lam = config.initial_lambda
    r, J = residual_jacobian(problem, T, blocks)
    cost = _robust_cost(r, config.huber_delta)
    trace = [cost]
    converged = False
    it = 0
    gnorm = math.inf
    while True:
        w = _huber_weights(r, config.huber_delta)
        Jw = J * w[:, None]
        g = Jw.T @ r
        gnorm = float(np.max(np.abs(g)))
        if gnorm < config.gradient_tol:
            converged = True
            break
        if it >= config.max_iterations:
            break
        it += 1
        A = Jw.T @ J
        diag = np.diag(A).copy()
        if np.any(diag <= 0) or not np.all(np.isfinite(A)):
            raise SingularNormalEquations("normal equations have a zero or non-finite diagonal")
        stop = False
        while True:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                raise SingularNormalEquations("damped normal equations are singular") from None
            if float(np.linalg.norm(delta)) < config.step_tol:
                stop = True
                break
            T_new = apply_increment(T, np.pad(delta, (0, 7 - n_par)), est)
            r_new = residual_vector(problem, T_new, blocks)
            cost_new = _robust_cost(r_new, config.huber_delta)
            if np.isfinite(cost_new) and cost_new < cost:
                T, cost = T_new, cost_new
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
            if lam > 1e16:
                stop = True
                break
        if stop:
            break
        r, J = residual_jacobian(problem, T, blocks)
        trace.append(cost)

    per_image = per_image_reproj_error(problem, T)
    sol = RegistrationSolution(T, float(r @ r) if config.huber_delta is None else cost, per_image, it,
                               converged, gnorm, tuple(trace))
    log.info("LM: %d iterations, cost %.3e, |g|inf %.2e, converged=%s", it, sol.final_cost, gnorm, converged)
    if not converged and config.strict:
        raise NotConverged(f"gradient {gnorm:.3g} above {config.gradient_tol} after {it} iterations", sol)
    return sol


# --- evaluation ------------------------------------------------------------------------------------

def _world_marker(T: SimilarityTransform, m: SphereMarker) -> SphereMarker:
    return SphereMarker(T.apply(m.center), m.radius * T.scale, frame="W")


def reprojection_errors(im: PosedImage, det: EllipseDetection, marker_w: SphereMarker) -> NDArray[np.float64]:
    """Geometric distance (px) from each undistorted outline point to the predicted conic."""
    P = im.camera.projection_matrix(im.pose_world_to_cam)
    e = conic_to_ellipse(project_sphere(P, marker_w))
    return point_ellipse_distance(e, undistorted_outline(im.camera, det))


def radial_errors(im: PosedImage, det: EllipseDetection, marker_w: SphereMarker, scale: float = 1.0) -> NDArray[np.float64]:
    """Ray-to-hull distance (mm) of each back-projected outline point."""
    dirs_c = im.camera.backproject(det.outline)
    inv = im.pose_world_to_cam.inverse()
    dirs_w = dirs_c @ inv.rotation.T
    d = ray_line_distance(inv.translation, dirs_w, marker_w.center)
    return np.abs(d - marker_w.radius) / scale


def per_image_reproj_error(problem: RegistrationProblem, T: SimilarityTransform) -> dict[int, float]:
    active = set(problem.active_ids)
    out = {}
    for im in problem.images:
        errs = []
        for d in im.detections:
            if d.marker_id in active:
                try:
                    errs.append(reprojection_errors(im, d, _world_marker(T, problem.markers[d.marker_id])).mean())
                except (DegenerateConic, NotAnEllipse):
                    errs.append(math.inf)
        if errs:
            out[im.image_id] = float(np.mean(errs))
    return out


def evaluate(
    problem: RegistrationProblem,
    solution: RegistrationSolution | SimilarityTransform,
    control_ids: list[int] | tuple[int, ...],
    pose_source: str = "synthetic",
) -> EvaluationReport:
    """Radial (mm) and reprojection (px) errors on held-out control markers.

    The radial mean runs over every outline point; the reprojection mean runs
    over (image, marker) pairs, each the mean over its outline points.
    """
    T = solution.transform if isinstance(solution, RegistrationSolution) else solution
    if pose_source not in POSE_SOURCES:
        raise ValueError(f"pose source must be one of {POSE_SOURCES}")
    radial: list[NDArray] = []
    reproj: list[float] = []
    per: dict[int, dict[str, list]] = {}
    for im in problem.images:
        for d in im.detections:
            if d.marker_id is None or d.marker_id not in control_ids:
                continue
            mw = _world_marker(T, problem.markers[d.marker_id])
            rad = radial_errors(im, d, mw, T.scale)
            rep = float(reprojection_errors(im, d, mw).mean())
            radial.append(rad)
            reproj.append(rep)
            slot = per.setdefault(d.marker_id, {"radial": [], "reproj": []})
            slot["radial"].append(rad)
            slot["reproj"].append(rep)
    if not radial:
        raise MissingControlDetections(f"no detections of control markers {sorted(control_ids)}")
    all_rad = np.concatenate(radial)
    per_marker = {
        k: {
            "mean_radial_error_mm": float(np.concatenate(v["radial"]).mean()),
            "mean_reproj_error_px": float(np.mean(v["reproj"])),
            "n_images": len(v["reproj"]),
        }
        for k, v in sorted(per.items())
    }
    return EvaluationReport(float(all_rad.mean()), float(np.mean(reproj)), per_marker, pose_source,
                            int(all_rad.size), len(reproj))


# --- whole pipeline ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineResult:
    match: MatchResult
    init_image: int
    initial: SimilarityTransform
    solution: RegistrationSolution
    problem: RegistrationProblem  # with correspondences filled in
    report: EvaluationReport | None = None
    extra: dict = field(default_factory=dict)


def register_scene(
    images: list[PosedImage],
    markers: dict[int, SphereMarker],
    registration_ids: list[int] | tuple[int, ...] | None = None,
    control_ids: list[int] | tuple[int, ...] = (),
    estimate_scale: bool = False,
    init_image: int | None = None,
    config: SolverConfig = SolverConfig(),
    pose_source: str = "synthetic",
) -> PipelineResult:
    """Match on one image, label the rest by projection, refine, and evaluate on control markers.

    ``init_image`` is an image id; by default the image with the most detections.
    """
    images = list(images)
    if init_image is None:
        k0 = max(range(len(images)), key=lambda k: (len(images[k].detections), -k))
    else:
        k0 = next((k for k, im in enumerate(images) if im.image_id == init_image), None)
        if k0 is None:
            raise ValueError(f"no image with id {init_image}")
    match = match_markers(images[k0], markers)
    scale = initial_scale(images, markers, k0, match) if estimate_scale else 1.0
    init = _similarity_from_camera(images[k0].pose_world_to_cam, match.camera_pose, scale)
    labelled = [assign_by_projection(im, markers, init) for im in images]
    problem = RegistrationProblem(tuple(labelled), markers, estimate_scale,
                                  None if registration_ids is None else tuple(registration_ids))
    solution = refine_registration(problem, init, config)
    report = evaluate(problem, solution, control_ids, pose_source) if control_ids else None
    return PipelineResult(match, images[k0].image_id, init, solution, problem, report)
