"""Synthetic ground-truth scenes for validating every pipeline stage.

A scene is a board carrying spherical markers on posts (frame S), an unknown
board-to-world transform, and cameras on two arcs on opposite sides of the
board looking at its centre.  From it we generate analytic outline
observations, anti-aliased marker images with masks, and a scanner-like mesh.
All randomness flows from the scene seed through per-image sub-streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from .detect import DetectionMask, EllipseDetection, sample_outline
from .errors import DegenerateConic, NotAnEllipse, PlacementFailed
from .geometry import (
    CameraModel,
    Ellipse,
    RigidTransform,
    SimilarityTransform,
    SphereMarker,
    conic_to_ellipse,
    fit_conic_direct,
    project_sphere,
)
from .mesh import TriangleMesh, grid_patch, icosphere

RESOLUTIONS = {
    "low": (1920, 1080),
    "medium": (4752, 3168),
    "high": (9504, 6336),
}

# Outline noise (px, at 9504 px width) that puts the mean point-to-conic
# reprojection error near 3.7 px: E|N(0, s)| = s sqrt(2/pi).
HIGH_RES_OUTLINE_SIGMA = 3.71 / math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class NoiseSpec:
    outline_noise_sigma: float = 0.0
    pose_rotation_sigma: float = 0.0
    pose_translation_sigma: float = 0.0
    vertex_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    image_noise_sigma: float = 0.0  # grey levels, rendered images only

    def __post_init__(self):
        for k in ("outline_noise_sigma", "pose_rotation_sigma", "pose_translation_sigma",
                  "vertex_noise_sigma", "image_noise_sigma"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")

    @classmethod
    def sfm_high(cls, width: int = 9504) -> NoiseSpec:
        """Outline noise calibrated to the high-resolution SfM reprojection level."""
        return cls(outline_noise_sigma=HIGH_RES_OUTLINE_SIGMA * width / 9504)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SceneParams:
    n_markers: int = 10
    n_control: int = 2
    n_images: int = 16
    marker_radius: float = 15.0
    board_size: float = 300.0
    min_separation: float = 60.0
    post_height: tuple[float, float] = (10.0, 40.0)
    control_height: tuple[float, float] = (30.0, 60.0)
    standoff: tuple[float, float] = (400.0, 800.0)
    elevation_deg: tuple[float, float] = (40.0, 75.0)
    arc_half_width_deg: float = 50.0
    resolution: tuple[int, int] = RESOLUTIONS["high"]
    focal_factor: float = 0.6  # fx = focal_factor * width
    distortion: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    image_margin: float = 5.0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class SyntheticScene:
    ground_truth_transform: SimilarityTransform  # S -> W
    markers: tuple[SphereMarker, ...]  # in S
    marker_ids: tuple[int, ...]
    registration_ids: tuple[int, ...]
    control_ids: tuple[int, ...]
    cameras: tuple[tuple[CameraModel, RigidTransform], ...]  # true world-to-camera poses
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    params: SceneParams = field(default_factory=SceneParams)

    @property
    def markers_world(self) -> list[SphereMarker]:
        T = self.ground_truth_transform
        return [SphereMarker(T.apply(m.center), m.radius * T.scale, frame="W") for m in self.markers]

    def marker(self, marker_id: int) -> SphereMarker:
        return self.markers[self.marker_ids.index(marker_id)]

    def visible(self, image_index: int, marker_index: int, camera: CameraModel | None = None) -> Ellipse | None:
        """Projected ellipse if the marker images fully inside the frame, else None."""
        cam, pose = self.cameras[image_index]
        cam = camera or cam
        m = self.markers_world[marker_index]
        if pose.apply(m.center)[2] <= 2 * m.radius:
            return None
        try:
            e = conic_to_ellipse(project_sphere(cam.projection_matrix(pose), m))
        except (DegenerateConic, NotAnEllipse):
            return None
        pts = cam.distort_pixels(e.point_at(np.linspace(0, 2 * np.pi, 64, endpoint=False)))
        mg = self.params.image_margin
        if pts[:, 0].min() < mg or pts[:, 1].min() < mg:
            return None
        if pts[:, 0].max() > cam.width - 1 - mg or pts[:, 1].max() > cam.height - 1 - mg:
            return None
        return e

    def visible_ellipses(self, image_index: int, camera: CameraModel | None = None) -> dict[int, Ellipse]:
        """Visible, mutually non-overlapping marker ellipses keyed by marker index."""
        out = {}
        for j in range(len(self.markers)):
            e = self.visible(image_index, j, camera)
            if e is not None:
                out[j] = e
        # drop markers whose silhouettes touch another one (occlusion is not modelled)
        keep = {}
        for j, e in out.items():
            clash = any(
                k != j and np.linalg.norm(e.center - f.center) < e.a + f.a + 4.0 for k, f in out.items()
            )
            if not clash:
                keep[j] = e
        return keep


def _look_at(center: NDArray, target: NDArray, roll: float) -> RigidTransform:
    z = target - center
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_c2w = np.stack([x, y, z], axis=1) @ Rotation.from_rotvec([0, 0, roll]).as_matrix()
    R = R_c2w.T
    return RigidTransform(R, -R @ center)


def _place_markers(rng, params: SceneParams, max_attempts: int) -> tuple[list[NDArray], list[NDArray]]:
    """Rejection-sample registration then control centres; restart when a draw gets stuck."""
    half = params.board_size / 2 - params.marker_radius
    groups = [(params.n_markers, half, params.post_height), (params.n_control, params.board_size / 4, params.control_height)]
    attempts = 0
    while True:
        placed: list[list[NDArray]] = [[], []]
        stuck = False
        for g, (n, extent, heights) in enumerate(groups):
            while len(placed[g]) < n and not stuck:
                for _ in range(200):
                    attempts += 1
                    if attempts > max_attempts:
                        raise PlacementFailed(
                            f"could not place {params.n_markers + params.n_control} markers "
                            f"{params.min_separation} mm apart in {max_attempts} attempts"
                        )
                    xy = rng.uniform(-extent, extent, size=2)
                    if all(np.linalg.norm(xy - p[:2]) >= params.min_separation for p in placed[0] + placed[1]):
                        z = rng.uniform(*heights) + params.marker_radius
                        placed[g].append(np.array([xy[0], xy[1], z]))
                        break
                else:
                    stuck = True
        if not stuck:
            return placed[0], placed[1]


def make_camera(params: SceneParams, resolution: tuple[int, int] | None = None) -> CameraModel:
    w, h = resolution or params.resolution
    f = params.focal_factor * w
    k1, k2, p1, p2 = params.distortion
    return CameraModel(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h, k1, k2, p1, p2)


def generate_scene(
    params: SceneParams = SceneParams(), seed: int = 0, noise: NoiseSpec = NoiseSpec(), max_attempts: int = 10_000
) -> SyntheticScene:
    if params.n_markers < 4 or params.n_images < 1:
        raise ValueError("need at least 4 markers and 1 image")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    reg, ctrl = _place_markers(rng, params, max_attempts)
    attempts = max_attempts
    centers = reg + ctrl
    markers = tuple(SphereMarker(c, params.marker_radius) for c in centers)
    ids = tuple(range(len(markers)))

    rot = Rotation.from_rotvec(rng.normal(size=3) * 1.0).as_matrix()
    T = SimilarityTransform(RigidTransform(rot, rng.normal(size=3) * 200.0), 1.0)
    cam = make_camera(params)
    need = min(4, params.n_images)

    while True:
        cams = []
        for i in range(params.n_images):
            side = 0.0 if i % 2 == 0 else math.pi
            az = side + math.radians(rng.uniform(-params.arc_half_width_deg, params.arc_half_width_deg))
            el = math.radians(rng.uniform(*params.elevation_deg))
            dist = rng.uniform(*params.standoff)
            target = np.array([rng.uniform(-20, 20), rng.uniform(-20, 20), 30.0])
            center_s = target + dist * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
            pose_s = _look_at(center_s, target, rng.uniform(-0.2, 0.2))
            pose_w = pose_s @ T.rigid.inverse()
            cams.append((cam, pose_w))
        scene = SyntheticScene(T, markers, ids, ids[: len(reg)], ids[len(reg):], tuple(cams), noise, seed, params)
        counts = np.zeros(len(markers), dtype=int)
        for i in range(params.n_images):
            for j in scene.visible_ellipses(i):
                counts[j] += 1
        if counts.min() >= need:
            return scene
        attempts -= params.n_images
        if attempts <= 0:
            raise PlacementFailed("could not find camera placements that see every marker")


def _image_rng(scene: SyntheticScene, image_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([scene.seed, 1 + stream, image_index]))


def perturb_pose(pose: RigidTransform, rng: np.random.Generator, rot_sigma: float, trans_sigma: float) -> RigidTransform:
    if rot_sigma == 0 and trans_sigma == 0:
        return pose
    d = RigidTransform.from_rotvec(rng.normal(size=3) * rot_sigma, rng.normal(size=3) * trans_sigma)
    return d @ pose


def scale_poses(poses: list[RigidTransform], s: float) -> list[RigidTransform]:
    """Express world-to-camera poses in a world scaled by ``s`` (an SfM gauge)."""
    return [RigidTransform(p.rotation, s * p.translation) for p in poses]


def render_observations(
    scene: SyntheticScene, outline_points: int = 200, unknown_ids: bool = False
) -> tuple[list[list[EllipseDetection]], list[RigidTransform]]:
    """Analytic outline detections per image plus the (noisy) observed camera poses.

    Outline points are sampled on the true conic, pushed through the lens
    distortion, jittered by isotropic Gaussian noise and partly replaced by
    uniform outliers.
    """
    nz = scene.noise
    detections: list[list[EllipseDetection]] = []
    poses: list[RigidTransform] = []
    for i, (cam, pose) in enumerate(scene.cameras):
        rng = _image_rng(scene, i, 0)
        poses.append(perturb_pose(pose, rng, nz.pose_rotation_sigma, nz.pose_translation_sigma))
        dets = []
        for j, e in sorted(scene.visible_ellipses(i).items()):
            pts = cam.distort_pixels(sample_outline(e, outline_points))
            noisy = nz.outline_noise_sigma > 0 or cam.has_distortion
            if nz.outline_noise_sigma > 0:
                pts = pts + rng.normal(scale=nz.outline_noise_sigma, size=pts.shape)
            n_out = int(round(nz.outlier_fraction * outline_points))
            if n_out:
                which = rng.choice(outline_points, size=n_out, replace=False)
                lo = pts.min(axis=0) - 0.5 * e.a
                hi = pts.max(axis=0) + 0.5 * e.a
                pts[which] = rng.uniform(lo, hi, size=(n_out, 2))
                inl = np.ones(outline_points, dtype=bool)
                inl[which] = False
            else:
                inl = np.ones(outline_points, dtype=bool)
            ell = conic_to_ellipse(fit_conic_direct(pts[inl])) if noisy else e
            mid = None if unknown_ids else scene.marker_ids[j]
            dets.append(EllipseDetection(i, mid, ell, pts, float(inl.mean())))
        detections.append(dets)
    return detections, poses


# --- rasterisation ----------------------------------------------------------------------------

def _background(rng: np.random.Generator, height: int, width: int, r0: int = 0, r1: int | None = None,
                c0: int = 0, c1: int | None = None, phase=None) -> NDArray[np.float32]:
    r1 = height if r1 is None else r1
    c1 = width if c1 is None else c1
    ph = phase if phase is not None else rng.uniform(0, 2 * np.pi, size=3)
    x = np.arange(c0, c1, dtype=np.float32)
    y = np.arange(r0, r1, dtype=np.float32)[:, None]
    sx = np.float32(width / 1000.0)
    bg = (
        np.float32(175.0)
        + np.float32(20.0) * np.sin(x / (61.0 * sx) + ph[0]).astype(np.float32) * np.cos(y / (47.0 * sx) + ph[1]).astype(np.float32)
        + np.float32(10.0) * np.sin((x + y) / (23.0 * sx) + ph[2]).astype(np.float32)
    )
    return bg


def _coverage(cam: CameraModel, E: NDArray, r0: int, r1: int, c0: int, c1: int, ss: int) -> NDArray[np.float64]:
    """Fraction of each pixel inside the (undistorted) conic, by ss x ss supersampling near the rim."""
    ys, xs = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)

    def inside(p):
        u = cam.undistort_pixels(p) if cam.has_distortion else p
        h = np.concatenate([u, np.ones((len(u), 1))], axis=1)
        val = np.einsum("ij,jk,ik->i", h, E, h)
        grad = 2.0 * (h @ E)[:, :2]
        return val, np.abs(val) / np.maximum(np.linalg.norm(grad, axis=1), 1e-300)

    val, dist = inside(pts)
    cov = (val <= 0).astype(np.float64)
    rim = dist < 1.5
    if rim.any():
        off = (np.arange(ss) + 0.5) / ss - 0.5
        ox, oy = np.meshgrid(off, off)
        sub = (pts[rim][:, None, :] + np.stack([ox.ravel(), oy.ravel()], axis=1)[None]).reshape(-1, 2)
        sv, _ = inside(sub)
        cov[rim] = (sv.reshape(-1, ss * ss) <= 0).mean(axis=1)
    return cov.reshape(r1 - r0, c1 - c0)


def render_image(
    scene: SyntheticScene,
    image_index: int,
    resolution: tuple[int, int] | None = None,
    supersample: int = 8,
    marker_level: float = 40.0,
) -> tuple[NDArray[np.uint8], dict[int, DetectionMask]]:
    """Render one view: dark anti-aliased discs on a smooth textured background.

    Returns the 8-bit image and a ground-truth mask crop per visible marker id.
    """
    cam, pose = scene.cameras[image_index]
    if resolution is not None and tuple(resolution) != (cam.width, cam.height):
        cam = make_camera(scene.params, resolution)
    cams = list(scene.cameras)
    cams[image_index] = (cam, pose)
    sc = replace(scene, cameras=tuple(cams))
    W, H = cam.width, cam.height
    rng = _image_rng(scene, image_index, 1)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    img = np.empty((H, W), dtype=np.uint8)
    rows_per_block = max(1, 4_000_000 // W)
    for r in range(0, H, rows_per_block):
        r_end = min(H, r + rows_per_block)
        img[r:r_end] = np.clip(np.round(_background(rng, H, W, r, r_end, phase=phase)), 0, 255).astype(np.uint8)

    masks: dict[int, DetectionMask] = {}
    P = cam.projection_matrix(pose)
    mw = sc.markers_world
    for j, e in sorted(sc.visible_ellipses(image_index).items()):
        E = project_sphere(P, mw[j])
        pts = cam.distort_pixels(e.point_at(np.linspace(0, 2 * np.pi, 256, endpoint=False)))
        x0, y0 = np.floor(pts.min(axis=0)).astype(int) - 2
        x1, y1 = np.ceil(pts.max(axis=0)).astype(int) + 3
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
        cov = _coverage(cam, E, y0, y1, x0, x1, supersample)
        patch = img[y0:y1, x0:x1].astype(np.float64)
        img[y0:y1, x0:x1] = np.clip(np.round(patch * (1 - cov) + marker_level * cov), 0, 255).astype(np.uint8)
        # mask crop: pixel centres inside the silhouette, with a margin around it
        m = int(math.ceil(0.15 * e.a)) + 5
        mx0, my0 = max(x0 - m, 0), max(y0 - m, 0)
        mx1, my1 = min(x1 + m, W), min(y1 + m, H)
        full = _coverage(cam, E, my0, my1, mx0, mx1, 1) >= 0.5
        masks[scene.marker_ids[j]] = DetectionMask(full, (mx0, my0))

    if scene.noise.image_noise_sigma > 0:
        noisy = img.astype(np.float32) + rng.normal(0, scene.noise.image_noise_sigma, img.shape).astype(np.float32)
        img = np.clip(np.round(noisy), 0, 255).astype(np.uint8)
    return img, masks


def render_sphere_images(scene: SyntheticScene, resolution: tuple[int, int] | None = None, supersample: int = 8):
    """Yield ``(image_id, image, masks)`` for every camera.

    A generator, because full-resolution frames are ~60 MB each.
    """
    for i in range(len(scene.cameras)):
        img, masks = render_image(scene, i, resolution, supersample)
        yield i, img, masks


def scene_mesh(scene: SyntheticScene, subdivisions: int = 4, board_cells: int = 30) -> TriangleMesh:
    """Scanner-like mesh in frame S: the board plus one sphere per marker, with vertex noise."""
    b = scene.params.board_size * 1.2
    parts = [grid_patch(b, b, board_cells, board_cells, origin=(-b / 2, -b / 2, 0.0))]
    for m in scene.markers:
        parts.append(icosphere(m.radius, subdivisions, m.center))
    mesh = TriangleMesh.concatenate(parts)
    sigma = scene.noise.vertex_noise_sigma
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 99]))
        mesh = TriangleMesh(mesh.vertices + rng.normal(0, sigma, mesh.vertices.shape), mesh.triangles)
    return mesh
