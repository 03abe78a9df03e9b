"""Command-line front end: detect, fit-spheres, register, evaluate, chamfer, synth.

Exit codes:
  0  success
  1  unexpected error
  2  unreadable input (missing file, parse failure) or a failed detection
  3  no consistent marker correspondence
  4  refinement did not converge (the best iterate is still written)

All structured output is JSON with sorted keys, written to a temporary file
and renamed into place, so reruns with the same inputs and seed are
byte-identical and a failure never leaves a half-written file.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import detect as det
from .errors import (
    NoConsistentMatch,
    NotConverged,
    ParseError,
    SphereRegError,
    UnsupportedFormat,
)
from .geometry import CameraModel, RigidTransform, SimilarityTransform, SphereMarker
from .mesh import chamfer_distance, fit_sphere_icp, load_mesh, save_mesh
from .registration import (
    POSE_SOURCES,
    PosedImage,
    RegistrationProblem,
    SolverConfig,
    evaluate,
    poses_from_forward_kinematics,
    register_scene,
)

log = logging.getLogger("spherereg")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_NO_MATCH, EXIT_NOT_CONVERGED = 0, 1, 2, 3, 4


class InputError(Exception):
    """Bad or missing input; maps to exit code 2."""


# --- JSON helpers ------------------------------------------------------------------------------

def write_json(path: str | os.PathLike, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_json(path: str | os.PathLike):
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: line {e.lineno}: {e.msg}") from None


# --- configuration ---------------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Paths (relative to the config file) and settings for the whole pipeline."""

    base: Path
    cameras: str = "cameras.json"
    poses: str = "poses.json"
    detections: str = "detections.json"
    markers: str = "markers.json"
    mesh: str = "mesh.ply"
    marker_inits: str = "marker_inits.json"
    solution: str = "solution.json"
    report: str = "report.json"
    images: list = field(default_factory=list)
    marker_radius: float = 15.0
    registration_ids: list[int] | None = None
    control_ids: list[int] = field(default_factory=list)
    pose_source: str = "synthetic"
    solver: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    estimate_scale: bool = False
    init_image: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.registration_ids is not None and set(self.registration_ids) & set(self.control_ids):
            raise InputError("registration and control marker ids must be disjoint")
        if self.pose_source not in POSE_SOURCES:
            raise InputError(f"pose_source must be one of {POSE_SOURCES}")
        if not self.marker_radius > 0:
            raise InputError("marker_radius must be positive")

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.base / p

    @classmethod
    def load(cls, path: str | os.PathLike) -> PipelineConfig:
        d = read_json(path)
        known = set(cls.__dataclass_fields__) - {"base"}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(base=Path(path).resolve().parent, **d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "base"}


# --- loaders -------------------------------------------------------------------------------------------

def load_cameras(path: Path) -> dict[int, CameraModel]:
    d = read_json(path)
    return {int(c["image_id"]): CameraModel.from_dict(c) for c in d["cameras"]}


def load_poses(path: Path) -> dict[int, RigidTransform]:
    """World-to-camera poses, either given directly or composed from robot kinematics."""
    d = read_json(path)
    mode = d.get("mode", "world_to_camera")
    if mode == "world_to_camera":
        return {int(p["image_id"]): RigidTransform.from_dict(p) for p in d["poses"]}
    if mode == "robot":
        ids = [int(p["image_id"]) for p in d["t_ee_b"]]
        ee = [RigidTransform.from_dict(p) for p in d["t_ee_b"]]
        return dict(zip(ids, poses_from_forward_kinematics(ee, RigidTransform.from_dict(d["t_c_ee"]))))
    raise InputError(f"{path}: unknown pose mode {mode!r}")


def load_markers(path: Path) -> dict[int, SphereMarker]:
    return {int(m["id"]): SphereMarker(m["center_S"], m["radius"]) for m in read_json(path)["markers"]}


def load_detections(path: Path) -> list[det.EllipseDetection]:
    return [det.EllipseDetection.from_dict(x) for x in read_json(path)["detections"]]


def build_images(cfg: PipelineConfig) -> list[PosedImage]:
    cams = load_cameras(cfg.path(cfg.cameras))
    poses = load_poses(cfg.path(cfg.poses))
    dets = load_detections(cfg.path(cfg.detections))
    by_image: dict[int, list] = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    missing = sorted(set(by_image) - set(cams)) + sorted(set(by_image) - set(poses))
    if missing:
        raise InputError(f"detections reference images without camera or pose: {missing}")
    return [PosedImage(i, cams[i], poses[i], tuple(by_image.get(i, ()))) for i in sorted(poses) if i in cams]


def solver_config(cfg: PipelineConfig) -> SolverConfig:
    return SolverConfig(**cfg.solver)


# --- commands ------------------------------------------------------------------------------------------

def _detect_one(job):
    image, masks, image_id, marker_id, config, seed = job
    try:
        return det.detect_marker(image, masks, image_id, marker_id, config, seed), None
    except SphereRegError as e:
        return None, f"image {image_id} marker {marker_id}: {type(e).__name__}: {e}"


def cmd_detect(args, cfg: PipelineConfig) -> int:
    dcfg = det.DetectorConfig(**{**cfg.detector, "outline_points": args.outline_points})
    jobs = []
    for entry in cfg.images:
        img_path = cfg.path(entry["path"])
        if not img_path.exists():
            raise InputError(f"missing image file: {img_path}")
        image = det.to_gray(det.read_image(img_path))
        for k, m in enumerate(entry.get("masks", [])):
            masks = []
            for p in m["paths"]:
                mp = cfg.path(p)
                if not mp.exists():
                    raise InputError(f"missing mask file: {mp}")
                masks.append(det.read_mask(mp, tuple(m.get("origin", (0, 0)))))
            image_id = int(entry["image_id"])
            jobs.append((image, masks, image_id, m.get("marker_id"), dcfg, det.detection_seed(cfg.seed, image_id, k)))
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = list(pool.map(_detect_one, jobs))
    failures = [err for _, err in results if err]
    if failures:
        for f in failures:
            print(f"detection failed: {f}", file=sys.stderr)
        return EXIT_INPUT
    out = args.output or cfg.path(cfg.detections)
    write_json(out, {"detections": [r.to_dict() for r, _ in results]})
    print(f"{len(results)} detections written to {out}")
    return EXIT_OK


def cmd_fit_spheres(args, cfg: PipelineConfig) -> int:
    mesh = load_mesh(cfg.path(cfg.mesh))
    inits = read_json(cfg.path(cfg.marker_inits))["markers"]
    out = []
    for m in sorted(inits, key=lambda m: int(m["id"])):
        radius = float(m.get("radius", cfg.marker_radius))
        res = fit_sphere_icp(mesh, radius, m["center"])
        out.append({
            "id": int(m["id"]),
            "center_S": res.marker.center.tolist(),
            "radius": radius,
            "rms_residual": res.rms_residual,
            "n_support_vertices": res.n_support_vertices,
        })
    path = args.output or cfg.path(cfg.markers)
    write_json(path, {"markers": out})
    print(f"{len(out)} spheres written to {path}")
    return EXIT_OK


def _correspondences(problem: RegistrationProblem) -> list[dict]:
    return [
        {"image_id": im.image_id, "detection_index": k, "marker_id": d.marker_id}
        for im in problem.images
        for k, d in enumerate(im.detections)
    ]


def cmd_register(args, cfg: PipelineConfig) -> int:
    images = build_images(cfg)
    markers = load_markers(cfg.path(cfg.markers))
    estimate_scale = args.estimate_scale or cfg.estimate_scale
    init_image = args.init_image if args.init_image is not None else cfg.init_image
    solver = solver_config(cfg)
    out_path = args.output or cfg.path(cfg.solution)
    try:
        res = register_scene(images, markers, cfg.registration_ids, cfg.control_ids, estimate_scale,
                             init_image, SolverConfig(**{**solver.to_dict(), "strict": True}), cfg.pose_source)
    except NoConsistentMatch as e:
        print(f"no consistent marker correspondence: {e}", file=sys.stderr)
        return EXIT_NO_MATCH
    except NotConverged as e:
        write_json(out_path, {"solution": e.solution.to_dict(), "converged": False})
        print(f"refinement did not converge: {e}; best iterate written to {out_path}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    doc = {
        "solution": res.solution.to_dict(),
        "init_image": res.init_image,
        "initial_transform": res.initial.to_dict(),
        "match_score_px": res.match.score,
        "estimate_scale": estimate_scale,
        "correspondences": _correspondences(res.problem),
        "report": res.report.to_dict() if res.report else None,
    }
    write_json(out_path, doc)
    if res.report:
        print(res.report.table_row())
    print(f"solution written to {out_path}")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    images = build_images(cfg)
    markers = load_markers(cfg.path(cfg.markers))
    sol = read_json(args.solution or cfg.path(cfg.solution))
    T = SimilarityTransform.from_dict(sol["solution"]["transform"])
    labels = {(c["image_id"], c["detection_index"]): c["marker_id"] for c in sol.get("correspondences", [])}
    labelled = []
    for im in images:
        dets = []
        for k, d in enumerate(im.detections):
            mid = labels.get((im.image_id, k), d.marker_id)
            dets.append(det.EllipseDetection(d.image_id, mid, d.ellipse, d.outline, d.inlier_ratio))
        labelled.append(PosedImage(im.image_id, im.camera, im.pose_world_to_cam, tuple(dets)))
    problem = RegistrationProblem(tuple(labelled), markers)
    report = evaluate(problem, T, cfg.control_ids, cfg.pose_source)
    path = args.output or cfg.path(cfg.report)
    write_json(path, report.to_dict())
    print(report.table_row())
    return EXIT_OK


def cmd_chamfer(args, cfg: PipelineConfig | None) -> int:
    pred, gt = load_mesh(args.pred), load_mesh(args.gt)
    seed = args.seed if args.seed is not None else 0
    rep = chamfer_distance(pred, gt, spacing=args.spacing, outlier_cutoff=args.cutoff, seed=seed)
    if args.output:
        write_json(args.output, rep.to_dict())
    else:
        print(json.dumps(rep.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    from . import synth

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    noise = synth.NoiseSpec(
        outline_noise_sigma=args.outline_noise,
        vertex_noise_sigma=args.vertex_noise,
        outlier_fraction=args.outlier_fraction,
        pose_rotation_sigma=args.pose_rotation_noise,
        pose_translation_sigma=args.pose_translation_noise,
    )
    params = synth.SceneParams(
        n_markers=args.n_markers, n_control=args.n_control, n_images=args.n_images,
        resolution=synth.RESOLUTIONS[args.resolution],
    )
    scene = synth.generate_scene(params, seed=seed, noise=noise)
    dets, poses = synth.render_observations(scene, args.outline_points, unknown_ids=True)
    poses = synth.scale_poses(poses, args.scale)
    ids = range(len(scene.cameras))

    write_json(out / "cameras.json", {"cameras": [{"image_id": i, **c.to_dict()} for i, (c, _) in zip(ids, scene.cameras)]})
    if args.robot:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        t_c_ee = RigidTransform.from_rotvec(rng.normal(size=3) * 0.2, rng.normal(size=3) * 30)
        t_ee_b = [p.inverse() @ t_c_ee.inverse() for p in poses]
        write_json(out / "poses.json", {
            "mode": "robot",
            "t_c_ee": t_c_ee.to_dict(),
            "t_ee_b": [{"image_id": i, **t.to_dict()} for i, t in zip(ids, t_ee_b)],
        })
    else:
        write_json(out / "poses.json", {"mode": "world_to_camera", "poses": [{"image_id": i, **p.to_dict()} for i, p in zip(ids, poses)]})
    write_json(out / "detections_analytic.json", {"detections": [d.to_dict() for obs in dets for d in obs]})

    save_mesh(synth.scene_mesh(scene), out / "mesh.ply")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    inits = [{"id": k, "center": (m.center + rng.normal(size=3)).tolist(), "radius": m.radius}
             for k, m in zip(scene.marker_ids, scene.markers)]
    write_json(out / "marker_inits.json", {"markers": inits})

    images = []
    if args.render:
        (out / "images").mkdir(exist_ok=True)
        (out / "masks").mkdir(exist_ok=True)
        for i, img, masks in synth.render_sphere_images(scene):
            name = f"images/img_{i:03d}.pgm"
            det.write_image(out / name, img)
            entry = {"image_id": i, "path": name, "masks": []}
            for mid, m in sorted(masks.items()):
                mname = f"masks/img_{i:03d}_m{mid:02d}.pgm"
                det.write_image(out / mname, m.data.astype(np.uint8) * 255)
                entry["masks"].append({"marker_id": None, "paths": [mname], "origin": list(m.origin)})
            images.append(entry)

    write_json(out / "ground_truth.json", {
        "transform": SimilarityTransform(scene.ground_truth_transform.rigid, args.scale).to_dict(),
        "markers": [{"id": k, "center_S": m.center.tolist(), "radius": m.radius} for k, m in zip(scene.marker_ids, scene.markers)],
        "correspondences": [
            {"image_id": i, "detection_index": k, "marker_id": scene.marker_ids[j]}
            for i in ids
            for k, j in enumerate(sorted(scene.visible_ellipses(i)))
        ],
        "noise": noise.to_dict(),
        "params": params.to_dict(),
        "pose_scale": args.scale,
        "seed": seed,
    })
    config = PipelineConfig(
        base=out,
        detections="detections.json" if args.render else "detections_analytic.json",
        images=images,
        marker_radius=params.marker_radius,
        registration_ids=list(scene.registration_ids),
        control_ids=list(scene.control_ids),
        pose_source="robot" if args.robot else "synthetic",
        estimate_scale=args.scale != 1.0,
        seed=seed,
    )
    write_json(out / "config.json", config.to_dict())
    print(f"synthetic dataset written to {out}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap")
    common.add_argument("--output", type=Path, default=None, help="output path (default from config)")

    p = argparse.ArgumentParser(prog="spherereg", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", parents=[common], help="extract ellipse outlines from images and masks")
    d.add_argument("--outline-points", type=int, default=det.DEFAULT_OUTLINE_POINTS)

    sub.add_parser("fit-spheres", parents=[common], help="locate markers in the mesh by sphere ICP")

    r = sub.add_parser("register", parents=[common], help="match markers and refine the mesh-to-world transform")
    r.add_argument("--estimate-scale", action="store_true")
    r.add_argument("--init-image", type=int, default=None)

    e = sub.add_parser("evaluate", parents=[common], help="radial and reprojection errors on control markers")
    e.add_argument("--solution", type=Path, default=None)

    c = sub.add_parser("chamfer", parents=[common], help="Chamfer distance between two meshes")
    c.add_argument("pred", type=Path)
    c.add_argument("gt", type=Path)
    c.add_argument("--spacing", type=float, default=0.1, help="sample spacing in mm")
    c.add_argument("--cutoff", type=float, default=20.0, help="outlier cutoff in mm")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset with ground truth")
    s.add_argument("--n-markers", type=int, default=10)
    s.add_argument("--n-control", type=int, default=2)
    s.add_argument("--n-images", type=int, default=16)
    s.add_argument("--resolution", choices=sorted(("low", "medium", "high")), default="high")
    s.add_argument("--outline-points", type=int, default=det.DEFAULT_OUTLINE_POINTS)
    s.add_argument("--outline-noise", type=float, default=0.0, help="px")
    s.add_argument("--outlier-fraction", type=float, default=0.0)
    s.add_argument("--vertex-noise", type=float, default=0.0, help="mm")
    s.add_argument("--pose-rotation-noise", type=float, default=0.0, help="rad")
    s.add_argument("--pose-translation-noise", type=float, default=0.0, help="mm")
    s.add_argument("--scale", type=float, default=1.0, help="scale the camera poses (SfM gauge)")
    s.add_argument("--robot", action="store_true", help="write poses as robot kinematics")
    s.add_argument("--render", action="store_true", help="also render images and masks")
    return p


COMMANDS = {
    "detect": cmd_detect,
    "fit-spheres": cmd_fit_spheres,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "chamfer": cmd_chamfer,
    "synth": cmd_synth,
}


def _setup_logging() -> None:
    level = os.environ.get("SPHEREREG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    cv2.setNumThreads(max(1, args.threads))
    try:
        cfg = None
        if args.command not in ("chamfer", "synth"):
            if args.config is None:
                raise InputError(f"{args.command} needs --config")
            cfg = PipelineConfig.load(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
        return COMMANDS[args.command](args, cfg)
    except (InputError, ParseError, UnsupportedFormat, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SphereRegError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
