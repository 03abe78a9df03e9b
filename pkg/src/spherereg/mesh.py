"""Triangle meshes: ASCII PLY/OBJ I/O, exact surface distances, sphere ICP and Chamfer distance."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from .errors import Diverged, EmptyMesh, InsufficientSupport, ParseError, UnsupportedFormat
from .geometry import SphereMarker

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: NDArray[np.float64]
    triangles: NDArray[np.int64]

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("triangle with repeated vertex")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def corners(self) -> tuple[NDArray, NDArray, NDArray]:
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    @property
    def triangle_areas(self) -> NDArray[np.float64]:
        a, b, c = self.corners
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def area(self) -> float:
        return float(self.triangle_areas.sum())

    def transformed(self, transform) -> TriangleMesh:
        return TriangleMesh(transform.apply(self.vertices), self.triangles)

    @staticmethod
    def concatenate(meshes: list[TriangleMesh]) -> TriangleMesh:
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        return TriangleMesh(np.vstack(verts), np.vstack(tris))


# --- file I/O --------------------------------------------------------------------------------

def load_mesh(path: str | os.PathLike) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return _load_ply(path)
    if suffix == ".obj":
        return _load_obj(path)
    raise UnsupportedFormat(f"unsupported mesh format: {path.suffix!r}")


def save_mesh(mesh: TriangleMesh, path: str | os.PathLike) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        lines = [
            "ply", "format ascii 1.0",
            f"element vertex {len(mesh.vertices)}",
            "property double x", "property double y", "property double z",
            f"element face {len(mesh.triangles)}",
            "property list uchar int vertex_indices", "end_header",
        ]
        lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    elif suffix == ".obj":
        lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    else:
        raise UnsupportedFormat(f"unsupported mesh format: {path.suffix!r}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fan(poly: list[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _load_ply(path: Path) -> TriangleMesh:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        # binary payload after a valid header
        if b"format binary" in raw[:512]:
            raise UnsupportedFormat("binary PLY is not supported; convert to ASCII")
        raise ParseError("file is not ASCII text")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)

    elements: list[tuple[str, int, list[tuple[str, ...]]]] = []
    lineno = 1
    header_done = False
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise UnsupportedFormat(f"PLY format {' '.join(tok[1:])!r} is not supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", line=lineno)
            try:
                elements.append((tok[1], int(tok[2]), []))
            except ValueError:
                raise ParseError("element count is not an integer", line=lineno) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            elements[-1][2].append(tuple(tok[1:]))
        elif tok[0] == "end_header":
            header_done = True
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", line=lineno)
    if not header_done:
        raise ParseError("unterminated header", line=lineno)

    body = lines[lineno:]
    pos = 0
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    for name, count, props in elements:
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
            except ValueError:
                raise ParseError("vertex element lacks x/y/z properties") from None
        for _ in range(count):
            # skip blank lines inside the body
            while pos < len(body) and not body[pos].strip():
                pos += 1
            if pos >= len(body):
                raise ParseError(f"unexpected end of file in element {name!r}", line=lineno + pos + 1)
            tok = body[pos].split()
            here = lineno + pos + 1
            pos += 1
            try:
                if name == "vertex":
                    vertices.append([float(tok[ix]), float(tok[iy]), float(tok[iz])])
                elif name == "face":
                    n = int(tok[0])
                    idx = [int(t) for t in tok[1 : 1 + n]]
                    if len(idx) != n or n < 3:
                        raise ParseError("face has too few indices", line=here)
                    faces.extend(_fan(idx))
            except (ValueError, IndexError):
                raise ParseError(f"malformed {name} record", line=here) from None
    try:
        return TriangleMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def _load_obj(path: Path) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    vertices.append([float(tok[1]), float(tok[2]), float(tok[3])])
                elif tok[0] == "f":
                    idx = []
                    for t in tok[1:]:
                        k = int(t.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(vertices) + k)
                    if len(idx) < 3:
                        raise ParseError("face has too few indices", line=lineno)
                    faces.extend(_fan(idx))
            except (ValueError, IndexError):
                raise ParseError(f"malformed {tok[0]!r} record", line=lineno) from None
    try:
        return TriangleMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


# --- mesh builders ---------------------------------------------------------------------------

def icosphere(radius: float = 1.0, subdivisions: int = 4, center: ArrayLike = (0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere; ``10 * 4**k + 2`` vertices after ``k`` subdivisions."""
    p = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
        [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
        [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = [list(np.array(v, float) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.add(verts[i], verts[j])
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    v = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.asarray(faces))


def grid_patch(
    width: float, height: float, nx: int = 1, ny: int = 1, origin: ArrayLike = (0.0, 0.0, 0.0)
) -> TriangleMesh:
    """Flat rectangle in the z = origin[2] plane split into ``2 nx ny`` triangles."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1) + np.asarray(origin, dtype=np.float64)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(v, tris)


# --- exact point-to-surface distance ---------------------------------------------------------

def closest_points_on_triangles(p: NDArray, a: NDArray, b: NDArray, c: NDArray) -> NDArray:
    """Closest point on triangle (a, b, c) to p, row-wise (Voronoi-region walk)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[:] |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


class SurfaceDistance:
    """Exact unsigned distance from query points to a triangle mesh.

    Triangles are bucketed by circumscribing radius; each bucket holds a KD-tree
    over triangle centroids, and a query widens its k-nearest candidate set until
    the centroid lower bound ``|p - centroid| - radius`` certifies the minimum.
    The index is read-only after construction.
    """

    def __init__(self, mesh: TriangleMesh):
        if len(mesh.triangles) == 0:
            raise EmptyMesh("mesh has no triangles")
        a, b, c = mesh.corners
        self._a, self._b, self._c = a, b, c
        centroid = (a + b + c) / 3.0
        rad = np.max(np.stack([np.linalg.norm(x - centroid, axis=1) for x in (a, b, c)]), axis=0)
        level = np.floor(np.log2(np.maximum(rad, 1e-12))).astype(int)
        self._buckets = []
        for lv in np.unique(level):
            ids = np.nonzero(level == lv)[0]
            self._buckets.append((ids, cKDTree(centroid[ids]), float(rad[ids].max())))

    def _exact(self, p: NDArray, tri: NDArray) -> NDArray:
        q = closest_points_on_triangles(p, self._a[tri], self._b[tri], self._c[tri])
        return np.linalg.norm(q - p, axis=1)

    def query(self, points: ArrayLike, chunk: int = 100_000) -> NDArray[np.float64]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            out[s : s + chunk] = self._query_chunk(points[s : s + chunk])
        return out

    def _query_chunk(self, p: NDArray) -> NDArray:
        best = np.full(len(p), np.inf)
        for ids, tree, rmax in self._buckets:
            todo = np.arange(len(p))
            k = min(4, len(ids))
            while len(todo):
                dc, ic = tree.query(p[todo], k=k)
                dc = dc.reshape(len(todo), -1)
                ic = ic.reshape(len(todo), -1)
                for j in range(ic.shape[1]):
                    d = self._exact(p[todo], ids[ic[:, j]])
                    best[todo] = np.minimum(best[todo], d)
                if k >= len(ids):
                    break
                certified = best[todo] <= dc[:, -1] - rmax
                todo = todo[~certified]
                k = min(4 * k, len(ids))
        return best


# --- sampling --------------------------------------------------------------------------------

def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> NDArray[np.float64]:
    """Uniform area-weighted samples; the draw depends only on areas and the seed."""
    areas = mesh.triangle_areas
    total = areas.sum()
    if total <= 0 or n <= 0:
        raise EmptyMesh("mesh has zero area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    tri = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = mesh.corners
    return (
        (1.0 - r1)[:, None] * a[tri]
        + (r1 * (1.0 - r2))[:, None] * b[tri]
        + (r1 * r2)[:, None] * c[tri]
    )


def samples_for_spacing(area: float, spacing: float) -> int:
    # mean nearest-neighbour distance of a planar Poisson process is 1 / (2 sqrt(rho))
    return max(1, int(math.ceil(1.1 * area / (4.0 * spacing * spacing))))


# --- Chamfer distance ------------------------------------------------------------------------

@dataclass(frozen=True)
class ChamferReport:
    cd: float
    mean_pred_to_gt: float
    mean_gt_to_pred: float
    outlier_fraction: float
    sample_spacing: float
    outlier_cutoff: float = 20.0
    n_pred_samples: int = 0
    n_gt_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "cd": self.cd,
            "mean_pred_to_gt": self.mean_pred_to_gt,
            "mean_gt_to_pred": self.mean_gt_to_pred,
            "outlier_fraction": self.outlier_fraction,
            "sample_spacing": self.sample_spacing,
            "outlier_cutoff": self.outlier_cutoff,
            "n_pred_samples": self.n_pred_samples,
            "n_gt_samples": self.n_gt_samples,
        }


def chamfer_distance(
    pred: TriangleMesh,
    gt: TriangleMesh,
    spacing: float = 0.1,
    outlier_cutoff: float = 20.0,
    seed: int = 0,
    max_samples: int | None = None,
) -> ChamferReport:
    """Symmetric Chamfer distance between two surfaces.

    Each surface is sampled densely (mean sample spacing ``<= spacing``) and every
    sample is measured against the other *surface* exactly.  Distances above
    ``outlier_cutoff`` are dropped from their directional mean (per direction);
    ``outlier_fraction`` counts drops over all samples.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    for name, m in (("pred", pred), ("gt", gt)):
        if len(m.triangles) == 0 or m.area <= 0:
            raise EmptyMesh(f"{name} mesh is empty")
    n_pred = samples_for_spacing(pred.area, spacing)
    n_gt = samples_for_spacing(gt.area, spacing)
    if max_samples is not None:
        n_pred, n_gt = min(n_pred, max_samples), min(n_gt, max_samples)
    log.info("chamfer: %d pred and %d gt samples", n_pred, n_gt)
    # same seed for both meshes: swapping the arguments swaps the directional terms exactly
    xs_pred = sample_surface(pred, n_pred, seed)
    xs_gt = sample_surface(gt, n_gt, seed)
    d_pg = SurfaceDistance(gt).query(xs_pred)
    d_gp = SurfaceDistance(pred).query(xs_gt)
    keep_pg = d_pg <= outlier_cutoff
    keep_gp = d_gp <= outlier_cutoff
    mean_pg = float(d_pg[keep_pg].mean()) if keep_pg.any() else math.nan
    mean_gp = float(d_gp[keep_gp].mean()) if keep_gp.any() else math.nan
    excluded = (~keep_pg).sum() + (~keep_gp).sum()
    return ChamferReport(
        cd=0.5 * (mean_pg + mean_gp),
        mean_pred_to_gt=mean_pg,
        mean_gt_to_pred=mean_gp,
        outlier_fraction=float(excluded) / float(n_pred + n_gt),
        sample_spacing=spacing,
        outlier_cutoff=outlier_cutoff,
        n_pred_samples=n_pred,
        n_gt_samples=n_gt,
    )


# --- sphere localisation ---------------------------------------------------------------------

@dataclass(frozen=True)
class SphereFitResult:
    marker: SphereMarker
    rms_residual: float
    n_support_vertices: int
    iterations: int = 0
    rms_history: tuple[float, ...] = field(default=(), repr=False)


def fit_sphere_icp(
    mesh: TriangleMesh | NDArray,
    radius: float,
    init_center: ArrayLike,
    max_iters: int = 100,
    capture_band: float | None = None,
    tol: float = 1e-6,
) -> SphereFitResult:
    """Localise a sphere of known radius in a mesh, starting from a picked centre.

    Each iteration takes the vertices whose radial deviation from the current
    sphere is within ``capture_band`` (default ``0.2 * radius``) and moves the
    centre by a Gauss-Newton step on ``sum (|v - c| - r)^2``.
    """
    verts = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=np.float64)
    init = np.asarray(init_center, dtype=np.float64)
    band = 0.2 * radius if capture_band is None else capture_band
    if np.min(np.linalg.norm(verts - init, axis=1)) > 2.0 * radius:
        raise InsufficientSupport("initial centre is farther than 2 radii from every vertex")

    def residuals(c, sel):
        return np.linalg.norm(sel - c, axis=1) - radius

    c = init.copy()
    history: list[float] = []
    it = 0
    n_sel = 0
    for it in range(1, max_iters + 1):
        dist = np.linalg.norm(verts - c, axis=1)
        sel = verts[np.abs(dist - radius) <= band]
        n_sel = len(sel)
        if n_sel < 10:
            raise InsufficientSupport(f"only {n_sel} vertices within the capture band")
        r = residuals(c, sel)
        cost = float(r @ r)
        history.append(math.sqrt(cost / n_sel))
        diff = sel - c
        J = -diff / np.linalg.norm(diff, axis=1)[:, None]
        step = -np.linalg.lstsq(J, r, rcond=None)[0]
        # backtrack so the fixed-support cost never increases
        alpha = 1.0
        while alpha > 1e-6:
            rn = residuals(c + alpha * step, sel)
            if rn @ rn <= cost:
                break
            alpha *= 0.5
        else:
            alpha = 0.0
        c = c + alpha * step
        if np.linalg.norm(c - init) > 2.0 * radius:
            raise Diverged("sphere centre left the 2-radius ball around the initial guess")
        if alpha * np.linalg.norm(step) < tol:
            break
    dist = np.linalg.norm(verts - c, axis=1)
    sel = verts[np.abs(dist - radius) <= band]
    if len(sel) < 10:
        raise InsufficientSupport(f"only {len(sel)} vertices within the capture band")
    r = residuals(c, sel)
    rms = float(math.sqrt(r @ r / len(sel)))
    history.append(rms)
    return SphereFitResult(SphereMarker(c, radius), rms, len(sel), it, tuple(history))


def ray_sphere_radial_error(ray_origin: ArrayLike, ray_dir: ArrayLike, m: SphereMarker) -> NDArray | float:
    """``| dist(line, centre) - r |``: zero exactly when the ray grazes the sphere."""
    o = np.asarray(ray_origin, dtype=np.float64)
    d = np.asarray(ray_dir, dtype=np.float64)
    dist = np.linalg.norm(np.cross(m.center - o, d), axis=-1)
    err = np.abs(dist - m.radius)
    return float(err) if np.ndim(err) == 0 else err
