"""Ellipse outline extraction for imaged spherical markers.

Pipeline per (image, marker): aggregate the per-channel segmentation masks,
fit a coarse ellipse to the mask, collect Canny edges inside an envelope
around it, clean them with RANSAC, and resample the fitted ellipse at
equal arc-length steps.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from PIL import Image
from scipy import integrate, ndimage, optimize

from .errors import EmptyMask, FitFailed, NoEdges, NotAnEllipse, RansacFailed
from .geometry import Ellipse, conic_to_ellipse, fit_conic_direct, sampson_distance

log = logging.getLogger(__name__)

DEFAULT_OUTLINE_POINTS = 200
REFERENCE_WIDTH = 9504  # envelope defaults are stated for this sensor width


@dataclass(frozen=True)
class DetectionMask:
    """Binary mask of one marker; ``data[row, col]`` with ``origin = (x0, y0)`` in the full image."""

    data: NDArray[np.bool_]
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        d = np.asarray(self.data).astype(bool)
        if d.ndim != 2:
            raise ValueError("mask must be two-dimensional")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))

    @property
    def area(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class EdgePointSet:
    points: NDArray[np.float64]  # (n, 2) full-image (x, y)
    magnitude: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class EllipseDetection:
    image_id: int
    marker_id: int | None
    ellipse: Ellipse
    outline: NDArray[np.float64]
    inlier_ratio: float = 1.0

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "marker_id": self.marker_id,
            "ellipse": self.ellipse.to_dict(),
            "outline": np.asarray(self.outline).tolist(),
            "inlier_ratio": self.inlier_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EllipseDetection:
        mid = d.get("marker_id")
        return cls(
            image_id=int(d["image_id"]),
            marker_id=None if mid is None else int(mid),
            ellipse=Ellipse.from_dict(d["ellipse"]),
            outline=np.asarray(d["outline"], dtype=np.float64).reshape(-1, 2),
            inlier_ratio=float(d.get("inlier_ratio", 1.0)),
        )


# --- masks ------------------------------------------------------------------------------------

def aggregate_masks(*masks: DetectionMask) -> DetectionMask:
    """OR the channel masks, open with a 3x3 element, keep the centre pixel's component."""
    if not masks:
        raise ValueError("need at least one mask")
    shape = masks[0].data.shape
    if any(m.data.shape != shape for m in masks):
        raise ValueError("channel masks must share dimensions")
    agg = np.zeros(shape, dtype=bool)
    for m in masks:
        agg |= m.data
    se = np.ones((3, 3), dtype=bool)
    agg = ndimage.binary_dilation(ndimage.binary_erosion(agg, se), se)
    h, w = shape
    labels, _ = ndimage.label(agg, structure=se)
    centre_label = labels[h // 2, w // 2]
    if centre_label == 0:
        raise EmptyMask("centre pixel is background after post-processing")
    return DetectionMask(labels == centre_label, masks[0].origin)


def _moment_ellipse(data: NDArray[np.bool_]) -> tuple[float, float, float, float, float]:
    ys, xs = np.nonzero(data)
    cx, cy = xs.mean(), ys.mean()
    cov = np.cov(np.stack([xs - cx, ys - cy]), bias=True)
    # a filled ellipse has second moments a^2/4, b^2/4; +1/12 is the pixel box variance
    w, V = np.linalg.eigh(cov - np.eye(2) / 12.0)
    w = np.maximum(w, 0.25)
    a, b = 2.0 * math.sqrt(w[1]), 2.0 * math.sqrt(w[0])
    theta = math.atan2(V[1, 1], V[0, 1])
    return cx, cy, a, b, theta


class _MaskLoss:
    """FP + FN pixel count of a candidate ellipse against a mask."""

    def __init__(self, data: NDArray[np.bool_], pad: int):
        m = np.pad(data, pad)
        self.mask = m
        self.area = int(m.sum())
        self.pad = pad
        ys, xs = np.mgrid[0 : m.shape[0], 0 : m.shape[1]]
        self.x = (xs - pad).astype(np.float64)
        self.y = (ys - pad).astype(np.float64)

    def __call__(self, p: NDArray) -> float:
        cx, cy, la, lb, th = p
        a, b = math.exp(la), math.exp(lb)
        c, s = math.cos(th), math.sin(th)
        dx = self.x - cx
        dy = self.y - cy
        u = (c * dx + s * dy) / a
        v = (-s * dx + c * dy) / b
        e = u * u + v * v <= 1.0
        return float(np.count_nonzero(e != self.mask))


def fit_ellipse_to_mask(mask: DetectionMask, n_starts: int = 8, seed: int = 0) -> Ellipse:
    """Ellipse minimising #FP + #FN against the mask, best of ``n_starts`` Nelder-Mead runs."""
    if mask.area == 0:
        raise ValueError("mask has no foreground pixels")
    cx, cy, a, b, th = _moment_ellipse(mask.data)
    rng = np.random.default_rng(seed)
    pad = int(math.ceil(0.2 * a)) + 3
    loss = _MaskLoss(mask.data, pad)
    base = np.array([cx, cy, math.log(a), math.log(b), th])
    best_x, best_f = base, loss(base)
    for k in range(max(1, n_starts)):
        x0 = base.copy()
        if k:
            x0 += rng.normal(size=5) * [0.5, 0.5, 0.03, 0.03, 0.1]
        step = np.array([1.0, 1.0, 0.5 / max(a, 1.0), 0.5 / max(b, 1.0), 0.05])
        simplex = np.vstack([x0, x0 + np.diag(step)])
        res = optimize.minimize(
            loss, x0, method="Nelder-Mead",
            options={"initial_simplex": simplex, "xatol": 1e-3, "fatol": 0.5, "maxiter": 600},
        )
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
        if best_f == 0:
            break  # a perfect pixel match cannot be improved on
    if best_f > 0.5 * mask.area:
        raise FitFailed(f"mask fit loss {best_f:.0f} exceeds half the mask area {mask.area}")
    x0, y0 = mask.origin
    return Ellipse(best_x[0] + x0, best_x[1] + y0, math.exp(best_x[2]), math.exp(best_x[3]), best_x[4])


# --- edges ------------------------------------------------------------------------------------

def canny(
    image: ArrayLike, sigma: float = 1.0, low: float = 0.1, high: float = 0.3
) -> tuple[NDArray[np.bool_], NDArray[np.float64]]:
    """Canny edges; ``low``/``high`` are fractions of the maximum gradient magnitude.

    Returns the edge map and the gradient magnitude.
    """
    img = np.asarray(image, dtype=np.float64)
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    mmax = mag.max()
    if mmax == 0:
        return np.zeros(img.shape, dtype=bool), mag

    # non-maximum suppression along the gradient, quantised to 4 directions
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    sector = np.mod(np.round(ang / (np.pi / 4)), 4).astype(int)
    padded = np.pad(mag, 1)
    H, W = mag.shape
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}  # (drow, dcol)
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dr, dc) in offsets.items():
        fwd = padded[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W]
        bwd = padded[1 - dr : 1 - dr + H, 1 - dc : 1 - dc + W]
        sel = sector == s
        keep |= sel & (mag >= fwd) & (mag > bwd)
    nms = mag * keep

    strong = nms >= high * mmax
    weak = nms >= low * mmax
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(weak), mag
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels], mag


def _ellipse_bbox(e: Ellipse) -> tuple[float, float, float, float]:
    c, s = math.cos(e.theta), math.sin(e.theta)
    hx = math.hypot(e.a * c, e.b * s)
    hy = math.hypot(e.a * s, e.b * c)
    return e.cx - hx, e.cy - hy, e.cx + hx, e.cy + hy


def default_envelope(image_width: int) -> float:
    return 10.0 * image_width / REFERENCE_WIDTH


def extract_edge_points(
    image: ArrayLike,
    initial: Ellipse,
    envelope_width: float,
    sigma: float = 1.0,
    low: float = 0.1,
    high: float = 0.3,
) -> EdgePointSet:
    """Canny edge pixels within ``envelope_width`` px (first-order geometric distance) of ``initial``."""
    if envelope_width <= 0:
        raise ValueError("envelope width must be positive")
    img = np.asarray(image)
    if img.ndim == 3:
        img = img.mean(axis=2)
    H, W = img.shape
    margin = envelope_width + 3.0 * sigma + 3.0
    x0, y0, x1, y1 = _ellipse_bbox(initial)
    c0, r0 = max(int(math.floor(x0 - margin)), 0), max(int(math.floor(y0 - margin)), 0)
    c1, r1 = min(int(math.ceil(x1 + margin)) + 1, W), min(int(math.ceil(y1 + margin)) + 1, H)
    if c1 - c0 < 3 or r1 - r0 < 3:
        raise NoEdges("initial ellipse lies outside the image")
    edges, mag = canny(img[r0:r1, c0:c1].astype(np.float64), sigma, low, high)
    rows, cols = np.nonzero(edges)
    pts = np.stack([cols + c0, rows + r0], axis=1).astype(np.float64)
    near = sampson_distance(initial.to_conic(), pts) <= envelope_width if len(pts) else np.zeros(0, bool)
    pts, m = pts[near], mag[rows[near], cols[near]]
    if len(pts) < 10:
        raise NoEdges(f"only {len(pts)} edge points inside the envelope")
    return EdgePointSet(pts, m)


# --- RANSAC -----------------------------------------------------------------------------------

def _conics_through_5(samples: NDArray) -> NDArray:
    """Conic coefficient vectors (A, B, C, D, E, F) through each row's 5 points."""
    x, y = samples[..., 0], samples[..., 1]
    D = np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=-1)
    return np.linalg.svd(D)[2][:, -1, :]


def _sampson_batch(coef: NDArray, x: NDArray, y: NDArray) -> NDArray:
    A, B, C, D, E, F = (coef[:, k : k + 1] for k in range(6))
    alg = A * x * x + B * x * y + C * y * y + D * x + E * y + F
    gx = 2 * A * x + B * y + D
    gy = B * x + 2 * C * y + E
    return np.abs(alg) / np.maximum(np.hypot(gx, gy), 1e-300)


def ransac_ellipse(
    points: EdgePointSet | ArrayLike,
    inlier_threshold: float = 1.0,
    iterations: int = 2000,
    seed: int = 0,
    min_inlier_ratio: float = 0.5,
) -> tuple[Ellipse, NDArray[np.bool_]]:
    """Robust ellipse fit: 5-point conic hypotheses, consensus by Sampson distance,
    then a direct least-squares refit on the inliers.  Deterministic for a given seed."""
    pts = points.points if isinstance(points, EdgePointSet) else np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 5:
        raise ValueError("RANSAC needs at least 5 points")
    mu = pts.mean(axis=0)
    sc = 1.0 / max(np.sqrt(((pts - mu) ** 2).sum(axis=1)).mean(), 1e-12)
    q = (pts - mu) * sc
    thr = inlier_threshold * sc
    rng = np.random.default_rng(seed)
    idx = np.argsort(rng.random((iterations, n)), axis=1)[:, :5] if n <= 64 else _sample_indices(rng, iterations, n)

    best_count, best_inliers = -1, None
    chunk = max(1, 2_000_000 // max(n, 1))
    for s in range(0, iterations, chunk):
        coef = _conics_through_5(q[idx[s : s + chunk]])
        A, B, C = coef[:, 0], coef[:, 1], coef[:, 2]
        is_ellipse = 4 * A * C - B * B > 0
        d = _sampson_batch(coef, q[None, :, 0], q[None, :, 1])
        inl = (d <= thr) & is_ellipse[:, None]
        counts = inl.sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_inliers = int(counts[k]), inl[k]
    if best_count < 5:
        raise RansacFailed("no elliptical consensus set")

    inliers = best_inliers
    E = None
    for _ in range(10):
        try:
            E = fit_conic_direct(pts[inliers])
        except NotAnEllipse:
            raise RansacFailed("inlier set is not elliptical") from None
        new = sampson_distance(E, pts) <= inlier_threshold
        if new.sum() < 5 or np.array_equal(new, inliers):
            break
        inliers = new
    ratio = float(inliers.sum()) / n
    if ratio < min_inlier_ratio:
        raise RansacFailed(f"inlier ratio {ratio:.2f} below {min_inlier_ratio}")
    try:
        return conic_to_ellipse(E), inliers
    except NotAnEllipse:
        raise RansacFailed("refit is not an ellipse") from None


def _sample_indices(rng: np.random.Generator, iterations: int, n: int) -> NDArray:
    # 5 distinct indices per row without materialising an (iterations, n) permutation
    idx = rng.integers(0, n, size=(iterations, 5))
    for _ in range(20):
        s = np.sort(idx, axis=1)
        dup = np.any(s[:, 1:] == s[:, :-1], axis=1)
        if not dup.any():
            break
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), 5))
    return idx


# --- equal arc-length sampling ----------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


def _arc_length(a: float, b: float, t0: NDArray, t1: NDArray) -> NDArray:
    """Arc length between eccentric anomalies, 20-point Gauss-Legendre per interval."""
    mid, half = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
    t = mid[..., None] + half[..., None] * _GL_NODES
    speed = np.hypot(a * np.sin(t), b * np.cos(t))
    return half * (speed @ _GL_WEIGHTS)


def sample_outline(e: Ellipse, L: int = DEFAULT_OUTLINE_POINTS) -> NDArray[np.float64]:
    """``L`` points on the ellipse, equally spaced in arc length, starting at the major vertex."""
    if L < 4:
        raise ValueError("need at least 4 outline points")
    a, b = e.a, e.b
    # cumulative arc length on a fine knot table, tied to the adaptive perimeter
    n_knots = 4 * L
    knots = np.linspace(0.0, 2.0 * math.pi, n_knots + 1)
    seg = _arc_length(a, b, knots[:-1], knots[1:])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    perimeter = ellipse_perimeter(e)
    if abs(cum[-1] - perimeter) > 1e-9 * perimeter:
        raise ArithmeticError("arc-length table disagrees with the adaptive perimeter")
    targets = cum[-1] * np.arange(L) / L
    k = np.minimum(np.searchsorted(cum, targets, side="right") - 1, n_knots - 1)
    t = knots[k] + (targets - cum[k]) / seg[k] * (knots[k + 1] - knots[k])
    for _ in range(6):  # Newton on s(t) = target
        f = cum[k] + _arc_length(a, b, knots[k], t) - targets
        t = t - f / np.hypot(a * np.sin(t), b * np.cos(t))
    return e.point_at(t)


def ellipse_perimeter(e: Ellipse) -> float:
    return integrate.quad(
        lambda t: math.hypot(e.a * math.sin(t), e.b * math.cos(t)), 0.0, 2 * math.pi, epsrel=1e-12, limit=200
    )[0]


# --- end to end -------------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorConfig:
    n_starts: int = 8
    envelope_width: float | None = None  # None: scale 10 px by image width / 9504
    canny_sigma: float = 1.0
    canny_low: float = 0.1
    canny_high: float = 0.3
    inlier_threshold: float = 1.0
    ransac_iterations: int = 2000
    outline_points: int = DEFAULT_OUTLINE_POINTS


def detect_marker(
    image: ArrayLike,
    masks: list[DetectionMask],
    image_id: int,
    marker_id: int | None = None,
    config: DetectorConfig = DetectorConfig(),
    seed: int = 0,
) -> EllipseDetection:
    """Run the whole extraction chain for one marker in one image."""
    img = np.asarray(image)
    mask = aggregate_masks(*masks)
    initial = fit_ellipse_to_mask(mask, config.n_starts, seed)
    env = config.envelope_width or max(default_envelope(img.shape[1]), 1.0)
    edges = extract_edge_points(img, initial, env, config.canny_sigma, config.canny_low, config.canny_high)
    ell, inliers = ransac_ellipse(edges, config.inlier_threshold, config.ransac_iterations, seed)
    outline = sample_outline(ell, config.outline_points)
    log.debug("image %s marker %s: %d edges, %.1f%% inliers", image_id, marker_id, len(edges), 100 * inliers.mean())
    return EllipseDetection(image_id, marker_id, ell, outline, float(inliers.mean()))


def detection_seed(base_seed: int, image_id: int, marker_index: int) -> int:
    """Per-detection RNG seed, independent of processing order."""
    return int(np.random.SeedSequence([base_seed, image_id, marker_index]).generate_state(1)[0])


# --- portable anymap I/O ----------------------------------------------------------------------

def read_image(path: str | os.PathLike) -> NDArray:
    """Read a PGM/PPM (8 or 16 bit) as an array; RGB images keep their channel axis."""
    with Image.open(path) as im:
        arr = np.array(im)
    return arr


def to_gray(img: NDArray) -> NDArray[np.float64]:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def write_image(path: str | os.PathLike, arr: ArrayLike) -> None:
    """Write a PGM (2-D) or PPM (H x W x 3) atomically; uint16 arrays stay 16 bit."""
    arr = np.asarray(arr)
    if arr.dtype not in (np.uint8, np.uint16):
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{path.suffix}")
    Image.fromarray(arr).save(tmp)
    os.replace(tmp, path)


def read_mask(path: str | os.PathLike, origin=(0, 0)) -> DetectionMask:
    return DetectionMask(to_gray(read_image(path)) > 127, origin)

