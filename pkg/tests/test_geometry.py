import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spherereg.errors import NotAnEllipse, PointBehindCamera
from spherereg.geometry import (
    CameraModel,
    Ellipse,
    RigidTransform,
    SimilarityTransform,
    SphereMarker,
    compose,
    conic_point_residual,
    conic_to_ellipse,
    ellipse_to_conic,
    fit_conic_direct,
    normalize_conic,
    point_ellipse_distance,
    project_point,
    project_sphere,
    ray_line_distance,
    rotation_angle_between,
    rotvec_to_matrix,
    sphere_center_from_conic,
    sphere_cone,
    sphere_dual_quadric,
)


def Rz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def homog(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def svd_conic(points):
    # independent brute-force conic fit: null vector of the design matrix
    x, y = points[:, 0], points[:, 1]
    D = np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=1)
    v = np.linalg.svd(D)[2][-1]
    A, B, C, Dd, E, F = v
    return normalize_conic(np.array([[A, B / 2, Dd / 2], [B / 2, C, E / 2], [Dd / 2, E / 2, F]]))


@pytest.fixture
def cam():
    return CameraModel(fx=1000, fy=1000, cx=500, cy=500, width=1000, height=1000)


# --- transforms -----------------------------------------------------------------

def test_compose_identity():
    I = RigidTransform.identity()
    T = compose(I, I)
    assert np.allclose(T.matrix, np.eye(4), atol=1e-12)


def test_compose_inverse_is_identity():
    T = RigidTransform.from_rotvec([0.3, -1.1, 0.7], [10.0, -4.0, 250.0])
    assert np.allclose((T @ T.inverse()).matrix, np.eye(4), atol=1e-9)
    assert np.allclose((T.inverse() @ T).matrix, np.eye(4), atol=1e-9)


def test_compose_hand_chain():
    t_ee_b = RigidTransform(Rz(90), [100, 0, 0])
    t_c_ee = RigidTransform(np.eye(3), [0, 0, 50])
    got = compose(t_ee_b, t_c_ee)
    oracle = homog(Rz(90), [100, 0, 0]) @ homog(np.eye(3), [0, 0, 50])
    assert np.allclose(got.matrix, oracle, atol=1e-12)
    # z is invariant under Rz, so the offset along z survives unchanged
    assert np.allclose(got.translation, [100, 0, 50], atol=1e-12)
    assert np.allclose(got.rotation, Rz(90), atol=1e-12)
    # an x-offset on the camera side is the case that rotates into +y
    got_x = compose(t_ee_b, RigidTransform(np.eye(3), [50, 0, 0]))
    assert np.allclose(got_x.translation, [100, 50, 0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9), st.lists(st.floats(-500, 500), min_size=9, max_size=9))
def test_compose_associative(rv, tr):
    a = RigidTransform.from_rotvec(rv[0:3], tr[0:3])
    b = RigidTransform.from_rotvec(rv[3:6], tr[3:6])
    c = RigidTransform.from_rotvec(rv[6:9], tr[6:9])
    lhs = (a @ b) @ c
    rhs = a @ (b @ c)
    assert np.allclose(lhs.matrix, rhs.matrix, atol=1e-9)
    R = lhs.rotation
    assert np.linalg.norm(R.T @ R - np.eye(3)) <= 1e-9
    assert abs(np.linalg.det(R) - 1) <= 1e-9


def test_rigid_rejects_non_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), [0, 0, 0])


def test_similarity_unit_scale_matches_rigid():
    T = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3])
    S = SimilarityTransform(T, 1.0)
    pts = np.random.default_rng(0).normal(size=(20, 3)) * 100
    assert np.array_equal(S.apply(pts), T.apply(pts))
    with pytest.raises(ValueError):
        SimilarityTransform(T, 0.0)


def test_rotation_angle_small():
    R = rotvec_to_matrix([1e-9, 0, 0])
    assert rotation_angle_between(np.eye(3), R) == pytest.approx(1e-9, rel=1e-6)


# --- camera -----------------------------------------------------------------------

def test_project_point_principal(cam):
    uv = project_point(cam, RigidTransform.identity(), [0, 0, 1000])
    assert np.allclose(uv, [500, 500])


def test_project_point_offaxis(cam):
    uv = project_point(cam, RigidTransform.identity(), [100, 0, 1000])
    P = cam.projection_matrix(RigidTransform.identity())
    h = P @ np.array([100, 0, 1000, 1.0])
    assert np.allclose(uv, [600, 500])
    assert np.allclose(uv, h[:2] / h[2])


def test_project_point_behind(cam):
    with pytest.raises(PointBehindCamera):
        project_point(cam, RigidTransform.identity(), [0, 0, -1])


def test_distortion_round_trip_grid():
    cam = CameraModel(2000, 2000, 960, 540, 1920, 1080, k1=-0.12, k2=0.03, p1=4e-4, p2=-3e-4)
    u, v = np.meshgrid(np.linspace(1, 1918, 100), np.linspace(1, 1078, 100))
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    back = cam.undistort_pixels(cam.distort_pixels(uv))
    assert np.max(np.abs(back - uv)) <= 1e-6


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        CameraModel(1, 1, 10, 0, 10, 10)


# --- quadrics and conics ---------------------------------------------------------------

def test_dual_quadric_origin():
    Q = sphere_dual_quadric(SphereMarker([0, 0, 0], 1))
    assert np.allclose(Q, np.diag([-1, -1, -1, 1.0]))


def test_dual_quadric_tangent_planes():
    Q = sphere_dual_quadric(SphereMarker([0, 0, 5], 1))
    tangent = np.array([0, 0, 1, -4.0])  # z = 4
    through_origin = np.array([0, 0, 1, 0.0])  # z = 0
    assert tangent @ Q @ tangent == pytest.approx(0.0, abs=1e-12)
    assert through_origin @ Q @ through_origin == pytest.approx(24.0)
    assert np.allclose(Q, Q.T)
    assert Q[3, 3] == 1.0


def test_project_sphere_on_axis_radius():
    cam = CameraModel(1000, 1000, 0.5, 0.5, 10, 10)
    E = project_sphere(cam.projection_matrix(RigidTransform.identity()), SphereMarker([0, 0, 5000], 1000))
    e = conic_to_ellipse(E)
    assert e.a == pytest.approx(204.124145, abs=1e-5)
    assert e.b == pytest.approx(e.a, abs=1e-9)

    # brute force: tangent rays at half-angle asin(r/d) around the optical axis
    alpha = math.asin(1000 / 5000)
    phi = np.linspace(0, 2 * np.pi, 10_000, endpoint=False)
    rays = np.stack([np.sin(alpha) * np.cos(phi), np.sin(alpha) * np.sin(phi), np.full_like(phi, np.cos(alpha))], 1)
    img = 1000 * rays[:, :2] / rays[:, 2:] + 0.5
    assert np.max(np.abs(np.linalg.norm(img - 0.5, axis=1) - e.a)) < 1e-9


def silhouette_points(center, r, n):
    # contour generator: circle on the sphere whose rays from the origin are tangent
    c = np.asarray(center, float)
    d = np.linalg.norm(c)
    u = c / d
    ctr = c * (1 - r * r / d / d)
    rad = r * math.sqrt(d * d - r * r) / d
    e1 = np.cross(u, [0, 1, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    phi = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return ctr + rad * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)


def test_project_sphere_off_axis_brute_force():
    cam = CameraModel(1000, 1000, 0.5, 0.5, 10, 10)
    m = SphereMarker([2000, 0, 5000], 1000)
    E = project_sphere(cam.projection_matrix(RigidTransform.identity()), m)
    e = conic_to_ellipse(E)
    assert e.a > e.b

    X = silhouette_points(m.center, m.radius, 10_000)
    img = 1000 * X[:, :2] / X[:, 2:] + 0.5
    oracle = conic_to_ellipse(svd_conic(img))
    assert abs(oracle.cx - e.cx) < 1e-3 and abs(oracle.cy - e.cy) < 1e-3
    assert abs(oracle.a - e.a) < 1e-3 and abs(oracle.b - e.b) < 1e-3


def random_scene(rng):
    cam = CameraModel(1200, 1100, 640, 480, 1280, 960)
    pose = RigidTransform.from_rotvec(rng.normal(size=3) * 0.3, rng.normal(size=3) * 50)
    # put the sphere 300-900 mm in front of the camera
    xc = np.array([rng.uniform(-150, 150), rng.uniform(-150, 150), rng.uniform(300, 900)])
    m = SphereMarker(pose.inverse().apply(xc), rng.uniform(5, 40))
    return cam, pose, m


@pytest.mark.parametrize("seed", range(10))
def test_outline_rays_are_tangent(seed):
    rng = np.random.default_rng(seed)
    cam, pose, m = random_scene(rng)
    E = project_sphere(cam.projection_matrix(pose), m)
    e = conic_to_ellipse(E)
    pts = e.point_at(np.linspace(0, 2 * np.pi, 360, endpoint=False))
    dirs_c = cam.backproject(pts)
    inv = pose.inverse()
    dirs_w = dirs_c @ inv.rotation.T
    dist = ray_line_distance(inv.translation, dirs_w, m.center)
    assert np.max(np.abs(dist - m.radius)) <= 1e-6
    assert np.max(np.abs(conic_point_residual(E, pts))) <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_projection_equivariance(seed):
    rng = np.random.default_rng(seed)
    cam, pose, m = random_scene(rng)
    P = cam.projection_matrix(pose)
    T = RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3) * 100)
    P2 = P @ T.inverse().matrix
    m2 = SphereMarker(T.apply(m.center), m.radius)
    assert np.allclose(project_sphere(P, m), project_sphere(P2, m2), atol=1e-9)


def test_closed_form_cone_matches_eq2():
    rng = np.random.default_rng(3)
    cam, pose, m = random_scene(rng)
    E = project_sphere(cam.projection_matrix(pose), m)
    X = pose.apply(m.center)
    E_cf = normalize_conic(cam.K_inv.T @ -sphere_cone(X, m.radius) @ cam.K_inv)
    assert np.allclose(E, E_cf, atol=1e-10)


def test_sphere_center_from_conic():
    rng = np.random.default_rng(4)
    cam, pose, m = random_scene(rng)
    E = project_sphere(cam.projection_matrix(pose), m)
    assert np.allclose(sphere_center_from_conic(E, cam, m.radius), pose.apply(m.center), atol=1e-7)


# --- conic residual and ellipse conversion ----------------------------------------------

def test_conic_point_residual_examples():
    E = np.diag([1, 1, -1.0]) / math.sqrt(3)
    assert conic_point_residual(E, [1, 0]) == pytest.approx(0.0, abs=1e-15)
    assert conic_point_residual(E, [0, 0]) == pytest.approx(-1 / math.sqrt(3))
    assert conic_point_residual(E, [2, 0]) == pytest.approx(3 / math.sqrt(3))
    # scale and sign of the input conic do not matter
    assert conic_point_residual(-7 * E, [2, 0]) == pytest.approx(3 / math.sqrt(3))


def test_unit_circle_conic():
    E = ellipse_to_conic(Ellipse(0, 0, 1, 1, 0))
    assert np.allclose(E, np.diag([1, 1, -1.0]) / math.sqrt(3))


def test_ellipse_round_trip():
    e = Ellipse(5, 3, 4, 2, math.pi / 6)
    back = conic_to_ellipse(ellipse_to_conic(e))
    for k in ("cx", "cy", "a", "b", "theta"):
        assert getattr(back, k) == pytest.approx(getattr(e, k), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-20, 20), st.floats(-20, 20),
    st.floats(1, 500), st.floats(0.2, 1.0), st.floats(0, math.pi - 1e-6),
)
def test_ellipse_round_trip_property(ux, uy, a, ratio, theta):
    # homogeneous conics lose ~|centre|^2/a^2 ulps, so keep centres within 20 semi-axes
    cx, cy = ux * a, uy * a
    b = a * ratio
    if a - b < 1e-3:
        return  # orientation is ill-defined for near circles
    e = Ellipse(cx, cy, a, b, theta)
    back = conic_to_ellipse(ellipse_to_conic(e))
    assert back.cx == pytest.approx(cx, abs=1e-9 * max(1, abs(cx), a))
    assert back.cy == pytest.approx(cy, abs=1e-9 * max(1, abs(cy), a))
    assert back.a == pytest.approx(a, rel=1e-9)
    assert back.b == pytest.approx(b, rel=1e-9)
    dth = abs(back.theta - e.theta)
    assert min(dth, math.pi - dth) < 1e-7


def test_ellipse_normalises_axes():
    e = Ellipse(0, 0, 1, 3, 0.2)
    assert e.a == 3 and e.b == 1
    assert e.theta == pytest.approx(0.2 + math.pi / 2)
    assert 0 <= Ellipse(0, 0, 3, 1, -0.5).theta < math.pi


def test_two_lines_not_ellipse():
    # x^2 - y^2 = 0
    with pytest.raises(NotAnEllipse):
        conic_to_ellipse(np.diag([1.0, -1.0, 0.0]))
    # hyperbola x^2 - y^2 - 1 = 0 shares the (+,-,-) signature but is not an ellipse
    with pytest.raises(NotAnEllipse):
        conic_to_ellipse(np.diag([1.0, -1.0, -1.0]))
    # imaginary ellipse x^2 + y^2 + 1 = 0
    with pytest.raises(NotAnEllipse):
        conic_to_ellipse(np.diag([1.0, 1.0, 1.0]))


def test_fit_conic_direct_exact():
    e = Ellipse(300.5, -20, 80, 35, 1.1)
    pts = e.point_at(np.linspace(0, 2 * np.pi, 50, endpoint=False))
    f = conic_to_ellipse(fit_conic_direct(pts))
    assert np.allclose([f.cx, f.cy, f.a, f.b, f.theta], [e.cx, e.cy, e.a, e.b, e.theta], atol=1e-8)


def test_point_ellipse_distance_against_dense_sampling():
    e = Ellipse(10, -5, 50, 20, 0.4)
    rng = np.random.default_rng(1)
    q = e.center + rng.uniform(-80, 80, size=(200, 2))
    q = np.vstack([q, e.center, e.center + [30, 0]])
    dense = e.point_at(np.linspace(0, 2 * np.pi, 400_000, endpoint=False))
    brute = np.array([np.min(np.linalg.norm(dense - p, axis=1)) for p in q])
    got = point_ellipse_distance(e, q)
    # dense polyline spacing is ~1e-3 px, so brute force overestimates by <1e-6
    assert np.max(np.abs(got - brute)) < 1e-5
    assert np.all(got <= brute + 1e-9)
