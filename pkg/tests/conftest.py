import pytest

from spherereg.registration import PosedImage, RegistrationProblem
from spherereg.synth import NoiseSpec, SceneParams, generate_scene, render_observations, scale_poses


def synthetic_images(scene, scale=1.0, unknown_ids=False, outline_points=200):
    dets, poses = render_observations(scene, outline_points, unknown_ids=unknown_ids)
    poses = scale_poses(poses, scale)
    return [PosedImage(i, cam, p, tuple(d)) for i, ((cam, _), p, d) in enumerate(zip(scene.cameras, poses, dets))]


def scene_markers(scene):
    return dict(zip(scene.marker_ids, scene.markers))


def synthetic_problem(seed=7, noise=NoiseSpec(), scale=1.0, estimate_scale=False, params=SceneParams()):
    scene = generate_scene(params, seed=seed, noise=noise)
    images = synthetic_images(scene, scale)
    problem = RegistrationProblem(tuple(images), scene_markers(scene), estimate_scale, scene.registration_ids)
    return scene, problem


@pytest.fixture(scope="session")
def noiseless():
    return synthetic_problem()
