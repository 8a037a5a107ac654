import json

import numpy as np
import pytest

from senseflow.core import RigidTransform, StereoCamera, se3_exp
from senseflow.loss import photometric_consistency
from senseflow.synth import (SKY_LABEL, Plane, SceneSpec, SceneSpecError, driving_scene, render_scene,
                             scene_from_json)
from senseflow.warp import bilinear_sample, rigid_flow

CAM = StereoCamera(200.0, 200.0, 79.5, 59.5, 0.5)
H, W = 120, 160


def plane_scene(ego=None, wavelength=(1.0, 4.0), z=10.0, normal=(0.0, 0.0, 1.0)):
    return SceneSpec([Plane(normal, z, label=0, texture_seed=5, wavelength=wavelength)], CAM,
                     ego or RigidTransform.identity(), H, W)


def test_fronto_parallel_identity():
    b = render_scene(plane_scene())
    np.testing.assert_allclose(b.disp1, CAM.fb / 10.0, rtol=1e-14)
    np.testing.assert_allclose(b.flow, 0.0, atol=1e-12)
    np.testing.assert_array_equal(b.occ_flow, 0.0)
    np.testing.assert_array_equal(b.image1, b.image2)
    # only the left strip leaves the right camera's view
    d = CAM.fb / 10.0
    assert (b.occ_disp[:, int(np.ceil(d)):] == 0).all()
    assert (b.occ_disp[:, :int(np.floor(d))] == 1).all()


def test_stereo_identity_ego():
    b = render_scene(plane_scene(RigidTransform(np.eye(3), [-CAM.baseline, 0.0, 0.0]), normal=(0.2, 0.1, 1.0)))
    np.testing.assert_allclose(b.flow[..., 0], -b.disp1, atol=1e-10)
    np.testing.assert_allclose(b.flow[..., 1], 0.0, atol=1e-10)
    np.testing.assert_allclose(b.image2, b.image_right, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_static_pixels_follow_rigid_flow(seed):
    spec = driving_scene(seed, H, W, CAM, moving_object=True)
    b = render_scene(spec, images=False)
    res = rigid_flow(spec.ego, b.disp1, CAM, b.valid)
    static = (b.valid > 0) & ~b.dynamic
    assert b.dynamic.any() and static.any()
    assert np.abs(b.flow[static] - res.flow[static]).max() <= 1e-9
    np.testing.assert_allclose(b.disp2_warped[static], res.disparity[static], rtol=1e-12)
    assert (b.labels[b.dynamic] == 13).all()


def test_frame2_disparity_agrees_with_warped():
    ego = se3_exp([0.01, -0.02, 0.005, 0.2, -0.1, 0.5])
    b = render_scene(plane_scene(ego, normal=(0.1, -0.2, 1.0)), images=False)
    x, y = np.meshgrid(np.arange(W), np.arange(H))
    sx, sy = x + b.flow[..., 0], y + b.flow[..., 1]
    d2, inb = bilinear_sample(b.disp2, sx, sy)
    m = (inb > 0) & (b.occ_flow == 0)
    # inverse depth is affine in pixel coordinates on a plane, so bilinear sampling is exact
    np.testing.assert_allclose(d2[m], b.disp2_warped[m], rtol=1e-9)


def test_photometric_consistency_near_zero():
    ego = se3_exp([0.005, -0.01, 0.003, 0.1, 0.05, 0.3])
    b = render_scene(SceneSpec([Plane((0.1, -0.05, 1.0), 8.0, texture_seed=3, wavelength=(4.0, 10.0))],
                               CAM, ego, H, W))
    n_flow = (1 - b.occ_flow).sum() * 3
    n_disp = (1 - b.occ_disp).sum() * 3
    assert photometric_consistency(b.image1, b.image2, b.flow, b.occ_flow) / n_flow <= 1e-4
    assert photometric_consistency(b.image1, b.image_right, b.disp1, b.occ_disp, "disparity") / n_disp <= 1e-4


def test_occlusion_band_width():
    z_fg, tx = 10.0, 0.5
    fg = Plane((0, 0, 1), z_fg, label=13, texture_seed=1, motion=RigidTransform(np.eye(3), [tx, 0, 0]),
               bounds=((-1.5, 0.5), (-1.0, 1.0), (0, 100)))
    bg = Plane((0, 0, 1), 20.0, label=0, texture_seed=2)
    b = render_scene(SceneSpec([bg, fg], CAM, RigidTransform.identity(), H, W), images=False)
    expected = CAM.fx * tx / z_fg
    for row in (50, 60, 70):
        occluded_bg = (b.occ_flow[row] > 0) & (b.labels[row] == 0)
        assert abs(occluded_bg.sum() - expected) <= 1.0
    # moving object pixels stay visible
    assert (b.occ_flow[b.labels == 13] == 0).all()


def test_byte_determinism():
    spec = driving_scene(4, 60, 80, CAM, moving_object=True)
    a, b = render_scene(spec), render_scene(spec)
    for name in ("image1", "image2", "image_right", "disp1", "disp2", "flow", "occ_flow", "occ_disp", "labels"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_sky_pixels():
    spec = SceneSpec([Plane((0, 1, 0), 1.6, label=0)], CAM, RigidTransform.identity(), H, W)
    b = render_scene(spec, images=False)
    sky = b.valid == 0
    assert sky[0].all() and not sky[-1].any()
    assert (b.labels[sky] == SKY_LABEL).all() and (b.disp1[sky] == 0).all()


def test_spec_errors():
    with pytest.raises(SceneSpecError):
        Plane((0, 0, 0), 1.0)
    with pytest.raises(SceneSpecError):
        render_scene(SceneSpec([Plane((0, 0, 1), -5.0)], CAM, RigidTransform.identity(), 10, 10))
    # ego moving the camera through the plane
    with pytest.raises(SceneSpecError):
        render_scene(SceneSpec([Plane((0, 0, 1), 5.0)], CAM, RigidTransform(np.eye(3), [0, 0, -6.0]), 10, 10))


def test_scene_from_json():
    text = json.dumps({"height": 20, "width": 30, "camera": {"fx": 50, "fy": 50, "cx": 15, "cy": 10,
                                                             "baseline": 0.3},
                       "ego": {"twist": [0, 0, 0, 0.1, 0, 0.2]},
                       "planes": [{"normal": [0, 0, 1], "offset": 12, "label": 2,
                                   "motion": {"translation": [0.3, 0, 0]}}]})
    spec = scene_from_json(text)
    assert spec.height == 20 and spec.camera.fx == 50
    np.testing.assert_allclose(spec.ego.translation, [0.1, 0, 0.2])
    np.testing.assert_allclose(spec.planes[0].motion.translation, [0.3, 0, 0])
    assert scene_from_json('{"preset": "driving", "seed": 3, "height": 40, "width": 50}').height == 40
    with pytest.raises(SceneSpecError):
        scene_from_json("{}")
