import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bilinear_loop, project_point
from senseflow.core import RigidTransform, StereoCamera, se3_exp
from senseflow.warp import (bilinear_sample, disparity_to_flow, forward_warp_disparity, inverse_warp_disparity,
                            inverse_warp_disparity_via_flow, inverse_warp_flow, rigid_flow)


@given(st.integers(0, 10_000))
def test_bilinear_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    src = r.normal(size=(6, 7, 2))
    x = r.uniform(-2, 9, size=20)
    y = r.uniform(-2, 8, size=20)
    out, inb = bilinear_sample(src, x, y)
    for i in range(20):
        np.testing.assert_allclose(out[i], bilinear_loop(src, x[i], y[i]), atol=1e-12)
        assert inb[i] == float(0 <= x[i] <= 6 and 0 <= y[i] <= 5)


def test_exact_at_integer_coordinates(rng):
    src = rng.normal(size=(5, 6))
    ys, xs = np.mgrid[0:5, 0:6].astype(float)
    out, inb = bilinear_sample(src, xs, ys)
    np.testing.assert_array_equal(out, src)
    assert inb.all()


def test_sample_gradient_fd(rng):
    src = rng.normal(size=(8, 9, 3))
    x = rng.uniform(0.2, 7.8, size=30)
    y = rng.uniform(0.2, 6.8, size=30)
    # keep away from tap boundaries where the derivative jumps
    x = np.floor(x) + np.clip(x - np.floor(x), 0.1, 0.9)
    y = np.floor(y) + np.clip(y - np.floor(y), 0.1, 0.9)
    _, _, dx, dy = bilinear_sample(src, x, y, with_grad=True)
    h = 1e-6
    fdx = (bilinear_sample(src, x + h, y)[0] - bilinear_sample(src, x - h, y)[0]) / (2 * h)
    fdy = (bilinear_sample(src, x, y + h)[0] - bilinear_sample(src, x, y - h)[0]) / (2 * h)
    np.testing.assert_allclose(dx, fdx, atol=1e-7)
    np.testing.assert_allclose(dy, fdy, atol=1e-7)


def test_zero_flow_is_identity(rng):
    src = rng.normal(size=(4, 5, 3))
    res = inverse_warp_flow(src, np.zeros((4, 5, 2)))
    np.testing.assert_array_equal(res.warped, src)
    assert res.inbounds.all()


def test_integer_shift_and_out_of_bounds():
    src = np.arange(12.0).reshape(3, 4)
    flow = np.zeros((3, 4, 2))
    flow[..., 0] = 1.0
    res = inverse_warp_flow(src, flow)
    np.testing.assert_array_equal(res.warped[:, :3], src[:, 1:])
    np.testing.assert_array_equal(res.inbounds[:, 3], 0.0)
    np.testing.assert_array_equal(res.warped[:, 3], src[:, 3])


def test_shape_checks():
    with pytest.raises(ValueError):
        inverse_warp_flow(np.zeros((3, 4)), np.zeros((3, 5, 2)))
    with pytest.raises(ValueError):
        inverse_warp_flow(np.zeros((3, 4)), np.zeros((3, 4, 3)))


def test_disparity_warp_convention():
    right = np.tile(np.arange(10.0), (2, 1))
    disp = np.full((2, 10), 3.0)
    res = inverse_warp_disparity(right, disp)
    # left pixel x matches right pixel x - d
    np.testing.assert_array_equal(res.warped[:, 3:], right[:, :7])
    assert res.inbounds[:, :3].sum() == 0
    np.testing.assert_array_equal(disparity_to_flow(disp)[..., 0], -3.0)


def test_via_flow_equals_flow_warp(rng):
    d2 = rng.uniform(1, 5, size=(6, 7))
    flow = rng.normal(size=(6, 7, 2))
    np.testing.assert_array_equal(inverse_warp_disparity_via_flow(flow, d2).warped,
                                  inverse_warp_flow(d2, flow).warped)


def test_rigid_flow_matches_point_oracle(small_cam, rng):
    xi = se3_exp([0.01, -0.02, 0.005, 0.1, -0.05, 0.3])
    disp = rng.uniform(2, 10, size=(48, 64))
    res = rigid_flow(xi, disp, small_cam)
    for _ in range(30):
        y, x = rng.integers(0, 48), rng.integers(0, 64)
        z = small_cam.fb / disp[y, x]
        p = np.array([(x - small_cam.cx) / small_cam.fx * z, (y - small_cam.cy) / small_cam.fy * z, z])
        q = xi.rotation @ p + xi.translation
        pix = project_point(q, small_cam.fx, small_cam.fy, small_cam.cx, small_cam.cy)
        np.testing.assert_allclose(res.flow[y, x], pix - [x, y], atol=1e-9)
        assert res.disparity[y, x] == pytest.approx(small_cam.fb / q[2], rel=1e-12)


def test_rigid_flow_invalid_pixels(small_cam):
    disp = np.full((4, 4), 5.0)
    disp[0, 0] = 0.0
    valid = np.ones((4, 4))
    valid[1, 1] = 0
    behind = RigidTransform(np.eye(3), [0, 0, -1000.0])
    res = rigid_flow(RigidTransform.identity(), disp, small_cam, valid)
    assert res.valid[0, 0] == 0 and res.valid[1, 1] == 0 and res.valid.sum() == 14
    np.testing.assert_array_equal(res.flow[0, 0], 0.0)
    assert rigid_flow(behind, disp, small_cam).valid.sum() == 0


def test_stereo_identity(small_cam):
    # moving the camera to the right eye reproduces the disparity as flow
    disp = np.full((10, 12), 4.0)
    res = rigid_flow(RigidTransform(np.eye(3), [-small_cam.baseline, 0, 0]), disp, small_cam)
    np.testing.assert_allclose(res.flow[..., 0], -disp, atol=1e-12)
    np.testing.assert_allclose(res.flow[..., 1], 0.0, atol=1e-12)


def test_forward_warp_identity_and_zbuffer(small_cam):
    disp = np.full((10, 12), 4.0)
    d, v = forward_warp_disparity(disp, RigidTransform.identity(), small_cam)
    np.testing.assert_allclose(d, disp)
    assert v.all()
    # two sources collide on the same target: the nearer (larger disparity) wins
    cam = StereoCamera(100.0, 100.0, 0.0, 0.0, 1.0)
    d, v = forward_warp_disparity(np.array([[5.0, 5.0, 50.0]]),
                                  RigidTransform(np.eye(3), [-0.02, 0.0, 0.0]), cam)
    # pixel 2 (d=50) moves by -1 onto pixel 1, which stays put (d=5 moves 0.1 px)
    assert d[0, 1] == pytest.approx(50.0)
    assert v[0, 2] == 0.0


def test_forward_warp_matches_loop_splat(small_cam, rng):
    disp = rng.uniform(2, 20, size=(30, 40))
    xi = se3_exp([0.0, 0.05, 0.0, 0.3, 0.0, 0.5])
    res = rigid_flow(xi, disp, small_cam)
    best = {}
    for y in range(30):
        for x in range(40):
            tx, ty = int(np.rint(x + res.flow[y, x, 0])), int(np.rint(y + res.flow[y, x, 1]))
            if 0 <= tx < 40 and 0 <= ty < 30:
                best[ty, tx] = max(best.get((ty, tx), -1.0), res.disparity[y, x])
    d, v = forward_warp_disparity(disp, xi, small_cam)
    assert int(v.sum()) == len(best)
    for (ty, tx), val in best.items():
        assert d[ty, tx] == val
