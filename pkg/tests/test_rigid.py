import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import jacobian_fd
from senseflow.core import DegenerateGeometryError, RigidTransform, StereoCamera, se3_exp
from senseflow.rigid import (GnOptions, _accumulate, _normal_equations_numpy, build_rigid_mask,
                             compose_flow, compose_warped_disparity, gn_jacobian, gn_solve, huber_cost,
                             huber_weights, refine_scene_flow, rotation_error, translation_error)
from senseflow.synth import driving_scene, render_scene
from senseflow.warp import WarpResult, rigid_flow

CAM = StereoCamera(200.0, 200.0, 79.5, 59.5, 0.5)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.01, 1.0))
def test_jacobian_matches_fd(pu, pv, pd):
    J = gn_jacobian(pu, pv, pd, CAM)
    np.testing.assert_allclose(J, jacobian_fd(pu, pv, pd, CAM.fx, CAM.fy, CAM.cx, CAM.cy), rtol=1e-5, atol=1e-4)


def test_jacobian_v_row_translation_z():
    # the z-translation entry of the v row scales with p_v, not p_u
    J = gn_jacobian(0.0, 0.5, 0.1, CAM)
    assert J[1, 5] == pytest.approx(-0.5 * 0.1 * CAM.fy)
    J = gn_jacobian(0.5, 0.0, 0.1, CAM)
    assert J[1, 5] == 0.0


def test_jacobian_shapes_and_errors():
    assert gn_jacobian(np.zeros((3, 4)), 0.0, 1.0, CAM).shape == (3, 4, 2, 6)
    with pytest.raises(ValueError):
        gn_jacobian(0.0, 0.0, 0.0, CAM)


def test_huber_weights_and_cost():
    n = np.array([0.0, 0.5, 1.345, 4.0])
    np.testing.assert_allclose(huber_weights(n, 1.345), [1, 1, 1, 1.345 / 4])
    np.testing.assert_allclose(huber_cost(n, 1.345), [0, 0.125, 0.5 * 1.345 ** 2, 1.345 * (4 - 0.6725)])
    # least-squares limit
    np.testing.assert_allclose(huber_cost(n, math.inf), 0.5 * n ** 2)


def _problem(seed, n=5000):
    r = np.random.default_rng(seed)
    xs = r.uniform(0, 159, n)
    ys = r.uniform(0, 119, n)
    z = r.uniform(3, 40, n)
    P = np.stack([(xs - CAM.cx) / CAM.fx * z, (ys - CAM.cy) / CAM.fy * z, z])
    fu, fv = r.normal(scale=3, size=(2, n))
    T = se3_exp(r.normal(scale=0.05, size=6))
    return xs, ys, P, fu, fv, T


@pytest.mark.parametrize("delta", [1.345, 0.1, math.inf])
def test_fused_kernel_matches_numpy(delta):
    xs, ys, P, fu, fv, T = _problem(3)
    ref = _normal_equations_numpy(xs, ys, P, fu, fv, T.rotation, T.translation, CAM, delta)
    got = _accumulate(xs, ys, P, fu, fv, np.ascontiguousarray(T.rotation), np.ascontiguousarray(T.translation),
                      CAM.fx, CAM.fy, CAM.cx, CAM.cy, delta)
    for a, b in zip(ref, got):
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9)


def _scene(seed, moving=False):
    spec = driving_scene(seed, 120, 160, CAM, moving_object=moving)
    return spec, render_scene(spec, images=False)


@pytest.mark.parametrize("seed", range(4))
def test_recovers_ego_motion(seed):
    spec, b = _scene(seed)
    xi, trace = gn_solve(b.flow, b.disp1, b.valid, CAM)
    assert rotation_error(xi, spec.ego) <= 1e-8
    assert translation_error(xi, spec.ego) <= 1e-8
    assert trace.converged and trace.iterations <= 20
    e = trace.energies
    assert all(e[k + 1] <= e[k] * (1 + 1e-12) + 1e-12 for k in range(len(e) - 1))
    recs = trace.records()
    assert recs[0]["iter"] == 0 and "step_norm" in recs[0] and "step_norm" not in recs[-1]


def test_dynamic_object_excluded_by_mask():
    spec, b = _scene(2, moving=True)
    B = build_rigid_mask(b.labels, erosion=3)
    xi, _ = gn_solve(b.flow, b.disp1, B, CAM)
    assert translation_error(xi, spec.ego) <= 1e-8


def test_huber_resists_outliers():
    spec, b = _scene(5)
    r = np.random.default_rng(0)
    flow = b.flow.copy()
    bad = r.random(flow.shape[:2]) < 0.1
    flow[bad] += r.choice([-20.0, 20.0], size=(bad.sum(), 2))
    xi_h, _ = gn_solve(flow, b.disp1, b.valid, CAM)
    xi_ls, _ = gn_solve(flow, b.disp1, b.valid, CAM, GnOptions(huber_delta=math.inf))
    err_h = max(rotation_error(xi_h, spec.ego), translation_error(xi_h, spec.ego))
    err_ls = max(rotation_error(xi_ls, spec.ego), translation_error(xi_ls, spec.ego))
    assert err_h <= 1e-3 and err_ls >= 10 * err_h


def test_degenerate_geometry_raises():
    disp = np.full((20, 20), 1e-9)  # points at (near) infinity: translation unobservable
    with pytest.raises(DegenerateGeometryError):
        gn_solve(np.ones((20, 20, 2)), disp, np.ones((20, 20)), CAM)


def test_too_few_pixels():
    mask = np.zeros((10, 10))
    mask[0, :5] = 1
    with pytest.raises(ValueError):
        gn_solve(np.zeros((10, 10, 2)), np.ones((10, 10)), mask, CAM)


def test_damping_still_converges():
    spec, b = _scene(1)
    xi, trace = gn_solve(b.flow, b.disp1, b.valid, CAM, GnOptions(damping=1e-3, max_iters=20))
    assert translation_error(xi, spec.ego) <= 1e-6


def test_options_validation():
    with pytest.raises(ValueError):
        GnOptions(max_iters=0)
    with pytest.raises(ValueError):
        GnOptions(huber_delta=0)
    with pytest.raises(ValueError):
        GnOptions(damping=-1)


def test_rigid_mask():
    labels = np.zeros((30, 30), dtype=int)
    labels[10:20, 10:20] = 13
    m = build_rigid_mask(labels, erosion=1)
    assert m.sum() == 900 - 100
    m = build_rigid_mask(labels, erosion=3)
    # 3x3 erosion grows the car by one pixel each side; image border does not erode
    assert m[9, 15] == 0 and m[8, 15] == 1 and m[0, 0] == 1
    assert m.sum() == 900 - 144
    with pytest.raises(ValueError):
        build_rigid_mask(np.full((3, 3), 0.5))


def test_compose_flow():
    raw = np.zeros((2, 2, 2))
    rig = np.ones((2, 2, 2))
    B = np.array([[1, 0], [0, 1]])
    out = compose_flow(raw, rig, B)
    assert out[0, 0, 0] == 1 and out[0, 1, 0] == 0
    with pytest.raises(ValueError):
        compose_flow(raw, rig, np.ones((3, 3)))


def test_compose_warped_disparity_fallbacks():
    inv = WarpResult(np.array([[1.0, 2.0, 3.0, 4.0]]), np.array([[1, 0, 1, 0]]))
    fwd = (np.array([[10.0, 20.0, 30.0, 40.0]]), np.array([[0, 1, 1, 0]]))
    B = np.array([[1, 0, 1, 0]])
    out = compose_warped_disparity(inv, fwd, B)
    # px0: rigid invalid -> flow-warped 1; px1: flow-warped invalid -> rigid 20; px2: rigid 30;
    # px3: both invalid -> nearest filled pixel (px2)
    np.testing.assert_array_equal(out, [[1.0, 20.0, 30.0, 30.0]])


def test_refine_replaces_background_only():
    spec, b = _scene(3, moving=True)
    r = np.random.default_rng(1)
    noisy = b.flow + r.normal(scale=0.5, size=b.flow.shape)
    res = refine_scene_flow(noisy, b.disp1, b.disp2, b.labels, CAM, erosion=3)
    bg = res.mask > 0
    assert not (bg & b.dynamic).any()
    before = np.linalg.norm(noisy - b.flow, axis=-1)[bg].mean()
    after = np.linalg.norm(res.flow - b.flow, axis=-1)[bg].mean()
    assert after < 0.1 * before
    np.testing.assert_array_equal(res.flow[~bg], noisy[~bg])
    exact = rigid_flow(spec.ego, b.disp1, CAM)
    assert np.abs(res.disparity2[bg] - exact.disparity[bg]).max() < 1e-2


def test_refine_without_static_pixels():
    labels = np.full((20, 20), 13)
    flow = np.random.default_rng(0).normal(size=(20, 20, 2))
    res = refine_scene_flow(flow, np.ones((20, 20)), np.ones((20, 20)), labels, CAM)
    assert res.transform is None and res.trace is None
    np.testing.assert_array_equal(res.flow, flow)
    assert res.mask.sum() == 0


def test_error_measures():
    a = se3_exp([0, 0, 0.3, 1, 2, 3])
    assert rotation_error(a, RigidTransform.identity()) == pytest.approx(0.3)
    assert translation_error(a, a) == 0.0


def test_stopping_not_fooled_by_saturated_residuals():
    # every pixel starts beyond the Huber threshold; a clipped-residual statistic would stall at delta
    spec, b = _scene(6)
    r = np.random.default_rng(2)
    flow = b.flow.copy()
    bad = r.random(flow.shape[:2]) < 0.3
    flow[bad] += r.choice([-20.0, 20.0], size=(bad.sum(), 2))
    xi, trace = gn_solve(flow, b.disp1, b.valid, CAM, GnOptions(huber_delta=0.01))
    assert trace.iterations > 1
    assert translation_error(xi, spec.ego) <= 1e-3
