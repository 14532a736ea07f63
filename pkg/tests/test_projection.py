from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlmdistill.errors import CalibrationError, InputError
from vlmdistill.projection import (
    CameraCalibration,
    FutureTrajectory,
    LineStyle,
    camera_to_pixels,
    is_stationary,
    load_calibration,
    overlay_trajectory,
    pixels_to_rays,
    project_trajectory,
    render_overlay,
    save_calibration,
)

K = np.array([[1000.0, 0.0, 800.0], [0.0, 1000.0, 450.0], [0.0, 0.0, 1.0]])


def calib(extrinsics=None, w=1600, h=900, K=K):
    return CameraCalibration(K, np.eye(4) if extrinsics is None else extrinsics, w, h)


def mounted(height=1.5):
    """Camera ``height`` m above the ground looking forward (ego frame -> optical)."""
    E = np.eye(4)
    E[1, 3] = height  # ground sits ``height`` below the camera, +y_optical is down
    return E


def pinhole_oracle(x, y, z, fx, fy, cx, cy, cam_height=0):
    """Exact rational projection of an ego point (x right, y forward, z up)."""
    X, Y, Z = Fraction(x), Fraction(cam_height) - Fraction(z), Fraction(y)
    return fx * X / Z + cx, fy * Y / Z + cy


def blank(w=1600, h=900):
    return np.zeros((h, w, 3), dtype=np.uint8)


# -- projection -----------------------------------------------------------------


def test_optical_axis_hits_principal_point():
    c = CameraCalibration(K, np.eye(4), 1600, 900, frame_convention="optical")
    pix = camera_to_pixels(np.array([[0.0, 0.0, 10.0]]), c.intrinsics)
    assert pix[0].tolist() == [800.0, 450.0]
    poly = project_trajectory(FutureTrajectory(np.array([[0.0, 10.0]])), calib())
    np.testing.assert_allclose(poly.points[0], [800.0, 450.0], atol=1e-12)


def test_behind_camera_is_invisible():
    poly = project_trajectory(FutureTrajectory(np.array([[0.0, -2.0], [0.0, 5.0]])), calib())
    assert poly.depths[0] == pytest.approx(-2.0)
    assert poly.visible_mask.tolist() == [False, True]
    assert np.all(np.isnan(poly.points[0]))


def test_hand_calibrated_fixture_matches_oracle():
    traj = FutureTrajectory(np.array([[2.0, 20.0], [-3.0, 12.5], [0.7, 33.0]]))
    poly = project_trajectory(traj, calib(mounted(1.5)))
    for (x, y), (u, v) in zip(traj.waypoints, poly.points):
        ou, ov = pinhole_oracle(x, y, 0, 1000, 1000, 800, 450, cam_height=Fraction(3, 2))
        assert abs(u - float(ou)) < 1e-9 and abs(v - float(ov)) < 1e-9


def test_identity_extrinsics_example():
    poly = project_trajectory(FutureTrajectory(np.array([[2.0, 20.0]])), calib())
    ou, ov = pinhole_oracle(2, 20, 0, 1000, 1000, 800, 450)
    assert poly.points[0].tolist() == pytest.approx([float(ou), float(ov)], abs=1e-9)


def test_other_frame_convention_agrees():
    # x forward, y left: the same physical point as (x=2 right, y=20 forward)
    c = CameraCalibration(K, mounted(), 1600, 900, frame_convention="x_forward_y_left_z_up")
    a = project_trajectory(FutureTrajectory(np.array([[20.0, -2.0]])), c)
    b = project_trajectory(FutureTrajectory(np.array([[2.0, 20.0]])), calib(mounted()))
    np.testing.assert_allclose(a.points, b.points, atol=1e-9)


def test_out_of_bounds_point_is_not_visible_but_kept():
    poly = project_trajectory(FutureTrajectory(np.array([[30.0, 5.0]])), calib())
    assert poly.in_front[0] and not poly.visible_mask[0]
    assert poly.points[0, 0] > 1600


@pytest.mark.parametrize(
    "K_bad,E_bad",
    [
        (np.diag([0.0, 1.0, 1.0]), np.eye(4)),
        (np.array([[1.0, 0, 0], [0, 1.0, 0], [0.1, 0, 1.0]]), np.eye(4)),
        (K, np.diag([1.0, 1.0, -1.0, 1.0])),
        (K, np.eye(4) * 2),
        (np.full((3, 3), np.nan), np.eye(4)),
    ],
)
def test_malformed_calibration_rejected(K_bad, E_bad):
    with pytest.raises(CalibrationError):
        CameraCalibration(K_bad, E_bad, 10, 10)


def test_calibration_file_round_trip(tmp_path):
    c = calib(mounted(1.2))
    save_calibration(c, tmp_path / "cam.json")
    back = load_calibration(tmp_path / "cam.json")
    assert back.to_dict() == c.to_dict()
    (tmp_path / "bad.json").write_text('{"intrinsics": [1, 2], "extrinsics": [], "width": 1, "height": 1}')
    with pytest.raises(CalibrationError):
        load_calibration(tmp_path / "bad.json")


def test_non_finite_waypoint_rejected():
    with pytest.raises(InputError):
        FutureTrajectory(np.array([[0.0, np.inf]]))
    with pytest.raises(InputError):
        project_trajectory(FutureTrajectory(np.zeros((2, 2))), calib(), ground_offset=np.nan)


# -- stationarity -------------------------------------------------------------------


def test_stationary_rule():
    assert is_stationary(FutureTrajectory(np.zeros((6, 2))))
    assert not is_stationary(FutureTrajectory(np.array([[0.0, 30.0]])))
    theta = np.linspace(0, np.pi / 2, 6)
    arc = np.stack([0.9 * np.cos(theta), 0.9 * np.sin(theta)], axis=1)
    assert max(np.hypot(*p) for p in arc) < 1.0  # direct evaluation of the rule
    assert is_stationary(FutureTrajectory(arc), threshold=1.0)
    assert not is_stationary(FutureTrajectory(arc), threshold=0.9)


# -- rendering ---------------------------------------------------------------------


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def red_pixels(img):
    rows, cols = np.nonzero(np.all(img == [255, 0, 0], axis=-1))
    return np.stack([cols + 0.5, rows + 0.5], axis=1)


def test_stationary_draws_nothing():
    img = blank()
    out, _, still = overlay_trajectory(img, FutureTrajectory(np.full((6, 2), 0.1)), calib(mounted()))
    assert still and np.array_equal(out, img) and out is not img


def test_two_points_draw_one_segment():
    traj = FutureTrajectory(np.array([[0.0, 5.0], [0.0, 10.0]]))
    out, poly, _ = overlay_trajectory(blank(), traj, calib(mounted()))
    assert poly.visible_mask.sum() == 2
    assert len(red_pixels(out)) > 0


def test_single_visible_point_draws_nothing():
    traj = FutureTrajectory(np.array([[0.0, -5.0], [0.0, 10.0]]))
    out, poly, _ = overlay_trajectory(blank(), traj, calib(mounted()))
    assert poly.visible_mask.sum() == 1 and not out.any()


@pytest.mark.parametrize("width,tol", [(1, 1.0), (4, 1.0 + 2.0 * np.sqrt(2))])
def test_raster_stays_near_ideal_line(width, tol):
    traj = FutureTrajectory(np.array([[2.0, 20.0], [-1.0, 8.0], [0.5, 4.0]]))
    c = calib(mounted())
    poly = project_trajectory(traj, c)
    out = render_overlay(blank(), poly, LineStyle(width=width))
    pix = red_pixels(out)
    assert len(pix) > 0
    segs = [(poly.points[i], poly.points[i + 1]) for i in range(len(poly.points) - 1)]
    worst = max(min(_segment_distance(p, a, b) for a, b in segs) for p in pix)
    assert worst <= tol


def test_partially_offscreen_segment_is_clipped():
    traj = FutureTrajectory(np.array([[0.0, 5.0], [40.0, 10.0]]))
    c = calib(mounted())
    poly = project_trajectory(traj, c)
    assert poly.visible_mask.tolist() == [True, False]
    # one visible point is not enough for a line
    assert not render_overlay(blank(), poly).any()
    both = project_trajectory(FutureTrajectory(np.array([[0.0, 5.0], [0.0, 8.0], [40.0, 10.0]])), c)
    out = render_overlay(blank(), both, LineStyle(width=1))
    assert out[..., 0].any()


def test_render_rejects_bad_image():
    poly = project_trajectory(FutureTrajectory(np.array([[0.0, 5.0]])), calib())
    with pytest.raises(InputError):
        render_overlay(np.zeros((4, 4), dtype=np.uint8), poly)


# -- properties ------------------------------------------------------------------------

coord = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_through_rays(seed):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-20, 20, 1000), rng.uniform(-5, 5, 1000), rng.uniform(0.5, 80, 1000)])
    pix = camera_to_pixels(pts, K)
    back = camera_to_pixels(pixels_to_rays(pix, K), K)
    assert np.max(np.abs(back - pix)) < 1e-6
    doubled = camera_to_pixels(2 * pts, K)
    assert np.max(np.abs(doubled - pix)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(coord, coord), min_size=1, max_size=8), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_visibility_monotone_in_depth_epsilon(wps, e1, e2):
    lo, hi = sorted((e1, e2))
    traj = FutureTrajectory(np.array(wps))
    c = calib(mounted())
    a = project_trajectory(traj, c, depth_epsilon=lo).visible_mask
    b = project_trajectory(traj, c, depth_epsilon=hi).visible_mask
    assert not np.any(b & ~a)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(coord, coord), min_size=2, max_size=6))
def test_render_never_mutates_and_visible_points_in_bounds(wps):
    traj = FutureTrajectory(np.array(wps))
    img = np.full((90, 160, 3), 7, dtype=np.uint8)
    before = img.copy()
    c = CameraCalibration(K / np.array([[10], [10], [1]]), mounted(), 160, 90)
    out, poly, _ = overlay_trajectory(img, traj, c)
    assert np.array_equal(img, before)
    vis = poly.points[poly.visible_mask]
    assert np.all((vis[:, 0] >= 0) & (vis[:, 0] < 160) & (vis[:, 1] >= 0) & (vis[:, 1] < 90))
    assert len(poly.points) == len(wps)
