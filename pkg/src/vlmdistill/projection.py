"""Project an ego future trajectory into the front camera and draw it.

Frames:

* ego frame, default convention ``x_right_y_forward_z_up``: x to the right,
  y forward, z up, meters. Trajectory waypoints live on the ground plane
  ``z = ground_offset``.
* optical frame: x right, y down, z forward (OpenCV). Pixel ``u`` grows to the
  right, ``v`` grows downward, origin at the top-left pixel corner.

The calibration's ``frame_convention`` names the axis permutation applied to
ego points before the 4x4 extrinsics, so ``extrinsics`` maps the permuted ego
frame into the optical frame::

    p_cam = extrinsics @ axes(frame_convention) @ [x, y, z, 1]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, InputError

DEFAULT_HORIZON = 6
DEFAULT_TIMESTEP = 0.5
STATIONARY_THRESHOLD = 1.0
DEPTH_EPSILON = 0.1

# rows map ego axes onto optical axes
FRAME_CONVENTIONS: dict[str, np.ndarray] = {
    "x_right_y_forward_z_up": np.array(
        [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]
    ),
    "x_forward_y_left_z_up": np.array(
        [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]
    ),
    "optical": np.eye(3),
}


@dataclass(frozen=True)
class CameraCalibration:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_width: int
    image_height: int
    frame_convention: str = "x_right_y_forward_z_up"

    def __post_init__(self) -> None:
        K = np.asarray(self.intrinsics, dtype=float)
        E = np.asarray(self.extrinsics, dtype=float)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", E)
        if K.shape != (3, 3) or not np.all(np.isfinite(K)):
            raise CalibrationError("intrinsics must be a finite 3x3 matrix")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CalibrationError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise CalibrationError("intrinsics must be upper triangular with K[2][2] == 1")
        if E.shape != (4, 4) or not np.all(np.isfinite(E)):
            raise CalibrationError("extrinsics must be a finite 4x4 matrix")
        if not np.allclose(E[3], [0.0, 0.0, 0.0, 1.0], atol=0.0):
            raise CalibrationError("extrinsics bottom row must be [0, 0, 0, 1]")
        R = E[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or np.linalg.det(R) <= 0:
            raise CalibrationError("extrinsics rotation block is not a proper rotation")
        if int(self.image_width) <= 0 or int(self.image_height) <= 0:
            raise CalibrationError("image dimensions must be positive")
        if self.frame_convention not in FRAME_CONVENTIONS:
            raise CalibrationError(f"unknown frame convention {self.frame_convention!r}")

    @property
    def ego_to_camera(self) -> np.ndarray:
        axes = np.eye(4)
        axes[:3, :3] = FRAME_CONVENTIONS[self.frame_convention]
        return self.extrinsics @ axes

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.ravel().tolist(),
            "extrinsics": self.extrinsics.ravel().tolist(),
            "width": int(self.image_width),
            "height": int(self.image_height),
            "frame_convention": self.frame_convention,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CameraCalibration:
        try:
            K = np.asarray(data["intrinsics"], dtype=float)
            E = np.asarray(data["extrinsics"], dtype=float)
            if K.size != 9 or E.size != 16:
                raise CalibrationError("expected 9 intrinsics and 16 extrinsics values")
            return cls(
                intrinsics=K.reshape(3, 3),
                extrinsics=E.reshape(4, 4),
                image_width=int(data["width"]),
                image_height=int(data["height"]),
                frame_convention=data.get("frame_convention", "x_right_y_forward_z_up"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CalibrationError(f"malformed calibration: {exc}") from exc


def load_calibration(path: str | Path) -> CameraCalibration:
    with open(path) as fh:
        return CameraCalibration.from_dict(json.load(fh))


def save_calibration(calib: CameraCalibration, path: str | Path) -> None:
    Path(path).write_text(json.dumps(calib.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class FutureTrajectory:
    waypoints: np.ndarray  # (T, 2) ego ground-plane meters
    timestep: float = DEFAULT_TIMESTEP

    def __post_init__(self) -> None:
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 2 or len(w) == 0:
            raise InputError("waypoints must have shape (T, 2)")
        if not np.all(np.isfinite(w)):
            raise InputError("waypoints must be finite")
        if self.timestep <= 0:
            raise InputError("timestep must be positive")
        object.__setattr__(self, "waypoints", w)

    @property
    def horizon(self) -> int:
        return len(self.waypoints)


@dataclass(frozen=True)
class PixelPolyline:
    points: np.ndarray  # (T, 2); NaN where the waypoint is not in front of the camera
    visible_mask: np.ndarray  # (T,) bool
    depths: np.ndarray  # (T,) optical-frame z
    width: int
    height: int
    depth_epsilon: float = DEPTH_EPSILON

    @property
    def in_front(self) -> np.ndarray:
        return self.depths > self.depth_epsilon


@dataclass(frozen=True)
class LineStyle:
    color: tuple[int, int, int] = (255, 0, 0)
    width: int = 4


def is_stationary(traj: FutureTrajectory, threshold: float = STATIONARY_THRESHOLD) -> bool:
    return bool(np.max(np.linalg.norm(traj.waypoints, axis=1)) < threshold)


def camera_to_pixels(points_cam: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    """Perspective-divide optical-frame points ``(N, 3)`` into pixels ``(N, 2)``."""
    pts = np.asarray(points_cam, dtype=float)
    uvw = pts @ np.asarray(intrinsics, dtype=float).T
    return uvw[:, :2] / uvw[:, 2:3]


def pixels_to_rays(pixels: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    """Back-project pixels to optical-frame rays with unit depth."""
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    homog = np.hstack([px, np.ones((len(px), 1))])
    return np.linalg.solve(np.asarray(intrinsics, dtype=float), homog.T).T


def project_trajectory(
    traj: FutureTrajectory,
    calib: CameraCalibration,
    ground_offset: float = 0.0,
    depth_epsilon: float = DEPTH_EPSILON,
) -> PixelPolyline:
    if not np.isfinite(ground_offset):
        raise InputError("ground_offset must be finite")
    n = traj.horizon
    ego = np.column_stack([traj.waypoints, np.full(n, ground_offset), np.ones(n)])
    cam = (calib.ego_to_camera @ ego.T).T[:, :3]
    depths = cam[:, 2].copy()
    in_front = depths > depth_epsilon
    points = np.full((n, 2), np.nan)
    if in_front.any():
        points[in_front] = camera_to_pixels(cam[in_front], calib.intrinsics)
    u, v = points[:, 0], points[:, 1]
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u < calib.image_width) & (v >= 0) & (v < calib.image_height)
    return PixelPolyline(
        points=points,
        visible_mask=in_front & inside,
        depths=depths,
        width=calib.image_width,
        height=calib.image_height,
        depth_epsilon=depth_epsilon,
    )


def _clip_segment(p0, p1, xmax: float, ymax: float):
    """Liang-Barsky clip of segment p0-p1 to [0, xmax] x [0, ymax]."""
    x0, y0 = p0
    dx, dy = p1[0] - x0, p1[1] - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0), (dx, xmax - x0), (-dy, y0), (dy, ymax - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return (x0 + t0 * dx, y0 + t0 * dy), (x0 + t1 * dx, y0 + t1 * dy)


def raster_line(ax: float, ay: float, bx: float, by: float) -> list[tuple[int, int]]:
    """Cells crossed by a segment given in cell-center coordinates.

    Steps one cell along the major axis and rounds the exact minor coordinate,
    so every cell center lies within half a cell of the line on the minor axis.
    """
    if abs(bx - ax) >= abs(by - ay):
        if ax > bx:
            ax, ay, bx, by = bx, by, ax, ay
        slope = (by - ay) / (bx - ax) if bx != ax else 0.0
        return [(x, int(round(ay + (x - ax) * slope))) for x in range(int(round(ax)), int(round(bx)) + 1)]
    if ay > by:
        ax, ay, bx, by = bx, by, ax, ay
    slope = (bx - ax) / (by - ay)
    return [(int(round(ax + (y - ay) * slope)), y) for y in range(int(round(ay)), int(round(by)) + 1)]


def render_overlay(
    image: np.ndarray,
    polyline: PixelPolyline,
    style: LineStyle = LineStyle(),
    stationary: bool = False,
) -> np.ndarray:
    """Return a copy of ``image`` with the trajectory drawn as a polyline.

    Segments join consecutive waypoints that are both in front of the camera
    and are clipped to the image. Nothing is drawn for a stationary trajectory
    or when fewer than two waypoints are visible.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InputError("image must be an (H, W, 3) uint8 array")
    out = img.copy()
    if stationary or int(polyline.visible_mask.sum()) < 2:
        return out
    h, w = out.shape[:2]
    lo = (style.width - 1) // 2
    hi = style.width - 1 - lo
    mask = np.zeros((h, w), dtype=bool)
    front = polyline.in_front
    pts = polyline.points
    for i in range(len(pts) - 1):
        if not (front[i] and front[i + 1]):
            continue
        # pixel (col, row) covers [col, col+1); centers sit at +0.5
        clipped = _clip_segment(pts[i] - 0.5, pts[i + 1] - 0.5, w - 1, h - 1)
        if clipped is None:
            continue
        (ax, ay), (bx, by) = clipped
        for cx, cy in raster_line(ax, ay, bx, by):
            mask[max(cy - lo, 0) : cy + hi + 1, max(cx - lo, 0) : cx + hi + 1] = True
    out[mask] = style.color
    return out


def overlay_trajectory(
    image: np.ndarray,
    traj: FutureTrajectory,
    calib: CameraCalibration,
    style: LineStyle = LineStyle(),
    ground_offset: float = 0.0,
    depth_epsilon: float = DEPTH_EPSILON,
    stationary_threshold: float = STATIONARY_THRESHOLD,
) -> tuple[np.ndarray, PixelPolyline, bool]:
    polyline = project_trajectory(traj, calib, ground_offset, depth_epsilon)
    still = is_stationary(traj, stationary_threshold)
    return render_overlay(image, polyline, style, stationary=still), polyline, still


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


@dataclass
class ProjectionSettings:
    ground_offset: float = 0.0
    depth_epsilon: float = DEPTH_EPSILON
    stationary_threshold: float = STATIONARY_THRESHOLD
    style: LineStyle = field(default_factory=LineStyle)
