"""
Deterministic 2-D primitives: key-waypoint extraction, linear and quadratic-Bezier interpolation
of generated key waypoints, Gaussian heatmap rasterization and a few polyline helpers.

All coordinates are scene-normalized: (-1, -1) is the up-left corner of the bird-eye image
and (1, 1) the bottom-right one. Points are numpy arrays of shape (2,), sequences of points
are arrays of shape (N, 2). Every function here is pure.
"""

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

PARALLEL_EPS = 1e-8           # |D0 x D1| below this is treated as parallel lines
BEZIER_K = 0.25               # beta = k * alpha


def as_point(p) -> np.ndarray:
    point = np.asarray(p, dtype=float).reshape(2)
    if not np.all(np.isfinite(point)):
        raise ValueError(f"Point must be finite, got {point}")
    return point


def wrap_angle(angle: float) -> float:
    """
    Wrap an angle (radians) to the principal range (-pi, pi]
    """
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def heading_of(vector) -> float:
    return math.atan2(float(vector[1]), float(vector[0]))


def unit(heading: float) -> np.ndarray:
    return np.array([math.cos(heading), math.sin(heading)])


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Trajectory:
    """
    One position per simulation timestep.
    positions: array (N, 2), N >= 1
    dt:        timestep in seconds
    """
    positions: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 2 or len(positions) < 1:
            raise ValueError(f"Trajectory positions must have shape (N, 2) with N >= 1, got {positions.shape}")
        if self.dt <= 0:
            raise ValueError(f"Trajectory dt must be positive, got {self.dt}")
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class KeyWaypoints:
    """
    Positions at times 0, s, 2s, ..., ms.
    points:   array (m+1, 2), m+1 >= 2
    stride_s: timesteps between consecutive key waypoints
    """
    points: np.ndarray
    stride_s: int

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
            raise ValueError(f"KeyWaypoints need shape (m+1, 2) with m+1 >= 2, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("KeyWaypoints must be finite")
        if int(self.stride_s) <= 0:
            raise ValueError(f"Stride must be a positive integer, got {self.stride_s}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "stride_s", int(self.stride_s))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Frame:
    """
    Affine map between the normalized square [-1, 1]^2 and pixel indices of a W x H grid.
    Column index grows with x, row index grows with y.
    """
    width_px: int
    height_px: int

    def to_pixel(self, p) -> Tuple[float, float]:
        """
        :return:    Continuous (column, row) coordinates; pixel (j, i) covers [j, j+1) x [i, i+1)
        """
        return ((float(p[0]) + 1.0) * 0.5 * self.width_px,
                (float(p[1]) + 1.0) * 0.5 * self.height_px)

    def to_normalized(self, col: float, row: float) -> np.ndarray:
        return np.array([2.0 * col / self.width_px - 1.0, 2.0 * row / self.height_px - 1.0])

    def cell_of(self, p) -> Tuple[int, int]:
        """
        :return:    (row, column) of the pixel containing p, clamped to the grid
        """
        col, row = self.to_pixel(p)
        j = min(max(int(math.floor(col)), 0), self.width_px - 1)
        i = min(max(int(math.floor(row)), 0), self.height_px - 1)
        return i, j

    def cell_center(self, i: int, j: int) -> np.ndarray:
        return self.to_normalized(j + 0.5, i + 0.5)

    def column_centers(self) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(self.width_px) + 1.0) / self.width_px

    def row_centers(self) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(self.height_px) + 1.0) / self.height_px

    @property
    def cell_area(self) -> float:
        return (2.0 / self.width_px) * (2.0 / self.height_px)


class ControlPoint(NamedTuple):
    point: np.ndarray
    heading: float         # D1, heading at P1
    parallel: bool         # True when the near-parallel fallback was taken


############################################################################################
#                                                                                          #
#                                  KEYPOINTS AND INTERPOLATION                             #
#                                                                                          #
############################################################################################

def extract_keypoints(traj: Trajectory, s: int) -> KeyWaypoints:
    """
    Take the positions at indices 0, s, 2s, ... up to the last full multiple of s.

    EXAMPLE: a trajectory of 11 points with s=5 gives the points at indices 0, 5, 10

    :param traj:    Trajectory with more than s points
    :param s:       Stride in timesteps
    :return:        KeyWaypoints with floor((len-1)/s)+1 points
    """
    if s is None or int(s) <= 0:
        raise ValueError(f"Stride must be positive, got {s}")
    s = int(s)
    if len(traj) <= s:
        raise ValueError(f"Trajectory of length {len(traj)} is too short for stride {s}")
    count = (len(traj) - 1) // s + 1
    return KeyWaypoints(traj.positions[0:(count - 1) * s + 1:s].copy(), s)


def linear_interpolate(p0, p1, n: int) -> np.ndarray:
    """
    n equally spaced points from p0 to p1, both ends included
    """
    if n < 2:
        raise ValueError(f"Need at least 2 samples, got {n}")
    p0, p1 = as_point(p0), as_point(p1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    out = p0 * (1.0 - t) + p1 * t
    out[0], out[-1] = p0, p1
    return out


def bezier_control_point(p0, d0: float, p1, k: float = BEZIER_K) -> ControlPoint:
    """
    Control point of the quadratic Bezier joining p0 (heading d0) to p1.

    alpha is the signed (counterclockwise-positive) angle from d0 to the chord p0->p1,
    beta = k * alpha and the heading at p1 is the chord heading rotated by beta.
    The control point is the intersection of the lines (p0, D0) and (p1, D1):
        C = P0 + ((P1x-P0x)*D1y - (P1y-P0y)*D1x) / (D0x*D1y - D0y*D1x) * D0
    When the two lines are (nearly) parallel the midpoint of the chord is returned instead,
    flagged, with the chord heading as D1 (the segment degenerates to a straight line).

    :param p0:  Start point
    :param d0:  Heading at p0, radians
    :param p1:  End point, different from p0
    :param k:   Heading scaling parameter
    :return:    ControlPoint(point, heading at p1, parallel flag)
    """
    p0, p1 = as_point(p0), as_point(p1)
    chord = p1 - p0
    if float(np.hypot(chord[0], chord[1])) == 0.0:
        raise ValueError(f"Control point undefined for coincident points {p0}")
    chord_heading = heading_of(chord)
    alpha = wrap_angle(chord_heading - d0)
    beta = k * alpha
    d1 = wrap_angle(chord_heading + beta)

    D0, D1 = unit(d0), unit(d1)
    det = D0[0] * D1[1] - D0[1] * D1[0]
    if abs(det) < PARALLEL_EPS:
        return ControlPoint(0.5 * (p0 + p1), chord_heading, True)
    t = (chord[0] * D1[1] - chord[1] * D1[0]) / det
    return ControlPoint(p0 + t * D0, d1, False)


def quadratic_bezier(p0, c, p1, n: int) -> np.ndarray:
    """
    gamma(t) = P0 (1-t)^2 + 2 C t (1-t) + P1 t^2 sampled at n uniform t in [0, 1]
    """
    if n < 2:
        raise ValueError(f"Need at least 2 samples, got {n}")
    p0, c, p1 = as_point(p0), as_point(c), as_point(p1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    out = p0 * (1.0 - t) ** 2 + 2.0 * c * t * (1.0 - t) + p1 * t ** 2
    out[0], out[-1] = p0, p1
    return out


def interpolate_segment(p0, p1, heading: Optional[float], n: int, linear: bool,
                        k: float = BEZIER_K) -> Tuple[np.ndarray, float]:
    """
    One segment of the interpolation policy: the n positions after p0 up to and including p1.

    :param p0:      Current key waypoint
    :param p1:      Next key waypoint
    :param heading: Heading at p0 (ignored for linear segments, kept for hold segments)
    :param n:       Timesteps in the segment
    :param linear:  True for the first segment of a rollout
    :param k:       Bezier heading scaling
    :return:        (array (n, 2), heading at p1)
    """
    p0, p1 = as_point(p0), as_point(p1)
    if float(np.hypot(*(p1 - p0))) == 0.0:
        # Coincident key waypoints: the vehicle holds its position
        held = heading if heading is not None else 0.0
        return np.repeat(p1[None, :], n, axis=0), held
    if linear or heading is None:
        return linear_interpolate(p0, p1, n + 1)[1:], heading_of(p1 - p0)
    cp = bezier_control_point(p0, heading, p1, k)
    return quadratic_bezier(p0, cp.point, p1, n + 1)[1:], cp.heading


def interpolate_trajectory(kw: KeyWaypoints, initial_heading: Optional[float] = None,
                           samples_per_segment: Optional[int] = None, dt: float = 0.1,
                           k: float = BEZIER_K) -> Trajectory:
    """
    Fill the timesteps between key waypoints: the first segment is linear, every later segment
    is a quadratic Bezier whose incoming heading is the outgoing heading of the previous one.

    :param kw:                  Key waypoints (at least 2)
    :param initial_heading:     Heading at keypoint 0; defaults to the direction keypoint 0 -> keypoint 1
                                and only matters when those two coincide
    :param samples_per_segment: Timesteps per segment (defaults to the stride, one per timestep)
    :param dt:                  Timestep of the returned trajectory
    :param k:                   Bezier heading scaling
    :return:                    Trajectory of m*n+1 positions, position k*n equal to keypoint k
    """
    n = kw.stride_s if samples_per_segment is None else int(samples_per_segment)
    if n < 1:
        raise ValueError(f"samples_per_segment must be positive, got {n}")
    points = kw.points
    heading = initial_heading
    if heading is None:
        chord = points[1] - points[0]
        heading = heading_of(chord) if np.any(chord != 0.0) else 0.0
    pieces = [points[0:1]]
    for idx in range(len(points) - 1):
        segment, heading = interpolate_segment(points[idx], points[idx + 1], heading, n, idx == 0, k)
        segment[-1] = points[idx + 1]
        pieces.append(segment)
    return Trajectory(np.concatenate(pieces, axis=0), dt)


############################################################################################
#                                                                                          #
#                                          HEATMAP                                         #
#                                                                                          #
############################################################################################

def heatmap(p, sigma: float, frame: Frame) -> np.ndarray:
    """
    Gaussian bump of p rasterized on the frame's grid: the entry of the cell centred at (u, v) is
        exp(-((u - px)^2 + (v - py)^2) / (2 sigma^2))
    with (u, v) in the same normalized frame as p.

    :param p:       Point in normalized coordinates
    :param sigma:   Width in normalized units, positive
    :param frame:   Grid and coordinate transform
    :return:        Array (H, W) with values in (0, 1]
    """
    if sigma is None or sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    p = as_point(p)
    gx = np.exp(-(frame.column_centers() - p[0]) ** 2 / (2.0 * sigma ** 2))
    gy = np.exp(-(frame.row_centers() - p[1]) ** 2 / (2.0 * sigma ** 2))
    return np.outer(gy, gx)


############################################################################################
#                                                                                          #
#                                      POLYLINE HELPERS                                    #
#                                                                                          #
############################################################################################

def polyline_arclength(points: np.ndarray) -> np.ndarray:
    """
    Cumulative arc length at every vertex, starting at 0
    """
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return np.zeros(len(points))
    steps = np.hypot(*np.diff(points, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(steps)])


def project_to_polyline(points: np.ndarray, p, arclength: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    Nearest point of the polyline to p by Euclidean distance; ties go to the smaller arc length.

    :return:    (arc length of the projection, distance from p)
    """
    points = np.asarray(points, dtype=float)
    p = as_point(p)
    if arclength is None:
        arclength = polyline_arclength(points)
    if len(points) == 1:
        return 0.0, float(np.hypot(*(p - points[0])))
    a, b = points[:-1], points[1:]
    ab = b - a
    length2 = np.einsum("ij,ij->i", ab, ab)
    t = np.where(length2 > 0, np.einsum("ij,ij->i", p - a, ab) / np.where(length2 > 0, length2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    nearest = a + t[:, None] * ab
    dist = np.hypot(*(nearest - p).T)
    best = int(np.argmin(dist))        # argmin returns the first minimum -> smallest arc length
    s = arclength[best] + t[best] * math.sqrt(length2[best])
    return float(s), float(dist[best])


def point_at_arclength(points: np.ndarray, s, arclength: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Position(s) on the polyline at arc length s (clamped to the polyline ends)
    """
    points = np.asarray(points, dtype=float)
    if arclength is None:
        arclength = polyline_arclength(points)
    s = np.clip(np.asarray(s, dtype=float), 0.0, arclength[-1])
    x = np.interp(s, arclength, points[:, 0])
    y = np.interp(s, arclength, points[:, 1])
    return np.stack([x, y], axis=-1)


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """
    Points every `spacing` units of arc length along the polyline (the last vertex always included)
    """
    arclength = polyline_arclength(points)
    stations = np.arange(0.0, arclength[-1], spacing)
    return np.concatenate([point_at_arclength(points, stations, arclength), np.asarray(points[-1:], float)])


def polyline_crossings(pa: np.ndarray, pb: np.ndarray) -> List[Tuple[float, float]]:
    """
    All spatial crossings of two polylines as fractional vertex indices (index_a, index_b),
    ordered along pa
    """
    pa, pb = np.asarray(pa, float), np.asarray(pb, float)
    if len(pa) < 2 or len(pb) < 2:
        return []
    a0, r = pa[:-1, None, :], np.diff(pa, axis=0)[:, None, :]
    b0, q = pb[None, :-1, :], np.diff(pb, axis=0)[None, :, :]
    denom = r[..., 0] * q[..., 1] - r[..., 1] * q[..., 0]
    w = b0 - a0
    safe = np.where(np.abs(denom) < 1e-14, 1.0, denom)
    ta = (w[..., 0] * q[..., 1] - w[..., 1] * q[..., 0]) / safe
    tb = (w[..., 0] * r[..., 1] - w[..., 1] * r[..., 0]) / safe
    hit = (np.abs(denom) >= 1e-14) & (ta >= 0.0) & (ta <= 1.0) & (tb >= 0.0) & (tb <= 1.0)
    rows, cols = np.nonzero(hit)
    return [(float(i + ta[i, j]), float(j + tb[i, j])) for i, j in zip(rows, cols)]
