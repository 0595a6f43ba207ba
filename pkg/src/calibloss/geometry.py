"""Pinhole stereo camera model with pitch-only rotation.

All functions accept plain floats or :class:`calibloss.diff.Var` values, so
the same code produces ground-truth targets and differentiable predictions.
Matrices are nested tuples in row-major order.

Two frames are in play:

* the projection ``P = K [R | t]`` with ``R`` a rotation about the Y axis,
  used for the vanishing points and the image of the world origin;
* the stereo reconstruction chain, where the camera-frame forward axis is
  ``x_cam`` (depth from disparity), ``y_cam`` is lateral and ``z_cam`` is up.
  :func:`project_stereo` is the exact inverse of :func:`reconstruct_3d` and is
  the forward model used by the dataset generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

from .diff import Scalar, Var, cos, linear, sin, sqrt, value_of

PARAM_NAMES = ("fx", "fy", "px", "py", "b", "d", "theta_p", "tx", "ty", "tz")
# column order of published MAE tables
TABLE_ORDER = ("fx", "fy", "px", "py", "b", "d", "tx", "ty", "tz", "theta_p")
PARAM_UNITS = {
    "fx": "px",
    "fy": "px",
    "px": "px",
    "py": "px",
    "b": "m",
    "d": "px",
    "theta_p": "rad",
    "tx": "m",
    "ty": "m",
    "tz": "m",
}

DEHOMOG_EPS = 1e-12


class GeometryError(ValueError):
    pass


class NonPositiveFocal(GeometryError):
    pass


class PointAtInfinity(GeometryError):
    pass


class ZeroDisparity(GeometryError):
    pass


@dataclass(frozen=True)
class CameraParams:
    """The ten regressed quantities.

    Focal lengths and principal point in pixels, baseline in meters, disparity
    in pixels, pitch in radians, translation in meters.
    """

    fx: Scalar
    fy: Scalar
    px: Scalar
    py: Scalar
    b: Scalar
    d: Scalar
    theta_p: Scalar
    tx: Scalar
    ty: Scalar
    tz: Scalar

    @classmethod
    def from_sequence(cls, values: Sequence[Scalar]) -> "CameraParams":
        if len(values) != 10:
            raise ValueError(f"expected 10 values, got {len(values)}")
        return cls(*values)

    def as_tuple(self) -> tuple:
        return (
            self.fx, self.fy, self.px, self.py, self.b,
            self.d, self.theta_p, self.tx, self.ty, self.tz,
        )

    def values(self) -> tuple[float, ...]:
        """Plain-float copy of :meth:`as_tuple`."""
        return tuple(value_of(v) for v in self.as_tuple())

    def to_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, self.values()))

    @classmethod
    def from_dict(cls, data: dict) -> "CameraParams":
        return cls(**{name: float(data[name]) for name in PARAM_NAMES})

    def with_value(self, name: str, value: Scalar) -> "CameraParams":
        vals = list(self.as_tuple())
        vals[PARAM_NAMES.index(name)] = value
        return CameraParams(*vals)

    def is_physical(self) -> bool:
        vals = self.values()
        fx, fy, _, _, b, d, th, *_ = vals
        return (
            all(math.isfinite(v) for v in vals)
            and fx > 0 and fy > 0 and b > 0 and d > 0
            and -math.pi / 2 < th < math.pi / 2
        )


assert tuple(f.name for f in fields(CameraParams)) == PARAM_NAMES


class Point3(NamedTuple):
    X: Scalar
    Y: Scalar
    Z: Scalar


class PointImage(NamedTuple):
    x: Scalar
    y: Scalar


Mat3 = tuple  # 3x3 nested tuple
Mat34 = tuple  # 3x4 nested tuple


def _dot(a: Sequence[Scalar], b: Sequence[Scalar]) -> Scalar:
    s = a[0] * b[0]
    for x, y in zip(a[1:], b[1:]):
        s = s + x * y
    return s


def matmul(a: Sequence[Sequence[Scalar]], b: Sequence[Sequence[Scalar]]) -> tuple:
    cols = tuple(zip(*b))
    return tuple(tuple(_dot(row, col) for col in cols) for row in a)


def transpose(a: Sequence[Sequence[Scalar]]) -> tuple:
    return tuple(zip(*a))


def det3(m: Mat3) -> Scalar:
    (a, b, c), (d, e, f), (g, h, i) = m
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def build_intrinsics(p: CameraParams) -> Mat3:
    if value_of(p.fx) <= 0.0 or value_of(p.fy) <= 0.0:
        raise NonPositiveFocal(f"focal lengths must be positive, got ({value_of(p.fx)}, {value_of(p.fy)})")
    return (
        (p.fx, 0.0, p.px),
        (0.0, p.fy, p.py),
        (0.0, 0.0, 1.0),
    )


def build_rotation_pitch(theta_p: Scalar) -> Mat3:
    """Rotation by ``theta_p`` radians about the Y axis."""
    if not math.isfinite(value_of(theta_p)):
        raise GeometryError(f"non-finite pitch {value_of(theta_p)!r}")
    c, s = cos(theta_p), sin(theta_p)
    return (
        (c, 0.0, s),
        (0.0, 1.0, 0.0),
        (-s, 0.0, c),
    )


@dataclass(frozen=True)
class ProjectionModel:
    K: Mat3
    R: Mat3
    t: tuple
    P: Mat34

    @property
    def rows(self) -> tuple:
        """``p1T, p2T, p3T`` as 4-tuples."""
        return self.P

    @property
    def columns(self) -> tuple:
        """``c1..c4`` as 3-tuples."""
        return tuple(zip(*self.P))


def compose_projection(p: CameraParams) -> ProjectionModel:
    K = build_intrinsics(p)
    R = build_rotation_pitch(p.theta_p)
    t = (p.tx, p.ty, p.tz)
    # K is upper triangular with K[2] = (0, 0, 1): expand the product by hand
    (fx, _, px), (_, fy, py), _ = K
    r1 = R[0] + (t[0],)
    r2 = R[1] + (t[1],)
    r3 = R[2] + (t[2],)
    P = (
        tuple(fx * a + px * c for a, c in zip(r1, r3)),
        tuple(fy * b + py * c for b, c in zip(r2, r3)),
        r3,
    )
    return ProjectionModel(K=K, R=R, t=t, P=P)


def project_point(m: ProjectionModel, X: Sequence[Scalar]) -> PointImage:
    Xh = (X[0], X[1], X[2], 1.0)
    p1, p2, p3 = m.P
    w = _dot(p3, Xh)
    if abs(value_of(w)) < DEHOMOG_EPS:
        raise PointAtInfinity(f"homogeneous depth {value_of(w)!r}")
    return PointImage(_dot(p1, Xh) / w, _dot(p2, Xh) / w)


def project_homogeneous(m: ProjectionModel, Xh: Sequence[Scalar]) -> PointImage:
    """Project a homogeneous 4-vector (points at infinity allowed)."""
    p1, p2, p3 = m.P
    w = _dot(p3, Xh)
    if abs(value_of(w)) < DEHOMOG_EPS:
        raise PointAtInfinity(f"homogeneous depth {value_of(w)!r}")
    return PointImage(_dot(p1, Xh) / w, _dot(p2, Xh) / w)


_NAN2 = PointImage(math.nan, math.nan)


def _dehomogenize_column(m: ProjectionModel, j: int) -> tuple[PointImage, bool]:
    a1, a2, a3 = m.P[0][j], m.P[1][j], m.P[2][j]
    if abs(value_of(a3)) < DEHOMOG_EPS:
        return _NAN2, False
    return PointImage(a1 / a3, a2 / a3), True


@dataclass(frozen=True)
class ConstraintTargets:
    """Vanishing points of the three world axes and the image of the origin.

    Entries whose homogenizing divisor vanished hold NaN and are flagged
    ``False`` in ``finite``; losses skip them.
    """

    V_x: PointImage
    V_y: PointImage
    V_z: PointImage
    W_c: PointImage
    finite: tuple  # (V_x, V_y, V_z, W_c)

    @property
    def vanishing(self) -> tuple:
        return (self.V_x, self.V_y, self.V_z)

    def values(self) -> "ConstraintTargets":
        """Plain-float copy."""
        def f(pt):
            return PointImage(value_of(pt[0]), value_of(pt[1]))
        return ConstraintTargets(f(self.V_x), f(self.V_y), f(self.V_z), f(self.W_c), self.finite)


def vanishing_points(m: ProjectionModel) -> tuple[tuple[PointImage, PointImage, PointImage], tuple[bool, bool, bool]]:
    out = [_dehomogenize_column(m, j) for j in range(3)]
    return tuple(v for v, _ in out), tuple(ok for _, ok in out)


def world_center(m: ProjectionModel) -> tuple[PointImage, bool]:
    return _dehomogenize_column(m, 3)


def constraint_targets(m: ProjectionModel) -> ConstraintTargets:
    (vx, vy, vz), (fx_, fy_, fz_) = vanishing_points(m)
    wc, fw = world_center(m)
    return ConstraintTargets(vx, vy, vz, wc, (fx_, fy_, fz_, fw))


def rotation_residuals(R: Mat3) -> tuple:
    """Row orthogonality (three dot products), ``||R R^T - I||_F`` and ``det(R) - 1``."""
    r1, r2, r3 = R
    RRt = matmul(R, transpose(R))
    sq = 0.0
    for i in range(3):
        for j in range(3):
            e = RRt[i][j] - 1.0 if i == j else RRt[i][j]
            sq = sq + e * e
    return (_dot(r1, r2), _dot(r1, r3), _dot(r2, r3), sqrt(sq), det3(R) - 1.0)


def _cross(a: Sequence[Scalar], b: Sequence[Scalar]) -> tuple:
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def axis_plane_residuals(m: ProjectionModel) -> tuple:
    """Norms of cross products of the leading 3-vectors of row pairs (1,2), (1,3), (2,3).

    Does not vanish for real cameras; kept for inspection only.
    """
    rows = [r[:3] for r in m.P]
    out = []
    for i, j in ((0, 1), (0, 2), (1, 2)):
        c = _cross(rows[i], rows[j])
        out.append(sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]))
    return tuple(out)


def reconstruct_camera_frame(p: CameraParams, img: Sequence[Scalar]) -> tuple:
    """Image point plus disparity ``p.d`` to camera frame ``(x_cam, y_cam, z_cam)``."""
    if value_of(p.d) <= DEHOMOG_EPS:
        raise ZeroDisparity(f"disparity {value_of(p.d)!r}")
    if value_of(p.fx) <= 0.0 or value_of(p.fy) <= 0.0:
        raise NonPositiveFocal("focal lengths must be positive")
    x_cam = p.fx * p.b / p.d
    y_cam = -(x_cam / p.fx) * (img[0] - p.px)
    z_cam = (x_cam / p.fy) * (p.py - img[1])
    return (x_cam, y_cam, z_cam)


def camera_to_world(p: CameraParams, cam: Sequence[Scalar]) -> Point3:
    c, s = cos(p.theta_p), sin(p.theta_p)
    x_cam, y_cam, z_cam = cam
    return Point3(
        x_cam * c + z_cam * s + p.tx,
        y_cam + p.ty,
        -x_cam * s + z_cam * c + p.tz,
    )


def reconstruct_3d(p: CameraParams, img: Sequence[Scalar]) -> Point3:
    return camera_to_world(p, reconstruct_camera_frame(p, img))


def reconstruct_points(
    p: CameraParams,
    imgs: Sequence[Sequence[Scalar]],
    disparity_scale: Sequence[float] | None = None,
) -> tuple:
    """:func:`reconstruct_3d` over many points sharing one camera.

    Point ``i`` uses disparity ``p.d * disparity_scale[i]`` (the scale defaults
    to 1).  The expressions are regrouped so that everything independent of
    the point is computed once::

        x_cam = u / r,          u = fx b / d
        y_cam = (u / fx) (px - x) / r
        z_cam = (u / fy) (py - y) / r
    """
    if value_of(p.d) <= DEHOMOG_EPS:
        raise ZeroDisparity(f"disparity {value_of(p.d)!r}")
    if value_of(p.fx) <= 0.0 or value_of(p.fy) <= 0.0:
        raise NonPositiveFocal("focal lengths must be positive")
    c, s = cos(p.theta_p), sin(p.theta_p)
    u = p.fx * p.b / p.d
    ux = u / p.fx
    uy = u / p.fy
    uc, us = u * c, u * s
    uys, uyc = uy * s, uy * c
    px, py, tx, ty, tz = p.px, p.py, p.tx, p.ty, p.tz
    if disparity_scale is None:
        disparity_scale = [1.0] * len(imgs)
    out = []
    if not any(type(v) is Var for v in (uc, us, ux, uys, uyc, px, py, tx, ty, tz)):
        for img, r in zip(imgs, disparity_scale):
            inv = 1.0 / r
            a = (px - img[0]) * inv
            b = (py - img[1]) * inv
            out.append(Point3(uc * inv + uys * b + tx, ux * a + ty, -us * inv + uyc * b + tz))
        return tuple(out)
    for img, r in zip(imgs, disparity_scale):
        inv = 1.0 / r
        a = linear((inv, -inv), (px, img[0]))
        b = linear((inv, -inv), (py, img[1]))
        out.append(Point3(
            linear((inv, 1.0, 1.0), (uc, uys * b, tx)),
            linear((1.0, 1.0), (ux * a, ty)),
            linear((-inv, 1.0, 1.0), (us, uyc * b, tz)),
        ))
    return tuple(out)


def world_to_camera(p: CameraParams, X: Sequence[Scalar]) -> tuple:
    """Inverse of :func:`camera_to_world`."""
    c, s = cos(p.theta_p), sin(p.theta_p)
    dx, dy, dz = X[0] - p.tx, X[1] - p.ty, X[2] - p.tz
    return (dx * c - dz * s, dy, dx * s + dz * c)


class StereoObservation(NamedTuple):
    left: PointImage
    right: PointImage
    disparity: float


def project_stereo(p: CameraParams, X: Sequence[float]) -> StereoObservation:
    """Forward stereo model matching :func:`reconstruct_3d`.

    Depth is the camera-frame forward coordinate ``x_cam``; the disparity is
    ``fx * b / x_cam`` and the right observation is shifted left by it.
    """
    x_cam, y_cam, z_cam = world_to_camera(p, X)
    if x_cam <= DEHOMOG_EPS:
        raise PointAtInfinity(f"point behind or at the camera (depth {x_cam!r})")
    x = p.px - p.fx * y_cam / x_cam
    y = p.py - p.fy * z_cam / x_cam
    disp = p.fx * p.b / x_cam
    return StereoObservation(PointImage(x, y), PointImage(x - disp, y), disp)


def model_from_matrix(P: Sequence[Sequence[float]]) -> ProjectionModel:
    """Split a numeric 3x4 matrix into ``K``, ``R``, ``t`` by RQ decomposition.

    ``K`` gets a positive diagonal.  The sign of ``det(R)`` is left as found,
    so a reflected matrix shows up in the rotation residuals.
    """
    import numpy as np

    A = np.asarray(P, dtype=float)
    if A.shape != (3, 4) or not np.all(np.isfinite(A)):
        raise GeometryError("expected a finite 3x4 matrix")
    M = A[:, :3]
    if abs(np.linalg.det(M)) < DEHOMOG_EPS:
        raise GeometryError("left 3x3 block is singular")
    flip = np.eye(3)[::-1]
    Q, U = np.linalg.qr((flip @ M).T)
    K = flip @ U.T @ flip
    R = flip @ Q.T
    D = np.diag(np.sign(np.diag(K)))
    K, R = K @ D, D @ R
    t = np.linalg.solve(K, A[:, 3])

    def tup(a):
        return tuple(tuple(float(v) for v in row) for row in a)

    return ProjectionModel(K=tup(K), R=tup(R), t=tuple(float(v) for v in t), P=tup(A))
