"""Synthetic stereo calibration samples.

A sample is a camera configuration plus ``N`` stereo correspondences of
scene points, together with every derived ground-truth quantity.  Images are
not rendered; the correspondences are what the losses consume.

Datasets are stored as JSON Lines::

    {"schema": "calibloss.dataset", "version": 1, "count": ..., "seed": ..., "range": {...}}
    {"id": 0, "params": {...}, "points3d": [...], "left": [...], "right": [...], "disparity": [...]}
    ...
    {"checksum": "<16 hex digits>"}

The checksum is the 64-bit FNV-1a hash of every byte preceding the trailer.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numba
import numpy as np

from . import geometry as geo
from .geometry import CameraParams, Point3, PointImage
from .loss import LossTargets

SCHEMA = "calibloss.dataset"
SCHEMA_VERSION = 1
DEFAULT_CONFIG_COUNT = 900
MAX_REJECTIONS = 10_000


class DatagenError(ValueError):
    pass


class EmptyRange(DatagenError):
    pass


class Unfillable(DatagenError):
    pass


class SchemaVersionMismatch(DatagenError):
    pass


class ChecksumMismatch(DatagenError):
    pass


def _interval(value) -> tuple[float, float]:
    lo, hi = (float(v) for v in value)
    return lo, hi


@dataclass(frozen=True)
class ConfigRange:
    """Sampling intervals for camera configurations and scene points.

    Angles are in radians.  ``principal_offset`` is the principal-point
    offset from the image center in pixels, ``depth`` the camera-frame
    forward distance of scene points in meters.  ``disparity`` bounds default
    to the extremes implied by focal length, baseline and depth.
    """

    fov: tuple = (math.radians(60.0), math.radians(100.0))
    pitch: tuple = (math.radians(-15.0), math.radians(15.0))
    tx: tuple = (-2.0, 10.0)
    ty: tuple = (-2.0, 10.0)
    tz: tuple = (-2.0, 10.0)
    baseline: tuple = (0.2, 1.0)
    depth: tuple = (4.0, 50.0)
    principal_offset: tuple = (-5.0, 5.0)
    disparity: tuple | None = None
    width: int = 150
    height: int = 150
    points: int = 16

    def __post_init__(self) -> None:
        for f in ("fov", "pitch", "tx", "ty", "tz", "baseline", "depth", "principal_offset"):
            object.__setattr__(self, f, _interval(getattr(self, f)))
        if self.disparity is not None:
            object.__setattr__(self, "disparity", _interval(self.disparity))
        self.validate()

    def validate(self) -> None:
        for name in ("fov", "pitch", "tx", "ty", "tz", "baseline", "depth", "principal_offset"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise EmptyRange(f"{name}: [{lo}, {hi}] is empty")
        if self.width < 1 or self.height < 1 or self.points < 1:
            raise EmptyRange("image size and point count must be >= 1")
        if not (0.0 < self.fov[0] and self.fov[1] < math.pi):
            raise EmptyRange("field of view must lie in (0, pi)")
        if not (-math.pi / 2 < self.pitch[0] and self.pitch[1] < math.pi / 2):
            raise EmptyRange("pitch must lie in (-pi/2, pi/2)")
        if self.baseline[0] <= 0.0 or self.depth[0] <= 0.0:
            raise EmptyRange("baseline and depth must be positive")
        if self.disparity is not None:
            lo, hi = self.disparity
            if not (0.0 < lo <= hi):
                raise EmptyRange(f"disparity: [{lo}, {hi}] is empty")

    def focal(self, fov: float) -> float:
        return (self.width / 2.0) / math.tan(fov / 2.0)

    @property
    def focal_bounds(self) -> tuple[float, float]:
        return self.focal(self.fov[1]), self.focal(self.fov[0])

    @property
    def disparity_bounds(self) -> tuple[float, float]:
        if self.disparity is not None:
            return self.disparity
        f_lo, f_hi = self.focal_bounds
        return f_lo * self.baseline[0] / self.depth[1], f_hi * self.baseline[1] / self.depth[0]

    def param_bounds(self) -> dict[str, tuple[float, float]]:
        """Closed interval of every camera parameter, in parameter order."""
        f = self.focal_bounds
        off = self.principal_offset
        return {
            "fx": f,
            "fy": f,
            "px": (self.width / 2.0 + off[0], self.width / 2.0 + off[1]),
            "py": (self.height / 2.0 + off[0], self.height / 2.0 + off[1]),
            "b": self.baseline,
            "d": self.disparity_bounds,
            "theta_p": self.pitch,
            "tx": self.tx,
            "ty": self.ty,
            "tz": self.tz,
        }

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ConfigRange":
        data = dict(data)
        # convenience keys in degrees
        for key in ("fov", "pitch"):
            deg = data.pop(f"{key}_deg", None)
            if deg is not None:
                data[key] = [math.radians(float(v)) for v in deg]
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise EmptyRange(f"unknown range keys: {sorted(unknown)}")
        for k in ("width", "height", "points"):
            if k in data:
                data[k] = int(data[k])
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DatagenError):
                raise
            raise EmptyRange(str(exc)) from exc


def sample_configs(rng_range: ConfigRange, count: int, seed: int) -> list[CameraParams]:
    """Uniform draws of ``count`` camera configurations.

    ``fx = fy`` follow from the field of view.  ``d`` is a placeholder (the
    disparity of a point at mid depth); :func:`generate_sample` replaces it by
    the mean disparity of the generated points.
    """
    if count < 1:
        raise EmptyRange(f"count must be >= 1, got {count}")
    r = rng_range
    rng = np.random.default_rng(seed)
    lows = np.array([r.fov[0], r.pitch[0], r.principal_offset[0], r.principal_offset[0],
                     r.baseline[0], r.tx[0], r.ty[0], r.tz[0]])
    highs = np.array([r.fov[1], r.pitch[1], r.principal_offset[1], r.principal_offset[1],
                      r.baseline[1], r.tx[1], r.ty[1], r.tz[1]])
    draws = lows + (highs - lows) * rng.random((count, lows.size))
    mid_depth = 0.5 * (r.depth[0] + r.depth[1])
    out = []
    for fov, pitch, ox, oy, b, tx, ty, tz in draws.tolist():
        f = r.focal(fov)
        out.append(CameraParams(
            fx=f, fy=f, px=r.width / 2.0 + ox, py=r.height / 2.0 + oy,
            b=b, d=f * b / mid_depth, theta_p=pitch, tx=tx, ty=ty, tz=tz,
        ))
    return out


@dataclass(frozen=True)
class Sample:
    id: int
    gt: CameraParams
    points3d: tuple
    left: tuple
    right: tuple
    disparity: tuple

    @cached_property
    def targets(self) -> LossTargets:
        return LossTargets.from_observations(self.gt, self.left, self.disparity)

    @property
    def constraints(self) -> geo.ConstraintTargets:
        return self.targets.actual.constraints

    @property
    def reconstructed(self) -> tuple:
        return self.targets.actual.points

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "params": self.gt.to_dict(),
            "points3d": [list(p) for p in self.points3d],
            "left": [list(p) for p in self.left],
            "right": [list(p) for p in self.right],
            "disparity": list(self.disparity),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Sample":
        return cls(
            id=int(data["id"]),
            gt=CameraParams.from_dict(data["params"]),
            points3d=tuple(Point3(*map(float, p)) for p in data["points3d"]),
            left=tuple(PointImage(*map(float, p)) for p in data["left"]),
            right=tuple(PointImage(*map(float, p)) for p in data["right"]),
            disparity=tuple(float(v) for v in data["disparity"]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.id)


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    """Independent deterministic substream for one sample."""
    return np.random.default_rng([seed, sample_id])


def _in_frame(pt: Sequence[float], width: int, height: int) -> bool:
    return 0.0 <= pt[0] <= width and 0.0 <= pt[1] <= height


def generate_sample(cfg: CameraParams, rng_range: ConfigRange, rng: np.random.Generator, sample_id: int = 0) -> Sample:
    """Rejection-sample scene points visible in both stereo views.

    Candidates are drawn uniformly over image position and camera-frame depth,
    lifted to the world frame and re-projected with the stereo forward model;
    a candidate is kept when both observations fall inside the image.
    """
    W, H = rng_range.width, rng_range.height
    d_lo, d_hi = rng_range.depth
    points, left, right, disp = [], [], [], []
    failures = 0
    while len(points) < rng_range.points:
        x, y, depth = rng.random(3).tolist()
        x *= W
        y *= H
        depth = d_lo + (d_hi - d_lo) * depth
        cam = (depth, -depth * (x - cfg.px) / cfg.fx, depth * (cfg.py - y) / cfg.fy)
        Q = geo.camera_to_world(cfg, cam)
        obs = geo.project_stereo(cfg, Q)
        if _in_frame(obs.left, W, H) and _in_frame(obs.right, W, H):
            points.append(Point3(*Q))
            left.append(obs.left)
            right.append(obs.right)
            disp.append(obs.disparity)
            failures = 0
            continue
        failures += 1
        if failures >= MAX_REJECTIONS:
            raise Unfillable(f"sample {sample_id}: no visible scene point after {MAX_REJECTIONS} draws")
    gt = cfg.with_value("d", math.fsum(disp) / len(disp))
    return Sample(sample_id, gt, tuple(points), tuple(left), tuple(right), tuple(disp))


def generate_dataset(rng_range: ConfigRange, count: int, seed: int) -> list[Sample]:
    configs = sample_configs(rng_range, count, seed)
    return [generate_sample(c, rng_range, sample_rng(seed, i), i) for i, c in enumerate(configs)]


# -- serialization ----------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


_MASK64 = 0xFFFFFFFFFFFFFFFF


@numba.njit(cache=True)
def _fnv1a64_kernel(data, h0):
    h = np.uint64(h0)
    prime = np.uint64(_FNV_PRIME)
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


class Fnv1a64:
    """Incremental 64-bit FNV-1a."""

    def __init__(self) -> None:
        self._h = _FNV_OFFSET

    def update(self, data: bytes) -> None:
        if data:
            h = _fnv1a64_kernel(np.frombuffer(data, dtype=np.uint8), np.uint64(self._h))
            self._h = int(h) & _MASK64

    def hexdigest(self) -> str:
        return f"{self._h:016x}"


def fnv1a64(data: bytes) -> str:
    h = Fnv1a64()
    h.update(data)
    return h.hexdigest()


def _fmt(obj) -> str:
    """Compact JSON with floats at 17 significant digits."""
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("non-finite value in dataset")
        return format(obj, ".17g")
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def header_dict(rng_range: ConfigRange, seed: int, count: int) -> dict:
    return {"schema": SCHEMA, "version": SCHEMA_VERSION, "count": count, "seed": seed,
            "range": rng_range.to_dict()}


def write_dataset(path: str | os.PathLike, samples: Iterable[Sample], rng_range: ConfigRange,
                  seed: int, count: int | None = None) -> str:
    """Write samples (any iterable; streamed) and return the checksum.

    ``count`` must be given when ``samples`` has no length.
    """
    if count is None:
        count = len(samples)  # type: ignore[arg-type]
    h = Fnv1a64()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    written = 0
    with open(tmp, "wb") as fh:
        line = (_fmt(header_dict(rng_range, seed, count)) + "\n").encode()
        h.update(line)
        fh.write(line)
        for s in samples:
            line = (_fmt(s.to_dict()) + "\n").encode()
            h.update(line)
            fh.write(line)
            written += 1
        if written != count:
            raise DatagenError(f"header announces {count} samples, wrote {written}")
        digest = h.hexdigest()
        fh.write((_fmt({"checksum": digest}) + "\n").encode())
    os.replace(tmp, path)
    return digest


@dataclass
class DatasetHeader:
    count: int
    seed: int
    range: ConfigRange
    checksum: str = ""
    extra: dict = field(default_factory=dict)


def _parse_header(line: bytes) -> DatasetHeader:
    try:
        head = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaVersionMismatch(f"unreadable header: {exc}") from exc
    if not isinstance(head, dict) or head.get("schema") != SCHEMA:
        raise SchemaVersionMismatch("not a calibloss dataset")
    if head.get("version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"schema version {head.get('version')!r}, expected {SCHEMA_VERSION}")
    return DatasetHeader(count=int(head["count"]), seed=int(head["seed"]),
                         range=ConfigRange.from_dict(head["range"]))


def verify_dataset(path: str | os.PathLike) -> DatasetHeader:
    """Check header, sample count and checksum in one streaming pass."""
    h = Fnv1a64()
    n_lines = 0
    trailer = None
    header = None
    with open(path, "rb") as fh:
        first = fh.readline()
        if not first:
            raise SchemaVersionMismatch("empty file")
        header = _parse_header(first)
        h.update(first)
        for line in fh:
            if line.startswith(b'{"checksum"'):
                trailer = line
                break
            h.update(line)
            n_lines += 1
        rest = fh.read(1)
    if trailer is None or rest:
        raise ChecksumMismatch("missing or misplaced checksum trailer")
    if not trailer.endswith(b"\n"):
        raise ChecksumMismatch("truncated checksum trailer")
    try:
        stored = json.loads(trailer)["checksum"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise ChecksumMismatch("unreadable checksum trailer") from exc
    if stored != h.hexdigest():
        raise ChecksumMismatch(f"checksum {h.hexdigest()} != stored {stored}")
    if n_lines != header.count:
        raise ChecksumMismatch(f"header announces {header.count} samples, found {n_lines}")
    header.checksum = stored
    return header


def iter_dataset(path: str | os.PathLike, verify: bool = True) -> Iterator[Sample]:
    """Stream samples with constant memory; the file is verified before the first yield."""
    if verify:
        verify_dataset(path)
    with open(path, "rb") as fh:
        fh.readline()
        for line in fh:
            if line.startswith(b'{"checksum"'):
                return
            yield Sample.from_dict(json.loads(line))


def read_dataset(path: str | os.PathLike) -> tuple[DatasetHeader, list[Sample]]:
    header = verify_dataset(path)
    return header, list(iter_dataset(path, verify=False))
