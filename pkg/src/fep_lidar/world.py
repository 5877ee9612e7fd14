"""Deterministic 2D world: segment maps, raycast laser simulation, kinematics.

The robot is a point with a clearance radius moving in a rectangular arena
bounded by four implicit walls plus the explicit obstacle segments of the map.
Heading is fixed; the laser fan is centered on it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

DEFAULT_CLEARANCE = 0.25

# Parallel-ray rejection threshold for the 2D cross product in ray casting.
_PARALLEL_EPS = 1e-12

# How far short of exact contact apply_action stops, in meters along the motion.
_CONTACT_BACKOFF = 1e-9


class MapFormatError(ValueError):
    """Map file failed to parse or validate."""


class SamplingExhaustedError(RuntimeError):
    """Rejection sampling could not find a free pose (degenerate map)."""


@dataclass(frozen=True)
class Pose2:
    """Planar position in meters. Heading is fixed globally, not per pose."""

    x: float
    y: float

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    @staticmethod
    def from_array(a) -> "Pose2":
        return Pose2(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class SensorConfig:
    """Laser rangefinder parameters. Beams spread uniformly over the aperture."""

    beam_count: int = 622
    aperture: float = 1.5 * math.pi
    max_range: float = 25.0
    noise_sigma: float = 0.02
    heading: float = 0.0

    def __post_init__(self):
        if self.beam_count < 2:
            raise ValueError(f"beam_count must be >= 2, got {self.beam_count}")
        if not 0.0 < self.aperture <= 2.0 * math.pi:
            raise ValueError(f"aperture must be in (0, 2*pi], got {self.aperture}")
        if self.max_range <= 0.0:
            raise ValueError(f"max_range must be positive, got {self.max_range}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def beam_angles(self) -> np.ndarray:
        """Beam directions in radians, first to last across the aperture."""
        b = self.beam_count
        offsets = np.arange(b) * (self.aperture / (b - 1))
        return self.heading - self.aperture / 2.0 + offsets


@dataclass(frozen=True)
class WorldMap:
    """Line-segment obstacle map. `segments` includes the four boundary walls."""

    segments: np.ndarray  # (S, 4) rows of x1, y1, x2, y2 in meters
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    clearance: float = DEFAULT_CLEARANCE

    @staticmethod
    def build(segments, bounds, clearance: float = DEFAULT_CLEARANCE) -> "WorldMap":
        """Validate explicit segments and append the four boundary walls."""
        xmin, ymin, xmax, ymax = (float(v) for v in bounds)
        if not (xmax > xmin and ymax > ymin):
            raise MapFormatError(f"bounds form an empty rectangle: {bounds}")
        if clearance < 0.0:
            raise MapFormatError(f"clearance must be >= 0, got {clearance}")
        segs = np.asarray(segments, dtype=float).reshape(-1, 4)
        for i, (x1, y1, x2, y2) in enumerate(segs):
            if not np.all(np.isfinite([x1, y1, x2, y2])):
                raise MapFormatError(f"segment {i} has non-finite endpoint")
            if x1 == x2 and y1 == y2:
                raise MapFormatError(f"segment {i} has zero length")
            for px, py in ((x1, y1), (x2, y2)):
                if not (xmin <= px <= xmax and ymin <= py <= ymax):
                    raise MapFormatError(
                        f"segment {i} endpoint ({px}, {py}) outside bounds {bounds}"
                    )
        walls = np.array(
            [
                [xmin, ymin, xmax, ymin],
                [xmax, ymin, xmax, ymax],
                [xmax, ymax, xmin, ymax],
                [xmin, ymax, xmin, ymin],
            ]
        )
        all_segs = np.vstack([segs, walls]) if len(segs) else walls
        all_segs.setflags(write=False)
        return WorldMap(all_segs, (xmin, ymin, xmax, ymax), float(clearance))

    @property
    def explicit_segments(self) -> np.ndarray:
        """Obstacle segments without the four implicit boundary walls."""
        return self.segments[:-4]

    def contains(self, p) -> bool:
        x, y = float(p[0]), float(p[1])
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def identity_hash(self) -> str:
        """Stable hash of bounds, clearance, and explicit segment list."""
        lines = [
            "bounds " + " ".join(f"{v:.17g}" for v in self.bounds),
            f"clearance {self.clearance:.17g}",
        ]
        for row in self.explicit_segments:
            lines.append("seg " + " ".join(f"{v:.17g}" for v in row))
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def load_map(path) -> WorldMap:
    """Parse a UTF-8 map file: `bounds`, optional `clearance`, then `seg` lines."""
    bounds = None
    clearance = DEFAULT_CLEARANCE
    segments: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            tag, vals = fields[0], fields[1:]
            try:
                nums = [float(v) for v in vals]
            except ValueError:
                raise MapFormatError(f"{path}:{lineno}: non-numeric value in {line!r}")
            if tag == "bounds":
                if len(nums) != 4:
                    raise MapFormatError(f"{path}:{lineno}: bounds needs 4 numbers")
                bounds = tuple(nums)
            elif tag == "clearance":
                if len(nums) != 1:
                    raise MapFormatError(f"{path}:{lineno}: clearance needs 1 number")
                clearance = nums[0]
            elif tag == "seg":
                if len(nums) != 4:
                    raise MapFormatError(f"{path}:{lineno}: seg needs 4 numbers")
                segments.append(nums)
            else:
                raise MapFormatError(f"{path}:{lineno}: unknown directive {tag!r}")
    if bounds is None:
        raise MapFormatError(f"{path}: missing bounds line")
    return WorldMap.build(segments, bounds, clearance)


def default_map() -> WorldMap:
    """The shipped 24 m x 8 m corridor whose lower wall slopes inward."""
    ref = resources.files("fep_lidar").joinpath("maps/corridor.map")
    with resources.as_file(ref) as p:
        return load_map(p)


def _segment_frames(wmap: WorldMap):
    segs = wmap.segments
    a = segs[:, 0:2]
    d = segs[:, 2:4] - segs[:, 0:2]
    return a, d


def beam_ranges(wmap: WorldMap, origins, angles, max_range: float) -> np.ndarray:
    """Noise-free ray distances for each (origin, angle) pair.

    origins: (N, 2); angles: (M,) shared across origins. Returns (N, M).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    angles = np.asarray(angles, dtype=float)
    a, s = _segment_frames(wmap)  # (S, 2) each
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (M, 2)

    # Broadcast to (N, M, S): q = segment start - origin, solved against ray dirs.
    qx = a[None, None, :, 0] - origins[:, None, None, 0]
    qy = a[None, None, :, 1] - origins[:, None, None, 1]
    dx = dirs[None, :, 0, None]
    dy = dirs[None, :, 1, None]
    sx = s[None, None, :, 0]
    sy = s[None, None, :, 1]

    denom = dx * sy - dy * sx
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qx * sy - qy * sx) / denom
        u = (qx * dy - qy * dx) / denom
    seg_len = np.hypot(s[:, 0], s[:, 1])[None, None, :]
    valid = (
        (np.abs(denom) > _PARALLEL_EPS * seg_len)
        & (t >= 0.0)
        & (u >= 0.0)
        & (u <= 1.0)
    )
    t = np.where(valid, t, np.inf)
    hit = t.min(axis=2)
    return np.minimum(hit, max_range)


def ray_cast(wmap: WorldMap, origin: Pose2, angle: float, max_range: float) -> float:
    """Distance to the nearest segment along one ray, capped at max_range."""
    return float(beam_ranges(wmap, origin.to_array()[None, :], [angle], max_range)[0, 0])


def simulate_scan(
    wmap: WorldMap, pose: Pose2, cfg: SensorConfig, rng: np.random.Generator
) -> np.ndarray:
    """One laser scan in meters, additive Gaussian noise, clamped to the range."""
    ranges = beam_ranges(wmap, pose.to_array()[None, :], cfg.beam_angles(), cfg.max_range)[0]
    if cfg.noise_sigma > 0.0:
        ranges = ranges + rng.normal(0.0, cfg.noise_sigma, size=cfg.beam_count)
    return np.clip(ranges, 0.0, cfg.max_range)


def point_segment_distances(wmap: WorldMap, points) -> np.ndarray:
    """Min distance from each point to each map segment. (N, S)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a, d = _segment_frames(wmap)
    rel = pts[:, None, :] - a[None, :, :]  # (N, S, 2)
    dd = np.einsum("sk,sk->s", d, d)
    t = np.einsum("nsk,sk->ns", rel, d) / dd
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * d[None, :, :]
    return np.hypot(pts[:, None, 0] - closest[:, :, 0], pts[:, None, 1] - closest[:, :, 1])


def min_clearance(wmap: WorldMap, p) -> float:
    """Distance from a point to the nearest map segment (walls included)."""
    return float(point_segment_distances(wmap, np.asarray(p, float)[None, :]).min())


def is_free(wmap: WorldMap, p) -> bool:
    return wmap.contains(p) and min_clearance(wmap, p) >= wmap.clearance


def sample_free_pose(
    wmap: WorldMap, rng: np.random.Generator, max_tries: int = 10_000
) -> Pose2:
    """Uniform pose over the bounds, rejecting clearance violations."""
    xmin, ymin, xmax, ymax = wmap.bounds
    for _ in range(max_tries):
        p = rng.uniform([xmin, ymin], [xmax, ymax])
        if min_clearance(wmap, p) >= wmap.clearance:
            return Pose2.from_array(p)
    raise SamplingExhaustedError(
        f"no free pose found in {max_tries} tries (clearance {wmap.clearance})"
    )


def _capsule_entry_fraction(p0, disp, a, b, r: float) -> float:
    """First tau in [0, 1] where p0 + tau*disp reaches distance r from segment ab.

    Returns inf when the motion never contacts the capsule. Assumes the start
    point is outside the capsule (maintained by the apply_action contract).
    """
    best = math.inf
    vv = float(disp @ disp)

    # Endpoint discs.
    for c in (a, b):
        w = p0 - c
        bq = 2.0 * float(w @ disp)
        cq = float(w @ w) - r * r
        disc = bq * bq - 4.0 * vv * cq
        if disc >= 0.0 and vv > 0.0:
            sq = math.sqrt(disc)
            for root in ((-bq - sq) / (2.0 * vv), (-bq + sq) / (2.0 * vv)):
                if -1e-12 <= root <= 1.0 and cq > 0.0:
                    best = min(best, max(root, 0.0))
                    break  # smaller root first; entry found

    # Offset band of the segment interior.
    s = b - a
    slen = float(np.hypot(s[0], s[1]))
    n_hat = np.array([-s[1], s[0]]) / slen
    d0 = float((p0 - a) @ n_hat)
    dv = float(disp @ n_hat)
    if abs(dv) > 0.0:
        for side in (r, -r):
            tau = (side - d0) / dv
            if -1e-12 <= tau <= 1.0:
                pt = p0 + max(tau, 0.0) * disp
                proj = float((pt - a) @ s) / (slen * slen)
                if 0.0 <= proj <= 1.0 and abs(d0) > r:
                    best = min(best, max(tau, 0.0))
    return best


def apply_action(wmap: WorldMap, pose: Pose2, a, dt: float) -> Pose2:
    """Integrate a velocity command, stopping at the last collision-free point."""
    disp = np.asarray(a, dtype=float) * dt
    length = float(np.hypot(disp[0], disp[1]))
    if length < 1e-15:
        return pose
    p0 = pose.to_array()
    tau = 1.0
    segs = wmap.segments
    for i in range(len(segs)):
        entry = _capsule_entry_fraction(
            p0, disp, segs[i, 0:2], segs[i, 2:4], wmap.clearance
        )
        if entry < tau:
            tau = entry
    if tau < 1.0:
        # Stop a hair short of exact contact so the result stays strictly free.
        tau = max(0.0, tau - _CONTACT_BACKOFF / length)
    return Pose2.from_array(p0 + tau * disp)


def segment_is_clear(wmap: WorldMap, p, q) -> bool:
    """True when the straight segment p -> q keeps full clearance everywhere."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    disp = q - p
    if float(np.hypot(disp[0], disp[1])) < 1e-15:
        return is_free(wmap, p)
    if not (is_free(wmap, p) and is_free(wmap, q)):
        return False
    segs = wmap.segments
    for i in range(len(segs)):
        if _capsule_entry_fraction(p, disp, segs[i, 0:2], segs[i, 2:4], wmap.clearance) <= 1.0:
            return False
    return True
