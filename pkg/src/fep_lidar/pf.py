"""Odometry-free Monte-Carlo localization baseline.

Particles carry position hypotheses in meters. With no odometry available,
prediction is a Gaussian random walk (projected back into free space);
weighting compares the observed scan against noise-free expected scans on a
strided subset of beams; systematic resampling kicks in when the effective
sample size collapses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fep_lidar.world import (
    Pose2,
    SensorConfig,
    WorldMap,
    beam_ranges,
    point_segment_distances,
    sample_free_pose,
)


@dataclass(frozen=True)
class PfConfig:
    n_particles: int = 500
    diffusion_sigma: float = 0.3  # meters per predict step, per axis
    likelihood_sigma: float = 0.5  # meters
    beam_stride: int = 8  # weight on every k-th beam
    ess_threshold: float = 0.5  # resample when ESS < threshold * n

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError(f"n_particles must be >= 2, got {self.n_particles}")
        if self.diffusion_sigma <= 0.0:
            raise ValueError(f"diffusion_sigma must be > 0, got {self.diffusion_sigma}")
        if self.likelihood_sigma <= 0.0:
            raise ValueError(
                f"likelihood_sigma must be > 0, got {self.likelihood_sigma}"
            )
        if self.beam_stride < 1:
            raise ValueError(f"beam_stride must be >= 1, got {self.beam_stride}")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError(
                f"ess_threshold must be in (0, 1], got {self.ess_threshold}"
            )


@dataclass
class ParticleSet:
    """Weighted position hypotheses; weights kept normalized between updates."""

    poses: np.ndarray  # (n, 2) meters
    weights: np.ndarray  # (n,) nonnegative, summing to 1

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.poses) != len(self.weights):
            raise ValueError("poses and weights differ in length")

    def __len__(self) -> int:
        return len(self.poses)


def init_uniform(wmap: WorldMap, cfg: PfConfig, rng: np.random.Generator) -> ParticleSet:
    """Particles spread uniformly over free space, equal weights."""
    poses = np.empty((cfg.n_particles, 2))
    for i in range(cfg.n_particles):
        poses[i] = sample_free_pose(wmap, rng).to_array()
    return ParticleSet(poses, np.full(cfg.n_particles, 1.0 / cfg.n_particles))


def _project_free(wmap: WorldMap, p: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Push a jittered point back into free space; give up to the fallback.

    Clamps into the clearance-shrunk bounding box, then repeatedly pushes away
    from the nearest offending segment. The fallback (the pre-jitter position,
    valid by construction) covers pathological corners.
    """
    xmin, ymin, xmax, ymax = wmap.bounds
    c = wmap.clearance
    q = np.clip(p, [xmin + c, ymin + c], [xmax - c, ymax - c])
    for _ in range(8):
        d = point_segment_distances(wmap, q[None, :])[0]
        worst = int(np.argmin(d))
        if d[worst] >= c:
            return q
        seg = wmap.segments[worst]
        a, b = seg[0:2], seg[2:4]
        s = b - a
        t = float(np.clip(((q - a) @ s) / (s @ s), 0.0, 1.0))
        foot = a + t * s
        away = q - foot
        norm = float(np.hypot(away[0], away[1]))
        if norm < 1e-12:
            # Sitting exactly on the segment: push along its normal.
            away = np.array([-s[1], s[0]]) / float(np.hypot(s[0], s[1]))
            norm = 1.0
        q = foot + away / norm * (c + 1e-9)
        q = np.clip(q, [xmin + c, ymin + c], [xmax - c, ymax - c])
    return fallback.copy()


def predict(
    ps: ParticleSet, wmap: WorldMap, cfg: PfConfig, rng: np.random.Generator
) -> ParticleSet:
    """Random-walk motion model: per-axis Gaussian jitter, kept in free space."""
    jitter = rng.normal(0.0, cfg.diffusion_sigma, size=ps.poses.shape)
    moved = ps.poses + jitter
    xmin, ymin, xmax, ymax = wmap.bounds
    inside = (
        (moved[:, 0] >= xmin) & (moved[:, 0] <= xmax)
        & (moved[:, 1] >= ymin) & (moved[:, 1] <= ymax)
    )
    clear = point_segment_distances(wmap, moved).min(axis=1) >= wmap.clearance
    out = moved.copy()
    for i in np.flatnonzero(~(inside & clear)):
        out[i] = _project_free(wmap, moved[i], ps.poses[i])
    return ParticleSet(out, ps.weights.copy())


def expected_strided_scan(
    wmap: WorldMap, poses: np.ndarray, sensor: SensorConfig, stride: int
) -> np.ndarray:
    """Noise-free ranges on every stride-th beam for each pose; (n, ceil(B/k))."""
    angles = sensor.beam_angles()[::stride]
    return beam_ranges(wmap, poses, angles, sensor.max_range)


def update_weights(
    ps: ParticleSet,
    scan: np.ndarray,
    wmap: WorldMap,
    sensor: SensorConfig,
    cfg: PfConfig,
) -> ParticleSet:
    """Bayes reweighting under a per-beam Gaussian range likelihood.

    Accumulates in the log domain and subtracts the max before
    exponentiating. If every particle ends up with zero posterior mass
    (filter divergence), recovers by resetting to uniform weights.
    """
    scan = np.asarray(scan, dtype=float)
    if scan.shape != (sensor.beam_count,):
        raise ValueError(
            f"scan length {scan.shape} does not match sensor ({sensor.beam_count})"
        )
    expected = expected_strided_scan(wmap, ps.poses, sensor, cfg.beam_stride)
    resid = scan[:: cfg.beam_stride][None, :] - expected
    loglik = -np.sum(resid * resid, axis=1) / (2.0 * cfg.likelihood_sigma**2)
    with np.errstate(divide="ignore"):  # zero prior weights are legitimate
        logw = np.log(ps.weights) + loglik
    peak = logw.max()
    if not np.isfinite(peak):
        return ParticleSet(ps.poses.copy(), np.full(len(ps), 1.0 / len(ps)))
    w = np.exp(logw - peak)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        return ParticleSet(ps.poses.copy(), np.full(len(ps), 1.0 / len(ps)))
    return ParticleSet(ps.poses.copy(), w / total)


def ess(ps: ParticleSet) -> float:
    """Effective sample size, 1 / sum of squared weights."""
    return float(1.0 / np.sum(ps.weights * ps.weights))


def resample_systematic(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Low-variance resampling from one uniform draw; output weights uniform.

    Sample positions (u0 + i)/n sweep the CDF with a single random phase, so
    particle i is copied either floor(n w_i) or ceil(n w_i) times.
    """
    n = len(ps)
    u0 = float(rng.uniform(0.0, 1.0))
    if u0 <= 0.0:  # keep positions strictly inside the CDF steps
        u0 = 0.5
    positions = (u0 + np.arange(n)) / n
    cdf = np.cumsum(ps.weights)
    cdf[-1] = max(cdf[-1], 1.0)  # guard against rounding shortfall at the top
    idx = np.searchsorted(cdf, positions, side="left")
    return ParticleSet(ps.poses[idx].copy(), np.full(n, 1.0 / n))


def estimate(ps: ParticleSet) -> Pose2:
    """Weighted mean position."""
    mean = ps.weights @ ps.poses
    return Pose2(float(mean[0]), float(mean[1]))


def pf_step(
    ps: ParticleSet,
    scan: np.ndarray,
    wmap: WorldMap,
    sensor: SensorConfig,
    cfg: PfConfig,
    rng: np.random.Generator,
) -> ParticleSet:
    """One filter cycle: predict, weight, and resample when ESS collapses."""
    ps = predict(ps, wmap, cfg, rng)
    ps = update_weights(ps, scan, wmap, sensor, cfg)
    if ess(ps) < cfg.ess_threshold * len(ps):
        ps = resample_systematic(ps, rng)
    return ps
