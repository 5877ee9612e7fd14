"""Free-energy LiDAR localization and navigation with a particle-filter baseline."""

from fep_lidar.world import (
    MapFormatError,
    Pose2,
    SamplingExhaustedError,
    SensorConfig,
    WorldMap,
    apply_action,
    beam_ranges,
    default_map,
    load_map,
    ray_cast,
    sample_free_pose,
    simulate_scan,
)

__version__ = "0.1.0"

__all__ = [
    "MapFormatError",
    "Pose2",
    "SamplingExhaustedError",
    "SensorConfig",
    "WorldMap",
    "apply_action",
    "beam_ranges",
    "default_map",
    "load_map",
    "ray_cast",
    "sample_free_pose",
    "simulate_scan",
    "__version__",
]
