from .mmd import MmdReport, agent_attribute_samples, median_bandwidth, mmd, mmd_report
from .collision import agents_collide, collision_rate, obb_corners, rects_collide
from .trajectory import TrajectoryReport, l2_trajectory_error
from .bench import BenchReport, BenchRow, bench_per_token, random_token_frame
from .map_acc import MapAccuracyReport, map_token_accuracy

__all__ = [
    "MmdReport", "agent_attribute_samples", "median_bandwidth", "mmd",
    "mmd_report", "agents_collide", "collision_rate", "obb_corners",
    "rects_collide", "TrajectoryReport", "l2_trajectory_error", "BenchReport",
    "BenchRow", "bench_per_token", "random_token_frame", "MapAccuracyReport",
    "map_token_accuracy",
]
