from .network import RoadNetwork, build_world, classify_points, render_map, wrap_angle
from .render import render_image, render_view
from .simulate import FRAME_DT, make_dataset, simulate_sequence

__all__ = ["RoadNetwork", "build_world", "classify_points", "render_map",
           "wrap_angle", "render_image", "render_view", "FRAME_DT",
           "make_dataset", "simulate_sequence"]
