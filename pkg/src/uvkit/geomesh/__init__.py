"""Geometry and raster primitives shared by every pipeline stage."""

from .mask import (
    BinaryMask,
    Frame,
    LabeledComponents,
    connected_components,
    crop_to_frame,
    drop_small_components,
    mask_iou,
    morphological_open,
    read_grid,
    read_prob_grid,
    write_grid,
    write_prob_grid,
)
from .polygon import (
    RegionPolygon,
    distance_to_boundary,
    from_shapely,
    intersection_area,
    point_in_polygon,
    polygon_centroid,
    read_geojson,
    region_area,
    regions_to_feature_collection,
    to_shapely,
    union_area,
    write_geojson,
)
from .polylabel import pole_of_inaccessibility, signed_distance
from .rdp import farthest_pair, simplify_chain, simplify_ring
from .trace import rasterize, vectorize

__all__ = [
    "BinaryMask",
    "Frame",
    "LabeledComponents",
    "RegionPolygon",
    "connected_components",
    "crop_to_frame",
    "distance_to_boundary",
    "drop_small_components",
    "farthest_pair",
    "from_shapely",
    "intersection_area",
    "mask_iou",
    "morphological_open",
    "point_in_polygon",
    "pole_of_inaccessibility",
    "polygon_centroid",
    "rasterize",
    "read_geojson",
    "read_grid",
    "read_prob_grid",
    "region_area",
    "regions_to_feature_collection",
    "signed_distance",
    "simplify_chain",
    "simplify_ring",
    "to_shapely",
    "union_area",
    "vectorize",
    "write_geojson",
    "write_grid",
    "write_prob_grid",
]
