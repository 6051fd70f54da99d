"""Leaf segmentation for plant canopy point clouds."""
from .cloud import PointCloud, SpatialIndex, build_index, local_pca, radius_count, average_spacing
from .errors import LeafSepError

__version__ = "0.1.0"
