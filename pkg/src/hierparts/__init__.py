"""Hierarchical part labels for voxelized scenes.

Part taxonomies, scan-to-CAD alignment, sparse voxel scenes with label
transfer, training-objective kernels, hierarchical inference, embedding
clustering and the evaluation protocol.
"""
from .align import AffineTransform, RigidRegistration, Transform9, best_alignment, icp_point_to_point
from .hier_infer import HierarchicalLabeler, bottom_up_project, flat_predict, top_down_predict
from .instances import Instance, InstanceSet, MeanShiftClustering, extract_instances, mean_shift
from .losses import discriminative_loss, instance_total_loss, separation_loss, weighted_cross_entropy
from .metrics import hierarchical_summary, instance_metrics, semantic_metrics
from .taxonomy import LevelProjector, PartTaxonomy, level_classes, project_leaf_to_level
from .voxelgrid import LabeledMesh, VoxelScene, transfer_labels, voxelize_mesh

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "HierarchicalLabeler", "Instance", "InstanceSet", "LabeledMesh",
    "LevelProjector", "MeanShiftClustering", "PartTaxonomy", "RigidRegistration", "Transform9",
    "VoxelScene", "best_alignment", "bottom_up_project", "discriminative_loss", "extract_instances",
    "flat_predict", "hierarchical_summary", "icp_point_to_point", "instance_metrics",
    "instance_total_loss", "level_classes", "mean_shift", "project_leaf_to_level",
    "semantic_metrics", "separation_loss", "top_down_predict", "transfer_labels", "voxelize_mesh",
    "weighted_cross_entropy",
]
