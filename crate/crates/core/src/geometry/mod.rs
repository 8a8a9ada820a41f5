//! Meshes, hierarchy export and evaluation metrics.

pub mod mc;
pub mod metrics;
pub mod snapshot;

pub use mc::{marching_cubes, Grid, Mesh};
pub use metrics::{
    associate_labels, chamfer, segment_points, segmentation_iou, volumetric_iou, LabelMap,
    SegmentationIou,
};
pub use snapshot::{export_hierarchy, ExportReport, HierarchySnapshot, SnapshotLevel};
