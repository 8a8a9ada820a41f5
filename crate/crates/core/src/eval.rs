//! Evaluation of a trained model against analytic shapes.

use rand::Rng;

use crate::encoder::PointCloud;
use crate::error::Result;
use crate::geometry::metrics::{voxel_iou, voxelize};
use crate::geometry::{
    associate_labels, chamfer, marching_cubes, segment_points, segmentation_iou, Grid,
    HierarchySnapshot, LabelMap,
};
use crate::model::{infer, ModelConfig};
use crate::params::ParamStore;
use crate::seed::rng_for;
use crate::shapes::SyntheticShape;

pub fn snapshot(params: &ParamStore, cfg: &ModelConfig, cloud: &PointCloud) -> Result<HierarchySnapshot> {
    Ok(HierarchySnapshot::from_inference(&infer(params, cfg, cloud)?))
}

/// Volumetric IoU of each level's union against the analytic occupancy.
pub fn level_volumetric_iou(snap: &HierarchySnapshot, shape: &SyntheticShape, res: usize) -> Vec<f64> {
    let gt = voxelize(|x| shape.occupancy(x), res);
    (1..=snap.depth())
        .map(|l| voxel_iou(&voxelize(|x| snap.union(l, x), res), &gt))
        .collect()
}

/// `n` points drawn uniformly from the shape's interior.
pub fn interior_points(shape: &SyntheticShape, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_for(seed, &[0x1A7]);
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n && tries < 10_000 * n.max(1) {
        tries += 1;
        let p = [0, 1, 2].map(|_| rng.random::<f64>() - 0.5);
        if shape.occupancy(&p) > 0.5 {
            out.push(p);
        }
    }
    out
}

/// Number of leaf parts that win the argmax at one or more interior points
/// they actually cover (contained occupancy above 0.5).
pub fn active_leaves(snap: &HierarchySnapshot, interior: &[[f64; 3]]) -> Result<usize> {
    if interior.is_empty() {
        return Ok(0);
    }
    let occ = snap.level_contained(snap.depth(), interior);
    let seg = segment_points(&occ)?;
    let mut used = vec![false; occ.len()];
    for (x, s) in seg.into_iter().enumerate() {
        if occ[s][x] > 0.5 {
            used[s] = true;
        }
    }
    Ok(used.iter().filter(|u| **u).count())
}

/// Segments `cloud` at `level` and maps codes through `map`.
pub fn predict_labels(
    snap: &HierarchySnapshot,
    level: usize,
    cloud: &[[f64; 3]],
    map: &LabelMap,
) -> Result<Vec<Option<i64>>> {
    let seg = segment_points(&snap.level_contained(level, cloud))?;
    Ok(map.apply(&seg))
}

/// Label map built from one labelled reference cloud.
pub fn reference_label_map(snap: &HierarchySnapshot, level: usize, cloud: &PointCloud) -> Result<LabelMap> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| crate::HitError::Config("reference cloud has no labels".into()))?;
    let occ = snap.level_contained(level, &cloud.points);
    let seg = segment_points(&occ)?;
    associate_labels(labels, &seg, occ.len())
}

pub fn segmentation_mean_iou(
    snap: &HierarchySnapshot,
    level: usize,
    cloud: &PointCloud,
    map: &LabelMap,
) -> Result<f64> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| crate::HitError::Config("evaluation cloud has no labels".into()))?;
    let pred = predict_labels(snap, level, &cloud.points, map)?;
    Ok(segmentation_iou(&pred, labels)?.mean)
}

/// Chamfer between mesh vertices of a level's union and surface samples.
pub fn level_chamfer(snap: &HierarchySnapshot, level: usize, surface: &[[f64; 3]], res: usize) -> Result<f64> {
    let mesh = marching_cubes(|x| snap.union(level, x), Grid::unit(res), 0.5)?;
    if mesh.vertices.is_empty() {
        return Ok(f64::INFINITY);
    }
    chamfer(&mesh.vertices, surface)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::{ConvexParams, DEFAULT_SIGMA};
    use crate::geometry::SnapshotLevel;
    use crate::shapes::Primitive;

    fn boxes(centers: &[[f64; 3]]) -> HierarchySnapshot {
        HierarchySnapshot {
            levels: vec![SnapshotLevel {
                convexes: centers.iter().map(|c| ConvexParams::axis_box(*c, [0.1; 3], 200.0)).collect(),
                parents: vec![None; centers.len()],
            }],
            sigma: DEFAULT_SIGMA,
        }
    }

    #[test]
    fn only_covering_leaves_count_as_active() {
        let snap = boxes(&[[-0.2, 0.0, 0.0], [0.2, 0.0, 0.0], [0.0, 0.3, 0.0]]);
        let pts = [[-0.2, 0.0, 0.0], [0.21, 0.01, 0.0], [0.0, -0.4, 0.0]];
        assert_eq!(active_leaves(&snap, &pts).unwrap(), 2);
        assert_eq!(active_leaves(&snap, &pts[2..]).unwrap(), 0);
        assert_eq!(active_leaves(&snap, &[]).unwrap(), 0);
    }

    #[test]
    fn matching_box_has_full_iou() {
        let shape = SyntheticShape {
            family: "box".into(),
            parts: vec![(Primitive::Box { center: [0.0; 3], half: [0.25; 3] }, 0)],
        };
        let snap = HierarchySnapshot {
            levels: vec![SnapshotLevel {
                convexes: vec![ConvexParams::axis_box([0.0; 3], [0.25; 3], 200.0)],
                parents: vec![None],
            }],
            sigma: DEFAULT_SIGMA,
        };
        assert_eq!(level_volumetric_iou(&snap, &shape, 16), vec![1.0]);
        let inside = interior_points(&shape, 50, 3);
        assert_eq!(inside.len(), 50);
        assert!(inside.iter().all(|p| p.iter().all(|c| c.abs() <= 0.25)));
    }
}
