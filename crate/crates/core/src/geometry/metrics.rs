//! Segmentation and reconstruction metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{HitError, Result};

/// Per-point argmax over leaf occupancies `occ[part][point]`; ties go to
/// the lowest part index.
pub fn segment_points(occ: &[Vec<f64>]) -> Result<Vec<usize>> {
    let first = occ
        .first()
        .ok_or_else(|| HitError::Config("segmentation needs at least one part".into()))?;
    let q = first.len();
    if occ.iter().any(|o| o.len() != q) {
        return Err(HitError::dim("leaf occupancies differ in length"));
    }
    Ok((0..q)
        .map(|x| {
            let mut best = 0;
            for p in 1..occ.len() {
                if occ[p][x] > occ[best][x] {
                    best = p;
                }
            }
            best
        })
        .collect())
}

/// Code index to ground-truth label; `None` for codes that received no
/// points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Vec<Option<i64>>,
}

impl LabelMap {
    pub fn apply(&self, seg: &[usize]) -> Vec<Option<i64>> {
        seg.iter()
            .map(|&c| self.labels.get(c).copied().flatten())
            .collect()
    }
}

/// Majority ground-truth label per code on one reference instance; count
/// ties go to the lowest label.
pub fn associate_labels(gt: &[i64], seg: &[usize], codes: usize) -> Result<LabelMap> {
    if gt.is_empty() {
        return Err(HitError::Config("reference instance has no labelled points".into()));
    }
    if gt.len() != seg.len() {
        return Err(HitError::dim(format!(
            "{} labels but {} segmented points",
            gt.len(),
            seg.len()
        )));
    }
    let mut counts: Vec<BTreeMap<i64, usize>> = vec![BTreeMap::new(); codes];
    for (&l, &c) in gt.iter().zip(seg) {
        if c >= codes {
            return Err(HitError::dim(format!("code {c} out of range for {codes} codes")));
        }
        *counts[c].entry(l).or_insert(0) += 1;
    }
    let labels = counts
        .into_iter()
        .map(|m| {
            // BTreeMap iterates labels in increasing order, so `>` keeps the lowest on ties
            let mut best: Option<(i64, usize)> = None;
            for (l, n) in m {
                if best.is_none_or(|(_, bn)| n > bn) {
                    best = Some((l, n));
                }
            }
            best.map(|(l, _)| l)
        })
        .collect();
    Ok(LabelMap { labels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationIou {
    /// `(label, IoU)` for every label present in the ground truth.
    pub per_label: Vec<(i64, f64)>,
    pub mean: f64,
}

pub fn segmentation_iou(pred: &[Option<i64>], gt: &[i64]) -> Result<SegmentationIou> {
    if pred.len() != gt.len() {
        return Err(HitError::dim(format!(
            "{} predictions for {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    let mut labels: Vec<i64> = gt.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return Err(HitError::Config("no ground-truth points".into()));
    }
    let per_label: Vec<(i64, f64)> = labels
        .iter()
        .map(|&l| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (p, g) in pred.iter().zip(gt) {
                let a = *p == Some(l);
                let b = *g == l;
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            (l, inter as f64 / union as f64)
        })
        .collect();
    let mean = per_label.iter().map(|(_, v)| v).sum::<f64>() / per_label.len() as f64;
    Ok(SegmentationIou { per_label, mean })
}

/// Cell-center sample positions of a `res^3` voxelization of the unit cube.
pub fn voxel_centers(res: usize) -> impl Iterator<Item = [f64; 3]> {
    let c = move |i: usize| -0.5 + (i as f64 + 0.5) / res as f64;
    (0..res * res * res).map(move |n| [c(n % res), c(n / res % res), c(n / (res * res))])
}

/// Occupancy above 0.5 at every voxel center, x fastest.
pub fn voxelize<F: Fn(&[f64; 3]) -> f64 + Sync>(field: F, res: usize) -> Vec<bool> {
    let c = |i: usize| -0.5 + (i as f64 + 0.5) / res as f64;
    let mut out = vec![false; res * res * res];
    out.par_chunks_mut(res * res).enumerate().for_each(|(k, slab)| {
        for j in 0..res {
            for i in 0..res {
                slab[i + res * j] = field(&[c(i), c(j), c(k)]) > 0.5;
            }
        }
    });
    out
}

/// IoU of two voxel sets; two empty sets count as identical.
pub fn voxel_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn volumetric_iou<A, B>(a: A, b: B, res: usize) -> Result<f64>
where
    A: Fn(&[f64; 3]) -> f64 + Sync,
    B: Fn(&[f64; 3]) -> f64 + Sync,
{
    if res < 8 {
        return Err(HitError::Config("volumetric IoU needs res >= 8".into()));
    }
    Ok(voxel_iou(&voxelize(a, res), &voxelize(b, res)))
}

fn directed(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let total: f64 = a
        .par_iter()
        .map(|p| {
            b.iter()
                .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / a.len() as f64
}

/// Sum of both directed mean nearest-neighbour squared distances.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(HitError::Config("chamfer needs two nonempty point sets".into()));
    }
    Ok(directed(a, b) + directed(b, a))
}
