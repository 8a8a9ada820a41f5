//! Point cloud to level-zero feature grid: a per-point MLP followed by
//! average pooling into a voxel grid.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{HitError, Result};
use crate::params::BoundParams;

/// Half-extent of the normalized cube.
pub const HALF_EXTENT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Ground-truth part label per point; evaluation only.
    pub labels: Option<Vec<i64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<[f64; 3]>, labels: Vec<i64>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(HitError::dim(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(PointCloud {
            points,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the unit-cube invariant.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(HitError::InputDomain("empty point cloud".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite() || c.abs() > HALF_EXTENT) {
                return Err(HitError::InputDomain(format!(
                    "point {} = {:?} lies outside [-0.5, 0.5]^3",
                    i, p
                )));
            }
        }
        Ok(())
    }

    /// Centers at the bounding-box center and divides by the largest extent.
    pub fn normalized(&self) -> Result<PointCloud> {
        if self.points.is_empty() {
            return Err(HitError::InputDomain("empty point cloud".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                if !p[a].is_finite() {
                    return Err(HitError::InputDomain("non-finite coordinate".into()));
                }
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let inv = if extent > 0.0 { 1.0 / extent } else { 1.0 };
        let points = self
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|a| ((p[a] - center[a]) * inv).clamp(-HALF_EXTENT, HALF_EXTENT)))
            .collect();
        Ok(PointCloud {
            points,
            labels: self.labels.clone(),
        })
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.points.len(), 3],
            self.points.iter().flatten().copied().collect(),
        )
        .expect("M x 3")
    }

    /// Reads whitespace-separated `x y z [label]` lines. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HitError::io(path, e))?;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 && fields.len() != 4 {
                return Err(HitError::format(
                    path,
                    format!("line {}: expected 3 or 4 columns", lineno + 1),
                ));
            }
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = fields[a].parse().map_err(|_| {
                    HitError::format(path, format!("line {}: bad coordinate", lineno + 1))
                })?;
            }
            points.push(p);
            if fields.len() == 4 {
                labels.push(fields[3].parse().map_err(|_| {
                    HitError::format(path, format!("line {}: bad label", lineno + 1))
                })?);
            }
        }
        let labels = match labels.len() {
            0 => None,
            n if n == points.len() => Some(labels),
            _ => {
                return Err(HitError::format(
                    path,
                    "labels present on some lines but not others",
                ))
            }
        };
        Ok(PointCloud { points, labels })
    }

    pub fn write_xyz(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.points.len() * 40);
        for (i, p) in self.points.iter().enumerate() {
            match &self.labels {
                Some(l) => out.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], l[i])),
                None => out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2])),
            }
        }
        let mut f = fs::File::create(path).map_err(|e| HitError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| HitError::io(path, e))
    }
}

/// Uniform subsample: without replacement when `n <= M`, with replacement
/// otherwise. Reproducible under `seed`.
pub fn subsample(pc: &PointCloud, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = pc.points.len();
    let idx: Vec<usize> = if n <= m {
        sample(&mut rng, m, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..m)).collect()
    };
    PointCloud {
        points: idx.iter().map(|&i| pc.points[i]).collect(),
        labels: pc.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub latent_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(HitError::Config("encoder resolution must be >= 2".into()));
        }
        if self.latent_dim < 1 {
            return Err(HitError::Config("latent dimension must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.resolution.pow(3)
    }
}

/// Flattened `R^3 x D` grid of pooled point features, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub features: Tensor,
    pub resolution: usize,
    pub latent_dim: usize,
}

/// Cell index along one axis: `floor((x + 0.5) R)` clamped to `[0, R-1]`.
pub fn axis_cell(x: f64, resolution: usize) -> usize {
    let i = ((x + HALF_EXTENT) * resolution as f64).floor();
    (i.max(0.0) as usize).min(resolution - 1)
}

/// Flat voxel index with x varying fastest, then y, then z.
pub fn voxel_index(p: &[f64; 3], resolution: usize) -> usize {
    let [ix, iy, iz] = p.map(|c| axis_cell(c, resolution));
    ix + resolution * (iy + resolution * iz)
}

/// Points grouped per voxel, each group sorted by coordinates so the pooled
/// sum does not depend on input order.
pub fn voxel_members(pc: &PointCloud, resolution: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); resolution.pow(3)];
    for (i, p) in pc.points.iter().enumerate() {
        members[voxel_index(p, resolution)].push(i);
    }
    let cmp = |a: &usize, b: &usize| -> Ordering {
        let (pa, pb) = (&pc.points[*a], &pc.points[*b]);
        pa[0]
            .total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
    };
    for m in &mut members {
        m.sort_by(cmp);
    }
    members
}

/// Records the encoder on `tape`; returns the `[R^3 x D]` feature matrix.
pub fn encode_on<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t, '_>,
    pc: &PointCloud,
    cfg: &EncoderConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    pc.validate()?;
    let x = tape.constant(pc.as_tensor());
    let h = x
        .matmul(params.get("encoder.w1")?)?
        .add(params.get("encoder.b1")?)?
        .relu();
    let f = h
        .matmul(params.get("encoder.w2")?)?
        .add(params.get("encoder.b2")?)?;
    if f.shape()[1] != cfg.latent_dim {
        return Err(HitError::dim(format!(
            "encoder emits {} features, config expects {}",
            f.shape()[1],
            cfg.latent_dim
        )));
    }
    f.pool_mean(&voxel_members(pc, cfg.resolution))
}

/// Evaluates the encoder outside of training.
pub fn encode(
    params: &crate::params::ParamStore,
    pc: &PointCloud,
    cfg: &EncoderConfig,
) -> Result<FeatureGrid> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let features = encode_on(&tape, &bound, pc, cfg)?.value().clone();
    Ok(FeatureGrid {
        features,
        resolution: cfg.resolution,
        latent_dim: cfg.latent_dim,
    })
}
