//! Part features grounded as smooth convexes under a rigid transform, and
//! their parent-modulated (contained) occupancy.
//!
//! For a query `x` a part evaluates
//!
//! ```text
//! x~  = R(E)^T ((x - t) / s)
//! Phi = logsumexp_h( delta * (n_h . x~ + o_h) )
//! O~  = sigmoid(-sigma * Phi)
//! ```
//!
//! with `R(E) = Rz(yaw) Ry(pitch) Rx(roll)`. A part's contained occupancy is
//! its raw occupancy times the contained occupancy of the parent selected by
//! the straight-through one-hot; level-1 parents are a virtual root that is
//! 1 everywhere.

use crate::diffcore::{rotation_zyx, sigmoid, softplus, Tape, Tensor, Var, NORMALIZE_EPS};
use crate::error::{HitError, Result};
use crate::params::BoundParams;

/// Sharpness used for every experiment.
pub const DEFAULT_SIGMA: f64 = 75.0;

/// Lower bound added after the positivity squash of scale and blend
/// sharpness.
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// Raw values emitted per part for `planes` half-spaces.
pub fn raw_width(planes: usize) -> usize {
    planes * 4 + 10
}

/// Offsets into one part's raw output vector.
#[derive(Clone, Copy, Debug)]
pub struct RawLayout {
    pub planes: usize,
}

impl RawLayout {
    pub fn normals(&self) -> std::ops::Range<usize> {
        0..3 * self.planes
    }
    pub fn offsets(&self) -> std::ops::Range<usize> {
        3 * self.planes..4 * self.planes
    }
    pub fn delta(&self) -> usize {
        4 * self.planes
    }
    pub fn euler(&self) -> std::ops::Range<usize> {
        4 * self.planes + 1..4 * self.planes + 4
    }
    pub fn translation(&self) -> std::ops::Range<usize> {
        4 * self.planes + 4..4 * self.planes + 7
    }
    pub fn scale(&self) -> std::ops::Range<usize> {
        4 * self.planes + 7..4 * self.planes + 10
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexParams {
    pub normals: Vec<[f64; 3]>,
    pub offsets: Vec<f64>,
    pub blend_sharpness: f64,
    /// `(roll, pitch, yaw)` in radians.
    pub euler: [f64; 3],
    pub translation: [f64; 3],
    pub scale: [f64; 3],
}

impl ConvexParams {
    pub fn planes(&self) -> usize {
        self.normals.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.normals.len() < 4 || self.offsets.len() != self.normals.len() {
            return Err(HitError::Config(format!(
                "convex needs >= 4 planes with one offset each, got {} normals / {} offsets",
                self.normals.len(),
                self.offsets.len()
            )));
        }
        if self.scale.iter().any(|&s| !(s > POSITIVE_FLOOR * 0.5)) || !(self.blend_sharpness > 0.0)
        {
            return Err(HitError::Config("scale and blend sharpness must be positive".into()));
        }
        Ok(())
    }

    /// Axis-aligned box of half-extent `half` centered at `center`, with six
    /// planes and identity rotation.
    pub fn axis_box(center: [f64; 3], half: [f64; 3], blend_sharpness: f64) -> Self {
        let mut normals = Vec::with_capacity(6);
        let mut offsets = Vec::with_capacity(6);
        for a in 0..3 {
            for sign in [1.0, -1.0] {
                let mut n = [0.0; 3];
                n[a] = sign;
                normals.push(n);
                offsets.push(-half[a]);
            }
        }
        ConvexParams {
            normals,
            offsets,
            blend_sharpness,
            euler: [0.0; 3],
            translation: center,
            scale: [1.0; 3],
        }
    }

    /// Decodes one raw `G_phi` output row.
    pub fn from_raw(raw: &[f64], planes: usize) -> Result<Self> {
        if raw.len() != raw_width(planes) {
            return Err(HitError::dim(format!(
                "raw convex row has {} values, expected {}",
                raw.len(),
                raw_width(planes)
            )));
        }
        let l = RawLayout { planes };
        let normals = raw[l.normals()]
            .chunks(3)
            .map(|n| {
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if norm < NORMALIZE_EPS {
                    [1.0, 0.0, 0.0]
                } else {
                    [n[0] / norm, n[1] / norm, n[2] / norm]
                }
            })
            .collect();
        let v3 = |r: std::ops::Range<usize>| [raw[r.start], raw[r.start + 1], raw[r.start + 2]];
        Ok(ConvexParams {
            normals,
            offsets: raw[l.offsets()].to_vec(),
            blend_sharpness: softplus(raw[l.delta()]) + POSITIVE_FLOOR,
            euler: v3(l.euler()),
            translation: v3(l.translation()),
            scale: v3(l.scale()).map(|s| softplus(s) + POSITIVE_FLOOR),
        })
    }

    /// Query transformed into the convex's local frame.
    pub fn local_point(&self, x: &[f64; 3]) -> [f64; 3] {
        let r = rotation_zyx(self.euler[0], self.euler[1], self.euler[2]);
        let l = [0, 1, 2].map(|a| (x[a] - self.translation[a]) / self.scale[a]);
        // R^T l
        [0, 1, 2].map(|j| (0..3).map(|i| r[i][j] * l[i]).sum())
    }

    /// Smooth max of the scaled plane responses.
    pub fn phi(&self, x: &[f64; 3]) -> f64 {
        let xt = self.local_point(x);
        let resp: Vec<f64> = self
            .normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, o)| self.blend_sharpness * (n[0] * xt[0] + n[1] * xt[1] + n[2] * xt[2] + o))
            .collect();
        let m = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + resp.iter().map(|r| (r - m).exp()).sum::<f64>().ln()
    }

    pub fn occupancy(&self, x: &[f64; 3], sigma: f64) -> f64 {
        sigmoid(-sigma * self.phi(x))
    }
}

/// Convex parameters of all parts of a level, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvexVars<'t> {
    /// `[N x H x 3]`, unit rows.
    pub normals: Var<'t>,
    /// `[N x H]`.
    pub offsets: Var<'t>,
    /// `[N]`.
    pub delta: Var<'t>,
    /// `[N x 3]`.
    pub euler: Var<'t>,
    /// `[N x 3]`.
    pub translation: Var<'t>,
    /// `[N x 3]`.
    pub scale: Var<'t>,
}

impl<'t> ConvexVars<'t> {
    pub fn parts(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn planes(&self) -> usize {
        self.offsets.shape()[1]
    }

    /// Copies the recorded values out as plain parameters.
    pub fn to_params(&self) -> Vec<ConvexParams> {
        let (n, h) = (self.parts(), self.planes());
        let normals = self.normals.value();
        let offsets = self.offsets.value();
        let delta = self.delta.value();
        let euler = self.euler.value();
        let t = self.translation.value();
        let s = self.scale.value();
        let v3 = |x: &Tensor, p: usize| [x.data()[p * 3], x.data()[p * 3 + 1], x.data()[p * 3 + 2]];
        (0..n)
            .map(|p| ConvexParams {
                normals: (0..h)
                    .map(|k| {
                        let b = (p * h + k) * 3;
                        [normals.data()[b], normals.data()[b + 1], normals.data()[b + 2]]
                    })
                    .collect(),
                offsets: offsets.data()[p * h..(p + 1) * h].to_vec(),
                blend_sharpness: delta.data()[p],
                euler: v3(&euler, p),
                translation: v3(&t, p),
                scale: v3(&s, p),
            })
            .collect()
    }
}

/// `G_phi` weights of one level.
#[derive(Clone, Copy, Debug)]
pub struct ConvexHead<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> ConvexHead<'t> {
    pub fn bind(params: &BoundParams<'t, '_>, level: usize) -> Result<Self> {
        let name = |w: &str| crate::decoder::param_name(level, w);
        Ok(ConvexHead {
            w1: params.get(&name("g_w1"))?,
            b1: params.get(&name("g_b1"))?,
            w2: params.get(&name("g_w2"))?,
            b2: params.get(&name("g_b2"))?,
        })
    }

    /// Raw `[N x (4H + 10)]` outputs for `[N x D]` features.
    pub fn raw(&self, features: Var<'t>) -> Result<Var<'t>> {
        features
            .matmul(self.w1)?
            .add(self.b1)?
            .relu()
            .matmul(self.w2)?
            .add(self.b2)
    }
}

/// Maps part features to convex parameters.
pub fn features_to_convex<'t>(
    features: Var<'t>,
    head: &ConvexHead<'t>,
    planes: usize,
) -> Result<ConvexVars<'t>> {
    let raw = head.raw(features)?;
    split_raw(raw, planes)
}

/// Splits raw `[N x (4H + 10)]` outputs into constrained convex parameters.
pub fn split_raw(raw: Var<'_>, planes: usize) -> Result<ConvexVars<'_>> {
    let shape = raw.shape();
    if shape.len() != 2 || shape[1] != raw_width(planes) {
        return Err(HitError::dim(format!(
            "raw convex output {:?} does not match {} planes",
            shape, planes
        )));
    }
    let n = shape[0];
    let l = RawLayout { planes };
    let normals = raw
        .slice(1, l.normals())?
        .reshape(&[n, planes, 3])?
        .normalize_last()?;
    let offsets = raw.slice(1, l.offsets())?;
    let delta = raw
        .slice(1, l.delta()..l.delta() + 1)?
        .reshape(&[n])?
        .softplus()
        .shift(POSITIVE_FLOOR);
    let euler = raw.slice(1, l.euler())?;
    let translation = raw.slice(1, l.translation())?;
    let scale = raw.slice(1, l.scale())?.softplus().shift(POSITIVE_FLOOR);
    Ok(ConvexVars {
        normals,
        offsets,
        delta,
        euler,
        translation,
        scale,
    })
}

/// Raw occupancy `[N x Q]` of every part at every query point `[Q x 3]`.
pub fn raw_occupancy<'t>(cv: &ConvexVars<'t>, points: Var<'t>, sigma: f64) -> Result<Var<'t>> {
    let (n, h) = (cv.parts(), cv.planes());
    let q = points.shape()[0];
    let x = points.reshape(&[1, q, 3])?;
    let t = cv.translation.reshape(&[n, 1, 3])?;
    let s = cv.scale.reshape(&[n, 1, 3])?;
    let local = x.sub(t)?.div(s)?;
    let rot = cv.euler.rotation_zyx()?;
    let xt = local.batch_matmul(rot)?;
    let planes = xt
        .batch_matmul(cv.normals.transpose()?)?
        .add(cv.offsets.reshape(&[n, 1, h])?)?;
    let scaled = planes.mul(cv.delta.reshape(&[n, 1, 1])?)?;
    Ok(scaled.logsumexp()?.scale(-sigma).sigmoid())
}

/// `[N x Q]` contained occupancy: the parent row picked by the one-hot
/// `[N x N_prev]`, times each child's raw occupancy.
pub fn contained_occupancy<'t>(
    child_raw: Var<'t>,
    parent_contained: Var<'t>,
    parent_onehot_st: Var<'t>,
) -> Result<Var<'t>> {
    parent_onehot_st.matmul(parent_contained)?.mul(child_raw)
}

/// Level-1 containment under the virtual root (occupancy 1 everywhere).
pub fn root_contained<'t>(tape: &'t Tape, child_raw: Var<'t>) -> Result<Var<'t>> {
    let shape = child_raw.shape();
    let root = tape.constant(Tensor::full(&[1, shape[1]], 1.0));
    let onehot = tape.constant(Tensor::full(&[shape[0], 1], 1.0));
    contained_occupancy(child_raw, root, onehot)
}

/// Pointwise max over the parts of a level.
pub fn level_union(contained: Var<'_>) -> Result<Var<'_>> {
    contained.reduce_max(0)
}
