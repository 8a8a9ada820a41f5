//! Training objective: per-level reconstruction, containment, the convex
//! regularizers (decomposition, guidance, locality) and tree balance.
//!
//! Every term is averaged over queries so the weights do not depend on the
//! query count, and summed over levels.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{HitError, Result};

/// Residual used by the reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReconMode {
    #[default]
    Squared,
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_contain: f64,
    /// Multiplies `decomp + guide + loc`.
    pub lambda_cvxnet: f64,
    pub lambda_balance: f64,
    pub tau_overlap: f64,
    pub recon_mode: ReconMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_contain: 0.01,
            lambda_cvxnet: 0.01,
            lambda_balance: 0.01,
            tau_overlap: 1.05,
            recon_mode: ReconMode::Squared,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_contain, self.lambda_cvxnet, self.lambda_balance];
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(HitError::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.tau_overlap >= 1.0) {
            return Err(HitError::Config("tau_overlap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scalar values of every term after a forward pass.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub recon_per_level: Vec<f64>,
    pub contain: f64,
    pub decomp: f64,
    pub guide: f64,
    pub loc: f64,
    pub balance: f64,
    /// Set when no interior query was available for the guidance term.
    pub guide_skipped: bool,
}

impl LossReport {
    /// Weighted sum recomputed from the individual terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.recon
            + w.lambda_contain * self.contain
            + w.lambda_cvxnet * (self.decomp + self.guide + self.loc)
            + w.lambda_balance * self.balance
    }

    /// Terms in a fixed order, for logging and NaN diagnostics.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("recon", self.recon),
            ("contain", self.contain),
            ("decomp", self.decomp),
            ("guide", self.guide),
            ("loc", self.loc),
            ("balance", self.balance),
            ("total", self.total),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k)
    }
}

fn abs(x: Var<'_>) -> Var<'_> {
    // exact |x| with subgradient 0 at the kink
    x.relu().add(x.neg().relu()).expect("same shape")
}

/// `sum_l mean_x r(O(x) - union_l(x))` with `r` squared or absolute.
/// Returns the total and each level's term.
pub fn recon_loss<'t>(
    gt: Var<'t>,
    level_unions: &[Var<'t>],
    mode: ReconMode,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    if level_unions.is_empty() {
        return Err(HitError::Config("reconstruction needs at least one level".into()));
    }
    let mut per_level = Vec::with_capacity(level_unions.len());
    for u in level_unions {
        if u.shape() != gt.shape() {
            return Err(HitError::dim(format!(
                "union {:?} vs ground truth {:?}",
                u.shape(),
                gt.shape()
            )));
        }
        let r = gt.sub(*u)?;
        let r = match mode {
            ReconMode::Squared => r.square(),
            ReconMode::Absolute => abs(r),
        };
        per_level.push(r.mean_all());
    }
    Ok((sum_vars(&per_level), per_level))
}

fn sum_vars<'t>(xs: &[Var<'t>]) -> Var<'t> {
    let mut acc = xs[0];
    for x in &xs[1..] {
        acc = acc.add(*x).expect("scalars");
    }
    acc
}

/// One child level's containment penalty: for each child, the mean over
/// queries of `(1 - parent(x)) * child_raw(x)`, summed over children.
/// `parent_contained_of_child` is `[N x Q]`, row `s` being the selected
/// parent's contained occupancy.
pub fn contain_loss<'t>(parent_contained_of_child: Var<'t>, child_raw: Var<'t>) -> Result<Var<'t>> {
    let miss = parent_contained_of_child.neg().shift(1.0);
    Ok(miss.mul(child_raw)?.reduce_mean(1)?.sum_all())
}

/// `mean_x relu(sum_p O_p(x) - tau)^2` over a level's `[N x Q]` contained
/// occupancy.
pub fn decomp_loss(contained: Var<'_>, tau: f64) -> Result<Var<'_>> {
    Ok(contained
        .reduce_sum(0)?
        .shift(-tau)
        .relu()
        .square()
        .mean_all())
}

/// Pairwise squared distances `[A x B]` between `[A x 3]` and `[B x 3]`.
fn sq_dists<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    let diff = a.reshape(&[na, 1, 3])?.sub(b.reshape(&[1, nb, 3])?)?;
    diff.square().reduce_sum(2)
}

/// Two-sided Chamfer between convex centers `[N x 3]` and interior samples
/// `[S x 3]`.
pub fn guide_loss<'t>(centers: Var<'t>, interior: Var<'t>) -> Result<Var<'t>> {
    if centers.shape()[0] == 0 || interior.shape()[0] == 0 {
        return Err(HitError::dim("guide loss needs nonempty point sets"));
    }
    let d = sq_dists(centers, interior)?;
    d.reduce_min(1)?.mean_all().add(d.reduce_min(0)?.mean_all())
}

/// `sum_s mean_h (o_s^h)^2` over a level's `[N x H]` offsets.
pub fn loc_loss(offsets: Var<'_>) -> Result<Var<'_>> {
    Ok(offsets.square().reduce_mean(1)?.sum_all())
}

/// Squared deviation of the attention column sums from their mean.
pub fn balance_loss(attention: Var<'_>) -> Result<Var<'_>> {
    let psi = attention.reduce_sum(0)?;
    let mean = psi.reduce_mean(0)?;
    Ok(psi.sub(mean)?.square().sum_all())
}

/// Everything the objective reads from one level of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LevelLossInputs<'t> {
    /// `[N x Q]`.
    pub raw: Var<'t>,
    /// `[N x Q]`.
    pub contained: Var<'t>,
    /// `[N x Q]` selected parent's contained occupancy; `None` under the
    /// virtual root.
    pub parent_of_child: Option<Var<'t>>,
    /// `[Q]`.
    pub union: Var<'t>,
    /// `[N x 3]`.
    pub centers: Var<'t>,
    /// `[N x H]`.
    pub offsets: Var<'t>,
    /// Attention against a parent level; `None` for the first level, whose
    /// columns are grid cells.
    pub attention: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct LossVars<'t> {
    pub total: Var<'t>,
    pub report: LossReport,
}

pub fn total_loss<'t>(
    tape: &'t Tape,
    gt: Var<'t>,
    interior: Option<Var<'t>>,
    levels: &[LevelLossInputs<'t>],
    w: &LossWeights,
) -> Result<LossVars<'t>> {
    w.validate()?;
    let unions: Vec<Var<'t>> = levels.iter().map(|l| l.union).collect();
    let (recon, per_level) = recon_loss(gt, &unions, w.recon_mode)?;
    let zero = tape.scalar(0.0);
    let mut contain = zero;
    let mut decomp = zero;
    let mut guide = zero;
    let mut loc = zero;
    let mut balance = zero;
    let interior = interior.filter(|p| p.shape()[0] > 0);
    for l in levels {
        if let Some(p) = l.parent_of_child {
            contain = contain.add(contain_loss(p, l.raw)?)?;
        }
        decomp = decomp.add(decomp_loss(l.contained, w.tau_overlap)?)?;
        if let Some(pts) = interior {
            guide = guide.add(guide_loss(l.centers, pts)?)?;
        }
        loc = loc.add(loc_loss(l.offsets)?)?;
        if let Some(a) = l.attention {
            balance = balance.add(balance_loss(a)?)?;
        }
    }
    let cvx = decomp.add(guide)?.add(loc)?;
    let total = recon
        .add(contain.scale(w.lambda_contain))?
        .add(cvx.scale(w.lambda_cvxnet))?
        .add(balance.scale(w.lambda_balance))?;
    let report = LossReport {
        total: total.item(),
        recon: recon.item(),
        recon_per_level: per_level.iter().map(|v| v.item()).collect(),
        contain: contain.item(),
        decomp: decomp.item(),
        guide: guide.item(),
        loc: loc.item(),
        balance: balance.item(),
        guide_skipped: interior.is_none(),
    };
    Ok(LossVars { total, report })
}

/// Plain-value helper: Chamfer between two small point sets, used by tests
/// and metrics that do not need a tape.
pub fn guide_value(centers: &[[f64; 3]], interior: &[[f64; 3]]) -> Result<f64> {
    let tape = Tape::new();
    let flat = |p: &[[f64; 3]]| Tensor::new(&[p.len(), 3], p.iter().flatten().copied().collect());
    let c = tape.constant(flat(centers)?);
    let i = tape.constant(flat(interior)?);
    Ok(guide_loss(c, i)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<'a>(tape: &'a Tape, shape: &[usize], data: Vec<f64>) -> Var<'a> {
        tape.constant(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn recon_closed_forms() {
        let tape = Tape::new();
        let gt = t(&tape, &[4], vec![1.0, 1.0, 0.0, 0.0]);
        let zero = t(&tape, &[4], vec![0.0; 4]);
        let (r, per) = recon_loss(gt, &[zero, zero], ReconMode::Squared).unwrap();
        assert_eq!(per[0].item(), 0.5);
        assert_eq!(r.item(), 1.0);
        let (r, _) = recon_loss(gt, &[gt], ReconMode::Absolute).unwrap();
        assert_eq!(r.item(), 0.0);
    }

    #[test]
    fn contain_half_bleed() {
        let tape = Tape::new();
        let parent = t(&tape, &[1, 4], vec![1.0, 1.0, 0.0, 0.0]);
        let child = t(&tape, &[1, 4], vec![1.0; 4]);
        assert_eq!(contain_loss(parent, child).unwrap().item(), 0.5);
        let full = t(&tape, &[1, 4], vec![1.0; 4]);
        assert_eq!(contain_loss(full, child).unwrap().item(), 0.0);
    }

    #[test]
    fn decomp_double_cover() {
        let tape = Tape::new();
        let c = t(&tape, &[2, 1], vec![1.0, 1.0]);
        assert!((decomp_loss(c, 1.05).unwrap().item() - 0.9025).abs() < 1e-12);
        let disjoint = t(&tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(decomp_loss(disjoint, 1.05).unwrap().item(), 0.0);
    }

    #[test]
    fn loc_single_offset() {
        let tape = Tape::new();
        let mut o = vec![0.0; 32];
        o[5] = 0.3;
        let v = loc_loss(t(&tape, &[1, 32], o)).unwrap().item();
        assert!((v - 0.09 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn balance_concentrated() {
        let tape = Tape::new();
        let a = t(&tape, &[4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(balance_loss(a).unwrap().item(), 8.0);
        let u = t(&tape, &[4, 2], vec![0.5; 8]);
        assert_eq!(balance_loss(u).unwrap().item(), 0.0);
    }

    #[test]
    fn guide_singletons() {
        let d = 0.37;
        let v = guide_value(&[[d, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]).unwrap();
        assert!((v - 2.0 * d * d).abs() < 1e-12);
    }
}
