//! Codebook cross-attention hierarchy decoder.
//!
//! Level `l` owns a learnable codebook of `N_l` codes. The codes query the
//! previous level's tokens (grid cells for level 1, part features above):
//!
//! ```text
//! Q = C W_Q    K = Z_prev W_K    V = Z_prev W_V
//! A = softmax_rows(Q K^T / sqrt(D))    Z = A V
//! ```
//!
//! so each level emits exactly `N_l` tokens regardless of its input count.
//! Row `s` of `A` is the soft parent assignment of subpart `s`; its argmax is
//! the hard parent, made differentiable with a straight-through one-hot.

use crate::diffcore::{argmax, Tape, Tensor, Var};
use crate::encoder::FeatureGrid;
use crate::error::{HitError, Result};
use crate::params::{BoundParams, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub parts_per_level: Vec<usize>,
    pub latent_dim: usize,
}

impl DecoderConfig {
    pub fn levels(&self) -> usize {
        self.parts_per_level.len()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.latent_dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts_per_level.is_empty() {
            return Err(HitError::Config("at least one level is required".into()));
        }
        if self.parts_per_level.contains(&0) {
            return Err(HitError::Config("parts per level must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(HitError::Config("latent dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Shape-independent part codes of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub level: usize,
    pub codes: Tensor,
}

impl Codebook {
    pub fn from_params(params: &ParamStore, level: usize) -> Result<Self> {
        Ok(Codebook {
            level,
            codes: params.get(&param_name(level, "codebook"))?.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn param_name(level: usize, what: &str) -> String {
    format!("level{level}.{what}")
}

/// One decoded level recorded on a tape.
#[derive(Clone, Debug)]
pub struct LevelVars<'t> {
    /// `[N_l x D]` part features.
    pub features: Var<'t>,
    /// `[N_l x N_prev]` row-stochastic attention.
    pub attention: Var<'t>,
    /// `[N_l x N_prev]` straight-through one-hot parent rows.
    pub parent_onehot_st: Var<'t>,
    /// Hard parent per subpart (argmax of each attention row).
    pub parent_index: Vec<usize>,
}

/// Plain-value copy of a decoded level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelState {
    pub features: Tensor,
    pub attention: Tensor,
    pub parent_index: Vec<usize>,
    pub parent_onehot_st: Tensor,
}

impl From<&LevelVars<'_>> for LevelState {
    fn from(v: &LevelVars<'_>) -> Self {
        LevelState {
            features: v.features.value().clone(),
            attention: v.attention.value().clone(),
            parent_index: v.parent_index.clone(),
            parent_onehot_st: v.parent_onehot_st.value().clone(),
        }
    }
}

/// Projection weights of one level.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
}

impl<'t> AttentionWeights<'t> {
    pub fn bind(params: &BoundParams<'t, '_>, level: usize) -> Result<Self> {
        Ok(AttentionWeights {
            w_q: params.get(&param_name(level, "w_q"))?,
            w_k: params.get(&param_name(level, "w_k"))?,
            w_v: params.get(&param_name(level, "w_v"))?,
        })
    }
}

/// Forward one-hot at the argmax, backward identity onto the soft row.
pub fn straight_through_parent(attention_row: Var<'_>) -> Result<Var<'_>> {
    attention_row.straight_through_onehot()
}

/// Cross-attention of `codes` into `prev`.
pub fn attend_level<'t>(
    prev: Var<'t>,
    codes: Var<'t>,
    weights: &AttentionWeights<'t>,
) -> Result<LevelVars<'t>> {
    let prev_shape = prev.shape();
    if prev_shape.len() != 2 || prev_shape[0] == 0 {
        return Err(HitError::dim(format!(
            "previous level must be a non-empty [N x D] matrix, got {:?}",
            prev_shape
        )));
    }
    let d = codes.shape()[1];
    let q = codes.matmul(weights.w_q)?;
    let k = prev.matmul(weights.w_k)?;
    let v = prev.matmul(weights.w_v)?;
    let logits = q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let attention = logits.softmax_rows()?;
    let features = attention.matmul(v)?;
    let parent_onehot_st = straight_through_parent(attention)?;
    let parent_index = {
        let a = attention.value();
        let n_prev = a.shape()[1];
        a.data().chunks(n_prev).map(argmax).collect()
    };
    Ok(LevelVars {
        features,
        attention,
        parent_onehot_st,
        parent_index,
    })
}

/// Applies every level in order: level 1 attends to the grid tokens, level
/// `l > 1` to the features of level `l - 1`.
pub fn decode_hierarchy_on<'t>(
    params: &BoundParams<'t, '_>,
    grid: Var<'t>,
    cfg: &DecoderConfig,
) -> Result<Vec<LevelVars<'t>>> {
    cfg.validate()?;
    let gd = grid.shape();
    if gd.len() != 2 || gd[1] != cfg.latent_dim {
        return Err(HitError::dim(format!(
            "grid features {:?} do not match latent dimension {}",
            gd, cfg.latent_dim
        )));
    }
    let mut states: Vec<LevelVars<'t>> = Vec::with_capacity(cfg.levels());
    let mut prev = grid;
    for level in 1..=cfg.levels() {
        let codes = params.get(&param_name(level, "codebook"))?;
        let expected = cfg.parts_per_level[level - 1];
        if codes.shape()[0] != expected {
            return Err(HitError::dim(format!(
                "level {} codebook has {} codes, config expects {}",
                level,
                codes.shape()[0],
                expected
            )));
        }
        let weights = AttentionWeights::bind(params, level)?;
        let state = attend_level(prev, codes, &weights)?;
        prev = state.features;
        states.push(state);
    }
    Ok(states)
}

pub fn decode_hierarchy(
    params: &ParamStore,
    grid: &FeatureGrid,
    cfg: &DecoderConfig,
) -> Result<Vec<LevelState>> {
    if grid.latent_dim != cfg.latent_dim {
        return Err(HitError::dim(format!(
            "grid latent dimension {} differs from decoder {}",
            grid.latent_dim, cfg.latent_dim
        )));
    }
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let g = tape.constant(grid.features.clone());
    Ok(decode_hierarchy_on(&bound, g, cfg)?
        .iter()
        .map(LevelState::from)
        .collect())
}

/// Parent link of one part. Level-1 parts hang off the virtual root.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeEdge {
    pub level: usize,
    pub child: usize,
    /// `None` for the virtual root.
    pub parent: Option<usize>,
}

pub fn extract_tree(states: &[LevelState]) -> Result<Vec<TreeEdge>> {
    if states.is_empty() {
        return Err(HitError::Config("cannot extract a tree from zero levels".into()));
    }
    let mut edges = Vec::new();
    for (i, state) in states.iter().enumerate() {
        let level = i + 1;
        for (child, &p) in state.parent_index.iter().enumerate() {
            edges.push(TreeEdge {
                level,
                child,
                parent: if level == 1 { None } else { Some(p) },
            });
        }
    }
    Ok(edges)
}
