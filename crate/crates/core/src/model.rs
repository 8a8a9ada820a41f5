//! Model configuration, parameter initialization and the full forward pass
//! from a point cloud to per-level contained occupancies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::convex::{
    contained_occupancy, features_to_convex, level_union, raw_occupancy, raw_width,
    root_contained, ConvexHead, ConvexParams, ConvexVars, RawLayout, DEFAULT_SIGMA,
};
use crate::decoder::{decode_hierarchy_on, param_name, DecoderConfig, LevelState, LevelVars};
use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{encode_on, EncoderConfig, PointCloud};
use crate::error::{HitError, Result};
use crate::params::{BoundParams, ParamStore};

/// Initialization knobs: convex head output bias and gains, attention gain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    /// Initial half-space offset (negative: origin inside).
    pub offset: f64,
    /// Initial blend sharpness.
    pub delta: f64,
    /// Initial scale per axis at level 1; deeper levels shrink it by
    /// `(N_1 / N_l)^shrink`.
    pub scale: f64,
    pub shrink: f64,
    /// Std of the output weights, relative to `1/sqrt(D)`.
    pub gain: f64,
    /// Same, for the translation columns.
    pub translation_gain: f64,
    /// Std of `W_Q` and `W_K`, relative to `1/sqrt(D)`.
    pub attention_gain: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            offset: -0.3,
            delta: 13.0,
            scale: 1.0,
            shrink: 0.15,
            gain: 0.03,
            translation_gain: 0.3,
            attention_gain: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub parts_per_level: Vec<usize>,
    pub planes: usize,
    pub sigma: f64,
    pub init: InitConfig,
}

impl ModelConfig {
    /// Published settings: R=32, D=64, four levels of [4, 8, 16, 32] parts,
    /// 32 planes per convex.
    pub fn published() -> Self {
        ModelConfig {
            resolution: 32,
            latent_dim: 64,
            parts_per_level: vec![4, 8, 16, 32],
            planes: 32,
            sigma: DEFAULT_SIGMA,
            init: InitConfig::default(),
        }
    }

    /// Laptop-scale settings.
    pub fn desk() -> Self {
        ModelConfig {
            resolution: 8,
            latent_dim: 32,
            parts_per_level: vec![2, 4, 8],
            planes: 8,
            sigma: DEFAULT_SIGMA,
            init: InitConfig::default(),
        }
    }

    pub fn levels(&self) -> usize {
        self.parts_per_level.len()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            resolution: self.resolution,
            latent_dim: self.latent_dim,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            parts_per_level: self.parts_per_level.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.decoder().validate()?;
        if self.planes < 4 {
            return Err(HitError::Config("a convex needs at least 4 planes".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(HitError::Config("sigma must be positive".into()));
        }
        let i = &self.init;
        if !(i.delta > 0.0 && i.scale > 0.0 && i.gain >= 0.0 && i.translation_gain >= 0.0 && i.attention_gain > 0.0) {
            return Err(HitError::Config("invalid convex initialization".into()));
        }
        Ok(())
    }

    /// Expected shape of every parameter, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.latent_dim;
        let k = raw_width(self.planes);
        let mut out = vec![
            ("encoder.w1".to_string(), vec![3, d]),
            ("encoder.b1".to_string(), vec![d]),
            ("encoder.w2".to_string(), vec![d, d]),
            ("encoder.b2".to_string(), vec![d]),
        ];
        for (i, &n) in self.parts_per_level.iter().enumerate() {
            let l = i + 1;
            out.push((param_name(l, "codebook"), vec![n, d]));
            for w in ["w_q", "w_k", "w_v"] {
                out.push((param_name(l, w), vec![d, d]));
            }
            out.push((param_name(l, "g_w1"), vec![d, d]));
            out.push((param_name(l, "g_b1"), vec![d]));
            out.push((param_name(l, "g_w2"), vec![d, k]));
            out.push((param_name(l, "g_b2"), vec![k]));
        }
        out
    }

    /// Checks that `params` has exactly the expected names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let expected = self.param_shapes();
        if expected.len() != params.len() {
            return Err(HitError::Checkpoint(format!(
                "{} tensors, model expects {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = params
                .get(&name)
                .map_err(|_| HitError::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(HitError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// `x` such that `softplus(x) = y`.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `n` roughly uniform unit directions.
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [r * th.cos(), y, r * th.sin()]
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Fresh parameters under `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.latent_dim;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let layout = RawLayout { planes: cfg.planes };
    let k = raw_width(cfg.planes);
    let mut store = ParamStore::new();
    for (name, shape) in cfg.param_shapes() {
        let what = name.rsplit('.').next().unwrap_or("");
        let t = match what {
            // coordinates in the unit cube have std 1/sqrt(12)
            "w1" if name.starts_with("encoder") => gaussian(&mut rng, &shape, he(3) * 12f64.sqrt()),
            "w2" if name.starts_with("encoder") => gaussian(&mut rng, &shape, he(d)),
            "b1" | "b2" | "g_b1" => Tensor::zeros(&shape),
            "codebook" => gaussian(&mut rng, &shape, 1.0),
            "w_q" | "w_k" => gaussian(&mut rng, &shape, inv_sqrt_d * cfg.init.attention_gain),
            "w_v" => gaussian(&mut rng, &shape, inv_sqrt_d),
            "g_w1" => gaussian(&mut rng, &shape, he(d)),
            "g_w2" => {
                let mut w = gaussian(&mut rng, &shape, inv_sqrt_d);
                let tr = layout.translation();
                for (i, v) in w.data_mut().iter_mut().enumerate() {
                    let col = i % k;
                    *v *= if tr.contains(&col) {
                        cfg.init.translation_gain
                    } else {
                        cfg.init.gain
                    };
                }
                w
            }
            "g_b2" => {
                let level: usize = name["level".len()..name.find('.').expect("dotted")]
                    .parse()
                    .expect("level index");
                // split the first level's volume among this level's parts
                let ratio = cfg.parts_per_level[0] as f64 / cfg.parts_per_level[level - 1] as f64;
                let shrink = ratio.powf(cfg.init.shrink);
                let mut b = vec![0.0; k];
                for (h, n) in fibonacci_sphere(cfg.planes).into_iter().enumerate() {
                    b[3 * h..3 * h + 3].copy_from_slice(&n);
                }
                for o in &mut b[layout.offsets()] {
                    *o = cfg.init.offset;
                }
                b[layout.delta()] = inv_softplus(cfg.init.delta);
                for s in &mut b[layout.scale()] {
                    *s = inv_softplus(cfg.init.scale * shrink);
                }
                Tensor::vector(b)
            }
            _ => unreachable!("unhandled parameter {name}"),
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// One decoded level with its geometry, recorded on a tape.
#[derive(Clone, Debug)]
pub struct LevelForward<'t> {
    pub decoded: LevelVars<'t>,
    pub convex: ConvexVars<'t>,
    /// `[N x Q]`.
    pub raw: Var<'t>,
    /// `[N x Q]`.
    pub contained: Var<'t>,
    /// `[N x Q]` selected parent's contained occupancy; `None` at level 1.
    pub parent_of_child: Option<Var<'t>>,
    /// `[Q]`.
    pub union: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Forward<'t> {
    pub grid: Var<'t>,
    pub levels: Vec<LevelForward<'t>>,
}

/// Encoder, decoder and convex fields for one shape at `queries` `[Q x 3]`.
pub fn forward_on<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t, '_>,
    cfg: &ModelConfig,
    pc: &PointCloud,
    queries: &Tensor,
) -> Result<Forward<'t>> {
    if queries.rank() != 2 || queries.shape()[1] != 3 || queries.shape()[0] == 0 {
        return Err(HitError::dim(format!(
            "queries must be a nonempty [Q x 3] matrix, got {:?}",
            queries.shape()
        )));
    }
    let grid = encode_on(tape, params, pc, &cfg.encoder())?;
    let decoded = decode_hierarchy_on(params, grid, &cfg.decoder())?;
    let x = tape.constant(queries.clone());
    let mut levels: Vec<LevelForward<'t>> = Vec::with_capacity(decoded.len());
    for (i, dec) in decoded.into_iter().enumerate() {
        let head = ConvexHead::bind(params, i + 1)?;
        let convex = features_to_convex(dec.features, &head, cfg.planes)?;
        let raw = raw_occupancy(&convex, x, cfg.sigma)?;
        let (contained, parent_of_child) = match levels.last() {
            None => (root_contained(tape, raw)?, None),
            Some(prev) => {
                let sel = dec.parent_onehot_st.matmul(prev.contained)?;
                (contained_occupancy(raw, prev.contained, dec.parent_onehot_st)?, Some(sel))
            }
        };
        let union = level_union(contained)?;
        levels.push(LevelForward {
            decoded: dec,
            convex,
            raw,
            contained,
            parent_of_child,
            union,
        });
    }
    Ok(Forward { grid, levels })
}

/// Plain-value result of running the model on one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub levels: Vec<LevelState>,
    pub convexes: Vec<Vec<ConvexParams>>,
    pub sigma: f64,
}

pub fn infer(params: &ParamStore, cfg: &ModelConfig, pc: &PointCloud) -> Result<Inference> {
    cfg.validate()?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let grid = encode_on(&tape, &bound, pc, &cfg.encoder())?;
    let decoded = decode_hierarchy_on(&bound, grid, &cfg.decoder())?;
    let mut convexes = Vec::with_capacity(decoded.len());
    for (i, dec) in decoded.iter().enumerate() {
        let head = ConvexHead::bind(&bound, i + 1)?;
        convexes.push(features_to_convex(dec.features, &head, cfg.planes)?.to_params());
    }
    Ok(Inference {
        levels: decoded.iter().map(LevelState::from).collect(),
        convexes,
        sigma: cfg.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            resolution: 2,
            latent_dim: 4,
            parts_per_level: vec![2, 3],
            planes: 6,
            sigma: 75.0,
            init: InitConfig::default(),
        }
    }

    #[test]
    fn init_matches_declared_shapes() {
        let cfg = tiny();
        let p = init_params(&cfg, 1).unwrap();
        cfg.check_params(&p).unwrap();
        assert_eq!(p, init_params(&cfg, 1).unwrap());
        assert_ne!(p, init_params(&cfg, 2).unwrap());
        let mut other = cfg.clone();
        other.parts_per_level = vec![2, 4];
        let err = other.check_params(&p).unwrap_err().to_string();
        assert!(err.contains("level2.codebook"), "{err}");
    }

    #[test]
    fn inv_softplus_roundtrip() {
        for y in [1e-3, 0.25, 4.0, 50.0] {
            assert!((crate::diffcore::softplus(inv_softplus(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny();
        let p = init_params(&cfg, 3).unwrap();
        let pc = PointCloud::new(vec![[0.1, 0.2, -0.3], [-0.4, 0.0, 0.4], [0.2, -0.2, 0.0]]);
        let q = Tensor::new(&[5, 3], (0..15).map(|i| (i as f64 * 0.07) - 0.5).collect()).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape);
        let f = forward_on(&tape, &b, &cfg, &pc, &q).unwrap();
        assert_eq!(f.levels.len(), 2);
        assert_eq!(f.levels[0].raw.shape(), vec![2, 5]);
        assert_eq!(f.levels[1].contained.shape(), vec![3, 5]);
        assert_eq!(f.levels[1].union.shape(), vec![5]);
        assert_eq!(*f.levels[0].raw.value(), *f.levels[0].contained.value());
        let inf = infer(&p, &cfg, &pc).unwrap();
        assert_eq!(inf.convexes[1].len(), 3);
    }
}
