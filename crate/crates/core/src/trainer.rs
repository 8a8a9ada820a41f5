//! Mini-batch training with Adam.
//!
//! Every random draw of step `s` comes from streams derived from
//! `(seed, s)`, so a run resumed from a checkpoint at step `s` continues
//! exactly like the uninterrupted run. Batch members are differentiated on
//! separate tapes in parallel and their gradients are summed in batch order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::diffcore::{Tape, Tensor};
use crate::encoder::PointCloud;
use crate::error::{HitError, Result};
use crate::model::{forward_on, init_params, Forward, ModelConfig};
use crate::objectives::{total_loss, LevelLossInputs, LossReport, LossWeights};
use crate::params::{Adam, ParamStore};
use crate::seed::{derive_seed, rng_for};
use crate::shapes::{generate_dataset, sample_queries, QueryBatch, SyntheticShape};

const STREAM_BATCH: u64 = 1;
const STREAM_QUERIES: u64 = 2;
const STREAM_GUIDE: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_DATA: u64 = 5;
const STREAM_CLOUD: u64 = 6;

/// A training shape with its fixed input point cloud.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub shape: SyntheticShape,
    pub cloud: PointCloud,
}

/// Builds the dataset described by `cfg`.
pub fn build_dataset(cfg: &TrainConfig) -> Result<Vec<TrainItem>> {
    let shapes = generate_dataset(
        cfg.num_shapes,
        &cfg.families,
        derive_seed(cfg.seed, &[STREAM_DATA]),
    )?;
    Ok(items_from_shapes(shapes, cfg.points_per_shape, cfg.seed))
}

pub fn items_from_shapes(shapes: Vec<SyntheticShape>, points: usize, seed: u64) -> Vec<TrainItem> {
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let cloud = shape.sample_surface(points, derive_seed(seed, &[STREAM_CLOUD, i as u64]));
            TrainItem { shape, cloud }
        })
        .collect()
}

/// Loss and gradients of one shape.
pub struct ShapeGrad {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
}

fn loss_inputs<'t>(f: &Forward<'t>) -> Vec<LevelLossInputs<'t>> {
    f.levels
        .iter()
        .enumerate()
        .map(|(i, l)| LevelLossInputs {
            raw: l.raw,
            contained: l.contained,
            parent_of_child: l.parent_of_child,
            union: l.union,
            centers: l.convex.translation,
            offsets: l.convex.offsets,
            attention: (i > 0).then_some(l.decoded.attention),
        })
        .collect()
}

fn guide_points(queries: &QueryBatch, cap: usize, seed: u64) -> Vec<[f64; 3]> {
    let interior = queries.interior();
    if interior.len() <= cap {
        return interior;
    }
    let mut rng = rng_for(seed, &[STREAM_GUIDE]);
    let mut idx = sample(&mut rng, interior.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| interior[i]).collect()
}

/// Forward, loss and backward for one shape.
pub fn shape_gradient(
    params: &ParamStore,
    model: &ModelConfig,
    weights: &LossWeights,
    cloud: &PointCloud,
    queries: &QueryBatch,
    guide: &[[f64; 3]],
) -> Result<ShapeGrad> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let f = forward_on(&tape, &bound, model, cloud, &queries.points_tensor())?;
    let gt = tape.constant(queries.gt_tensor());
    let interior = if guide.is_empty() {
        None
    } else {
        Some(tape.constant(Tensor::new(&[guide.len(), 3], guide.iter().flatten().copied().collect())?))
    };
    let loss = total_loss(&tape, gt, interior, &loss_inputs(&f), weights)?;
    let report = loss.report.clone();
    if let Some(term) = report.first_non_finite() {
        return Err(HitError::Numeric(format!(
            "loss term `{term}` is not finite ({:?})",
            report
        )));
    }
    let g = tape.backward(loss.total);
    Ok(ShapeGrad {
        report,
        grads: bound.grads(&g),
    })
}

/// Loss only, for validation.
pub fn shape_loss(
    params: &ParamStore,
    model: &ModelConfig,
    weights: &LossWeights,
    cloud: &PointCloud,
    queries: &QueryBatch,
    guide: &[[f64; 3]],
) -> Result<LossReport> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let f = forward_on(&tape, &bound, model, cloud, &queries.points_tensor())?;
    let gt = tape.constant(queries.gt_tensor());
    let interior = if guide.is_empty() {
        None
    } else {
        Some(tape.constant(Tensor::new(&[guide.len(), 3], guide.iter().flatten().copied().collect())?))
    };
    Ok(total_loss(&tape, gt, interior, &loss_inputs(&f), weights)?.report)
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let levels = reports[0].recon_per_level.len();
    let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        total: avg(&|r| r.total),
        recon: avg(&|r| r.recon),
        recon_per_level: (0..levels).map(|l| avg(&|r| r.recon_per_level[l])).collect(),
        contain: avg(&|r| r.contain),
        decomp: avg(&|r| r.decomp),
        guide: avg(&|r| r.guide),
        loc: avg(&|r| r.loc),
        balance: avg(&|r| r.balance),
        guide_skipped: reports.iter().any(|r| r.guide_skipped),
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

impl StepRecord {
    /// `key=value` pairs separated by spaces; floats use the shortest
    /// representation that round-trips.
    pub fn to_log_line(&self) -> String {
        let r = &self.report;
        let mut s = format!("step={} lr={}", self.step, self.lr);
        for (k, v) in r.terms() {
            s.push_str(&format!(" {k}={v}"));
        }
        for (l, v) in r.recon_per_level.iter().enumerate() {
            s.push_str(&format!(" recon_l{}={}", l + 1, v));
        }
        if r.guide_skipped {
            s.push_str(" guide_skipped=1");
        }
        s
    }

    /// Reads back `step` and `total` from a log line.
    pub fn parse_total(line: &str) -> Option<(u64, f64)> {
        let mut step = None;
        let mut total = None;
        for kv in line.split_whitespace() {
            match kv.split_once('=') {
                Some(("step", v)) => step = v.parse().ok(),
                Some(("total", v)) => total = v.parse().ok(),
                _ => {}
            }
        }
        Some((step?, total?))
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub data: Vec<TrainItem>,
    pub params: ParamStore,
    pub adam: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Vec<TrainItem>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(HitError::Config("training data is empty".into()));
        }
        let model = config.model();
        let params = init_params(&model, derive_seed(config.seed, &[STREAM_INIT]))?;
        let adam = Adam::new(config.adam(), &params);
        Ok(Trainer {
            weights: config.weights()?,
            model,
            config,
            data,
            params,
            adam,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: Vec<TrainItem>) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.check_against(&ckpt.config)?;
        if data.is_empty() {
            return Err(HitError::Config("training data is empty".into()));
        }
        Ok(Trainer {
            weights: ckpt.config.weights()?,
            model: ckpt.config.model(),
            config: ckpt.config,
            data,
            params: ckpt.params,
            adam: ckpt.adam,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            config: self.config.clone(),
        }
    }

    /// Dataset indices used at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let mut rng = rng_for(self.config.seed, &[STREAM_BATCH, step]);
        let n = self.data.len();
        let b = self.config.batch_size;
        if b <= n {
            sample(&mut rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.random_range(0..n)).collect()
        }
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let cfg = &self.config;
        let results: Vec<Result<ShapeGrad>> = idx
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let item = &self.data[i];
                let qseed = derive_seed(cfg.seed, &[STREAM_QUERIES, step, k as u64]);
                let queries = sample_queries(
                    &item.shape,
                    cfg.queries_per_shape,
                    qseed,
                    cfg.near_surface_queries,
                );
                let guide = guide_points(&queries, cfg.guide_samples, qseed);
                shape_gradient(&self.params, &self.model, &self.weights, &item.cloud, &queries, &guide)
            })
            .collect();
        let mut reports = Vec::with_capacity(results.len());
        let mut sum: Option<Vec<Tensor>> = None;
        for r in results {
            let g = r.map_err(|e| match e {
                HitError::Numeric(m) => HitError::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
            reports.push(g.report);
            match &mut sum {
                None => sum = Some(g.grads),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g.grads) {
                        a.add_assign(b);
                    }
                }
            }
        }
        let inv = 1.0 / idx.len() as f64;
        let grads: Vec<Tensor> = sum
            .expect("nonempty batch")
            .into_iter()
            .map(|g| g.map(|v| v * inv))
            .collect();
        for (name, g) in self.params.names().iter().zip(&grads) {
            if !g.all_finite() {
                return Err(HitError::Numeric(format!(
                    "step {step}: gradient of `{name}` is not finite"
                )));
            }
        }
        self.adam.update(&mut self.params, &grads)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            lr: self.adam.config.lr,
            report: mean_report(&reports),
        })
    }

    /// Steps until `self.step == until`, passing each record to `on_step`.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    /// Mean loss over the first `n` shapes with fixed queries.
    pub fn validation_loss(&self, n: usize, seed: u64) -> Result<f64> {
        let n = n.min(self.data.len()).max(1);
        let totals: Vec<Result<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let item = &self.data[i];
                let q = sample_queries(&item.shape, self.config.queries_per_shape, derive_seed(seed, &[i as u64]), true);
                let guide = guide_points(&q, self.config.guide_samples, seed);
                Ok(shape_loss(&self.params, &self.model, &self.weights, &item.cloud, &q, &guide)?.total)
            })
            .collect();
        let mut s = 0.0;
        for t in totals {
            s += t?;
        }
        Ok(s / n as f64)
    }
}

/// Files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<StepRecord>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.bin")
}

/// Trains for the configured budget, writing `metrics.log`, periodic
/// checkpoints and `final.bin` under `out`. Resumes from `resume` if given.
pub fn train(
    config: TrainConfig,
    out: &Path,
    resume: Option<Checkpoint>,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutput> {
    fs::create_dir_all(out).map_err(|e| HitError::io(out, e))?;
    let data = build_dataset(&config)?;
    let mut trainer = match resume {
        Some(c) => Trainer::from_checkpoint(c, data)?,
        None => Trainer::new(config, data)?,
    };
    let metrics = out.join("metrics.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(trainer.step > 0)
        .write(true)
        .truncate(trainer.step == 0)
        .open(&metrics)
        .map_err(|e| HitError::io(&metrics, e))?;
    let every = trainer.config.checkpoint_every;
    let total = trainer.config.total_steps();
    let mut records = Vec::new();
    trainer.run_until(total, |t, rec| {
        writeln!(log, "{}", rec.to_log_line()).map_err(|e| HitError::io(&metrics, e))?;
        if every > 0 && t.step % every == 0 && t.step < total {
            let p = out.join(checkpoint_name(t.step));
            t.checkpoint().save(&p)?;
        }
        progress(rec);
        records.push(rec.clone());
        Ok(())
    })?;
    let final_checkpoint = out.join("final.bin");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutput {
        final_checkpoint,
        metrics,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            resolution: 2,
            latent_dim: 6,
            parts_per_level: vec![2, 3],
            planes: 6,
            queries_per_shape: 64,
            points_per_shape: 64,
            num_shapes: 3,
            batch_size: 2,
            max_steps: 3,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn one_step_moves_parameters_with_gradient() {
        let cfg = TrainConfig {
            num_shapes: 1,
            batch_size: 1,
            ..tiny_cfg()
        };
        let data = build_dataset(&cfg).unwrap();
        let mut t = Trainer::new(cfg, data).unwrap();
        let before = t.params.clone();
        let idx = t.batch_indices(0);
        let item = &t.data[idx[0]];
        let q = sample_queries(&item.shape, 64, derive_seed(t.config.seed, &[STREAM_QUERIES, 0, 0]), true);
        let guide = guide_points(&q, 512, derive_seed(t.config.seed, &[STREAM_QUERIES, 0, 0]));
        let g = shape_gradient(&t.params, &t.model, &t.weights, &item.cloud, &q, &guide).unwrap();
        t.step().unwrap();
        for ((name, b), (a, gr)) in before.iter().zip(t.params.tensors().iter().zip(&g.grads)) {
            for ((x, y), gv) in b.data().iter().zip(a.data()).zip(gr.data()) {
                // smaller gradients can round to a zero Adam step
                if gv.abs() > 1e-8 {
                    assert_ne!(x, y, "{name} did not move (grad {gv:e})");
                }
            }
        }
    }

    #[test]
    fn log_line_roundtrip() {
        let rec = StepRecord {
            step: 12,
            lr: 1e-3,
            report: LossReport {
                total: 0.1 + 0.2,
                recon_per_level: vec![0.5],
                ..Default::default()
            },
        };
        let line = rec.to_log_line();
        assert_eq!(StepRecord::parse_total(&line), Some((12, 0.1 + 0.2)));
    }

    #[test]
    fn identical_runs_match() {
        let cfg = tiny_cfg();
        let run = || {
            let mut t = Trainer::new(cfg.clone(), build_dataset(&cfg).unwrap()).unwrap();
            (0..3).map(|_| t.step().unwrap().to_log_line()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
