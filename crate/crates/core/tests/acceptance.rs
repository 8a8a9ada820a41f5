//! End-to-end acceptance criteria A1 to A9, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach stdout.

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hit_core::checkpoint::Checkpoint;
use hit_core::config::TrainConfig;
use hit_core::convex::{ConvexParams, DEFAULT_SIGMA};
use hit_core::diffcore::{Tape, Tensor};
use hit_core::eval::{active_leaves, interior_points, snapshot};
use hit_core::geometry::metrics::{voxel_iou, voxelize};
use hit_core::geometry::{associate_labels, segment_points, segmentation_iou, HierarchySnapshot, SnapshotLevel};
use hit_core::objectives::{balance_loss, decomp_loss, guide_value};
use hit_core::seed::rng_for;
use hit_core::shapes::{table, Primitive};
use hit_core::trainer::{build_dataset, train, Trainer};
use hit_core::verify::{self, PropertyResult};

struct Outcome {
    id: &'static str,
    passed: bool,
    summary: String,
    elapsed: Duration,
    budget: Duration,
}

fn run(
    id: &'static str,
    budget_secs: u64,
    f: impl FnOnce() -> Result<(bool, String), String>,
) -> Outcome {
    let start = Instant::now();
    let (ok, summary) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let budget = Duration::from_secs(budget_secs);
    let outcome = Outcome {
        id,
        passed: ok && elapsed <= budget,
        summary,
        elapsed,
        budget,
    };
    println!(
        "{} {} {} [{:.1}s of {}s]",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.id,
        outcome.summary,
        outcome.elapsed.as_secs_f64(),
        outcome.budget.as_secs()
    );
    outcome
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn failures(results: &[PropertyResult]) -> String {
    let mut s = String::new();
    for r in results.iter().filter(|r| !r.passed) {
        let _ = write!(s, "; {r}");
    }
    s
}

fn a1() -> Result<(bool, String), String> {
    let results = verify::gradcheck_suite().map_err(e)?;
    let worst = results.iter().map(|r| r.worst).fold(0.0, f64::max);
    Ok((
        verify::all_passed(&results),
        format!("{} gradient checks, worst rel err {worst:.2e} (tol 1e-4){}", results.len(), failures(&results)),
    ))
}

fn invariants(names: &[&str]) -> Result<(bool, String), String> {
    let results: Vec<PropertyResult> = verify::invariants_suite(100, 10_000)
        .map_err(e)?
        .into_iter()
        .filter(|r| names.contains(&r.name.as_str()))
        .collect();
    if results.len() != names.len() {
        return Err(format!("expected {} invariants, found {}", names.len(), results.len()));
    }
    let detail: Vec<String> = results.iter().map(|r| format!("{} worst={:.2e}", r.name, r.worst)).collect();
    Ok((verify::all_passed(&results), detail.join(", ")))
}

fn a4() -> Result<(bool, String), String> {
    let wanted = ["cube.center_closed_form", "sphere.marching_cubes_radius", "two_cube.union_iou"];
    let results: Vec<PropertyResult> = verify::oracle_suite()
        .map_err(e)?
        .into_iter()
        .filter(|r| wanted.contains(&r.name.as_str()))
        .collect();
    if results.len() != wanted.len() {
        return Err("oracle suite is missing a property".into());
    }
    let detail: Vec<String> = results
        .iter()
        .map(|r| format!("{} worst={:.2e} tol={:.0e}", r.name, r.worst, r.tolerance))
        .collect();
    Ok((verify::all_passed(&results), detail.join(", ")))
}

struct SeedRun {
    seed: u64,
    trainer: Trainer,
    loss50: f64,
    final_loss: f64,
    leaf_iou: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn train_desk(seed: u64) -> Result<SeedRun, String> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let total = cfg.total_steps();
    let mut t = Trainer::new(cfg.clone(), build_dataset(&cfg).map_err(e)?).map_err(e)?;
    let mut loss50 = f64::NAN;
    let mut final_loss = f64::NAN;
    t.run_until(total, |_, rec| {
        if rec.step == 50 {
            loss50 = rec.report.total;
        }
        final_loss = rec.report.total;
        Ok(())
    })
    .map_err(e)?;
    let mut ious = Vec::with_capacity(t.data.len());
    for item in &t.data {
        let snap = snapshot(&t.params, &t.model, &item.cloud).map_err(e)?;
        let leaf = snap.depth();
        let pred = voxelize(|x| snap.union(leaf, x), 64);
        let gt = voxelize(|x| item.shape.occupancy(x), 64);
        ious.push(voxel_iou(&pred, &gt));
    }
    let leaf_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok(SeedRun {
        seed,
        trainer: t,
        loss50,
        final_loss,
        leaf_iou,
    })
}

fn a5(runs: &mut Vec<SeedRun>) -> Result<(bool, String), String> {
    for seed in 0..3 {
        let r = train_desk(seed)?;
        println!(
            "  seed {}: mean leaf IoU {:.4}, step-50 loss {:.4}, final loss {:.4} (ratio {:.3})",
            r.seed,
            r.leaf_iou,
            r.loss50,
            r.final_loss,
            r.final_loss / r.loss50
        );
        runs.push(r);
    }
    let iou = median(runs.iter().map(|r| r.leaf_iou).collect());
    let ratio = median(runs.iter().map(|r| r.final_loss / r.loss50).collect());
    Ok((
        iou >= 0.60 && ratio < 0.25,
        format!("seed-median leaf IoU {iou:.4} (need >= 0.60), final/step-50 loss {ratio:.3} (need < 0.25)"),
    ))
}

fn a6() -> Result<(bool, String), String> {
    let shape = table(4, &mut rng_for(6, &[]));
    let sharp = 1e4;
    let leaves: Vec<ConvexParams> = shape
        .parts
        .iter()
        .map(|(p, _)| match *p {
            Primitive::Box { center, half } => ConvexParams::axis_box(center, half, sharp),
            Primitive::Cylinder {
                center,
                radius,
                half_height,
                ..
            } => ConvexParams::axis_box(center, [radius, half_height, radius], sharp),
            Primitive::Sphere { .. } => unreachable!("tables have no spheres"),
        })
        .collect();
    let n = leaves.len();
    let snap = HierarchySnapshot {
        levels: vec![
            SnapshotLevel {
                convexes: vec![ConvexParams::axis_box([0.0; 3], [0.49; 3], sharp)],
                parents: vec![None],
            },
            SnapshotLevel {
                convexes: leaves,
                parents: vec![Some(0); n],
            },
        ],
        sigma: DEFAULT_SIGMA,
    };
    snap.validate().map_err(e)?;
    let points = interior_points(&shape, 4000, 6);
    let gt: Vec<i64> = points.iter().map(|p| shape.label_of(p).expect("interior")).collect();
    let seg = segment_points(&snap.level_contained(2, &points)).map_err(e)?;
    let map = associate_labels(&gt, &seg, n).map_err(e)?;
    let iou = segmentation_iou(&map.apply(&seg), &gt).map_err(e)?;
    Ok((iou.mean == 1.0, format!("mean IoU {} over {} labelled points, 5 labels", iou.mean, points.len())))
}

fn a7() -> Result<(bool, String), String> {
    let tape = Tape::new();
    let concentrated = tape.constant(Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).map_err(e)?);
    let balance = balance_loss(concentrated).map_err(e)?.item();
    let d = 0.3;
    let guide = guide_value(&[[d, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]).map_err(e)?;
    let disjoint = tape.constant(Tensor::new(&[2, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).map_err(e)?);
    let decomp = decomp_loss(disjoint, 1.05).map_err(e)?.item();
    let guide_err = (guide - 2.0 * d * d).abs();
    Ok((
        balance == 8.0 && guide_err < 1e-12 && decomp == 0.0,
        format!("balance {balance}, guide err {guide_err:.1e}, decomp {decomp}"),
    ))
}

fn a8() -> Result<(bool, String), String> {
    let cfg = TrainConfig {
        max_steps: 20,
        checkpoint_every: 10,
        seed: 8,
        ..TrainConfig::desk()
    };
    let dir = tempfile::tempdir().map_err(e)?;
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let ra = train(cfg.clone(), &a, None, |_| {}).map_err(e)?;
    let rb = train(cfg.clone(), &b, None, |_| {}).map_err(e)?;
    let read = |p: &std::path::Path| std::fs::read(p).map_err(e);
    let logs_equal = read(&ra.metrics)? == read(&rb.metrics)?;
    let finals_equal = read(&ra.final_checkpoint)? == read(&rb.final_checkpoint)?;

    let mid_path = a.join("ckpt_000010.bin");
    let mid = Checkpoint::load(&mid_path).map_err(e)?;
    let roundtrip = mid.to_bytes() == read(&mid_path)?;

    let rc = train(cfg, &c, Some(mid), |_| {}).map_err(e)?;
    let resumed_equal = read(&rc.final_checkpoint)? == read(&ra.final_checkpoint)? && rc.records == ra.records[10..];
    Ok((
        logs_equal && finals_equal && roundtrip && resumed_equal,
        format!(
            "identical logs {logs_equal}, identical checkpoints {finals_equal}, save/load {roundtrip}, resume {resumed_equal}"
        ),
    ))
}

fn a9(runs: &[SeedRun]) -> Result<(bool, String), String> {
    if runs.is_empty() {
        return Err("no trained models".into());
    }
    let mut differing = 0;
    let mut detail = Vec::new();
    for r in runs {
        let t = &r.trainer;
        let mut counts = [0usize; 2];
        for (k, legs) in [3, 6].into_iter().enumerate() {
            let shape = table(legs, &mut rng_for(r.seed, &[0xA9, legs as u64]));
            let cloud = shape.sample_surface(t.config.points_per_shape, r.seed ^ 0xA9);
            let snap = snapshot(&t.params, &t.model, &cloud).map_err(e)?;
            counts[k] = active_leaves(&snap, &interior_points(&shape, 2000, r.seed)).map_err(e)?;
        }
        differing += (counts[0] != counts[1]) as usize;
        detail.push(format!("seed {}: 3-leg {} vs 6-leg {}", r.seed, counts[0], counts[1]));
    }
    Ok((differing >= 2, format!("{} ({differing} of {} differ)", detail.join(", "), runs.len())))
}

fn main() -> ExitCode {
    let mut runs = Vec::new();
    let outcomes = [
        run("A1", 60, a1),
        run("A2", 10, || invariants(&["attention.row_stochastic", "attention.straight_through_one_hot", "attention.tokens_equal_codebook"])),
        run("A3", 10, || invariants(&["containment.child_le_parent", "containment.level1_equals_raw"])),
        run("A4", 60, a4),
        run("A5", 30 * 60, || a5(&mut runs)),
        run("A6", 10, a6),
        run("A7", 5, a7),
        run("A8", 5 * 60, a8),
        run("A9", 60, || a9(&runs)),
    ];
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
