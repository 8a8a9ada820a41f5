use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hit_core::checkpoint::Checkpoint;
use hit_core::config::TrainConfig;
use hit_core::encoder::PointCloud;
use hit_core::eval::{level_chamfer, level_volumetric_iou, reference_label_map, segmentation_mean_iou, snapshot};
use hit_core::geometry::snapshot::TREE_FILE;
use hit_core::geometry::{export_hierarchy, segment_points, HierarchySnapshot};
use hit_core::shapes::{generate_dataset, SyntheticShape};
use hit_core::trainer::{build_dataset, items_from_shapes, train, TrainItem};
use hit_core::verify::{self, Suite};
use hit_core::{HitError, Result};

const USAGE_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "hit", version, about = "Hierarchical convex part decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic shapes with labelled surface samples.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metric log.
    Train(TrainArgs),
    /// Encode a point cloud, decode its hierarchy and export meshes, tree
    /// and per-point segmentation.
    Infer(InferArgs),
    /// Mesh every part of a hierarchy, from a checkpoint or a tree file.
    Export(ExportArgs),
    /// Per-level Chamfer distance, volumetric IoU and segmentation IoU.
    Eval(EvalArgs),
    /// Run a verification suite and report each property.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML training configuration; unset keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parts per level, comma separated (e.g. 2,4,8).
    #[arg(long, value_delimiter = ',')]
    parts: Option<Vec<usize>>,
    /// Keeps only the first N entries of the part list.
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for checkpoints and `metrics.log`.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint; its configuration wins over `--config`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Point cloud, one `x y z [label]` per line.
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Marching-cubes resolution.
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Export only the first N levels.
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint to decode; requires `--points`.
    #[arg(long, required_unless_present = "tree", requires = "points")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    points: Option<PathBuf>,
    /// Previously exported tree file to re-mesh.
    #[arg(long, conflicts_with = "ckpt")]
    tree: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Export only the first N levels.
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory written by `gen-data`. Without it, a held-out set is drawn
    /// from the checkpoint's shape families.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Any of iou, chamfer, seg.
    #[arg(long, value_delimiter = ',', default_value = "iou,chamfer,seg")]
    metrics: Vec<Metric>,
    /// Voxel and marching-cubes resolution.
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Evaluate only the first N levels.
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Metric {
    Iou,
    Chamfer,
    Seg,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// gradcheck, invariants or oracle; all suites when omitted.
    #[arg(value_parser = parse_suite, conflicts_with = "suite_flag")]
    suite: Option<Suite>,
    #[arg(long = "suite", value_parser = parse_suite)]
    suite_flag: Option<Suite>,
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: HitError| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(RUNTIME_ERROR),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Export(a) => export_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }
    .map(|ok| ok.unwrap_or(true))
}

fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.parts {
        cfg.parts_per_level = p.clone();
    }
    if let Some(n) = a.levels {
        truncate_levels(&mut cfg.parts_per_level, n)?;
    }
    cfg.validate()?;
    eprintln!("effective seed {}", cfg.seed);
    Ok(cfg)
}

fn truncate_levels<T>(v: &mut Vec<T>, n: usize) -> Result<()> {
    if n == 0 || n > v.len() {
        return Err(HitError::Config(format!(
            "--levels must be in 1..={}, got {n}",
            v.len()
        )));
    }
    v.truncate(n);
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| HitError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| HitError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn shape_stem(i: usize) -> String {
    format!("shape_{i:04}")
}

fn gen_data(a: GenDataArgs) -> Result<Option<bool>> {
    let cfg = resolve_config(&a.cfg)?;
    create_dir(&a.out)?;
    let items = build_dataset(&cfg)?;
    for (i, item) in items.iter().enumerate() {
        item.shape.save(a.out.join(format!("{}.shape", shape_stem(i))))?;
        item.cloud.write_xyz(a.out.join(format!("{}.xyz", shape_stem(i))))?;
    }
    eprintln!("wrote {} shapes to {}", items.len(), a.out.display());
    Ok(None)
}

fn train_cmd(a: TrainArgs) -> Result<Option<bool>> {
    let (cfg, resume) = match &a.ckpt {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            eprintln!("resuming from step {} (effective seed {})", c.step, c.config.seed);
            (c.config.clone(), Some(c))
        }
        None => (resolve_config(&a.cfg)?, None),
    };
    let total = cfg.total_steps();
    let out = train(cfg, &a.out, resume, |r| {
        if r.step % 100 == 0 || r.step + 1 == total {
            eprintln!("step {:>6} loss {:.6}", r.step, r.report.total);
        }
    })?;
    println!("{}", out.final_checkpoint.display());
    Ok(None)
}

fn decode(ckpt: &Path, points: &Path) -> Result<(HierarchySnapshot, PointCloud)> {
    let c = Checkpoint::load(ckpt)?;
    let cloud = PointCloud::read_xyz(points)?;
    cloud.validate()?;
    let snap = snapshot(&c.params, &c.config.model(), &cloud)?;
    Ok((snap, cloud))
}

fn keep_levels(snap: &mut HierarchySnapshot, n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        truncate_levels(&mut snap.levels, n)?;
    }
    Ok(())
}

fn report_export(snap: &HierarchySnapshot, out: &Path, res: usize) -> Result<()> {
    let r = export_hierarchy(snap, out, res, 0.5)?;
    for (l, p) in &r.empty {
        eprintln!("level {l} part {p}: empty isosurface, metadata only");
    }
    for (l, p) in &r.containment_violations {
        eprintln!("level {l} part {p}: mesh leaves its parent's bounding box");
    }
    println!("{}", r.tree.display());
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<Option<bool>> {
    let (mut snap, cloud) = decode(&a.ckpt, &a.points)?;
    keep_levels(&mut snap, a.levels)?;
    report_export(&snap, &a.out, a.res)?;
    let seg = segment_points(&snap.level_contained(snap.depth(), &cloud.points))?;
    let mut text = String::with_capacity(seg.len() * 3);
    for s in seg {
        text.push_str(&s.to_string());
        text.push('\n');
    }
    write_file(&a.out.join("segmentation.txt"), &text)?;
    Ok(None)
}

fn export_cmd(a: ExportArgs) -> Result<Option<bool>> {
    let mut snap = match (&a.tree, &a.ckpt, &a.points) {
        (Some(t), _, _) => HierarchySnapshot::load_tree(t)?,
        (None, Some(c), Some(p)) => decode(c, p)?.0,
        _ => unreachable!("clap enforces --tree or --ckpt with --points"),
    };
    keep_levels(&mut snap, a.levels)?;
    if a.tree.as_deref() == Some(&a.out.join(TREE_FILE)) {
        return Err(HitError::Config("refusing to overwrite the input tree file".into()));
    }
    report_export(&snap, &a.out, a.res)?;
    Ok(None)
}

fn load_dataset(dir: &Path, points: usize, seed: u64) -> Result<Vec<TrainItem>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| HitError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "shape"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(HitError::Config(format!("no .shape files in {}", dir.display())));
    }
    let shapes = stems
        .iter()
        .map(SyntheticShape::load)
        .collect::<Result<Vec<_>>>()?;
    let mut items = items_from_shapes(shapes, points, seed);
    for (item, stem) in items.iter_mut().zip(&stems) {
        let xyz = stem.with_extension("xyz");
        if xyz.exists() {
            item.cloud = PointCloud::read_xyz(&xyz)?;
        }
    }
    Ok(items)
}

fn eval_cmd(a: EvalArgs) -> Result<Option<bool>> {
    let c = Checkpoint::load(&a.ckpt)?;
    let cfg = c.config.clone();
    let items = match &a.dataset {
        Some(d) => load_dataset(d, cfg.points_per_shape, cfg.seed)?,
        None => {
            let shapes = generate_dataset(
                cfg.num_shapes,
                &cfg.families,
                hit_core::seed::derive_seed(cfg.seed, &[0xE7A1]),
            )?;
            items_from_shapes(shapes, cfg.points_per_shape, cfg.seed)
        }
    };
    let model = cfg.model();
    let mut snaps = Vec::with_capacity(items.len());
    for item in &items {
        let mut s = snapshot(&c.params, &model, &item.cloud)?;
        keep_levels(&mut s, a.levels)?;
        snaps.push(s);
    }
    let depth = snaps[0].depth();
    let want = |m| a.metrics.contains(&m);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    let mut iou = vec![Vec::new(); depth];
    let mut cd = vec![Vec::new(); depth];
    for (item, snap) in items.iter().zip(&snaps) {
        if want(Metric::Iou) {
            for (l, v) in level_volumetric_iou(snap, &item.shape, a.res).into_iter().enumerate() {
                iou[l].push(v);
            }
        }
        if want(Metric::Chamfer) {
            for (l, col) in cd.iter_mut().enumerate() {
                col.push(level_chamfer(snap, l + 1, &item.cloud.points, a.res)?);
            }
        }
    }

    // one labelled reference instance per family fixes the code-to-label map
    let mut seg = vec![Vec::new(); depth];
    if want(Metric::Seg) {
        let mut reference: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            if item.cloud.labels.is_some() {
                reference.entry(item.shape.family.as_str()).or_insert(i);
            }
        }
        for (l, col) in seg.iter_mut().enumerate() {
            let level = l + 1;
            let mut maps = BTreeMap::new();
            for (fam, &r) in &reference {
                maps.insert(*fam, reference_label_map(&snaps[r], level, &items[r].cloud)?);
            }
            for (i, item) in items.iter().enumerate() {
                if reference.values().any(|&r| r == i) {
                    continue;
                }
                if let Some(map) = maps.get(item.shape.family.as_str()) {
                    if item.cloud.labels.is_some() {
                        col.push(segmentation_mean_iou(&snaps[i], level, &item.cloud, map)?);
                    }
                }
            }
        }
    }

    let cell = |on: bool, v: &[f64]| {
        if on && !v.is_empty() {
            format!("{:>10.4}", mean(v))
        } else {
            format!("{:>10}", "-")
        }
    };
    println!("{} shapes, marching cubes / voxel resolution {}", items.len(), a.res);
    println!("{:>5} {:>5} {:>10} {:>10} {:>10}", "level", "parts", "chamfer", "vol_iou", "seg_miou");
    for l in 0..depth {
        println!(
            "{:>5} {:>5} {} {} {}",
            l + 1,
            snaps[0].levels[l].convexes.len(),
            cell(want(Metric::Chamfer), &cd[l]),
            cell(want(Metric::Iou), &iou[l]),
            cell(want(Metric::Seg), &seg[l]),
        );
    }
    Ok(None)
}

fn verify_cmd(a: VerifyArgs) -> Result<Option<bool>> {
    let suites: Vec<Suite> = match a.suite.or(a.suite_flag) {
        Some(s) => vec![s],
        None => Suite::ALL.to_vec(),
    };
    let mut ok = true;
    for s in suites {
        let results = verify::run(s)?;
        for r in &results {
            println!("{r}");
        }
        ok &= verify::all_passed(&results);
    }
    Ok(Some(ok))
}
