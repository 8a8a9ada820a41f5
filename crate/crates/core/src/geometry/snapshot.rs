//! Frozen hierarchy: convexes per level with their hard parent links, and
//! its export as per-part meshes plus a text tree file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::convex::ConvexParams;
use crate::error::{HitError, Result};
use crate::geometry::mc::{marching_cubes, Grid, Mesh};
use crate::model::Inference;

pub const TREE_HEADER: &str = "# hit tree v1";
pub const TREE_FILE: &str = "tree.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotLevel {
    pub convexes: Vec<ConvexParams>,
    /// Parent index at the previous level; `None` under the virtual root.
    pub parents: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchySnapshot {
    pub levels: Vec<SnapshotLevel>,
    pub sigma: f64,
}

impl HierarchySnapshot {
    pub fn from_inference(inf: &Inference) -> Self {
        let levels = inf
            .levels
            .iter()
            .zip(&inf.convexes)
            .enumerate()
            .map(|(i, (state, cvx))| SnapshotLevel {
                convexes: cvx.clone(),
                parents: state
                    .parent_index
                    .iter()
                    .map(|&p| if i == 0 { None } else { Some(p) })
                    .collect(),
            })
            .collect();
        HierarchySnapshot {
            levels,
            sigma: inf.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(HitError::Config("snapshot has no levels".into()));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.convexes.len() != level.parents.len() || level.convexes.is_empty() {
                return Err(HitError::Config(format!(
                    "level {} has {} convexes and {} parent links",
                    i + 1,
                    level.convexes.len(),
                    level.parents.len()
                )));
            }
            for (s, p) in level.parents.iter().enumerate() {
                let ok = match (i, p) {
                    (0, None) => true,
                    (0, Some(_)) | (_, None) => false,
                    (_, Some(p)) => *p < self.levels[i - 1].convexes.len(),
                };
                if !ok {
                    return Err(HitError::Config(format!(
                        "part {} at level {} has an invalid parent {:?}",
                        s,
                        i + 1,
                        p
                    )));
                }
            }
            for c in &level.convexes {
                c.validate()?;
            }
        }
        Ok(())
    }

    /// Number of levels.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Raw occupancy of part `part` at 1-based `level`.
    pub fn raw(&self, level: usize, part: usize, x: &[f64; 3]) -> f64 {
        self.levels[level - 1].convexes[part].occupancy(x, self.sigma)
    }

    /// Parent-modulated occupancy: the product of raw occupancies along the
    /// chain from level 1 down to `part`.
    pub fn contained(&self, level: usize, part: usize, x: &[f64; 3]) -> f64 {
        let mut chain = Vec::with_capacity(level);
        let mut p = part;
        for l in (1..=level).rev() {
            chain.push((l, p));
            if let Some(parent) = self.levels[l - 1].parents[p] {
                p = parent;
            }
        }
        chain
            .iter()
            .rev()
            .fold(1.0, |acc, &(l, p)| acc * self.raw(l, p, x))
    }

    /// Contained occupancy of every part of `level` at every point.
    pub fn level_contained(&self, level: usize, points: &[[f64; 3]]) -> Vec<Vec<f64>> {
        (0..self.levels[level - 1].convexes.len())
            .map(|s| points.iter().map(|x| self.contained(level, s, x)).collect())
            .collect()
    }

    pub fn union(&self, level: usize, x: &[f64; 3]) -> f64 {
        (0..self.levels[level - 1].convexes.len())
            .map(|s| self.contained(level, s, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Tree file text. Floats use the shortest round-trip form, so parsing
    /// restores every value exactly.
    pub fn tree_text(&self, meshes: &[Vec<Option<String>>]) -> String {
        let mut s = format!("{TREE_HEADER}\nlevels {} sigma {}\n", self.depth(), self.sigma);
        s.push_str(
            "# node level index parent mesh delta euler[3] translation[3] scale[3] planes normals[3H] offsets[H]\n",
        );
        for (i, level) in self.levels.iter().enumerate() {
            for (k, c) in level.convexes.iter().enumerate() {
                let parent = level.parents[k].map_or("root".to_string(), |p| p.to_string());
                let mesh = meshes
                    .get(i)
                    .and_then(|m| m.get(k).cloned().flatten())
                    .unwrap_or_else(|| "-".into());
                let _ = write!(s, "node {} {} {} {} {}", i + 1, k, parent, mesh, c.blend_sharpness);
                for v in c.euler.iter().chain(&c.translation).chain(&c.scale) {
                    let _ = write!(s, " {v}");
                }
                let _ = write!(s, " {}", c.planes());
                for v in c.normals.iter().flatten().chain(&c.offsets) {
                    let _ = write!(s, " {v}");
                }
                s.push('\n');
            }
        }
        s
    }

    /// Parses a tree file; returns the snapshot and the mesh file name of
    /// each node (`None` for metadata-only nodes).
    pub fn parse_tree(text: &str, path: &Path) -> Result<(Self, Vec<Vec<Option<String>>>)> {
        let bad = |line: usize, m: &str| HitError::format(path, format!("line {line}: {m}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TREE_HEADER => {}
            _ => return Err(HitError::format(path, "missing tree header")),
        }
        let mut depth = None;
        let mut sigma = None;
        let mut levels: Vec<SnapshotLevel> = Vec::new();
        let mut meshes: Vec<Vec<Option<String>>> = Vec::new();
        for (n, line) in lines {
            let n = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |k: usize| -> Result<f64> {
                f.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(n, "bad number"))
            };
            let int = |k: usize| -> Result<usize> {
                f.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(n, "bad integer"))
            };
            match f[0] {
                "levels" => {
                    depth = Some(int(1)?);
                    if f.get(2) != Some(&"sigma") {
                        return Err(bad(n, "expected `sigma`"));
                    }
                    sigma = Some(num(3)?);
                }
                "node" => {
                    let (level, index) = (int(1)?, int(2)?);
                    if level == 0 || level > levels.len() + 1 {
                        return Err(bad(n, "levels must appear in order"));
                    }
                    if level == levels.len() + 1 {
                        levels.push(SnapshotLevel {
                            convexes: Vec::new(),
                            parents: Vec::new(),
                        });
                        meshes.push(Vec::new());
                    }
                    if index != levels[level - 1].convexes.len() {
                        return Err(bad(n, "node indices must be consecutive"));
                    }
                    let parent = match f.get(3) {
                        Some(&"root") => None,
                        Some(p) => Some(p.parse().map_err(|_| bad(n, "bad parent"))?),
                        None => return Err(bad(n, "missing parent")),
                    };
                    let mesh = match f.get(4) {
                        Some(&"-") => None,
                        Some(m) => Some(m.to_string()),
                        None => return Err(bad(n, "missing mesh field")),
                    };
                    let v3 = |k: usize| -> Result<[f64; 3]> { Ok([num(k)?, num(k + 1)?, num(k + 2)?]) };
                    let planes = int(15)?;
                    if f.len() != 16 + 4 * planes {
                        return Err(bad(n, "wrong number of plane values"));
                    }
                    let normals = (0..planes)
                        .map(|h| v3(16 + 3 * h))
                        .collect::<Result<Vec<_>>>()?;
                    let offsets = (0..planes)
                        .map(|h| num(16 + 3 * planes + h))
                        .collect::<Result<Vec<_>>>()?;
                    levels[level - 1].convexes.push(ConvexParams {
                        normals,
                        offsets,
                        blend_sharpness: num(5)?,
                        euler: v3(6)?,
                        translation: v3(9)?,
                        scale: v3(12)?,
                    });
                    levels[level - 1].parents.push(parent);
                    meshes[level - 1].push(mesh);
                }
                other => return Err(bad(n, &format!("unknown record `{other}`"))),
            }
        }
        let depth = depth.ok_or_else(|| HitError::format(path, "missing levels line"))?;
        if depth != levels.len() {
            return Err(HitError::format(
                path,
                format!("header declares {depth} levels, found {}", levels.len()),
            ));
        }
        let snap = HierarchySnapshot {
            levels,
            sigma: sigma.expect("set with depth"),
        };
        snap.validate()?;
        Ok((snap, meshes))
    }

    pub fn load_tree(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HitError::io(path, e))?;
        Ok(Self::parse_tree(&text, path)?.0)
    }
}

/// Result of [`export_hierarchy`].
#[derive(Clone, Debug, Default)]
pub struct ExportReport {
    pub tree: PathBuf,
    pub meshes: Vec<PathBuf>,
    /// `(level, part)` of parts with an empty isosurface.
    pub empty: Vec<(usize, usize)>,
    /// `(level, part)` of children whose mesh leaves the parent's box
    /// expanded by two cells.
    pub containment_violations: Vec<(usize, usize)>,
}

pub fn mesh_file_name(level: usize, part: usize) -> String {
    format!("level{level}_part{part:02}.obj")
}

/// Meshes every part's contained occupancy and writes the tree file.
pub fn export_hierarchy(
    snap: &HierarchySnapshot,
    dir: &Path,
    res: usize,
    threshold: f64,
) -> Result<ExportReport> {
    snap.validate()?;
    if res < 8 {
        return Err(HitError::Config("export resolution must be >= 8".into()));
    }
    fs::create_dir_all(dir).map_err(|e| HitError::io(dir, e))?;
    let grid = Grid::unit(res);
    let slack = 2.0 * grid.spacing();
    let mut report = ExportReport::default();
    let mut names: Vec<Vec<Option<String>>> = Vec::new();
    let mut boxes: Vec<Vec<Option<([f64; 3], [f64; 3])>>> = Vec::new();
    for (i, level) in snap.levels.iter().enumerate() {
        let l = i + 1;
        let mut level_names = Vec::new();
        let mut level_boxes = Vec::new();
        for s in 0..level.convexes.len() {
            let mesh: Mesh = marching_cubes(|x| snap.contained(l, s, x), grid, threshold)?;
            if mesh.is_empty() {
                report.empty.push((l, s));
                level_names.push(None);
                level_boxes.push(None);
                continue;
            }
            let bbox = mesh.bounding_box();
            if let (Some((lo, hi)), Some(p)) = (bbox, level.parents[s]) {
                if let Some((plo, phi)) = boxes[i - 1][p] {
                    let inside = (0..3).all(|k| lo[k] >= plo[k] - slack && hi[k] <= phi[k] + slack);
                    if !inside {
                        report.containment_violations.push((l, s));
                    }
                }
            }
            let name = mesh_file_name(l, s);
            let path = dir.join(&name);
            mesh.write_obj(&path)?;
            report.meshes.push(path);
            level_names.push(Some(name));
            level_boxes.push(bbox);
        }
        names.push(level_names);
        boxes.push(level_boxes);
    }
    let tree = dir.join(TREE_FILE);
    fs::write(&tree, snap.tree_text(&names)).map_err(|e| HitError::io(&tree, e))?;
    report.tree = tree;
    Ok(report)
}
