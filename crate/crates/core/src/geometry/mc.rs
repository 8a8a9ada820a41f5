//! Marching cubes over a sampled scalar field.
//!
//! The 256-case table is derived from the cube's faces instead of being
//! hard-coded: on every face the sign changes are joined into segments
//! (an ambiguous face with two diagonal inside corners keeps those corners
//! separated), the segments are chained into loops and each loop is fanned
//! into triangles facing away from the inside corners. Because a face's
//! segments depend only on its four corner signs, neighbouring cells agree
//! on their shared face and the surface is closed.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{HitError, Result};

/// Corner `i` sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`.
fn corner_pos(i: usize) -> [f64; 3] {
    [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]
}

/// The 12 cube edges as corner pairs `(a, b)` with `a < b`.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Faces as cyclic corner quadruples.
const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 3, 7, 6],
    [0, 1, 3, 2],
    [4, 5, 7, 6],
];

fn edge_index(a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    EDGES.iter().position(|&e| e == (a, b)).expect("cube edge")
}

/// Triangles per case as triples of cube-edge indices.
pub fn case_table() -> &'static [Vec<[usize; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[usize; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(build_case))
}

fn build_case(case: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for face in FACES {
        let edges: Vec<usize> = (0..4).map(|k| edge_index(face[k], face[(k + 1) % 4])).collect();
        let crossing: Vec<usize> = (0..4)
            .filter(|&k| inside(face[k]) != inside(face[(k + 1) % 4]))
            .collect();
        let mut link = |a: usize, b: usize| {
            adj[edges[a]].push(edges[b]);
            adj[edges[b]].push(edges[a]);
        };
        match crossing.len() {
            0 => {}
            2 => link(crossing[0], crossing[1]),
            4 => {
                // cut off each inside corner on its own
                if inside(face[0]) {
                    link(3, 0);
                    link(1, 2);
                } else {
                    link(0, 1);
                    link(2, 3);
                }
            }
            _ => unreachable!("a face has an even number of sign changes"),
        }
    }
    let mid = |e: usize| {
        let (a, b) = EDGES[e];
        let (pa, pb) = (corner_pos(a), corner_pos(b));
        [0, 1, 2].map(|k| 0.5 * (pa[k] + pb[k]))
    };
    let outward = |e: usize| {
        let (a, b) = EDGES[e];
        let (pin, pout) = if inside(a) { (a, b) } else { (b, a) };
        let (pi, po) = (corner_pos(pin), corner_pos(pout));
        [0, 1, 2].map(|k| po[k] - pi[k])
    };
    let mut visited = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if visited[start] || adj[start].is_empty() {
            continue;
        }
        let mut cycle = vec![start];
        visited[start] = true;
        let mut prev = start;
        let mut cur = adj[start][0];
        while cur != start {
            visited[cur] = true;
            cycle.push(cur);
            let next = if adj[cur][0] != prev { adj[cur][0] } else { adj[cur][1] };
            prev = cur;
            cur = next;
        }
        let mut newell = [0.0; 3];
        for i in 0..cycle.len() {
            let p = mid(cycle[i]);
            let q = mid(cycle[(i + 1) % cycle.len()]);
            newell[0] += (p[1] - q[1]) * (p[2] + q[2]);
            newell[1] += (p[2] - q[2]) * (p[0] + q[0]);
            newell[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        let mut out = [0.0; 3];
        for &e in &cycle {
            let o = outward(e);
            for k in 0..3 {
                out[k] += o[k];
            }
        }
        if newell.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            cycle.reverse();
        }
        for i in 1..cycle.len() - 1 {
            tris.push([cycle[0], cycle[i], cycle[i + 1]]);
        }
    }
    tris
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_counts().values().all(|&c| c == 2)
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                let cross = [
                    b[1] * c[2] - b[2] * c[1],
                    b[2] * c[0] - b[0] * c[2],
                    b[0] * c[1] - b[1] * c[0],
                ];
                (a[0] * cross[0] + a[1] * cross[1] + a[2] * cross[2]) / 6.0
            })
            .sum()
    }

    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        if self.vertices.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        Some((lo, hi))
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 20);
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| HitError::io(path, e))?;
        f.write_all(self.to_obj().as_bytes())
            .map_err(|e| HitError::io(path, e))
    }
}

/// Regular sample grid over `[lo, hi]^3` with `res` samples per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub res: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Grid {
    /// Default extraction box: the unit cube with a small margin.
    pub fn unit(res: usize) -> Self {
        Grid {
            res,
            lo: -0.55,
            hi: 0.55,
        }
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.res - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + self.spacing() * i as f64
    }

    /// Field values, x fastest.
    pub fn sample<F: Fn(&[f64; 3]) -> f64 + Sync>(&self, field: F) -> Vec<f64> {
        let r = self.res;
        let mut out = vec![0.0; r * r * r];
        out.par_chunks_mut(r * r).enumerate().for_each(|(k, slab)| {
            let z = self.coord(k);
            for j in 0..r {
                let y = self.coord(j);
                for i in 0..r {
                    slab[i + r * j] = field(&[self.coord(i), y, z]);
                }
            }
        });
        out
    }
}

/// Extracts the `threshold` isosurface; values above the threshold count as
/// inside and triangles face outward.
pub fn marching_cubes<F: Fn(&[f64; 3]) -> f64 + Sync>(
    field: F,
    grid: Grid,
    threshold: f64,
) -> Result<Mesh> {
    if grid.res < 2 {
        return Err(HitError::Config("marching cubes needs res >= 2".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(HitError::Config("threshold must lie in (0, 1)".into()));
    }
    let values = grid.sample(field);
    Ok(extract(&values, grid, threshold))
}

pub fn extract(values: &[f64], grid: Grid, threshold: f64) -> Mesh {
    let r = grid.res;
    let table = case_table();
    let idx = |i: usize, j: usize, k: usize| i + r * (j + r * k);
    let mut mesh = Mesh::default();
    // global grid edge (lower corner index, axis) -> vertex id
    let mut verts: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let mut case = 0usize;
                let mut corner_ids = [0usize; 8];
                for c in 0..8 {
                    let id = idx(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1));
                    corner_ids[c] = id;
                    if values[id] > threshold {
                        case |= 1 << c;
                    }
                }
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut vertex_of = |e: usize| -> u32 {
                    let (a, b) = EDGES[e];
                    let axis = (a ^ b).trailing_zeros() as usize;
                    let key = (corner_ids[a], axis);
                    *verts.entry(key).or_insert_with(|| {
                        let (va, vb) = (values[corner_ids[a]], values[corner_ids[b]]);
                        let t = ((threshold - va) / (vb - va)).clamp(0.0, 1.0);
                        let pa = corner_pos(a);
                        let p = [0, 1, 2].map(|d| {
                            let base = [i, j, k][d] as f64 + pa[d];
                            let step = if d == axis { t } else { 0.0 };
                            grid.lo + grid.spacing() * (base + step)
                        });
                        mesh.vertices.push(p);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                for t in tris {
                    let tri = [vertex_of(t[0]), vertex_of(t[1]), vertex_of(t[2])];
                    mesh.triangles.push(tri);
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(case_table()[0].is_empty());
        assert!(case_table()[255].is_empty());
        assert_eq!(case_table()[1].len(), 1);
        // one face's worth of corners inside: a single quad
        assert_eq!(case_table()[0b0000_1111].len(), 2);
    }

    #[test]
    fn complementary_cases_have_equal_triangle_counts_when_unambiguous() {
        let t = case_table();
        for c in 0..256usize {
            let loops = |case: usize| t[case].len();
            if c.count_ones() == 1 {
                assert_eq!(loops(c), 1);
                assert_eq!(loops(255 - c), 1);
            }
        }
    }

    #[test]
    fn sphere_is_closed_genus_zero() {
        let m = marching_cubes(
            |p: &[f64; 3]| 0.4 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() + 0.5,
            Grid::unit(24),
            0.5,
        )
        .unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.4f64.powi(3);
        assert!((m.signed_volume() - exact).abs() < 0.03 * exact, "{}", m.signed_volume());
    }

    #[test]
    fn zero_field_is_empty() {
        let m = marching_cubes(|_: &[f64; 3]| 0.0, Grid::unit(8), 0.5).unwrap();
        assert!(m.is_empty());
    }
}
