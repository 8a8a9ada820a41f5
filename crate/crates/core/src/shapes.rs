//! Procedural multi-part shapes with exact analytic occupancy and per-part
//! labels, and occupancy query sampling.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::encoder::{PointCloud, HALF_EXTENT};
use crate::error::{HitError, Result};
use crate::seed::rng_for;

/// Std of the Gaussian jitter applied to near-surface queries.
pub const SURFACE_JITTER: f64 = 0.02;
/// Padding of the uniform query cube beyond the unit cube.
pub const QUERY_PAD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    /// Axis-aligned cylinder along `axis`.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
        axis: usize,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
}

fn perp(axis: usize) -> (usize, usize) {
    ((axis + 1) % 3, (axis + 2) % 3)
}

impl Primitive {
    pub fn contains(&self, x: &[f64; 3]) -> bool {
        match *self {
            Primitive::Box { center, half } => (0..3).all(|a| (x[a] - center[a]).abs() <= half[a]),
            Primitive::Cylinder {
                center,
                radius,
                half_height,
                axis,
            } => {
                let (u, v) = perp(axis);
                let du = x[u] - center[u];
                let dv = x[v] - center[v];
                (x[axis] - center[axis]).abs() <= half_height && du * du + dv * dv <= radius * radius
            }
            Primitive::Sphere { center, radius } => {
                let d: f64 = (0..3).map(|a| (x[a] - center[a]).powi(2)).sum();
                d <= radius * radius
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half, .. } => {
                8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
            }
            Primitive::Cylinder {
                radius,
                half_height,
                ..
            } => 2.0 * PI * radius * (radius + 2.0 * half_height),
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Primitive::Box { half, .. } => 8.0 * half[0] * half[1] * half[2],
            Primitive::Cylinder {
                radius,
                half_height,
                ..
            } => 2.0 * PI * radius * radius * half_height,
            Primitive::Sphere { radius, .. } => 4.0 / 3.0 * PI * radius.powi(3),
        }
    }

    /// Area-uniform point on the surface.
    pub fn sample_surface(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match *self {
            Primitive::Box { center, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = faces.iter().sum();
                let mut r = rng.random::<f64>() * total;
                let mut a = 2;
                for (i, f) in faces.iter().enumerate() {
                    if r < *f {
                        a = i;
                        break;
                    }
                    r -= f;
                }
                let mut p = [0.0; 3];
                for b in 0..3 {
                    p[b] = center[b] + half[b] * (2.0 * rng.random::<f64>() - 1.0);
                }
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                p[a] = center[a] + sign * half[a];
                p
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
                axis,
            } => {
                let (u, v) = perp(axis);
                let side = 2.0 * half_height;
                let cap = radius;
                let mut p = center;
                if rng.random::<f64>() * (side + cap) < side {
                    let th = 2.0 * PI * rng.random::<f64>();
                    p[u] += radius * th.cos();
                    p[v] += radius * th.sin();
                    p[axis] += half_height * (2.0 * rng.random::<f64>() - 1.0);
                } else {
                    let th = 2.0 * PI * rng.random::<f64>();
                    let r = radius * rng.random::<f64>().sqrt();
                    p[u] += r * th.cos();
                    p[v] += r * th.sin();
                    p[axis] += if rng.random::<bool>() { half_height } else { -half_height };
                }
                p
            }
            Primitive::Sphere { center, radius } => {
                let z = 2.0 * rng.random::<f64>() - 1.0;
                let th = 2.0 * PI * rng.random::<f64>();
                let r = (1.0 - z * z).sqrt();
                [
                    center[0] + radius * r * th.cos(),
                    center[1] + radius * r * th.sin(),
                    center[2] + radius * z,
                ]
            }
        }
    }

    fn to_line(&self, label: i64) -> String {
        match *self {
            Primitive::Box { center: c, half: h } => format!(
                "box {} {} {} {} {} {} {}",
                label, c[0], c[1], c[2], h[0], h[1], h[2]
            ),
            Primitive::Cylinder {
                center: c,
                radius,
                half_height,
                axis,
            } => format!(
                "cylinder {} {} {} {} {} {} {}",
                label, c[0], c[1], c[2], radius, half_height, axis
            ),
            Primitive::Sphere { center: c, radius } => {
                format!("sphere {} {} {} {} {}", label, c[0], c[1], c[2], radius)
            }
        }
    }
}

/// Union of labelled primitives. Where primitives overlap, the first one
/// listed owns the label.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShape {
    pub family: String,
    pub parts: Vec<(Primitive, i64)>,
}

impl SyntheticShape {
    pub fn occupancy(&self, x: &[f64; 3]) -> f64 {
        if self.parts.iter().any(|(p, _)| p.contains(x)) {
            1.0
        } else {
            0.0
        }
    }

    pub fn label_of(&self, x: &[f64; 3]) -> Option<i64> {
        self.parts.iter().find(|(p, _)| p.contains(x)).map(|(_, l)| *l)
    }

    pub fn labels(&self) -> Vec<i64> {
        let mut l: Vec<i64> = self.parts.iter().map(|(_, l)| *l).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Points on the surface of the union, labelled by the primitive they
    /// were drawn from.
    pub fn sample_surface(&self, n: usize, seed: u64) -> PointCloud {
        let mut rng = rng_for(seed, &[0x5u64]);
        let areas: Vec<f64> = self.parts.iter().map(|(p, _)| p.area()).collect();
        let total: f64 = areas.iter().sum();
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while points.len() < n {
            attempts += 1;
            let mut r = rng.random::<f64>() * total;
            let mut k = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if r < *a {
                    k = i;
                    break;
                }
                r -= a;
            }
            let (prim, label) = self.parts[k];
            let p = prim.sample_surface(&mut rng);
            let buried = self
                .parts
                .iter()
                .enumerate()
                .any(|(j, (q, _))| j != k && strictly_inside(q, &p));
            // give up on rejection for pathological layouts
            if buried && attempts < 50 * n {
                continue;
            }
            points.push(p.map(|c| c.clamp(-HALF_EXTENT, HALF_EXTENT)));
            labels.push(label);
        }
        PointCloud {
            points,
            labels: Some(labels),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# hit shape v1\nfamily {}\n", self.family);
        for (p, l) in &self.parts {
            s.push_str(&p.to_line(*l));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut family = None;
        let mut parts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: &str| HitError::format(path, format!("line {}: {m}", i + 1));
            let num = |k: usize| -> Result<f64> {
                f.get(k)
                    .ok_or_else(|| bad("missing field"))?
                    .parse()
                    .map_err(|_| bad("bad number"))
            };
            let v3 = |k: usize| -> Result<[f64; 3]> { Ok([num(k)?, num(k + 1)?, num(k + 2)?]) };
            match f[0] {
                "family" => family = Some(f.get(1).ok_or_else(|| bad("missing family"))?.to_string()),
                kind @ ("box" | "cylinder" | "sphere") => {
                    let label: i64 = f
                        .get(1)
                        .ok_or_else(|| bad("missing label"))?
                        .parse()
                        .map_err(|_| bad("bad label"))?;
                    let prim = match kind {
                        "box" => Primitive::Box {
                            center: v3(2)?,
                            half: v3(5)?,
                        },
                        "cylinder" => Primitive::Cylinder {
                            center: v3(2)?,
                            radius: num(5)?,
                            half_height: num(6)?,
                            axis: f
                                .get(7)
                                .and_then(|a| a.parse().ok())
                                .filter(|a| *a < 3)
                                .ok_or_else(|| bad("bad axis"))?,
                        },
                        _ => Primitive::Sphere {
                            center: v3(2)?,
                            radius: num(5)?,
                        },
                    };
                    parts.push((prim, label));
                }
                other => return Err(bad(&format!("unknown record `{other}`"))),
            }
        }
        let family = family.ok_or_else(|| HitError::format(path, "missing family line"))?;
        if parts.is_empty() {
            return Err(HitError::format(path, "shape has no primitives"));
        }
        Ok(SyntheticShape { family, parts })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| HitError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HitError::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn strictly_inside(p: &Primitive, x: &[f64; 3]) -> bool {
    const EPS: f64 = 1e-9;
    match *p {
        Primitive::Box { center, half } => {
            (0..3).all(|a| (x[a] - center[a]).abs() < half[a] - EPS)
        }
        Primitive::Cylinder {
            center,
            radius,
            half_height,
            axis,
        } => {
            let (u, v) = perp(axis);
            let d2 = (x[u] - center[u]).powi(2) + (x[v] - center[v]).powi(2);
            (x[axis] - center[axis]).abs() < half_height - EPS && d2.sqrt() < radius - EPS
        }
        Primitive::Sphere { center, radius } => {
            let d: f64 = (0..3).map(|a| (x[a] - center[a]).powi(2)).sum();
            d.sqrt() < radius - EPS
        }
    }
}

/// Every family name accepted by [`generate_shape`].
pub const FAMILIES: [&str; 8] = [
    "table",
    "table-3leg",
    "table-4leg",
    "table-5leg",
    "table-6leg",
    "dumbbell",
    "lamp",
    "nested-cubes",
];

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Table top plus `legs` cylindrical legs. Label 0 is the top, legs are
/// labelled 1..=legs.
pub fn table(legs: usize, rng: &mut ChaCha8Rng) -> SyntheticShape {
    let w = uniform(rng, 0.34, 0.42);
    let d = uniform(rng, 0.28, 0.4);
    let t = uniform(rng, 0.06, 0.09);
    let top_y = uniform(rng, 0.05, 0.2);
    let foot = -0.42;
    let r = uniform(rng, 0.06, 0.085);
    let phase = if legs == 4 { PI / 4.0 } else { PI / 2.0 };
    let mut parts = vec![(
        Primitive::Box {
            center: [0.0, top_y, 0.0],
            half: [w, t, d],
        },
        0,
    )];
    let leg_top = top_y - t;
    let hh = 0.5 * (leg_top - foot);
    for i in 0..legs {
        let a = phase + 2.0 * PI * i as f64 / legs as f64;
        // push legs toward the corners of the top
        let (ca, sa) = (a.cos(), a.sin());
        let k = 1.0 / ca.abs().max(sa.abs());
        let cx = (w - 1.5 * r) * (ca * k).clamp(-1.0, 1.0);
        let cz = (d - 1.5 * r) * (sa * k).clamp(-1.0, 1.0);
        parts.push((
            Primitive::Cylinder {
                center: [cx, foot + hh, cz],
                radius: r,
                half_height: hh,
                axis: 1,
            },
            i as i64 + 1,
        ));
    }
    SyntheticShape {
        family: format!("table-{legs}leg"),
        parts,
    }
}

/// Two spheres joined by a bar along x. Labels: left 0, bar 1, right 2.
pub fn dumbbell(rng: &mut ChaCha8Rng) -> SyntheticShape {
    let rs = uniform(rng, 0.14, 0.2);
    let cx = 0.45 - rs;
    let rb = uniform(rng, 0.05, 0.08);
    SyntheticShape {
        family: "dumbbell".into(),
        parts: vec![
            (
                Primitive::Sphere {
                    center: [-cx, 0.0, 0.0],
                    radius: rs,
                },
                0,
            ),
            (
                Primitive::Cylinder {
                    center: [0.0, 0.0, 0.0],
                    radius: rb,
                    half_height: cx,
                    axis: 0,
                },
                1,
            ),
            (
                Primitive::Sphere {
                    center: [cx, 0.0, 0.0],
                    radius: rs,
                },
                2,
            ),
        ],
    }
}

/// Disc base, vertical pole and a cylindrical shade. Labels 0, 1, 2.
pub fn lamp(rng: &mut ChaCha8Rng) -> SyntheticShape {
    let base_r = uniform(rng, 0.15, 0.22);
    let base_h = 0.03;
    let shade_r = uniform(rng, 0.2, 0.28);
    let shade_h = uniform(rng, 0.08, 0.13);
    let pole_r = uniform(rng, 0.025, 0.04);
    let bottom = -0.42;
    let top = 0.42;
    let pole_lo = bottom + 2.0 * base_h;
    let pole_hi = top - 2.0 * shade_h;
    SyntheticShape {
        family: "lamp".into(),
        parts: vec![
            (
                Primitive::Cylinder {
                    center: [0.0, bottom + base_h, 0.0],
                    radius: base_r,
                    half_height: base_h,
                    axis: 1,
                },
                0,
            ),
            (
                Primitive::Cylinder {
                    center: [0.0, 0.5 * (pole_lo + pole_hi), 0.0],
                    radius: pole_r,
                    half_height: 0.5 * (pole_hi - pole_lo),
                    axis: 1,
                },
                1,
            ),
            (
                Primitive::Cylinder {
                    center: [0.0, top - shade_h, 0.0],
                    radius: shade_r,
                    half_height: shade_h,
                    axis: 1,
                },
                2,
            ),
        ],
    }
}

/// One parent cube holding two child cubes that together fill it.
pub fn nested_cubes() -> SyntheticShape {
    SyntheticShape {
        family: "nested-cubes".into(),
        parts: vec![
            (
                Primitive::Box {
                    center: [-0.15, 0.0, 0.0],
                    half: [0.15, 0.3, 0.3],
                },
                0,
            ),
            (
                Primitive::Box {
                    center: [0.15, 0.0, 0.0],
                    half: [0.15, 0.3, 0.3],
                },
                1,
            ),
        ],
    }
}

pub fn generate_shape(family: &str, rng: &mut ChaCha8Rng) -> Result<SyntheticShape> {
    Ok(match family {
        "table" => {
            let legs = rng.random_range(3..=6);
            table(legs, rng)
        }
        "table-3leg" => table(3, rng),
        "table-4leg" => table(4, rng),
        "table-5leg" => table(5, rng),
        "table-6leg" => table(6, rng),
        "dumbbell" => dumbbell(rng),
        "lamp" => lamp(rng),
        "nested-cubes" => nested_cubes(),
        other => {
            return Err(HitError::Config(format!(
                "unknown shape family `{other}` (known: {})",
                FAMILIES.join(", ")
            )))
        }
    })
}

/// `n` shapes cycling through `families`; shape `i` depends only on
/// `(seed, i)`.
pub fn generate_dataset(n: usize, families: &[String], seed: u64) -> Result<Vec<SyntheticShape>> {
    if n == 0 {
        return Err(HitError::Config("dataset size must be >= 1".into()));
    }
    if families.is_empty() {
        return Err(HitError::Config("at least one shape family is required".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, &[0xDA7A, i as u64]);
            generate_shape(&families[i % families.len()], &mut rng)
        })
        .collect()
}

/// Occupancy queries with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<[f64; 3]>,
    pub gt_occupancy: Vec<f64>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points_tensor(&self) -> Tensor {
        Tensor::new(&[self.points.len(), 3], self.points.iter().flatten().copied().collect())
            .expect("Q x 3")
    }

    pub fn gt_tensor(&self) -> Tensor {
        Tensor::vector(self.gt_occupancy.clone())
    }

    /// Queries labelled inside.
    pub fn interior(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .zip(&self.gt_occupancy)
            .filter(|(_, o)| **o > 0.5)
            .map(|(p, _)| *p)
            .collect()
    }
}

/// Half uniform in the padded cube, half near the surface (surface sample
/// plus Gaussian jitter). With `near_surface = false` every query is
/// uniform.
pub fn sample_queries(shape: &SyntheticShape, q: usize, seed: u64, near_surface: bool) -> QueryBatch {
    let mut rng = rng_for(seed, &[0x0E5]);
    let bound = HALF_EXTENT + QUERY_PAD;
    let n_surface = if near_surface { q / 2 } else { 0 };
    let n_uniform = q - n_surface;
    let mut points: Vec<[f64; 3]> = (0..n_uniform)
        .map(|_| [0, 1, 2].map(|_| uniform(&mut rng, -bound, bound)))
        .collect();
    if n_surface > 0 {
        let surf = shape.sample_surface(n_surface, rng.random());
        let jitter = Normal::new(0.0, SURFACE_JITTER).expect("std");
        for p in surf.points {
            points.push([0, 1, 2].map(|a| (p[a] + jitter.sample(&mut rng)).clamp(-bound, bound)));
        }
    }
    let gt_occupancy = points.iter().map(|p| shape.occupancy(p)).collect();
    QueryBatch {
        points,
        gt_occupancy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_leg_table_has_five_labels() {
        let mut rng = rng_for(1, &[]);
        let t = table(4, &mut rng);
        assert_eq!(t.labels(), vec![0, 1, 2, 3, 4]);
        let pc = t.sample_surface(2000, 3);
        pc.validate().unwrap();
        let mut seen: Vec<i64> = pc.labels.unwrap();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn legs_are_separate_and_under_the_top() {
        for legs in 3..=6 {
            let t = table(legs, &mut rng_for(9, &[legs as u64]));
            let centers: Vec<[f64; 3]> = t.parts[1..]
                .iter()
                .map(|(p, _)| match p {
                    Primitive::Cylinder { center, .. } => *center,
                    _ => unreachable!(),
                })
                .collect();
            for i in 0..legs {
                for j in 0..i {
                    let d = ((centers[i][0] - centers[j][0]).powi(2)
                        + (centers[i][2] - centers[j][2]).powi(2))
                    .sqrt();
                    assert!(d > 0.15, "legs {i},{j} of {legs} too close: {d}");
                }
            }
        }
    }

    #[test]
    fn surface_samples_sit_on_the_boundary() {
        let s = dumbbell(&mut rng_for(4, &[]));
        let pc = s.sample_surface(500, 1);
        for p in &pc.points {
            let probe = |d: f64| {
                (0..3).any(|a| {
                    let mut q = *p;
                    q[a] += d;
                    s.occupancy(&q) == 0.0
                })
            };
            assert!(probe(1e-3) || probe(-1e-3), "{p:?} is not near the boundary");
        }
    }

    #[test]
    fn query_split_and_determinism() {
        let s = lamp(&mut rng_for(2, &[]));
        let b = sample_queries(&s, 2048, 11, true);
        assert_eq!(b.len(), 2048);
        assert_eq!(b, sample_queries(&s, 2048, 11, true));
        let inside = b.gt_occupancy.iter().filter(|o| **o == 1.0).count();
        assert!(inside > 100);
        let u = sample_queries(&s, 7, 11, false);
        assert_eq!(u.len(), 7);
    }

    #[test]
    fn dataset_is_reproducible_and_text_roundtrips() {
        let fams = vec!["table".to_string(), "dumbbell".to_string()];
        let a = generate_dataset(10, &fams, 7).unwrap();
        assert_eq!(a, generate_dataset(10, &fams, 7).unwrap());
        for s in &a {
            let back = SyntheticShape::parse(&s.to_text(), Path::new("mem")).unwrap();
            assert_eq!(&back, s);
        }
        assert!(generate_dataset(3, &["chair".to_string()], 1).is_err());
    }
}
