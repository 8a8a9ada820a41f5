//! Checkpoint file: a plain-text manifest followed by little-endian `f64`
//! blobs.
//!
//! ```text
//! HITCKPT 1
//! step 1200
//! adam_step 1200
//! config 0 812
//! tensor param/encoder.w1 f64 3x32 812 96
//! ...
//! END
//! <data section>
//! ```
//!
//! `config` and `tensor` records give a byte offset into the data section
//! and a length (bytes for the config echo, elements for tensors).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::diffcore::Tensor;
use crate::error::{HitError, Result};
use crate::params::{Adam, ParamStore};

pub const MAGIC: &str = "HITCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub config: TrainConfig,
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(vec![]);
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_toml().into_bytes();
        let mut manifest = format!(
            "{MAGIC} {VERSION}\nstep {}\nadam_step {}\nconfig 0 {}\n",
            self.step,
            self.adam.step,
            config.len()
        );
        let mut data = config;
        let groups: [(&str, &[Tensor]); 3] = [
            ("param", self.params.tensors()),
            ("adam_m", &self.adam.m),
            ("adam_v", &self.adam.v),
        ];
        for (prefix, tensors) in groups {
            for (name, t) in self.params.names().iter().zip(tensors) {
                let _ = writeln!(
                    manifest,
                    "tensor {prefix}/{name} f64 {} {} {}",
                    shape_str(t.shape()),
                    data.len(),
                    t.len()
                );
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        manifest.push_str("END\n");
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| HitError::Checkpoint(format!("{}: {m}", path.display()));
        let end = find_end(bytes).ok_or_else(|| bad("manifest has no END line".into()))?;
        let manifest = std::str::from_utf8(&bytes[..end])
            .map_err(|_| bad("manifest is not UTF-8".into()))?;
        let data = &bytes[end + "END\n".len()..];
        let mut lines = manifest.lines();
        let header = lines.next().unwrap_or("");
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        if version != VERSION.to_string() {
            return Err(bad(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let mut step = None;
        let mut adam_step = None;
        let mut config = None;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("malformed line `{line}`")))
            };
            match f.first().copied() {
                Some("step") => step = Some(num(1)? as u64),
                Some("adam_step") => adam_step = Some(num(1)? as u64),
                Some("config") => {
                    let (off, len) = (num(1)?, num(2)?);
                    let raw = data
                        .get(off..off + len)
                        .ok_or_else(|| bad("truncated file (config)".into()))?;
                    let text = std::str::from_utf8(raw)
                        .map_err(|_| bad("config echo is not UTF-8".into()))?;
                    config = Some(
                        toml::from_str::<TrainConfig>(text)
                            .map_err(|e| bad(format!("config echo: {}", e.message())))?,
                    );
                }
                Some("tensor") => {
                    if f.len() != 6 || f[2] != "f64" {
                        return Err(bad(format!("malformed tensor line `{line}`")));
                    }
                    let shape = parse_shape(f[3]).ok_or_else(|| bad(format!("bad shape `{}`", f[3])))?;
                    let (off, len) = (num(4)?, num(5)?);
                    let raw = data
                        .get(off..off + len * 8)
                        .ok_or_else(|| bad(format!("truncated file (tensor {})", f[1])))?;
                    let values: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    let t = Tensor::new(&shape, values).map_err(|e| bad(e.to_string()))?;
                    let (group, name) = f[1]
                        .split_once('/')
                        .ok_or_else(|| bad(format!("bad tensor name `{}`", f[1])))?;
                    match group {
                        "param" => params.insert(name, t),
                        "adam_m" => m.push(t),
                        "adam_v" => v.push(t),
                        _ => return Err(bad(format!("unknown tensor group `{group}`"))),
                    }
                }
                _ => return Err(bad(format!("unknown manifest line `{line}`"))),
            }
        }
        let config = config.ok_or_else(|| bad("missing config echo".into()))?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer moments do not match parameters".into()));
        }
        for ((p, mi), vi) in params.tensors().iter().zip(&m).zip(&v) {
            if p.shape() != mi.shape() || p.shape() != vi.shape() {
                return Err(bad("optimizer moment shape mismatch".into()));
            }
        }
        Ok(Checkpoint {
            step: step.ok_or_else(|| bad("missing step".into()))?,
            adam: Adam {
                config: config.adam(),
                step: adam_step.ok_or_else(|| bad("missing adam_step".into()))?,
                m,
                v,
            },
            params,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| HitError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| HitError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Verifies the tensors against a model layout, naming the first
    /// mismatch.
    pub fn check_against(&self, cfg: &TrainConfig) -> Result<()> {
        cfg.model().check_params(&self.params)
    }
}

fn find_end(bytes: &[u8]) -> Option<usize> {
    let pat = b"\nEND\n";
    bytes
        .windows(pat.len())
        .position(|w| w == pat)
        .map(|p| p + 1)
}
