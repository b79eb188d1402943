//! Binary checkpoints: a fixed header, a plain-text manifest and a raw
//! little-endian `f64` payload.
//!
//! ```text
//! magic    8 bytes   "ATTNPRUN"
//! version  u32 LE
//! length   u64 LE    manifest byte length
//! manifest UTF-8     key=value lines, then the pruning history
//! payload  f64 LE    input_proj, per layer w_q w_k w_v w_o, classifier
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::attention::{AttentionBlock, HeadLayout};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::planner::PrunePlan;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"ATTNPRUN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    /// Plans applied since the model was created, oldest first.
    pub history: Vec<PrunePlan>,
    pub seeds: BTreeMap<String, u64>,
}

impl Checkpoint {
    pub fn new(model: ToyModel) -> Self {
        Checkpoint {
            model,
            history: Vec::new(),
            seeds: BTreeMap::new(),
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    fn manifest(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let _ = writeln!(out, "d_in={}", m.d_in());
        let _ = writeln!(out, "d={}", m.d());
        let _ = writeln!(out, "n_classes={}", m.n_classes());
        let _ = writeln!(out, "layers={}", m.blocks().len());
        for (l, (b, base)) in m.blocks().iter().zip(m.baseline()).enumerate() {
            let _ = writeln!(
                out,
                "layer.{l}=qk:{}x{} vo:{}x{} scale:{:016x} baseline:{}",
                b.qk().heads,
                b.qk().channels,
                b.vo().heads,
                b.vo().channels,
                b.scale().to_bits(),
                base
            );
        }
        for (k, v) in &self.seeds {
            let _ = writeln!(out, "seed.{k}={v}");
        }
        let _ = writeln!(out, "param_count={}", m.total_params());
        let _ = writeln!(out, "history={}", self.history.len());
        for (i, plan) in self.history.iter().enumerate() {
            let _ = writeln!(out, "plan.{i}.begin");
            out.push_str(&plan.to_text());
            let _ = writeln!(out, "plan.{i}.end");
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let mut bytes = Vec::with_capacity(20 + manifest.len() + 8 * self.model.total_params());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(manifest.as_bytes());
        let mut push = |m: &Matrix| {
            for v in m.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(self.model.input_proj());
        for b in self.model.blocks() {
            push(b.w_q());
            push(b.w_k());
            push(b.w_v());
            push(b.w_o());
        }
        push(self.model.classifier());
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::CountMismatch {
                expected: 20,
                actual: bytes.len(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let manifest_end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(Error::CountMismatch {
            expected: 20 + len,
            actual: bytes.len(),
        })?;
        let manifest = std::str::from_utf8(&bytes[20..manifest_end])
            .map_err(|_| Error::Parse("manifest is not UTF-8".into()))?;
        let parsed = Manifest::parse(manifest)?;

        let payload = &bytes[manifest_end..];
        if payload.len() != parsed.param_count * 8 {
            return Err(Error::CountMismatch {
                expected: parsed.param_count * 8,
                actual: payload.len(),
            });
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
            let data: Vec<f64> = values.by_ref().take(rows * cols).collect();
            Matrix::from_vec(rows, cols, data).map_err(|_| Error::CountMismatch {
                expected: parsed.param_count * 8,
                actual: payload.len(),
            })
        };
        let d = parsed.d;
        let input_proj = take(parsed.d_in, d)?;
        let mut blocks = Vec::with_capacity(parsed.layers.len());
        for l in &parsed.layers {
            let w_q = take(l.qk.width(), d)?;
            let w_k = take(l.qk.width(), d)?;
            let w_v = take(l.vo.width(), d)?;
            let w_o = take(d, l.vo.width())?;
            blocks.push(AttentionBlock::new(d, l.qk, l.vo, w_q, w_k, w_v, w_o, l.scale)?);
        }
        let classifier = take(d, parsed.n_classes)?;
        let baseline = parsed.layers.iter().map(|l| l.baseline).collect();
        let model = ToyModel::from_parts(input_proj, blocks, classifier, baseline)?;
        if model.total_params() != parsed.param_count {
            return Err(Error::CountMismatch {
                expected: parsed.param_count * 8,
                actual: model.total_params() * 8,
            });
        }
        Ok(Checkpoint {
            model,
            history: parsed.history,
            seeds: parsed.seeds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct LayerEntry {
    qk: HeadLayout,
    vo: HeadLayout,
    scale: f64,
    baseline: usize,
}

struct Manifest {
    d_in: usize,
    d: usize,
    n_classes: usize,
    layers: Vec<LayerEntry>,
    seeds: BTreeMap<String, u64>,
    param_count: usize,
    history: Vec<PrunePlan>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let bad = |what: String| Error::Parse(format!("manifest: {what}"));
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seeds = BTreeMap::new();
        let mut plans: Vec<String> = Vec::new();
        let mut in_plan: Option<String> = None;
        for line in text.lines() {
            if let Some(buf) = in_plan.as_mut() {
                if line.starts_with("plan.") && line.ends_with(".end") {
                    plans.push(in_plan.take().unwrap_or_default());
                } else {
                    buf.push_str(line);
                    buf.push('\n');
                }
                continue;
            }
            if line.starts_with("plan.") && line.ends_with(".begin") {
                in_plan = Some(String::new());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line '{line}'")))?;
            if let Some(name) = k.strip_prefix("seed.") {
                seeds.insert(name.to_string(), v.parse().map_err(|_| bad(format!("bad seed '{v}'")))?);
            } else {
                fields.insert(k, v);
            }
        }
        if in_plan.is_some() {
            return Err(bad("unterminated plan block".into()));
        }
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .ok_or_else(|| bad(format!("missing {k}")))?
                .parse()
                .map_err(|_| bad(format!("bad {k}")))
        };
        let n_layers = num("layers")?;
        let layers = (0..n_layers)
            .map(|l| {
                let key = format!("layer.{l}");
                let entry = fields.get(key.as_str()).ok_or_else(|| bad(format!("missing {key}")))?;
                let parts: BTreeMap<&str, &str> = entry.split_whitespace().filter_map(|p| p.split_once(':')).collect();
                let layout = |k: &str| -> Result<HeadLayout> {
                    let (h, c) = parts
                        .get(k)
                        .and_then(|v| v.split_once('x'))
                        .ok_or_else(|| bad(format!("{key}: missing {k}")))?;
                    Ok(HeadLayout::new(
                        h.parse().map_err(|_| bad(format!("{key}: bad {k}")))?,
                        c.parse().map_err(|_| bad(format!("{key}: bad {k}")))?,
                    ))
                };
                let scale_bits = parts
                    .get("scale")
                    .and_then(|s| u64::from_str_radix(s, 16).ok())
                    .ok_or_else(|| bad(format!("{key}: bad scale")))?;
                Ok(LayerEntry {
                    qk: layout("qk")?,
                    vo: layout("vo")?,
                    scale: f64::from_bits(scale_bits),
                    baseline: parts
                        .get("baseline")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(format!("{key}: bad baseline")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let history = plans.iter().map(|p| PrunePlan::from_text(p)).collect::<Result<Vec<_>>>()?;
        if history.len() != num("history")? {
            return Err(bad("history count mismatch".into()));
        }
        Ok(Manifest {
            d_in: num("d_in")?,
            d: num("d")?,
            n_classes: num("n_classes")?,
            layers,
            seeds,
            param_count: num("param_count")?,
            history,
        })
    }
}
