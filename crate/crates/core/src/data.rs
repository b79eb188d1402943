//! Synthetic classification task labelled by a frozen random teacher.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ToyModel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `n × d_in` token matrix.
    pub tokens: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub tokens: usize,
    pub d_in: usize,
    pub n_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 3,
            train: 2048,
            val: 256,
            test: 256,
            tokens: 16,
            d_in: 16,
            n_classes: 8,
        }
    }
}

impl DataConfig {
    /// Splits a total sample count 80/10/10.
    pub fn with_total(seed: u64, total: usize, n_classes: usize) -> Self {
        let val = total / 10;
        let test = total / 10;
        DataConfig {
            seed,
            train: total - val - test,
            val,
            test,
            n_classes,
            ..DataConfig::default()
        }
    }

    /// Architecture of the labelling teacher.
    pub fn teacher_config(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.d_in,
            d: 32,
            heads: 4,
            channels: 8,
            layers: 2,
            n_classes: self.n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: DataConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Teacher attention weights share the student's initial scale, which keeps
/// the labelling function learnable at toy data sizes.
const TEACHER_ATTN_STD: f64 = 1.0;

/// The frozen teacher for a dataset seed.
pub fn teacher(config: &DataConfig) -> Result<ToyModel> {
    let mut t = ToyModel::init_with_scale(&config.teacher_config(), config.seed ^ 0x7eac_4e12, TEACHER_ATTN_STD)?;
    // Equal-norm classifier columns keep the label distribution near balanced.
    let c = t.classifier_mut();
    for k in 0..c.cols() {
        let norm = c.col(k).iter().map(|v| v * v).sum::<f64>().sqrt();
        for r in 0..c.rows() {
            let v = c.get(r, k) / norm;
            c.set(r, k, v);
        }
    }
    Ok(t)
}

pub fn generate_dataset(config: &DataConfig) -> Result<SynthDataset> {
    if config.n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            config.n_classes
        )));
    }
    if config.tokens == 0 || config.d_in == 0 {
        return Err(Error::InvalidArgument("tokens and d_in must be positive".into()));
    }
    let teacher = teacher(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .map(|_| {
                let tokens = Matrix::random_normal(config.tokens, config.d_in, 1.0, &mut rng);
                let label = teacher.predict(&tokens)?;
                Ok(Sample { tokens, label })
            })
            .collect()
    };
    let train = draw(config.train)?;
    let val = draw(config.val)?;
    let test = draw(config.test)?;
    Ok(SynthDataset {
        config: *config,
        train,
        val,
        test,
    })
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn class_histogram(&self, split: Split) -> Vec<usize> {
        histogram(self.split(split), self.config.n_classes)
    }

    /// Writes `manifest.txt` plus one binary file per split.
    ///
    /// Each split file holds, per sample, a little-endian `u64` label followed
    /// by `tokens × d_in` little-endian `f64` values.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let c = &self.config;
        let manifest = format!(
            "seed={}\ntrain={}\nval={}\ntest={}\ntokens={}\nd_in={}\nn_classes={}\n",
            c.seed, c.train, c.val, c.test, c.tokens, c.d_in, c.n_classes
        );
        fs::write(dir.join("manifest.txt"), manifest)?;
        for split in Split::ALL {
            let mut bytes = Vec::new();
            for s in self.split(split) {
                bytes.extend_from_slice(&(s.label as u64).to_le_bytes());
                for v in s.tokens.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::write(dir.join(format!("{}.bin", split.as_str())), bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let get = |key: &str| -> Result<u64> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| *k == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("dataset manifest missing {key}")))
        };
        let config = DataConfig {
            seed: get("seed")?,
            train: get("train")? as usize,
            val: get("val")? as usize,
            test: get("test")? as usize,
            tokens: get("tokens")? as usize,
            d_in: get("d_in")? as usize,
            n_classes: get("n_classes")? as usize,
        };
        let per_sample = 8 + 8 * config.tokens * config.d_in;
        let read = |split: Split, count: usize| -> Result<Vec<Sample>> {
            let bytes = fs::read(dir.join(format!("{}.bin", split.as_str())))?;
            if bytes.len() != count * per_sample {
                return Err(Error::CountMismatch {
                    expected: count * per_sample,
                    actual: bytes.len(),
                });
            }
            bytes
                .chunks_exact(per_sample)
                .map(|chunk| {
                    let label = u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes")) as usize;
                    if label >= config.n_classes {
                        return Err(Error::Parse(format!("label {label} out of range")));
                    }
                    let data = chunk[8..]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    Ok(Sample {
                        tokens: Matrix::from_vec(config.tokens, config.d_in, data)?,
                        label,
                    })
                })
                .collect()
        };
        Ok(SynthDataset {
            train: read(Split::Train, config.train)?,
            val: read(Split::Val, config.val)?,
            test: read(Split::Test, config.test)?,
            config,
        })
    }
}

pub fn histogram(samples: &[Sample], n_classes: usize) -> Vec<usize> {
    let mut h = vec![0; n_classes];
    for s in samples {
        h[s.label] += 1;
    }
    h
}
