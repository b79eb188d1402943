//! Toy transformer classifier: input projection, a stack of residual
//! attention blocks, mean pooling over tokens and a linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionBlock, BlockGrads, PruneMask};
use crate::error::{Error, Result, Shape};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub channels: usize,
    pub layers: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 16,
            d: 32,
            heads: 4,
            channels: 8,
            layers: 4,
            n_classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d == 0 || self.heads == 0 || self.channels == 0 || self.layers == 0 {
            return Err(Error::InvalidArgument(format!("all model dimensions must be positive: {self:?}")));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    input_proj: Matrix,
    blocks: Vec<AttentionBlock>,
    classifier: Matrix,
    /// Attention parameter count of each layer before any pruning.
    baseline: Vec<usize>,
}

/// Gradients of the classification loss for every trainable matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub input_proj: Matrix,
    /// `[w_q, w_k, w_v, w_o]` per layer.
    pub blocks: Vec<[Matrix; 4]>,
    pub classifier: Matrix,
}

impl ModelGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ModelGrads {
            input_proj: z(&model.input_proj),
            blocks: model
                .blocks
                .iter()
                .map(|b| [z(b.w_q()), z(b.w_k()), z(b.w_v()), z(b.w_o())])
                .collect(),
            classifier: z(&model.classifier),
        }
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.input_proj)
            .chain(self.blocks.iter().flat_map(|b| b.iter()))
            .chain(std::iter::once(&self.classifier))
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        std::iter::once(&mut self.input_proj)
            .chain(self.blocks.iter_mut().flat_map(|b| b.iter_mut()))
            .chain(std::iter::once(&mut self.classifier))
    }

    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for m in self.matrices_mut() {
            for v in m.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Per-sample loss value plus its gradients.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub correct: bool,
    pub grads: ModelGrads,
}

impl ToyModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_scale(config, seed, 1.0)
    }

    /// Like [`ToyModel::init`], with attention weights scaled by `attn_std`.
    pub fn init_with_scale(config: &ModelConfig, seed: u64, attn_std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_proj = Matrix::random_normal(config.d_in, config.d, 1.0 / (config.d_in as f64).sqrt(), &mut rng);
        let blocks: Vec<_> = (0..config.layers)
            .map(|_| AttentionBlock::random(config.d, config.heads, config.channels, attn_std, &mut rng))
            .collect();
        let classifier = Matrix::random_normal(config.d, config.n_classes, 1.0 / (config.d as f64).sqrt(), &mut rng);
        let baseline = blocks.iter().map(AttentionBlock::param_count).collect();
        Ok(ToyModel {
            input_proj,
            blocks,
            classifier,
            baseline,
        })
    }

    pub fn from_parts(
        input_proj: Matrix,
        blocks: Vec<AttentionBlock>,
        classifier: Matrix,
        baseline: Vec<usize>,
    ) -> Result<Self> {
        let d = input_proj.cols();
        if classifier.rows() != d || blocks.iter().any(|b| b.d() != d) {
            return Err(Error::InvalidLayout(format!(
                "inconsistent embed dimension: input projection {}, classifier {}",
                input_proj.shape(),
                classifier.shape()
            )));
        }
        if baseline.len() != blocks.len() {
            return Err(Error::InvalidLayout(format!(
                "{} baseline counts for {} layers",
                baseline.len(),
                blocks.len()
            )));
        }
        Ok(ToyModel {
            input_proj,
            blocks,
            classifier,
            baseline,
        })
    }

    pub fn d_in(&self) -> usize {
        self.input_proj.rows()
    }

    pub fn d(&self) -> usize {
        self.input_proj.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.cols()
    }

    pub fn blocks(&self) -> &[AttentionBlock] {
        &self.blocks
    }

    pub fn input_proj(&self) -> &Matrix {
        &self.input_proj
    }

    pub fn classifier(&self) -> &Matrix {
        &self.classifier
    }

    pub(crate) fn classifier_mut(&mut self) -> &mut Matrix {
        &mut self.classifier
    }

    pub fn baseline(&self) -> &[usize] {
        &self.baseline
    }

    pub fn attention_params(&self) -> usize {
        self.blocks.iter().map(AttentionBlock::param_count).sum()
    }

    pub fn baseline_attention_params(&self) -> usize {
        self.baseline.iter().sum()
    }

    pub fn total_params(&self) -> usize {
        self.input_proj.len() + self.attention_params() + self.classifier.len()
    }

    /// Fraction of the baseline attention parameters removed so far.
    pub fn attention_sparsity(&self) -> f64 {
        1.0 - self.attention_params() as f64 / self.baseline_attention_params() as f64
    }

    pub(crate) fn with_blocks(&self, blocks: Vec<AttentionBlock>) -> ToyModel {
        ToyModel {
            input_proj: self.input_proj.clone(),
            blocks,
            classifier: self.classifier.clone(),
            baseline: self.baseline.clone(),
        }
    }

    /// Mutable views of every trainable matrix, in [`ModelGrads::matrices`] order.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.input_proj];
        for b in &mut self.blocks {
            out.extend(b.projections_mut());
        }
        out.push(&mut self.classifier);
        out
    }

    fn check_tokens(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d_in() || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: x.shape(),
                right: Shape(x.rows().max(1), self.d_in()),
            });
        }
        Ok(())
    }

    /// Class logits (`1 × n_classes`) for one token matrix.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.check_tokens(x)?;
        let mut h = x.matmul(&self.input_proj)?;
        for b in &self.blocks {
            let a = b.forward(&h)?;
            h.add_assign(&a)?;
        }
        h.mean_rows().matmul(&self.classifier)
    }

    /// Logits with every layer's block replaced by its masked copy.
    pub fn logits_masked(&self, masks: &[PruneMask], x: &Matrix) -> Result<Matrix> {
        if masks.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks for {} layers",
                masks.len(),
                self.blocks.len()
            )));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(l, (b, m))| {
                m.check(b, l)?;
                b.masked(m)
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_blocks(blocks).logits(x)
    }

    pub fn predict(&self, x: &Matrix) -> Result<usize> {
        Ok(argmax(self.logits(x)?.data()))
    }

    /// Softmax cross-entropy loss and gradients for one labelled sample.
    pub fn loss_and_grads(&self, x: &Matrix, label: usize) -> Result<SampleGrad> {
        self.check_tokens(x)?;
        if label >= self.n_classes() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.n_classes()
            )));
        }
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.matmul(&self.input_proj)?;
        for b in &self.blocks {
            let (a, cache) = b.forward_cached(&h)?;
            let next = h.add(&a)?;
            hidden.push(h);
            caches.push(cache);
            h = next;
        }
        let pooled = h.mean_rows();
        let logits = pooled.matmul(&self.classifier)?;
        let (loss, g_logits) = cross_entropy(logits.data(), label);
        let correct = argmax(logits.data()) == label;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} (logits {:?})", logits.data())));
        }
        let g_logits = Matrix::from_vec(1, g_logits.len(), g_logits)?;

        let g_classifier = pooled.matmul_tn(&g_logits)?;
        let g_pooled = g_logits.matmul_nt(&self.classifier)?;
        let n = x.rows();
        let mut g_h = Matrix::zeros(n, self.d());
        for r in 0..n {
            for (o, g) in g_h.row_mut(r).iter_mut().zip(g_pooled.data()) {
                *o = g / n as f64;
            }
        }

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate().rev() {
            let BlockGrads { w_q, w_k, w_v, w_o, x: g_in } = b.backward_cached(&hidden[l], &caches[l], &g_h)?;
            g_h.add_assign(&g_in)?;
            block_grads.push([w_q, w_k, w_v, w_o]);
        }
        block_grads.reverse();
        let g_input = x.matmul_tn(&g_h)?;

        Ok(SampleGrad {
            loss,
            correct,
            grads: ModelGrads {
                input_proj: g_input,
                blocks: block_grads,
                classifier: g_classifier,
            },
        })
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, x: &Matrix, label: usize) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(cross_entropy(logits.data(), label).0)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Returns `(loss, d loss / d logits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}
