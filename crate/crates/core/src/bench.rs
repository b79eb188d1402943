//! Wall-clock and analytic FLOP measurements of pruned vs unpruned models.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::apply::apply_plan;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::ToyModel;
use crate::planner::{self, Pattern, Threshold};
use crate::scoring::Metric;
use crate::tensor::Matrix;
use crate::train::score_model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub samples: usize,
    pub tokens: usize,
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            samples: 64,
            tokens: 16,
            seed: 0,
        }
    }
}

impl BatchSpec {
    pub fn inputs(&self, d_in: usize) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.samples)
            .map(|_| Matrix::random_normal(self.tokens, d_in, 1.0, &mut rng))
            .collect()
    }
}

/// Seconds per full-batch forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub reps: usize,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub stddev: f64,
}

impl TimingStats {
    pub fn from_samples(times: &[f64]) -> Self {
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = sorted.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64;
        TimingStats {
            reps: n,
            min: sorted[0],
            median,
            mean,
            stddev: var.sqrt(),
        }
    }
}

pub fn forward_batch(model: &ToyModel, inputs: &[Matrix], exec: Execution) -> Result<Vec<Matrix>> {
    exec.map(inputs, |x| model.logits(x)).into_iter().collect()
}

/// Times `measured_reps` full-batch forwards after `warmup_reps` untimed ones.
pub fn bench_forward(
    model: &ToyModel,
    spec: &BatchSpec,
    warmup_reps: usize,
    measured_reps: usize,
    exec: Execution,
) -> Result<TimingStats> {
    if measured_reps == 0 {
        return Err(Error::InvalidArgument("need at least one measured repetition".into()));
    }
    let inputs = spec.inputs(model.d_in());
    for _ in 0..warmup_reps {
        std::hint::black_box(forward_batch(model, &inputs, exec)?);
    }
    let mut times = Vec::with_capacity(measured_reps);
    for _ in 0..measured_reps {
        let start = Instant::now();
        std::hint::black_box(forward_batch(model, &inputs, exec)?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(TimingStats::from_samples(&times))
}

/// Multiply and add operations of one forward pass over `tokens` tokens.
///
/// Counts every matrix product as `2·m·k·n`, plus the residual additions and
/// the mean pool. Softmax exponentials are not counted.
pub fn flop_count(model: &ToyModel, tokens: usize) -> u64 {
    let n = tokens as u64;
    let d = model.d() as u64;
    let mut flops = 2 * n * model.d_in() as u64 * d;
    for b in model.blocks() {
        let (dq, dv) = (b.qk().width() as u64, b.vo().width() as u64);
        flops += 2 * n * b.param_count() as u64;
        flops += 2 * n * n * dq;
        flops += 2 * n * n * dv;
        flops += n * d;
    }
    flops + n * d + 2 * d * model.n_classes() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target: f64,
    pub sparsity: f64,
    pub timing: TimingStats,
    pub flops: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub pattern: Pattern,
    pub metric: Metric,
    pub threshold: Threshold,
    pub batch: BatchSpec,
    pub warmup_reps: usize,
    pub measured_reps: usize,
    pub exec: Execution,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            pattern: Pattern::EntireHead,
            metric: Metric::L2,
            threshold: Threshold::Global,
            batch: BatchSpec::default(),
            warmup_reps: 2,
            measured_reps: 15,
            exec: Execution::Sequential,
        }
    }
}

/// Prunes a fresh copy of `model` to each level in one shot (no fine-tuning)
/// and benchmarks it. `fisher_data` is only read for the Fisher metric.
pub fn bench_sweep(model: &ToyModel, cfg: &SweepConfig, levels: &[f64], fisher_data: &[Sample]) -> Result<Vec<SweepRow>> {
    if levels.windows(2).any(|w| w[0] >= w[1]) || levels.iter().any(|l| !(0.0..0.7).contains(l)) {
        return Err(Error::InvalidArgument(format!(
            "levels must be ascending within [0, 0.7): {levels:?}"
        )));
    }
    let granularity = match cfg.pattern {
        Pattern::EntireHead => crate::scoring::Granularity::Head,
        _ => crate::scoring::Granularity::Channel,
    };
    let scores = if levels.iter().any(|&l| l > 0.0) {
        Some(score_model(model, cfg.metric, granularity, fisher_data, cfg.exec)?)
    } else {
        None
    };
    levels
        .iter()
        .map(|&level| {
            let pruned = match &scores {
                Some(s) if level > 0.0 => {
                    let p = planner::plan(s, cfg.pattern, cfg.threshold, level)?;
                    apply_plan(model, &p)?
                }
                _ => model.clone(),
            };
            Ok(SweepRow {
                target: level,
                sparsity: pruned.attention_sparsity(),
                timing: bench_forward(&pruned, &cfg.batch, cfg.warmup_reps, cfg.measured_reps, cfg.exec)?,
                flops: flop_count(&pruned, cfg.batch.tokens),
            })
        })
        .collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sparsity\tmedian_seconds\tflops\n");
    for r in rows {
        let _ = writeln!(out, "{:.6}\t{:.9}\t{}", r.sparsity, r.timing.median, r.flops);
    }
    out
}
