//! Fine-tuning, evaluation and the iterative prune → fine-tune loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::apply::{apply_plan, sparsity_report, validate_plan};
use crate::data::{Sample, SynthDataset};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{argmax, cross_entropy, ModelGrads, ToyModel};
use crate::planner::{self, Pattern, PrunePlan, Threshold};
use crate::scoring::{fisher_score, magnitude_score, Granularity, Metric, ScoreTable};
use crate::tensor::{Matrix, Norm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            lr: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the epoch's mini-batches, measured before each update.
    pub loss: f64,
    pub accuracy: f64,
}

/// Adam state for every trainable matrix.
struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(model: &ToyModel) -> Self {
        let zeros: Vec<Matrix> = ModelGrads::zeros_like(model).matrices().cloned().collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ToyModel, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((w, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads.matrices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mini-batch Adam on softmax cross-entropy. Per-sample gradients within a
/// batch may be computed in parallel; they are summed in sample order.
pub fn train(model: &mut ToyModel, samples: &[Sample], cfg: &TrainConfig, exec: Execution) -> Result<Vec<EpochStats>> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let current = &*model;
            let per_sample = exec.map(batch, |&i| current.loss_and_grads(&samples[i].tokens, samples[i].label));
            let mut total = ModelGrads::zeros_like(model);
            for g in per_sample {
                let g = g?;
                loss_sum += g.loss;
                correct += usize::from(g.correct);
                total.add_assign(&g.grads)?;
            }
            total.scale_in_place(1.0 / batch.len() as f64);
            adam.step(model, &total, cfg.lr);
        }
        let loss = loss_sum / samples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at epoch {epoch}")));
        }
        stats.push(EpochStats {
            epoch,
            loss,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(model: &ToyModel, samples: &[Sample], exec: Execution) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let results = exec.map(samples, |s| -> Result<(bool, f64)> {
        let logits = model.logits(&s.tokens)?;
        let (loss, _) = cross_entropy(logits.data(), s.label);
        Ok((argmax(logits.data()) == s.label, loss))
    });
    let mut correct = 0;
    let mut loss = 0.0;
    for r in results {
        let (ok, l) = r?;
        correct += usize::from(ok);
        loss += l;
    }
    Ok(EvalStats {
        correct,
        total: samples.len(),
        accuracy: correct as f64 / samples.len() as f64,
        loss: loss / samples.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub pattern: Pattern,
    pub metric: Metric,
    pub threshold: Threshold,
    /// Fraction of the original attention parameters removed per step.
    pub step_sparsity: f64,
    pub steps: usize,
    pub ft_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            pattern: Pattern::EntireHead,
            metric: Metric::Fisher,
            threshold: Threshold::Global,
            step_sparsity: 0.10,
            steps: 6,
            ft_epochs: 3,
            lr: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let total = self.step_sparsity * self.steps as f64;
        if self.steps > 0 && !(total > 0.0 && total < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "step sparsity {} over {} steps must stay within (0, 1)",
                self.step_sparsity, self.steps
            )));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }

    pub fn granularity(&self) -> Granularity {
        match self.pattern {
            Pattern::EntireHead => Granularity::Head,
            _ => Granularity::Channel,
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.pattern, self.threshold, self.metric)
    }
}

/// Scores the model with the configured metric; Fisher uses `fisher_data`.
pub fn score_model(
    model: &ToyModel,
    metric: Metric,
    granularity: Granularity,
    fisher_data: &[Sample],
    exec: Execution,
) -> Result<ScoreTable> {
    match metric {
        Metric::L1 => Ok(magnitude_score(model, granularity, Norm::L1)),
        Metric::L2 => Ok(magnitude_score(model, granularity, Norm::L2)),
        Metric::Fisher => {
            if fisher_data.is_empty() {
                return Err(Error::EmptySplit("fisher".into()));
            }
            fisher_score(model, fisher_data, granularity, exec)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub target: f64,
    pub achieved: f64,
    pub pre_train: EvalStats,
    pub post_train: EvalStats,
    pub pre_test: EvalStats,
    pub post_test: EvalStats,
    pub layer_sparsity: Vec<f64>,
    pub plan: Option<PrunePlan>,
}

impl StepReport {
    pub fn rounding_gap(&self) -> bool {
        self.plan.as_ref().is_some_and(PrunePlan::has_rounding_gap)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: PruneConfig,
    pub data_seed: u64,
    pub steps: Vec<StepReport>,
    pub final_model: ToyModel,
}

/// Repeats {score → plan → validate → apply → fine-tune → evaluate} for
/// `config.steps` steps. Step 0 is the unpruned baseline.
pub fn iterative_prune_finetune(
    model: &ToyModel,
    data: &SynthDataset,
    config: &PruneConfig,
    exec: Execution,
) -> Result<RunReport> {
    config.validate()?;
    let original = model.clone();
    let base_train = evaluate(model, &data.train, exec)?;
    let base_test = evaluate(model, &data.test, exec)?;
    let mut steps = vec![StepReport {
        step: 0,
        target: 0.0,
        achieved: model.attention_sparsity(),
        pre_train: base_train,
        post_train: base_train,
        pre_test: base_test,
        post_test: base_test,
        layer_sparsity: vec![0.0; model.blocks().len()],
        plan: None,
    }];
    let mut current = model.clone();
    for step in 1..=config.steps {
        let wrap = |e: Error| Error::StepFailed {
            step,
            source: Box::new(e),
        };
        let target = step as f64 * config.step_sparsity;
        let scores = score_model(&current, config.metric, config.granularity(), &data.val, exec).map_err(wrap)?;
        let plan = planner::plan(&scores, config.pattern, config.threshold, target).map_err(wrap)?;
        let violations = validate_plan(&current, &plan);
        if !violations.is_empty() {
            return Err(wrap(Error::InvalidPlan(violations)));
        }
        current = apply_plan(&current, &plan).map_err(wrap)?;
        let pre_train = evaluate(&current, &data.train, exec)?;
        let pre_test = evaluate(&current, &data.test, exec)?;
        if config.ft_epochs > 0 {
            let ft = TrainConfig {
                epochs: config.ft_epochs,
                lr: config.lr,
                batch_size: config.batch_size,
                seed: config.seed.wrapping_add(step as u64),
            };
            train(&mut current, &data.train, &ft, exec).map_err(wrap)?;
        }
        let post_train = evaluate(&current, &data.train, exec)?;
        let post_test = evaluate(&current, &data.test, exec)?;
        let report = sparsity_report(&original, &current)?;
        steps.push(StepReport {
            step,
            target,
            achieved: plan.achieved_sparsity,
            pre_train,
            post_train,
            pre_test,
            post_test,
            layer_sparsity: report.layers.iter().map(|l| l.sparsity).collect(),
            plan: Some(plan),
        });
    }
    Ok(RunReport {
        config: *config,
        data_seed: data.config.seed,
        steps,
        final_model: current,
    })
}

pub const STEP_HEADER: &str =
    "step\ttarget\tachieved\tpre_train_acc\tpost_train_acc\tpre_test_acc\tpost_test_acc\tpost_test_loss\tnote";

impl RunReport {
    /// Per-step rows followed by a `#`-prefixed summary block.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(STEP_HEADER);
        out.push('\n');
        for s in &self.steps {
            let note = if s.rounding_gap() { "rounding" } else { "-" };
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                s.step,
                s.target,
                s.achieved,
                s.pre_train.accuracy,
                s.post_train.accuracy,
                s.pre_test.accuracy,
                s.post_test.accuracy,
                s.post_test.loss,
                note
            );
        }
        let c = &self.config;
        let last = self.steps.last().expect("baseline step is always present");
        let _ = writeln!(out, "# pattern={}", c.pattern);
        let _ = writeln!(out, "# threshold={}", c.threshold);
        let _ = writeln!(out, "# metric={}", c.metric);
        let _ = writeln!(out, "# step_sparsity={} steps={} ft_epochs={} lr={} batch_size={}", c.step_sparsity, c.steps, c.ft_epochs, c.lr, c.batch_size);
        let _ = writeln!(out, "# seed={} data_seed={}", c.seed, self.data_seed);
        let _ = writeln!(
            out,
            "# final_sparsity={} final_test_correct={}/{}",
            last.achieved, last.post_test.correct, last.post_test.total
        );
        for s in self.steps.iter().filter(|s| s.rounding_gap()) {
            let _ = writeln!(
                out,
                "# rounding step={} declared={:.4} achieved={:.6}",
                s.step, s.target, s.achieved
            );
        }
        out
    }

    /// Per-layer sparsity after each step, input layer first.
    pub fn layers_tsv(&self) -> String {
        let mut out = String::from("step\tlayer\tsparsity\n");
        for s in &self.steps {
            for (l, v) in s.layer_sparsity.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{:.6}", s.step, l, v);
            }
        }
        out
    }
}
