// Shared oracles and fixtures for the integration tests. Nothing here calls
// into the grouping, planning or gradient code under test.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use attnprune::planner::{AllocGroup, BRUTE_FORCE_LIMIT};
use attnprune::scoring::{LayerScores, ScoreValues};
use attnprune::{
    generate_dataset, train, AttentionBlock, DataConfig, Execution, Granularity, HeadLayout, Matrix, Metric,
    ModelConfig, Pattern, Projection, PruneMask, PrunePlan, Sample, ScoreTable, Side, SynthDataset, ToyModel,
    TrainConfig,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Block output computed with explicit loops, head by head.
pub fn oracle_forward(b: &AttentionBlock, x: &Matrix) -> Matrix {
    let n = x.rows();
    let d = b.d();
    let (qk, vo) = (b.qk(), b.vo());
    let proj = |w: &Matrix, i: usize, r: usize| -> f64 {
        let mut s = 0.0;
        for j in 0..d {
            s += x.get(i, j) * w.get(r, j);
        }
        s
    };
    let mut z = vec![vec![0.0; vo.width()]; n];
    for h in 0..qk.heads {
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (t, l) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..qk.channels {
                    let r = h * qk.channels + c;
                    s += proj(b.w_q(), i, r) * proj(b.w_k(), t, r);
                }
                *l = s * b.scale();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..vo.channels {
                let r = h * vo.channels + c;
                let mut s = 0.0;
                for t in 0..n {
                    s += exps[t] / total * proj(b.w_v(), t, r);
                }
                z[i][r] = s;
            }
        }
    }
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let mut s = 0.0;
            for r in 0..vo.width() {
                s += z[i][r] * b.w_o().get(j, r);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Copy of `b` with one entry of one projection shifted by `delta`.
pub fn nudge(b: &AttentionBlock, p: Projection, idx: usize, delta: f64) -> AttentionBlock {
    let mut m = [b.w_q().clone(), b.w_k().clone(), b.w_v().clone(), b.w_o().clone()];
    let slot = Projection::ALL.iter().position(|&q| q == p).unwrap();
    m[slot].data_mut()[idx] += delta;
    let [w_q, w_k, w_v, w_o] = m;
    AttentionBlock::new(b.d(), b.qk(), b.vo(), w_q, w_k, w_v, w_o, b.scale()).unwrap()
}

pub fn with_block(model: &ToyModel, layer: usize, block: AttentionBlock) -> ToyModel {
    let mut blocks = model.blocks().to_vec();
    blocks[layer] = block;
    ToyModel::from_parts(
        model.input_proj().clone(),
        blocks,
        model.classifier().clone(),
        model.baseline().to_vec(),
    )
    .unwrap()
}

/// Per layer, `[qk, vo]` channel Fisher scores from central-difference
/// gradients: mean over samples of the squared loss derivative, summed over
/// every weight a channel owns.
pub fn fd_fisher(model: &ToyModel, samples: &[Sample], step: f64) -> Vec<[Vec<Vec<f64>>; 2]> {
    let mut out = Vec::new();
    for (l, b) in model.blocks().iter().enumerate() {
        let mut per_proj = Vec::new();
        for p in Projection::ALL {
            let w = b.projection(p);
            let mut fisher = vec![0.0; w.len()];
            for (idx, f) in fisher.iter_mut().enumerate() {
                let plus = with_block(model, l, nudge(b, p, idx, step));
                let minus = with_block(model, l, nudge(b, p, idx, -step));
                for s in samples {
                    let g = (plus.loss(&s.tokens, s.label).unwrap() - minus.loss(&s.tokens, s.label).unwrap())
                        / (2.0 * step);
                    *f += g * g;
                }
                *f /= samples.len() as f64;
            }
            per_proj.push(Matrix::from_vec(w.rows(), w.cols(), fisher).unwrap());
        }
        let row_sum = |m: &Matrix, r: usize| m.row(r).iter().sum::<f64>();
        let col_sum = |m: &Matrix, c: usize| m.col(c).iter().sum::<f64>();
        let qk: Vec<Vec<f64>> = (0..b.qk().heads)
            .map(|h| {
                (0..b.qk().channels)
                    .map(|c| {
                        let r = h * b.qk().channels + c;
                        row_sum(&per_proj[0], r) + row_sum(&per_proj[1], r)
                    })
                    .collect()
            })
            .collect();
        let vo: Vec<Vec<f64>> = (0..b.vo().heads)
            .map(|h| {
                (0..b.vo().channels)
                    .map(|c| {
                        let r = h * b.vo().channels + c;
                        row_sum(&per_proj[2], r) + col_sum(&per_proj[3], r)
                    })
                    .collect()
            })
            .collect();
        out.push([qk, vo]);
    }
    out
}

fn random_subset<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// A random plan that respects `pattern`, removes at least one group
/// somewhere when the model allows it, and never empties a side.
pub fn random_plan<R: Rng>(model: &ToyModel, pattern: Pattern, rng: &mut R) -> PrunePlan {
    let removable = model.blocks().iter().any(|b| match pattern {
        Pattern::EntireHead => b.qk().heads > 1,
        _ => b.qk().channels > 1 || b.vo().channels > 1,
    });
    if !removable {
        return PrunePlan::empty(pattern, model.blocks().len());
    }
    loop {
        let mut plan = PrunePlan::empty(pattern, model.blocks().len());
        for (mask, b) in plan.masks.iter_mut().zip(model.blocks()) {
            fill_mask(mask, b, pattern, rng);
        }
        if !plan.is_empty() {
            return plan;
        }
    }
}

fn fill_mask<R: Rng>(mask: &mut PruneMask, b: &AttentionBlock, pattern: Pattern, rng: &mut R) {
    let (qk, vo) = (b.qk(), b.vo());
    match pattern {
        Pattern::EntireHead => {
            let k = rng.random_range(0..qk.heads);
            for h in random_subset(rng, qk.heads, k) {
                mask.remove_head(h, qk, vo);
            }
        }
        Pattern::SameChannel => {
            for (side, layout) in [(Side::Qk, qk), (Side::Vo, vo)] {
                let k = rng.random_range(0..layout.channels);
                let chans = random_subset(rng, layout.channels, k);
                for h in 0..layout.heads {
                    for &c in &chans {
                        mask.removed_mut(side).insert((h, c));
                    }
                }
            }
        }
        Pattern::PerHead => {
            for (side, layout) in [(Side::Qk, qk), (Side::Vo, vo)] {
                let k = rng.random_range(0..layout.channels);
                for h in 0..layout.heads {
                    for c in random_subset(rng, layout.channels, k) {
                        mask.removed_mut(side).insert((h, c));
                    }
                }
            }
        }
    }
}

pub fn random_config<R: Rng>(rng: &mut R) -> ModelConfig {
    ModelConfig {
        d_in: rng.random_range(2..6),
        d: rng.random_range(3..9),
        heads: rng.random_range(1..5),
        channels: rng.random_range(2..5),
        layers: rng.random_range(1..4),
        n_classes: rng.random_range(2..5),
    }
}

/// Groups removed by a mask, as (side, head, channel) triples.
pub fn removed_set(mask: &PruneMask) -> BTreeSet<(Side, usize, usize)> {
    Side::BOTH
        .iter()
        .flat_map(|&s| mask.removed(s).iter().map(move |&(h, c)| (s, h, c)))
        .collect()
}

pub fn layout_of(b: &AttentionBlock, side: Side) -> HeadLayout {
    b.layout(side)
}

/// The frozen toy setup for the prune/fine-tune loop: 2560 samples (80/10/10),
/// the default model architecture, and a 10-epoch warm-up from seed 0.
pub fn recovery_fixture() -> (ToyModel, SynthDataset) {
    let data = generate_dataset(&DataConfig::with_total(3, 2560, 8)).unwrap();
    let mut model = ToyModel::init(&ModelConfig::default(), 0).unwrap();
    let warmup = TrainConfig {
        epochs: 10,
        lr: 1e-3,
        batch_size: 32,
        seed: 0,
    };
    train(&mut model, &data.train, &warmup, Execution::default()).unwrap();
    (model, data)
}

/// Channel-granularity table with equal head counts everywhere, so every
/// (layer, side) unit costs the same.
pub fn random_table<R: Rng>(r: &mut R, integer: bool) -> ScoreTable {
    loop {
        let layers_n = r.random_range(1..4);
        let heads = r.random_range(1..4);
        let d = r.random_range(2..6);
        let layers: Vec<LayerScores> = (0..layers_n)
            .map(|_| {
                let qk = HeadLayout::new(heads, r.random_range(2..6));
                let vo = HeadLayout::new(heads, r.random_range(2..6));
                let mut draw = |layout: HeadLayout| -> Vec<Vec<f64>> {
                    (0..layout.heads)
                        .map(|_| {
                            (0..layout.channels)
                                .map(|_| {
                                    if integer {
                                        r.random_range(0..20) as f64
                                    } else {
                                        r.random::<f64>()
                                    }
                                })
                                .collect()
                        })
                        .collect()
                };
                let values = ScoreValues::Channel {
                    qk: draw(qk),
                    vo: draw(vo),
                };
                LayerScores {
                    d,
                    qk,
                    vo,
                    baseline: 2 * d * (qk.width() + vo.width()),
                    values,
                }
            })
            .collect();
        let units: usize = layers.iter().map(|l| l.qk.channels - 1 + l.vo.channels - 1).sum();
        if units <= BRUTE_FORCE_LIMIT {
            return ScoreTable {
                metric: Metric::L2,
                granularity: Granularity::Channel,
                layers,
            };
        }
    }
}

pub fn alloc_groups(t: &ScoreTable) -> Vec<AllocGroup> {
    let mut out = Vec::new();
    for (l, layer) in t.layers.iter().enumerate() {
        for side in Side::BOTH {
            out.push(AllocGroup {
                layer: l,
                side,
                scores: layer.channel_scores(side).unwrap().to_vec(),
                unit_cost: 2 * layer.d * layer.layout(side).heads,
            });
        }
    }
    out
}

/// Tiny model and 8 samples for the Fisher oracle.
pub fn fisher_fixture() -> (ToyModel, Vec<Sample>) {
    let cfg = ModelConfig {
        d_in: 3,
        d: 4,
        heads: 2,
        channels: 2,
        layers: 2,
        n_classes: 3,
    };
    let data = generate_dataset(&DataConfig {
        seed: 8,
        train: 8,
        val: 0,
        test: 0,
        tokens: 4,
        d_in: 3,
        n_classes: 3,
    })
    .unwrap();
    (ToyModel::init(&cfg, 8).unwrap(), data.train)
}
