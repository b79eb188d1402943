mod common;

use std::collections::BTreeSet;

use attnprune::planner::{self, brute_force_allocation, plan_per_head_greedy, AllocGroup};
use attnprune::scoring::magnitude_score;
use attnprune::{
    apply_plan, validate_plan, Error, Granularity, ModelConfig, Norm, Pattern, Side, Threshold, ToyModel,
};
use common::{alloc_groups, random_config, random_table, removed_set, rng};
use rand::Rng;

fn seed42_model() -> ToyModel {
    let cfg = ModelConfig {
        d_in: 4,
        d: 8,
        heads: 2,
        channels: 4,
        layers: 2,
        n_classes: 3,
    };
    ToyModel::init(&cfg, 42).unwrap()
}

#[test]
fn same_channel_global_matches_exhaustive_subset_search() {
    let model = seed42_model();
    let scores = magnitude_score(&model, Granularity::Channel, Norm::L2);
    // 2 layers × 2 sides × 4 channel indices = 16 candidates, each costing 2·d·heads
    let mut cands = Vec::new();
    for (l, layer) in scores.layers.iter().enumerate() {
        for side in Side::BOTH {
            let per_head = layer.channel_scores(side).unwrap();
            for c in 0..4 {
                let s: f64 = per_head.iter().map(|h| h[c]).sum();
                cands.push((l, side, c, s));
            }
        }
    }
    assert_eq!(cands.len(), 16);
    let unit = 2 * 8 * 2;
    let budget = (0.2 * scores.baseline_params() as f64).floor() as usize;
    let units = budget / unit;
    let mut best: Option<(f64, u32)> = None;
    for subset in 0u32..1 << 16 {
        if subset.count_ones() as usize != units {
            continue;
        }
        let mut per_group = [0usize; 4];
        let mut total = 0.0;
        for (i, &(l, side, _, s)) in cands.iter().enumerate() {
            if subset & (1 << i) != 0 {
                per_group[2 * l + side as usize] += 1;
                total += s;
            }
        }
        if per_group.contains(&4) {
            continue;
        }
        if best.is_none_or(|(b, _)| total < b) {
            best = Some((total, subset));
        }
    }
    let (best_score, best_subset) = best.unwrap();
    let plan = planner::plan(&scores, Pattern::SameChannel, Threshold::Global, 0.2).unwrap();
    let mut expected: Vec<BTreeSet<(Side, usize, usize)>> = vec![BTreeSet::new(); 2];
    for (i, &(l, side, c, _)) in cands.iter().enumerate() {
        if best_subset & (1 << i) != 0 {
            for h in 0..2 {
                expected[l].insert((side, h, c));
            }
        }
    }
    let got: Vec<_> = plan.masks.iter().map(removed_set).collect();
    assert_eq!(got, expected);
    assert!((plan.removed_score - best_score).abs() <= 1e-12 * best_score);
}

#[test]
fn per_head_greedy_equals_brute_force_optimum() {
    let mut r = rng(2024);
    let mut checked = 0;
    for i in 0..400 {
        let t = random_table(&mut r, i % 2 == 0);
        let target = r.random_range(0.05..0.7);
        let plan = match plan_per_head_greedy(&t, target, Threshold::Global) {
            Ok(p) => p,
            Err(Error::LayerExhausted { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        let groups = alloc_groups(&t);
        let unit = groups[0].unit_cost;
        let removed: usize = (0..t.layers.len()).map(|l| plan.removed_params(l, t.layers[l].d)).sum();
        let best = brute_force_allocation(&groups, removed / unit).unwrap().unwrap();
        if i % 2 == 0 {
            assert_eq!(plan.removed_score, best.cost, "instance {i}");
        } else {
            assert!((plan.removed_score - best.cost).abs() <= 1e-12 * best.cost.max(1.0), "instance {i}");
        }
        checked += 1;
    }
    assert!(checked >= 200, "only {checked} instances");
}

#[test]
fn brute_force_rejects_large_instances() {
    let g = AllocGroup {
        layer: 0,
        side: Side::Qk,
        scores: vec![vec![1.0; 26]],
        unit_cost: 1,
    };
    assert!(matches!(
        brute_force_allocation(&[g], 3),
        Err(Error::InstanceTooLarge { units: 25, limit: 24 })
    ));
}

#[test]
fn emitted_plans_always_validate_and_apply() {
    let mut r = rng(77);
    let mut emitted = 0;
    for _ in 0..12 {
        let cfg = random_config(&mut r);
        let model = ToyModel::init(&cfg, r.random()).unwrap();
        for pattern in Pattern::ALL {
            for threshold in Threshold::ALL {
                for norm in [Norm::L1, Norm::L2] {
                    let g = if pattern == Pattern::EntireHead {
                        Granularity::Head
                    } else {
                        Granularity::Channel
                    };
                    let scores = magnitude_score(&model, g, norm);
                    for pct in 1..=6 {
                        let Ok(plan) = planner::plan(&scores, pattern, threshold, pct as f64 / 10.0) else {
                            continue;
                        };
                        assert_eq!(validate_plan(&model, &plan), vec![]);
                        apply_plan(&model, &plan).unwrap();
                        emitted += 1;
                    }
                }
            }
        }
    }
    assert!(emitted > 300, "{emitted}");
}

#[test]
fn global_never_removes_more_score_than_local_at_equal_budget() {
    let model = seed42_model();
    for pattern in Pattern::ALL {
        let g = if pattern == Pattern::EntireHead {
            Granularity::Head
        } else {
            Granularity::Channel
        };
        let scores = magnitude_score(&model, g, Norm::L2);
        for pct in 1..=6 {
            let local = planner::plan(&scores, pattern, Threshold::Local, pct as f64 / 10.0).unwrap();
            let global = planner::plan(&scores, pattern, Threshold::Global, local.achieved_sparsity).unwrap();
            assert_eq!(global.achieved_sparsity, local.achieved_sparsity);
            assert!(global.removed_score <= local.removed_score + 1e-12, "{pattern} {pct}0%");
        }
    }
}
