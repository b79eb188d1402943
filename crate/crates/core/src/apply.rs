//! Structural pruning: validating plans and physically deleting the rows and
//! columns they name.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use crate::attention::{AttentionBlock, HeadLayout, PruneMask, Side};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::planner::{Pattern, PrunePlan};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: usize,
    pub side: Option<Side>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Some(s) => write!(f, "layer {} {}: {}", self.layer, s, self.message),
            None => write!(f, "layer {}: {}", self.layer, self.message),
        }
    }
}

/// Checks pattern shape rules, index ranges and non-emptiness of a set of
/// masks against per-layer `(d, qk, vo)` layouts. Returns every violation.
pub fn validate_masks(
    pattern: Pattern,
    masks: &[PruneMask],
    layouts: &[(usize, HeadLayout, HeadLayout)],
) -> Vec<Violation> {
    let mut out = Vec::new();
    if masks.len() != layouts.len() {
        out.push(Violation {
            layer: masks.len().min(layouts.len()),
            side: None,
            message: format!("plan has {} layers, model has {}", masks.len(), layouts.len()),
        });
        return out;
    }
    for (l, (mask, &(_, qk, vo))) in masks.iter().zip(layouts).enumerate() {
        let mut v = |side: Option<Side>, message: String| out.push(Violation { layer: l, side, message });
        let mut in_range = true;
        for (side, layout) in [(Side::Qk, qk), (Side::Vo, vo)] {
            for &(h, c) in mask.removed(side) {
                if h >= layout.heads || c >= layout.channels {
                    v(Some(side), format!("index (head {h}, channel {c}) out of range for {}x{}", layout.heads, layout.channels));
                    in_range = false;
                }
            }
            if mask.removed(side).len() >= layout.width() {
                v(Some(side), "removes every channel of the side".into());
            }
        }
        if !in_range {
            continue;
        }
        match pattern {
            Pattern::EntireHead => {
                let heads = |side: Side| -> BTreeSet<usize> { mask.removed(side).iter().map(|&(h, _)| h).collect() };
                let (hq, hv) = (heads(Side::Qk), heads(Side::Vo));
                if hq != hv {
                    v(None, format!("QK removes heads {hq:?} but VO removes heads {hv:?}"));
                }
                if qk.heads != vo.heads {
                    v(None, format!("head counts differ: {} vs {}", qk.heads, vo.heads));
                }
                for (side, layout, hs) in [(Side::Qk, qk, &hq), (Side::Vo, vo, &hv)] {
                    for &h in hs {
                        let n = mask.removed(side).iter().filter(|&&(hh, _)| hh == h).count();
                        if n != layout.channels {
                            v(Some(side), format!("partial head {h}: {n} of {} channels", layout.channels));
                        }
                    }
                }
            }
            Pattern::SameChannel => {
                for (side, layout) in [(Side::Qk, qk), (Side::Vo, vo)] {
                    let sets = per_head_sets(mask, side, layout);
                    if sets.windows(2).any(|w| w[0] != w[1]) {
                        v(Some(side), "channel indices differ across heads".into());
                    }
                }
            }
            Pattern::PerHead => {
                for (side, layout) in [(Side::Qk, qk), (Side::Vo, vo)] {
                    let counts: Vec<usize> = per_head_sets(mask, side, layout).iter().map(BTreeSet::len).collect();
                    if counts.windows(2).any(|w| w[0] != w[1]) {
                        v(Some(side), format!("unequal per-head counts {counts:?}"));
                    }
                }
            }
        }
    }
    out
}

fn per_head_sets(mask: &PruneMask, side: Side, layout: HeadLayout) -> Vec<BTreeSet<usize>> {
    let mut sets = vec![BTreeSet::new(); layout.heads];
    for &(h, c) in mask.removed(side) {
        sets[h].insert(c);
    }
    sets
}

pub fn model_layouts(model: &ToyModel) -> Vec<(usize, HeadLayout, HeadLayout)> {
    model.blocks().iter().map(|b| (b.d(), b.qk(), b.vo())).collect()
}

pub fn validate_plan(model: &ToyModel, plan: &PrunePlan) -> Vec<Violation> {
    validate_masks(plan.pattern, &plan.masks, &model_layouts(model))
}

fn prune_block(block: &AttentionBlock, mask: &PruneMask, pattern: Pattern) -> Result<AttentionBlock> {
    if mask.is_empty() {
        return Ok(block.clone());
    }
    let keep = |side: Side| -> Vec<usize> {
        let layout = block.layout(side);
        (0..layout.width())
            .filter(|&r| !mask.removed(side).contains(&(r / layout.channels, r % layout.channels)))
            .collect()
    };
    let new_layout = |side: Side| -> HeadLayout {
        let layout = block.layout(side);
        let removed = mask.removed(side);
        match pattern {
            Pattern::EntireHead => {
                let heads: BTreeSet<usize> = removed.iter().map(|&(h, _)| h).collect();
                HeadLayout::new(layout.heads - heads.len(), layout.channels)
            }
            _ => HeadLayout::new(layout.heads, layout.channels - removed.len() / layout.heads),
        }
    };
    block.restructure(&keep(Side::Qk), &keep(Side::Vo), new_layout(Side::Qk), new_layout(Side::Vo))
}

/// Deletes every row/column named by `plan`, keeping survivors in order.
/// Head and channel counts shrink accordingly; `scale` is untouched.
pub fn apply_plan(model: &ToyModel, plan: &PrunePlan) -> Result<ToyModel> {
    let violations = validate_plan(model, plan);
    if !violations.is_empty() {
        return Err(Error::InvalidPlan(violations));
    }
    let blocks = model
        .blocks()
        .iter()
        .zip(&plan.masks)
        .map(|(b, m)| prune_block(b, m, plan.pattern))
        .collect::<Result<Vec<_>>>()?;
    Ok(model.with_blocks(blocks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSparsity {
    pub layer: usize,
    pub original_params: usize,
    pub pruned_params: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    /// Ordered from the input to the output of the network.
    pub layers: Vec<LayerSparsity>,
    pub original_params: usize,
    pub pruned_params: usize,
    pub total: f64,
}

pub fn sparsity_report(original: &ToyModel, pruned: &ToyModel) -> Result<SparsityReport> {
    if original.blocks().len() != pruned.blocks().len() {
        return Err(Error::InvalidArgument(format!(
            "layer count mismatch: {} vs {}",
            original.blocks().len(),
            pruned.blocks().len()
        )));
    }
    let layers: Vec<LayerSparsity> = original
        .blocks()
        .iter()
        .zip(pruned.blocks())
        .enumerate()
        .map(|(layer, (o, p))| LayerSparsity {
            layer,
            original_params: o.param_count(),
            pruned_params: p.param_count(),
            sparsity: 1.0 - p.param_count() as f64 / o.param_count() as f64,
        })
        .collect();
    let original_params: usize = layers.iter().map(|l| l.original_params).sum();
    let pruned_params: usize = layers.iter().map(|l| l.pruned_params).sum();
    Ok(SparsityReport {
        layers,
        original_params,
        pruned_params,
        total: (original_params - pruned_params) as f64 / original_params as f64,
    })
}

impl SparsityReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\toriginal_params\tpruned_params\tsparsity\n");
        for l in &self.layers {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", l.layer, l.original_params, l.pruned_params, l.sparsity);
        }
        let _ = writeln!(out, "total\t{}\t{}\t{:.6}", self.original_params, self.pruned_params, self.total);
        out
    }

    /// Two-column data for a per-layer bar plot.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("layer\tsparsity\n");
        for l in &self.layers {
            let _ = writeln!(out, "{}\t{}", l.layer, l.sparsity);
        }
        out
    }
}
