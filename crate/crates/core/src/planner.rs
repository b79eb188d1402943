//! Turns a [`ScoreTable`] and a sparsity target into a [`PrunePlan`].
//!
//! Sparsity is always measured against the attention parameters the model
//! had before any pruning, so a target of 0.3 means "30% of the original
//! attention parameters removed in total", whatever earlier steps removed.
//!
//! Global thresholds pool the candidate units of every layer and fill a
//! single budget rounded down to whole parameters; local thresholds give each
//! layer its own budget rounded to the nearest whole unit. Ties break on
//! (layer, side, head, channel) ascending.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use crate::attention::{HeadLayout, PruneMask, Side};
use crate::error::{Error, Result};
use crate::scoring::{LayerScores, ScoreTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    EntireHead,
    SameChannel,
    PerHead,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::EntireHead, Pattern::PerHead, Pattern::SameChannel];

    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::EntireHead => "entire-head",
            Pattern::SameChannel => "same-channel",
            Pattern::PerHead => "per-head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "entire-head" => Ok(Pattern::EntireHead),
            "same-channel" => Ok(Pattern::SameChannel),
            "per-head" => Ok(Pattern::PerHead),
            other => Err(Error::Parse(format!("unknown pattern '{other}'"))),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threshold {
    Global,
    Local,
}

impl Threshold {
    pub const ALL: [Threshold; 2] = [Threshold::Global, Threshold::Local];

    pub fn as_str(self) -> &'static str {
        match self {
            Threshold::Global => "global",
            Threshold::Local => "local",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Threshold::Global),
            "local" => Ok(Threshold::Local),
            other => Err(Error::Parse(format!("unknown threshold '{other}'"))),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub pattern: Pattern,
    /// One mask per layer, indexed against the layer's current layout.
    pub masks: Vec<PruneMask>,
    pub declared_sparsity: f64,
    pub achieved_sparsity: f64,
    /// Sum of the scores of every removed group.
    pub removed_score: f64,
    /// Rounding discrepancies and other non-fatal observations.
    pub notes: Vec<String>,
}

impl PrunePlan {
    pub fn empty(pattern: Pattern, layers: usize) -> Self {
        PrunePlan {
            pattern,
            masks: vec![PruneMask::default(); layers],
            declared_sparsity: 0.0,
            achieved_sparsity: 0.0,
            removed_score: 0.0,
            notes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masks.iter().all(PruneMask::is_empty)
    }

    /// Parameters removed from a layer with embed dimension `d`.
    pub fn removed_params(&self, layer: usize, d: usize) -> usize {
        let m = &self.masks[layer];
        2 * d * (m.qk_removed.len() + m.vo_removed.len())
    }

    /// True when the achieved sparsity misses the declared target.
    pub fn has_rounding_gap(&self) -> bool {
        (self.achieved_sparsity - self.declared_sparsity).abs() > 1e-9
    }

    /// For an entire-head plan, where each of the layer's `heads` ends up
    /// after removal (`None` for removed heads).
    pub fn head_remap(&self, layer: usize, heads: usize) -> Vec<Option<usize>> {
        let removed: BTreeSet<usize> = self.masks[layer].qk_removed.iter().map(|&(h, _)| h).collect();
        let mut next = 0;
        (0..heads)
            .map(|h| {
                if removed.contains(&h) {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    }

    /// Text form: two metadata comment lines, a header, one removal per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# pattern={} layers={} declared={} achieved={} removed_score={}",
            self.pattern,
            self.masks.len(),
            self.declared_sparsity,
            self.achieved_sparsity,
            self.removed_score
        );
        for note in &self.notes {
            let _ = writeln!(out, "# note {note}");
        }
        out.push_str("layer\tside\thead\tchannel\n");
        for (l, m) in self.masks.iter().enumerate() {
            for side in Side::BOTH {
                for (h, c) in m.removed(side) {
                    let _ = writeln!(out, "{l}\t{side}\t{h}\t{c}");
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut plan: Option<PrunePlan> = None;
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Parse(format!("plan line {}: {what}", i + 1));
            if let Some(note) = line.strip_prefix("# note ") {
                plan.as_mut().ok_or_else(|| bad("note before metadata"))?.notes.push(note.to_string());
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                let kv: Vec<(&str, &str)> = meta.split_whitespace().filter_map(|s| s.split_once('=')).collect();
                let get = |k: &str| {
                    kv.iter()
                        .find(|(key, _)| *key == k)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| bad(&format!("missing {k}")))
                };
                let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(&format!("bad {k}"))) };
                let layers: usize = get("layers")?.parse().map_err(|_| bad("bad layers"))?;
                let mut p = PrunePlan::empty(Pattern::parse(get("pattern")?)?, layers);
                p.declared_sparsity = num("declared")?;
                p.achieved_sparsity = num("achieved")?;
                p.removed_score = num("removed_score")?;
                plan = Some(p);
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                if line != "layer\tside\thead\tchannel" {
                    return Err(bad("expected header"));
                }
                saw_header = true;
                continue;
            }
            let p = plan.as_mut().ok_or_else(|| bad("removal before metadata"))?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let n = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(&format!("bad index '{s}'"))) };
            let l = n(cols[0])?;
            let side = Side::parse(cols[1])?;
            let mask = p.masks.get_mut(l).ok_or_else(|| bad("layer out of range"))?;
            mask.removed_mut(side).insert((n(cols[2])?, n(cols[3])?));
        }
        plan.ok_or_else(|| Error::Parse("plan has no metadata line".into()))
    }
}

/// A selectable structural unit.
#[derive(Debug, Clone)]
struct Unit {
    layer: usize,
    side: u8,
    index: usize,
    score: f64,
    cost: usize,
    removal: Vec<(Side, usize, usize)>,
}

impl Unit {
    fn order(&self, other: &Unit) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.layer.cmp(&other.layer))
            .then(self.side.cmp(&other.side))
            .then(self.index.cmp(&other.index))
    }
}

/// Global parameter budget still to remove, rounded down.
fn global_budget(scores: &ScoreTable, target: f64) -> usize {
    let baseline = scores.baseline_params();
    let already = baseline.saturating_sub(scores.current_params());
    let goal = (target * baseline as f64 + 1e-9).floor() as usize;
    goal.saturating_sub(already)
}

/// Units to remove from one layer under a local threshold, rounded to nearest.
fn local_units(layer: &LayerScores, target: f64, unit_cost: usize) -> usize {
    let already = layer.baseline.saturating_sub(layer.param_count()) as f64;
    let units = (target * layer.baseline as f64 - already) / unit_cost as f64;
    (units + 1e-9).round().max(0.0) as usize
}

fn check_target(target: f64) -> Result<()> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target sparsity {target} not in [0, 1)")));
    }
    Ok(())
}

/// Takes units in ascending order while they fit `budget`, never taking the
/// last unit of a capped group. Returns the chosen units.
///
/// `group_of` maps a unit to its capacity group and `caps[group]` is the
/// most units that group may lose.
fn select_units<'a>(
    sorted: &'a [Unit],
    mut budget: usize,
    group_of: impl Fn(&Unit) -> usize,
    caps: &[usize],
) -> Result<Vec<&'a Unit>> {
    let mut taken = vec![0usize; caps.len()];
    let mut chosen = Vec::new();
    let mut blocked: Vec<&Unit> = Vec::new();
    for u in sorted {
        if u.cost > budget {
            continue;
        }
        let g = group_of(u);
        if taken[g] >= caps[g] {
            blocked.push(u);
            continue;
        }
        taken[g] += 1;
        budget -= u.cost;
        chosen.push(u);
    }
    if let Some(u) = blocked.iter().find(|u| u.cost <= budget) {
        return Err(Error::LayerExhausted { layer: u.layer });
    }
    Ok(chosen)
}

fn finish(
    scores: &ScoreTable,
    pattern: Pattern,
    target: f64,
    chosen: &[&Unit],
    threshold: Threshold,
) -> PrunePlan {
    let mut plan = PrunePlan::empty(pattern, scores.layers.len());
    for u in chosen {
        for &(side, h, c) in &u.removal {
            plan.masks[u.layer].removed_mut(side).insert((h, c));
        }
    }
    plan.removed_score = chosen.iter().map(|u| u.score).sum();
    fill_sparsity(&mut plan, scores, target, threshold);
    plan
}

fn fill_sparsity(plan: &mut PrunePlan, scores: &ScoreTable, target: f64, threshold: Threshold) {
    let baseline = scores.baseline_params();
    let removed_before = baseline - scores.current_params();
    let removed_now: usize = scores
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| plan.removed_params(l, layer.d))
        .sum();
    plan.declared_sparsity = target;
    plan.achieved_sparsity = (removed_before + removed_now) as f64 / baseline as f64;
    if plan.has_rounding_gap() {
        plan.notes.push(format!(
            "rounding: {} threshold achieved {:.4} for a declared target of {:.4}",
            threshold, plan.achieved_sparsity, target
        ));
    }
}

fn entire_head_units(scores: &ScoreTable) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for (l, layer) in scores.layers.iter().enumerate() {
        if layer.qk.heads != layer.vo.heads {
            return Err(Error::HeadMismatch {
                qk: layer.qk.heads,
                vo: layer.vo.heads,
            });
        }
        let cost = 2 * layer.d * (layer.qk.channels + layer.vo.channels);
        for (h, s) in layer.head_scores().into_iter().enumerate() {
            let mut removal: Vec<_> = (0..layer.qk.channels).map(|c| (Side::Qk, h, c)).collect();
            removal.extend((0..layer.vo.channels).map(|c| (Side::Vo, h, c)));
            units.push(Unit {
                layer: l,
                side: 0,
                index: h,
                score: s,
                cost,
                removal,
            });
        }
    }
    Ok(units)
}

/// Removes whole heads from all four matrices.
pub fn plan_entire_head(scores: &ScoreTable, target: f64, threshold: Threshold) -> Result<PrunePlan> {
    check_target(target)?;
    let mut units = entire_head_units(scores)?;
    units.sort_by(Unit::order);
    let caps: Vec<usize> = scores.layers.iter().map(|l| l.qk.heads - 1).collect();
    let chosen = match threshold {
        Threshold::Global => select_units(&units, global_budget(scores, target), |u| u.layer, &caps)?,
        Threshold::Local => local_select(scores, &units, target, |u| u.layer, &caps)?,
    };
    Ok(finish(scores, Pattern::EntireHead, target, &chosen, threshold))
}

/// Runs [`select_units`] independently per layer with a rounded local budget.
fn local_select<'a>(
    scores: &ScoreTable,
    sorted: &'a [Unit],
    target: f64,
    group_of: impl Fn(&Unit) -> usize + Copy,
    caps: &[usize],
) -> Result<Vec<&'a Unit>> {
    let mut chosen = Vec::new();
    for (l, layer) in scores.layers.iter().enumerate() {
        let in_layer: Vec<Unit> = sorted.iter().filter(|u| u.layer == l).cloned().collect();
        let Some(unit_cost) = in_layer.iter().map(|u| u.cost).min() else {
            continue;
        };
        let k = local_units(layer, target, unit_cost);
        let capacity: usize = caps
            .iter()
            .enumerate()
            .filter(|(g, _)| in_layer.iter().any(|u| group_of(u) == *g))
            .map(|(_, c)| c)
            .sum();
        if k > capacity {
            return Err(Error::LayerExhausted { layer: l });
        }
        let picked = select_units(&in_layer, k * unit_cost, group_of, caps)?;
        let picked: BTreeSet<(u8, usize)> = picked.iter().map(|u| (u.side, u.index)).collect();
        chosen.extend(
            sorted
                .iter()
                .filter(|u| u.layer == l && picked.contains(&(u.side, u.index))),
        );
    }
    Ok(chosen)
}

/// Removes the same channel index from every head of a side. QK and VO
/// candidates compete in one pooled ranking.
pub fn plan_same_channel(scores: &ScoreTable, target: f64, threshold: Threshold) -> Result<PrunePlan> {
    check_target(target)?;
    let mut units = Vec::new();
    let mut caps = Vec::new();
    for (l, layer) in scores.layers.iter().enumerate() {
        for (si, side) in Side::BOTH.into_iter().enumerate() {
            let layout = layer.layout(side);
            let sums = layer.cross_head_sums(side).ok_or_else(|| {
                Error::InvalidArgument("same-channel planning needs channel-granularity scores".into())
            })?;
            for (c, s) in sums.into_iter().enumerate() {
                units.push(Unit {
                    layer: l,
                    side: si as u8,
                    index: c,
                    score: s,
                    cost: 2 * layout.heads * layer.d,
                    removal: (0..layout.heads).map(|h| (side, h, c)).collect(),
                });
            }
            caps.push(layout.channels - 1);
        }
    }
    units.sort_by(Unit::order);
    let group = |u: &Unit| 2 * u.layer + u.side as usize;
    let chosen = match threshold {
        Threshold::Global => select_units(&units, global_budget(scores, target), group, &caps)?,
        Threshold::Local => local_select(scores, &units, target, group, &caps)?,
    };
    Ok(finish(scores, Pattern::SameChannel, target, &chosen, threshold))
}

/// One (layer, side) of a per-head allocation problem.
#[derive(Debug, Clone)]
pub struct AllocGroup {
    pub layer: usize,
    pub side: Side,
    /// `[head][channel]` importance scores.
    pub scores: Vec<Vec<f64>>,
    /// Parameters removed by one unit (one channel in every head).
    pub unit_cost: usize,
}

impl AllocGroup {
    /// Each head's channel indices, cheapest first (ties by index).
    fn sorted_channels(&self) -> Vec<Vec<usize>> {
        self.scores
            .iter()
            .map(|head| {
                let mut idx: Vec<usize> = (0..head.len()).collect();
                idx.sort_by(|&a, &b| head[a].total_cmp(&head[b]).then(a.cmp(&b)));
                idx
            })
            .collect()
    }

    /// Marginal cost of the m-th unit, for m = 1..channels-1.
    fn marginals(&self) -> Vec<f64> {
        let order = self.sorted_channels();
        let channels = self.scores.first().map_or(0, Vec::len);
        (0..channels.saturating_sub(1))
            .map(|m| self.scores.iter().zip(&order).map(|(head, o)| head[o[m]]).sum())
            .collect()
    }
}

/// Result of a per-head allocation: units taken per group and their total score.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub counts: Vec<usize>,
    pub cost: f64,
}

/// Greedy allocation: repeatedly take the cheapest next marginal unit among
/// the groups whose unit still fits the remaining budget.
pub fn greedy_allocation(groups: &[AllocGroup], budget: usize) -> Result<Allocation> {
    let marginals: Vec<Vec<f64>> = groups.iter().map(AllocGroup::marginals).collect();
    let mut counts = vec![0usize; groups.len()];
    let mut remaining = budget;
    let mut cost = 0.0;
    loop {
        let mut best: Option<usize> = None;
        for (g, group) in groups.iter().enumerate() {
            if group.unit_cost > remaining || counts[g] >= marginals[g].len() {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => marginals[g][counts[g]] < marginals[b][counts[b]],
            };
            if better {
                best = Some(g);
            }
        }
        let Some(g) = best else { break };
        cost += marginals[g][counts[g]];
        counts[g] += 1;
        remaining -= groups[g].unit_cost;
    }
    if let Some(g) = groups
        .iter()
        .enumerate()
        .find(|(g, group)| group.unit_cost <= remaining && counts[*g] >= marginals[*g].len())
    {
        return Err(Error::LayerExhausted { layer: g.1.layer });
    }
    Ok(Allocation { counts, cost })
}

/// Largest instance [`brute_force_allocation`] accepts, in candidate units.
pub const BRUTE_FORCE_LIMIT: usize = 24;

/// Exhaustive search over per-group unit counts summing to `units`, each
/// group capped at `channels - 1`. Costs are computed from independently
/// sorted per-head scores.
pub fn brute_force_allocation(groups: &[AllocGroup], units: usize) -> Result<Option<Allocation>> {
    let caps: Vec<usize> = groups
        .iter()
        .map(|g| g.scores.first().map_or(0, Vec::len).saturating_sub(1))
        .collect();
    let total: usize = caps.iter().sum();
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            units: total,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    // prefix[g][m] = cost of taking m units from group g
    let prefix: Vec<Vec<f64>> = groups
        .iter()
        .zip(&caps)
        .map(|(g, &cap)| {
            let sorted: Vec<Vec<f64>> = g
                .scores
                .iter()
                .map(|h| {
                    let mut h = h.clone();
                    h.sort_by(f64::total_cmp);
                    h
                })
                .collect();
            (0..=cap)
                .map(|m| sorted.iter().map(|h| h[..m].iter().sum::<f64>()).sum())
                .collect()
        })
        .collect();

    let mut best: Option<Allocation> = None;
    let mut counts = vec![0usize; groups.len()];
    fn rec(
        g: usize,
        left: usize,
        caps: &[usize],
        prefix: &[Vec<f64>],
        counts: &mut Vec<usize>,
        best: &mut Option<Allocation>,
    ) {
        if g == caps.len() {
            if left == 0 {
                let cost = counts.iter().enumerate().map(|(i, &m)| prefix[i][m]).sum();
                if best.as_ref().is_none_or(|b| cost < b.cost) {
                    *best = Some(Allocation {
                        counts: counts.clone(),
                        cost,
                    });
                }
            }
            return;
        }
        for m in 0..=caps[g].min(left) {
            counts[g] = m;
            rec(g + 1, left - m, caps, prefix, counts, best);
        }
        counts[g] = 0;
    }
    rec(0, units, &caps, &prefix, &mut counts, &mut best);
    Ok(best)
}

fn per_head_groups(scores: &ScoreTable, layer_filter: Option<usize>) -> Result<Vec<AllocGroup>> {
    let mut groups = Vec::new();
    for (l, layer) in scores.layers.iter().enumerate() {
        if layer_filter.is_some_and(|f| f != l) {
            continue;
        }
        for side in Side::BOTH {
            let s = layer.channel_scores(side).ok_or_else(|| {
                Error::InvalidArgument("per-head planning needs channel-granularity scores".into())
            })?;
            groups.push(AllocGroup {
                layer: l,
                side,
                scores: s.to_vec(),
                unit_cost: 2 * layer.layout(side).heads * layer.d,
            });
        }
    }
    Ok(groups)
}

/// Removes an equal number of (possibly different) channels from every head
/// of a side, allocating the budget greedily by marginal score.
pub fn plan_per_head_greedy(scores: &ScoreTable, target: f64, threshold: Threshold) -> Result<PrunePlan> {
    check_target(target)?;
    let mut plan = PrunePlan::empty(Pattern::PerHead, scores.layers.len());
    let mut removed_score = 0.0;
    let mut apply = |groups: &[AllocGroup], alloc: &Allocation| {
        for (g, &k) in groups.iter().zip(&alloc.counts) {
            for (h, order) in g.sorted_channels().into_iter().enumerate() {
                for &c in &order[..k] {
                    plan.masks[g.layer].removed_mut(g.side).insert((h, c));
                }
            }
        }
        removed_score += alloc.cost;
    };
    let mut warn = None;
    match threshold {
        Threshold::Global => {
            let groups = per_head_groups(scores, None)?;
            let budget = global_budget(scores, target);
            if groups.iter().all(|g| g.unit_cost > budget) && target > 0.0 {
                warn = Some(format!("budget of {budget} parameters is smaller than one unit"));
            }
            apply(&groups, &greedy_allocation(&groups, budget)?);
        }
        Threshold::Local => {
            for (l, layer) in scores.layers.iter().enumerate() {
                let groups = per_head_groups(scores, Some(l))?;
                let unit_cost = groups.iter().map(|g| g.unit_cost).min().unwrap_or(1);
                let k = local_units(layer, target, unit_cost);
                let alloc = greedy_allocation(&groups, k * unit_cost)?;
                if alloc.counts.iter().sum::<usize>() < k {
                    return Err(Error::LayerExhausted { layer: l });
                }
                apply(&groups, &alloc);
            }
        }
    }
    plan.removed_score = removed_score;
    fill_sparsity(&mut plan, scores, target, threshold);
    if let Some(w) = warn {
        plan.notes.push(w);
    }
    Ok(plan)
}

/// Dispatches to the planner for `pattern`.
pub fn plan(scores: &ScoreTable, pattern: Pattern, threshold: Threshold, target: f64) -> Result<PrunePlan> {
    match pattern {
        Pattern::EntireHead => plan_entire_head(scores, target, threshold),
        Pattern::SameChannel => plan_same_channel(scores, target, threshold),
        Pattern::PerHead => plan_per_head_greedy(scores, target, threshold),
    }
}

/// Layouts `(d, qk, vo)` per layer, as seen by the score table.
pub fn layouts(scores: &ScoreTable) -> Vec<(usize, HeadLayout, HeadLayout)> {
    scores.layers.iter().map(|l| (l.d, l.qk, l.vo)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{Granularity, Metric, ScoreValues};

    type Grid = Vec<Vec<f64>>;

    fn head_table(heads: &[Vec<f64>], d: usize, channels: usize) -> ScoreTable {
        let layers = heads
            .iter()
            .map(|h| {
                let layout = HeadLayout::new(h.len(), channels);
                LayerScores {
                    d,
                    qk: layout,
                    vo: layout,
                    baseline: 4 * d * layout.width(),
                    values: ScoreValues::Head(h.clone()),
                }
            })
            .collect();
        ScoreTable {
            metric: Metric::L2,
            granularity: Granularity::Head,
            layers,
        }
    }

    fn channel_table(layers: &[(Grid, Grid)], d: usize) -> ScoreTable {
        let layers = layers
            .iter()
            .map(|(qk, vo)| {
                let ql = HeadLayout::new(qk.len(), qk[0].len());
                let vl = HeadLayout::new(vo.len(), vo[0].len());
                LayerScores {
                    d,
                    qk: ql,
                    vo: vl,
                    baseline: 2 * d * (ql.width() + vl.width()),
                    values: ScoreValues::Channel {
                        qk: qk.clone(),
                        vo: vo.clone(),
                    },
                }
            })
            .collect();
        ScoreTable {
            metric: Metric::Fisher,
            granularity: Granularity::Channel,
            layers,
        }
    }

    fn heads_removed(plan: &PrunePlan) -> Vec<(usize, usize)> {
        let mut out: Vec<_> = plan
            .masks
            .iter()
            .enumerate()
            .flat_map(|(l, m)| m.qk_removed.iter().map(move |&(h, _)| (l, h)))
            .collect();
        out.dedup();
        out
    }

    #[test]
    fn entire_head_global_takes_the_argmin() {
        let t = head_table(&[vec![0.1, 0.9], vec![0.5, 0.2]], 4, 2);
        let p = plan_entire_head(&t, 0.25, Threshold::Global).unwrap();
        assert_eq!(heads_removed(&p), vec![(0, 0)]);
        assert_eq!(p.achieved_sparsity, 0.25);
        assert!(p.notes.is_empty());
    }

    #[test]
    fn entire_head_local_takes_each_layers_argmin() {
        let t = head_table(&[vec![0.1, 0.9], vec![0.5, 0.2]], 4, 2);
        let p = plan_entire_head(&t, 0.5, Threshold::Local).unwrap();
        assert_eq!(heads_removed(&p), vec![(0, 0), (1, 1)]);
        assert!((p.removed_score - 0.3).abs() < 1e-15);
    }

    #[test]
    fn entire_head_local_rounds_twelve_heads_to_one() {
        let scores: Vec<f64> = (0..12).map(|h| h as f64).collect();
        let t = head_table(&[scores.clone(), scores], 8, 4);
        let p = plan_entire_head(&t, 0.10, Threshold::Local).unwrap();
        assert_eq!(heads_removed(&p), vec![(0, 0), (1, 0)]);
        assert!((p.achieved_sparsity - 1.0 / 12.0).abs() < 1e-15);
        assert!(p.has_rounding_gap());
        assert!(p.notes.iter().any(|n| n.starts_with("rounding")));
    }

    #[test]
    fn entire_head_refuses_to_empty_a_layer() {
        let t = head_table(&[vec![0.1, 0.9]], 4, 2);
        assert!(matches!(
            plan_entire_head(&t, 0.99, Threshold::Local),
            Err(Error::LayerExhausted { layer: 0 })
        ));
        // budget still fits a head, but every layer is down to its last one
        let t = head_table(&[vec![0.1, 0.2], vec![0.8, 0.9]], 4, 2);
        assert!(matches!(
            plan_entire_head(&t, 0.9, Threshold::Global),
            Err(Error::LayerExhausted { .. })
        ));
        assert_eq!(plan_entire_head(&t, 0.5, Threshold::Global).unwrap().achieved_sparsity, 0.5);
    }

    #[test]
    fn same_channel_removes_cheapest_channel_everywhere() {
        // QK cross-head sums [4, 1, 9], VO sums [5, 5, 5]
        let qk = vec![vec![2.0, 0.5, 4.5], vec![2.0, 0.5, 4.5]];
        let vo = vec![vec![2.5, 2.5, 2.5], vec![2.5, 2.5, 2.5]];
        let t = channel_table(&[(qk, vo)], 4);
        // one unit = 2 * heads * d = 16 of 96 params
        let p = plan_same_channel(&t, 16.0 / 96.0, Threshold::Global).unwrap();
        let expect: BTreeSet<_> = [(0, 1), (1, 1)].into();
        assert_eq!(p.masks[0].qk_removed, expect);
        assert!(p.masks[0].vo_removed.is_empty());
    }

    #[test]
    fn same_channel_ties_prefer_qk_then_lowest_channel() {
        let flat = vec![vec![1.0; 3]; 2];
        let t = channel_table(&[(flat.clone(), flat)], 4);
        let p = plan_same_channel(&t, 16.0 / 96.0, Threshold::Global).unwrap();
        assert_eq!(p.masks[0].qk_removed, [(0, 0), (1, 0)].into());
        assert!(p.masks[0].vo_removed.is_empty());
    }

    #[test]
    fn per_head_greedy_example() {
        // two layers with one head each: A = [1, 5], B = [2, 3]
        let groups = vec![
            AllocGroup {
                layer: 0,
                side: Side::Qk,
                scores: vec![vec![5.0, 1.0]],
                unit_cost: 1,
            },
            AllocGroup {
                layer: 1,
                side: Side::Qk,
                scores: vec![vec![2.0, 3.0]],
                unit_cost: 1,
            },
        ];
        let g = greedy_allocation(&groups, 2).unwrap();
        assert_eq!(g.counts, vec![1, 1]);
        assert_eq!(g.cost, 3.0);
        let b = brute_force_allocation(&groups, 2).unwrap().unwrap();
        assert_eq!(b.cost, 3.0);
        assert_eq!(brute_force_allocation(&groups, 0).unwrap().unwrap().cost, 0.0);
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let groups: Vec<AllocGroup> = (0..4)
            .map(|l| AllocGroup {
                layer: l,
                side: Side::Qk,
                scores: vec![vec![1.0; 8]],
                unit_cost: 1,
            })
            .collect();
        assert!(matches!(
            brute_force_allocation(&groups, 3),
            Err(Error::InstanceTooLarge { units: 28, .. })
        ));
    }

    #[test]
    fn per_head_keeps_top_channel_at_full_budget() {
        let qk = vec![vec![0.3, 0.9, 0.1], vec![0.7, 0.2, 0.4]];
        let vo = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]];
        let t = channel_table(&[(qk, vo)], 4);
        // all but one channel per head on both sides: 4 units of 16 params out of 96
        let p = plan_per_head_greedy(&t, 64.0 / 96.0, Threshold::Global).unwrap();
        assert_eq!(p.masks[0].qk_removed, [(0, 0), (0, 2), (1, 1), (1, 2)].into());
        assert_eq!(p.masks[0].vo_removed, [(0, 0), (0, 1), (1, 1), (1, 2)].into());
    }

    #[test]
    fn per_head_budget_below_one_unit_is_empty_with_warning() {
        let flat = vec![vec![1.0; 3]; 2];
        let t = channel_table(&[(flat.clone(), flat)], 4);
        let p = plan_per_head_greedy(&t, 0.1, Threshold::Global).unwrap();
        assert!(p.is_empty());
        assert!(p.notes.iter().any(|n| n.contains("smaller than one unit")));
    }

    #[test]
    fn head_scores_cannot_drive_channel_patterns() {
        let t = head_table(&[vec![1.0, 2.0]], 4, 2);
        assert!(plan_same_channel(&t, 0.2, Threshold::Global).is_err());
        assert!(plan_per_head_greedy(&t, 0.2, Threshold::Global).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = head_table(&[vec![0.1, 0.9, 0.3], vec![0.5, 0.2, 0.7]], 4, 2);
        let p = plan_entire_head(&t, 0.4, Threshold::Local).unwrap();
        let back = PrunePlan::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert_eq!(p.head_remap(0, 3), vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn rejects_out_of_range_targets() {
        let t = head_table(&[vec![0.1, 0.9]], 4, 2);
        assert!(plan_entire_head(&t, 1.0, Threshold::Global).is_err());
        assert!(plan_entire_head(&t, -0.1, Threshold::Global).is_err());
    }
}
