//! Importance scores for attention structures.
//!
//! A QK channel is the pair (row of `w_q`, row of `w_k`); a VO channel is the
//! pair (row of `w_v`, column of `w_o`); a head is the union of its channels
//! on both sides. Magnitude and Fisher scores share this grouping through
//! [`score_groups`], so the two metrics always rank the same parameter sets.

use std::fmt::{self, Write as _};

use crate::attention::{AttentionBlock, HeadLayout, Projection, Side};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::ToyModel;
use crate::tensor::{Matrix, Norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Fisher,
    L1,
    L2,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Fisher => "fisher",
            Metric::L1 => "l1",
            Metric::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(Metric::Fisher),
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            other => Err(Error::Parse(format!("unknown metric '{other}'"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Head,
    Channel,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Head => "head",
            Granularity::Channel => "channel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Granularity::Head),
            "channel" => Ok(Granularity::Channel),
            other => Err(Error::Parse(format!("unknown granularity '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    Row,
    Col,
}

/// One row or column of one projection matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Piece {
    pub proj: Projection,
    pub axis: Axis,
    pub index: usize,
}

impl Piece {
    pub fn values(self, m: &Matrix) -> Vec<f64> {
        match self.axis {
            Axis::Row => m.row(self.index).to_vec(),
            Axis::Col => m.col(self.index),
        }
    }
}

/// The two pieces making up channel `(head, channel)` on `side`.
pub fn channel_pieces(layout: HeadLayout, side: Side, head: usize, channel: usize) -> [Piece; 2] {
    let index = layout.row(head, channel);
    match side {
        Side::Qk => [
            Piece {
                proj: Projection::Q,
                axis: Axis::Row,
                index,
            },
            Piece {
                proj: Projection::K,
                axis: Axis::Row,
                index,
            },
        ],
        Side::Vo => [
            Piece {
                proj: Projection::V,
                axis: Axis::Row,
                index,
            },
            Piece {
                proj: Projection::O,
                axis: Axis::Col,
                index,
            },
        ],
    }
}

/// Channel-level scores for every layer: `piece_score(layer, piece)` is
/// evaluated for both pieces of each channel and the two values are added.
/// Returns `[qk, vo]` per layer, each indexed `[head][channel]`.
pub fn score_groups<F>(blocks: &[AttentionBlock], mut piece_score: F) -> Vec<[Vec<Vec<f64>>; 2]>
where
    F: FnMut(usize, Piece) -> f64,
{
    blocks
        .iter()
        .enumerate()
        .map(|(l, b)| {
            Side::BOTH.map(|side| {
                let layout = b.layout(side);
                (0..layout.heads)
                    .map(|h| {
                        (0..layout.channels)
                            .map(|c| {
                                channel_pieces(layout, side, h, c)
                                    .into_iter()
                                    .map(|p| piece_score(l, p))
                                    .sum()
                            })
                            .collect()
                    })
                    .collect()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreValues {
    Head(Vec<f64>),
    /// `[head][channel]` per side.
    Channel { qk: Vec<Vec<f64>>, vo: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub d: usize,
    pub qk: HeadLayout,
    pub vo: HeadLayout,
    /// Attention parameters of this layer before any pruning.
    pub baseline: usize,
    pub values: ScoreValues,
}

impl LayerScores {
    pub fn layout(&self, side: Side) -> HeadLayout {
        match side {
            Side::Qk => self.qk,
            Side::Vo => self.vo,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.d * (self.qk.width() + self.vo.width())
    }

    /// Score of each head: the sum of its channel scores on both sides.
    pub fn head_scores(&self) -> Vec<f64> {
        match &self.values {
            ScoreValues::Head(h) => h.clone(),
            ScoreValues::Channel { qk, vo } => qk
                .iter()
                .zip(vo)
                .map(|(a, b)| a.iter().sum::<f64>() + b.iter().sum::<f64>())
                .collect(),
        }
    }

    pub fn channel_scores(&self, side: Side) -> Option<&[Vec<f64>]> {
        match &self.values {
            ScoreValues::Head(_) => None,
            ScoreValues::Channel { qk, vo } => Some(match side {
                Side::Qk => qk,
                Side::Vo => vo,
            }),
        }
    }

    /// Per channel index, the sum of that channel's score over all heads.
    pub fn cross_head_sums(&self, side: Side) -> Option<Vec<f64>> {
        let scores = self.channel_scores(side)?;
        let mut sums = vec![0.0; self.layout(side).channels];
        for head in scores {
            for (s, v) in sums.iter_mut().zip(head) {
                *s += v;
            }
        }
        Some(sums)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub metric: Metric,
    pub granularity: Granularity,
    pub layers: Vec<LayerScores>,
}

impl ScoreTable {
    fn from_channel_scores(model: &ToyModel, metric: Metric, granularity: Granularity, raw: Vec<[Vec<Vec<f64>>; 2]>) -> Self {
        let layers = model
            .blocks()
            .iter()
            .zip(raw)
            .zip(model.baseline())
            .map(|((b, [qk, vo]), &baseline)| {
                let mut layer = LayerScores {
                    d: b.d(),
                    qk: b.qk(),
                    vo: b.vo(),
                    baseline,
                    values: ScoreValues::Channel { qk, vo },
                };
                if granularity == Granularity::Head {
                    layer.values = ScoreValues::Head(layer.head_scores());
                }
                layer
            })
            .collect();
        ScoreTable {
            metric,
            granularity,
            layers,
        }
    }

    pub fn baseline_params(&self) -> usize {
        self.layers.iter().map(|l| l.baseline).sum()
    }

    pub fn current_params(&self) -> usize {
        self.layers.iter().map(LayerScores::param_count).sum()
    }

    /// Tab-separated report: metadata comment lines, a one-line header,
    /// then one row per (layer, side, head, channel) group.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# metric={} granularity={}", self.metric, self.granularity.as_str());
        for (l, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(
                out,
                "# layer={l} d={} qk={}x{} vo={}x{} baseline={}",
                layer.d, layer.qk.heads, layer.qk.channels, layer.vo.heads, layer.vo.channels, layer.baseline
            );
        }
        out.push_str("layer\tside\thead\tchannel\tscore\n");
        for (l, layer) in self.layers.iter().enumerate() {
            match &layer.values {
                ScoreValues::Head(h) => {
                    for (head, s) in h.iter().enumerate() {
                        let _ = writeln!(out, "{l}\tboth\t{head}\t*\t{s}");
                    }
                }
                ScoreValues::Channel { qk, vo } => {
                    for (side, scores) in [(Side::Qk, qk), (Side::Vo, vo)] {
                        for (head, row) in scores.iter().enumerate() {
                            for (c, s) in row.iter().enumerate() {
                                let _ = writeln!(out, "{l}\t{side}\t{head}\t{c}\t{s}");
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut metric = None;
        let mut granularity = None;
        let mut layers: Vec<LayerScores> = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Parse(format!("score table line {}: {what}", lineno + 1));
            if let Some(meta) = line.strip_prefix("# ") {
                let kv = parse_kv(meta);
                if let Some(m) = kv.iter().find(|(k, _)| *k == "metric") {
                    metric = Some(Metric::parse(m.1)?);
                }
                if let Some(g) = kv.iter().find(|(k, _)| *k == "granularity") {
                    granularity = Some(Granularity::parse(g.1)?);
                }
                if kv.first().map(|(k, _)| *k) == Some("layer") {
                    let get = |key: &str| -> Result<&str> {
                        kv.iter()
                            .find(|(k, _)| *k == key)
                            .map(|(_, v)| *v)
                            .ok_or_else(|| bad(&format!("missing {key}")))
                    };
                    let layer: usize = parse_num(get("layer")?, &bad)?;
                    if layer != layers.len() {
                        return Err(bad("layers out of order"));
                    }
                    let qk = parse_layout(get("qk")?).ok_or_else(|| bad("bad qk layout"))?;
                    let vo = parse_layout(get("vo")?).ok_or_else(|| bad("bad vo layout"))?;
                    let values = match granularity.ok_or_else(|| bad("granularity must precede layers"))? {
                        Granularity::Head => ScoreValues::Head(vec![f64::NAN; qk.heads]),
                        Granularity::Channel => ScoreValues::Channel {
                            qk: vec![vec![f64::NAN; qk.channels]; qk.heads],
                            vo: vec![vec![f64::NAN; vo.channels]; vo.heads],
                        },
                    };
                    layers.push(LayerScores {
                        d: parse_num(get("d")?, &bad)?,
                        qk,
                        vo,
                        baseline: parse_num(get("baseline")?, &bad)?,
                        values,
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                if line != "layer\tside\thead\tchannel\tscore" {
                    return Err(bad("expected header"));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            let l: usize = parse_num(cols[0], &bad)?;
            let head: usize = parse_num(cols[2], &bad)?;
            let score: f64 = cols[4].parse().map_err(|_| bad("bad score"))?;
            let layer = layers.get_mut(l).ok_or_else(|| bad("unknown layer"))?;
            let slot = match (&mut layer.values, cols[1]) {
                (ScoreValues::Head(h), "both") => h.get_mut(head),
                (ScoreValues::Channel { qk, vo }, side) => {
                    let c: usize = parse_num(cols[3], &bad)?;
                    let scores = match Side::parse(side)? {
                        Side::Qk => qk,
                        Side::Vo => vo,
                    };
                    scores.get_mut(head).and_then(|r| r.get_mut(c))
                }
                _ => None,
            };
            *slot.ok_or_else(|| bad("index out of range"))? = score;
        }
        let table = ScoreTable {
            metric: metric.ok_or_else(|| Error::Parse("score table missing metric".into()))?,
            granularity: granularity.ok_or_else(|| Error::Parse("score table missing granularity".into()))?,
            layers,
        };
        let complete = table.layers.iter().all(|l| match &l.values {
            ScoreValues::Head(h) => h.iter().all(|v| !v.is_nan()),
            ScoreValues::Channel { qk, vo } => qk.iter().chain(vo).flatten().all(|v| !v.is_nan()),
        });
        if !complete || table.layers.is_empty() {
            return Err(Error::Parse("score table is missing entries".into()));
        }
        Ok(table)
    }
}

fn parse_kv(s: &str) -> Vec<(&str, &str)> {
    s.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

fn parse_num<T: std::str::FromStr>(s: &str, bad: &dyn Fn(&str) -> Error) -> Result<T> {
    s.parse().map_err(|_| bad(&format!("bad number '{s}'")))
}

fn parse_layout(s: &str) -> Option<HeadLayout> {
    let (h, c) = s.split_once('x')?;
    Some(HeadLayout::new(h.parse().ok()?, c.parse().ok()?))
}

/// L1 or L2 magnitude scores. A channel scores `‖piece₁‖ + ‖piece₂‖`.
pub fn magnitude_score(model: &ToyModel, granularity: Granularity, norm: Norm) -> ScoreTable {
    let blocks = model.blocks();
    let raw = score_groups(blocks, |l, piece| norm.of(&piece.values(blocks[l].projection(piece.proj))));
    let metric = match norm {
        Norm::L1 => Metric::L1,
        Norm::L2 => Metric::L2,
    };
    ScoreTable::from_channel_scores(model, metric, granularity, raw)
}

/// Running sums of squared per-sample gradients of the attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherAccumulator {
    layouts: Vec<(usize, HeadLayout, HeadLayout)>,
    /// `[w_q, w_k, w_v, w_o]` per layer.
    sums: Vec<[Matrix; 4]>,
    count: usize,
}

impl FisherAccumulator {
    pub fn new(model: &ToyModel) -> Self {
        FisherAccumulator {
            layouts: Self::layouts_of(model),
            sums: model
                .blocks()
                .iter()
                .map(|b| Projection::ALL.map(|p| Matrix::zeros(b.projection(p).rows(), b.projection(p).cols())))
                .collect(),
            count: 0,
        }
    }

    fn layouts_of(model: &ToyModel) -> Vec<(usize, HeadLayout, HeadLayout)> {
        model.blocks().iter().map(|b| (b.d(), b.qk(), b.vo())).collect()
    }

    fn check_model(&self, model: &ToyModel) -> Result<()> {
        if Self::layouts_of(model) != self.layouts {
            return Err(Error::StaleAccumulator);
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.count
    }

    /// Adds the elementwise-squared gradients of one sample's loss.
    pub fn accumulate(&mut self, model: &ToyModel, sample: &Sample) -> Result<()> {
        self.check_model(model)?;
        let g = model.loss_and_grads(&sample.tokens, sample.label)?;
        self.add_squared(&g.grads.blocks)
    }

    /// Accumulates many samples; per-sample gradients may be computed in
    /// parallel but are always summed in sample order.
    pub fn accumulate_all(&mut self, model: &ToyModel, samples: &[Sample], exec: Execution) -> Result<()> {
        self.check_model(model)?;
        let grads = exec.map(samples, |s| model.loss_and_grads(&s.tokens, s.label));
        for g in grads {
            self.add_squared(&g?.grads.blocks)?;
        }
        Ok(())
    }

    /// Adds already-computed per-sample attention gradients.
    pub fn add_squared(&mut self, grads: &[[Matrix; 4]]) -> Result<()> {
        if grads.len() != self.sums.len() {
            return Err(Error::StaleAccumulator);
        }
        for (sums, g) in self.sums.iter_mut().zip(grads) {
            for (s, g) in sums.iter_mut().zip(g) {
                if s.shape() != g.shape() {
                    return Err(Error::StaleAccumulator);
                }
                for (a, v) in s.data_mut().iter_mut().zip(g.data()) {
                    *a += v * v;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Combines two accumulators built over disjoint samples.
    pub fn merge(&mut self, other: &FisherAccumulator) -> Result<()> {
        if self.layouts != other.layouts {
            return Err(Error::StaleAccumulator);
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (a, b) in a.iter_mut().zip(b) {
                a.add_assign(b)?;
            }
        }
        self.count += other.count;
        Ok(())
    }

    /// Per-parameter Fisher estimate `sum / count` for one projection.
    pub fn fisher(&self, layer: usize, proj: Projection) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let idx = Projection::ALL.iter().position(|p| *p == proj).unwrap_or(0);
        Ok(self.sums[layer][idx].scale(1.0 / self.count as f64))
    }

    /// Group scores: the sum over each group's parameters of `sum / count`.
    pub fn group_scores(&self, model: &ToyModel, granularity: Granularity) -> Result<ScoreTable> {
        self.check_model(model)?;
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let n = self.count as f64;
        let raw = score_groups(model.blocks(), |l, piece| {
            let idx = Projection::ALL.iter().position(|p| *p == piece.proj).unwrap_or(0);
            piece.values(&self.sums[l][idx]).iter().map(|s| s / n).sum()
        });
        Ok(ScoreTable::from_channel_scores(model, Metric::Fisher, granularity, raw))
    }
}

/// Fisher scores of `model` estimated on `samples`.
pub fn fisher_score(model: &ToyModel, samples: &[Sample], granularity: Granularity, exec: Execution) -> Result<ScoreTable> {
    let mut acc = FisherAccumulator::new(model);
    acc.accumulate_all(model, samples, exec)?;
    acc.group_scores(model, granularity)
}
