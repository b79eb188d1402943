//! Multi-head self-attention with an explicit head/channel factorization.
//!
//! The Q/K side and the V/O side carry independent layouts: the only
//! coupling is that `w_q` and `w_k` share their row count, and `w_v`'s row
//! count equals `w_o`'s column count. Row `r` of a side's projection belongs
//! to head `r / channels`, channel `r % channels`.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result, Shape};
use crate::tensor::Matrix;

/// One of the two independently prunable halves of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Qk,
    Vo,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Qk, Side::Vo];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Qk => "qk",
            Side::Vo => "vo",
        }
    }

    pub fn parse(s: &str) -> Result<Side> {
        match s {
            "qk" => Ok(Side::Qk),
            "vo" => Ok(Side::Vo),
            other => Err(Error::Parse(format!("unknown side '{other}'"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Head count and channels-per-head of one side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeadLayout {
    pub heads: usize,
    pub channels: usize,
}

impl HeadLayout {
    pub fn new(heads: usize, channels: usize) -> Self {
        HeadLayout { heads, channels }
    }

    /// Total projection width, `heads * channels`.
    pub fn width(self) -> usize {
        self.heads * self.channels
    }

    #[inline]
    pub fn row(self, head: usize, channel: usize) -> usize {
        head * self.channels + channel
    }
}

/// Structural removals expressed as zeroed (head, channel) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PruneMask {
    pub qk_removed: BTreeSet<(usize, usize)>,
    pub vo_removed: BTreeSet<(usize, usize)>,
}

impl PruneMask {
    pub fn removed(&self, side: Side) -> &BTreeSet<(usize, usize)> {
        match side {
            Side::Qk => &self.qk_removed,
            Side::Vo => &self.vo_removed,
        }
    }

    pub fn removed_mut(&mut self, side: Side) -> &mut BTreeSet<(usize, usize)> {
        match side {
            Side::Qk => &mut self.qk_removed,
            Side::Vo => &mut self.vo_removed,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.qk_removed.is_empty() && self.vo_removed.is_empty()
    }

    /// Removes every channel of `head` on both sides.
    pub fn remove_head(&mut self, head: usize, qk: HeadLayout, vo: HeadLayout) {
        self.qk_removed.extend((0..qk.channels).map(|c| (head, c)));
        self.vo_removed.extend((0..vo.channels).map(|c| (head, c)));
    }

    /// Index-range and non-emptiness check against a block's layout.
    pub fn check(&self, block: &AttentionBlock, layer: usize) -> Result<()> {
        for side in Side::BOTH {
            let layout = block.layout(side);
            for &(head, channel) in self.removed(side) {
                if head >= layout.heads || channel >= layout.channels {
                    return Err(Error::MaskOutOfRange {
                        layer,
                        side: side.as_str(),
                        head,
                        channel,
                    });
                }
            }
            if self.removed(side).len() >= layout.width() {
                return Err(Error::LayerExhausted { layer });
            }
        }
        Ok(())
    }
}

/// The four projection matrices of one self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    d: usize,
    qk: HeadLayout,
    vo: HeadLayout,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    w_o: Matrix,
    scale: f64,
}

/// Gradients of a scalar objective with respect to a block's weights and input.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub x: Matrix,
}

/// Intermediates kept from the forward pass for use in [`AttentionBlock::backward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    z: Matrix,
}

/// Identifies one of the four projection matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        qk: HeadLayout,
        vo: HeadLayout,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_o: Matrix,
        scale: f64,
    ) -> Result<Self> {
        let block = AttentionBlock {
            d,
            qk,
            vo,
            w_q,
            w_k,
            w_v,
            w_o,
            scale,
        };
        block.check_invariants()?;
        Ok(block)
    }

    /// Fresh block with `heads` heads of `channels` channels on both sides.
    /// Weights are Gaussian with standard deviation `std / sqrt(d)`.
    pub fn random<R: Rng + ?Sized>(d: usize, heads: usize, channels: usize, std: f64, rng: &mut R) -> Self {
        let width = heads * channels;
        let s = std / (d as f64).sqrt();
        let w_q = Matrix::random_normal(width, d, s, rng);
        let w_k = Matrix::random_normal(width, d, s, rng);
        let w_v = Matrix::random_normal(width, d, s, rng);
        let w_o = Matrix::random_normal(d, width, std / (width as f64).sqrt(), rng);
        let layout = HeadLayout::new(heads, channels);
        AttentionBlock {
            d,
            qk: layout,
            vo: layout,
            w_q,
            w_k,
            w_v,
            w_o,
            scale: 1.0 / (channels as f64).sqrt(),
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let expect = |m: &Matrix, rows: usize, cols: usize, what: &str| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::InvalidLayout(format!(
                    "{what} is {} but layout requires {}",
                    m.shape(),
                    Shape(rows, cols)
                )));
            }
            Ok(())
        };
        if self.d == 0 || self.qk.width() == 0 || self.vo.width() == 0 {
            return Err(Error::InvalidLayout(format!(
                "empty dimension: d={} qk={:?} vo={:?}",
                self.d, self.qk, self.vo
            )));
        }
        expect(&self.w_q, self.qk.width(), self.d, "w_q")?;
        expect(&self.w_k, self.qk.width(), self.d, "w_k")?;
        expect(&self.w_v, self.vo.width(), self.d, "w_v")?;
        expect(&self.w_o, self.d, self.vo.width(), "w_o")?;
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::InvalidLayout(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn qk(&self) -> HeadLayout {
        self.qk
    }

    pub fn vo(&self) -> HeadLayout {
        self.vo
    }

    pub fn layout(&self, side: Side) -> HeadLayout {
        match side {
            Side::Qk => self.qk,
            Side::Vo => self.vo,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }

    pub fn w_o(&self) -> &Matrix {
        &self.w_o
    }

    pub fn projection(&self, p: Projection) -> &Matrix {
        match p {
            Projection::Q => &self.w_q,
            Projection::K => &self.w_k,
            Projection::V => &self.w_v,
            Projection::O => &self.w_o,
        }
    }

    /// Mutable access to the weight values. Shapes must not change.
    pub(crate) fn projections_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    pub fn param_count(&self) -> usize {
        2 * self.d * self.qk.width() + 2 * self.d * self.vo.width()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "attention input",
                left: x.shape(),
                right: Shape(x.rows().max(1), self.d),
            });
        }
        if self.qk.heads != self.vo.heads {
            return Err(Error::HeadMismatch {
                qk: self.qk.heads,
                vo: self.vo.heads,
            });
        }
        Ok(())
    }

    /// Pre-softmax logits `scale · Q_h K_hᵀ` for every head.
    pub fn logits(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(x)?;
        let q = x.matmul_nt(&self.w_q)?;
        let k = x.matmul_nt(&self.w_k)?;
        let nc = self.qk.channels;
        (0..self.qk.heads)
            .map(|h| {
                let qh = q.col_block(h * nc, nc);
                let kh = k.col_block(h * nc, nc);
                Ok(qh.matmul_nt(&kh)?.scale(self.scale))
            })
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_cached(x).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let q = x.matmul_nt(&self.w_q)?;
        let k = x.matmul_nt(&self.w_k)?;
        let v = x.matmul_nt(&self.w_v)?;
        let (nq, nv) = (self.qk.channels, self.vo.channels);
        let mut z = Matrix::zeros(x.rows(), self.vo.width());
        let mut attn = Vec::with_capacity(self.qk.heads);
        for h in 0..self.qk.heads {
            let qh = q.col_block(h * nq, nq);
            let kh = k.col_block(h * nq, nq);
            let a = qh.matmul_nt(&kh)?.scale(self.scale).softmax_rows();
            let zh = a.matmul(&v.col_block(h * nv, nv))?;
            z.set_col_block(h * nv, &zh);
            attn.push(a);
        }
        let out = z.matmul_nt(&self.w_o)?;
        Ok((out, ForwardCache { q, k, v, attn, z }))
    }

    /// Copy of the block with masked rows of `w_q`/`w_k` and masked rows of
    /// `w_v` / columns of `w_o` set to zero. `scale` is unchanged.
    pub fn masked(&self, mask: &PruneMask) -> Result<AttentionBlock> {
        mask.check(self, 0)?;
        let mut out = self.clone();
        for &(h, c) in &mask.qk_removed {
            let r = self.qk.row(h, c);
            out.w_q.zero_row(r);
            out.w_k.zero_row(r);
        }
        for &(h, c) in &mask.vo_removed {
            let r = self.vo.row(h, c);
            out.w_v.zero_row(r);
            out.w_o.zero_col(r);
        }
        Ok(out)
    }

    pub fn forward_masked(&self, mask: &PruneMask, x: &Matrix) -> Result<Matrix> {
        self.masked(mask)?.forward(x)
    }

    /// Reverse-mode gradients of `sum(upstream ⊙ forward(x))`.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<BlockGrads> {
        let (_, cache) = self.forward_cached(x)?;
        self.backward_cached(x, &cache, upstream)
    }

    pub fn backward_cached(&self, x: &Matrix, cache: &ForwardCache, upstream: &Matrix) -> Result<BlockGrads> {
        if upstream.rows() != x.rows() || upstream.cols() != self.d {
            return Err(Error::ShapeMismatch {
                op: "attention backward",
                left: upstream.shape(),
                right: Shape(x.rows(), self.d),
            });
        }
        let (nq, nv) = (self.qk.channels, self.vo.channels);

        // out = z · w_oᵀ
        let g_wo = upstream.matmul_tn(&cache.z)?;
        let g_z = upstream.matmul(&self.w_o)?;

        let mut g_q = Matrix::zeros(x.rows(), self.qk.width());
        let mut g_k = Matrix::zeros(x.rows(), self.qk.width());
        let mut g_v = Matrix::zeros(x.rows(), self.vo.width());
        for (h, a) in cache.attn.iter().enumerate() {
            let g_zh = g_z.col_block(h * nv, nv);
            let vh = cache.v.col_block(h * nv, nv);
            g_v.set_col_block(h * nv, &a.matmul_tn(&g_zh)?);

            // softmax backward, row by row: g_s = a ⊙ (g_a - <g_a, a>)
            let g_a = g_zh.matmul_nt(&vh)?;
            let mut g_s = Matrix::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let (ar, gr) = (a.row(r), g_a.row(r));
                let inner: f64 = ar.iter().zip(gr).map(|(p, g)| p * g).sum();
                for (o, (p, g)) in g_s.row_mut(r).iter_mut().zip(ar.iter().zip(gr)) {
                    *o = p * (g - inner);
                }
            }
            let g_s = g_s.scale(self.scale);

            let qh = cache.q.col_block(h * nq, nq);
            let kh = cache.k.col_block(h * nq, nq);
            g_q.set_col_block(h * nq, &g_s.matmul(&kh)?);
            g_k.set_col_block(h * nq, &g_s.matmul_tn(&qh)?);
        }

        let g_wq = g_q.matmul_tn(x)?;
        let g_wk = g_k.matmul_tn(x)?;
        let g_wv = g_v.matmul_tn(x)?;
        let mut g_x = g_q.matmul(&self.w_q)?;
        g_x.add_assign(&g_k.matmul(&self.w_k)?)?;
        g_x.add_assign(&g_v.matmul(&self.w_v)?)?;

        Ok(BlockGrads {
            w_q: g_wq,
            w_k: g_wk,
            w_v: g_wv,
            w_o: g_wo,
            x: g_x,
        })
    }

    /// Deletes the given rows on each side, keeping survivors in order.
    /// `qk_keep`/`vo_keep` list surviving row indices; the new layouts must
    /// account for exactly that many rows.
    pub(crate) fn restructure(
        &self,
        qk_keep: &[usize],
        vo_keep: &[usize],
        qk: HeadLayout,
        vo: HeadLayout,
    ) -> Result<AttentionBlock> {
        AttentionBlock::new(
            self.d,
            qk,
            vo,
            self.w_q.select_rows(qk_keep),
            self.w_k.select_rows(qk_keep),
            self.w_v.select_rows(vo_keep),
            self.w_o.select_cols(vo_keep),
            self.scale,
        )
    }
}
