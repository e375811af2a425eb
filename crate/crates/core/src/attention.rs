//! Content/style encoders and the cross-attention style aggregator with
//! structure-level enhancement, batched over tensors.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, to_tokens, ConvEncoder, NetConfig};
use crate::ssem::BlockLabels;
use crate::structure::ComponentLayout;

/// Query/key/value projections shared by all heads.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    heads: usize,
    width: usize,
}

impl ProjectionSet {
    pub fn new(width: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        check_heads(width, heads)?;
        Ok(Self {
            wq: candle_nn::linear_no_bias(width, width, vb.pp("wq"))?,
            wk: candle_nn::linear_no_bias(width, width, vb.pp("wk"))?,
            wv: candle_nn::linear_no_bias(width, width, vb.pp("wv"))?,
            heads,
            width,
        })
    }

    /// Projections from explicit `c x c` matrices, applied as `x W^T`.
    pub fn from_weights(wq: Tensor, wk: Tensor, wv: Tensor, heads: usize) -> Result<Self> {
        let (width, w2) = wq.dims2()?;
        if w2 != width || wk.dims() != wq.dims() || wv.dims() != wq.dims() {
            return Err(Error::DimensionMismatch("projection matrices must all be c x c".into()));
        }
        check_heads(width, heads)?;
        Ok(Self {
            wq: Linear::new(wq, None),
            wk: Linear::new(wk, None),
            wv: Linear::new(wv, None),
            heads,
            width,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn check(&self, x: &Tensor, what: &str) -> Result<()> {
        let c = x.dim(D::Minus1)?;
        if x.rank() != 3 || c != self.width {
            return Err(Error::DimensionMismatch(format!(
                "{what} has shape {:?}, projection width {}",
                x.dims(),
                self.width
            )));
        }
        Ok(())
    }
}

fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::DimensionMismatch(format!("{heads} heads do not divide width {width}")));
    }
    Ok(())
}

/// `B x N x c -> B x heads x N x c/heads`.
pub fn split_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()
}

/// `B x heads x N x ch -> B x N x heads*ch`.
pub fn merge_heads(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, h, n, ch) = x.dims4()?;
    x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * ch))
}

/// Raw per-head logits `(W_Q f_c)(W_K f_S)^T / sqrt(c/heads)`; `B x heads x hw x khw`.
pub fn patch_attention(f_c: &Tensor, f_s: &Tensor, proj: &ProjectionSet) -> Result<Tensor> {
    proj.check(f_c, "content tokens")?;
    proj.check(f_s, "style tokens")?;
    if f_c.dim(0)? != f_s.dim(0)? {
        return Err(Error::DimensionMismatch("content and style batch sizes differ".into()));
    }
    let q = split_heads(&proj.wq.forward(f_c)?, proj.heads)?;
    let k = split_heads(&proj.wk.forward(f_s)?, proj.heads)?;
    let scale = 1.0 / (proj.head_dim() as f64).sqrt();
    Ok((q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?)
}

/// One-hot component membership for a batch, zero-padded to the largest
/// component counts. `content` is `B x m x hw`, `reference` is `B x n x khw`.
#[derive(Debug, Clone)]
pub struct LayoutMasks {
    pub content: Tensor,
    pub reference: Tensor,
    content_mean: Tensor,
    reference_mean: Tensor,
}

impl LayoutMasks {
    pub fn new(content: &[ComponentLayout], refs: &[Vec<ComponentLayout>], dtype: DType, device: &Device) -> Result<Self> {
        if content.len() != refs.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} content layouts for {} reference lists",
                content.len(),
                refs.len()
            )));
        }
        let labels = content.iter().zip(refs).map(|(c, r)| BlockLabels::new(c, r)).collect::<Result<Vec<_>>>()?;
        Self::from_labels(&labels, dtype, device)
    }

    pub fn from_labels(labels: &[BlockLabels], dtype: DType, device: &Device) -> Result<Self> {
        let first = labels.first().ok_or(Error::EmptyDataset)?;
        let (rows, cols) = (first.rows(), first.cols());
        if labels.iter().any(|l| l.rows() != rows || l.cols() != cols) {
            return Err(Error::LayoutMismatch("layouts in a batch must share one grid".into()));
        }
        let m = labels.iter().map(|l| l.m).max().unwrap_or(1);
        let n = labels.iter().map(|l| l.n).max().unwrap_or(1);
        let b = labels.len();
        let (mut mc, mut mc_mean) = (vec![0f64; b * m * rows], vec![0f64; b * m * rows]);
        let (mut mr, mut mr_mean) = (vec![0f64; b * n * cols], vec![0f64; b * n * cols]);
        for (s, l) in labels.iter().enumerate() {
            fill(&mut mc, &mut mc_mean, &l.content, s * m * rows, rows);
            fill(&mut mr, &mut mr_mean, &l.reference, s * n * cols, cols);
        }
        let t = |v: Vec<f64>, d: (usize, usize, usize)| -> Result<Tensor> { Ok(Tensor::from_vec(v, d, device)?.to_dtype(dtype)?) };
        Ok(Self {
            content: t(mc, (b, m, rows))?,
            reference: t(mr, (b, n, cols))?,
            content_mean: t(mc_mean, (b, m, rows))?,
            reference_mean: t(mr_mean, (b, n, cols))?,
        })
    }

    fn check(&self, a: &Tensor) -> Result<()> {
        let (b, _, rows, cols) = a.dims4()?;
        let (mb, _, mrows) = self.content.dims3()?;
        let (_, _, mcols) = self.reference.dims3()?;
        if (b, rows, cols) != (mb, mrows, mcols) {
            return Err(Error::LayoutMismatch(format!(
                "attention {:?} vs layouts for {mb} x {mrows} x {mcols}",
                a.dims()
            )));
        }
        Ok(())
    }
}

fn fill(onehot: &mut [f64], mean: &mut [f64], labels: &[usize], base: usize, len: usize) {
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    for (x, &l) in labels.iter().enumerate() {
        onehot[base + l * len + x] = 1.0;
        mean[base + l * len + x] = 1.0 / counts[&l] as f64;
    }
}

/// Block means of the patch logits; `B x heads x m x n`.
pub fn structure_attention(a_patch: &Tensor, masks: &LayoutMasks) -> Result<Tensor> {
    masks.check(a_patch)?;
    let mc = masks.content_mean.unsqueeze(1)?;
    let mr = masks.reference_mean.unsqueeze(1)?.transpose(2, 3)?.contiguous()?;
    Ok(mc.broadcast_matmul(a_patch)?.broadcast_matmul(&mr)?)
}

/// Broadcasts every block mean back onto its patch block and adds it.
pub fn reweight(a_patch: &Tensor, a_stru: &Tensor, masks: &LayoutMasks) -> Result<Tensor> {
    masks.check(a_patch)?;
    let (b, heads, _, _) = a_patch.dims4()?;
    let (_, m, _) = masks.content.dims3()?;
    let (_, n, _) = masks.reference.dims3()?;
    if a_stru.dims() != [b, heads, m, n] {
        return Err(Error::LayoutMismatch(format!(
            "structure attention {:?}, expected {:?}",
            a_stru.dims(),
            [b, heads, m, n]
        )));
    }
    let mc = masks.content.unsqueeze(1)?.transpose(2, 3)?.contiguous()?;
    let mr = masks.reference.unsqueeze(1)?;
    let spread = mc.broadcast_matmul(a_stru)?.broadcast_matmul(&mr)?;
    Ok((a_patch + spread)?)
}

/// Row softmax over reference tokens, then the weighted sum of value-projected
/// reference tokens, heads concatenated; `B x hw x c`.
pub fn aggregate(logits: &Tensor, f_s: &Tensor, proj: &ProjectionSet) -> Result<Tensor> {
    proj.check(f_s, "style tokens")?;
    let (b, heads, _, cols) = logits.dims4()?;
    if heads != proj.heads || cols != f_s.dim(1)? || b != f_s.dim(0)? {
        return Err(Error::DimensionMismatch(format!("logits {:?} vs style tokens {:?}", logits.dims(), f_s.dims())));
    }
    let v = split_heads(&proj.wv.forward(f_s)?, proj.heads)?;
    Ok(merge_heads(&softmax_last(logits)?.matmul(&v)?)?)
}

/// Everything the aggregator computes on one batch.
#[derive(Debug, Clone)]
pub struct Aggregated {
    /// Style-aggregated tokens `B x hw x c`.
    pub tokens: Tensor,
    pub patch_logits: Tensor,
    /// Logits after structure reweighting, when enhancement is on.
    pub reweighted_logits: Option<Tensor>,
}

/// Content encoder, style encoder and projections.
#[derive(Debug, Clone)]
pub struct StyleAggregator {
    pub content_encoder: ConvEncoder,
    pub style_encoder: ConvEncoder,
    pub proj: ProjectionSet,
    pub structure_enhancement: bool,
}

impl StyleAggregator {
    pub fn new(net: &NetConfig, width: usize, heads: usize, structure_enhancement: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            content_encoder: ConvEncoder::new(net, width, vb.pp("content_encoder"))?,
            style_encoder: ConvEncoder::new(net, width, vb.pp("style_encoder"))?,
            proj: ProjectionSet::new(width, heads, vb.pp("proj"))?,
            structure_enhancement,
        })
    }

    /// `B x 1 x H x W -> B x hw x c`.
    pub fn encode_content(&self, images: &Tensor) -> Result<Tensor> {
        Ok(to_tokens(&self.content_encoder.encode(images)?)?)
    }

    /// `B x k x 1 x H x W -> B x khw x c`, reference blocks in input order.
    pub fn encode_style(&self, refs: &Tensor) -> Result<Tensor> {
        let dims = refs.dims();
        if dims.len() != 5 {
            return Err(Error::shape(["B", "k", "1", "H", "W"], dims));
        }
        let (b, k) = (dims[0], dims[1]);
        if k == 0 {
            return Err(Error::EmptyReferences);
        }
        let flat = refs.reshape((b * k, dims[2], dims[3], dims[4]))?;
        let tokens = to_tokens(&self.style_encoder.encode(&flat)?)?;
        let (_, hw, c) = tokens.dims3()?;
        Ok(tokens.reshape((b, k * hw, c))?)
    }

    /// Style tokens for `k` copies of the same glyph, encoded once.
    pub fn encode_style_repeated(&self, images: &Tensor, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::EmptyReferences);
        }
        let tokens = to_tokens(&self.style_encoder.encode(images)?)?;
        Ok(Tensor::cat(&vec![&tokens; k], 1)?)
    }

    pub fn aggregate(&self, f_c: &Tensor, f_s: &Tensor, masks: Option<&LayoutMasks>) -> Result<Aggregated> {
        let patch_logits = patch_attention(f_c, f_s, &self.proj)?;
        let reweighted_logits = match (self.structure_enhancement, masks) {
            (true, Some(masks)) => {
                let a_stru = structure_attention(&patch_logits, masks)?;
                Some(reweight(&patch_logits, &a_stru, masks)?)
            }
            (true, None) => return Err(Error::LayoutMismatch("structure enhancement needs component layouts".into())),
            (false, _) => None,
        };
        let tokens = aggregate(reweighted_logits.as_ref().unwrap_or(&patch_logits), f_s, &self.proj)?;
        Ok(Aggregated {
            tokens,
            patch_logits,
            reweighted_logits,
        })
    }
}
