use candle_core::{Module, Tensor, D};
use candle_nn::{Init, LayerNorm, Linear, VarBuilder};

use crate::attention::{merge_heads, split_heads};
use crate::config::TransformerConfig;
use crate::error::{Error, Result};
use crate::nn::softmax_last;

/// Pre-norm self-attention block. Positional embeddings are added to the
/// query and key inputs only, never to the values or the residual stream.
#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(width: usize, heads: usize, ffn: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            ln1: candle_nn::layer_norm(width, 1e-5, vb.pp("ln1"))?,
            wq: candle_nn::linear(width, width, vb.pp("wq"))?,
            wk: candle_nn::linear(width, width, vb.pp("wk"))?,
            wv: candle_nn::linear(width, width, vb.pp("wv"))?,
            wo: candle_nn::linear(width, width, vb.pp("wo"))?,
            ln2: candle_nn::layer_norm(width, 1e-5, vb.pp("ln2"))?,
            fc1: candle_nn::linear(width, ffn, vb.pp("fc1"))?,
            fc2: candle_nn::linear(ffn, width, vb.pp("fc2"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let qk = h.broadcast_add(pos)?;
        let q = split_heads(&self.wq.forward(&qk)?, self.heads)?;
        let k = split_heads(&self.wk.forward(&qk)?, self.heads)?;
        let v = split_heads(&self.wv.forward(&h)?, self.heads)?;
        let scale = 1.0 / (q.dim(D::Minus1)? as f64).sqrt();
        let a = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let x = (x + self.wo.forward(&merge_heads(&softmax_last(&a)?.matmul(&v)?)?)?)?;
        let f = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        x + f
    }
}

/// Non-autoregressive token classifier: self-attention over all latent
/// positions, then a one-hidden-layer MLP to `K` logits per token.
#[derive(Debug, Clone)]
pub struct IndexTransformer {
    pos: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    hidden: Linear,
    classify: Linear,
    tokens: usize,
    width: usize,
}

impl IndexTransformer {
    pub fn new(cfg: &TransformerConfig, tokens: usize, width: usize, classes: usize, vb: VarBuilder) -> Result<Self> {
        if cfg.blocks == 0 || cfg.heads == 0 || !width.is_multiple_of(cfg.heads) {
            return Err(Error::DimensionMismatch(format!(
                "{} heads over width {width} with {} blocks",
                cfg.heads, cfg.blocks
            )));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(width, cfg.heads, cfg.ffn_mult * width, vb.pp(format!("blocks.{i}"))))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self {
            pos: vb.get_with_hints((1, tokens, width), "pos", Init::Randn { mean: 0.0, stdev: 0.02 })?,
            blocks,
            ln_out: candle_nn::layer_norm(width, 1e-5, vb.pp("ln_out"))?,
            hidden: candle_nn::linear(width, width, vb.pp("head.hidden"))?,
            classify: candle_nn::linear(width, classes, vb.pp("head.out"))?,
            tokens,
            width,
        })
    }

    /// `B x hw x c` tokens to `B x hw x K` logits.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, n, c) = tokens.dims3()?;
        if (n, c) != (self.tokens, self.width) {
            return Err(Error::shape(["B".to_string(), self.tokens.to_string(), self.width.to_string()], tokens.dims()));
        }
        let mut x = tokens.clone();
        for b in &self.blocks {
            x = b.forward(&x, &self.pos)?;
        }
        let h = self.hidden.forward(&self.ln_out.forward(&x)?)?.gelu()?;
        Ok(self.classify.forward(&h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_builder;
    use crate::training::adam;
    use candle_core::{DType, Device};
    use candle_nn::{Optimizer, VarMap};

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
        }
    }

    #[test]
    fn logits_shape_and_determinism() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let t = IndexTransformer::new(&cfg(), 16, 32, 64, seeded_builder(&vm, 1, DType::F32, &dev)).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 16, 32), &dev).unwrap();
        let a = t.forward(&x).unwrap();
        assert_eq!(a.dims(), [2, 16, 64]);
        let b = t.forward(&x).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let bad = Tensor::randn(0f32, 1.0, (2, 15, 32), &dev).unwrap();
        assert!(matches!(t.forward(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn overfits_one_sample() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let t = IndexTransformer::new(&cfg(), 16, 32, 64, seeded_builder(&vm, 2, DType::F32, &dev)).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 16, 32), &dev).unwrap();
        let target: Vec<u32> = (0..16).map(|i| (i * 7 % 64) as u32).collect();
        let y = Tensor::new(target.as_slice(), &dev).unwrap();
        let mut opt = adam(vm.all_vars(), 3e-3, 0.9, 0.999).unwrap();
        for _ in 0..150 {
            let logits = t.forward(&x).unwrap().squeeze(0).unwrap();
            let loss = candle_nn::loss::cross_entropy(&logits, &y).unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let pred: Vec<u32> = t.forward(&x).unwrap().argmax(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let hits = pred.iter().zip(&target).filter(|(a, b)| a == b).count();
        assert!(hits as f64 >= 0.95 * 16.0, "{hits}/16");
    }
}
