//! Transformer sub-network: stacked encoder blocks over the skeleton window,
//! flattened into the shared classifier head.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{ClassifierHead, Forward, HeadOutput, LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub seq_len: usize,
}

impl AttentionConfig {
    /// 64 timesteps of 22 joints × 3 coordinates, 11 heads of width 6.
    pub const fn full() -> Self {
        Self {
            d_model: 66,
            heads: 11,
            ff_dim: 264,
            seq_len: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn flatten_dim(&self) -> usize {
        self.seq_len * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.seq_len == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidArgument("empty transformer dimension".into()));
        }
        Ok(())
    }
}

/// Fixed sinusoidal timing signal: `sin` on even channels, `cos` on odd.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(seq_len * d_model);
    for pos in 0..seq_len {
        for c in 0..d_model {
            let pair = (c / 2 * 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(pair / d_model as f64);
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![seq_len, d_model], data)
}

/// One encoder block: self-attention, residual, layer norm, then a
/// Mish transition layer, residual, layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub config: AttentionConfig,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        Self {
            query: Linear::new(store, &format!("{prefix}.attn.query"), d, d, rng),
            key: Linear::new(store, &format!("{prefix}.attn.key"), d, d, rng),
            value: Linear::new(store, &format!("{prefix}.attn.value"), d, d, rng),
            output: Linear::new(store, &format!("{prefix}.attn.output"), d, d, rng),
            ff_in: Linear::new(store, &format!("{prefix}.ff.in"), d, config.ff_dim, rng),
            ff_out: Linear::new(store, &format!("{prefix}.ff.out"), config.ff_dim, d, rng),
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d, LN_EPS),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d, LN_EPS),
            config,
        }
    }

    /// `[B, S, D] -> [B, S, D]` bidirectional multi-head self-attention.
    /// Also returns the attention weights as `[B·H, S, S]`.
    pub fn self_attention<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = x.shape();
        let d = self.config.d_model;
        if shape.len() != 3 || shape[2] != d {
            return Err(shape_err("self_attention", format!("input {shape:?}, d_model {d}")));
        }
        let (b, s) = (shape[0], shape[1]);
        let h = self.config.heads;
        let hd = self.config.head_dim();
        let split = |v: Var<'t>| -> Result<Var<'t>> {
            v.reshape(&[b, s, h, hd])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, s, hd])
        };
        let q = split(self.query.forward(f, x)?)?;
        let k = split(self.key.forward(f, x)?)?;
        let v = split(self.value.forward(f, x)?)?;
        let scores = q.bmm(k, true)?.mul_scalar(1.0 / (hd as f64).sqrt())?;
        let weights = scores.softmax(2)?;
        let ctx = weights
            .bmm(v, false)?
            .reshape(&[b, h, s, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, s, d])?;
        Ok((self.output.forward(f, ctx)?, weights))
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (attn, _) = self.self_attention(f, x)?;
        let x = self.norm1.forward(f, x.add(attn)?)?;
        let ff = self.ff_out.forward(f, self.ff_in.forward(f, x)?.mish()?)?;
        self.norm2.forward(f, x.add(ff)?)
    }
}

/// Encoder blocks followed by the flattened classifier head.
#[derive(Clone, Debug)]
pub struct TransformerNet {
    pub config: AttentionConfig,
    pub blocks: Vec<TransformerBlock>,
    pub head: ClassifierHead,
    timing: Tensor,
}

impl TransformerNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        num_blocks: usize,
        head_width: usize,
        classes: usize,
        dropout: f64,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = (0..num_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), config, rng))
            .collect();
        let head = ClassifierHead::new(
            store,
            &format!("{prefix}.head"),
            config.flatten_dim(),
            head_width,
            classes,
            dropout,
            bn_eps,
            bn_momentum,
            rng,
        );
        Ok(Self {
            config,
            blocks,
            head,
            timing: positional_encoding(config.seq_len, config.d_model),
        })
    }

    /// Encoder output `[B, S, D]` before flattening.
    pub fn encode<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let c = self.config;
        if shape.len() != 3 || shape[1] != c.seq_len || shape[2] != c.d_model {
            return Err(shape_err(
                "transformer",
                format!("input {shape:?}, expected [B, {}, {}]", c.seq_len, c.d_model),
            ));
        }
        let mut h = x.add(f.constant(self.timing.clone()))?;
        for block in &self.blocks {
            h = block.forward(f, h)?;
        }
        Ok(h)
    }

    pub fn forward<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<HeadOutput<'t>> {
        let b = x.shape()[0];
        let h = self.encode(f, x)?.reshape(&[b, self.config.flatten_dim()])?;
        self.head.forward(f, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(config: AttentionConfig, seed: u64) -> (ParamStore, TransformerBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = TransformerBlock::new(&mut store, "b", config, &mut rng);
        (store, b)
    }

    #[test]
    fn timing_signal() {
        let pe = positional_encoding(64, 66);
        assert_eq!(pe.shape(), &[64, 66]);
        for c in (0..66).step_by(2) {
            assert_eq!(pe.get(&[0, c]), 0.0);
            assert_eq!(pe.get(&[0, c + 1]), 1.0);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, positional_encoding(64, 66));
    }

    #[test]
    fn full_block_parameter_count() {
        let (store, _) = block(AttentionConfig::full(), 0);
        assert_eq!(store.count(), 53_130);
    }

    #[test]
    fn single_position_attends_to_itself() {
        let cfg = AttentionConfig { d_model: 6, heads: 2, ff_dim: 12, seq_len: 1 };
        let (store, b) = block(cfg, 1);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let x = tape.constant(Tensor::uniform(&[1, 1, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let (out, w) = b.self_attention(&f, x).unwrap();
        assert!(w.value().data().iter().all(|&v| v == 1.0));
        let expected = b.output.forward(&f, b.value.forward(&f, x).unwrap()).unwrap();
        assert!(out.value().max_abs_diff(&expected.value()) < 1e-15);
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let cfg = AttentionConfig { d_model: 6, heads: 3, ff_dim: 12, seq_len: 5 };
        let (store, b) = block(cfg, 3);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let row = [0.3, -0.2, 0.9, 1.1, -0.5, 0.0];
        let data: Vec<f64> = (0..5).flat_map(|_| row).collect();
        let x = tape.constant(Tensor::new(&[1, 5, 6], data).unwrap());
        let (_, w) = b.self_attention(&f, x).unwrap();
        for v in w.value().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = AttentionConfig { d_model: 6, heads: 2, ff_dim: 12, seq_len: 7 };
        let (store, b) = block(cfg, 4);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let x = tape.constant(Tensor::uniform(&[3, 7, 6], 2.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let (_, w) = b.self_attention(&f, x).unwrap();
        for row in w.value().data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_single_head_attention() {
        // 2 positions, d_model 6, 1 head; Q = K = V = output = identity, zero biases.
        let cfg = AttentionConfig { d_model: 6, heads: 1, ff_dim: 6, seq_len: 2 };
        let (mut store, b) = block(cfg, 6);
        for lin in [&b.query, &b.key, &b.value, &b.output] {
            *store.tensor_mut(lin.weight) = Tensor::eye(6);
        }
        let x = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        let (out, w) = b
            .self_attention(&f, tape.constant(Tensor::new(&[1, 2, 6], x.to_vec()).unwrap()))
            .unwrap();
        // scores = x xᵀ / sqrt(6) = [[1, 0], [0, 4]] / sqrt(6)
        let s = 6f64.sqrt();
        let w00 = (1.0 / s).exp() / ((1.0 / s).exp() + 1.0);
        let w11 = (4.0 / s).exp() / ((4.0 / s).exp() + 1.0);
        let wv = w.value();
        assert!((wv.get(&[0, 0, 0]) - w00).abs() < 1e-15);
        assert!((wv.get(&[0, 1, 1]) - w11).abs() < 1e-15);
        let ov = out.value();
        assert!((ov.get(&[0, 0, 0]) - w00).abs() < 1e-15);
        assert!((ov.get(&[0, 0, 1]) - 2.0 * (1.0 - w00)).abs() < 1e-15);
        assert!((ov.get(&[0, 1, 0]) - (1.0 - w11)).abs() < 1e-15);
        assert!((ov.get(&[0, 1, 1]) - 2.0 * w11).abs() < 1e-15);
    }

    #[test]
    fn rejects_wrong_shape() {
        let (store, b) = block(AttentionConfig { d_model: 6, heads: 2, ff_dim: 12, seq_len: 4 }, 7);
        let tape = Tape::new();
        let f = Forward::new(&tape, &store, Mode::Eval, 0);
        assert!(b.forward(&f, tape.constant(Tensor::ones(&[1, 4, 5]))).is_err());
        assert!(AttentionConfig { d_model: 6, heads: 4, ff_dim: 12, seq_len: 4 }.validate().is_err());
    }
}
