//! Encoder-decoder transformer mapping coarse latent windows to fine latents.
//!
//! Several windows are processed at once by stacking them along the rows and
//! restricting attention to entries of the same window.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Binder, DecoderBlock, EncoderBlock, Linear, ParamStore};
use super::tape::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerShape {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub window: usize,
}

impl Default for TransformerShape {
    fn default() -> Self {
        TransformerShape {
            dim: 16,
            heads: 8,
            hidden: 64,
            blocks: 2,
            window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformTransformer {
    pub shape: TransformerShape,
    pub store: ParamStore,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: Linear,
}

/// Sinusoidal position code: `sin(p / 10000^(2i/d))` in even columns and the
/// matching cosine in odd ones.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / freq;
            t.data[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

/// Attention masks for `windows` stacked windows: encoder self-attention,
/// causal decoder self-attention and decoder-to-encoder cross-attention.
pub fn window_masks(windows: usize, src_len: usize, tgt_len: usize) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let (ns, nt) = (windows * src_len, windows * tgt_len);
    let enc = (0..ns * ns).map(|k| (k / ns) / src_len == (k % ns) / src_len).collect();
    let dec = (0..nt * nt)
        .map(|k| {
            let (r, c) = (k / nt, k % nt);
            r / tgt_len == c / tgt_len && c % tgt_len <= r % tgt_len
        })
        .collect();
    let cross = (0..nt * ns).map(|k| (k / ns) / tgt_len == (k % ns) / src_len).collect();
    (enc, dec, cross)
}

fn tile(pe: &Tensor, windows: usize) -> Tensor {
    let mut data = Vec::with_capacity(pe.len() * windows);
    for _ in 0..windows {
        data.extend_from_slice(&pe.data);
    }
    Tensor::from_vec(pe.rows * windows, pe.cols, data)
}

impl DeformTransformer {
    pub fn new(shape: TransformerShape, seed: u64) -> Result<Self> {
        if shape.dim == 0 || shape.heads == 0 || shape.dim % shape.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be a positive multiple of {} heads",
                shape.dim, shape.heads
            )));
        }
        if shape.window == 0 || shape.blocks == 0 || shape.hidden == 0 {
            return Err(Error::Config("window, blocks and hidden size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder = (0..shape.blocks)
            .map(|b| EncoderBlock::new(&mut store, &format!("enc{b}"), shape.dim, shape.heads, shape.hidden, &mut rng))
            .collect();
        let decoder = (0..shape.blocks)
            .map(|b| DecoderBlock::new(&mut store, &format!("dec{b}"), shape.dim, shape.heads, shape.hidden, &mut rng))
            .collect();
        let output = Linear::new(&mut store, "out", shape.dim, shape.dim, &mut rng);
        Ok(DeformTransformer {
            shape,
            store,
            encoder,
            decoder,
            output,
        })
    }

    pub fn output_layer(&self) -> Linear {
        self.output
    }

    /// `windows` stacked windows: `source` is `(windows·src_len)×d`, `target`
    /// (the right-shifted decoder input) is `(windows·tgt_len)×d`.
    pub fn forward_var(&self, tape: &mut Tape, p: &mut Binder, source: Var, target: Var, windows: usize) -> Var {
        let d = self.shape.dim;
        let src_len = tape.value(source).rows / windows;
        let tgt_len = tape.value(target).rows / windows;
        let (enc_mask, dec_mask, cross_mask) = window_masks(windows, src_len, tgt_len);
        let pe_src = tape.constant(tile(&positional_encoding(src_len, d), windows));
        let pe_tgt = tape.constant(tile(&positional_encoding(tgt_len, d), windows));
        let mut memory = tape.add(source, pe_src);
        for block in &self.encoder {
            memory = block.forward(tape, p, memory, &enc_mask);
        }
        let mut x = tape.add(target, pe_tgt);
        for block in &self.decoder {
            x = block.forward(tape, p, x, memory, &dec_mask, &cross_mask);
        }
        self.output.forward(tape, p, x)
    }

    fn check(&self, t: &Tensor, what: &str) -> Result<()> {
        if t.cols != self.shape.dim {
            return Err(Error::Shape(format!("{what} width {} != model dim {}", t.cols, self.shape.dim)));
        }
        Ok(())
    }

    /// One window: predictions for every decoder position.
    pub fn forward(&self, source: &Tensor, target: &Tensor) -> Result<Tensor> {
        self.check(source, "source")?;
        self.check(target, "target")?;
        if source.rows == 0 || target.rows == 0 || source.rows > self.shape.window || target.rows > source.rows {
            return Err(Error::Shape(format!(
                "window lengths: source {}, target {} (window {})",
                source.rows, target.rows, self.shape.window
            )));
        }
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.store, false);
        let s = tape.constant(source.clone());
        let t = tape.constant(target.clone());
        let y = self.forward_var(&mut tape, &mut p, s, t, 1);
        Ok(tape.value(y).clone())
    }
}

/// Decoder input for teacher forcing: a zero row followed by all but the last target row.
pub fn shift_right(target: &Tensor) -> Tensor {
    if target.rows == 0 {
        return target.clone();
    }
    let mut data = vec![0.0; target.cols];
    data.extend_from_slice(&target.data[..target.len().saturating_sub(target.cols)]);
    Tensor::from_vec(target.rows, target.cols, data)
}
