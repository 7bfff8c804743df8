//! Optimizer, training loops and autoregressive inference.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::autoencoder::FrameAutoencoder;
use super::layers::{Binder, ParamStore};
use super::tape::{ParamGrads, Tape, Tensor};
use super::transformer::{shift_right, DeformTransformer};
use crate::error::{Error, Result};
use crate::tsacap::{FeatureFrame, FEATURE_DIM};

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, t) in store.tensors.iter_mut().enumerate() {
            let Some(g) = &grads.grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..t.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                t.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Items (frames or windows) per optimizer step; 0 means the whole set.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-3,
            batch: 0,
            seed: 0,
        }
    }
}

fn batches(n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let size = if cfg.batch == 0 { n } else { cfg.batch.min(n) };
    if size < n {
        order.shuffle(rng);
    }
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Rows `[i·block, (i+1)·block)` of `t` for each index, concatenated.
fn gather(t: &Tensor, block: usize, idx: impl IntoIterator<Item = usize>) -> Tensor {
    let width = block * t.cols;
    let mut data = Vec::new();
    for i in idx {
        data.extend_from_slice(&t.data[i * width..(i + 1) * width]);
    }
    let rows = data.len() / t.cols.max(1);
    Tensor::from_vec(rows, t.cols, data)
}

fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

/// Trains encoder and decoder jointly on reconstruction MSE of standardized
/// features. Returns the mean loss of every epoch.
pub fn train_autoencoder(ae: &mut FrameAutoencoder, frames: &[FeatureFrame], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if frames.is_empty() {
        return Err(Error::Shape("no frames to train on".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.vertex_count() != ae.vertex_count) {
        return Err(Error::Shape(format!(
            "autoencoder has {} vertices, frame has {}",
            ae.vertex_count,
            f.vertex_count()
        )));
    }
    let data = ae.stats.normalize(frames);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&ae.store, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in batches(frames.len(), cfg, &mut rng) {
            let x = gather(&data, ae.vertex_count, batch.iter().copied());
            let target = Rc::new(x.clone());
            let mut tape = Tape::new();
            let mut p = Binder::new(&ae.store, true);
            let xv = tape.constant(x);
            let z = ae.encode_var(&mut tape, &mut p, xv);
            let y = ae.decode_var(&mut tape, &mut p, z);
            let loss = tape.mse(y, target);
            let value = tape.value(loss).data[0];
            check_loss(value, epoch)?;
            total += value * batch.len() as f64;
            let grads = tape.backward(loss, ae.store.len());
            adam.step(&mut ae.store, &grads);
        }
        curve.push(total / frames.len() as f64);
    }
    Ok(curve)
}

/// Latent rows `[start, start + len)`.
fn rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    Tensor::from_vec(len, t.cols, t.data[start * t.cols..(start + len) * t.cols].to_vec())
}

/// Paired training data for the transformer.
pub struct WindowData<'a> {
    pub coarse_latents: &'a Tensor,
    pub fine_latents: &'a Tensor,
    pub fine_frames: &'a [FeatureFrame],
}

impl WindowData<'_> {
    fn check(&self, xf: &DeformTransformer, fine_ae: &FrameAutoencoder) -> Result<usize> {
        let t = self.coarse_latents.rows;
        if self.fine_latents.rows != t || self.fine_frames.len() != t {
            return Err(Error::Alignment(format!(
                "{} coarse latents, {} fine latents, {} fine frames",
                t,
                self.fine_latents.rows,
                self.fine_frames.len()
            )));
        }
        let d = xf.shape.dim;
        if self.coarse_latents.cols != d || self.fine_latents.cols != d || fine_ae.latent != d {
            return Err(Error::Shape(format!("latent widths must equal the model dim {d}")));
        }
        Ok(t)
    }
}

/// Stacked sources, shifted decoder inputs and standardized fine targets for
/// the windows starting at `starts`.
fn window_batch(data: &WindowData, fine_norm: &Tensor, v: usize, w: usize, starts: &[usize]) -> (Tensor, Tensor, Tensor) {
    let src: Vec<Tensor> = starts.iter().map(|&s| rows(data.coarse_latents, s, w)).collect();
    let tgt: Vec<Tensor> = starts.iter().map(|&s| shift_right(&rows(data.fine_latents, s, w))).collect();
    let stack = |parts: &[Tensor]| {
        let cols = parts[0].cols;
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::from_vec(data.len() / cols, cols, data)
    };
    let targets = gather(fine_norm, v, starts.iter().flat_map(|&s| s..s + w));
    (stack(&src), stack(&tgt), targets)
}

/// Teacher-forced training on sliding windows. The loss is the MSE between
/// the fine decoder's output for the predicted latents and the standardized
/// ground-truth fine features; the decoder is frozen.
pub fn train_transformer(
    xf: &mut DeformTransformer,
    data: &WindowData,
    fine_ae: &FrameAutoencoder,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let t = data.check(xf, fine_ae)?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if t == 0 {
        return Err(Error::Shape("no frames to train on".into()));
    }
    let w = xf.shape.window.min(t);
    let window_count = t - w + 1;
    let fine_norm = fine_ae.stats.normalize(data.fine_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&xf.store, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in batches(window_count, cfg, &mut rng) {
            let (src, tgt, targets) = window_batch(data, &fine_norm, fine_ae.vertex_count, w, &batch);
            let mut tape = Tape::new();
            let mut p = Binder::new(&xf.store, true);
            let mut frozen = Binder::new(&fine_ae.store, false);
            let s = tape.constant(src);
            let g = tape.constant(tgt);
            let pred = xf.forward_var(&mut tape, &mut p, s, g, batch.len());
            let decoded = fine_ae.decode_var(&mut tape, &mut frozen, pred);
            let loss = tape.mse(decoded, Rc::new(targets));
            let value = tape.value(loss).data[0];
            check_loss(value, epoch)?;
            total += value * batch.len() as f64;
            let grads = tape.backward(loss, xf.store.len());
            adam.step(&mut xf.store, &grads);
        }
        curve.push(total / window_count as f64);
    }
    Ok(curve)
}

/// Mean squared error in raw feature units between the decoded teacher-forced
/// predictions of every window and the ground-truth fine features.
pub fn teacher_forced_feature_mse(xf: &DeformTransformer, data: &WindowData, fine_ae: &FrameAutoencoder) -> Result<f64> {
    let t = data.check(xf, fine_ae)?;
    if t == 0 {
        return Ok(0.0);
    }
    let w = xf.shape.window.min(t);
    let starts: Vec<usize> = (0..=t - w).collect();
    let fine_norm = fine_ae.stats.normalize(data.fine_frames);
    let (src, tgt, _) = window_batch(data, &fine_norm, fine_ae.vertex_count, w, &starts);
    let mut tape = Tape::new();
    let mut p = Binder::new(&xf.store, false);
    let mut frozen = Binder::new(&fine_ae.store, false);
    let s = tape.constant(src);
    let g = tape.constant(tgt);
    let pred = xf.forward_var(&mut tape, &mut p, s, g, starts.len());
    let decoded = fine_ae.decode_var(&mut tape, &mut frozen, pred);
    let frames = fine_ae.stats.denormalize(tape.value(decoded), fine_ae.vertex_count);
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, frame) in frames.iter().enumerate() {
        let truth = &data.fine_frames[starts[k / w] + k % w];
        for (a, b) in frame.vectors.iter().zip(&truth.vectors) {
            for c in 0..FEATURE_DIM {
                sum += (a[c] - b[c]) * (a[c] - b[c]);
            }
            n += FEATURE_DIM;
        }
    }
    Ok(sum / n.max(1) as f64)
}

/// Autoregressive fine latents for a coarse latent sequence. The first
/// window is generated position by position from a zero start row; every
/// later window reuses already generated frames as decoder input and
/// contributes its last position.
pub fn synthesize_latents(xf: &DeformTransformer, coarse_latents: &Tensor) -> Result<Tensor> {
    let d = xf.shape.dim;
    if coarse_latents.cols != d {
        return Err(Error::Shape(format!("latent width {} != model dim {d}", coarse_latents.cols)));
    }
    let t = coarse_latents.rows;
    if t == 0 {
        return Ok(Tensor::zeros(0, d));
    }
    let w = xf.shape.window.min(t);
    let mut generated = Tensor::zeros(t, d);
    let first = rows(coarse_latents, 0, w);
    for pos in 0..w {
        let input = shift_right(&rows(&generated, 0, pos + 1));
        let out = xf.forward(&first, &input)?;
        generated.data[pos * d..(pos + 1) * d].copy_from_slice(out.row(pos));
    }
    for start in 1..=t - w {
        let src = rows(coarse_latents, start, w);
        let input = shift_right(&rows(&generated, start, w));
        let out = xf.forward(&src, &input)?;
        let last = start + w - 1;
        generated.data[last * d..(last + 1) * d].copy_from_slice(out.row(w - 1));
    }
    Ok(generated)
}
