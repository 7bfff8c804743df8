//! Graph-convolutional frame encoder/decoder between per-vertex 9-vectors and
//! a per-frame latent code.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Binder, GraphConv, Linear, ParamStore};
use super::tape::{Neighborhood, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::tsacap::{FeatureFrame, FEATURE_DIM};

/// Smallest per-channel standard deviation used for standardization.
pub const STD_FLOOR: f64 = 1e-3;

/// Per-channel mean and standard deviation of the 9-vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureStats {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

impl Default for FeatureStats {
    fn default() -> Self {
        FeatureStats {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
        }
    }
}

impl FeatureStats {
    pub fn from_frames(frames: &[FeatureFrame]) -> Self {
        let mut sum = [0.0; FEATURE_DIM];
        let mut n = 0usize;
        for v in frames.iter().flat_map(|f| &f.vectors) {
            for k in 0..FEATURE_DIM {
                sum[k] += v[k];
            }
            n += 1;
        }
        if n == 0 {
            return FeatureStats::default();
        }
        let mean = sum.map(|s| s / n as f64);
        let mut var = [0.0; FEATURE_DIM];
        for v in frames.iter().flat_map(|f| &f.vectors) {
            for k in 0..FEATURE_DIM {
                var[k] += (v[k] - mean[k]) * (v[k] - mean[k]);
            }
        }
        let std = var.map(|s| (s / n as f64).sqrt().max(STD_FLOOR));
        FeatureStats { mean, std }
    }

    /// Frames stacked by rows into an `(F·V)×9` standardized tensor.
    pub fn normalize(&self, frames: &[FeatureFrame]) -> Tensor {
        let rows: usize = frames.iter().map(FeatureFrame::vertex_count).sum();
        let mut data = Vec::with_capacity(rows * FEATURE_DIM);
        for v in frames.iter().flat_map(|f| &f.vectors) {
            for k in 0..FEATURE_DIM {
                data.push((v[k] - self.mean[k]) / self.std[k]);
            }
        }
        Tensor::from_vec(rows, FEATURE_DIM, data)
    }

    /// Inverse of [`Self::normalize`], split into frames of `vertex_count`.
    pub fn denormalize(&self, t: &Tensor, vertex_count: usize) -> Vec<FeatureFrame> {
        t.data
            .chunks(FEATURE_DIM * vertex_count.max(1))
            .map(|frame| FeatureFrame {
                vectors: frame
                    .chunks(FEATURE_DIM)
                    .map(|c| std::array::from_fn(|k| c[k] * self.std[k] + self.mean[k]))
                    .collect(),
            })
            .collect()
    }
}

/// Two graph convolutions and a linear map into the latent space, mirrored by
/// the decoder.
#[derive(Debug, Clone)]
pub struct FrameAutoencoder {
    pub vertex_count: usize,
    pub channels: usize,
    pub latent: usize,
    pub store: ParamStore,
    pub stats: FeatureStats,
    enc1: GraphConv,
    enc2: GraphConv,
    enc_fc: Linear,
    dec_fc: Linear,
    dec1: GraphConv,
    dec2: GraphConv,
    neighborhood: Rc<Neighborhood>,
}

impl PartialEq for FrameAutoencoder {
    fn eq(&self, other: &Self) -> bool {
        self.vertex_count == other.vertex_count
            && self.channels == other.channels
            && self.latent == other.latent
            && self.store == other.store
            && self.stats == other.stats
            && self.neighborhood == other.neighborhood
    }
}

pub(crate) fn neighborhood(mesh: &Mesh) -> Result<Rc<Neighborhood>> {
    if let Some(v) = (0..mesh.vertex_count()).find(|&v| mesh.neighbors(v).is_empty()) {
        return Err(Error::DegenerateNeighborhood { vertex: v });
    }
    Ok(Rc::new(Neighborhood {
        adjacency: mesh.adjacency().to_vec(),
    }))
}

impl FrameAutoencoder {
    pub fn new(mesh: &Mesh, channels: usize, latent: usize, seed: u64) -> Result<Self> {
        let neighborhood = neighborhood(mesh)?;
        if channels == 0 || latent == 0 {
            return Err(Error::Config("autoencoder channels and latent size must be positive".into()));
        }
        let v = mesh.vertex_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let enc1 = GraphConv::new(&mut store, "enc.conv1", FEATURE_DIM, channels, &mut rng);
        let enc2 = GraphConv::new(&mut store, "enc.conv2", channels, channels, &mut rng);
        let enc_fc = Linear::new(&mut store, "enc.fc", v * channels, latent, &mut rng);
        let dec_fc = Linear::new(&mut store, "dec.fc", latent, v * channels, &mut rng);
        let dec1 = GraphConv::new(&mut store, "dec.conv1", channels, channels, &mut rng);
        let dec2 = GraphConv::new(&mut store, "dec.conv2", channels, FEATURE_DIM, &mut rng);
        Ok(FrameAutoencoder {
            vertex_count: v,
            channels,
            latent,
            store,
            stats: FeatureStats::default(),
            enc1,
            enc2,
            enc_fc,
            dec_fc,
            dec1,
            dec2,
            neighborhood,
        })
    }

    pub fn neighborhood(&self) -> &Rc<Neighborhood> {
        &self.neighborhood
    }

    /// Standardized `(F·V)×9` input to `F×latent` codes.
    pub fn encode_var(&self, tape: &mut Tape, p: &mut Binder, x: Var) -> Var {
        let rows = tape.value(x).rows;
        let frames = rows / self.vertex_count;
        let h = self.enc1.forward(tape, p, x, &self.neighborhood);
        let h = tape.tanh(h);
        let h = self.enc2.forward(tape, p, h, &self.neighborhood);
        let flat = tape.reshape(h, frames, self.vertex_count * self.channels);
        self.enc_fc.forward(tape, p, flat)
    }

    /// `F×latent` codes to standardized `(F·V)×9` features.
    pub fn decode_var(&self, tape: &mut Tape, p: &mut Binder, z: Var) -> Var {
        let frames = tape.value(z).rows;
        let h = self.dec_fc.forward(tape, p, z);
        let h = tape.reshape(h, frames * self.vertex_count, self.channels);
        let h = self.dec1.forward(tape, p, h, &self.neighborhood);
        let h = tape.tanh(h);
        self.dec2.forward(tape, p, h, &self.neighborhood)
    }

    fn check_frames(&self, frames: &[FeatureFrame]) -> Result<()> {
        match frames.iter().find(|f| f.vertex_count() != self.vertex_count) {
            Some(f) => Err(Error::Shape(format!(
                "model built for {} vertices, frame has {}",
                self.vertex_count,
                f.vertex_count()
            ))),
            None => Ok(()),
        }
    }

    /// Latent codes (`F×latent`) of raw feature frames.
    pub fn encode_frames(&self, frames: &[FeatureFrame]) -> Result<Tensor> {
        self.check_frames(frames)?;
        if frames.is_empty() {
            return Ok(Tensor::zeros(0, self.latent));
        }
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.store, false);
        let x = tape.constant(self.stats.normalize(frames));
        let z = self.encode_var(&mut tape, &mut p, x);
        Ok(tape.value(z).clone())
    }

    /// Raw feature frames decoded from `F×latent` codes.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Vec<FeatureFrame>> {
        if z.cols != self.latent {
            return Err(Error::Shape(format!("latent width {} != {}", z.cols, self.latent)));
        }
        if z.rows == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut p = Binder::new(&self.store, false);
        let zv = tape.constant(z.clone());
        let y = self.decode_var(&mut tape, &mut p, zv);
        Ok(self.stats.denormalize(tape.value(y), self.vertex_count))
    }
}
