//! The complete coarse-to-fine model, its checkpoint format and sequence
//! synthesis.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::autoencoder::{FeatureStats, FrameAutoencoder};
use super::train::synthesize_latents;
use super::transformer::{DeformTransformer, TransformerShape};
use crate::error::{Error, Result};
use crate::harness::baseline::Resampler;
use crate::mesh::{Mesh, MeshSequence, Vec3};
use crate::reconstruct::{Energy, Reconstructor};
use crate::tsacap::{encode_sequence, ResolveConfig, FEATURE_DIM};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTFM0001";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub seed: u64,
    pub lr: f64,
    pub channels: usize,
    pub latent: usize,
    pub transformer: TransformerShape,
    pub resolve: ResolveConfig,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            seed: 0,
            lr: 1e-3,
            channels: FEATURE_DIM,
            latent: 16,
            transformer: TransformerShape::default(),
            resolve: ResolveConfig::default(),
        }
    }
}

/// Coarse and fine autoencoders plus the transformer between their latents.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformModels {
    pub hyper: Hyperparameters,
    pub coarse_mesh: Mesh,
    pub fine_mesh: Mesh,
    pub coarse_ae: FrameAutoencoder,
    pub fine_ae: FrameAutoencoder,
    pub transformer: DeformTransformer,
    pub autoencoders_trained: bool,
    pub transformer_trained: bool,
}

impl DeformModels {
    /// Fresh, untrained models. Component seeds derive from `hyper.seed`.
    pub fn new(coarse_mesh: &Mesh, fine_mesh: &Mesh, hyper: Hyperparameters) -> Result<Self> {
        if hyper.latent != hyper.transformer.dim {
            return Err(Error::Config(format!(
                "latent size {} must equal the transformer dim {}",
                hyper.latent, hyper.transformer.dim
            )));
        }
        let seed = hyper.seed;
        Ok(DeformModels {
            hyper,
            coarse_mesh: coarse_mesh.clone(),
            fine_mesh: fine_mesh.clone(),
            coarse_ae: FrameAutoencoder::new(coarse_mesh, hyper.channels, hyper.latent, seed.wrapping_mul(3).wrapping_add(1))?,
            fine_ae: FrameAutoencoder::new(fine_mesh, hyper.channels, hyper.latent, seed.wrapping_mul(3).wrapping_add(2))?,
            transformer: DeformTransformer::new(hyper.transformer, seed.wrapping_mul(3).wrapping_add(3))?,
            autoencoders_trained: false,
            transformer_trained: false,
        })
    }

    /// Fine mesh sequence synthesized from a coarse one. Vertex 0 of the fine
    /// mesh is anchored at the coarse surface point with the same rest position.
    pub fn synthesize_sequence(&self, coarse: &MeshSequence) -> Result<MeshSequence> {
        if !(self.autoencoders_trained && self.transformer_trained) {
            return Err(Error::State("models have not been trained".into()));
        }
        if coarse.reference.vertex_count() != self.coarse_mesh.vertex_count() || coarse.reference.faces() != self.coarse_mesh.faces() {
            return Err(Error::Shape("coarse sequence topology differs from the trained coarse mesh".into()));
        }
        if coarse.frame_count() == 0 {
            return MeshSequence::new(self.fine_mesh.clone(), Vec::new());
        }
        let features = encode_sequence(coarse, &self.hyper.resolve)?.features;
        let coarse_latents = self.coarse_ae.encode_frames(&features.frames)?;
        let fine_latents = synthesize_latents(&self.transformer, &coarse_latents)?;
        let fine_features = self.fine_ae.decode_latents(&fine_latents)?;
        let anchor = Resampler::new(
            self.coarse_mesh.vertices(),
            self.coarse_mesh.faces(),
            &self.fine_mesh.vertices()[..1],
        )?;
        let rec = Reconstructor::new(&self.fine_mesh, Energy::default(), 0)?;
        let frames = fine_features
            .iter()
            .zip(&coarse.frames)
            .map(|(f, c)| rec.reconstruct(f, anchor.apply(c)[0]))
            .collect::<Result<Vec<_>>>()?;
        MeshSequence::new(self.fine_mesh.clone(), frames)
    }

    fn header(&self) -> BTreeMap<&'static str, String> {
        let h = &self.hyper;
        let t = &h.transformer;
        BTreeMap::from([
            ("seed", h.seed.to_string()),
            ("lr", h.lr.to_string()),
            ("channels", h.channels.to_string()),
            ("latent", h.latent.to_string()),
            ("heads", t.heads.to_string()),
            ("hidden", t.hidden.to_string()),
            ("blocks", t.blocks.to_string()),
            ("window", t.window.to_string()),
            ("eps1", h.resolve.eps1.to_string()),
            ("eps2", h.resolve.eps2.to_string()),
            ("temporal", h.resolve.temporal.to_string()),
            ("coarse_vertices", self.coarse_mesh.vertex_count().to_string()),
            ("coarse_faces", self.coarse_mesh.face_count().to_string()),
            ("fine_vertices", self.fine_mesh.vertex_count().to_string()),
            ("fine_faces", self.fine_mesh.face_count().to_string()),
            ("autoencoders_trained", self.autoencoders_trained.to_string()),
            ("transformer_trained", self.transformer_trained.to_string()),
        ])
    }

    /// `DTFM0001`, u32 header length, `key=value` header lines, u64 value
    /// count, then little-endian f64 values: both meshes (vertices, then
    /// faces as integers), each autoencoder's statistics and parameters, and
    /// the transformer parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header: String = self.header().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut blob: Vec<f64> = Vec::new();
        for mesh in [&self.coarse_mesh, &self.fine_mesh] {
            blob.extend(mesh.vertices().iter().flat_map(|p| [p.x, p.y, p.z]));
            blob.extend(mesh.faces().iter().flat_map(|f| f.map(|i| i as f64)));
        }
        for ae in [&self.coarse_ae, &self.fine_ae] {
            blob.extend(ae.stats.mean);
            blob.extend(ae.stats.std);
            blob.extend(ae.store.flatten());
        }
        blob.extend(self.transformer.store.flatten());

        let mut out = Vec::with_capacity(8 + 4 + header.len() + 8 + 8 * blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("not a DTFM0001 checkpoint"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12 + hlen;
        if bytes.len() < header_end + 8 {
            return Err(fmt("truncated checkpoint header"));
        }
        let text = std::str::from_utf8(&bytes[12..header_end]).map_err(|_| fmt("header is not UTF-8"))?;
        let header: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        fn field<T: std::str::FromStr>(h: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
            h.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks a valid `{key}`")))
        }
        let count = u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().expect("8 bytes")) as usize;
        let data = &bytes[header_end + 8..];
        if data.len() != count.checked_mul(8).ok_or_else(|| fmt("value count overflows"))? {
            return Err(fmt("checkpoint value count does not match its length"));
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

        let hyper = Hyperparameters {
            seed: field(&header, "seed")?,
            lr: field(&header, "lr")?,
            channels: field(&header, "channels")?,
            latent: field(&header, "latent")?,
            transformer: TransformerShape {
                dim: field(&header, "latent")?,
                heads: field(&header, "heads")?,
                hidden: field(&header, "hidden")?,
                blocks: field(&header, "blocks")?,
                window: field(&header, "window")?,
            },
            resolve: ResolveConfig {
                eps1: field(&header, "eps1")?,
                eps2: field(&header, "eps2")?,
                temporal: field(&header, "temporal")?,
            },
        };
        let mut cursor = values.as_slice();
        let mut take = |n: usize| -> Result<&[f64]> {
            if cursor.len() < n {
                return Err(Error::Format("checkpoint blob is too short".into()));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        let mut meshes = Vec::with_capacity(2);
        for prefix in ["coarse", "fine"] {
            let nv: usize = field(&header, &format!("{prefix}_vertices"))?;
            let nf: usize = field(&header, &format!("{prefix}_faces"))?;
            let verts = take(3 * nv)?.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let faces = take(3 * nf)?
                .chunks(3)
                .map(|c| {
                    let idx = |x: f64| {
                        if x >= 0.0 && x.fract() == 0.0 && (x as usize) < nv {
                            Ok(x as usize)
                        } else {
                            Err(Error::Format(format!("bad face index {x} in checkpoint")))
                        }
                    };
                    Ok([idx(c[0])?, idx(c[1])?, idx(c[2])?])
                })
                .collect::<Result<Vec<_>>>()?;
            meshes.push(Mesh::with_weights(verts, faces)?);
        }
        let mut models = DeformModels::new(&meshes[0], &meshes[1], hyper)?;
        for ae in [&mut models.coarse_ae, &mut models.fine_ae] {
            let mean = take(FEATURE_DIM)?;
            let std = take(FEATURE_DIM)?;
            ae.stats = FeatureStats {
                mean: std::array::from_fn(|k| mean[k]),
                std: std::array::from_fn(|k| std[k]),
            };
            let n = ae.store.scalar_count();
            ae.store.load_flat(take(n)?).expect("length checked");
        }
        let n = models.transformer.store.scalar_count();
        models.transformer.store.load_flat(take(n)?).expect("length checked");
        if !cursor.is_empty() {
            return Err(fmt("checkpoint has trailing values"));
        }
        models.autoencoders_trained = field(&header, "autoencoders_trained")?;
        models.transformer_trained = field(&header, "transformer_trained")?;
        Ok(models)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
