//! End-to-end run: synthetic data, features, training, synthesis, collision
//! refinement and evaluation against the subdivided-coarse baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::baseline::{levels_for, subdivided_baseline};
use super::config::KeyValues;
use super::data::{gen_dataset, SyntheticConfig};
use super::metrics::{mean_hausdorff, rmse, sted};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, MeshSequence};
use crate::neuralnet::{
    teacher_forced_feature_mse, train_autoencoder, train_transformer, DeformModels, FeatureStats, Hyperparameters,
    TrainConfig, WindowData,
};
use crate::postprocess::{refine, Obstacle, RefineConfig, RefineReport, Shape};
use crate::reconstruct::write_sequence;
use crate::tsacap::{encode_sequence, write_features, FeatureSequence, ResolveConfig};

/// Collision margin as a fraction of the rest mesh's bounding-box diagonal
/// when `obstacle_margin` is not given.
pub const DEFAULT_MARGIN_FRACTION: f64 = 1e-3;

pub const METRICS_HEADER: &str = "dataset,method,rmse,hausdorff,sted,seconds_per_frame";

/// Every key understood by [`PipelineConfig::from_key_values`].
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "dataset",
    "motion",
    "coarse",
    "fine",
    "frames",
    "wrinkle_amplitude",
    "wrinkle_frequency",
    "spin_total",
    "lr",
    "channels",
    "ae_epochs",
    "ae_batch",
    "xf_epochs",
    "xf_batch",
    "eps1",
    "eps2",
    "temporal",
    "obstacle",
    "obstacle_center",
    "obstacle_radius",
    "obstacle_p0",
    "obstacle_p1",
    "obstacle_axis",
    "obstacle_height",
    "obstacle_margin",
    "refine_lambda",
    "refine_max_iter",
    "write_frames",
];

/// Obstacle shape plus an optional explicit margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleSpec {
    pub shape: Shape,
    pub margin: Option<f64>,
}

impl ObstacleSpec {
    /// Builds the obstacle; a missing margin is derived from `rest`.
    pub fn build(&self, rest: &Mesh) -> Result<Obstacle> {
        let margin = self
            .margin
            .unwrap_or_else(|| DEFAULT_MARGIN_FRACTION * Mesh::bbox_diagonal(rest.vertices()));
        Obstacle::new(self.shape, margin)
    }

    /// `Ok(None)` for `obstacle = none` or when the key is absent.
    pub fn from_key_values(kv: &KeyValues) -> Result<Option<Self>> {
        let kind = kv.raw("obstacle").unwrap_or("none").to_ascii_lowercase();
        let need_vec = |k: &str| kv.get_vec3(k)?.ok_or_else(|| Error::Config(format!("obstacle `{kind}` needs `{k}`")));
        let need = |k: &str| kv.get::<f64>(k)?.ok_or_else(|| Error::Config(format!("obstacle `{kind}` needs `{k}`")));
        let shape = match kind.as_str() {
            "none" => return Ok(None),
            "sphere" => Shape::Sphere {
                center: need_vec("obstacle_center")?,
                radius: need("obstacle_radius")?,
            },
            "capsule" => Shape::Capsule {
                p0: need_vec("obstacle_p0")?,
                p1: need_vec("obstacle_p1")?,
                radius: need("obstacle_radius")?,
            },
            "cylinder" => Shape::Cylinder {
                center: need_vec("obstacle_center")?,
                axis: need_vec("obstacle_axis")?,
                radius: need("obstacle_radius")?,
                height: need("obstacle_height")?,
            },
            other => return Err(Error::Config(format!("unknown obstacle `{other}` (none, sphere, capsule, cylinder)"))),
        };
        Ok(Some(ObstacleSpec {
            shape,
            margin: kv.get("obstacle_margin")?,
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Name written to the `dataset` column; defaults to the motion family.
    pub dataset_name: Option<String>,
    pub data: SyntheticConfig,
    pub hyper: Hyperparameters,
    pub ae_train: TrainConfig,
    pub xf_train: TrainConfig,
    pub obstacle: Option<ObstacleSpec>,
    pub refine: RefineConfig,
    /// Write OBJ frames for every sequence (ground truth, synthesis, baseline).
    pub write_frames: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 200,
            batch: 4,
            ..TrainConfig::default()
        };
        PipelineConfig {
            dataset_name: None,
            data: SyntheticConfig::default(),
            hyper: Hyperparameters::default(),
            ae_train: train,
            xf_train: train,
            obstacle: None,
            refine: RefineConfig::default(),
            write_frames: true,
        }
    }
}

impl PipelineConfig {
    /// Sets every seed (data, initialization, batch order) from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.hyper.seed = seed;
        self.ae_train.seed = seed;
        self.xf_train.seed = seed;
        self
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(CONFIG_KEYS)?;
        let d = PipelineConfig::default();
        let data = SyntheticConfig {
            coarse: kv.get_grid("coarse", d.data.coarse)?,
            fine: kv.get_grid("fine", d.data.fine)?,
            frame_count: kv.get_or("frames", d.data.frame_count)?,
            seed: 0,
            motion: kv.get_or("motion", d.data.motion)?,
            wrinkle_amplitude: kv.get_or("wrinkle_amplitude", d.data.wrinkle_amplitude)?,
            wrinkle_frequency: kv.get_or("wrinkle_frequency", d.data.wrinkle_frequency)?,
            spin_total: kv.get_or("spin_total", d.data.spin_total)?,
        };
        data.validate()?;
        let lr = kv.get_or("lr", d.hyper.lr)?;
        let hyper = Hyperparameters {
            lr,
            channels: kv.get_or("channels", d.hyper.channels)?,
            resolve: ResolveConfig {
                eps1: kv.get_or("eps1", d.hyper.resolve.eps1)?,
                eps2: kv.get_or("eps2", d.hyper.resolve.eps2)?,
                temporal: kv.get_or("temporal", d.hyper.resolve.temporal)?,
            },
            ..d.hyper
        };
        let ae_train = TrainConfig {
            epochs: kv.get_or("ae_epochs", d.ae_train.epochs)?,
            batch: kv.get_or("ae_batch", d.ae_train.batch)?,
            lr,
            ..d.ae_train
        };
        let xf_train = TrainConfig {
            epochs: kv.get_or("xf_epochs", d.xf_train.epochs)?,
            batch: kv.get_or("xf_batch", d.xf_train.batch)?,
            lr,
            ..d.xf_train
        };
        let refine = RefineConfig {
            lambda: kv.get_or("refine_lambda", d.refine.lambda)?,
            max_iter: kv.get_or("refine_max_iter", d.refine.max_iter)?,
        };
        let cfg = PipelineConfig {
            dataset_name: kv.raw("dataset").map(str::to_string),
            data,
            hyper,
            ae_train,
            xf_train,
            obstacle: ObstacleSpec::from_key_values(kv)?,
            refine,
            write_frames: kv.get_or("write_frames", d.write_frames)?,
        };
        Ok(cfg.with_seed(kv.get_or("seed", 0u64)?))
    }

    pub fn dataset_name(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| self.data.motion.to_string())
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub dataset: String,
    pub method: String,
    pub rmse: f64,
    pub hausdorff: f64,
    pub sted: f64,
    pub seconds_per_frame: f64,
}

impl MetricsRow {
    /// RMSE, mean per-frame Hausdorff and STED of `candidate` against `truth`.
    pub fn evaluate(dataset: &str, method: &str, truth: &MeshSequence, candidate: &MeshSequence, seconds_per_frame: f64) -> Result<Self> {
        Ok(MetricsRow {
            dataset: dataset.to_string(),
            method: method.to_string(),
            rmse: rmse(truth, candidate)?,
            hausdorff: mean_hausdorff(truth, candidate)?,
            sted: sted(truth, candidate)?,
            seconds_per_frame,
        })
    }
}

/// Header plus one line per row; floats use the shortest representation that
/// parses back to the same value.
pub fn format_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.dataset, r.method, r.rmse, r.hausdorff, r.sted, r.seconds_per_frame
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::Format(format!("metrics CSV must start with `{METRICS_HEADER}`"))),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: n + 1,
                    message: format!("bad number `{s}`"),
                })
            };
            if f.len() != 6 {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected 6 columns, got {}", f.len()),
                });
            }
            Ok(MetricsRow {
                dataset: f[0].to_string(),
                method: f[1].to_string(),
                rmse: num(f[2])?,
                hausdorff: num(f[3])?,
                sted: num(f[4])?,
                seconds_per_frame: num(f[5])?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub generate: f64,
    pub encode: f64,
    pub train_autoencoders: f64,
    pub train_transformer: f64,
    pub synthesize: f64,
    pub refine: f64,
    pub baseline: f64,
    pub metrics: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub rows: Vec<MetricsRow>,
    /// Teacher-forced fine-feature MSE (raw feature units) after training.
    pub feature_mse: f64,
    pub coarse_ae_curve: Vec<f64>,
    pub fine_ae_curve: Vec<f64>,
    pub transformer_curve: Vec<f64>,
    /// Refinement iterations per frame (empty without an obstacle).
    pub refine_iterations: Vec<usize>,
    /// Frames still penetrating after `max_iter` iterations.
    pub refine_failures: usize,
    pub timings: StageTimings,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

/// TS-ACAP features of a sequence against its own reference.
pub fn encode_stage(seq: &MeshSequence, resolve: &ResolveConfig) -> Result<FeatureSequence> {
    Ok(encode_sequence(seq, resolve)?.features)
}

/// Fits standardization statistics and trains both autoencoders; returns the
/// coarse and fine loss curves.
pub fn train_autoencoders_stage(
    models: &mut DeformModels,
    coarse: &FeatureSequence,
    fine: &FeatureSequence,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    models.coarse_ae.stats = FeatureStats::from_frames(&coarse.frames);
    models.fine_ae.stats = FeatureStats::from_frames(&fine.frames);
    let c = train_autoencoder(&mut models.coarse_ae, &coarse.frames, cfg)?;
    let f = train_autoencoder(&mut models.fine_ae, &fine.frames, cfg)?;
    models.autoencoders_trained = true;
    Ok((c, f))
}

/// Trains the transformer on paired sequences; returns the loss curve and the
/// final teacher-forced fine-feature MSE in raw units.
pub fn train_transformer_stage(
    models: &mut DeformModels,
    coarse: &FeatureSequence,
    fine: &FeatureSequence,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, f64)> {
    if !models.autoencoders_trained {
        return Err(Error::State("train the autoencoders before the transformer".into()));
    }
    let cl = models.coarse_ae.encode_frames(&coarse.frames)?;
    let fl = models.fine_ae.encode_frames(&fine.frames)?;
    let data = WindowData {
        coarse_latents: &cl,
        fine_latents: &fl,
        fine_frames: &fine.frames,
    };
    let curve = train_transformer(&mut models.transformer, &data, &models.fine_ae, cfg)?;
    let mse = teacher_forced_feature_mse(&models.transformer, &data, &models.fine_ae)?;
    models.transformer_trained = true;
    Ok((curve, mse))
}

/// Refines every frame against `obstacle`, starting from and regularized
/// toward the frame itself.
pub fn refine_sequence(seq: &MeshSequence, obstacle: &Obstacle, cfg: &RefineConfig) -> Result<(MeshSequence, Vec<RefineReport>)> {
    let reports = seq
        .frames
        .iter()
        .map(|f| refine(&seq.reference, f, obstacle, f, cfg))
        .collect::<Result<Vec<_>>>()?;
    let frames = reports.iter().map(|r| r.positions.clone()).collect();
    Ok((MeshSequence::new(seq.reference.clone(), frames)?, reports))
}

fn write_frames(dir: &Path, seq: &MeshSequence) -> Result<()> {
    write_sequence(dir, &seq.frames, seq.reference.faces()).map(|_| ())
}

/// Runs every stage and writes under `out`: `coarse/`, `fine/`, `synth/` and
/// `baseline/` OBJ frames (when enabled), `coarse.tsacap`, `fine.tsacap`,
/// `model.dtfm` and `metrics.csv`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineReport> {
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let mut clock = Instant::now();
    let mut lap = |slot: &mut f64| {
        *slot = clock.elapsed().as_secs_f64();
        clock = Instant::now();
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("setup"))?;
    let name = cfg.dataset_name();

    let data = gen_dataset(&cfg.data).map_err(|e| e.in_stage("gen-data"))?;
    if cfg.write_frames {
        write_frames(&out.join("coarse"), &data.coarse)
            .and_then(|_| write_frames(&out.join("fine"), &data.fine))
            .map_err(|e| e.in_stage("gen-data"))?;
    }
    lap(&mut timings.generate);

    let (cf, ff) = (|| -> Result<_> {
        let cf = encode_stage(&data.coarse, &cfg.hyper.resolve)?;
        let ff = encode_stage(&data.fine, &cfg.hyper.resolve)?;
        write_features(out.join("coarse.tsacap"), &cf)?;
        write_features(out.join("fine.tsacap"), &ff)?;
        Ok((cf, ff))
    })()
    .map_err(|e| e.in_stage("encode"))?;
    lap(&mut timings.encode);

    let mut models = DeformModels::new(&data.coarse.reference, &data.fine.reference, cfg.hyper).map_err(|e| e.in_stage("train-ae"))?;
    let (coarse_ae_curve, fine_ae_curve) =
        train_autoencoders_stage(&mut models, &cf, &ff, &cfg.ae_train).map_err(|e| e.in_stage("train-ae"))?;
    lap(&mut timings.train_autoencoders);

    let (transformer_curve, feature_mse) =
        train_transformer_stage(&mut models, &cf, &ff, &cfg.xf_train).map_err(|e| e.in_stage("train-xf"))?;
    let checkpoint = out.join("model.dtfm");
    models.save(&checkpoint).map_err(|e| e.in_stage("train-xf"))?;
    lap(&mut timings.train_transformer);

    let synth = models.synthesize_sequence(&data.coarse).map_err(|e| e.in_stage("synth"))?;
    lap(&mut timings.synthesize);

    let (synth, refine_iterations, refine_failures) = match &cfg.obstacle {
        None => (synth, Vec::new(), 0),
        Some(spec) => {
            let obstacle = spec.build(&data.fine.reference).map_err(|e| e.in_stage("refine"))?;
            let (seq, reports) = refine_sequence(&synth, &obstacle, &cfg.refine).map_err(|e| e.in_stage("refine"))?;
            let failures = reports.iter().filter(|r| !r.converged).count();
            (seq, reports.iter().map(|r| r.iterations).collect(), failures)
        }
    };
    if cfg.write_frames {
        write_frames(&out.join("synth"), &synth).map_err(|e| e.in_stage("synth"))?;
    }
    lap(&mut timings.refine);

    let baseline = subdivided_baseline(&data.coarse, &data.fine.reference, levels_for(cfg.data.coarse.0.max(cfg.data.coarse.1), cfg.data.fine.0.max(cfg.data.fine.1)))
        .map_err(|e| e.in_stage("baseline"))?;
    lap(&mut timings.baseline);
    if cfg.write_frames {
        write_frames(&out.join("baseline"), &baseline).map_err(|e| e.in_stage("baseline"))?;
    }

    let frames = data.fine.frame_count().max(1) as f64;
    let rows = (|| -> Result<Vec<MetricsRow>> {
        Ok(vec![
            MetricsRow::evaluate(&name, "synth", &data.fine, &synth, (timings.synthesize + timings.refine) / frames)?,
            MetricsRow::evaluate(&name, "baseline", &data.fine, &baseline, timings.baseline / frames)?,
        ])
    })()
    .map_err(|e| e.in_stage("metrics"))?;
    let metrics_csv = out.join("metrics.csv");
    write_metrics_csv(&metrics_csv, &rows).map_err(|e| e.in_stage("metrics"))?;
    lap(&mut timings.metrics);
    timings.total = start.elapsed().as_secs_f64();

    Ok(PipelineReport {
        rows,
        feature_mse,
        coarse_ae_curve,
        fine_ae_curve,
        transformer_curve,
        refine_iterations,
        refine_failures,
        timings,
        checkpoint,
        metrics_csv,
    })
}
