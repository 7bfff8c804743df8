//! Command-line front end for the deformtx pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deformtx::harness::pipeline::{
    encode_stage, format_metrics_csv, parse_metrics_csv, refine_sequence, train_autoencoders_stage,
    train_transformer_stage, ObstacleSpec,
};
use deformtx::harness::{gen_dataset, run_pipeline, KeyValues, MetricsRow, PipelineConfig};
use deformtx::mesh::{load_obj, load_sequence};
use deformtx::neuralnet::DeformModels;
use deformtx::reconstruct::{interpolate_sequence, write_sequence, Energy, Reconstructor};
use deformtx::tsacap::{read_features, write_features};
use deformtx::{Mesh, MeshSequence};

#[derive(Parser, Debug)]
#[command(name = "deformtx", version, about = "TS-ACAP features and coarse-to-fine cloth detail synthesis")]
struct Cli {
    /// Seed for data generation, initialization and batch order (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired coarse/fine synthetic sequence as OBJ frames.
    GenData,
    /// Extract TS-ACAP features from an OBJ frame directory.
    Encode(EncodeArgs),
    /// Rebuild vertex positions from a feature file.
    Reconstruct(ReconstructArgs),
    /// Interpolate two deformed meshes in feature space.
    Interp(InterpArgs),
    /// Train the coarse and fine autoencoders and write a checkpoint.
    TrainAe(TrainAeArgs),
    /// Train the transformer of an existing checkpoint.
    TrainXf(TrainXfArgs),
    /// Synthesize a fine sequence from coarse OBJ frames.
    Synth(SynthArgs),
    /// Push frames out of the configured obstacle.
    Refine(RefineArgs),
    /// Compare two OBJ sequences and write a metrics CSV row.
    Metrics(MetricsArgs),
    /// Run every stage end to end.
    Pipeline,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Directory of frame_%05d.obj files.
    #[arg(long)]
    input: PathBuf,
    /// Rest mesh; frame 0 when omitted.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Feature file name inside the output directory.
    #[arg(long, default_value = "features.tsacap")]
    name: String,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    features: PathBuf,
    /// Rest mesh the features were extracted against.
    #[arg(long)]
    reference: PathBuf,
    /// Vertex whose position is prescribed.
    #[arg(long, default_value_t = 0)]
    anchor: usize,
    /// OBJ sequence supplying the anchor position per frame; the rest position when omitted.
    #[arg(long)]
    anchor_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    to: PathBuf,
    /// Number of intervals; `steps + 1` frames are written.
    #[arg(long, default_value_t = 10)]
    steps: usize,
}

#[derive(Args, Debug)]
struct TrainAeArgs {
    #[arg(long)]
    coarse: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    #[arg(long)]
    coarse_reference: PathBuf,
    #[arg(long)]
    fine_reference: PathBuf,
}

#[derive(Args, Debug)]
struct TrainXfArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    coarse: PathBuf,
    #[arg(long)]
    fine: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    model: PathBuf,
    /// Coarse OBJ frame directory.
    #[arg(long)]
    coarse: PathBuf,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long, default_value = "candidate")]
    method: String,
    #[arg(long, default_value = "custom")]
    dataset: String,
}

fn load_config(cli: &Cli) -> Result<(KeyValues, PipelineConfig)> {
    let mut kv = match &cli.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    if let Some(seed) = cli.seed {
        kv.set("seed", seed);
    }
    let cfg = PipelineConfig::from_key_values(&kv)?;
    Ok((kv, cfg))
}

fn load_mesh(path: &Path) -> Result<Mesh> {
    let m = load_obj(path)?;
    Ok(Mesh::with_weights(m.vertices().to_vec(), m.faces().to_vec())?)
}

fn write_frames(dir: &Path, seq: &MeshSequence) -> Result<()> {
    write_sequence(dir, &seq.frames, seq.reference.faces())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (kv, cfg) = load_config(&cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::GenData => {
            let data = gen_dataset(&cfg.data)?;
            write_frames(&out.join("coarse"), &data.coarse)?;
            write_frames(&out.join("fine"), &data.fine)?;
            println!(
                "wrote {} frames: coarse {} vertices, fine {} vertices ({})",
                data.coarse.frame_count(),
                data.coarse.vertex_count(),
                data.fine.vertex_count(),
                cfg.data.motion
            );
        }
        Command::Encode(a) => {
            let reference = a.reference.as_deref().map(load_mesh).transpose()?;
            let seq = load_sequence(&a.input, reference)?;
            let t = Instant::now();
            let features = encode_stage(&seq, &cfg.hyper.resolve)?;
            let path = out.join(&a.name);
            write_features(&path, &features)?;
            println!(
                "{} frames x {} vertices -> {} ({:.4} s/frame)",
                features.frames.len(),
                features.vertex_count,
                path.display(),
                t.elapsed().as_secs_f64() / features.frames.len().max(1) as f64
            );
        }
        Command::Reconstruct(a) => {
            let reference = load_mesh(&a.reference)?;
            let features = read_features(&a.features)?;
            let anchors = match &a.anchor_from {
                Some(dir) => load_sequence(dir, None)?.frames.iter().map(|f| f.get(a.anchor).copied()).collect::<Option<Vec<_>>>(),
                None => Some(vec![reference.vertices().get(a.anchor).copied().unwrap_or_default(); features.frames.len()]),
            }
            .context("anchor vertex out of range")?;
            if anchors.len() < features.frames.len() {
                bail!("anchor sequence has {} frames, features have {}", anchors.len(), features.frames.len());
            }
            let rec = Reconstructor::new(&reference, Energy::default(), a.anchor)?;
            let frames = features
                .frames
                .iter()
                .zip(&anchors)
                .map(|(f, p)| rec.reconstruct(f, *p))
                .collect::<deformtx::Result<Vec<_>>>()?;
            write_sequence(out, &frames, reference.faces())?;
            println!("reconstructed {} frames into {}", frames.len(), out.display());
        }
        Command::Interp(a) => {
            let reference = load_mesh(&a.reference)?;
            let from = load_obj(&a.from)?;
            let to = load_obj(&a.to)?;
            let seq = MeshSequence::new(reference.clone(), vec![from.vertices().to_vec(), to.vertices().to_vec()])?;
            let features = encode_stage(&seq, &cfg.hyper.resolve)?;
            let frames = interpolate_sequence(&features.frames[0], &features.frames[1], a.steps)?;
            let rec = Reconstructor::new(&reference, Energy::default(), 0)?;
            let steps = (frames.len() - 1) as f64;
            let positions = frames
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    let s = k as f64 / steps;
                    rec.reconstruct(f, from.vertices()[0] * (1.0 - s) + to.vertices()[0] * s)
                })
                .collect::<deformtx::Result<Vec<_>>>()?;
            write_sequence(out, &positions, reference.faces())?;
            println!("wrote {} interpolated frames into {}", positions.len(), out.display());
        }
        Command::TrainAe(a) => {
            let coarse = read_features(&a.coarse)?;
            let fine = read_features(&a.fine)?;
            let mut models = DeformModels::new(&load_mesh(&a.coarse_reference)?, &load_mesh(&a.fine_reference)?, cfg.hyper)?;
            let t = Instant::now();
            let (c, f) = train_autoencoders_stage(&mut models, &coarse, &fine, &cfg.ae_train)?;
            let path = out.join("model.dtfm");
            models.save(&path)?;
            println!(
                "autoencoders trained in {:.1} s: coarse loss {:.3e}, fine loss {:.3e} -> {}",
                t.elapsed().as_secs_f64(),
                c.last().copied().unwrap_or(f64::NAN),
                f.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::TrainXf(a) => {
            let mut models = DeformModels::load(&a.model)?;
            let coarse = read_features(&a.coarse)?;
            let fine = read_features(&a.fine)?;
            let t = Instant::now();
            let (curve, mse) = train_transformer_stage(&mut models, &coarse, &fine, &cfg.xf_train)?;
            let path = out.join("model.dtfm");
            models.save(&path)?;
            println!(
                "transformer trained in {:.1} s: loss {:.3e}, fine-feature MSE {:.3e} -> {}",
                t.elapsed().as_secs_f64(),
                curve.last().copied().unwrap_or(f64::NAN),
                mse,
                path.display()
            );
        }
        Command::Synth(a) => {
            let models = DeformModels::load(&a.model)?;
            let coarse = load_sequence(&a.coarse, Some(models.coarse_mesh.clone()))?;
            let t = Instant::now();
            let fine = models.synthesize_sequence(&coarse)?;
            write_frames(out, &fine)?;
            println!(
                "synthesized {} frames ({:.4} s/frame) into {}",
                fine.frame_count(),
                t.elapsed().as_secs_f64() / fine.frame_count().max(1) as f64,
                out.display()
            );
        }
        Command::Refine(a) => {
            let Some(spec) = ObstacleSpec::from_key_values(&kv)? else {
                bail!("no obstacle configured: set `obstacle` (sphere, capsule or cylinder) in the config");
            };
            let seq = load_sequence(&a.input, None)?;
            let obstacle = spec.build(&seq.reference)?;
            let (refined, reports) = refine_sequence(&seq, &obstacle, &cfg.refine)?;
            write_frames(out, &refined)?;
            let failures = reports.iter().filter(|r| !r.converged).count();
            let worst = reports.iter().map(|r| r.iterations).max().unwrap_or(0);
            println!("refined {} frames, at most {worst} iterations, {failures} not collision-free", reports.len());
        }
        Command::Metrics(a) => {
            let truth = load_sequence(&a.truth, None)?;
            let candidate = load_sequence(&a.candidate, None)?;
            let row = MetricsRow::evaluate(&a.dataset, &a.method, &truth, &candidate, 0.0)?;
            let path = out.join("metrics.csv");
            let mut rows = match std::fs::read_to_string(&path) {
                Ok(text) => parse_metrics_csv(&text)?,
                Err(_) => Vec::new(),
            };
            rows.push(row.clone());
            std::fs::write(&path, format_metrics_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
            println!("{}: rmse {:.6e}, hausdorff {:.6e}, sted {:.6e}", row.method, row.rmse, row.hausdorff, row.sted);
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg, out)?;
            let t = &report.timings;
            println!(
                "stages (s): generate {:.1}, encode {:.1}, train-ae {:.1}, train-xf {:.1}, synth {:.1}, refine {:.1}, baseline {:.1}, metrics {:.1}; total {:.1}",
                t.generate, t.encode, t.train_autoencoders, t.train_transformer, t.synthesize, t.refine, t.baseline, t.metrics, t.total
            );
            println!("fine-feature MSE {:.3e}", report.feature_mse);
            for r in &report.rows {
                println!(
                    "{:>8}: rmse {:.6e}, hausdorff {:.6e}, sted {:.6e}, {:.4} s/frame",
                    r.method, r.rmse, r.hausdorff, r.sted, r.seconds_per_frame
                );
            }
            println!("metrics -> {}", report.metrics_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
