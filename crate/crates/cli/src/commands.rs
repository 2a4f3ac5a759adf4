//! Subcommands. Each one resolves and validates every input before it
//! creates anything under `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use d3t_core::backbone::{sample_latents, GanSnapshot, ImageBatch, Role, StyleInput};
use d3t_core::inversion::{precompute_transforms, PerceptualExtractor, PrecomputeStats};
use d3t_core::metrics::{dump_discriminator_features, evaluate_fid, FIDReport, RealStatsCache};
use d3t_core::rng;
use d3t_core::tensor::Tensor;
use d3t_core::trainer::{self, RunLog, RunObserver, StepRecord};
use image::RgbImage;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{ingest_dataset, Dataset};
use crate::error::CliError;
use crate::imaging::{grid_cols, image_of, save_png, tile};
use crate::toys::{make_toy_domains, ToySpec};

/// Overrides the cache root (default `./.d3t-cache`).
pub const CACHE_ENV: &str = "D3T_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "d3t", version, about = "Few-shot GAN transfer with dual distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `transfer.weights.lambda2=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a source GAN on `data.source`.
    Pretrain(Common),
    /// Invert every `data.target` image into the source generator.
    Invert(Common),
    /// Transfer the source in `data.source_checkpoint` to `data.target`.
    Transfer(Common),
    /// FID of one or more checkpoints against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Defaults to `data.target`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Grid of `n` samples.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Strip of frames interpolated in W between two latent seeds.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed_a: u64,
        #[arg(long)]
        seed_b: u64,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Render the ellipse source and cross/polygon target domains.
    MakeToys {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5000)]
        n_source: usize,
        #[arg(long, default_value_t = 100)]
        n_target: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// Pooled critic features of a dataset at one layer.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Defaults to `data.target`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".d3t-cache"))
}

pub fn run(cli: Cli) -> Result<Value, CliError> {
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&c),
        Command::Invert(c) => cmd_invert(&c),
        Command::Transfer(c) => cmd_transfer(&c),
        Command::Eval {
            common,
            checkpoints,
            data,
        } => cmd_eval(&common, &checkpoints, data.as_deref()),
        Command::Sample {
            common,
            checkpoint,
            n,
            noise_seed,
        } => {
            load_config(&common)?;
            cmd_sample(&checkpoint, n, common.seed.unwrap_or(0), noise_seed, &common.out)
        }
        Command::Interpolate {
            common,
            checkpoint,
            seed_a,
            seed_b,
            steps,
            noise_seed,
        } => {
            load_config(&common)?;
            cmd_interpolate(&checkpoint, seed_a, seed_b, steps, noise_seed, &common.out)
        }
        Command::MakeToys {
            common,
            n_source,
            n_target,
            resolution,
        } => {
            load_config(&common)?;
            let spec = ToySpec {
                n_source,
                n_target,
                resolution,
            };
            let seed = common.seed.unwrap_or(0);
            let paths = make_toy_domains(&spec, seed, &common.out)?;
            Ok(json!({"source": paths.source, "target": paths.target, "spec": spec, "seed": seed}))
        }
        Command::DumpFeatures {
            common,
            checkpoint,
            layer,
            data,
        } => cmd_dump(&common, &checkpoint, layer, data.as_deref()),
    }
}

fn load_config(c: &Common) -> Result<RunConfig, CliError> {
    RunConfig::load(c.config.as_deref(), &c.set)
}

fn core_err(e: CliError) -> d3t_core::Error {
    match e {
        CliError::Core(c) => c,
        CliError::Io(io) => io.into(),
        other => d3t_core::Error::invalid(other.to_string()),
    }
}

fn write_config_echo(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

struct FidProbe<'a> {
    real: &'a [ImageBatch],
    extractor: &'a PerceptualExtractor,
    n_fake: usize,
    seed: u64,
    cache: RealStatsCache,
}

/// Logs steps, writes every snapshot as a checkpoint, optionally scores it.
struct Recorder<'a> {
    log: RunLog,
    snapshot_dir: PathBuf,
    saved: Vec<Value>,
    fid: Option<FidProbe<'a>>,
}

impl RunObserver for Recorder<'_> {
    fn on_step(&mut self, record: &StepRecord) -> d3t_core::Result<()> {
        self.log.step(record)
    }

    fn on_snapshot(&mut self, s: &GanSnapshot) -> d3t_core::Result<Option<FIDReport>> {
        let path = self.snapshot_dir.join(format!("step-{:06}.ckpt", s.step));
        let hash = checkpoint::save(s, &path).map_err(core_err)?;
        let mut entry = json!({"step": s.step, "path": path, "content_hash": hash});
        let report = match self.fid.as_mut() {
            Some(p) => {
                let r = evaluate_fid(s, p.real, p.n_fake, p.extractor, p.seed, &mut p.cache)?;
                self.log.fid(&r)?;
                log::info!("step {}: FID {:.4}", s.step, r.score);
                entry["fid"] = json!(r.score);
                Some(r)
            }
            None => None,
        };
        self.saved.push(entry);
        Ok(report)
    }
}

fn probe<'a>(cfg: &RunConfig, real: &'a [ImageBatch], extractor: &'a PerceptualExtractor) -> Option<FidProbe<'a>> {
    cfg.metrics.eval_snapshots.then(|| FidProbe {
        real,
        extractor,
        n_fake: cfg.metrics.n_fake,
        seed: cfg.metrics.fid_seed,
        cache: RealStatsCache::on_disk(cache_root()),
    })
}

fn cmd_pretrain(c: &Common) -> Result<Value, CliError> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.pretrain.seed = s;
    }
    let dir = cfg.require_path("data.source")?;
    let data = ingest_dataset(&dir, cfg.network.resolution)?;
    let extractor = cfg.metrics.extractor()?;
    let tcfg = cfg.pretrain.as_transfer();

    std::fs::create_dir_all(&c.out)?;
    write_config_echo(&cfg, &c.out)?;
    let real = std::slice::from_ref(&data.images);
    let mut rec = Recorder {
        log: RunLog::create(&c.out)?,
        snapshot_dir: c.out.join("snapshots"),
        saved: Vec::new(),
        fid: probe(&cfg, real, &extractor),
    };
    let outcome = trainer::pretrain(&data.images, &cfg.network, &tcfg, &mut rec)?;
    let final_path = c.out.join("source.ckpt");
    let hash = checkpoint::save(&outcome.snapshot, &final_path)?;
    let summary = json!({
        "command": "pretrain",
        "config": cfg,
        "seed": cfg.pretrain.seed,
        "dataset": {"path": dir, "items": data.len()},
        "checkpoint": {"path": final_path, "content_hash": hash},
        "snapshots": rec.saved,
        "best": outcome.best.as_ref().map(|(_, r)| r),
    });
    rec.log.manifest(&summary)?;
    Ok(summary)
}

struct TransferInputs {
    cfg: RunConfig,
    data: Dataset,
    data_dir: PathBuf,
    source: GanSnapshot,
    source_path: PathBuf,
    extractor: PerceptualExtractor,
}

fn transfer_inputs(c: &Common, seed_into: impl FnOnce(&mut RunConfig, u64)) -> Result<TransferInputs, CliError> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        seed_into(&mut cfg, s);
    }
    let data_dir = cfg.require_path("data.target")?;
    let source_path = cfg.require_path("data.source_checkpoint")?;
    let source = checkpoint::load(&source_path)?;
    if source.role != Role::Source {
        return Err(CliError::Checkpoint {
            path: source_path.display().to_string(),
            message: "not a source-role checkpoint".into(),
        });
    }
    if source.config != cfg.network {
        log::warn!("network section differs from the source checkpoint; the checkpoint's config is used");
        cfg.network = source.config.clone();
    }
    let data = ingest_dataset(&data_dir, source.config.resolution)?;
    let extractor = cfg.metrics.extractor()?;
    Ok(TransferInputs {
        cfg,
        data,
        data_dir,
        source,
        source_path,
        extractor,
    })
}

fn stats_json(s: &PrecomputeStats) -> Value {
    json!({"computed": s.computed, "reused": s.reused, "iterations": s.iterations})
}

fn cmd_invert(c: &Common) -> Result<Value, CliError> {
    let t = transfer_inputs(c, |cfg, s| cfg.inversion.seed = s)?;
    let items = t.data.items();
    std::fs::create_dir_all(&c.out)?;
    write_config_echo(&t.cfg, &c.out)?;
    let (samples, stats) = precompute_transforms(
        &items,
        &t.source,
        &t.extractor,
        &t.cfg.inversion.schedule(),
        &t.cfg.inversion.options(Some(cache_root())),
    )?;
    let records: Vec<Value> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "name": t.data.names[i],
                "item_hash": t.data.item_hashes[i],
                "pixel_loss": s.inversion.final_pixel_loss,
                "perceptual_loss": s.inversion.final_perceptual_loss,
                "pixel_mse": s.inversion.pixel_mse(),
            })
        })
        .collect();
    std::fs::write(c.out.join("inversion.json"), serde_json::to_vec_pretty(&records)?)?;
    let recon: Vec<RgbImage> = samples.iter().map(|s| image_of(&s.inversion.reconstruction, 0)).collect();
    save_png(&tile(&recon, grid_cols(recon.len())), &c.out.join("reconstructions.png"))?;
    let summary = json!({
        "command": "invert",
        "config": t.cfg,
        "seed": t.cfg.inversion.seed,
        "dataset": {"path": t.data_dir, "items": t.data.len()},
        "source_checkpoint": {"path": t.source_path, "content_hash": t.source.content_hash()},
        "transforms": stats_json(&stats),
    });
    std::fs::write(c.out.join("manifest.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

fn cmd_transfer(c: &Common) -> Result<Value, CliError> {
    let t = transfer_inputs(c, |cfg, s| cfg.transfer.seed = s)?;
    let items = t.data.items();
    let source_hash = t.source.content_hash();
    std::fs::create_dir_all(&c.out)?;
    write_config_echo(&t.cfg, &c.out)?;

    let (transforms, stats) = if t.cfg.transfer.weights.lambda2 > 0.0 {
        let (s, st) = precompute_transforms(
            &items,
            &t.source,
            &t.extractor,
            &t.cfg.inversion.schedule(),
            &t.cfg.inversion.options(Some(cache_root())),
        )?;
        (s, Some(st))
    } else {
        (Vec::new(), None)
    };
    let real = std::slice::from_ref(&t.data.images);
    let mut rec = Recorder {
        log: RunLog::create(&c.out)?,
        snapshot_dir: c.out.join("snapshots"),
        saved: Vec::new(),
        fid: probe(&t.cfg, real, &t.extractor),
    };
    let outcome = trainer::transfer(&t.data.images, &t.source, &transforms, &t.cfg.transfer, &mut rec)?;
    let final_path = c.out.join("final.ckpt");
    let final_hash = checkpoint::save(&outcome.snapshot, &final_path)?;
    let best = match &outcome.best {
        Some((snap, report)) => {
            let p = c.out.join("best.ckpt");
            let h = checkpoint::save(snap, &p)?;
            Some(json!({"path": p, "content_hash": h, "report": report}))
        }
        None => None,
    };
    let after = t.source.content_hash();
    let summary = json!({
        "command": "transfer",
        "config": t.cfg,
        "seed": t.cfg.transfer.seed,
        "dataset": {"path": t.data_dir, "items": t.data.len()},
        "source_checkpoint": {"path": t.source_path, "content_hash": source_hash, "content_hash_after": after},
        "transforms": stats.as_ref().map(stats_json),
        "checkpoint": {"path": final_path, "content_hash": final_hash},
        "snapshots": rec.saved,
        "best": best,
    });
    rec.log.manifest(&summary)?;
    Ok(summary)
}

fn data_dir(cfg: &RunConfig, data: Option<&Path>) -> Result<PathBuf, CliError> {
    match data {
        Some(p) if p.exists() => Ok(p.to_path_buf()),
        Some(p) => Err(CliError::config(format!("--data {} does not exist", p.display()), vec!["data".into()])),
        None => cfg.require_path("data.target"),
    }
}

fn cmd_eval(c: &Common, checkpoints: &[PathBuf], data: Option<&Path>) -> Result<Value, CliError> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.metrics.fid_seed = s;
    }
    let dir = data_dir(&cfg, data)?;
    let snaps = checkpoints
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let res = snaps[0].config.resolution;
    if let Some(s) = snaps.iter().find(|s| s.config.resolution != res) {
        return Err(CliError::config(
            format!("checkpoints mix resolutions {res} and {}", s.config.resolution),
            Vec::new(),
        ));
    }
    let dataset = ingest_dataset(&dir, res)?;
    let extractor = cfg.metrics.extractor()?;

    std::fs::create_dir_all(&c.out)?;
    write_config_echo(&cfg, &c.out)?;
    let mut log = RunLog::create(&c.out)?;
    let mut cache = RealStatsCache::on_disk(cache_root());
    let real = std::slice::from_ref(&dataset.images);
    let mut reports = Vec::new();
    for (p, s) in checkpoints.iter().zip(&snaps) {
        let r = evaluate_fid(s, real, cfg.metrics.n_fake, &extractor, cfg.metrics.fid_seed, &mut cache)?;
        log.fid(&r)?;
        reports.push(json!({"checkpoint": p, "content_hash": s.content_hash(), "report": r}));
    }
    let summary = json!({
        "command": "eval",
        "config": cfg,
        "seed": cfg.metrics.fid_seed,
        "dataset": {"path": dir, "items": dataset.len()},
        "reports": reports,
    });
    log.manifest(&summary)?;
    Ok(summary)
}

/// Style of latent `index` drawn from `seed`; shared by sample and interpolate.
fn style_of(s: &GanSnapshot, seed: u64, index: u64) -> Result<Tensor<f32>, CliError> {
    let z = sample_latents::<f32>(1, s.config.style_dim, rng::mix(seed, index));
    Ok(s.map_noise_batch(&z)?)
}

/// One frame, synthesized alone so it never depends on batch composition.
fn frame(s: &GanSnapshot, w: Tensor<f32>, noise_seed: u64) -> Result<RgbImage, CliError> {
    let (img, _) = s.synthesize(&StyleInput::Broadcast(w), noise_seed)?;
    Ok(image_of(&img, 0))
}

pub fn sample_frames(s: &GanSnapshot, n: usize, seed: u64, noise_seed: u64) -> Result<Vec<RgbImage>, CliError> {
    (0..n as u64).map(|i| frame(s, style_of(s, seed, i)?, noise_seed)).collect()
}

pub fn interpolation_frames(
    s: &GanSnapshot,
    seed_a: u64,
    seed_b: u64,
    steps: usize,
    noise_seed: u64,
) -> Result<Vec<RgbImage>, CliError> {
    if steps < 2 {
        return Err(CliError::config(format!("steps must be >= 2, got {steps}"), vec!["steps".into()]));
    }
    let wa = style_of(s, seed_a, 0)?;
    let wb = style_of(s, seed_b, 0)?;
    (0..steps)
        .map(|k| {
            let t = k as f32 / (steps - 1) as f32;
            let data = wa.data().iter().zip(wb.data()).map(|(&a, &b)| (1.0 - t) * a + t * b).collect();
            frame(s, Tensor::new(wa.shape().to_vec(), data)?, noise_seed)
        })
        .collect()
}

pub fn cmd_sample(ckpt: &Path, n: usize, seed: u64, noise_seed: u64, out: &Path) -> Result<Value, CliError> {
    if n == 0 {
        return Err(CliError::config("n must be >= 1", vec!["n".into()]));
    }
    let s = checkpoint::load(ckpt)?;
    let frames = sample_frames(&s, n, seed, noise_seed)?;
    let cols = grid_cols(n);
    save_png(&tile(&frames, cols), out)?;
    Ok(json!({
        "command": "sample",
        "out": out,
        "n": n,
        "grid": [cols, n.div_ceil(cols)],
        "seed": seed,
        "noise_seed": noise_seed,
        "checkpoint": {"path": ckpt, "content_hash": s.content_hash()},
    }))
}

pub fn cmd_interpolate(
    ckpt: &Path,
    seed_a: u64,
    seed_b: u64,
    steps: usize,
    noise_seed: u64,
    out: &Path,
) -> Result<Value, CliError> {
    if steps < 2 {
        return Err(CliError::config(format!("steps must be >= 2, got {steps}"), vec!["steps".into()]));
    }
    let s = checkpoint::load(ckpt)?;
    let frames = interpolation_frames(&s, seed_a, seed_b, steps, noise_seed)?;
    save_png(&tile(&frames, steps), out)?;
    Ok(json!({
        "command": "interpolate",
        "out": out,
        "steps": steps,
        "seed_a": seed_a,
        "seed_b": seed_b,
        "noise_seed": noise_seed,
        "checkpoint": {"path": ckpt, "content_hash": s.content_hash()},
    }))
}

fn cmd_dump(c: &Common, ckpt: &Path, layer: usize, data: Option<&Path>) -> Result<Value, CliError> {
    let cfg = load_config(c)?;
    let dir = data_dir(&cfg, data)?;
    let s = checkpoint::load(ckpt)?;
    let dataset = ingest_dataset(&dir, s.config.resolution)?;
    if let Some(parent) = c.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let m = dump_discriminator_features(&s, &dataset.images, layer, Some(&c.out))?;
    Ok(json!({
        "command": "dump-features",
        "out": c.out,
        "layer": layer,
        "rows": m.dim(0),
        "cols": m.dim(1),
        "checkpoint": {"path": ckpt, "content_hash": s.content_hash()},
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn common_flags_parse() {
        let cli = Cli::try_parse_from([
            "d3t", "transfer", "--config", "a.toml", "--set", "x.y=1", "--set", "z=2", "--seed", "4", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Transfer(c) => {
                assert_eq!(c.set, vec!["x.y=1", "z=2"]);
                assert_eq!(c.seed, Some(4));
            }
            other => panic!("{other:?}"),
        }
    }
}
