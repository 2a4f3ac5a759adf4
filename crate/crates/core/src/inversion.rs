//! Embedding target images into the source generator's extended style space.
//!
//! Images are optimized together in one tape when several are given, but
//! every per-image quantity (objective, gradient, Adam moments) only ever
//! touches that image's rows, so the result equals solving each one alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    map_graph, sample_latents, synthesize_graph, ExtendedStyleCode, FeaturePyramid, GanSnapshot, ImageBatch,
    NetworkConfig, StyleInput, StyleVector,
};
use crate::error::{Error, Result};
pub use crate::extractor::{ExtractorSource, PerceptualExtractor};
use crate::graph::{Graph, Var};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Scalar, Tensor};

/// Noise seed of every synthesis performed during and after inversion.
pub const INVERSION_NOISE_SEED: u64 = 0;

const MEAN_STYLE_SAMPLES: usize = 10_000;
const CACHE_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSchedule {
    pub iterations: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lambda1: f64,
}

impl Default for InversionSchedule {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr_init: 0.05,
            lr_decay_factor: 0.1,
            lr_decay_every: 500,
            lambda1: 5e-5,
        }
    }
}

impl InversionSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("inversion.iterations must be > 0"));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::invalid("inversion.lr_init must be > 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid("inversion.lr_decay_factor must be in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("inversion.lr_decay_every must be > 0"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::invalid("inversion.lambda1 must be >= 0"));
        }
        Ok(())
    }

    /// Step-decayed learning rate at 0-based iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        self.lr_init * self.lr_decay_factor.powi((it / self.lr_decay_every) as i32)
    }

    /// 0-based indices of the last iteration of every learning-rate segment.
    pub fn segment_ends(&self) -> Vec<usize> {
        let mut ends: Vec<usize> = (1..)
            .map(|k| k * self.lr_decay_every - 1)
            .take_while(|&e| e < self.iterations)
            .collect();
        if ends.last() != Some(&(self.iterations - 1)) {
            ends.push(self.iterations - 1);
        }
        ends
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    /// One latent mapped to a style and copied into every block.
    #[default]
    MappedNoise,
    /// Average style of many mapped latents, copied into every block.
    MeanStyle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub code: ExtendedStyleCode,
    pub reconstruction: ImageBatch,
    pub final_pixel_loss: f64,
    pub final_perceptual_loss: f64,
    pub loss_trace: Vec<f64>,
}

impl InversionResult {
    pub fn final_objective(&self, lambda1: f64) -> f64 {
        self.final_pixel_loss + lambda1 * self.final_perceptual_loss
    }

    pub fn pixel_mse(&self) -> f64 {
        self.final_pixel_loss / self.reconstruction.tensor().numel() as f64
    }
}

/// The transfer supervision unit.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedSample {
    pub target_image: ImageBatch,
    pub inversion: InversionResult,
    pub source_features: FeaturePyramid,
}

/// Pixel and perceptual squared errors of `x_hat` against `x`, summed over
/// every entry. The perceptual term is skipped when `extractor` is `None`.
pub fn reconstruction_terms<T: Scalar>(
    x_hat: &Tensor<T>,
    x: &Tensor<T>,
    extractor: Option<&PerceptualExtractor>,
) -> Result<(f64, f64)> {
    if x_hat.shape() != x.shape() {
        return Err(Error::invalid(format!(
            "reconstruction {:?} vs target {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let pixel = sq_dist(x_hat.data(), x.data());
    let perceptual = match extractor {
        None => 0.0,
        Some(ex) => {
            let mut g = Graph::new();
            let a = g.constant(x_hat.clone());
            let b = g.constant(x.clone());
            let fa = ex.features_graph(&mut g, a)?;
            let fb = ex.features_graph(&mut g, b)?;
            fa.iter()
                .zip(&fb)
                .map(|(&p, &q)| sq_dist(g.value(p).data(), g.value(q).data()))
                .sum()
        }
    };
    Ok((pixel, perceptual))
}

/// `pixel + lambda1 * perceptual` for an explicit pair of images.
pub fn reconstruction_objective<T: Scalar>(
    x_hat: &Tensor<T>,
    x: &Tensor<T>,
    extractor: Option<&PerceptualExtractor>,
    lambda1: f64,
) -> Result<f64> {
    let ex = if lambda1 == 0.0 { None } else { extractor };
    let (p, c) = reconstruction_terms(x_hat, x, ex)?;
    Ok(p + lambda1 * c)
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p.to_f64() - q.to_f64();
            d * d
        })
        .sum()
}

fn check_target<T: Scalar>(target: &ImageBatch<T>, cfg: &NetworkConfig) -> Result<()> {
    if target.resolution() != cfg.resolution {
        return Err(Error::invalid(format!(
            "target resolution {} does not match generator resolution {}",
            target.resolution(),
            cfg.resolution
        )));
    }
    Ok(())
}

fn code_tensors(code: &ExtendedStyleCode, cfg: &NetworkConfig) -> Result<Vec<Tensor<f32>>> {
    if code.per_layer.len() != cfg.layer_count_g() {
        return Err(Error::invalid(format!(
            "extended code has {} layers, network has {}",
            code.per_layer.len(),
            cfg.layer_count_g()
        )));
    }
    code.per_layer
        .iter()
        .map(|w| {
            if w.0.len() != cfg.style_dim {
                return Err(Error::invalid(format!("style has length {}, expected {}", w.0.len(), cfg.style_dim)));
            }
            Tensor::new(vec![1, w.0.len()], w.0.clone())
        })
        .collect()
}

struct Evaluation<T: Scalar> {
    graph: Graph<T>,
    total: Var,
    image: Var,
    codes: Vec<Var>,
    pixel: Vec<f64>,
    perceptual: Vec<f64>,
}

/// Builds the batched objective on a fresh tape. `codes` are `[n, d]` per block.
fn evaluate<T: Scalar>(
    source: &GanSnapshot<T>,
    codes: &[Tensor<T>],
    target: &Tensor<T>,
    target_feats: &[Tensor<T>],
    extractor: &PerceptualExtractor,
    lambda1: f64,
) -> Result<Evaluation<T>> {
    let mut g = Graph::new();
    let gen = source.generator.bind(&mut g, false);
    let code_vars: Vec<Var> = codes.iter().map(|c| g.param(c.clone())).collect();
    let (img, _) = synthesize_graph(&mut g, &source.config, &gen, &code_vars, INVERSION_NOISE_SEED)?;
    let n = target.dim(0);
    let x = g.constant(target.clone());
    let pixel_var = g.squared_error(img, x)?;
    let pixel = per_sample_sq(g.value(img), target, n);
    let mut perceptual = vec![0.0; n];
    let mut total = pixel_var;
    if lambda1 > 0.0 {
        let taps = extractor.features_graph(&mut g, img)?;
        let mut acc: Option<Var> = None;
        for (&t, tf) in taps.iter().zip(target_feats) {
            for (p, v) in perceptual.iter_mut().zip(per_sample_sq(g.value(t), tf, n)) {
                *p += v;
            }
            let c = g.constant(tf.clone());
            let e = g.squared_error(t, c)?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        if let Some(a) = acc {
            let a = g.scale(a, T::from_f64(lambda1));
            total = g.add(total, a)?;
        }
    }
    Ok(Evaluation {
        graph: g,
        total,
        image: img,
        codes: code_vars,
        pixel,
        perceptual,
    })
}

fn per_sample_sq<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, n: usize) -> Vec<f64> {
    let per = a.numel() / n;
    (0..n)
        .map(|k| sq_dist(&a.data()[k * per..(k + 1) * per], &b.data()[k * per..(k + 1) * per]))
        .collect()
}

fn target_features<T: Scalar>(extractor: &PerceptualExtractor, target: &Tensor<T>, lambda1: f64) -> Result<Vec<Tensor<T>>> {
    if lambda1 == 0.0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let x = g.constant(target.clone());
    let taps = extractor.features_graph(&mut g, x)?;
    Ok(taps.iter().map(|&t| g.value(t).clone()).collect())
}

/// Objective value and its gradient with respect to each block's style.
/// `codes` are `[1, d]` per block; any scalar type, so checks can run in `f64`.
pub fn inversion_objective_with_grad<T: Scalar>(
    codes: &[Tensor<T>],
    target: &ImageBatch<T>,
    source: &GanSnapshot<T>,
    extractor: &PerceptualExtractor,
    lambda1: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if target.len() != 1 {
        return Err(Error::invalid("inversion objective takes a single-sample target"));
    }
    check_target(target, &source.config)?;
    let feats = target_features(extractor, target.tensor(), lambda1)?;
    let ev = evaluate(source, codes, target.tensor(), &feats, extractor, lambda1)?;
    let mut grads = ev.graph.backward(ev.total)?;
    let value = ev.graph.scalar_value(ev.total).to_f64();
    let gs = ev
        .codes
        .iter()
        .zip(codes)
        .map(|(&v, c)| grads.take(v).unwrap_or_else(|| Tensor::zeros(c.shape())))
        .collect();
    Ok((value, gs))
}

/// `‖G(code) − x‖² + λ₁ Σ_taps ‖C(G(code)) − C(x)‖²`, summed over entries.
pub fn inversion_objective(
    code: &ExtendedStyleCode,
    target: &ImageBatch,
    source: &GanSnapshot,
    extractor: &PerceptualExtractor,
    lambda1: f64,
) -> Result<f64> {
    if target.len() != 1 {
        return Err(Error::invalid("inversion objective takes a single-sample target"));
    }
    check_target(target, &source.config)?;
    let codes = code_tensors(code, &source.config)?;
    let feats = target_features(extractor, target.tensor(), lambda1)?;
    let ev = evaluate(source, &codes, target.tensor(), &feats, extractor, lambda1)?;
    Ok(ev.pixel[0] + lambda1 * ev.perceptual[0])
}

/// Starting style `[1, d]` for one image.
pub fn initial_style(source: &GanSnapshot, init: InitStrategy, seed: u64) -> Result<StyleVector> {
    let d = source.config.style_dim;
    match init {
        InitStrategy::MappedNoise => {
            let z = sample_latents::<f32>(1, d, seed);
            Ok(StyleVector(source.map_noise_batch(&z)?.into_data()))
        }
        InitStrategy::MeanStyle => {
            let z = sample_latents::<f32>(MEAN_STYLE_SAMPLES, d, seed);
            let mut acc = vec![0.0f64; d];
            for start in (0..MEAN_STYLE_SAMPLES).step_by(1000) {
                let end = (start + 1000).min(MEAN_STYLE_SAMPLES);
                let mut g = Graph::new();
                let gen = source.generator.bind(&mut g, false);
                let w = map_graph(&mut g, &source.config, &gen, &z.slice_batch(start, end))?;
                for row in g.value(w).data().chunks(d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
            }
            Ok(StyleVector(acc.iter().map(|a| (a / MEAN_STYLE_SAMPLES as f64) as f32).collect()))
        }
    }
}

pub fn invert(
    target: &ImageBatch,
    source: &GanSnapshot,
    extractor: &PerceptualExtractor,
    schedule: &InversionSchedule,
    init: InitStrategy,
    seed: u64,
) -> Result<InversionResult> {
    if target.len() != 1 {
        return Err(Error::invalid("invert takes one image per call"));
    }
    let mut out = invert_many(target, source, extractor, schedule, init, &[seed])?;
    Ok(out.remove(0))
}

/// Independent inversions of every image in `targets`, `seeds[k]` for image `k`.
pub fn invert_many(
    targets: &ImageBatch,
    source: &GanSnapshot,
    extractor: &PerceptualExtractor,
    schedule: &InversionSchedule,
    init: InitStrategy,
    seeds: &[u64],
) -> Result<Vec<InversionResult>> {
    if seeds.len() != targets.len() {
        return Err(Error::invalid("one seed per target image is required"));
    }
    let inits = seeds
        .iter()
        .map(|&s| {
            let w = initial_style(source, init, s)?;
            Ok(ExtendedStyleCode::broadcast(&w, source.config.layer_count_g()))
        })
        .collect::<Result<Vec<_>>>()?;
    invert_from(targets, source, extractor, schedule, &inits)
}

/// Inversion starting from explicit codes, one per image.
pub fn invert_from(
    targets: &ImageBatch,
    source: &GanSnapshot,
    extractor: &PerceptualExtractor,
    schedule: &InversionSchedule,
    inits: &[ExtendedStyleCode],
) -> Result<Vec<InversionResult>> {
    schedule.validate()?;
    check_target(targets, &source.config)?;
    if inits.len() != targets.len() {
        return Err(Error::invalid("one initial code per target image is required"));
    }
    let cfg = &source.config;
    let (n, layers, d) = (targets.len(), cfg.layer_count_g(), cfg.style_dim);
    let per_image: Vec<Vec<Tensor<f32>>> = inits.iter().map(|c| code_tensors(c, cfg)).collect::<Result<_>>()?;
    let mut codes: Vec<Tensor<f32>> = (0..layers)
        .map(|l| Tensor::concat_batch(&per_image.iter().map(|c| &c[l]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;

    let target = targets.tensor();
    let feats = target_features(extractor, target, schedule.lambda1)?;
    let shapes: Vec<&[usize]> = codes.iter().map(|c| c.shape()).collect();
    let mut adam = Adam::new(AdamConfig::default(), &shapes);

    let lam = schedule.lambda1;
    let mut traces = vec![Vec::with_capacity(schedule.iterations); n];
    let mut best: Vec<Option<Best>> = vec![None; n];

    for it in 0..=schedule.iterations {
        let ev = evaluate(source, &codes, target, &feats, extractor, lam)?;
        for k in 0..n {
            let obj = ev.pixel[k] + lam * ev.perceptual[k];
            if !obj.is_finite() {
                let mut trace = traces[k].clone();
                trace.push(obj);
                return Err(Error::non_finite(format!("inversion objective of image {k} at iteration {it}"), trace));
            }
            if it < schedule.iterations {
                traces[k].push(obj);
            }
            if best[k].as_ref().is_none_or(|b| obj < b.objective) {
                best[k] = Some(Best {
                    objective: obj,
                    pixel: ev.pixel[k],
                    perceptual: ev.perceptual[k],
                    code: codes.iter().map(|c| c.data()[k * d..(k + 1) * d].to_vec()).collect(),
                    image: ev.graph.value(ev.image).slice_batch(k, k + 1),
                });
            }
        }
        if it == schedule.iterations {
            break;
        }
        let mut grads = ev.graph.backward(ev.total)?;
        let gs: Vec<Option<Tensor<f32>>> = ev.codes.iter().map(|&v| grads.take(v)).collect();
        let refs: Vec<Option<&Tensor<f32>>> = gs.iter().map(|g| g.as_ref()).collect();
        let lr = schedule.lr_at(it);
        adam.step(codes.iter_mut(), &refs, &vec![lr; layers]);
    }

    best.into_iter()
        .zip(traces)
        .map(|(b, trace)| {
            let b = b.expect("at least one evaluation");
            Ok(InversionResult {
                code: ExtendedStyleCode {
                    per_layer: b.code.into_iter().map(StyleVector).collect(),
                },
                reconstruction: ImageBatch::new(b.image)?,
                final_pixel_loss: b.pixel,
                final_perceptual_loss: b.perceptual,
                loss_trace: trace,
            })
        })
        .collect()
}

#[derive(Clone)]
struct Best {
    objective: f64,
    pixel: f64,
    perceptual: f64,
    code: Vec<Vec<f32>>,
    image: Tensor<f32>,
}

/// SHA-256 of one dataset item's shape and pixels.
pub fn item_hash(image: &ImageBatch) -> String {
    let mut h = Sha256::new();
    for s in image.tensor().shape() {
        h.update((*s as u64).to_le_bytes());
    }
    h.update(image.tensor().f32_le_bytes());
    hex::encode(h.finalize())
}

/// How `precompute_transforms` seeds, batches, and caches.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputeOptions {
    pub init: InitStrategy,
    pub seed: u64,
    /// Images optimized per tape.
    pub chunk: usize,
    /// Root of the transform cache; `None` disables persistence.
    pub cache_root: Option<PathBuf>,
}

impl Default for PrecomputeOptions {
    fn default() -> Self {
        Self {
            init: InitStrategy::MappedNoise,
            seed: 0,
            chunk: 16,
            cache_root: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrecomputeStats {
    pub computed: usize,
    pub reused: usize,
    /// Optimizer iterations executed, summed over images.
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct CacheIndex {
    format: u32,
    source_hash: String,
    schedule_hash: String,
    extractor_id: String,
    network: NetworkConfig,
    records: Vec<IndexEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct IndexEntry {
    item_hash: String,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheRecord {
    item_hash: String,
    code: Vec<Vec<f32>>,
    final_pixel_loss: f64,
    final_perceptual_loss: f64,
    loss_trace: Vec<f64>,
    reconstruction: Vec<f32>,
}

/// Everything that changes the optimum besides the source: schedule, init,
/// seed, and extractor.
pub fn schedule_hash(schedule: &InversionSchedule, extractor: &PerceptualExtractor, init: InitStrategy, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(schedule).expect("schedule serializes"));
    h.update(serde_json::to_vec(&init).expect("init serializes"));
    h.update(seed.to_le_bytes());
    h.update(INVERSION_NOISE_SEED.to_le_bytes());
    h.update(extractor.id().as_bytes());
    hex::encode(h.finalize())
}

/// Directory holding the records of one (source, schedule) pair.
pub fn cache_dir(root: &Path, source_hash: &str, schedule_hash: &str) -> PathBuf {
    root.join(format!("{}-{}", &source_hash[..16], &schedule_hash[..16]))
}

struct TransformCache {
    dir: PathBuf,
    index: CacheIndex,
}

impl TransformCache {
    fn open(root: &Path, expected: CacheIndex) -> Result<Self> {
        let dir = cache_dir(root, &expected.source_hash, &expected.schedule_hash);
        let index_path = dir.join("index.json");
        let mut index = expected.clone();
        if index_path.exists() {
            let parsed = fs::read(&index_path)
                .map_err(Error::from)
                .and_then(|b| serde_json::from_slice::<CacheIndex>(&b).map_err(Error::from));
            match parsed {
                Ok(old)
                    if old.format == expected.format
                        && old.source_hash == expected.source_hash
                        && old.schedule_hash == expected.schedule_hash
                        && old.extractor_id == expected.extractor_id
                        && old.network == expected.network =>
                {
                    index.records = old.records;
                }
                Ok(_) => {
                    log::warn!("transform cache at {} does not match the source or schedule; recomputing", dir.display());
                    fs::remove_dir_all(&dir)?;
                }
                Err(e) => {
                    log::warn!("transform cache index at {} unreadable ({e}); recomputing", dir.display());
                    fs::remove_dir_all(&dir)?;
                }
            }
        }
        fs::create_dir_all(dir.join("records"))?;
        Ok(Self { dir, index })
    }

    fn load(&self, item: &str, cfg: &NetworkConfig) -> Option<CacheRecord> {
        let entry = self.index.records.iter().find(|e| e.item_hash == item)?;
        let path = self.dir.join(&entry.file);
        let rec = fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice::<CacheRecord>(&b).ok())
            .filter(|r| {
                r.item_hash == item
                    && r.code.len() == cfg.layer_count_g()
                    && r.code.iter().all(|w| w.len() == cfg.style_dim)
                    && r.reconstruction.len() == 3 * cfg.resolution * cfg.resolution
            });
        if rec.is_none() {
            log::warn!("transform cache record {} is damaged; recomputing it", path.display());
        }
        rec
    }

    fn store(&mut self, rec: &CacheRecord) -> Result<()> {
        let file = format!("records/{}.json", rec.item_hash);
        write_atomic(&self.dir.join(&file), &serde_json::to_vec(rec)?)?;
        if !self.index.records.iter().any(|e| e.item_hash == rec.item_hash) {
            self.index.records.push(IndexEntry {
                item_hash: rec.item_hash.clone(),
                file,
            });
        }
        write_atomic(&self.dir.join("index.json"), &serde_json::to_vec_pretty(&self.index)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn record_of(item: &str, r: &InversionResult) -> CacheRecord {
    CacheRecord {
        item_hash: item.to_string(),
        code: r.code.per_layer.iter().map(|w| w.0.clone()).collect(),
        final_pixel_loss: r.final_pixel_loss,
        final_perceptual_loss: r.final_perceptual_loss,
        loss_trace: r.loss_trace.clone(),
        reconstruction: r.reconstruction.tensor().data().to_vec(),
    }
}

fn result_of(rec: CacheRecord, res: usize) -> Result<InversionResult> {
    Ok(InversionResult {
        code: ExtendedStyleCode {
            per_layer: rec.code.into_iter().map(StyleVector).collect(),
        },
        reconstruction: ImageBatch::new(Tensor::new(vec![1, 3, res, res], rec.reconstruction)?)?,
        final_pixel_loss: rec.final_pixel_loss,
        final_perceptual_loss: rec.final_perceptual_loss,
        loss_trace: rec.loss_trace,
    })
}

/// Per-image seed derived from content, so a cached record does not depend
/// on the image's position in the dataset.
fn item_seed(seed: u64, item: &str) -> u64 {
    let mut b = [0u8; 8];
    hex::decode_to_slice(&item[..16], &mut b).expect("hex digest");
    crate::rng::mix(seed, u64::from_le_bytes(b))
}

/// Invert every dataset image (or load it from the cache) and attach the
/// source generator's feature pyramid at the recovered code.
pub fn precompute_transforms(
    dataset: &[ImageBatch],
    source: &GanSnapshot,
    extractor: &PerceptualExtractor,
    schedule: &InversionSchedule,
    opts: &PrecomputeOptions,
) -> Result<(Vec<TransformedSample>, PrecomputeStats)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    schedule.validate()?;
    if opts.chunk == 0 {
        return Err(Error::invalid("chunk must be > 0"));
    }
    for img in dataset {
        if img.len() != 1 {
            return Err(Error::invalid("dataset items must be single images"));
        }
        check_target(img, &source.config)?;
    }
    let cfg = &source.config;
    let hashes: Vec<String> = dataset.iter().map(item_hash).collect();
    let mut cache = match &opts.cache_root {
        None => None,
        Some(root) => Some(TransformCache::open(
            root,
            CacheIndex {
                format: CACHE_FORMAT,
                source_hash: source.content_hash(),
                schedule_hash: schedule_hash(schedule, extractor, opts.init, opts.seed),
                extractor_id: extractor.id().to_string(),
                network: cfg.clone(),
                records: Vec::new(),
            },
        )?),
    };

    let mut results: Vec<Option<InversionResult>> = vec![None; dataset.len()];
    let mut stats = PrecomputeStats::default();
    let mut pending = Vec::new();
    for (i, h) in hashes.iter().enumerate() {
        let rec = cache.as_ref().and_then(|c| c.load(h, cfg));
        match rec {
            Some(r) => {
                results[i] = Some(result_of(r, cfg.resolution)?);
                stats.reused += 1;
            }
            None if pending.iter().any(|&j: &usize| hashes[j] == *h) => {}
            None => pending.push(i),
        }
    }

    for chunk in pending.chunks(opts.chunk) {
        let targets = ImageBatch::concat(&chunk.iter().map(|&i| &dataset[i]).collect::<Vec<_>>())?;
        let seeds: Vec<u64> = chunk.iter().map(|&i| item_seed(opts.seed, &hashes[i])).collect();
        let out = invert_many(&targets, source, extractor, schedule, opts.init, &seeds)?;
        for (&i, r) in chunk.iter().zip(out) {
            if let Some(c) = cache.as_mut() {
                c.store(&record_of(&hashes[i], &r))?;
            }
            stats.computed += 1;
            stats.iterations += schedule.iterations;
            results[i] = Some(r);
        }
    }
    // duplicates of an image share its result
    for i in 0..dataset.len() {
        if results[i].is_none() {
            let j = (0..dataset.len())
                .find(|&j| hashes[j] == hashes[i] && results[j].is_some())
                .expect("every distinct item was inverted");
            results[i] = results[j].clone();
        }
    }
    let results: Vec<InversionResult> = results.into_iter().map(|r| r.expect("filled")).collect();

    let mut samples = Vec::with_capacity(dataset.len());
    for (start, chunk) in (0..dataset.len()).step_by(opts.chunk).zip(results.chunks(opts.chunk)) {
        let layers = cfg.layer_count_g();
        let styles: Vec<Tensor<f32>> = (0..layers)
            .map(|l| {
                let rows: Vec<f32> = chunk.iter().flat_map(|r| r.code.per_layer[l].0.iter().copied()).collect();
                Tensor::new(vec![chunk.len(), cfg.style_dim], rows)
            })
            .collect::<Result<_>>()?;
        let (_, pyramid) = source.synthesize(&StyleInput::Extended(styles), INVERSION_NOISE_SEED)?;
        for (k, r) in chunk.iter().enumerate() {
            samples.push(TransformedSample {
                target_image: dataset[start + k].clone(),
                inversion: r.clone(),
                source_features: pyramid.select(&[k]),
            });
        }
    }
    Ok((samples, stats))
}
