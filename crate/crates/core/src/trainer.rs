//! Source pretraining and the transfer loop.
//!
//! One iteration is a critic update followed by a generator update. Every
//! `r1_every` iterations the critic takes one extra Adam step on the R1
//! penalty alone (scaled by `r1_gamma * r1_every`), so `loss_d_total` only
//! ever holds the adversarial and distillation terms and `loss_r1` is
//! reported beside it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{diff_augment_graph, AugmentPolicy};
use crate::backbone::{
    critic_block_of, discriminate_graph, map_graph, sample_latents, synthesize_graph, FeaturePyramid, GanSnapshot,
    ImageBatch, NetworkConfig, Role,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::inversion::TransformedSample;
use crate::losses::{
    adversarial_d_graph, adversarial_g_graph, layerwise_discrepancy, layerwise_discrepancy_graph,
    r1_penalty_with_param_grads, total_d, total_g, LayerMask, LayerPreset, LayerSelection, LossWeights, MMDConfig,
};
use crate::metrics::FIDReport;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::Tensor;

const STREAM_BATCH: u64 = 0x51;
const TAG_D_LATENT: u64 = 1;
const TAG_G_LATENT: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_AUG_D_REAL: u64 = 4;
const TAG_AUG_D_FAKE: u64 = 5;
const TAG_AUG_G_FAKE: u64 = 6;
const TAG_AUG_G_REAL: u64 = 7;
const TAG_REAL_BATCH: u64 = 8;
const TAG_CACHE_BATCH: u64 = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub generator: LayerSelection,
    pub discriminator: LayerSelection,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            generator: LayerSelection::Preset(LayerPreset::Lower),
            discriminator: LayerSelection::Preset(LayerPreset::Lower),
        }
    }
}

impl MaskConfig {
    pub fn resolve(&self, net: &NetworkConfig) -> Result<LayerMask> {
        Ok(LayerMask {
            generator_layers: self.generator.resolve(net.layer_count_g())?,
            discriminator_layers: self.discriminator.resolve(net.layer_count_d())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub weights: LossWeights,
    pub mmd: MMDConfig,
    pub mask: MaskConfig,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub total_steps: usize,
    pub augment: AugmentPolicy,
    pub r1_gamma: f64,
    pub r1_every: usize,
    pub seed: u64,
    pub snapshot_every: usize,
    /// 1-based critic blocks whose learning rate is zero.
    pub freeze_d_layers: Vec<usize>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mmd: MMDConfig::default(),
            mask: MaskConfig::default(),
            batch_size: 16,
            lr_g: 0.001,
            lr_d: 0.002,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            total_steps: 1000,
            augment: AugmentPolicy::none(),
            r1_gamma: 1.0,
            r1_every: 16,
            seed: 0,
            snapshot_every: 100,
            freeze_d_layers: Vec::new(),
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.mmd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("transfer.batch_size must be >= 1"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::invalid("learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("adam betas must be in [0, 1)"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("transfer.total_steps must be > 0"));
        }
        if !(self.r1_gamma >= 0.0) {
            return Err(Error::invalid("transfer.r1_gamma must be >= 0"));
        }
        if self.r1_every == 0 || self.snapshot_every == 0 {
            return Err(Error::invalid("r1_every and snapshot_every must be >= 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

/// Loss components of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_g_total: f64,
    pub loss_g_adv: f64,
    pub loss_g_dis: f64,
    pub loss_g_reg: f64,
    pub loss_d_total: f64,
    pub loss_d_adv: f64,
    pub loss_d_dis: f64,
    pub loss_r1: f64,
}

impl StepRecord {
    fn values(&self) -> [f64; 8] {
        [
            self.loss_g_total,
            self.loss_g_adv,
            self.loss_g_dis,
            self.loss_g_reg,
            self.loss_d_total,
            self.loss_d_adv,
            self.loss_d_dis,
            self.loss_r1,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DPartial {
    pub total: f64,
    pub adv: f64,
    pub dis: f64,
    pub r1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GPartial {
    pub total: f64,
    pub adv: f64,
    pub dis: f64,
    pub reg: f64,
}

/// Trainable networks with their two optimizers.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub snapshot: GanSnapshot,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    lrs_g: Vec<f64>,
    lrs_d: Vec<f64>,
    mask: LayerMask,
    /// Completed iterations.
    pub step: u64,
}

impl TrainState {
    pub fn new(snapshot: GanSnapshot, cfg: &TransferConfig) -> Result<Self> {
        cfg.validate()?;
        snapshot.validate()?;
        let mask = cfg.mask.resolve(&snapshot.config)?;
        let layers_d = snapshot.config.layer_count_d();
        if let Some(bad) = cfg.freeze_d_layers.iter().find(|&&b| b == 0 || b > layers_d) {
            return Err(Error::invalid(format!("freeze_d_layers entry {bad} outside [1, {layers_d}]")));
        }
        let shapes = |p: &ParamSet<f32>| -> Vec<Vec<usize>> { p.iter().map(|(_, t)| t.shape().to_vec()).collect() };
        let sg = shapes(&snapshot.generator);
        let sd = shapes(&snapshot.discriminator);
        let lrs_g = vec![cfg.lr_g; sg.len()];
        let lrs_d = snapshot
            .discriminator
            .names()
            .map(|n| match critic_block_of(n) {
                Some(b) if cfg.freeze_d_layers.contains(&(b + 1)) => 0.0,
                _ => cfg.lr_d,
            })
            .collect();
        Ok(Self {
            opt_g: Adam::new(cfg.adam(), &sg.iter().map(|s| s.as_slice()).collect::<Vec<_>>()),
            opt_d: Adam::new(cfg.adam(), &sd.iter().map(|s| s.as_slice()).collect::<Vec<_>>()),
            snapshot,
            lrs_g,
            lrs_d,
            mask,
            step: 0,
        })
    }

    pub fn mask(&self) -> &LayerMask {
        &self.mask
    }

    /// Moment buffers of the two optimizers are separate objects.
    pub fn optimizer_steps(&self) -> (u64, u64) {
        (self.opt_g.steps(), self.opt_d.steps())
    }
}

fn step_seed(cfg: &TransferConfig, step: u64, tag: u64) -> u64 {
    rng::mix(rng::mix(cfg.seed, step), tag)
}

/// `k` indices into `0..n`: without replacement when possible.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, STREAM_BATCH);
    if n >= k {
        index::sample(&mut r, n, k).into_vec()
    } else {
        (0..k).map(|_| r.random_range(0..n)).collect()
    }
}

fn apply_grads(
    params: &mut ParamSet<f32>,
    opt: &mut Adam<f32>,
    grads: &mut crate::graph::Gradients<f32>,
    vars: &[Var],
    lrs: &[f64],
    scale: f32,
) -> Result<()> {
    let gs: Vec<Option<Tensor<f32>>> = vars
        .iter()
        .map(|&v| grads.take(v).map(|g| if scale == 1.0 { g } else { g.map(|x| x * scale) }))
        .collect();
    if gs.iter().flatten().any(|g| !g.all_finite()) {
        return Err(Error::non_finite("parameter gradient", Vec::new()));
    }
    let refs: Vec<Option<&Tensor<f32>>> = gs.iter().map(|g| g.as_ref()).collect();
    opt.step(params.iter_mut().map(|(_, t)| t), &refs, lrs);
    Ok(())
}

fn bound_vars(b: &crate::params::Bound<'_, f32>) -> Vec<Var> {
    b.iter().map(|(_, v)| v).collect()
}

/// Fakes from the current generator, with no tape kept.
fn generate_detached(snap: &GanSnapshot, n: usize, latent_seed: u64, noise_seed: u64) -> Result<Tensor<f32>> {
    Ok(snap.generate(n, latent_seed, noise_seed)?.into_tensor())
}

/// Critic update. `source` is `None` during pretraining.
pub fn transfer_step_d(
    state: &mut TrainState,
    source: Option<&GanSnapshot>,
    batch_real: &ImageBatch,
    cfg: &TransferConfig,
) -> Result<DPartial> {
    let net = state.snapshot.config.clone();
    let it = state.step;
    let n = batch_real.len();
    let fake = generate_detached(
        &state.snapshot,
        n,
        step_seed(cfg, it, TAG_D_LATENT),
        step_seed(cfg, it, TAG_NOISE),
    )?;

    let mut g = Graph::new();
    let xr = g.constant(batch_real.tensor().clone());
    let xf = g.constant(fake);
    let xr = diff_augment_graph(&mut g, xr, &cfg.augment, step_seed(cfg, it, TAG_AUG_D_REAL))?;
    let xf = diff_augment_graph(&mut g, xf, &cfg.augment, step_seed(cfg, it, TAG_AUG_D_FAKE))?;
    let real_in = g.value(xr).clone();

    let disc = state.snapshot.discriminator.bind(&mut g, true);
    let (sr, tr) = discriminate_graph(&mut g, &net, &disc, xr)?;
    let (sf, tf) = discriminate_graph(&mut g, &net, &disc, xf)?;
    let adv = adversarial_d_graph(&mut g, sf, sr)?;
    let w = cfg.weights;
    let mut dis_value = 0.0;
    let mut total = adv;
    if let Some(src) = source {
        let sdisc = src.discriminator.bind(&mut g, false);
        let (_, str_) = discriminate_graph(&mut g, &net, &sdisc, xr)?;
        let (_, stf) = discriminate_graph(&mut g, &net, &sdisc, xf)?;
        let layers = &state.mask.discriminator_layers;
        if w.lambda4 > 0.0 {
            let a = layerwise_discrepancy_graph(&mut g, &str_, &tr, layers, &cfg.mmd)?;
            let b = layerwise_discrepancy_graph(&mut g, &stf, &tf, layers, &cfg.mmd)?;
            let dis = g.add(a, b)?;
            dis_value = g.scalar_value(dis) as f64;
            let weighted = g.scale(dis, w.lambda4 as f32);
            total = g.add(adv, weighted)?;
        } else {
            let pyr = |g: &Graph<f32>, t: &[Var]| FeaturePyramid::<f32> {
                levels: t.iter().map(|&v| g.value(v).clone()).collect(),
                origin: crate::backbone::Origin::Discriminator,
            };
            dis_value = layerwise_discrepancy(&pyr(&g, &str_), &pyr(&g, &tr), layers, &cfg.mmd)?
                + layerwise_discrepancy(&pyr(&g, &stf), &pyr(&g, &tf), layers, &cfg.mmd)?;
        }
    }
    let adv_value = g.scalar_value(adv) as f64;
    let vars = bound_vars(&disc);
    let mut grads = g.backward(total)?;
    let record_total = total_d(adv_value, dis_value, 0.0, &w, 0.0);
    if !record_total.is_finite() {
        return Err(Error::non_finite("critic loss", vec![adv_value, dis_value]));
    }
    apply_grads(
        &mut state.snapshot.discriminator,
        &mut state.opt_d,
        &mut grads,
        &vars,
        &state.lrs_d,
        1.0,
    )?;

    let mut r1 = 0.0;
    if cfg.r1_gamma > 0.0 && it % cfg.r1_every as u64 == 0 {
        let params = state.snapshot.discriminator.clone();
        let score = |g: &mut Graph<f32>, x: Var| -> Result<(Var, Vec<Var>)> {
            let b = params.bind(g, true);
            let (s, _) = discriminate_graph(g, &net, &b, x)?;
            Ok((s, bound_vars(&b)))
        };
        let (penalty, pg) = r1_penalty_with_param_grads(&real_in, &score)?;
        if !penalty.is_finite() || pg.iter().any(|t| !t.all_finite()) {
            return Err(Error::non_finite("r1 penalty", vec![penalty]));
        }
        let scale = (cfg.r1_gamma * cfg.r1_every as f64) as f32;
        let scaled: Vec<Tensor<f32>> = pg.into_iter().map(|t| t.map(|x| x * scale)).collect();
        let refs: Vec<Option<&Tensor<f32>>> = scaled.iter().map(Some).collect();
        state.opt_d.step(
            state.snapshot.discriminator.iter_mut().map(|(_, t)| t),
            &refs,
            &state.lrs_d,
        );
        r1 = penalty;
    }
    Ok(DPartial {
        total: record_total,
        adv: adv_value,
        dis: dis_value,
        r1,
    })
}

/// Generator update. `source` and `cache` are `None` during pretraining.
pub fn transfer_step_g(
    state: &mut TrainState,
    source: Option<&GanSnapshot>,
    cache: &[TransformedSample],
    batch_real: &ImageBatch,
    cfg: &TransferConfig,
) -> Result<GPartial> {
    let net = state.snapshot.config.clone();
    let it = state.step;
    let n = cfg.batch_size;
    let w = cfg.weights;

    let mut g = Graph::new();
    let gen = state.snapshot.generator.bind(&mut g, true);
    let z = sample_latents::<f32>(n, net.style_dim, step_seed(cfg, it, TAG_G_LATENT));
    let wv = map_graph(&mut g, &net, &gen, &z)?;
    let styles = vec![wv; net.layer_count_g()];
    let (img, taps_t) = synthesize_graph(&mut g, &net, &gen, &styles, step_seed(cfg, it, TAG_NOISE))?;
    let xf = diff_augment_graph(&mut g, img, &cfg.augment, step_seed(cfg, it, TAG_AUG_G_FAKE))?;
    let disc = state.snapshot.discriminator.bind(&mut g, false);
    let (sf, _) = discriminate_graph(&mut g, &net, &disc, xf)?;
    let adv = adversarial_g_graph(&mut g, sf);
    let mut total = adv;
    let (mut dis_value, mut reg_value) = (0.0, 0.0);

    if let Some(src) = source {
        if !cache.is_empty() {
            let idx = sample_indices(cache.len(), n, step_seed(cfg, it, TAG_CACHE_BATCH));
            let picked: Vec<&FeaturePyramid> = idx.iter().map(|&i| &cache[i].source_features).collect();
            let fs = FeaturePyramid::concat(&picked)?;
            let fs_vars: Vec<Var> = fs.levels.iter().map(|t| g.constant(t.clone())).collect();
            let layers = &state.mask.generator_layers;
            if w.lambda2 > 0.0 {
                let dis = layerwise_discrepancy_graph(&mut g, &fs_vars, &taps_t, layers, &cfg.mmd)?;
                dis_value = g.scalar_value(dis) as f64;
                let weighted = g.scale(dis, w.lambda2 as f32);
                total = g.add(total, weighted)?;
            } else {
                let ft = FeaturePyramid::<f32> {
                    levels: taps_t.iter().map(|&v| g.value(v).clone()).collect(),
                    origin: crate::backbone::Origin::Generator,
                };
                dis_value = layerwise_discrepancy(&fs, &ft, layers, &cfg.mmd)?;
            }
        } else if w.lambda2 > 0.0 {
            return Err(Error::invalid("generator distillation needs transformed samples"));
        }

        let xr = g.constant(batch_real.tensor().clone());
        let xr = diff_augment_graph(&mut g, xr, &cfg.augment, step_seed(cfg, it, TAG_AUG_G_REAL))?;
        let sdisc = src.discriminator.bind(&mut g, false);
        let (_, er) = discriminate_graph(&mut g, &net, &sdisc, xr)?;
        let layers = &state.mask.discriminator_layers;
        if w.lambda3 > 0.0 {
            let (_, ef) = discriminate_graph(&mut g, &net, &sdisc, xf)?;
            let reg = layerwise_discrepancy_graph(&mut g, &er, &ef, layers, &cfg.mmd)?;
            reg_value = g.scalar_value(reg) as f64;
            let weighted = g.scale(reg, w.lambda3 as f32);
            total = g.add(total, weighted)?;
        } else {
            let fake_in = g.value(xf).clone();
            let (_, ef) = src.discriminate(&ImageBatch::new(fake_in)?)?;
            let erp = FeaturePyramid::<f32> {
                levels: er.iter().map(|&v| g.value(v).clone()).collect(),
                origin: crate::backbone::Origin::Discriminator,
            };
            reg_value = layerwise_discrepancy(&erp, &ef, layers, &cfg.mmd)?;
        }
    }

    let adv_value = g.scalar_value(adv) as f64;
    let record_total = total_g(adv_value, dis_value, reg_value, &w);
    if !record_total.is_finite() {
        return Err(Error::non_finite("generator loss", vec![adv_value, dis_value, reg_value]));
    }
    let vars = bound_vars(&gen);
    let mut grads = g.backward(total)?;
    apply_grads(
        &mut state.snapshot.generator,
        &mut state.opt_g,
        &mut grads,
        &vars,
        &state.lrs_g,
        1.0,
    )?;
    Ok(GPartial {
        total: record_total,
        adv: adv_value,
        dis: dis_value,
        reg: reg_value,
    })
}

/// Receives every step record and every emitted snapshot.
pub trait RunObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// May score the snapshot; the best-scoring one is kept.
    fn on_snapshot(&mut self, _snapshot: &GanSnapshot) -> Result<Option<FIDReport>> {
        Ok(None)
    }
}

/// Discards everything.
pub struct NullObserver;

impl RunObserver for NullObserver {}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub snapshot: GanSnapshot,
    pub records: Vec<StepRecord>,
    /// Steps at which snapshots were emitted.
    pub snapshot_steps: Vec<u64>,
    /// Lowest-FID snapshot among the scored ones.
    pub best: Option<(GanSnapshot, FIDReport)>,
}

fn real_batch(dataset: &ImageBatch, cfg: &TransferConfig, step: u64) -> ImageBatch {
    let idx = sample_indices(dataset.len(), cfg.batch_size, step_seed(cfg, step, TAG_REAL_BATCH));
    dataset.select(&idx)
}

fn run(
    mut state: TrainState,
    dataset: &ImageBatch,
    source: Option<&GanSnapshot>,
    cache: &[TransformedSample],
    cfg: &TransferConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut snapshot_steps = Vec::new();
    let mut best: Option<(GanSnapshot, FIDReport)> = None;
    for _ in 0..cfg.total_steps {
        let real = real_batch(dataset, cfg, state.step);
        let d = transfer_step_d(&mut state, source, &real, cfg)?;
        let gp = transfer_step_g(&mut state, source, cache, &real, cfg)?;
        state.step += 1;
        state.snapshot.step = state.step;
        let rec = StepRecord {
            step: state.step,
            loss_g_total: gp.total,
            loss_g_adv: gp.adv,
            loss_g_dis: gp.dis,
            loss_g_reg: gp.reg,
            loss_d_total: d.total,
            loss_d_adv: d.adv,
            loss_d_dis: d.dis,
            loss_r1: d.r1,
        };
        if !rec.all_finite() || !state.snapshot.generator.all_finite() || !state.snapshot.discriminator.all_finite() {
            return Err(Error::non_finite(format!("training step {}", state.step), rec.values().to_vec()));
        }
        observer.on_step(&rec)?;
        records.push(rec);
        if state.step % cfg.snapshot_every as u64 == 0 || state.step == cfg.total_steps as u64 {
            snapshot_steps.push(state.step);
            if let Some(report) = observer.on_snapshot(&state.snapshot)? {
                if best.as_ref().is_none_or(|(_, b)| report.score < b.score) {
                    best = Some((state.snapshot.clone(), report));
                }
            }
        }
    }
    Ok(RunOutcome {
        snapshot: state.snapshot,
        records,
        snapshot_steps,
        best,
    })
}

fn check_dataset(dataset: &ImageBatch, net: &NetworkConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if dataset.resolution() != net.resolution {
        return Err(Error::invalid(format!(
            "dataset resolution {} does not match network resolution {}",
            dataset.resolution(),
            net.resolution
        )));
    }
    Ok(())
}

/// Adversarial training of a fresh source pair. Distillation weights and the
/// layer mask are ignored.
pub fn pretrain(
    dataset: &ImageBatch,
    net: &NetworkConfig,
    cfg: &TransferConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    net.validate()?;
    check_dataset(dataset, net)?;
    let init = GanSnapshot::random(net.clone(), cfg.seed)?;
    if cfg.total_steps == 0 {
        TransferConfig { total_steps: 1, ..cfg.clone() }.validate()?;
        return Ok(RunOutcome {
            snapshot: init,
            records: Vec::new(),
            snapshot_steps: Vec::new(),
            best: None,
        });
    }
    let mut plain = cfg.clone();
    plain.weights = LossWeights::zero();
    plain.mask = MaskConfig {
        generator: LayerSelection::Preset(LayerPreset::All),
        discriminator: LayerSelection::Preset(LayerPreset::All),
    };
    let state = TrainState::new(init, &plain)?;
    let mut out = run(state, dataset, None, &[], &plain, observer)?;
    out.snapshot.role = Role::Source;
    Ok(out)
}

/// Untrained source pair; what `pretrain` starts from.
pub fn pretrain_init(net: &NetworkConfig, cfg: &TransferConfig) -> Result<GanSnapshot> {
    GanSnapshot::random(net.clone(), cfg.seed)
}

/// Few-shot transfer from a frozen source. `transforms` must hold one sample
/// per dataset image unless generator distillation is switched off.
pub fn transfer(
    dataset: &ImageBatch,
    source: &GanSnapshot,
    transforms: &[TransformedSample],
    cfg: &TransferConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    source.validate()?;
    if source.role != Role::Source {
        return Err(Error::invalid("transfer needs a source-role snapshot"));
    }
    check_dataset(dataset, &source.config)?;
    if cfg.weights.lambda2 > 0.0 && transforms.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "{} transformed samples for {} dataset images",
            transforms.len(),
            dataset.len()
        )));
    }
    if let Some(t) = transforms.first() {
        if t.target_image.resolution() != dataset.resolution() {
            return Err(Error::invalid("transformed samples do not match the dataset resolution"));
        }
    }
    let state = TrainState::new(source.init_target_from_source()?, cfg)?;
    run(state, dataset, Some(source), transforms, cfg, observer)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Fid(&'a FIDReport),
}

/// Newline-delimited records: `steps.ndjson` in `dir`.
pub struct RunLog {
    dir: PathBuf,
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let out = BufWriter::new(File::create(dir.join("steps.ndjson"))?);
        Ok(Self {
            dir: dir.to_path_buf(),
            out,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn step(&mut self, rec: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, &LogLine::Step(rec))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn fid(&mut self, rep: &FIDReport) -> Result<()> {
        serde_json::to_writer(&mut self.out, &LogLine::Fid(rep))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    /// Writes `manifest.json` next to the log.
    pub fn manifest(&mut self, manifest: &serde_json::Value) -> Result<()> {
        self.out.flush()?;
        fs::write(self.dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
        Ok(())
    }
}

/// Parse a run log back into its step records and FID reports.
pub fn read_run_log(path: &Path) -> Result<(Vec<StepRecord>, Vec<FIDReport>)> {
    #[derive(Deserialize)]
    #[serde(tag = "kind", rename_all = "lowercase")]
    enum Owned {
        Step(StepRecord),
        Fid(FIDReport),
    }
    let text = fs::read_to_string(path)?;
    let (mut steps, mut fids) = (Vec::new(), Vec::new());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<Owned>(line)? {
            Owned::Step(s) => steps.push(s),
            Owned::Fid(f) => fids.push(f),
        }
    }
    Ok((steps, fids))
}
