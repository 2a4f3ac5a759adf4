//! Style-modulated generator and mirrored critic with per-block feature taps.
//!
//! The generator starts from a learned 4x4 constant and doubles resolution once
//! per block. Every block consumes its own style vector through adaptive
//! instance normalization, so an extended code carries one style per block.
//! The critic mirrors the generator: one block per octave, downsampling
//! between blocks, a linear head producing one unbounded score per sample.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_normal, scaled_normal, Bound, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

const LRELU_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
const MAX_CHANNELS: usize = 256;

const STREAM_INIT: u64 = 0x1417;
const STREAM_SYNTH_NOISE: u64 = 0x2217;
const STREAM_LATENT: u64 = 0x3317;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    DeterministicFromSeed,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub resolution: usize,
    pub style_dim: usize,
    pub mapping_depth: usize,
    pub channel_base: usize,
    pub noise_injection: NoiseMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            style_dim: 512,
            mapping_depth: 4,
            channel_base: 64,
            noise_injection: NoiseMode::DeterministicFromSeed,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::invalid(format!(
                "resolution must be a power of two >= 8, got {}",
                self.resolution
            )));
        }
        if self.style_dim == 0 {
            return Err(Error::invalid("style_dim must be positive"));
        }
        if self.mapping_depth == 0 {
            return Err(Error::invalid("mapping_depth must be positive"));
        }
        if self.channel_base == 0 {
            return Err(Error::invalid("channel_base must be positive"));
        }
        Ok(())
    }

    /// Number of resolution blocks, `log2(resolution) - 1`.
    pub fn layer_count(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }

    pub fn layer_count_g(&self) -> usize {
        self.layer_count()
    }

    pub fn layer_count_d(&self) -> usize {
        self.layer_count()
    }

    /// Spatial size of generator block `i` (4, 8, ..., resolution).
    pub fn g_resolution(&self, i: usize) -> usize {
        4 << i
    }

    /// Spatial size of critic block `i` (resolution, ..., 4).
    pub fn d_resolution(&self, i: usize) -> usize {
        self.resolution >> i
    }

    /// Generator width halves every octave, ending at `channel_base`.
    pub fn g_channels(&self, i: usize) -> usize {
        let up = self.layer_count() - 1 - i;
        (self.channel_base << up.min(16)).min(MAX_CHANNELS)
    }

    pub fn d_channels(&self, i: usize) -> usize {
        (self.channel_base << i.min(16)).min(MAX_CHANNELS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Generator,
    Discriminator,
}

/// A point of the input noise space.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector(pub Vec<f32>);

/// A point of the intermediate style space.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector(pub Vec<f32>);

/// One style vector per synthesis block: the extended embedding of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedStyleCode {
    pub per_layer: Vec<StyleVector>,
}

impl ExtendedStyleCode {
    pub fn broadcast(w: &StyleVector, layers: usize) -> Self {
        Self {
            per_layer: vec![w.clone(); layers],
        }
    }
}

/// Batched synthesis input.
#[derive(Clone, Debug, PartialEq)]
pub enum StyleInput<T> {
    /// `[n, style_dim]`, shared by every block.
    Broadcast(Tensor<T>),
    /// One `[n, style_dim]` tensor per block.
    Extended(Vec<Tensor<T>>),
}

impl<T: Scalar> StyleInput<T> {
    pub fn batch(&self) -> usize {
        match self {
            StyleInput::Broadcast(t) => t.dim(0),
            StyleInput::Extended(v) => v.first().map_or(0, |t| t.dim(0)),
        }
    }

    /// Per-block tensors, cloning the broadcast style into every block.
    pub fn per_layer(&self, layers: usize) -> Vec<Tensor<T>> {
        match self {
            StyleInput::Broadcast(t) => vec![t.clone(); layers],
            StyleInput::Extended(v) => v.clone(),
        }
    }
}

impl From<&ExtendedStyleCode> for StyleInput<f32> {
    fn from(code: &ExtendedStyleCode) -> Self {
        StyleInput::Extended(
            code.per_layer
                .iter()
                .map(|w| Tensor::new(vec![1, w.0.len()], w.0.clone()).expect("style row"))
                .collect(),
        )
    }
}

impl From<&StyleVector> for StyleInput<f32> {
    fn from(w: &StyleVector) -> Self {
        StyleInput::Broadcast(Tensor::new(vec![1, w.0.len()], w.0.clone()).expect("style row"))
    }
}

/// `[batch, 3, r, r]` with every entry in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32> {
    pixels: Tensor<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::shape(format!(
                "image batch must be [n>=1, 3, r, r], got {s:?}"
            )));
        }
        let one = T::ONE;
        if pixels.data().iter().any(|&v| !(v >= -one && v <= one)) {
            return Err(Error::invalid("image values must lie in [-1, 1]"));
        }
        Ok(Self { pixels })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.pixels.dim(2)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            pixels: self.pixels.gather_batch(idx),
        }
    }

    pub fn item(&self, i: usize) -> Self {
        Self {
            pixels: self.pixels.slice_batch(i, i + 1),
        }
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|p| &p.pixels).collect();
        Ok(Self {
            pixels: Tensor::concat_batch(&ts)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        ImageBatch {
            pixels: self.pixels.cast(),
        }
    }
}

/// Ordered per-block activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub levels: Vec<Tensor<T>>,
    pub origin: Origin,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |t| t.dim(0))
    }

    /// Rows `idx` of every level.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            levels: self.levels.iter().map(|t| t.gather_batch(idx)).collect(),
            origin: self.origin,
        }
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("no pyramids to concatenate"))?;
        let levels = (0..first.len())
            .map(|l| {
                let ts: Vec<&Tensor<T>> = parts.iter().map(|p| &p.levels[l]).collect();
                Tensor::concat_batch(&ts)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            levels,
            origin: first.origin,
        })
    }
}

/// A generator/critic pair with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GanSnapshot<T = f32> {
    pub generator: ParamSet<T>,
    pub discriminator: ParamSet<T>,
    pub config: NetworkConfig,
    pub step: u64,
    pub role: Role,
}

fn gname(i: usize, leaf: &str) -> String {
    format!("synthesis.{i}.{leaf}")
}

fn dname(i: usize, leaf: &str) -> String {
    format!("critic.{i}.{leaf}")
}

pub fn generator_params<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(rng::mix(seed, 1), STREAM_INIT);
    let d = cfg.style_dim;
    let mut p = ParamSet::new();
    for i in 0..cfg.mapping_depth {
        p.insert(format!("mapping.{i}.weight"), he_normal(&[d, d], d, &mut rng));
        p.insert(format!("mapping.{i}.bias"), Tensor::zeros(&[d]));
    }
    let c0 = cfg.g_channels(0);
    p.insert(
        "synthesis.const",
        scaled_normal(&[1, c0, 4, 4], 1.0, &mut rng),
    );
    let mut cin = c0;
    for i in 0..cfg.layer_count_g() {
        let c = cfg.g_channels(i);
        p.insert(gname(i, "conv.weight"), he_normal(&[c, cin, 3, 3], cin * 9, &mut rng));
        p.insert(gname(i, "conv.bias"), Tensor::zeros(&[c]));
        p.insert(gname(i, "noise_strength"), Tensor::full(&[c], T::from_f64(0.05)));
        let style_std = 0.25 / (d as f64).sqrt();
        p.insert(gname(i, "style_scale.weight"), scaled_normal(&[d, c], style_std, &mut rng));
        p.insert(gname(i, "style_scale.bias"), Tensor::full(&[c], T::ONE));
        p.insert(gname(i, "style_shift.weight"), scaled_normal(&[d, c], style_std, &mut rng));
        p.insert(gname(i, "style_shift.bias"), Tensor::zeros(&[c]));
        cin = c;
    }
    p.insert("to_rgb.weight", he_normal(&[3, cin, 1, 1], cin, &mut rng));
    p.insert("to_rgb.bias", Tensor::zeros(&[3]));
    Ok(p)
}

pub fn discriminator_params<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = rng::stream(rng::mix(seed, 2), STREAM_INIT);
    let mut p = ParamSet::new();
    let c0 = cfg.d_channels(0);
    p.insert("from_rgb.weight", he_normal(&[c0, 3, 1, 1], 3, &mut rng));
    p.insert("from_rgb.bias", Tensor::zeros(&[c0]));
    let mut cin = c0;
    for i in 0..cfg.layer_count_d() {
        let c = cfg.d_channels(i);
        p.insert(dname(i, "conv.weight"), he_normal(&[c, cin, 3, 3], cin * 9, &mut rng));
        p.insert(dname(i, "conv.bias"), Tensor::zeros(&[c]));
        cin = c;
    }
    let flat = cin * 16;
    p.insert("head.weight", scaled_normal(&[flat, 1], (1.0 / flat as f64).sqrt(), &mut rng));
    p.insert("head.bias", Tensor::zeros(&[1]));
    Ok(p)
}

/// Critic block that owns a parameter, or `None` for the head.
pub fn critic_block_of(name: &str) -> Option<usize> {
    if name.starts_with("from_rgb.") {
        return Some(0);
    }
    name.strip_prefix("critic.")
        .and_then(|rest| rest.split('.').next())
        .and_then(|i| i.parse().ok())
}

/// Normalize each latent row to unit root-mean-square.
pub fn normalize_latents<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let d = z.dim(1);
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(d) {
        let ms = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / d as f64;
        let s = T::from_f64(1.0 / (ms + 1e-8).sqrt());
        for v in row {
            *v *= s;
        }
    }
    out
}

/// Mapping network on the tape: `z[n,d] -> w[n,d]`.
pub fn map_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    gen: &Bound<'_, T>,
    z: &Tensor<T>,
) -> Result<Var> {
    if z.shape().len() != 2 || z.dim(1) != cfg.style_dim {
        return Err(Error::invalid(format!(
            "latent batch must be [n, {}], got {:?}",
            cfg.style_dim,
            z.shape()
        )));
    }
    if !z.all_finite() {
        return Err(Error::invalid("latent contains non-finite entries"));
    }
    let mut h = g.constant(normalize_latents(z));
    for i in 0..cfg.mapping_depth {
        h = g.matmul(h, gen.var(&format!("mapping.{i}.weight"))?)?;
        h = g.add_row_bias(h, gen.var(&format!("mapping.{i}.bias"))?)?;
        if i + 1 < cfg.mapping_depth {
            h = g.leaky_relu(h, T::from_f64(LRELU_SLOPE));
        }
    }
    Ok(h)
}

/// Per-block noise maps `[1,1,r,r]`, a pure function of `(seed, block)`.
pub fn synthesis_noise<T: Scalar>(cfg: &NetworkConfig, seed: u64, block: usize) -> Tensor<T> {
    let r = cfg.g_resolution(block);
    rng::gaussian(&[1, 1, r, r], rng::mix(seed, block as u64), STREAM_SYNTH_NOISE)
}

/// Synthesis network on the tape. Returns the image and one tap per block.
pub fn synthesize_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    gen: &Bound<'_, T>,
    styles: &[Var],
    noise_seed: u64,
) -> Result<(Var, Vec<Var>)> {
    let layers = cfg.layer_count_g();
    if styles.len() != layers {
        return Err(Error::invalid(format!(
            "extended code has {} layers, network has {layers}",
            styles.len()
        )));
    }
    let n = g.shape(styles[0])[0];
    for &s in styles {
        if g.shape(s) != [n, cfg.style_dim] {
            return Err(Error::invalid(format!(
                "style must be [{n}, {}], got {:?}",
                cfg.style_dim,
                g.shape(s)
            )));
        }
    }
    let slope = T::from_f64(LRELU_SLOPE);
    let mut x = g.broadcast_batch(gen.var("synthesis.const")?, n)?;
    let mut taps = Vec::with_capacity(layers);
    for (i, &style) in styles.iter().enumerate() {
        if i > 0 {
            x = g.upsample2x(x)?;
        }
        x = g.conv2d(x, gen.var(&gname(i, "conv.weight"))?)?;
        x = g.add_channel_bias(x, gen.var(&gname(i, "conv.bias"))?)?;
        if cfg.noise_injection == NoiseMode::DeterministicFromSeed {
            let noise = synthesis_noise(cfg, noise_seed, i);
            x = g.noise_inject(x, gen.var(&gname(i, "noise_strength"))?, noise)?;
        }
        x = g.instance_norm(x, T::from_f64(NORM_EPS))?;
        let gamma = g.matmul(style, gen.var(&gname(i, "style_scale.weight"))?)?;
        let gamma = g.add_row_bias(gamma, gen.var(&gname(i, "style_scale.bias"))?)?;
        let beta = g.matmul(style, gen.var(&gname(i, "style_shift.weight"))?)?;
        let beta = g.add_row_bias(beta, gen.var(&gname(i, "style_shift.bias"))?)?;
        x = g.modulate(x, gamma, beta)?;
        x = g.leaky_relu(x, slope);
        taps.push(x);
    }
    let rgb = g.conv2d(x, gen.var("to_rgb.weight")?)?;
    let rgb = g.add_channel_bias(rgb, gen.var("to_rgb.bias")?)?;
    Ok((g.tanh(rgb), taps))
}

/// Critic on the tape. Returns scores `[n]` and one tap per block.
pub fn discriminate_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    disc: &Bound<'_, T>,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.resolution || s[3] != cfg.resolution {
        return Err(Error::invalid(format!(
            "critic expects [n, 3, {r}, {r}], got {s:?}",
            r = cfg.resolution
        )));
    }
    let n = s[0];
    let slope = T::from_f64(LRELU_SLOPE);
    let mut h = g.conv2d(x, disc.var("from_rgb.weight")?)?;
    h = g.add_channel_bias(h, disc.var("from_rgb.bias")?)?;
    h = g.leaky_relu(h, slope);
    let layers = cfg.layer_count_d();
    let mut taps = Vec::with_capacity(layers);
    for i in 0..layers {
        h = g.conv2d(h, disc.var(&dname(i, "conv.weight"))?)?;
        h = g.add_channel_bias(h, disc.var(&dname(i, "conv.bias"))?)?;
        h = g.leaky_relu(h, slope);
        taps.push(h);
        if i + 1 < layers {
            h = g.avg_pool2x(h)?;
        }
    }
    let flat = g.shape(h)[1] * 16;
    let h = g.reshape(h, &[n, flat])?;
    let out = g.matmul(h, disc.var("head.weight")?)?;
    let out = g.add_row_bias(out, disc.var("head.bias")?)?;
    let scores = g.reshape(out, &[n])?;
    Ok((scores, taps))
}

/// `n` unit-Gaussian latents; row `k` is the `k`-th draw of `seed`'s stream.
pub fn sample_latents<T: Scalar>(n: usize, style_dim: usize, seed: u64) -> Tensor<T> {
    rng::gaussian(&[n, style_dim], seed, STREAM_LATENT)
}

impl<T: Scalar> GanSnapshot<T> {
    /// Freshly initialized source-role pair.
    pub fn random(config: NetworkConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            generator: generator_params(&config, seed)?,
            discriminator: discriminator_params(&config, seed)?,
            config,
            step: 0,
            role: Role::Source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let g = generator_params::<T>(&self.config, 0)?;
        let d = discriminator_params::<T>(&self.config, 0)?;
        if !g.same_layout(&self.generator) || !d.same_layout(&self.discriminator) {
            return Err(Error::invalid(
                "parameter names or shapes do not match the network config",
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> GanSnapshot<U> {
        GanSnapshot {
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
            config: self.config.clone(),
            step: self.step,
            role: self.role,
        }
    }

    /// SHA-256 over config and every parameter; step and role excluded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(b"G");
        self.generator.hash_into(&mut h);
        h.update(b"D");
        self.discriminator.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    /// Map a batch of latents `[n, style_dim]` to styles.
    pub fn map_noise_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let gen = self.generator.bind(&mut g, false);
        let w = map_graph(&mut g, &self.config, &gen, z)?;
        Ok(g.value(w).clone())
    }

    pub fn synthesize(&self, code: &StyleInput<T>, seed: u64) -> Result<(ImageBatch<T>, FeaturePyramid<T>)> {
        let mut g = Graph::new();
        let gen = self.generator.bind(&mut g, false);
        let styles: Vec<Var> = match code {
            StyleInput::Broadcast(t) => {
                let v = g.constant(t.clone());
                vec![v; self.config.layer_count_g()]
            }
            StyleInput::Extended(ts) => ts.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let (img, taps) = synthesize_graph(&mut g, &self.config, &gen, &styles, seed)?;
        let pyramid = FeaturePyramid {
            levels: taps.iter().map(|&t| g.value(t).clone()).collect(),
            origin: Origin::Generator,
        };
        Ok((ImageBatch::new(g.value(img).clone())?, pyramid))
    }

    /// Sample latents, map them, synthesize.
    pub fn generate(&self, n: usize, latent_seed: u64, noise_seed: u64) -> Result<ImageBatch<T>> {
        let z = sample_latents(n, self.config.style_dim, latent_seed);
        let w = self.map_noise_batch(&z)?;
        Ok(self.synthesize(&StyleInput::Broadcast(w), noise_seed)?.0)
    }

    pub fn discriminate(&self, x: &ImageBatch<T>) -> Result<(Vec<T>, FeaturePyramid<T>)> {
        let mut g = Graph::new();
        let disc = self.discriminator.bind(&mut g, false);
        let xv = g.constant(x.tensor().clone());
        let (scores, taps) = discriminate_graph(&mut g, &self.config, &disc, xv)?;
        let pyramid = FeaturePyramid {
            levels: taps.iter().map(|&t| g.value(t).clone()).collect(),
            origin: Origin::Discriminator,
        };
        Ok((g.value(scores).data().to_vec(), pyramid))
    }

    /// Target-role copy with identical parameters and a reset step counter.
    pub fn init_target_from_source(&self) -> Result<Self> {
        if self.role != Role::Source {
            return Err(Error::invalid("init_target_from_source needs a source snapshot"));
        }
        self.validate()?;
        Ok(Self {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            config: self.config.clone(),
            step: 0,
            role: Role::Target,
        })
    }
}

impl GanSnapshot<f32> {
    pub fn map_noise(&self, z: &NoiseVector) -> Result<StyleVector> {
        if z.0.len() != self.config.style_dim {
            return Err(Error::invalid(format!(
                "noise has length {}, style_dim is {}",
                z.0.len(),
                self.config.style_dim
            )));
        }
        let t = Tensor::new(vec![1, z.0.len()], z.0.clone())?;
        Ok(StyleVector(self.map_noise_batch(&t)?.into_data()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(res: usize) -> NetworkConfig {
        NetworkConfig {
            resolution: res,
            style_dim: 16,
            mapping_depth: 2,
            channel_base: 4,
            noise_injection: NoiseMode::DeterministicFromSeed,
        }
    }

    #[test]
    fn config_rejects_bad_resolution() {
        for r in [4, 12, 0, 48] {
            let cfg = NetworkConfig { resolution: r, ..small(8) };
            assert!(cfg.validate().is_err(), "{r}");
        }
        assert_eq!(NetworkConfig { resolution: 256, ..small(8) }.layer_count(), 7);
    }

    #[test]
    fn map_noise_shape_determinism_and_nan() {
        let snap = GanSnapshot::<f32>::random(small(8), 1).unwrap();
        let z = NoiseVector(vec![0.3; 16]);
        let a = snap.map_noise(&z).unwrap();
        let b = snap.map_noise(&z).unwrap();
        assert_eq!(a.0.len(), 16);
        assert_eq!(a, b);
        let mut bad = z.0.clone();
        bad[3] = f32::NAN;
        assert!(matches!(
            snap.map_noise(&NoiseVector(bad)),
            Err(Error::InvalidInput(_))
        ));
        assert!(snap.map_noise(&NoiseVector(vec![0.0; 15])).is_err());
    }

    #[test]
    fn default_config_maps_to_512() {
        let snap = GanSnapshot::<f32>::random(
            NetworkConfig { resolution: 8, channel_base: 2, ..Default::default() },
            0,
        )
        .unwrap();
        let w = snap.map_noise(&NoiseVector(vec![0.1; 512])).unwrap();
        assert_eq!(w.0.len(), 512);
    }

    #[test]
    fn shapes_for_every_resolution() {
        for res in [8usize, 16, 32, 64, 128, 256] {
            let cfg = NetworkConfig { channel_base: 1, style_dim: 4, ..small(res) };
            let snap = GanSnapshot::<f32>::random(cfg.clone(), 3).unwrap();
            let w = Tensor::full(&[1, 4], 0.5f32);
            let (img, pyr) = snap.synthesize(&StyleInput::Broadcast(w), 0).unwrap();
            assert_eq!(img.tensor().shape(), &[1, 3, res, res]);
            assert!(img.tensor().max_abs() <= 1.0);
            let expected = res.trailing_zeros() as usize - 1;
            assert_eq!(pyr.len(), expected);
            let sizes: Vec<usize> = pyr.levels.iter().map(|t| t.dim(2)).collect();
            assert!(sizes.windows(2).all(|p| p[0] < p[1]));
            let (scores, dp) = snap.discriminate(&img).unwrap();
            assert_eq!(scores.len(), 1);
            assert_eq!(dp.len(), expected);
            let dsizes: Vec<usize> = dp.levels.iter().map(|t| t.dim(2)).collect();
            assert!(dsizes.windows(2).all(|p| p[0] > p[1]));
        }
    }

    #[test]
    fn default_64px_pyramid_sizes() {
        let snap = GanSnapshot::<f32>::random(NetworkConfig { style_dim: 8, channel_base: 2, ..Default::default() }, 0).unwrap();
        let w = Tensor::full(&[1, 8], 0.1f32);
        let (img, pyr) = snap.synthesize(&StyleInput::Broadcast(w), 0).unwrap();
        assert_eq!(img.tensor().shape(), &[1, 3, 64, 64]);
        let sizes: Vec<usize> = pyr.levels.iter().map(|t| t.dim(2)).collect();
        assert_eq!(sizes, vec![4, 8, 16, 32, 64]);
    }

    #[test]
    fn synthesis_is_deterministic_and_broadcast_law_holds() {
        let cfg = small(16);
        let snap = GanSnapshot::<f32>::random(cfg.clone(), 5).unwrap();
        let w = snap.map_noise_batch(&sample_latents(2, 16, 9)).unwrap();
        let a = snap.synthesize(&StyleInput::Broadcast(w.clone()), 4).unwrap();
        let b = snap.synthesize(&StyleInput::Broadcast(w.clone()), 4).unwrap();
        assert_eq!(a, b);
        let ext = StyleInput::Extended(vec![w.clone(); cfg.layer_count_g()]);
        let c = snap.synthesize(&ext, 4).unwrap();
        assert_eq!(a, c);
        let d = snap.synthesize(&StyleInput::Broadcast(w), 5).unwrap();
        assert_ne!(a.0, d.0, "noise seed must matter");
    }

    #[test]
    fn layer_count_mismatch_rejected() {
        let cfg = small(16);
        let snap = GanSnapshot::<f32>::random(cfg, 5).unwrap();
        let ext = StyleInput::Extended(vec![Tensor::zeros(&[1, 16]); 2]);
        assert!(matches!(snap.synthesize(&ext, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn critic_is_per_sample_and_checks_resolution() {
        let snap = GanSnapshot::<f32>::random(small(16), 2).unwrap();
        let imgs = snap.generate(3, 1, 0).unwrap();
        let dup = imgs.select(&[0, 1, 0, 2, 0]);
        let (scores, _) = snap.discriminate(&dup).unwrap();
        assert_eq!(scores.len(), 5);
        assert_eq!(scores[0], scores[2]);
        assert_eq!(scores[0], scores[4]);
        let other = GanSnapshot::<f32>::random(small(8), 2).unwrap();
        assert!(matches!(other.discriminate(&imgs), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn target_init_copies_and_isolates() {
        let src = GanSnapshot::<f32>::random(small(16), 7).unwrap();
        let hash = src.content_hash();
        let mut tgt = src.init_target_from_source().unwrap();
        assert_eq!(tgt.role, Role::Target);
        assert_eq!(tgt.step, 0);
        assert_eq!(tgt.generator, src.generator);
        assert_eq!(tgt.discriminator, src.discriminator);
        let imgs = src.generate(2, 3, 0).unwrap();
        assert_eq!(src.discriminate(&imgs).unwrap(), tgt.discriminate(&imgs).unwrap());
        // second application from the same source is parameter-equal
        let again = src.init_target_from_source().unwrap();
        assert_eq!(again, tgt);
        for (_, t) in tgt.generator.iter_mut() {
            t.data_mut()[0] += 1.0;
        }
        assert_eq!(src.content_hash(), hash);
        assert!(tgt.init_target_from_source().is_err());
    }
}
