//! Training objectives.
//!
//! Feature alignment works on globally pooled activations: every tapped level
//! is reduced to a `[batch, channels]` matrix and two such matrices are
//! compared with a kernel MMD (or, for ablations, a paired L2 distance).
//! Every discrepancy is computed in `f64` together with its exact gradient and
//! enters the tape as a single custom node, so only the side that was bound
//! as trainable receives gradient.

use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// `[rows, cols]` matrix of pooled features.
pub type Matrix = Tensor<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    RbfMultiscale,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    /// Bandwidths are multipliers of the median pairwise distance of `A ∪ B`.
    MedianScaled,
    /// Bandwidths are absolute.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Biased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Mmd,
    /// Mean squared difference of paired pooled features.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MMDConfig {
    pub metric: Metric,
    pub kernel: Kernel,
    pub bandwidths: Vec<f64>,
    pub bandwidth_mode: BandwidthMode,
    pub estimator: Estimator,
    /// Optimize `sqrt(MMD^2)` instead of `MMD^2`.
    pub sqrt: bool,
}

impl Default for MMDConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Mmd,
            kernel: Kernel::RbfMultiscale,
            bandwidths: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            bandwidth_mode: BandwidthMode::MedianScaled,
            estimator: Estimator::Biased,
            sqrt: false,
        }
    }
}

impl MMDConfig {
    pub fn linear() -> Self {
        Self {
            kernel: Kernel::Linear,
            ..Self::default()
        }
    }

    pub fn fixed_rbf(bandwidths: Vec<f64>) -> Self {
        Self {
            bandwidths,
            bandwidth_mode: BandwidthMode::Fixed,
            ..Self::default()
        }
    }

    pub fn l2() -> Self {
        Self {
            metric: Metric::L2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == Kernel::RbfMultiscale
            && (self.bandwidths.is_empty() || self.bandwidths.iter().any(|&b| !(b > 0.0)))
        {
            return Err(Error::invalid("rbf kernel needs at least one positive bandwidth"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPreset {
    /// The first ceil(4L/7) blocks (blocks 1-4 of a 7-block network).
    Lower,
    /// The remaining blocks.
    Higher,
    All,
}

/// A named preset or explicit 1-based block indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Preset(LayerPreset),
    Indices(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, layer_count: usize) -> Result<Vec<usize>> {
        let lower_end = (4 * layer_count).div_ceil(7).max(1);
        let idx: Vec<usize> = match self {
            LayerSelection::Preset(LayerPreset::Lower) => (1..=lower_end).collect(),
            LayerSelection::Preset(LayerPreset::Higher) => (lower_end + 1..=layer_count).collect(),
            LayerSelection::Preset(LayerPreset::All) => (1..=layer_count).collect(),
            LayerSelection::Indices(v) => v.clone(),
        };
        if idx.is_empty() {
            return Err(Error::invalid(format!(
                "layer selection {self:?} is empty for {layer_count} layers"
            )));
        }
        if let Some(bad) = idx.iter().find(|&&i| i == 0 || i > layer_count) {
            return Err(Error::invalid(format!(
                "layer index {bad} outside [1, {layer_count}]"
            )));
        }
        Ok(idx)
    }
}

/// Which tapped blocks (1-based) take part in distillation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub generator_layers: Vec<usize>,
    pub discriminator_layers: Vec<usize>,
}

impl LayerMask {
    pub fn new(generator_layers: Vec<usize>, discriminator_layers: Vec<usize>, layer_count: usize) -> Result<Self> {
        let g = LayerSelection::Indices(generator_layers).resolve(layer_count)?;
        let d = LayerSelection::Indices(discriminator_layers).resolve(layer_count)?;
        Ok(Self {
            generator_layers: g,
            discriminator_layers: d,
        })
    }

    /// Lower-block default for a network with `layer_count` blocks.
    pub fn lower(layer_count: usize) -> Self {
        let sel = LayerSelection::Preset(LayerPreset::Lower);
        let idx = sel.resolve(layer_count).expect("lower preset is never empty");
        Self {
            generator_layers: idx.clone(),
            discriminator_layers: idx,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda2: 5.0,
            lambda3: 1.0,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda2, self.lambda3, self.lambda4]
            .iter()
            .any(|&l| !(l >= 0.0))
        {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Global average pooling of a pyramid level (1-based) into `[batch, channels]`.
pub fn pool<T: Scalar>(features: &FeaturePyramid<T>, layer: usize) -> Result<Matrix> {
    if layer == 0 || layer > features.len() {
        return Err(Error::invalid(format!(
            "layer {layer} outside [1, {}]",
            features.len()
        )));
    }
    Ok(pool_tensor(&features.levels[layer - 1]))
}

pub(crate) fn pool_tensor<T: Scalar>(t: &Tensor<T>) -> Matrix {
    let s = t.shape();
    let (n, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    Tensor::from_fn(&[n, c], |p| {
        t.data()[p * hw..(p + 1) * hw]
            .iter()
            .map(|v| v.to_f64())
            .sum::<f64>()
            / hw as f64
    })
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<(usize, usize, usize)> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape(format!(
            "expected matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, d, m) = (a.dim(0), a.dim(1), b.dim(0));
    if n == 0 || m == 0 {
        return Err(Error::invalid("mmd needs at least one row on each side"));
    }
    if b.dim(1) != d {
        return Err(Error::shape(format!("feature dims {d} vs {}", b.dim(1))));
    }
    Ok((n, m, d))
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median of the pairwise distances among `rows`, with the pair(s) that realize it.
fn median_distance(rows: &[&[f64]]) -> Option<(f64, Vec<(usize, usize)>)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for p in 0..rows.len() {
        for q in p + 1..rows.len() {
            pairs.push((sq_dist(rows[p], rows[q]).sqrt(), p, q));
        }
    }
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let k = pairs.len();
    let (med, who) = if k % 2 == 1 {
        let (d, p, q) = pairs[k / 2];
        (d, vec![(p, q)])
    } else {
        let (d1, p1, q1) = pairs[k / 2 - 1];
        let (d2, p2, q2) = pairs[k / 2];
        ((d1 + d2) / 2.0, vec![(p1, q1), (p2, q2)])
    };
    if med > 0.0 {
        Some((med, who))
    } else {
        None
    }
}

/// Biased squared MMD between the row sets `a` and `b`.
pub fn mmd(a: &Matrix, b: &Matrix, cfg: &MMDConfig) -> Result<f64> {
    Ok(mmd_with_grad(a, b, cfg)?.0)
}

/// Biased squared MMD and its gradients with respect to both inputs.
///
/// For the median-scaled kernel the bandwidth is itself a function of the
/// inputs; its (almost-everywhere) derivative is included.
pub fn mmd_with_grad(a: &Matrix, b: &Matrix, cfg: &MMDConfig) -> Result<(f64, Matrix, Matrix)> {
    cfg.validate()?;
    let (n, m, d) = check_pair(a, b)?;
    let (value, ga, gb) = match cfg.kernel {
        Kernel::Linear => linear_mmd(a, b, n, m, d),
        Kernel::RbfMultiscale => rbf_mmd(a, b, n, m, d, cfg),
    };
    Ok(apply_sqrt(cfg.sqrt, value, ga, gb))
}

fn apply_sqrt(enabled: bool, value: f64, mut ga: Matrix, mut gb: Matrix) -> (f64, Matrix, Matrix) {
    if !enabled {
        return (value, ga, gb);
    }
    let v = value.max(0.0);
    let root = v.sqrt();
    let s = if root > 1e-12 { 0.5 / root } else { 0.0 };
    for g in ga.data_mut().iter_mut().chain(gb.data_mut().iter_mut()) {
        *g *= s;
    }
    (root, ga, gb)
}

fn col_means(x: &Matrix, rows: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    mean
}

fn linear_mmd(a: &Matrix, b: &Matrix, n: usize, m: usize, d: usize) -> (f64, Matrix, Matrix) {
    let (ma, mb) = (col_means(a, n, d), col_means(b, m, d));
    let diff: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x - y).collect();
    let value = diff.iter().map(|v| v * v).sum();
    let ga = Tensor::from_fn(&[n, d], |i| 2.0 * diff[i % d] / n as f64);
    let gb = Tensor::from_fn(&[m, d], |i| -2.0 * diff[i % d] / m as f64);
    (value, ga, gb)
}

fn rbf_mmd(a: &Matrix, b: &Matrix, n: usize, m: usize, d: usize, cfg: &MMDConfig) -> (f64, Matrix, Matrix) {
    let rows: Vec<&[f64]> = a.data().chunks(d).chain(b.data().chunks(d)).collect();
    let total = n + m;
    let median = match cfg.bandwidth_mode {
        BandwidthMode::MedianScaled => median_distance(&rows),
        BandwidthMode::Fixed => None,
    };
    let base = median.as_ref().map_or(1.0, |(med, _)| *med);
    let sigmas: Vec<f64> = cfg.bandwidths.iter().map(|c| c * base).collect();

    // weight of pair (p, q) in the estimator
    let weight = |p: usize, q: usize| -> f64 {
        match (p < n, q < n) {
            (true, true) => 1.0 / (n * n) as f64,
            (false, false) => 1.0 / (m * m) as f64,
            _ => -1.0 / (n * m) as f64,
        }
    };

    let mut s_aa = 0.0;
    let mut s_bb = 0.0;
    let mut s_ab = 0.0;
    let mut grads = vec![0.0; total * d];
    let mut d_base = 0.0; // d value / d base bandwidth
    for p in 0..total {
        for q in 0..total {
            let r2 = sq_dist(rows[p], rows[q]);
            let mut k = 0.0;
            let mut dk_dr2 = 0.0;
            let mut dk_dbase = 0.0;
            for (s, c) in sigmas.iter().zip(&cfg.bandwidths) {
                let e = (-r2 / (2.0 * s * s)).exp();
                k += e;
                dk_dr2 -= e / (2.0 * s * s);
                dk_dbase += e * r2 / (s * s * s) * c;
            }
            match (p < n, q < n) {
                (true, true) => s_aa += k,
                (false, false) => s_bb += k,
                (true, false) => s_ab += k,
                (false, true) => {}
            }
            if p == q {
                continue;
            }
            let w = weight(p, q);
            d_base += w * dk_dbase;
            // d r2 / d row_p = 2 (row_p - row_q); the (q, p) term adds the mirror.
            let coef = w * dk_dr2 * 2.0;
            for j in 0..d {
                let diff = rows[p][j] - rows[q][j];
                grads[p * d + j] += coef * diff;
                grads[q * d + j] -= coef * diff;
            }
        }
    }
    let value = s_aa / (n * n) as f64 + s_bb / (m * m) as f64 - 2.0 * (s_ab / (n * m) as f64);

    if let Some((med, who)) = median {
        let share = d_base / who.len() as f64;
        for (p, q) in who {
            let dist = sq_dist(rows[p], rows[q]).sqrt();
            if dist <= 0.0 || med <= 0.0 {
                continue;
            }
            for j in 0..d {
                let u = (rows[p][j] - rows[q][j]) / dist;
                grads[p * d + j] += share * u;
                grads[q * d + j] -= share * u;
            }
        }
    }
    let gb = Tensor::new(vec![m, d], grads.split_off(n * d)).expect("grad b");
    let ga = Tensor::new(vec![n, d], grads).expect("grad a");
    (value, ga, gb)
}

/// Mean squared difference of paired feature rows.
pub fn l2_feature_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(l2_with_grad(a, b)?.0)
}

fn l2_with_grad(a: &Matrix, b: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::shape(format!(
            "l2 distance needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let k = a.numel() as f64;
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let value = diff.iter().map(|v| v * v).sum::<f64>() / k;
    let ga = Tensor::from_fn(a.shape(), |i| 2.0 * diff[i] / k);
    let gb = Tensor::from_fn(a.shape(), |i| -2.0 * diff[i] / k);
    Ok((value, ga, gb))
}

/// The configured discrepancy (MMD or paired L2) with gradients.
pub fn discrepancy_with_grad(a: &Matrix, b: &Matrix, cfg: &MMDConfig) -> Result<(f64, Matrix, Matrix)> {
    match cfg.metric {
        Metric::Mmd => mmd_with_grad(a, b, cfg),
        Metric::L2 => {
            let (v, ga, gb) = l2_with_grad(a, b)?;
            Ok(apply_sqrt(cfg.sqrt, v, ga, gb))
        }
    }
}

fn check_levels<T: Scalar>(
    x: &FeaturePyramid<T>,
    y: &FeaturePyramid<T>,
    layers: &[usize],
) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("empty layer mask"));
    }
    for &l in layers {
        if l == 0 || l > x.len() || l > y.len() {
            return Err(Error::invalid(format!(
                "layer {l} outside pyramids of {} and {} levels",
                x.len(),
                y.len()
            )));
        }
        let (cx, cy) = (x.levels[l - 1].dim(1), y.levels[l - 1].dim(1));
        if cx != cy {
            return Err(Error::shape(format!("layer {l}: {cx} vs {cy} channels")));
        }
    }
    Ok(())
}

/// Masked-layer mean of pooled discrepancies between two pyramids.
pub fn layerwise_discrepancy<T: Scalar>(
    x: &FeaturePyramid<T>,
    y: &FeaturePyramid<T>,
    layers: &[usize],
    cfg: &MMDConfig,
) -> Result<f64> {
    check_levels(x, y, layers)?;
    let mut acc = 0.0;
    for &l in layers {
        acc += discrepancy_with_grad(&pool(x, l)?, &pool(y, l)?, cfg)?.0;
    }
    Ok(acc / layers.len() as f64)
}

/// Source-generator pyramids of inverted codes against target-generator pyramids of fresh noise.
pub fn generator_distillation<T: Scalar>(
    f_s: &FeaturePyramid<T>,
    f_t: &FeaturePyramid<T>,
    mask: &LayerMask,
    cfg: &MMDConfig,
) -> Result<f64> {
    layerwise_discrepancy(f_s, f_t, &mask.generator_layers, cfg)
}

/// Paired source/target critic features on real images plus the same on fakes.
pub fn discriminator_distillation<T: Scalar>(
    e_s_real: &FeaturePyramid<T>,
    e_t_real: &FeaturePyramid<T>,
    e_s_fake: &FeaturePyramid<T>,
    e_t_fake: &FeaturePyramid<T>,
    mask: &LayerMask,
    cfg: &MMDConfig,
) -> Result<f64> {
    for (x, y) in [(e_s_real, e_t_real), (e_s_fake, e_t_fake)] {
        if x.batch() != y.batch() {
            return Err(Error::shape("paired pyramids must share the batch"));
        }
    }
    Ok(layerwise_discrepancy(e_s_real, e_t_real, &mask.discriminator_layers, cfg)?
        + layerwise_discrepancy(e_s_fake, e_t_fake, &mask.discriminator_layers, cfg)?)
}

/// Frozen source-critic features of real images against those of generated ones.
pub fn generator_regularization<T: Scalar>(
    e_s_real: &FeaturePyramid<T>,
    e_s_fake: &FeaturePyramid<T>,
    mask: &LayerMask,
    cfg: &MMDConfig,
) -> Result<f64> {
    layerwise_discrepancy(e_s_real, e_s_fake, &mask.discriminator_layers, cfg)
}

pub fn adversarial_g(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::invalid("no scores"));
    }
    Ok(-fake_scores.iter().sum::<f64>() / fake_scores.len() as f64)
}

pub fn adversarial_d(fake_scores: &[f64], real_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() || real_scores.is_empty() {
        return Err(Error::invalid("no scores"));
    }
    let mf = fake_scores.iter().sum::<f64>() / fake_scores.len() as f64;
    let mr = real_scores.iter().sum::<f64>() / real_scores.len() as f64;
    Ok(mf - mr)
}

pub fn total_g(adv: f64, dis: f64, reg: f64, w: &LossWeights) -> f64 {
    adv + w.lambda2 * dis + w.lambda3 * reg
}

pub fn total_d(adv: f64, dis: f64, r1: f64, w: &LossWeights, r1_gamma: f64) -> f64 {
    adv + w.lambda4 * dis + r1_gamma * r1
}

// ---- tape versions ----

/// Discrepancy node between two `[n, c]` vars.
pub fn discrepancy_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, cfg: &MMDConfig) -> Result<Var> {
    let (av, bv): (Matrix, Matrix) = (g.value(a).cast(), g.value(b).cast());
    let (value, ga, gb) = discrepancy_with_grad(&av, &bv, cfg)?;
    g.custom_scalar(T::from_f64(value), vec![(a, ga.cast()), (b, gb.cast())])
}

/// Masked-layer mean of pooled discrepancies between tapped vars.
pub fn layerwise_discrepancy_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: &[Var],
    y: &[Var],
    layers: &[usize],
    cfg: &MMDConfig,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("empty layer mask"));
    }
    let mut acc: Option<Var> = None;
    for &l in layers {
        if l == 0 || l > x.len() || l > y.len() {
            return Err(Error::invalid(format!("layer {l} out of range")));
        }
        if g.shape(x[l - 1])[1] != g.shape(y[l - 1])[1] {
            return Err(Error::shape(format!("layer {l}: channel mismatch")));
        }
        let px = g.spatial_mean(x[l - 1])?;
        let py = g.spatial_mean(y[l - 1])?;
        let term = discrepancy_graph(g, px, py, cfg)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let sum = acc.expect("non-empty mask");
    Ok(g.scale(sum, T::from_f64(1.0 / layers.len() as f64)))
}

/// `-mean(scores)`.
pub fn adversarial_g_graph<T: Scalar>(g: &mut Graph<T>, fake_scores: Var) -> Var {
    let m = g.mean(fake_scores);
    g.scale(m, -T::ONE)
}

/// `mean(fake) - mean(real)`.
pub fn adversarial_d_graph<T: Scalar>(g: &mut Graph<T>, fake_scores: Var, real_scores: Var) -> Result<Var> {
    let mf = g.mean(fake_scores);
    let mr = g.mean(real_scores);
    g.sub(mf, mr)
}

/// Per-sample input gradients of a critic: `d sum(scores) / d x`.
pub fn critic_input_gradient<T: Scalar>(
    x: &Tensor<T>,
    critic: &dyn Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let scores = critic(&mut g, xv)?;
    let total = g.sum(scores);
    let mut grads = g.backward(total)?;
    Ok(grads
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// R1 penalty: batch mean of squared input-gradient norms of the critic on real images.
pub fn r1_penalty<T: Scalar>(
    real: &Tensor<T>,
    critic: &dyn Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<f64> {
    let grad = critic_input_gradient(real, critic)?;
    Ok(r1_from_input_gradient(&grad))
}

fn r1_from_input_gradient<T: Scalar>(grad: &Tensor<T>) -> f64 {
    let n = grad.dim(0);
    grad.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / n as f64
}

/// R1 value and a Hessian-vector estimate of its parameter gradient.
///
/// `d/dθ mean_s |∇x D(x_s)|^2 = (2/n) Σ_s J_s^T g_s`, evaluated as a central
/// difference of parameter gradients at `x ± ε g`. Returns
/// `(penalty, per-parameter gradient in bind order)`.
pub fn r1_penalty_with_param_grads<T: Scalar>(
    real: &Tensor<T>,
    bind_and_score: &dyn Fn(&mut Graph<T>, Var) -> Result<(Var, Vec<Var>)>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let n = real.dim(0);
    let grad = {
        let mut g = Graph::new();
        let xv = g.param(real.clone());
        let (scores, _) = bind_and_score(&mut g, xv)?;
        let total = g.sum(scores);
        let mut grads = g.backward(total)?;
        grads.take(xv).unwrap_or_else(|| Tensor::zeros(real.shape()))
    };
    let penalty = r1_from_input_gradient(&grad);
    let rms = (penalty / (grad.numel() as f64 / n as f64)).sqrt();
    let eps = if rms > 0.0 { 1e-2 / rms } else { 0.0 };

    let mut g = Graph::new();
    if eps == 0.0 {
        let xv = g.constant(real.clone());
        let (_, params) = bind_and_score(&mut g, xv)?;
        let zeros = params.iter().map(|&p| Tensor::zeros(g.shape(p))).collect();
        return Ok((penalty, zeros));
    }
    let e = T::from_f64(eps);
    let plus = Tensor::from_fn(real.shape(), |i| real.data()[i] + e * grad.data()[i]);
    let minus = Tensor::from_fn(real.shape(), |i| real.data()[i] - e * grad.data()[i]);
    let both = Tensor::concat_batch(&[&plus, &minus])?;
    let xv = g.constant(both);
    let (scores, params) = bind_and_score(&mut g, xv)?;
    // sign vector: +1 for the first n rows, -1 for the rest
    let signs = g.constant(Tensor::from_fn(&[2 * n], |i| if i < n { T::ONE } else { -T::ONE }));
    let signed = g.mul(scores, signs)?;
    let total = g.sum(signed);
    let scaled = g.scale(total, T::from_f64(1.0 / (n as f64 * eps)));
    let mut grads = g.backward(scaled)?;
    let out = params
        .iter()
        .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(g.shape(p))))
        .collect();
    Ok((penalty, out))
}
