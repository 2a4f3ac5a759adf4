//! Fréchet distance between Gaussian fits of extractor features.
//!
//! Scores computed with the built-in frozen extractor are comparable only
//! with each other, never with published Inception-based numbers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{sample_latents, GanSnapshot, ImageBatch, StyleInput};
use crate::error::{Error, Result};
use crate::extractor::PerceptualExtractor;
use crate::inversion::item_hash;
use crate::losses::{pool, Matrix};
use crate::rng;
use crate::tensor::Tensor;

/// Regularizer added to both covariances when either is near-singular.
pub const COV_EPS: f64 = 1e-6;
const EXTRACT_CHUNK: usize = 32;
const GENERATE_CHUNK: usize = 32;

/// Anything that turns an image batch into one feature row per image.
pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn feature_dim(&self) -> usize;
    fn features(&self, images: &Tensor<f32>) -> Result<Matrix>;
}

impl FeatureExtractor for PerceptualExtractor {
    fn id(&self) -> &str {
        PerceptualExtractor::id(self)
    }

    fn feature_dim(&self) -> usize {
        PerceptualExtractor::feature_dim(self)
    }

    fn features(&self, images: &Tensor<f32>) -> Result<Matrix> {
        self.pooled(images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `[d, d]`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(Error::invalid(format!("covariance has {} entries for d = {d}", self.cov.len())));
        }
        if self.count < 2 {
            return Err(Error::invalid("stats need at least 2 samples"));
        }
        if !self.mean.iter().chain(&self.cov).all(|v| v.is_finite()) {
            return Err(Error::non_finite("gaussian stats", Vec::new()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FIDReport {
    pub score: f64,
    pub extractor_id: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub snapshot_step: u64,
}

/// Features of every image in `images`, in order.
pub fn extract_features(images: &[ImageBatch], extractor: &dyn FeatureExtractor) -> Result<Matrix> {
    let total: usize = images.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(Error::invalid("no images to extract features from"));
    }
    let res = images[0].resolution();
    if images.iter().any(|b| b.resolution() != res) {
        return Err(Error::invalid("images have inconsistent resolutions"));
    }
    let d = extractor.feature_dim();
    let mut rows = Vec::with_capacity(total * d);
    let mut pending: Vec<&Tensor<f32>> = Vec::new();
    let mut pending_n = 0;
    let flush = |pending: &mut Vec<&Tensor<f32>>, rows: &mut Vec<f64>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let batch = Tensor::concat_batch(pending)?;
        let f = extractor.features(&batch)?;
        if f.shape() != [batch.dim(0), d] {
            return Err(Error::shape(format!("extractor returned {:?}", f.shape())));
        }
        rows.extend_from_slice(f.data());
        pending.clear();
        Ok(())
    };
    for b in images {
        pending.push(b.tensor());
        pending_n += b.len();
        if pending_n >= EXTRACT_CHUNK {
            flush(&mut pending, &mut rows)?;
            pending_n = 0;
        }
    }
    flush(&mut pending, &mut rows)?;
    Tensor::new(vec![total, d], rows)
}

/// Sample mean and unbiased covariance, symmetrized.
pub fn gaussian_stats(features: &Matrix) -> Result<GaussianStats> {
    if features.shape().len() != 2 {
        return Err(Error::invalid("features must be a matrix"));
    }
    let (n, d) = (features.dim(0), features.dim(1));
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 feature rows, got {n}")));
    }
    if !features.all_finite() {
        return Err(Error::non_finite("features", Vec::new()));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats {
        mean: mean.iter().copied().collect(),
        cov: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect(),
        count: n,
    })
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clamped.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Fréchet distance between two Gaussians.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::invalid(format!("stats dimensions differ: {d} vs {}", b.dim())));
    }
    let mut sa = a.cov_matrix();
    let mut sb = b.cov_matrix();
    let scale = 1.0f64.max(sa.trace().abs() / d as f64).max(sb.trace().abs() / d as f64);
    if min_eigenvalue(&sa).min(min_eigenvalue(&sb)) < COV_EPS * scale {
        let eps = DMatrix::identity(d, d) * COV_EPS;
        sa += &eps;
        sb += &eps;
    }
    let ra = sqrtm_psd(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let lowest = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lowest < -1e-3 {
        log::warn!("fid: discarding negative eigenvalue {lowest:.3e} of the covariance product");
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let score = dmu + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if !score.is_finite() {
        return Err(Error::non_finite("fid", Vec::new()));
    }
    Ok(score)
}

/// SHA-256 over every item hash, in order.
pub fn dataset_hash(images: &[ImageBatch]) -> String {
    let mut h = Sha256::new();
    for b in images {
        for i in 0..b.len() {
            h.update(item_hash(&b.item(i)).as_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Real-side statistics keyed by (dataset hash, extractor id), in memory and
/// optionally on disk.
#[derive(Debug, Default)]
pub struct RealStatsCache {
    root: Option<PathBuf>,
    memory: HashMap<(String, String), GaussianStats>,
}

impl RealStatsCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            memory: HashMap::new(),
        }
    }

    fn file(&self, data: &str, ex: &str) -> Option<PathBuf> {
        let mut h = Sha256::new();
        h.update(data.as_bytes());
        h.update(b"/");
        h.update(ex.as_bytes());
        self.root
            .as_ref()
            .map(|r| r.join("fid-stats").join(format!("{}.json", &hex::encode(h.finalize())[..32])))
    }

    pub fn get_or_compute(&mut self, dataset: &[ImageBatch], extractor: &dyn FeatureExtractor) -> Result<GaussianStats> {
        let key = (dataset_hash(dataset), extractor.id().to_string());
        if let Some(s) = self.memory.get(&key) {
            return Ok(s.clone());
        }
        let path = self.file(&key.0, &key.1);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            match fs::read(p).map_err(Error::from).and_then(|b| Ok(serde_json::from_slice::<GaussianStats>(&b)?)) {
                Ok(s) if s.validate().is_ok() && s.dim() == extractor.feature_dim() => {
                    self.memory.insert(key, s.clone());
                    return Ok(s);
                }
                _ => log::warn!("real-stats cache {} unusable; recomputing", p.display()),
            }
        }
        let s = gaussian_stats(&extract_features(dataset, extractor)?)?;
        if let Some(p) = path {
            fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
            let tmp = p.with_extension(format!("{}.tmp", std::process::id()));
            fs::write(&tmp, serde_json::to_vec(&s)?)?;
            fs::rename(&tmp, &p)?;
        }
        self.memory.insert(key, s.clone());
        Ok(s)
    }
}

/// `n` samples from fresh latents of `seed`; generated in chunks, identical to
/// one large batch.
pub fn generate_samples(snapshot: &GanSnapshot, n: usize, seed: u64) -> Result<Vec<ImageBatch>> {
    let z = sample_latents::<f32>(n, snapshot.config.style_dim, rng::mix(seed, 0));
    let noise_seed = rng::mix(seed, 1);
    let mut out = Vec::new();
    for start in (0..n).step_by(GENERATE_CHUNK) {
        let end = (start + GENERATE_CHUNK).min(n);
        let w = snapshot.map_noise_batch(&z.slice_batch(start, end))?;
        out.push(snapshot.synthesize(&StyleInput::Broadcast(w), noise_seed)?.0);
    }
    Ok(out)
}

pub fn evaluate_fid(
    snapshot: &GanSnapshot,
    dataset: &[ImageBatch],
    n_fake: usize,
    extractor: &dyn FeatureExtractor,
    seed: u64,
    cache: &mut RealStatsCache,
) -> Result<FIDReport> {
    if n_fake < 2 {
        return Err(Error::invalid(format!("n_fake must be >= 2, got {n_fake}")));
    }
    let real = cache.get_or_compute(dataset, extractor)?;
    let fake = generate_samples(snapshot, n_fake, seed)?;
    let fake = gaussian_stats(&extract_features(&fake, extractor)?)?;
    Ok(FIDReport {
        score: fid(&real, &fake)?,
        extractor_id: extractor.id().to_string(),
        n_real: real.count,
        n_fake,
        snapshot_step: snapshot.step,
    })
}

/// FID between two image sets.
pub fn fid_between(a: &[ImageBatch], b: &[ImageBatch], extractor: &dyn FeatureExtractor) -> Result<f64> {
    let sa = gaussian_stats(&extract_features(a, extractor)?)?;
    let sb = gaussian_stats(&extract_features(b, extractor)?)?;
    fid(&sa, &sb)
}

/// Pooled critic features at a 1-based layer, optionally written as a
/// comma-separated matrix preceded by one `#` metadata line.
pub fn dump_discriminator_features(
    snapshot: &GanSnapshot,
    images: &ImageBatch,
    layer: usize,
    out: Option<&Path>,
) -> Result<Matrix> {
    let count = snapshot.config.layer_count_d();
    if layer == 0 || layer > count {
        return Err(Error::invalid(format!("layer {layer} outside [1, {count}]")));
    }
    let (_, pyr) = snapshot.discriminate(images)?;
    let m = pool(&pyr, layer)?;
    if let Some(path) = out {
        let (n, c) = (m.dim(0), m.dim(1));
        let mut s = format!(
            "# layer={layer} rows={n} cols={c} step={} role={:?} checkpoint={}\n",
            snapshot.step,
            snapshot.role,
            snapshot.content_hash()
        );
        for row in m.data().chunks(c) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(s, "{}", line.join(",")).expect("string write");
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, s)?;
    }
    Ok(m)
}
