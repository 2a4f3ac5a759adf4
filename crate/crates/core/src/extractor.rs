//! Fixed convolutional feature extractor used by the perceptual loss and by FID.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{pool_tensor, Matrix};
use crate::params::{he_normal, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

const STREAM_EXTRACTOR: u64 = 0xE7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorSource {
    PretrainedClassifier,
    FrozenRandom,
}

/// Conv stack with one tap per depth. Weights are never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    params: ParamSet<f32>,
    widths: Vec<usize>,
    source: ExtractorSource,
    id: String,
}

impl PerceptualExtractor {
    pub const DEFAULT_WIDTHS: [usize; 4] = [32, 64, 64, 96];
    pub const DEFAULT_SEED: u64 = 20_211;

    /// Randomly initialized and frozen; pooled feature width is `sum(widths)`.
    pub fn frozen_random(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid("extractor widths must be non-empty and positive"));
        }
        let mut r = rng::stream(seed, STREAM_EXTRACTOR);
        let mut params = ParamSet::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            params.insert(format!("{i}.weight"), he_normal(&[w, cin, 3, 3], cin * 9, &mut r));
            params.insert(format!("{i}.bias"), Tensor::zeros(&[w]));
            cin = w;
        }
        let id = format!(
            "frozen-random/seed={seed}/widths={}",
            widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
        );
        Ok(Self {
            params,
            widths: widths.to_vec(),
            source: ExtractorSource::FrozenRandom,
            id,
        })
    }

    pub fn standard() -> Self {
        Self::frozen_random(&Self::DEFAULT_WIDTHS, Self::DEFAULT_SEED).expect("default widths are valid")
    }

    /// Wrap externally trained weights laid out as `{i}.weight` / `{i}.bias`.
    pub fn pretrained(params: ParamSet<f32>, id: impl Into<String>) -> Result<Self> {
        let mut widths = Vec::new();
        let mut cin = 3;
        while let Ok(w) = params.get(&format!("{}.weight", widths.len())) {
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || s[2] != 3 || s[3] != 3 {
                return Err(Error::invalid(format!("extractor layer {} has shape {s:?}", widths.len())));
            }
            params.get(&format!("{}.bias", widths.len()))?;
            cin = s[0];
            widths.push(s[0]);
        }
        if widths.is_empty() {
            return Err(Error::invalid("no extractor layers found"));
        }
        Ok(Self {
            params,
            widths,
            source: ExtractorSource::PretrainedClassifier,
            id: id.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> ExtractorSource {
        self.source
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Taps on the tape; weights enter as constants.
    pub fn features_graph<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid(format!("extractor expects [n,3,h,w], got {s:?}")));
        }
        let mut h = x;
        let mut taps = Vec::with_capacity(self.widths.len());
        for i in 0..self.widths.len() {
            if i > 0 && g.shape(h)[2] > 1 {
                h = g.avg_pool2x(h)?;
            }
            let w = g.constant(self.params.get(&format!("{i}.weight"))?.cast());
            let b = g.constant(self.params.get(&format!("{i}.bias"))?.cast());
            h = g.conv2d(h, w)?;
            h = g.add_channel_bias(h, b)?;
            h = g.leaky_relu(h, T::from_f64(0.2));
            taps.push(h);
        }
        Ok(taps)
    }

    /// Concatenated globally pooled taps, one row per image.
    pub fn pooled<T: Scalar>(&self, images: &Tensor<T>) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let taps = self.features_graph(&mut g, x)?;
        let n = images.dim(0);
        let d = self.feature_dim();
        let pooled: Vec<Matrix> = taps.iter().map(|&t| pool_tensor(g.value(t))).collect();
        Ok(Tensor::from_fn(&[n, d], |i| {
            let (row, mut col) = (i / d, i % d);
            for p in &pooled {
                let c = p.dim(1);
                if col < c {
                    return p.data()[row * c + col];
                }
                col -= c;
            }
            unreachable!("column within feature_dim")
        }))
    }
}
