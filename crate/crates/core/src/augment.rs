//! Differentiable augmentation applied identically to real and fake batches.
//!
//! All randomness for sample slot `k` comes from `(step_seed, k)`, so two
//! batches augmented with the same seed receive the same transform per slot.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

const STREAM_AUGMENT: u64 = 0xA06;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    Color,
    Translation,
    Cutout,
}

impl AugmentOp {
    fn name(self) -> &'static str {
        match self {
            AugmentOp::Color => "color",
            AugmentOp::Translation => "translation",
            AugmentOp::Cutout => "cutout",
        }
    }
}

/// Ordered list of ops; parsed from strings such as `"color,translation,cutout"`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugmentPolicy {
    pub ops: Vec<AugmentOp>,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }
}

impl FromStr for AugmentPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut ops = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let op = match part {
                "color" => AugmentOp::Color,
                "translation" => AugmentOp::Translation,
                "cutout" => AugmentOp::Cutout,
                other => return Err(Error::invalid(format!("unknown augmentation op '{other}'"))),
            };
            if ops.contains(&op) {
                return Err(Error::invalid(format!("augmentation op '{part}' listed twice")));
            }
            ops.push(op);
        }
        Ok(Self { ops })
    }
}

impl fmt::Display for AugmentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.ops.iter().map(|o| o.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl Serialize for AugmentPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AugmentPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Random parameters for one sample slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotDraw {
    /// Added to every pixel, in `[-0.5, 0.5)`.
    pub brightness: f64,
    /// Scale of the deviation from the per-pixel channel mean, in `[0, 2)`.
    pub saturation: f64,
    /// Scale of the deviation from the sample mean, in `[0.5, 1.5)`.
    pub contrast: f64,
    /// Column and row shift, each within `±resolution/8`.
    pub shift: (isize, isize),
    /// Top-left corner (column, row) of the zeroed square.
    pub cutout: (usize, usize),
}

impl SlotDraw {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            saturation: 1.0,
            contrast: 1.0,
            shift: (0, 0),
            cutout: (0, 0),
        }
    }
}

pub fn translation_limit(resolution: usize) -> isize {
    (resolution / 8) as isize
}

pub fn cutout_size(resolution: usize) -> usize {
    resolution / 2
}

/// Draws for `n` slots. Every field is drawn regardless of the policy, so the
/// draw for a slot never depends on which ops are enabled.
pub fn draw_slots(step_seed: u64, n: usize, resolution: usize) -> Vec<SlotDraw> {
    let lim = translation_limit(resolution);
    let span = resolution - cutout_size(resolution);
    (0..n)
        .map(|k| {
            let mut r = rng::stream(rng::mix(step_seed, k as u64), STREAM_AUGMENT);
            SlotDraw {
                brightness: r.random::<f64>() - 0.5,
                saturation: r.random::<f64>() * 2.0,
                contrast: r.random::<f64>() + 0.5,
                shift: (
                    r.random_range(-lim as i64..=lim as i64) as isize,
                    r.random_range(-lim as i64..=lim as i64) as isize,
                ),
                cutout: (r.random_range(0..=span), r.random_range(0..=span)),
            }
        })
        .collect()
}

fn per_sample_const<T: Scalar>(shape: &[usize], values: impl Fn(usize) -> f64) -> Tensor<T> {
    let per: usize = shape[1..].iter().product();
    Tensor::from_fn(shape, |i| T::from_f64(values(i / per)))
}

/// Apply `policy` with explicit per-slot draws.
pub fn apply_with_draws<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    policy: &AugmentPolicy,
    draws: &[SlotDraw],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || draws.len() != shape[0] {
        return Err(Error::shape(format!(
            "augment: {} draws for batch {:?}",
            draws.len(),
            shape
        )));
    }
    let res = shape[2];
    let mut h = x;
    for op in &policy.ops {
        h = match op {
            AugmentOp::Color => {
                let b = g.constant(per_sample_const(&shape, |s| draws[s].brightness));
                let h1 = g.add(h, b)?;
                let m = g.channel_mean_broadcast(h1)?;
                let dev = g.sub(h1, m)?;
                let f = g.constant(per_sample_const(&shape, |s| draws[s].saturation));
                let dev = g.mul(dev, f)?;
                let h2 = g.add(dev, m)?;
                let m = g.sample_mean_broadcast(h2)?;
                let dev = g.sub(h2, m)?;
                let f = g.constant(per_sample_const(&shape, |s| draws[s].contrast));
                let dev = g.mul(dev, f)?;
                let h3 = g.add(dev, m)?;
                g.clamp(h3, -T::ONE, T::ONE)
            }
            AugmentOp::Translation => g.translate(h, draws.iter().map(|d| d.shift).collect())?,
            AugmentOp::Cutout => {
                let size = cutout_size(res);
                let per = shape[1] * res * res;
                let mask = Tensor::from_fn(&shape, |i| {
                    let (s, rem) = (i / per, i % per);
                    let (row, col) = ((rem / res) % res, rem % res);
                    let (cx, cy) = draws[s].cutout;
                    let inside = col >= cx && col < cx + size && row >= cy && row < cy + size;
                    if inside {
                        T::ZERO
                    } else {
                        T::ONE
                    }
                });
                let m = g.constant(mask);
                g.mul(h, m)?
            }
        };
    }
    Ok(h)
}

/// Augment a batch on the tape with draws from `step_seed`.
pub fn diff_augment_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    policy: &AugmentPolicy,
    step_seed: u64,
) -> Result<Var> {
    if policy.is_identity() {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("augment expects [n,c,h,w], got {s:?}")));
    }
    let draws = draw_slots(step_seed, s[0], s[2]);
    apply_with_draws(g, x, policy, &draws)
}

/// Augment a batch outside any training graph.
pub fn diff_augment<T: Scalar>(x: &ImageBatch<T>, policy: &AugmentPolicy, step_seed: u64) -> Result<ImageBatch<T>> {
    if policy.is_identity() {
        return Ok(x.clone());
    }
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let y = diff_augment_graph(&mut g, xv, policy, step_seed)?;
    ImageBatch::new(g.value(y).clone())
}
