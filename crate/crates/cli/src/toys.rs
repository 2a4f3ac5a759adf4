//! Procedural toy domains: a data-rich source of filled ellipses and a
//! few-shot target of crosses and regular polygons, both anti-aliased by
//! supersampling and fully determined by the seed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use d3t_core::rng;
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::imaging::save_png;

const SUPERSAMPLE: u32 = 4;
const TAG_SOURCE: u64 = 0x5e11;
const TAG_TARGET: u64 = 0x7a29;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_source: usize,
    pub n_target: usize,
    pub resolution: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_source: 5000,
            n_target: 100,
            resolution: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyPaths {
    pub source: PathBuf,
    pub target: PathBuf,
}

enum Shape {
    Ellipse { a: f64, b: f64 },
    Cross { arm: f64, half_width: f64 },
    Polygon { sides: usize, radius: f64 },
}

struct Scene {
    shape: Shape,
    center: (f64, f64),
    angle: f64,
    fill: [f64; 3],
    background: [f64; 3],
}

impl Scene {
    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.shape {
            Shape::Ellipse { a, b } => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            Shape::Cross { arm, half_width } => {
                (u.abs() <= arm && v.abs() <= half_width) || (v.abs() <= arm && u.abs() <= half_width)
            }
            Shape::Polygon { sides, radius } => {
                // Inside every edge's half-plane; apothem at each edge normal.
                let apothem = radius * (PI / sides as f64).cos();
                (0..sides).all(|k| {
                    let t = (2.0 * k as f64 + 1.0) * PI / sides as f64;
                    u * t.cos() + v * t.sin() <= apothem
                })
            }
        }
    }

    fn render(&self, resolution: u32) -> RgbImage {
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        let step = 1.0 / (resolution * SUPERSAMPLE) as f64;
        RgbImage::from_fn(resolution, resolution, |px, py| {
            let mut hits = 0u32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = ((px * SUPERSAMPLE + sx) as f64 + 0.5) * step;
                    let y = ((py * SUPERSAMPLE + sy) as f64 + 0.5) * step;
                    hits += self.inside(x, y) as u32;
                }
            }
            let cover = hits as f64 / n;
            let mut out = [0u8; 3];
            for c in 0..3 {
                let v = cover * self.fill[c] + (1.0 - cover) * self.background[c];
                out[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(out)
        })
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn scene<R: Rng>(domain: Domain, r: &mut R) -> Scene {
    let center = (r.random_range(0.3..0.7), r.random_range(0.3..0.7));
    let angle = r.random_range(0.0..PI);
    let fill = hsv(r.random(), r.random_range(0.6..1.0), r.random_range(0.7..1.0));
    let g = r.random_range(0.05..0.25);
    let background = [g, g, g + r.random_range(0.0..0.05)];
    let shape = match domain {
        Domain::Source => Shape::Ellipse {
            a: r.random_range(0.15..0.35),
            b: r.random_range(0.1..0.3),
        },
        Domain::Target if r.random_bool(0.5) => Shape::Cross {
            arm: r.random_range(0.25..0.4),
            half_width: r.random_range(0.04..0.08),
        },
        Domain::Target => Shape::Polygon {
            sides: r.random_range(3..=6),
            radius: r.random_range(0.2..0.38),
        },
    };
    Scene {
        shape,
        center,
        angle,
        fill,
        background,
    }
}

/// Image `index` of a domain; independent of how many others are rendered.
pub fn render(domain: Domain, index: usize, seed: u64, resolution: usize) -> RgbImage {
    let tag = match domain {
        Domain::Source => TAG_SOURCE,
        Domain::Target => TAG_TARGET,
    };
    let mut r = rng::stream(rng::mix(rng::mix(seed, tag), index as u64), 0);
    scene(domain, &mut r).render(resolution as u32)
}

pub fn render_domain(domain: Domain, n: usize, seed: u64, resolution: usize) -> Vec<RgbImage> {
    (0..n).map(|i| render(domain, i, seed, resolution)).collect()
}

fn check(spec: &ToySpec) -> Result<(), CliError> {
    let mut keys = Vec::new();
    if spec.n_source == 0 {
        keys.push("n_source".to_string());
    }
    if spec.n_target == 0 {
        keys.push("n_target".to_string());
    }
    if spec.resolution < 4 {
        keys.push("resolution".to_string());
    }
    if keys.is_empty() {
        Ok(())
    } else {
        Err(CliError::config(format!("toy spec needs positive counts and resolution >= 4: {spec:?}"), keys))
    }
}

/// Writes `out/source/NNNNN.png` and `out/target/NNNNN.png`.
pub fn make_toy_domains(spec: &ToySpec, seed: u64, out: &Path) -> Result<ToyPaths, CliError> {
    check(spec)?;
    let paths = ToyPaths {
        source: out.join("source"),
        target: out.join("target"),
    };
    for (domain, n, dir) in [
        (Domain::Source, spec.n_source, &paths.source),
        (Domain::Target, spec.n_target, &paths.target),
    ] {
        std::fs::create_dir_all(dir)?;
        for i in 0..n {
            save_png(&render(domain, i, seed, spec.resolution), &dir.join(format!("{i:05}.png")))?;
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_seed_dependent() {
        let a = render(Domain::Target, 3, 7, 16);
        assert_eq!(a, render(Domain::Target, 3, 7, 16));
        assert_ne!(a, render(Domain::Target, 3, 8, 16));
        assert_ne!(a, render(Domain::Target, 4, 7, 16));
    }

    #[test]
    fn edges_are_anti_aliased() {
        let img = render(Domain::Source, 0, 1, 32);
        let mut levels: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        levels.sort_unstable();
        levels.dedup();
        assert!(levels.len() > 4, "only {} distinct levels", levels.len());
    }

    #[test]
    fn polygon_contains_its_center_and_not_far_corners() {
        let s = Scene {
            shape: Shape::Polygon { sides: 4, radius: 0.3 },
            center: (0.5, 0.5),
            angle: 0.0,
            fill: [1.0; 3],
            background: [0.0; 3],
        };
        assert!(s.inside(0.5, 0.5));
        assert!(!s.inside(0.05, 0.05));
    }

    #[test]
    fn zero_target_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            n_source: 2,
            n_target: 0,
            resolution: 8,
        };
        assert!(make_toy_domains(&spec, 0, dir.path()).is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
