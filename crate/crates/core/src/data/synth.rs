use std::f64::consts::PI;

use crate::data::{Manifest, SegDataset, SegSample};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Smallest image side that fits the generated structures.
pub const MIN_SIDE: usize = 12;

const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Noise level; 0 renders clean intensity bands.
    pub difficulty: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(classes: usize, count: usize, side: usize, seed: u64) -> Self {
        Self {
            classes,
            count,
            height: side,
            width: side,
            channels: 1,
            difficulty: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Generation(format!("classes must be in [2, 255], got {}", self.classes)));
        }
        if self.count == 0 || self.channels == 0 {
            return Err(Error::Generation("count and channels must be at least 1".into()));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Generation(format!(
                "{}×{} is too small to place {} structures; each side must be at least {MIN_SIDE}",
                self.height,
                self.width,
                self.classes - 1
            )));
        }
        if !(self.difficulty >= 0.0) {
            return Err(Error::Generation(format!("difficulty must be ≥ 0, got {}", self.difficulty)));
        }
        Ok(())
    }

    /// Intensity band `[lo, hi)` of class `c`; bands of distinct classes are disjoint.
    pub fn band(&self, class: usize) -> (f64, f64) {
        let width = 1.0 / self.classes as f64;
        let lo = class as f64 * width;
        (lo + 0.25 * width, lo + 0.75 * width)
    }

    pub fn noise_std(&self) -> f64 {
        0.06 * self.difficulty
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

fn random_shape(rng: &mut Rng, class: usize, h: f64, w: f64) -> Shape {
    let side = h.min(w);
    let r = side * rng.uniform_in(0.12, 0.22);
    let cy = rng.uniform_in(r + 1.0, h - r - 1.0);
    let cx = rng.uniform_in(r + 1.0, w - r - 1.0);
    if class % 2 == 1 {
        Shape::Ellipse {
            cy,
            cx,
            ry: r,
            rx: r * rng.uniform_in(0.6, 1.0),
            angle: rng.uniform_in(0.0, PI),
        }
    } else {
        let k = 3 + rng.index(4);
        let mut angles: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.0, 2.0 * PI)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let vertices = angles
            .iter()
            .map(|&a| {
                let rr = r * rng.uniform_in(0.75, 1.15);
                (cy + rr * a.sin(), cx + rr * a.cos())
            })
            .collect();
        Shape::Polygon { vertices }
    }
}

fn render_sample(cfg: &GenConfig, rng: &mut Rng) -> SegSample {
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u8; h * w];
    for class in 1..cfg.classes {
        // keep most of each structure visible: reject placements that
        // cover less than half new pixels
        let mut best: Option<(usize, Vec<usize>)> = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = random_shape(rng, class, h as f64, w as f64);
            let pixels: Vec<usize> = (0..h * w)
                .filter(|&p| shape.contains((p / w) as f64 + 0.5, (p % w) as f64 + 0.5))
                .collect();
            let fresh = pixels.iter().filter(|&&p| labels[p] == 0).count();
            if best.as_ref().is_none_or(|(f, _)| fresh > *f) {
                best = Some((fresh, pixels.clone()));
            }
            if !pixels.is_empty() && fresh * 10 >= pixels.len() * 9 {
                break;
            }
        }
        if let Some((_, pixels)) = best {
            for p in pixels {
                labels[p] = class as u8;
            }
        }
    }

    let levels: Vec<f64> = (0..cfg.classes)
        .map(|c| {
            let (lo, hi) = cfg.band(c);
            rng.uniform_in(lo, hi)
        })
        .collect();
    let std = cfg.noise_std();
    let mut data = Vec::with_capacity(cfg.channels * h * w);
    for _ in 0..cfg.channels {
        for &l in &labels {
            let v = levels[l as usize] + if std > 0.0 { std * rng.normal() } else { 0.0 };
            data.push(v.clamp(0.0, 1.0) as f32 as f64);
        }
    }
    SegSample {
        image: Tensor::new(&[cfg.channels, h, w], data).expect("shape"),
        labels,
    }
}

/// Renders `cfg.count` samples. Each sample uses its own stream forked from
/// the seed, so sample `i` does not depend on how many samples follow it.
pub fn generate(cfg: &GenConfig, split: &str) -> Result<SegDataset> {
    cfg.validate()?;
    let mut root = Rng::seeded(cfg.seed);
    let samples = (0..cfg.count)
        .map(|i| render_sample(cfg, &mut root.fork(i as u64)))
        .collect();
    Ok(SegDataset {
        manifest: Manifest {
            classes: cfg.classes,
            height: cfg.height,
            width: cfg.width,
            channels: cfg.channels,
            split: split.to_string(),
            seed: cfg.seed,
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = GenConfig::new(3, 4, 16, 9);
        assert_eq!(generate(&cfg, "train").unwrap(), generate(&cfg, "train").unwrap());
    }

    #[test]
    fn clean_images_use_disjoint_bands() {
        let cfg = GenConfig {
            difficulty: 0.0,
            ..GenConfig::new(4, 10, 24, 3)
        };
        let ds = generate(&cfg, "train").unwrap();
        for s in &ds.samples {
            for (&v, &l) in s.image.data().iter().zip(&s.labels) {
                let (lo, hi) = cfg.band(l as usize);
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn values_are_f32_exact_and_in_unit_range() {
        let ds = generate(&GenConfig::new(3, 3, 16, 1), "val").unwrap();
        for s in &ds.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v as f32 as f64 == v));
        }
    }

    #[test]
    fn tiny_images_are_rejected() {
        assert!(matches!(
            generate(&GenConfig::new(3, 1, 4, 1), "x"),
            Err(Error::Generation(_))
        ));
        assert!(generate(&GenConfig::new(1, 1, 32, 1), "x").is_err());
    }
}
