//! Overlap and boundary-distance metrics for label maps.
//!
//! Conventions: Dice is 1 when both masks are empty. The Hausdorff
//! distance is undefined (`None`) when either mask is empty and such
//! entries are left out of means.

use crate::error::{Error, Result};

pub const DEFAULT_PERCENTILE: f64 = 95.0;

fn same_len(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metric", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)` for the class-`c` masks.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    same_len(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Pixels of class `c` with at least one 4-neighbour outside the class.
/// Pixels on the image border count their outside neighbours as outside.
pub fn boundary(labels: &[u8], height: usize, width: usize, class: u8) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width && labels[y as usize * width + x as usize] == class
    };
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if labels[y * width + x] != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) && at(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Linear-interpolated percentile of unsorted values, `p ∈ [0, 100]`.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Symmetric percentile Hausdorff distance between the class-`c` boundaries.
pub fn hausdorff(pred: &[u8], gt: &[u8], height: usize, width: usize, class: u8, pct: f64) -> Result<Option<f64>> {
    same_len(pred, gt)?;
    if pred.len() != height * width {
        return Err(Error::shape("hausdorff", format!("{} pixels for {height}×{width}", pred.len())));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::invalid(format!("percentile must be in [0, 100], got {pct}")));
    }
    let a = boundary(pred, height, width, class);
    let b = boundary(gt, height, width, class);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let ab = percentile(&mut directed(&a, &b), pct);
    let ba = percentile(&mut directed(&b, &a), pct);
    Ok(Some(ab.max(ba)))
}

/// Per-class results for one sample; index 0 is class 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dsc: Vec<f64>,
    pub hd: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn compute(pred: &[u8], gt: &[u8], height: usize, width: usize, classes: usize, pct: f64) -> Result<Self> {
        let mut dsc = Vec::with_capacity(classes.saturating_sub(1));
        let mut hd = Vec::with_capacity(classes.saturating_sub(1));
        for c in 1..classes {
            dsc.push(dice(pred, gt, c as u8)?);
            hd.push(hausdorff(pred, gt, height, width, c as u8, pct)?);
        }
        Ok(Self { dsc, hd })
    }

    pub fn mean_dsc(&self) -> f64 {
        self.dsc.iter().sum::<f64>() / self.dsc.len().max(1) as f64
    }

    pub fn mean_hd(&self) -> Option<f64> {
        mean_defined(self.hd.iter().copied())
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregate over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub per_sample: Vec<MetricReport>,
    /// Mean DSC per foreground class.
    pub class_dsc: Vec<f64>,
    /// Mean defined HD per foreground class.
    pub class_hd: Vec<Option<f64>>,
    pub mean_dsc: f64,
    pub mean_hd: Option<f64>,
    /// How many (sample, class) HD entries were undefined.
    pub hd_undefined: usize,
}

impl Summary {
    pub fn new(per_sample: Vec<MetricReport>, classes: usize) -> Self {
        let fg = classes.saturating_sub(1);
        let n = per_sample.len().max(1) as f64;
        let class_dsc: Vec<f64> = (0..fg).map(|c| per_sample.iter().map(|r| r.dsc[c]).sum::<f64>() / n).collect();
        let class_hd: Vec<Option<f64>> = (0..fg).map(|c| mean_defined(per_sample.iter().map(|r| r.hd[c]))).collect();
        let mean_dsc = class_dsc.iter().sum::<f64>() / fg.max(1) as f64;
        let mean_hd = mean_defined(per_sample.iter().flat_map(|r| r.hd.iter().copied()));
        let hd_undefined = per_sample.iter().flat_map(|r| &r.hd).filter(|h| h.is_none()).count();
        Self {
            per_sample,
            class_dsc,
            class_hd,
            mean_dsc,
            mean_hd,
            hd_undefined,
        }
    }
}
