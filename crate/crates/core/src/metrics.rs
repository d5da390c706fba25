//! Saliency evaluation: MAE, maximum F-measure and S-measure.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLDS: usize = 256;
pub const S_ALPHA: f64 = 0.5;
const EPS: f64 = f64::EPSILON;

fn pair<'a, T: Real>(op: &'static str, s: &'a Tensor<T>, g: &'a Tensor<T>) -> Result<(usize, usize)> {
    if s.shape() != g.shape() || s.rank() != 2 {
        return Err(shape_err(op, format!("prediction {:?} against target {:?}", s.shape(), g.shape())));
    }
    Ok((s.shape()[0], s.shape()[1]))
}

fn binary_mask<T: Real>(g: &Tensor<T>) -> Result<Vec<bool>> {
    g.data()
        .iter()
        .map(|&v| {
            let v = v.as_f64();
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::Domain(format!("ground truth must be binary, found {v}")))
            }
        })
        .collect()
}

/// Mean absolute error.
pub fn mae<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Result<f64> {
    pair("mae", s, g)?;
    let total: f64 = s
        .data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(total / s.numel() as f64)
}

/// Maximum F-measure over the thresholds `k/255`, `k = 0..=255`, with a
/// pixel predicted salient when `S > t`.
pub fn f_measure_max<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Result<f64> {
    pair("f_measure_max", s, g)?;
    let mask = binary_mask(g)?;
    let positives = mask.iter().filter(|&&m| m).count() as f64;
    // Histograms by the largest k with S > k/255, so a pixel counts for
    // every threshold index up to that bin.
    let mut tp_hist = [0u64; THRESHOLDS];
    let mut all_hist = [0u64; THRESHOLDS];
    for (&v, &m) in s.data().iter().zip(&mask) {
        let v = v.as_f64();
        let Some(bin) = (0..THRESHOLDS).rev().find(|&k| v > k as f64 / 255.0) else {
            continue;
        };
        all_hist[bin] += 1;
        if m {
            tp_hist[bin] += 1;
        }
    }
    let (mut tp, mut predicted) = (0u64, 0u64);
    let mut best = 0.0f64;
    for k in (0..THRESHOLDS).rev() {
        tp += tp_hist[k];
        predicted += all_hist[k];
        best = best.max(f_beta(tp as f64, predicted as f64, positives));
    }
    Ok(best)
}

fn f_beta(tp: f64, predicted: f64, positives: f64) -> f64 {
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / predicted;
    let r = tp / positives;
    (1.0 + BETA_SQ) * p * r / (BETA_SQ * p + r)
}

/// Structure measure `α·S_o + (1−α)·S_r`, clamped at zero.
pub fn s_measure<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Result<f64> {
    let (h, w) = pair("s_measure", s, g)?;
    let mask = binary_mask(g)?;
    let sv: Vec<f64> = s.data().iter().map(|v| v.as_f64()).collect();
    let fg = mask.iter().filter(|&&m| m).count();
    let mean_s = sv.iter().sum::<f64>() / sv.len() as f64;
    if fg == 0 {
        return Ok(1.0 - mean_s);
    }
    if fg == mask.len() {
        return Ok(mean_s);
    }
    let q = S_ALPHA * object_score(&sv, &mask) + (1.0 - S_ALPHA) * region_score(&sv, &mask, h, w);
    Ok(q.max(0.0))
}

fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let std = if n > 1.0 {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn object_score(s: &[f64], mask: &[bool]) -> f64 {
    let u = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    let fg = s.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v);
    let bg = s.iter().zip(mask).filter(|(_, &m)| !m).map(|(&v, _)| 1.0 - v);
    u * object_similarity(fg) + (1.0 - u) * object_similarity(bg)
}

/// Column and row of the foreground centroid, 1-based and rounded.
fn centroid(mask: &[bool], w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % w + 1) as f64;
        sy += (i / w + 1) as f64;
        n += 1.0;
    }
    ((sx / n).round() as usize, (sy / n).round() as usize)
}

fn region_score(s: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let (x, y) = centroid(mask, w);
    let area = (h * w) as f64;
    let quads = [(0..y, 0..x), (0..y, x..w), (y..h, 0..x), (y..h, x..w)];
    let mut total = 0.0;
    for (rows, cols) in quads {
        let n = rows.len() * cols.len();
        if n == 0 {
            continue;
        }
        let mut ps = Vec::with_capacity(n);
        let mut gs = Vec::with_capacity(n);
        for r in rows {
            for c in cols.clone() {
                ps.push(s[r * w + c]);
                gs.push(if mask[r * w + c] { 1.0 } else { 0.0 });
            }
        }
        total += n as f64 / area * region_ssim(&ps, &gs);
    }
    total
}

fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let denom = n - 1.0 + EPS;
    let sxx = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / denom;
    let syy = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / denom;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub mae: f64,
    pub f_max: f64,
    pub s_measure: f64,
}

impl ImageScores {
    pub fn compute<T: Real>(name: impl Into<String>, s: &Tensor<T>, g: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            mae: mae(s, g)?,
            f_max: f_measure_max(s, g)?,
            s_measure: s_measure(s, g)?,
        })
    }
}

/// Per-image scores and their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ImageScores>,
    pub mae: f64,
    pub f_max: f64,
    pub s_measure: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ImageScores>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&ImageScores) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            mae: mean(|r| r.mae),
            f_max: mean(|r| r.f_max),
            s_measure: mean(|r| r.s_measure),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mae,f_max,s_measure\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.name, r.mae, r.f_max, r.s_measure);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "images={} mae={:.6} f_max={:.6} s_measure={:.6}",
            self.rows.len(),
            self.mae,
            self.f_max,
            self.s_measure
        )
    }
}
