use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 32;
const MIN_FG: f64 = 0.01;
const MAX_FG: f64 = 0.60;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Quality {
    #[default]
    Good,
    /// Blurred, noisy depth that no longer separates the object.
    Degraded,
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(Self::Good),
            "degraded" => Ok(Self::Degraded),
            other => Err(Error::Config(format!("unknown quality `{other}` (expected good or degraded)"))),
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Good => "good",
            Self::Degraded => "degraded",
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Polygon { pts: [(f64, f64); 5], n: usize },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Self {
        let m = h.min(w);
        let cx = rng.random_range(0.2..0.8) * w;
        let cy = rng.random_range(0.2..0.8) * h;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        match rng.random_range(0..3) {
            0 => Shape::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.08..0.3) * m,
                ry: rng.random_range(0.08..0.3) * m,
                angle,
            },
            1 => Shape::Rect {
                cx,
                cy,
                hw: rng.random_range(0.06..0.25) * m,
                hh: rng.random_range(0.06..0.25) * m,
                angle,
            },
            _ => {
                let n = rng.random_range(3..=5);
                let mut pts = [(0.0, 0.0); 5];
                let base = rng.random_range(0.0..std::f64::consts::TAU);
                for (i, p) in pts.iter_mut().take(n).enumerate() {
                    let a = base + std::f64::consts::TAU * i as f64 / n as f64;
                    let r = rng.random_range(0.12..0.3) * m;
                    *p = (cx + r * a.cos(), cy + r * a.sin());
                }
                Shape::Polygon { pts, n }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (u, v) = rotate(x - cx, y - cy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Polygon { pts, n } => {
                let mut inside = false;
                let mut j = n - 1;
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn rotate(x: f64, y: f64, a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn distinct_color(rng: &mut ChaCha8Rng, from: [f64; 3]) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        let d: f64 = c.iter().zip(&from).map(|(a, b)| (a - b).abs()).sum();
        if d > 0.6 {
            return c;
        }
    }
}

fn box_blur(data: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut s = 0.0;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    s += data[yy * w + xx];
                }
            }
            out[y * w + x] = s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
        }
    }
    out
}

/// Renders 1–3 random shapes as the salient object over a textured
/// background. Deterministic per seed.
pub fn generate_sample(seed: u64, size: (usize, usize), quality: Quality) -> Result<Sample> {
    let (h, w) = size;
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::Config(format!("synthetic samples need at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);

    let (shapes, mask) = loop {
        let count = rng.random_range(1..=3);
        let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, hf, wf)).collect();
        let mask: Vec<Option<usize>> = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                shapes.iter().rposition(|s| s.contains(x, y))
            })
            .collect();
        let ratio = mask.iter().filter(|m| m.is_some()).count() as f64 / (h * w) as f64;
        if (MIN_FG..=MAX_FG).contains(&ratio) {
            break (shapes, mask);
        }
    };

    let bg = random_color(&mut rng);
    let colors: Vec<[f64; 3]> = shapes.iter().map(|_| distinct_color(&mut rng, bg)).collect();
    let freq = [rng.random_range(1.0..4.0), rng.random_range(1.0..4.0)];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.03).expect("valid std");

    let mut rgb = vec![0.0f32; 3 * h * w];
    for (i, m) in mask.iter().enumerate() {
        let (x, y) = ((i % w) as f64 / wf, (i / w) as f64 / hf);
        let texture = 0.1 * (std::f64::consts::TAU * (freq[0] * x + freq[1] * y) + phase).sin();
        let base = match m {
            Some(k) => colors[*k],
            None => bg.map(|c| c + texture),
        };
        for (ch, &c) in base.iter().enumerate() {
            rgb[ch * h * w + i] = (c + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    let far = rng.random_range(0.05..0.25);
    let tilt = rng.random_range(0.0..0.2);
    let near: Vec<f64> = shapes.iter().map(|_| rng.random_range(0.7..0.95)).collect();
    let mut depth: Vec<f64> = mask
        .iter()
        .enumerate()
        .map(|(i, m)| match m {
            Some(k) => near[*k],
            None => far + tilt * (i / w) as f64 / hf,
        })
        .collect();
    if quality == Quality::Degraded {
        depth = box_blur(&depth, h, w, (h.min(w) / 8).max(2));
        let heavy = Normal::new(0.0, 0.2).expect("valid std");
        let mean = depth.iter().sum::<f64>() / depth.len() as f64;
        let keep = rng.random_range(0.1..0.3);
        for d in depth.iter_mut() {
            *d = mean + keep * (*d - mean) + heavy.sample(&mut rng);
        }
    }

    Ok(Sample {
        name: format!("synth_{seed:06}"),
        rgb: Tensor::new([3, h, w], rgb)?,
        depth: Tensor::from_fn([1, h, w], |i| depth[i].clamp(0.0, 1.0) as f32),
        gt: Tensor::from_fn([h, w], |i| if mask[i].is_some() { 1.0 } else { 0.0 }),
    })
}

/// `n` good-quality samples with seeds `seed, seed+1, ...`.
pub fn synthetic_dataset(n: usize, seed: u64, size: usize) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| generate_sample(seed.wrapping_add(i), (size, size), Quality::Good))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depth_contrast(s: &Sample) -> f64 {
        let (mut fi, mut ni, mut fo, mut no) = (0.0, 0.0, 0.0, 0.0);
        for (&d, &g) in s.depth.data().iter().zip(s.gt.data()) {
            if g > 0.5 {
                fi += d as f64;
                ni += 1.0;
            } else {
                fo += d as f64;
                no += 1.0;
            }
        }
        fi / ni - fo / no
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_sample(7, (48, 40), Quality::Good).unwrap();
        let b = generate_sample(7, (48, 40), Quality::Good).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_sample(8, (48, 40), Quality::Good).unwrap());
        assert_eq!(a.rgb.shape(), [3, 48, 40]);
        assert_eq!(a.depth.shape(), [1, 48, 40]);
        assert_eq!(a.gt.shape(), [48, 40]);
    }

    #[test]
    fn too_small_is_refused() {
        assert!(matches!(generate_sample(0, (31, 64), Quality::Good), Err(Error::Config(_))));
    }

    #[test]
    fn good_samples_have_depth_contrast() {
        for seed in 0..50 {
            let s = generate_sample(seed, (32, 32), Quality::Good).unwrap();
            assert!(depth_contrast(&s) >= 0.2, "seed {seed}");
        }
    }

    #[test]
    fn degraded_depth_loses_contrast() {
        let weak = (0..20)
            .filter(|&seed| depth_contrast(&generate_sample(seed, (64, 64), Quality::Degraded).unwrap()) < 0.2)
            .count();
        assert!(weak >= 15, "{weak}");
    }

    #[test]
    fn values_in_unit_range() {
        for q in [Quality::Good, Quality::Degraded] {
            let s = generate_sample(3, (32, 32), q).unwrap();
            for t in [&s.rgb, &s.depth, &s.gt] {
                assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert!(s.gt.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn quality_parses() {
        assert_eq!("degraded".parse::<Quality>().unwrap(), Quality::Degraded);
        assert_eq!(Quality::Good.to_string(), "good");
        assert!("bad".parse::<Quality>().is_err());
    }
}
