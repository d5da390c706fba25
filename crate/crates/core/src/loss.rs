//! Mixed BCE + SSIM + IoU supervision of the final map and the side outputs.

use std::rc::Rc;

use crate::autograd::{ResampleMap, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BCE_CLAMP: f64 = 1e-7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const IOU_SMOOTH: f64 = 1.0;
/// Weights of the side outputs `S_1..S_4`, finest first.
pub const SIDE_WEIGHTS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];

fn check_pair<T: Real>(op: &'static str, s: &Var<'_, T>, g: &Tensor<T>) -> Result<()> {
    if s.shape() != g.shape() || s.shape().len() != 2 {
        return Err(shape_err(
            op,
            format!("prediction {:?} against target {:?}", s.shape(), g.shape()),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy with the prediction clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<'t, T: Real>(s: Var<'t, T>, g: &Tensor<T>) -> Result<Var<'t, T>> {
    check_pair("bce_loss", &s, g)?;
    let tape = s.tape();
    let s = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let pos = tape.constant(g.clone()).mul(s.ln())?;
    let neg = tape
        .constant(g.map(|v| T::one() - v))
        .mul(s.rsub_scalar(1.0).ln())?;
    Ok(pos.add(neg)?.mean().scale(-1.0))
}

/// Side of the Gaussian SSIM window for an `h×w` map.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w);
    let odd = if m % 2 == 1 { m } else { m.saturating_sub(1) };
    odd.min(11)
}

fn gaussian_kernel<T: Real>(size: usize) -> Tensor<T> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Tensor::from_fn([1, 1, size, size], |i| T::of(g[i / size] * g[i % size] / (total * total)))
}

/// Local SSIM map `[H,W]` of two maps, Gaussian-weighted with reflection
/// padding.
pub fn ssim_map<'t, T: Real>(s: Var<'t, T>, g: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = s.shape();
    if shape.len() != 2 || g.shape() != shape {
        return Err(shape_err("ssim", format!("{shape:?} against {:?}", g.shape())));
    }
    let (h, w) = (shape[0], shape[1]);
    if h < 3 || w < 3 {
        return Err(Error::Domain(format!("SSIM needs a map of at least 3x3, got {h}x{w}")));
    }
    let tape = s.tape();
    let size = ssim_window(h, w);
    let kernel = tape.constant(gaussian_kernel(size));
    let pad = Rc::new(ResampleMap::reflect_pad(1, h, w, size / 2)?);
    let blur = |x: Var<'t, T>| -> Result<Var<'t, T>> {
        x.reshape(&[1, h, w])?
            .resample(&pad)?
            .conv2d(kernel, None, 1, 0)?
            .reshape(&[h, w])
    };
    let mu_x = blur(s)?;
    let mu_y = blur(g)?;
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(mu_y)?;
    let sxx = blur(s.square())?.sub(mu_xx)?;
    let syy = blur(g.square())?.sub(mu_yy)?;
    let sxy = blur(s.mul(g)?)?.sub(mu_xy)?;
    let num = mu_xy.scale(2.0).add_scalar(SSIM_C1).mul(sxy.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_xx
        .add(mu_yy)?
        .add_scalar(SSIM_C1)
        .mul(sxx.add(syy)?.add_scalar(SSIM_C2))?;
    num.div(den)
}

/// `1 − mean(SSIM)`.
pub fn ssim_loss<'t, T: Real>(s: Var<'t, T>, g: &Tensor<T>) -> Result<Var<'t, T>> {
    check_pair("ssim_loss", &s, g)?;
    let g = s.tape().constant(g.clone());
    Ok(ssim_map(s, g)?.mean().rsub_scalar(1.0))
}

/// Soft IoU loss `1 − (ΣSG + 1) / (ΣS + ΣG − ΣSG + 1)`.
pub fn iou_loss<'t, T: Real>(s: Var<'t, T>, g: &Tensor<T>) -> Result<Var<'t, T>> {
    check_pair("iou_loss", &s, g)?;
    let gv = s.tape().constant(g.clone());
    let inter = s.mul(gv)?.sum();
    let union = s.sum().add_scalar(g.sum().as_f64()).sub(inter)?;
    Ok(inter
        .add_scalar(IOU_SMOOTH)
        .div(union.add_scalar(IOU_SMOOTH))?
        .rsub_scalar(1.0))
}

/// The three terms of one base loss. SSIM is `None` for maps smaller than
/// `3×3`.
pub struct BaseTerms<'t, T: Real> {
    pub bce: Var<'t, T>,
    pub ssim: Option<Var<'t, T>>,
    pub iou: Var<'t, T>,
}

impl<'t, T: Real> BaseTerms<'t, T> {
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let mut s = self.bce.add(self.iou)?;
        if let Some(ssim) = self.ssim {
            s = s.add(ssim)?;
        }
        Ok(s)
    }
}

pub fn base_terms<'t, T: Real>(s: Var<'t, T>, g: &Tensor<T>) -> Result<BaseTerms<'t, T>> {
    check_pair("base_loss", &s, g)?;
    let shape = s.shape();
    let ssim = if shape[0] >= 3 && shape[1] >= 3 {
        Some(ssim_loss(s, g)?)
    } else {
        None
    };
    Ok(BaseTerms {
        bce: bce_loss(s, g)?,
        ssim,
        iou: iou_loss(s, g)?,
    })
}

/// Bilinear resize of `g` to `h×w`, clamped to `[0,1]`.
pub fn downsample_target<T: Real>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = g.shape();
    if s.len() != 2 {
        return Err(shape_err("downsample_target", format!("{s:?} is not [H,W]")));
    }
    if s == [h, w] {
        return Ok(g.clone());
    }
    let map = ResampleMap::bilinear(1, s[0], s[1], h, w);
    let flat = g.clone().reshape([1, s[0], s[1]])?;
    map.apply(&flat)?
        .map(|v| v.max(T::zero()).min(T::one()))
        .reshape([h, w])
}

/// Scalar values of every loss component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub bce_out: f64,
    pub ssim_out: f64,
    pub iou_out: f64,
    /// `1/2^i · ℓ_base(S_i, G_i)` for `i = 1..4`, finest first.
    pub side: [f64; 4],
}

impl LossReport {
    /// Sum of the components, which equals `total` up to rounding.
    pub fn recompose(&self) -> f64 {
        self.bce_out + self.ssim_out + self.iou_out + self.side.iter().sum::<f64>()
    }

    /// Named components in CSV column order.
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("total", self.total),
            ("bce_out", self.bce_out),
            ("ssim_out", self.ssim_out),
            ("iou_out", self.iou_out),
            ("side1", self.side[0]),
            ("side2", self.side[1]),
            ("side3", self.side[2]),
            ("side4", self.side[3]),
        ]
    }
}

/// Total loss over the four side outputs (finest first) and the final map.
pub fn total_loss<'t, T: Real>(
    sides: &[Var<'t, T>],
    out: Var<'t, T>,
    g: &Tensor<T>,
) -> Result<(Var<'t, T>, LossReport)> {
    if sides.len() != 4 {
        return Err(shape_err("total_loss", format!("expected 4 side outputs, got {}", sides.len())));
    }
    let main = base_terms(out, g)?;
    let mut total = main.sum()?;
    let mut side = [0.0; 4];
    for (i, (&s, &weight)) in sides.iter().zip(&SIDE_WEIGHTS).enumerate() {
        let hw = s.shape();
        if hw.len() != 2 {
            return Err(shape_err("total_loss", format!("side output {} has shape {hw:?}", i + 1)));
        }
        let gi = downsample_target(g, hw[0], hw[1])?;
        let term = base_terms(s, &gi)?.sum()?.scale(weight);
        side[i] = term.item().as_f64();
        total = total.add(term)?;
    }
    let report = LossReport {
        total: total.item().as_f64(),
        bce_out: main.bce.item().as_f64(),
        ssim_out: main.ssim.map_or(0.0, |v| v.item().as_f64()),
        iou_out: main.iou.item().as_f64(),
        side,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary(shape: [usize; 2], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::<f64>::new();
        let half = Tensor::full([4, 4], 0.5);
        let l = bce_loss(tape.constant(half.clone()), &half).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_loss(tape.constant(half.clone()), &binary([4, 4], 2)).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let g = binary([4, 4], 1);
        let l = bce_loss(tape.constant(g.clone()), &g).unwrap().item();
        assert!(l <= -(1.0 - 1e-7f64).ln() + 1e-15);
        assert!(bce_loss(tape.constant(g), &Tensor::full([8, 8], 0.5)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let tape = Tape::<f64>::new();
        let g = binary([16, 16], 3);
        assert!(ssim_loss(tape.constant(g.clone()), &g).unwrap().item().abs() < 1e-6);
        let inv = g.map(|v| 1.0 - v);
        let l = ssim_loss(tape.constant(inv), &g).unwrap().item();
        assert!((1.0..=2.0).contains(&l), "{l}");
        let small = Tensor::zeros([2, 5]);
        assert!(matches!(ssim_loss(tape.constant(small.clone()), &small), Err(Error::Domain(_))));
    }

    #[test]
    fn ssim_window_rule() {
        assert_eq!(ssim_window(64, 64), 11);
        assert_eq!(ssim_window(8, 8), 7);
        assert_eq!(ssim_window(7, 9), 7);
        assert_eq!(ssim_window(4, 4), 3);
        assert_eq!(ssim_window(3, 3), 3);
    }

    #[test]
    fn iou_examples() {
        let tape = Tape::<f64>::new();
        let g = binary([8, 8], 4);
        assert!(iou_loss(tape.constant(g.clone()), &g).unwrap().item().abs() < 1e-12);
        let l = iou_loss(tape.constant(Tensor::zeros([8, 8])), &Tensor::ones([8, 8])).unwrap().item();
        assert!((l - (1.0 - 1.0 / 65.0)).abs() < 1e-12);
        let z = Tensor::zeros([8, 8]);
        assert_eq!(iou_loss(tape.constant(z.clone()), &z).unwrap().item(), 0.0);
    }

    #[test]
    fn perfect_prediction_total_is_negligible() {
        let tape = Tape::<f64>::new();
        let g = Tensor::ones([32, 32]);
        let sides: Vec<_> = [8, 4, 2, 1]
            .iter()
            .map(|&n| tape.constant(downsample_target(&g, n, n).unwrap()))
            .collect();
        let (_, r) = total_loss(&sides, tape.constant(g.clone()), &g).unwrap();
        assert!(r.total < 1e-4, "{r:?}");
        assert!((r.recompose() - r.total).abs() < 1e-12);
    }

    #[test]
    fn downsample_is_clamped_bilinear() {
        let g = Tensor::from_fn([4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        let d = downsample_target(&g, 2, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 1.0, 0.0]);
        let d = downsample_target(&g, 4, 4).unwrap();
        assert_eq!(d.data(), g.data());
    }
}
