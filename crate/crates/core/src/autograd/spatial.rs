use std::rc::Rc;

use super::{GradSink, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Fixed linear map from an input tensor to an output tensor where every
/// output element is a weighted sum of `taps` input elements.
///
/// With one tap and no weights this is a gather, which covers reshuffles such
/// as window partitioning, rolls, padding, slicing and nearest upsampling.
/// Index [`ResampleMap::ZERO`] reads as zero.
#[derive(Clone, Debug)]
pub struct ResampleMap<T> {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    taps: usize,
    index: Vec<usize>,
    weight: Option<Vec<T>>,
}

impl<T: Real> ResampleMap<T> {
    /// Sentinel index producing a zero.
    pub const ZERO: usize = usize::MAX;

    pub fn gather(in_shape: &[usize], out_shape: &[usize], index: Vec<usize>) -> Result<Self> {
        Self::weighted(in_shape, out_shape, 1, index, None)
    }

    pub fn weighted(
        in_shape: &[usize],
        out_shape: &[usize],
        taps: usize,
        index: Vec<usize>,
        weight: Option<Vec<T>>,
    ) -> Result<Self> {
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        let bad_len = index.len() != n_out * taps
            || weight.as_ref().is_some_and(|w| w.len() != index.len());
        if bad_len || index.iter().any(|&i| i != Self::ZERO && i >= n_in) {
            return Err(shape_err(
                "resample",
                format!("inconsistent map {in_shape:?} -> {out_shape:?} with {taps} taps"),
            ));
        }
        Ok(Self {
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            taps,
            index,
            weight,
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2x(c: usize, h: usize, w: usize) -> Self {
        let (oh, ow) = (2 * h, 2 * w);
        let mut index = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    index.push((ch * h + y / 2) * w + x / 2);
                }
            }
        }
        Self::gather(&[c, h, w], &[c, oh, ow], index).expect("valid by construction")
    }

    /// Bilinear resize of `[C,H,W]` to `[C,oh,ow]` with half-pixel centres
    /// (the `align_corners = false` convention).
    pub fn bilinear(c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = axis(h, oh);
        let xs = axis(w, ow);
        let mut index = Vec::with_capacity(c * oh * ow * 4);
        let mut weight = Vec::with_capacity(c * oh * ow * 4);
        for ch in 0..c {
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let at = |y: usize, x: usize| (ch * h + y) * w + x;
                    index.extend([at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)]);
                    weight.extend([
                        T::of((1.0 - ly) * (1.0 - lx)),
                        T::of((1.0 - ly) * lx),
                        T::of(ly * (1.0 - lx)),
                        T::of(ly * lx),
                    ]);
                }
            }
        }
        Self::weighted(&[c, h, w], &[c, oh, ow], 4, index, Some(weight))
            .expect("valid by construction")
    }

    /// Numpy-style broadcast of `in_shape` to `out_shape`.
    pub fn broadcast(in_shape: &[usize], out_shape: &[usize]) -> Result<Self> {
        let fits = super::elementwise::broadcast_shape(in_shape, out_shape)
            .is_some_and(|s| s == out_shape);
        if !fits {
            return Err(shape_err(
                "broadcast",
                format!("{in_shape:?} cannot expand to {out_shape:?}"),
            ));
        }
        let n: usize = out_shape.iter().product();
        let mut index = vec![0; n];
        super::elementwise::for_each_broadcast(out_shape, out_shape, in_shape, |i, _, ib| {
            index[i] = ib
        });
        Self::gather(in_shape, out_shape, index)
    }

    /// Reflection padding (mirror without repeating the edge) of `[C,H,W]`.
    pub fn reflect_pad(c: usize, h: usize, w: usize, pad: usize) -> Result<Self> {
        if pad >= h || pad >= w {
            return Err(shape_err(
                "reflect_pad",
                format!("pad {pad} needs a map larger than {h}x{w}"),
            ));
        }
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            r as usize
        };
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut index = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                let sy = reflect(y as isize - pad as isize, h);
                for x in 0..pw {
                    let sx = reflect(x as isize - pad as isize, w);
                    index.push((ch * h + sy) * w + sx);
                }
            }
        }
        Self::gather(&[c, h, w], &[c, ph, pw], index)
    }

    /// Applies the map to a plain tensor (no tape).
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(shape_err(
                "resample",
                format!("map expects {:?}, got {:?}", self.in_shape, x.shape()),
            ));
        }
        let n_out: usize = self.out_shape.iter().product();
        let src = x.data();
        let mut out = vec![T::zero(); n_out];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for t in 0..self.taps {
                let k = o * self.taps + t;
                let i = self.index[k];
                if i != Self::ZERO {
                    acc += match &self.weight {
                        Some(w) => w[k] * src[i],
                        None => src[i],
                    };
                }
            }
            *slot = acc;
        }
        Tensor::new(self.out_shape.clone(), out)
    }
}

/// Unfolds `[C,H,W]` into `[C*kh*kw, oh*ow]` patches.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * oh * ow];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(ch * h + iy as usize) * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    dx: &mut [T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dx[(ch * h + iy as usize) * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let err = |why: &str| {
        shape_err(
            "conv2d",
            format!("input {x:?}, kernel {k:?}, stride {stride}, pad {pad}: {why}"),
        )
    };
    if x.len() != 3 || k.len() != 4 || k[1] != x[0] {
        return Err(err("expected [C,H,W] and [O,C,kh,kw]"));
    }
    let (c, h, w, o, kh, kw) = (x[0], x[1], x[2], k[0], k[2], k[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(err("kernel dims must be odd"));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(err("kernel larger than padded input"));
    }
    if !(h + 2 * pad - kh).is_multiple_of(stride) || !(w + 2 * pad - kw).is_multiple_of(stride) {
        return Err(err("stride does not divide the padded extent"));
    }
    Ok(ConvGeom {
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-D cross-correlation of `[C,H,W]` with `[O,C,kh,kw]` and zero padding.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let g = conv_geom(xv.shape(), wv.shape(), stride, pad)?;
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [g.o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", b.shape(), g.o),
                ));
            }
        }
        let ckk = g.c * g.kh * g.kw;
        let npix = g.oh * g.ow;
        let cols = im2col(
            xv.data(),
            (g.c, g.h, g.w),
            (g.kh, g.kw),
            stride,
            pad,
            (g.oh, g.ow),
        );
        let mut out = vec![T::zero(); g.o * npix];
        if let Some(b) = &bv {
            for (row, &bias) in out.chunks_mut(npix).zip(b.data()) {
                row.iter_mut().for_each(|v| *v = bias);
            }
        }
        gemm(false, false, g.o, ckk, npix, wv.data(), &cols, T::one(), &mut out);
        self.tape.count_flops(2 * g.o * ckk * npix);
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        Ok(self.tape.record(
            Tensor::new([g.o, g.oh, g.ow], out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                stride,
                pad,
            },
            &parents,
        ))
    }

    /// 2×2 max pooling with stride 2 on `[C,H,W]`; H and W must be even.
    pub fn maxpool2(self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let s = xv.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(shape_err(
                "maxpool2",
                format!("{s:?} is not [C,H,W] with even H and W"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut choice = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let d = xv.data();
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    let offsets = [0, 1, w, w + 1];
                    let mut best = 0;
                    for k in 1..4 {
                        if d[base + offsets[k]] > d[base + offsets[best]] {
                            best = k;
                        }
                    }
                    argmax.push(base);
                    choice.push(best as u8);
                }
            }
        }
        let winners = self.tape.decide(choice);
        let offsets = [0, 1, w, w + 1];
        for (a, &k) in argmax.iter_mut().zip(&winners) {
            *a += offsets[k as usize];
        }
        let out = argmax.iter().map(|&i| d[i]).collect();
        self.tape.count_flops(xv.numel());
        Ok(self.tape.record(
            Tensor::new([c, oh, ow], out)?,
            Op::MaxPool2 {
                x: self.id,
                argmax,
            },
            &[self.id],
        ))
    }

    /// Applies a fixed [`ResampleMap`].
    pub fn resample(self, map: &Rc<ResampleMap<T>>) -> Result<Var<'t, T>> {
        let out = map.apply(&self.value())?;
        self.tape.count_flops(2 * out.numel() * map.taps);
        Ok(self.tape.record(
            out,
            Op::Resample {
                x: self.id,
                map: Rc::clone(map),
            },
            &[self.id],
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2x(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("{s:?} is not [C,H,W]")));
        }
        self.resample(&Rc::new(ResampleMap::upsample2x(s[0], s[1], s[2])))
    }

    /// Bilinear resize of `[C,H,W]` to `[C,oh,ow]`.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 || oh == 0 || ow == 0 {
            return Err(shape_err(
                "resize_bilinear",
                format!("{s:?} -> {oh}x{ow}"),
            ));
        }
        if s[1] == oh && s[2] == ow {
            return Ok(self);
        }
        self.resample(&Rc::new(ResampleMap::bilinear(s[0], s[1], s[2], oh, ow)))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let map = ResampleMap::broadcast(&self.shape(), shape)?;
        self.resample(&Rc::new(map))
    }

    /// Global average pool of `[C,H,W]` to `[C]`.
    pub fn avgpool_global(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(shape_err("avgpool_global", format!("{s:?} is not [C,H,W]")));
        }
        self.reshape(&[s[0], s[1] * s[2]])?.mean_axis(1)
    }
}

pub(super) fn conv2d_backward<T: Real>(
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let (xv, wv) = (sink.value(x), sink.value(w));
    let geo = conv_geom(xv.shape(), wv.shape(), stride, pad).expect("validated in forward");
    let ckk = geo.c * geo.kh * geo.kw;
    let npix = geo.oh * geo.ow;
    let dims = (geo.c, geo.h, geo.w);
    let k = (geo.kh, geo.kw);
    let o = (geo.oh, geo.ow);
    let gd = g.data();
    if sink.wants(w) {
        let cols = im2col(xv.data(), dims, k, stride, pad, o);
        sink.add_with(w, |gw| {
            gemm(false, true, geo.o, npix, ckk, gd, &cols, T::one(), gw);
        });
    }
    if sink.wants(x) {
        let mut dcols = vec![T::zero(); ckk * npix];
        gemm(true, false, ckk, geo.o, npix, wv.data(), gd, T::zero(), &mut dcols);
        sink.add_with(x, |gx| col2im(&dcols, gx, dims, k, stride, pad, o));
    }
    if let Some(b) = b {
        sink.add_with(b, |gb| {
            for (acc, row) in gb.iter_mut().zip(gd.chunks(npix)) {
                *acc += row.iter().copied().sum::<T>();
            }
        });
    }
}

pub(super) fn maxpool_backward<T: Real>(
    x: usize,
    argmax: &[usize],
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    sink.add_with(x, |gx| {
        for (&i, &gv) in argmax.iter().zip(g.data()) {
            gx[i] += gv;
        }
    });
}

pub(super) fn resample_backward<T: Real>(
    x: usize,
    map: &ResampleMap<T>,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    sink.add_with(x, |gx| {
        for (o, &gv) in g.data().iter().enumerate() {
            for t in 0..map.taps {
                let k = o * map.taps + t;
                let i = map.index[k];
                if i != ResampleMap::<T>::ZERO {
                    gx[i] += match &map.weight {
                        Some(w) => w[k] * gv,
                        None => gv,
                    };
                }
            }
        }
    });
}
