use super::{GradSink, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{strides, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Gelu,
    Exp,
    Ln,
    Square,
}

/// Numpy-style (right-aligned) broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        if i + s.len() >= r {
            s[i + s.len() - r]
        } else {
            1
        }
    };
    (0..r)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Some(da)
            } else if da == 1 {
                Some(db)
            } else {
                None
            }
        })
        .collect()
}

/// Strides of `shape` aligned to `out`, zero along broadcast dims.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == b {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn gelu<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = k * (T::one() + T::of(3.0) * c * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        assert!(self.same_tape(&other), "operands live on different tapes");
        let (av, bv) = (self.value(), other.value());
        let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            shape_err(
                "elementwise",
                format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()),
            )
        })?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        let (a, b) = (av.data(), bv.data());
        let f: fn(T, T) -> T = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        for_each_broadcast(&out_shape, av.shape(), bv.shape(), |i, ia, ib| {
            out[i] = f(a[ia], b[ib])
        });
        self.tape.count_flops(n);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.tape.record(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let v = self.value().map(|x| x * c);
        self.tape.count_flops(v.numel());
        self.tape.record(v, Op::Scale { x: self.id, c }, &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let v = self.value().map(|x| x + c);
        self.tape.count_flops(v.numel());
        self.tape.record(v, Op::AddScalar { x: self.id }, &[self.id])
    }

    /// `c - self`
    pub fn rsub_scalar(self, c: f64) -> Var<'t, T> {
        self.scale(-1.0).add_scalar(c)
    }

    fn unary(self, kind: UnaryKind) -> Var<'t, T> {
        let xv = self.value();
        let v = match kind {
            UnaryKind::Relu => {
                let on = self.tape.decide(xv.data().iter().map(|&x| (x > T::zero()) as u8).collect());
                let data = xv.data().iter().zip(&on).map(|(&x, &k)| if k == 1 { x } else { T::zero() }).collect();
                Tensor::new(xv.shape().to_vec(), data).expect("same length")
            }
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Gelu => xv.map(|x| gelu(x).0),
            UnaryKind::Exp => xv.map(T::exp),
            UnaryKind::Ln => xv.map(T::ln),
            UnaryKind::Square => xv.map(|x| x * x),
        };
        self.tape.count_flops(v.numel());
        self.tape.record(v, Op::Unary { kind, x: self.id }, &[self.id])
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(UnaryKind::Ln)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(UnaryKind::Square)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let xv = self.value();
        let side = self.tape.decide(
            xv.data()
                .iter()
                .map(|&x| if x <= lo { 0 } else if x < hi { 1 } else { 2 })
                .collect(),
        );
        let data = xv
            .data()
            .iter()
            .zip(&side)
            .map(|(&x, &k)| match k {
                0 => lo,
                1 => x,
                _ => hi,
            })
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data).expect("same length");
        self.tape
            .record(v, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(super) fn binary_backward<T: Real>(
    kind: BinaryKind,
    a: usize,
    b: usize,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let av = sink.value(a);
    let bv = sink.value(b);
    let out_shape = g.shape().to_vec();
    let gd = g.data();
    let (ad, bd) = (av.data(), bv.data());
    if sink.wants(a) {
        sink.add_with(a, |ga| {
            for_each_broadcast(&out_shape, av.shape(), bv.shape(), |i, ia, ib| {
                ga[ia] += match kind {
                    BinaryKind::Add | BinaryKind::Sub => gd[i],
                    BinaryKind::Mul => gd[i] * bd[ib],
                    BinaryKind::Div => gd[i] / bd[ib],
                }
            })
        });
    }
    if sink.wants(b) {
        sink.add_with(b, |gb| {
            for_each_broadcast(&out_shape, av.shape(), bv.shape(), |i, ia, ib| {
                gb[ib] += match kind {
                    BinaryKind::Add => gd[i],
                    BinaryKind::Sub => -gd[i],
                    BinaryKind::Mul => gd[i] * ad[ia],
                    BinaryKind::Div => -gd[i] * ad[ia] / (bd[ib] * bd[ib]),
                }
            })
        });
    }
}

pub(super) fn unary_backward<T: Real>(
    kind: UnaryKind,
    x: usize,
    out: &Tensor<T>,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let xv = sink.value(x);
    let (xd, yd, gd) = (xv.data(), out.data(), g.data());
    sink.add_with(x, |gx| {
        for i in 0..gd.len() {
            let d = match kind {
                UnaryKind::Relu => {
                    if xd[i] > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Sigmoid => yd[i] * (T::one() - yd[i]),
                UnaryKind::Gelu => gelu(xd[i]).1,
                UnaryKind::Exp => yd[i],
                UnaryKind::Ln => T::one() / xd[i],
                UnaryKind::Square => T::of(2.0) * xd[i],
            };
            gx[i] += gd[i] * d;
        }
    });
}

pub(super) fn clamp_backward<T: Real>(
    x: usize,
    lo: T,
    hi: T,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let xv = sink.value(x);
    sink.add_with(x, |gx| {
        for ((o, &xi), &gi) in gx.iter_mut().zip(xv.data()).zip(g.data()) {
            if xi > lo && xi < hi {
                *o += gi;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 5], &[3, 1]), Some(vec![2, 3, 5]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
    }

    #[test]
    fn bias_broadcast_and_reduction() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([3, 2], |i| i as f64));
        let b = tape.param(Tensor::from_f64([2], &[10.0, 20.0]).unwrap());
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[10.0, 21.0, 12.0, 23.0, 14.0, 25.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn channel_scale_broadcast() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones([2, 2, 2]));
        let s = tape.param(Tensor::from_f64([2, 1, 1], &[2.0, 3.0]).unwrap());
        let y = x.mul(s).unwrap();
        assert_eq!(y.value().data(), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-1000.0f64) >= 0.0);
        assert!((sigmoid(1000.0f64) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_changes_branch_signature() {
        let sig = |v: f64| {
            let tape = Tape::<f64>::new();
            tape.constant(Tensor::from_f64([2], &[v, 1.0]).unwrap()).relu();
            tape.branch_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
