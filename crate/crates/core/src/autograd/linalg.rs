use super::{GradSink, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Resolved dims of a (possibly batched) product `op(a) · op(b)`.
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn mat_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatDims> {
    let err = || {
        shape_err(
            "matmul",
            format!("incompatible operands {a:?}{} x {b:?}{}", t(ta), t(tb)),
        )
    };
    let (batch, a2, b2) = match (a.len(), b.len()) {
        (2, 2) => (1, a, b),
        (3, 3) if a[0] == b[0] => (a[0], &a[1..], &b[1..]),
        _ => return Err(err()),
    };
    let (m, ka) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
    let (kb, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
    if ka != kb {
        return Err(err());
    }
    Ok(MatDims { batch, m, k: ka, n })
}

fn t(flag: bool) -> &'static str {
    if flag {
        "ᵀ"
    } else {
        ""
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Matrix product of two `[m,k]·[k,n]` matrices, or a batched product of
    /// `[B,m,k]·[B,k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `ta`/`tb` transpose the last two dims.
    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), other.value());
        let MatDims { batch, m, k, n } = mat_dims(av.shape(), bv.shape(), ta, tb)?;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                ta,
                tb,
                m,
                k,
                n,
                &av.data()[bi * m * k..],
                &bv.data()[bi * k * n..],
                T::zero(),
                &mut out[bi * m * n..],
            );
        }
        self.tape.count_flops(2 * batch * m * k * n);
        let shape = if av.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Ok(self.tape.record(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            &[self.id, other.id],
        ))
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(self) -> Var<'t, T> {
        let xv = self.value();
        let n = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.tape.count_flops(3 * out.len());
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.tape.record(value, Op::Softmax { x: self.id }, &[self.id])
    }

    /// Normalizes each last-dim slice to zero mean / unit variance, then
    /// applies `gamma * x̂ + beta`.
    pub fn layernorm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let xv = self.value();
        let c = *xv.shape().last().unwrap_or(&0);
        let (gv, bv) = (gamma.value(), beta.value());
        if c == 0 || gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(
                "layernorm",
                format!(
                    "input {:?} with gamma {:?} / beta {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = xv.numel() / c;
        let eps = T::of(eps);
        let cn = T::of(c as f64);
        let mut out = vec![T::zero(); xv.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (r, (row, o)) in xv.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..c {
                o[j] = (row[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
            debug_assert_eq!(mean.len(), r + 1);
        }
        self.tape.count_flops(8 * out.len());
        Ok(self.tape.record(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }
}

pub(super) fn matmul_backward<T: Real>(
    a: usize,
    b: usize,
    ta: bool,
    tb: bool,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let (av, bv) = (sink.value(a), sink.value(b));
    let MatDims { batch, m, k, n } =
        mat_dims(av.shape(), bv.shape(), ta, tb).expect("validated in forward");
    let gd = g.data();
    if sink.wants(a) {
        sink.add_with(a, |ga| {
            for bi in 0..batch {
                let gb = &gd[bi * m * n..];
                let bb = &bv.data()[bi * k * n..];
                let out = &mut ga[bi * m * k..];
                if ta {
                    // a stored [k,m]: dA = op(B) · Gᵀ
                    gemm(tb, true, k, n, m, bb, gb, T::one(), out);
                } else {
                    // dA = G · op(B)ᵀ
                    gemm(false, !tb, m, n, k, gb, bb, T::one(), out);
                }
            }
        });
    }
    if sink.wants(b) {
        sink.add_with(b, |gbuf| {
            for bi in 0..batch {
                let gb = &gd[bi * m * n..];
                let ab = &av.data()[bi * m * k..];
                let out = &mut gbuf[bi * k * n..];
                if tb {
                    // b stored [n,k]: dB = Gᵀ · op(A)
                    gemm(true, ta, n, m, k, gb, ab, T::one(), out);
                } else {
                    // dB = op(A)ᵀ · G
                    gemm(!ta, false, k, m, n, ab, gb, T::one(), out);
                }
            }
        });
    }
}

pub(super) fn softmax_backward<T: Real>(
    x: usize,
    out: &Tensor<T>,
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let n = *out.shape().last().unwrap_or(&1);
    sink.add_with(x, |gx| {
        for ((y, gy), o) in out
            .data()
            .chunks(n)
            .zip(g.data().chunks(n))
            .zip(gx.chunks_mut(n))
        {
            let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
            for j in 0..n {
                o[j] += y[j] * (gy[j] - dot);
            }
        }
    });
}

pub(super) fn layernorm_backward<T: Real>(
    x: usize,
    gamma: usize,
    beta: usize,
    mean: &[T],
    rstd: &[T],
    g: &Tensor<T>,
    sink: &mut GradSink<'_, T>,
) {
    let xv = sink.value(x);
    let gv = sink.value(gamma);
    let c = gv.numel();
    let cn = T::of(c as f64);
    let xhat = |r: usize, j: usize| (xv.data()[r * c + j] - mean[r]) * rstd[r];
    if sink.wants(x) {
        sink.add_with(x, |gx| {
            for (r, gy) in g.data().chunks(c).enumerate() {
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..c {
                    let d = gy[j] * gv.data()[j];
                    s1 += d;
                    s2 += d * xhat(r, j);
                }
                for j in 0..c {
                    let d = gy[j] * gv.data()[j];
                    gx[r * c + j] += rstd[r] * (d - s1 / cn - xhat(r, j) * s2 / cn);
                }
            }
        });
    }
    sink.add_with(gamma, |gg| {
        for (r, gy) in g.data().chunks(c).enumerate() {
            for j in 0..c {
                gg[j] += gy[j] * xhat(r, j);
            }
        }
    });
    sink.add_with(beta, |gb| {
        for gy in g.data().chunks(c) {
            for j in 0..c {
                gb[j] += gy[j];
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        let p = m.matmul(col).unwrap();
        assert_eq!(p.shape(), vec![2, 1]);
        assert_eq!(p.value().data(), &[2.0, 4.0]);
        let z = tape.constant(Tensor::zeros([3, 3]));
        let any = tape.constant(Tensor::from_fn([3, 3], |i| i as f64 * 1.7 - 3.0));
        assert!(z.matmul(any).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matches_per_batch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([2, 2, 3], |i| (i as f64).sin()));
        let b = tape.constant(Tensor::from_fn([2, 2, 3], |i| (i as f64).cos()));
        let c = a.matmul_t(b, false, true).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 2]);
        let av = a.value();
        let bv = b.value();
        for bi in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let want: f64 = (0..3)
                        .map(|k| av.at(&[bi, i, k]) * bv.at(&[bi, j, k]))
                        .sum();
                    assert!((c.value().at(&[bi, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let u = tape.constant(t(&[4], &[0.0; 4])).softmax();
        assert!(u.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let m = tape.constant(t(&[4], &[0.0, 0.0, 0.0, -100.0])).softmax();
        let mv = m.value();
        let expect = 1.0 / (3.0 + (-100.0f64).exp());
        for v in &mv.data()[..3] {
            assert!((v - expect).abs() < 1e-15);
        }
        assert!(mv.data()[3] < 1e-30);
        let big = tape.constant(t(&[2], &[1000.0, 1000.0])).softmax();
        assert_eq!(big.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_examples() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones([4]));
        let zeros = tape.constant(Tensor::zeros([4]));
        let c = tape.constant(Tensor::full([4], 5.0));
        let y = c.layernorm(ones, zeros, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let g2 = tape.constant(Tensor::ones([2]));
        let b2 = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = x.layernorm(g2, b2, 1e-5).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.value().data()[0] - s).abs() < 1e-12);
        assert!((y.value().data()[1] + s).abs() < 1e-12);

        let three = tape.constant(Tensor::full([4], 3.0));
        let y = c.layernorm(ones, three, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 3.0));
    }
}
